use super::anchors::AnchorBox;
use super::boxes::decode;
use super::nms::{nms, Detection};
use crate::data::{crop_3d, window_25d, Category, Crop, Volume};
use crate::error::{Error, Result};
use crate::network::{InputMode, Network};
use crate::params::{Forward, ParamStore};
use crate::tensor::log_softmax_row;
use crate::{Scalar, Tensor};

const TILE_BATCH: usize = 4;

/// Turns one image's `[A, K]` logits and `[A, 4]` offsets into detections
/// with probability `1 - p(background)` at least `floor`, labelled with the
/// most likely nodule class.
///
/// Anchors live in crop coordinates where voxel `i` spans `[i, i + 1)`;
/// outputs are voxel-index coordinates, shifted by `origin` (z, y, x).
pub fn decode_predictions<T: Scalar>(
    anchors: &[AnchorBox],
    cls: &[T],
    reg: &[T],
    floor: f64,
    origin: [f64; 3],
    scan_id: &str,
) -> Vec<Detection> {
    let k = cls.len() / anchors.len().max(1);
    let mut out = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let ls = log_softmax_row(&cls[i * k..(i + 1) * k]);
        let prob = (1.0 - ls[0].f64().exp()).clamp(0.0, 1.0);
        if prob < floor {
            continue;
        }
        let mut best = 1;
        for c in 2..k {
            if ls[c] > ls[best] {
                best = c;
            }
        }
        let Some(category) = Category::from_class_index(best) else {
            continue;
        };
        let t = [0, 1, 2, 3].map(|j| reg[i * 4 + j].f64());
        let b = decode(&anchor.bbox, t);
        if !(b.w.is_finite() && b.h.is_finite() && b.w > 0.0 && b.h > 0.0) {
            continue;
        }
        out.push(Detection {
            scan_id: scan_id.to_string(),
            x: b.x - 0.5 + origin[2],
            y: b.y - 0.5 + origin[1],
            z: b.z - 0.5 + origin[0],
            w: b.w,
            h: b.h,
            prob,
            category,
        });
    }
    out
}

/// Tile start positions covering `extent` with the given fractional
/// overlap. A volume shorter than the tile gets a single, padded tile; one
/// shorter than half a tile is rejected.
pub fn tile_origins(extent: usize, tile: usize, overlap: f64) -> Result<Vec<isize>> {
    if extent * 2 < tile {
        return Err(Error::Input(format!(
            "volume extent {extent} is less than half the tile extent {tile}"
        )));
    }
    if extent <= tile {
        return Ok(vec![0]);
    }
    let step = (tile - (tile as f64 * overlap).round() as usize).max(1);
    let mut out: Vec<isize> = (0..)
        .map(|i| i * step)
        .take_while(|&o| o + tile < extent)
        .map(|o| o as isize)
        .collect();
    out.push((extent - tile) as isize);
    out.dedup();
    Ok(out)
}

struct Tile {
    crop: Crop,
    /// Offset from crop coordinates to volume voxel indices.
    origin: [f64; 3],
}

fn tiles(net: &Network, v: &Volume) -> Result<Vec<Tile>> {
    let [td, th, tw] = net.cfg.detection.tile;
    let [od, ohw] = net.cfg.detection.tile_overlap;
    let ys = tile_origins(v.height(), th, ohw)?;
    let xs = tile_origins(v.width(), tw, ohw)?;
    let mut out = Vec::new();
    match net.cfg.input_mode {
        InputMode::Volume3d => {
            for &z in &tile_origins(v.depth(), td, od)? {
                for &y in &ys {
                    for &x in &xs {
                        out.push(Tile {
                            crop: crop_3d(v, [z, y, x], [td, th, tw])?,
                            origin: [z as f64, y as f64, x as f64],
                        });
                    }
                }
            }
        }
        InputMode::MultiChannel25d => {
            let n = net.cfg.n_slices;
            for c in 0..v.depth() {
                for &y in &ys {
                    for &x in &xs {
                        out.push(Tile {
                            crop: window_25d(v, c, n, [y, x], [th, tw])?,
                            origin: [c as f64 - (n / 2) as f64, y as f64, x as f64],
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

fn batch_input<T: Scalar>(net: &Network, tiles: &[Tile]) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    for t in tiles {
        data.extend(t.crop.data.iter().map(|&v| T::cast(v as f64)));
    }
    let [c, d, h, w] = net.input_shape;
    Tensor::new(&[tiles.len(), c, d, h, w], data)
}

/// Runs the network over overlapping tiles of `v` and merges the decoded
/// boxes with cross-tile suppression. Boxes centred in the padding are
/// dropped.
pub fn detect_volume<T: Scalar>(
    net: &Network,
    store: &ParamStore<T>,
    v: &Volume,
) -> Result<Vec<Detection>> {
    let cfg = &net.cfg.detection;
    let tiles = tiles(net, v)?;
    let chunks: Vec<&[Tile]> = tiles.chunks(TILE_BATCH).collect();
    let per_chunk = crate::parallel::map_range(chunks.len(), |i| -> Result<Vec<Detection>> {
        let chunk = chunks[i];
        let x = batch_input::<T>(net, chunk)?;
        let out = net.forward(&Forward::eval(store), &x)?;
        let a = net.anchors().len();
        let k = net.cfg.num_classes;
        let (cls, reg) = (out.cls.data(), out.reg.data());
        let mut dets = Vec::new();
        for (j, t) in chunk.iter().enumerate() {
            dets.extend(decode_predictions(
                net.anchors(),
                &cls[j * a * k..(j + 1) * a * k],
                &reg[j * a * 4..(j + 1) * a * 4],
                cfg.prob_floor,
                t.origin,
                &v.scan_id,
            ));
        }
        Ok(dets)
    });
    let mut all = Vec::new();
    for r in per_chunk {
        all.extend(r?);
    }
    let inside = |d: &Detection| {
        let within = |p: f64, n: usize| p >= -0.5 && p <= n as f64 - 0.5;
        within(d.z, v.depth()) && within(d.y, v.height()) && within(d.x, v.width())
    };
    all.retain(inside);
    Ok(nms(all, cfg.nms_iou, cfg.max_per_scan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::BBox;
    use crate::network::Level;

    #[test]
    fn origins_cover_extent() {
        assert_eq!(tile_origins(64, 32, 0.5).unwrap(), [0, 16, 32]);
        assert_eq!(tile_origins(70, 32, 0.5).unwrap(), [0, 16, 32, 38]);
        assert_eq!(tile_origins(32, 32, 0.25).unwrap(), [0]);
        assert_eq!(tile_origins(20, 32, 0.25).unwrap(), [0]);
        assert!(tile_origins(15, 32, 0.25).is_err());
        assert_eq!(tile_origins(40, 16, 0.25).unwrap(), [0, 12, 24]);
    }

    fn anchor(x: f64, y: f64, z: f64, s: f64) -> AnchorBox {
        AnchorBox {
            bbox: BBox::new(x, y, z, s, s),
            level: Level::P2,
            scale_idx: 0,
            ratio_idx: 0,
        }
    }

    #[test]
    fn decode_thresholds_and_shifts() {
        let anchors = [anchor(2.0, 2.0, 2.0, 8.0), anchor(6.0, 2.0, 2.0, 8.0)];
        // 3 classes: background, class 1, class 2
        let cls = [0.0f64, 5.0, 1.0, 5.0, 0.0, 0.0];
        let reg = [0.0f64; 8];
        let d = decode_predictions(&anchors, &cls, &reg, 0.5, [10.0, 20.0, 30.0], "s");
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].x, d[0].y, d[0].z), (31.5, 21.5, 11.5));
        assert_eq!(d[0].category, Category::CalcSmall);
        let e = (5f64).exp();
        assert!((d[0].prob - (e + 1f64.exp()) / (1.0 + e + 1f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn overlapping_tiles_are_suppressed_across() {
        use crate::detection::iou;
        use crate::network::NetworkConfig;
        let mut cfg = NetworkConfig {
            stem_channels: 4,
            max_channels: 8,
            pyramid_channels: 4,
            active_levels: vec![Level::P4],
            ga_at_load: false,
            ga_at_fpn: false,
            ..Default::default()
        };
        cfg.detection.tile = [8, 32, 32];
        cfg.detection.prob_floor = 0.0;
        cfg.detection.max_per_scan = usize::MAX;
        let (net, mut store) = Network::build::<f32>(&cfg, 0).unwrap();
        // bias-only heads: identical boxes wherever tiles overlap
        for (name, p) in store.iter_mut() {
            if name.starts_with("head.") && name.ends_with(".weight") {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let v = Volume::new("v", [8, 32, 64], [1.0, 1.0, 1.0], vec![-850.0; 8 * 32 * 64]).unwrap();
        let raw: usize = tiles(&net, &v).unwrap().len() * net.anchors().len();
        let dets = detect_volume(&net, &store, &v).unwrap();
        assert!(!dets.is_empty() && dets.len() < raw);
        for (i, a) in dets.iter().enumerate() {
            for b in &dets[i + 1..] {
                assert!(
                    a.category != b.category || iou(&a.bbox(), &b.bbox()) <= cfg.detection.nms_iou
                );
            }
        }
        assert_eq!(dets, detect_volume(&net, &store, &v).unwrap());
    }
}
