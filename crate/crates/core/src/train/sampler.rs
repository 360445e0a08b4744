//! Per-epoch crop lists: one crop around each training nodule plus random
//! background crops, shuffled with the run seed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    augment, crop_3d, window_25d, Crop, Dataset, GtNodule, NoduleAnnotation, Volume,
};
use crate::detection::{BBox, GtBox};
use crate::error::Result;
use crate::network::InputMode;
use crate::params::fnv1a;

/// Where to cut one training crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub volume: usize,
    /// `(z, y, x)` of the first voxel; in 2.5D `z` is the centre slice.
    pub origin: [isize; 3],
    pub augment_seed: Option<u64>,
}

/// Samples crop positions for one epoch. `extents` is the network input
/// `(d, h, w)`; in 2.5D `d` is the slice count.
pub fn epoch_crops(
    data: &Dataset,
    mode: InputMode,
    extents: [usize; 3],
    background_per_positive: f64,
    augment: bool,
    seed: u64,
    epoch: usize,
) -> Vec<CropSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, &format!("epoch-{epoch}")));
    let mut out = Vec::new();
    for a in &data.annotations {
        let vi = data
            .volumes
            .iter()
            .position(|v| v.scan_id == a.scan_id)
            .expect("dataset annotations refer to loaded volumes");
        out.push((
            vi,
            positive_origin(&data.volumes[vi], a, mode, extents, &mut rng),
        ));
    }
    let n_bg = (out.len() as f64 * background_per_positive).round() as usize;
    let n_bg = if data.annotations.is_empty() {
        data.volumes.len()
    } else {
        n_bg
    };
    for _ in 0..n_bg {
        let vi = rng.random_range(0..data.volumes.len());
        out.push((
            vi,
            random_origin(&data.volumes[vi], mode, extents, &mut rng),
        ));
    }
    out.shuffle(&mut rng);
    out.into_iter()
        .map(|(volume, origin)| CropSpec {
            volume,
            origin,
            augment_seed: augment.then(|| rng.random()),
        })
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, extent: usize) -> isize {
    let j = (extent / 4) as i64;
    rng.random_range(-j..=j) as isize
}

fn positive_origin(
    v: &Volume,
    a: &NoduleAnnotation,
    mode: InputMode,
    extents: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> [isize; 3] {
    let centre = [a.z, a.y, a.x].map(|c| c.round() as isize);
    let mut o = [0isize; 3];
    for axis in 1..3 {
        o[axis] = centre[axis] - (extents[axis] / 2) as isize + jitter(rng, extents[axis]);
    }
    o[0] = match mode {
        InputMode::Volume3d => centre[0] - (extents[0] / 2) as isize + jitter(rng, extents[0]),
        InputMode::MultiChannel25d => {
            let reach = ((a.diameter_mm / 2.0 / v.spacing_mm[0]).floor() as i64).min(1);
            let dz = rng.random_range(-reach..=reach) as isize;
            (centre[0] + dz).clamp(0, v.depth() as isize - 1)
        }
    };
    o
}

fn random_origin(
    v: &Volume,
    mode: InputMode,
    extents: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> [isize; 3] {
    let pick = |rng: &mut ChaCha8Rng, len: usize, ext: usize| -> isize {
        if len > ext {
            rng.random_range(0..=(len - ext) as i64) as isize
        } else {
            0
        }
    };
    let z = match mode {
        InputMode::Volume3d => pick(rng, v.depth(), extents[0]),
        InputMode::MultiChannel25d => rng.random_range(0..v.depth() as i64) as isize,
    };
    [
        z,
        pick(rng, v.height(), extents[1]),
        pick(rng, v.width(), extents[2]),
    ]
}

/// Cuts the crop and collects the nodules whose centres fall inside it, as
/// boxes in the anchor frame (voxel `i` spans `[i, i + 1)`).
pub fn materialize(
    data: &Dataset,
    spec: &CropSpec,
    mode: InputMode,
    extents: [usize; 3],
) -> Result<(Crop, Vec<GtBox>)> {
    let v = &data.volumes[spec.volume];
    let (crop, z0) = match mode {
        InputMode::Volume3d => (crop_3d(v, spec.origin, extents)?, spec.origin[0] as f64),
        InputMode::MultiChannel25d => {
            let c = spec.origin[0] as usize;
            let win = window_25d(
                v,
                c,
                extents[0],
                [spec.origin[1], spec.origin[2]],
                [extents[1], extents[2]],
            )?;
            (win, c as f64 - (extents[0] / 2) as f64)
        }
    };
    let gts: Vec<GtNodule> = data
        .annotations_of(&v.scan_id)
        .map(|a| GtNodule {
            x: a.x - spec.origin[2] as f64,
            y: a.y - spec.origin[1] as f64,
            z: a.z - z0,
            diameter_vox: a.diameter_mm / v.spacing_mm[2],
            category: a.category,
        })
        .collect();
    let (crop, gts) = match spec.augment_seed {
        Some(s) => augment(&crop, &gts, s),
        None => (crop, gts),
    };
    let inside = |g: &GtNodule| {
        let within = |p: f64, n: usize| p >= -0.5 && p < n as f64 - 0.5;
        within(g.z, extents[0]) && within(g.y, extents[1]) && within(g.x, extents[2])
    };
    let aspect = v.spacing_mm[2] / v.spacing_mm[1];
    let boxes = gts
        .iter()
        .filter(|g| inside(g))
        .map(|g| GtBox {
            bbox: BBox::new(
                g.x + 0.5,
                g.y + 0.5,
                g.z + 0.5,
                g.diameter_vox,
                g.diameter_vox * aspect,
            ),
            class: g.category.class_index(),
        })
        .collect();
    Ok((crop, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Category, SynthSpec};

    fn dataset() -> Dataset {
        let spec = SynthSpec {
            n_volumes: 2,
            volume_extents: [16, 64, 64],
            nodules_per_volume: [2, 2],
            ..Default::default()
        };
        let mut volumes = Vec::new();
        let mut annotations = Vec::new();
        for i in 0..2 {
            let (v, a) = crate::data::synth_volume(&spec, i).unwrap();
            volumes.push(v);
            annotations.extend(a);
        }
        Dataset {
            volumes,
            annotations,
        }
    }

    #[test]
    fn counts_and_determinism() {
        let d = dataset();
        let a = epoch_crops(&d, InputMode::Volume3d, [8, 32, 32], 1.0, true, 3, 0);
        assert_eq!(a.len(), 8);
        assert_eq!(
            a,
            epoch_crops(&d, InputMode::Volume3d, [8, 32, 32], 1.0, true, 3, 0)
        );
        assert_ne!(
            a,
            epoch_crops(&d, InputMode::Volume3d, [8, 32, 32], 1.0, true, 3, 1)
        );
        assert_eq!(
            epoch_crops(&d, InputMode::Volume3d, [8, 32, 32], 0.0, false, 3, 0).len(),
            4
        );
    }

    #[test]
    fn positive_crops_contain_their_nodule() {
        let d = dataset();
        for mode in [InputMode::Volume3d, InputMode::MultiChannel25d] {
            let ext = [if mode == InputMode::Volume3d { 8 } else { 5 }, 32, 32];
            let crops = epoch_crops(&d, mode, ext, 0.0, false, 5, 2);
            for c in &crops {
                let (crop, gts) = materialize(&d, c, mode, ext).unwrap();
                assert_eq!(crop.extents, ext);
                assert!(!gts.is_empty());
                for g in &gts {
                    assert!(g.bbox.z > 0.0 && g.bbox.z <= ext[0] as f64);
                    assert!(g.bbox.x > 0.0 && g.bbox.x <= 32.0);
                }
            }
        }
    }

    #[test]
    fn gt_box_in_anchor_frame() {
        let v = Volume::new("s", [4, 32, 32], [1.0, 0.5, 0.5], vec![0.0; 4 * 32 * 32]).unwrap();
        let a = NoduleAnnotation {
            scan_id: "s".into(),
            x: 10.0,
            y: 12.0,
            z: 2.0,
            diameter_mm: 4.0,
            category: Category::SolidSmall,
        };
        let d = Dataset {
            volumes: vec![v],
            annotations: vec![a],
        };
        let spec = CropSpec {
            volume: 0,
            origin: [0, 4, 2],
            augment_seed: None,
        };
        let (_, gts) = materialize(&d, &spec, InputMode::Volume3d, [4, 16, 16]).unwrap();
        assert_eq!(gts.len(), 1);
        assert_eq!(gts[0].bbox, BBox::new(8.5, 8.5, 2.5, 8.0, 8.0));
        assert_eq!(gts[0].class, Category::SolidSmall.class_index());
        // 2.5D: window of 3 slices centred on slice 2 starts at slice 1
        let spec = CropSpec {
            volume: 0,
            origin: [2, 4, 2],
            augment_seed: None,
        };
        let (_, gts) = materialize(&d, &spec, InputMode::MultiChannel25d, [3, 16, 16]).unwrap();
        assert_eq!(gts[0].bbox.z, 1.5);
    }
}
