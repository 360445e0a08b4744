use super::boxes::BBox;
use crate::network::Level;

/// A default box at one feature-map site, in crop coordinates where voxel
/// `i` spans `[i, i + 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox {
    pub bbox: BBox,
    pub level: Level,
    pub scale_idx: usize,
    pub ratio_idx: usize,
}

/// Anchors of one level ordered by `(d, h, w, scale, ratio)`, which is the
/// row order of the head outputs.
pub fn generate_level_anchors(
    level: Level,
    extent: [usize; 3],
    stride: [f64; 3],
    scales: &[f64],
    ratios: &[f64],
) -> Vec<AnchorBox> {
    let [d, h, w] = extent;
    let mut out = Vec::with_capacity(d * h * w * scales.len() * ratios.len());
    for dz in 0..d {
        for hy in 0..h {
            for wx in 0..w {
                for (si, &s) in scales.iter().enumerate() {
                    for (ri, &r) in ratios.iter().enumerate() {
                        out.push(AnchorBox {
                            bbox: BBox {
                                x: (wx as f64 + 0.5) * stride[2],
                                y: (hy as f64 + 0.5) * stride[1],
                                z: (dz as f64 + 0.5) * stride[0],
                                w: s * r.sqrt(),
                                h: s / r.sqrt(),
                            },
                            level,
                            scale_idx: si,
                            ratio_idx: ri,
                        });
                    }
                }
            }
        }
    }
    out
}

/// A level's feature extent and its per-axis stride relative to the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGrid {
    pub level: Level,
    pub extent: [usize; 3],
    pub stride: [f64; 3],
}

/// Concatenated anchors of several levels, in the given level order.
pub fn generate_anchors<'a>(
    grids: &[LevelGrid],
    scales: impl Fn(Level) -> &'a [f64],
    ratios: &[f64],
) -> Vec<AnchorBox> {
    grids
        .iter()
        .flat_map(|g| generate_level_anchors(g.level, g.extent, g.stride, scales(g.level), ratios))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_anchor() {
        let a = generate_level_anchors(Level::P2, [1, 1, 1], [4.0, 4.0, 4.0], &[8.0], &[1.0]);
        assert_eq!(a.len(), 1);
        let b = a[0].bbox;
        assert_eq!((b.x, b.y, b.z, b.w, b.h), (2.0, 2.0, 2.0, 8.0, 8.0));
    }

    #[test]
    fn counting() {
        let a = generate_level_anchors(Level::P1, [1, 2, 2], [2.0; 3], &[4.0, 6.0], &[1.0]);
        assert_eq!(a.len(), 8);
        let a = generate_level_anchors(
            Level::P1,
            [1, 32, 32],
            [1.0, 2.0, 2.0],
            &[4.0, 6.0, 8.0],
            &[0.5, 1.0, 2.0],
        );
        assert_eq!(a.len(), 32 * 32 * 9);
    }

    #[test]
    fn ordering_and_aspect() {
        let a = generate_level_anchors(Level::P3, [2, 2, 2], [8.0; 3], &[16.0], &[0.5, 2.0]);
        // second anchor shares the first site with the other ratio
        assert_eq!(a[0].bbox.x, a[1].bbox.x);
        assert!((a[0].bbox.w * a[0].bbox.h - 256.0).abs() < 1e-9);
        assert!((a[1].bbox.w / a[1].bbox.h - 2.0).abs() < 1e-12);
        // next w position
        assert_eq!(a[2].bbox.x, 12.0);
        // next depth position is after the full 2x2 plane
        assert_eq!(a[8].bbox.z, 12.0);
        assert_eq!(a.iter().filter(|x| x.ratio_idx == 1).count(), 8);
    }

    #[test]
    fn multi_level_concatenation() {
        let grids = [
            LevelGrid {
                level: Level::P2,
                extent: [1, 2, 2],
                stride: [4.0; 3],
            },
            LevelGrid {
                level: Level::P3,
                extent: [1, 1, 1],
                stride: [8.0; 3],
            },
        ];
        let scales = |l: Level| -> &'static [f64] {
            if l == Level::P2 {
                &[8.0]
            } else {
                &[16.0, 24.0]
            }
        };
        let a = generate_anchors(&grids, scales, &[1.0]);
        assert_eq!(a.len(), 4 + 2);
        assert_eq!(a[4].level, Level::P3);
    }
}
