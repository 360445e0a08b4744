//! Random axial flips and integer in-plane shifts, applied jointly to a crop
//! and its ground-truth nodules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::input::pad_value;
use super::volume::Category;
use crate::{Result, Scalar, Tensor};

pub const MAX_SHIFT: i32 = 4;

/// Normalized intensities of a `[d, h, w]` window.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub extents: [usize; 3],
    pub data: Vec<f32>,
}

impl Crop {
    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    /// `[1, 1, d, h, w]`.
    pub fn to_tensor_3d<T: Scalar>(&self) -> Result<Tensor<T>> {
        let [d, h, w] = self.extents;
        Tensor::new(&[1, 1, d, h, w], self.values())
    }

    /// Slices on the channel axis: `[1, d, 1, h, w]`.
    pub fn to_tensor_25d<T: Scalar>(&self) -> Result<Tensor<T>> {
        let [d, h, w] = self.extents;
        Tensor::new(&[1, d, 1, h, w], self.values())
    }

    fn values<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&v| T::cast(v as f64)).collect()
    }
}

/// A nodule in crop-local voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtNodule {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// In-plane diameter in voxels.
    pub diameter_vox: f64,
    pub category: Category,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub flip_x: bool,
    pub flip_y: bool,
    pub shift_x: i32,
    pub shift_y: i32,
}

impl AugmentDraw {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip_x: rng.random(),
            flip_y: rng.random(),
            shift_x: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            shift_y: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        }
    }

    /// Flips, then shifts; vacated voxels read as 0 HU.
    pub fn apply(&self, crop: &Crop, gts: &[GtNodule]) -> (Crop, Vec<GtNodule>) {
        let [d, h, w] = crop.extents;
        let fill = pad_value();
        let mut out = Crop {
            extents: crop.extents,
            data: vec![fill; crop.data.len()],
        };
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let fy = if self.flip_y { h - 1 - y } else { y } as i64 + self.shift_y as i64;
                    let fx = if self.flip_x { w - 1 - x } else { x } as i64 + self.shift_x as i64;
                    if fy < 0 || fx < 0 || fy >= h as i64 || fx >= w as i64 {
                        continue;
                    }
                    let dst = out.index(z, fy as usize, fx as usize);
                    out.data[dst] = crop.data[crop.index(z, y, x)];
                }
            }
        }
        let gts = gts
            .iter()
            .map(|g| {
                let mut g = *g;
                if self.flip_x {
                    g.x = (w - 1) as f64 - g.x;
                }
                if self.flip_y {
                    g.y = (h - 1) as f64 - g.y;
                }
                g.x += self.shift_x as f64;
                g.y += self.shift_y as f64;
                g
            })
            .collect();
        (out, gts)
    }
}

/// Seeded random flip/shift of a crop and its nodules.
pub fn augment(crop: &Crop, gts: &[GtNodule], seed: u64) -> (Crop, Vec<GtNodule>) {
    AugmentDraw::sample(seed).apply(crop, gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn crop(extents: [usize; 3]) -> Crop {
        let n = extents.iter().product::<usize>();
        Crop {
            extents,
            data: (0..n).map(|i| i as f32 / n as f32).collect(),
        }
    }

    fn gt(x: f64, y: f64) -> GtNodule {
        GtNodule {
            x,
            y,
            z: 1.0,
            diameter_vox: 5.0,
            category: Category::SolidSmall,
        }
    }

    #[test]
    fn identity_draw() {
        let c = crop([2, 8, 8]);
        let g = vec![gt(3.0, 4.0)];
        let (c2, g2) = AugmentDraw::default().apply(&c, &g);
        assert_eq!(c, c2);
        assert_eq!(g, g2);
    }

    #[test]
    fn x_flip_arithmetic() {
        let c = crop([1, 4, 64]);
        let draw = AugmentDraw {
            flip_x: true,
            ..Default::default()
        };
        let (c2, g2) = draw.apply(&c, &[gt(10.0, 2.0)]);
        assert_eq!(g2[0].x, 53.0);
        assert_eq!(g2[0].y, 2.0);
        assert_eq!(c2.data[c2.index(0, 2, 53)], c.data[c.index(0, 2, 10)]);
    }

    #[test]
    fn shift_moves_content_and_pads() {
        let c = crop([1, 6, 6]);
        let draw = AugmentDraw {
            shift_x: 2,
            shift_y: -1,
            ..Default::default()
        };
        let (c2, g2) = draw.apply(&c, &[gt(1.0, 3.0)]);
        assert_eq!((g2[0].x, g2[0].y), (3.0, 2.0));
        assert_eq!(c2.data[c2.index(0, 2, 3)], c.data[c.index(0, 3, 1)]);
        assert_eq!(c2.data[c2.index(0, 0, 0)], pad_value());
        assert_eq!(c2.data[c2.index(0, 5, 4)], pad_value());
    }

    #[test]
    fn seeded_draws_are_deterministic_and_bounded() {
        for seed in 0..200 {
            let a = AugmentDraw::sample(seed);
            assert_eq!(a, AugmentDraw::sample(seed));
            assert!(a.shift_x.abs() <= MAX_SHIFT && a.shift_y.abs() <= MAX_SHIFT);
        }
        let c = crop([2, 8, 8]);
        assert_eq!(
            augment(&c, &[gt(1.0, 1.0)], 5),
            augment(&c, &[gt(1.0, 1.0)], 5)
        );
    }

    proptest! {
        #[test]
        fn double_flip_is_identity(x in 0.0f64..31.0, y in 0.0f64..15.0, fx: bool, fy: bool) {
            let c = crop([2, 16, 32]);
            let draw = AugmentDraw { flip_x: fx, flip_y: fy, ..Default::default() };
            let (c1, g1) = draw.apply(&c, &[gt(x, y)]);
            let (c2, g2) = draw.apply(&c1, &g1);
            prop_assert_eq!(c2, c);
            prop_assert!((g2[0].x - x).abs() < 1e-12 && (g2[0].y - y).abs() < 1e-12);
        }
    }
}
