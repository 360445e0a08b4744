//! Network input assembly from volumes: intensity windowing, 3D crops and
//! multi-slice (2.5D) stacks.

use super::augment::Crop;
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 400.0;

/// Maps `[HU_MIN, HU_MAX]` affinely onto `[0, 1]`, clamping outside values.
pub fn normalize_hu(hu: f32) -> f32 {
    ((hu.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)).clamp(0.0, 1.0)
}

pub fn denormalize_hu(v: f32) -> f32 {
    HU_MIN + v * (HU_MAX - HU_MIN)
}

/// Normalized value of the zero-HU padding.
pub fn pad_value() -> f32 {
    normalize_hu(0.0)
}

fn check_extents(extents: [usize; 3]) -> Result<()> {
    if extents.contains(&0) {
        return Err(Error::Input(format!("degenerate crop extents {extents:?}")));
    }
    Ok(())
}

/// Normalized 3D crop starting at `origin` (z, y, x); voxels outside the
/// volume read as 0 HU.
pub fn crop_3d(v: &Volume, origin: [isize; 3], extents: [usize; 3]) -> Result<Crop> {
    check_extents(extents)?;
    let [d, h, w] = extents;
    let mut data = Vec::with_capacity(d * h * w);
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let hu = v.at_or(origin[0] + z, origin[1] + y, origin[2] + x, 0.0);
                data.push(normalize_hu(hu));
            }
        }
    }
    Ok(Crop { extents, data })
}

/// `n_slices` consecutive slices centred on `center_slice` (edge slices
/// replicate), in-plane window at `origin_yx` with extents `hw`.
pub fn window_25d(
    v: &Volume,
    center_slice: usize,
    n_slices: usize,
    origin_yx: [isize; 2],
    hw: [usize; 2],
) -> Result<Crop> {
    if n_slices.is_multiple_of(2) {
        return Err(Error::Input(format!(
            "n_slices must be odd, got {n_slices}"
        )));
    }
    if center_slice >= v.depth() {
        return Err(Error::Input(format!(
            "center slice {center_slice} out of range for depth {}",
            v.depth()
        )));
    }
    check_extents([n_slices, hw[0], hw[1]])?;
    let half = (n_slices / 2) as isize;
    let last = v.depth() as isize - 1;
    let mut data = Vec::with_capacity(n_slices * hw[0] * hw[1]);
    for k in -half..=half {
        let z = (center_slice as isize + k).clamp(0, last);
        for y in 0..hw[0] as isize {
            for x in 0..hw[1] as isize {
                data.push(normalize_hu(v.at_or(
                    z,
                    origin_yx[0] + y,
                    origin_yx[1] + x,
                    0.0,
                )));
            }
        }
    }
    Ok(Crop {
        extents: [n_slices, hw[0], hw[1]],
        data,
    })
}

/// Whole-plane 2.5D input of shape `[1, n_slices, 1, H, W]`.
pub fn make_input_25d<T: Scalar>(
    v: &Volume,
    center_slice: usize,
    n_slices: usize,
) -> Result<Tensor<T>> {
    window_25d(v, center_slice, n_slices, [0, 0], [v.height(), v.width()])
        .and_then(|c| c.to_tensor_25d())
}

/// 3D crop input of shape `[1, 1, d, h, w]`.
pub fn make_input_3d<T: Scalar>(
    v: &Volume,
    origin: [isize; 3],
    extents: [usize; 3],
) -> Result<Tensor<T>> {
    crop_3d(v, origin, extents).and_then(|c| c.to_tensor_3d())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 3]) -> Volume {
        let n: usize = shape.iter().product();
        let voxels = (0..n).map(|i| -1000.0 + (i % 1400) as f32).collect();
        Volume::new("r", shape, [1.25, 0.7, 0.7], voxels).unwrap()
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(normalize_hu(-1000.0), 0.0);
        assert_eq!(normalize_hu(400.0), 1.0);
        assert!((normalize_hu(-300.0) - 0.5).abs() < 1e-7);
        assert_eq!(normalize_hu(-2000.0), 0.0);
        assert_eq!(normalize_hu(900.0), 1.0);
        assert!((pad_value() - 1000.0 / 1400.0).abs() < 1e-7);
        for hu in [-1000.0f32, -712.5, 0.0, 123.0, 400.0] {
            assert!((denormalize_hu(normalize_hu(hu)) - hu).abs() < 1e-3);
        }
    }

    #[test]
    fn single_slice() {
        let v = ramp([3, 4, 5]);
        let t = make_input_25d::<f64>(&v, 1, 1).unwrap();
        assert_eq!(t.shape(), &[1, 1, 1, 4, 5]);
        for (i, &x) in t.data().iter().enumerate() {
            assert_eq!(x, normalize_hu(v.voxels[20 + i]) as f64);
        }
    }

    #[test]
    fn edge_slice_replicates() {
        let v = ramp([3, 4, 5]);
        let t = make_input_25d::<f32>(&v, 0, 3).unwrap();
        let d = t.data();
        assert_eq!(&d[0..20], &d[20..40]);
        assert_ne!(&d[20..40], &d[40..60]);
        assert!(make_input_25d::<f32>(&v, 3, 3).is_err());
        assert!(make_input_25d::<f32>(&v, 1, 2).is_err());
    }

    #[test]
    fn full_crop_and_padding() {
        let v = ramp([3, 4, 5]);
        let t = make_input_3d::<f32>(&v, [0, 0, 0], [3, 4, 5]).unwrap();
        assert_eq!(t.shape(), &[1, 1, 3, 4, 5]);
        let expect: Vec<f32> = v.voxels.iter().map(|&h| normalize_hu(h)).collect();
        assert_eq!(t.to_vec(), expect);
        let t = make_input_3d::<f32>(&v, [-1, 0, 3], [2, 2, 4]).unwrap();
        let d = t.data();
        // first slab (z=-1) and the x >= 5 columns are padding
        assert!(d[..8].iter().all(|&x| (x - 0.714_285_7).abs() < 1e-6));
        assert!((d[8 + 2] - pad_value()).abs() < 1e-7);
        assert!(make_input_3d::<f32>(&v, [0, 0, 0], [0, 2, 2]).is_err());
    }

    #[test]
    fn stack_matches_permuted_crop() {
        let v = ramp([5, 4, 6]);
        let a = make_input_25d::<f64>(&v, 2, 5).unwrap();
        let b = make_input_3d::<f64>(&v, [0, 0, 0], [5, 4, 6]).unwrap();
        let b = b.permute(&[0, 2, 1, 3, 4]).unwrap();
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.to_vec(), b.to_vec());
    }
}
