use crate::error::{Error, Result};

/// Center/size variances of the box parameterisation.
pub const VARIANCES: (f64, f64) = (0.1, 0.2);

/// Axial box `(x, y, w, h)` at slice position `z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, z: f64, w: f64, h: f64) -> Self {
        Self { x, y, z, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Whether two boxes are close enough in `z` to overlap at all.
    pub fn z_compatible(&self, other: &BBox) -> bool {
        let reach = self.w.max(self.h).max(other.w).max(other.h) / 2.0;
        (self.z - other.z).abs() <= reach
    }
}

/// Axial-plane IoU; zero for boxes outside each other's z window.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if !a.z_compatible(b) {
        return 0.0;
    }
    let ix =
        ((a.x + a.w / 2.0).min(b.x + b.w / 2.0) - (a.x - a.w / 2.0).max(b.x - b.w / 2.0)).max(0.0);
    let iy =
        ((a.y + a.h / 2.0).min(b.y + b.h / 2.0) - (a.y - a.h / 2.0).max(b.y - b.h / 2.0)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Regression target `(tx, ty, tw, th)` of `gt` relative to `anchor`.
pub fn encode(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Input(format!(
            "non-positive box extents {}x{}",
            gt.w, gt.h
        )));
    }
    let (vc, vs) = VARIANCES;
    Ok([
        (gt.x - anchor.x) / anchor.w / vc,
        (gt.y - anchor.y) / anchor.h / vc,
        (gt.w / anchor.w).ln() / vs,
        (gt.h / anchor.h).ln() / vs,
    ])
}

/// Inverse of [`encode`]; `z` stays at the anchor site.
pub fn decode(anchor: &BBox, t: [f64; 4]) -> BBox {
    let (vc, vs) = VARIANCES;
    BBox {
        x: anchor.x + t[0] * vc * anchor.w,
        y: anchor.y + t[1] * vc * anchor.h,
        z: anchor.z,
        w: anchor.w * (t[2] * vs).exp(),
        h: anchor.h * (t[3] * vs).exp(),
    }
}
