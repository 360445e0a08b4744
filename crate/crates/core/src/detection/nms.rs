use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};
use crate::data::io::{read_csv, write_csv};
use crate::data::Category;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scan_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub h: f64,
    pub prob: f64,
    pub category: Category,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.z, self.w, self.h)
    }

    /// Total order: probability descending, then x, y, z, w, h ascending.
    pub fn rank_cmp(&self, other: &Detection) -> Ordering {
        other
            .prob
            .total_cmp(&self.prob)
            .then(self.x.total_cmp(&other.x))
            .then(self.y.total_cmp(&other.y))
            .then(self.z.total_cmp(&other.z))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

/// Greedy per-category suppression: walking detections in rank order, keep a
/// box unless a kept box of the same category overlaps it above `iou_thr`.
/// Survivors are returned in rank order, at most `max_out` of them.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64, max_out: usize) -> Vec<Detection> {
    dets.sort_by(Detection::rank_cmp);
    let mut kept_by_cat: BTreeMap<Category, Vec<BBox>> = BTreeMap::new();
    let mut out = Vec::new();
    for d in dets {
        let b = d.bbox();
        let kept = kept_by_cat.entry(d.category).or_default();
        if kept.iter().all(|k| iou(k, &b) <= iou_thr) {
            kept.push(b);
            out.push(d);
            if out.len() == max_out {
                break;
            }
        }
    }
    out
}

const DETECTION_HEADER: [&str; 8] = ["scan_id", "x", "y", "z", "w", "h", "prob", "category"];

pub fn save_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    write_csv(path, &DETECTION_HEADER, dets)
}

pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = read_csv(path, &DETECTION_HEADER)?;
    if let Some(d) = dets
        .iter()
        .find(|d| !(0.0..=1.0).contains(&d.prob) || !(d.w > 0.0 && d.h > 0.0))
    {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            msg: format!(
                "detection in {} needs prob in [0, 1] and positive w, h",
                d.scan_id
            ),
        });
    }
    Ok(dets)
}
