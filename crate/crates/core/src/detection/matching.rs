use super::boxes::{encode, iou, BBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignored,
}

/// Ground-truth box with its class index (`1..K`; `0` is background).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Class target per anchor: the matched class for positives, else 0.
    pub classes: Vec<usize>,
    /// Regression target per anchor; zero for non-positives.
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn n_pos(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn center_distance(a: &BBox, b: &BBox) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt()
}

/// Threshold assignment plus a per-ground-truth best-anchor fallback.
///
/// An anchor is positive for its highest-IoU box (lowest box index on ties)
/// when that IoU reaches `pos_thr`, negative below `neg_thr`, otherwise
/// ignored. Each box then claims its highest-IoU anchor (lowest anchor index
/// on ties) that no earlier box has claimed; when a box overlaps no anchor at
/// all it claims the anchor with the nearest centre instead.
pub fn match_anchors(
    anchors: &[BBox],
    gts: &[GtBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::Input(
            "cannot match against an empty anchor list".into(),
        ));
    }
    if !(pos_thr > neg_thr) {
        return Err(Error::Config(format!(
            "pos_thr {pos_thr} must exceed neg_thr {neg_thr}"
        )));
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let overlaps: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| anchors.iter().map(|a| iou(a, &g.bbox)).collect())
        .collect();

    for a in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (g, row) in overlaps.iter().enumerate() {
            if best.is_none_or(|(_, v)| row[a] > v) {
                best = Some((g, row[a]));
            }
        }
        if let Some((g, v)) = best {
            labels[a] = if v >= pos_thr {
                AnchorLabel::Positive(g)
            } else if v < neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignored
            };
        }
    }

    let mut claimed = vec![false; n];
    for (g, row) in overlaps.iter().enumerate() {
        let mut pick: Option<usize> = None;
        for a in (0..n).filter(|&a| !claimed[a]) {
            if pick.is_none_or(|p| row[a] > row[p]) {
                pick = Some(a);
            }
        }
        if let Some(p) = pick {
            if row[p] <= 0.0 {
                let gb = &gts[g].bbox;
                pick = (0..n).filter(|&a| !claimed[a]).min_by(|&a, &b| {
                    center_distance(&anchors[a], gb)
                        .total_cmp(&center_distance(&anchors[b], gb))
                        .then(a.cmp(&b))
                });
            }
        }
        if let Some(p) = pick {
            claimed[p] = true;
            labels[p] = AnchorLabel::Positive(g);
        }
    }

    let mut classes = vec![0; n];
    let mut targets = vec![[0.0; 4]; n];
    for a in 0..n {
        if let AnchorLabel::Positive(g) = labels[a] {
            classes[a] = gts[g].class;
            targets[a] = encode(&anchors[a], &gts[g].bbox)?;
        }
    }
    Ok(MatchResult {
        labels,
        classes,
        targets,
    })
}
