use serde::{Deserialize, Serialize};

use super::matching::{AnchorLabel, MatchResult};
use crate::error::{Error, Result};
use crate::tensor::log_softmax_row;
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub n_pos: usize,
    pub n_neg_mined: usize,
}

/// Negatives of one image ranked by background cross-entropy, hardest first
/// (lowest index on ties), truncated to `ratio * max(n_pos, 1)`.
pub fn mine_negatives<T: Scalar>(
    logits: &[T],
    classes: usize,
    m: &MatchResult,
    ratio: usize,
) -> Vec<usize> {
    let mut negs: Vec<(usize, T)> = m
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == AnchorLabel::Negative)
        .map(|(a, _)| {
            (
                a,
                -log_softmax_row(&logits[a * classes..(a + 1) * classes])[0],
            )
        })
        .collect();
    negs.sort_by(|x, y| {
        y.1.partial_cmp(&x.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.0.cmp(&y.0))
    });
    let keep = ratio * m.n_pos().max(1);
    negs.into_iter().take(keep).map(|(a, _)| a).collect()
}

/// Softmax cross-entropy over positives and mined negatives plus smooth-L1
/// regression over positives, both divided by `max(total positives, 1)`.
///
/// `cls` is `[N, A, K]`, `reg` is `[N, A, 4]`, with one match per image.
pub fn multibox_loss<T: Scalar>(
    cls: &Tensor<T>,
    reg: &Tensor<T>,
    matches: &[MatchResult],
    mining_ratio: usize,
    reg_weight: f64,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let (cs, rs) = (cls.shape(), reg.shape());
    if cs.len() != 3 || rs.len() != 3 || rs[2] != 4 || cs[0] != rs[0] || cs[1] != rs[1] {
        return Err(Error::shape(
            "multibox_loss",
            format!("incompatible predictions {cs:?} and {rs:?}"),
        ));
    }
    let (n, a, k) = (cs[0], cs[1], cs[2]);
    if matches.len() != n || matches.iter().any(|m| m.len() != a) {
        return Err(Error::shape(
            "multibox_loss",
            format!("{} matches for {n} images of {a} anchors", matches.len()),
        ));
    }
    let logits = cls.data();
    let mut targets = vec![0usize; n * a];
    let mut cls_w = vec![T::zero(); n * a];
    let mut reg_w = vec![T::zero(); n * a];
    let mut reg_t = vec![T::zero(); n * a * 4];
    let (mut n_pos, mut n_neg) = (0, 0);
    for (i, m) in matches.iter().enumerate() {
        let base = i * a;
        for (j, l) in m.labels.iter().enumerate() {
            if let AnchorLabel::Positive(_) = l {
                targets[base + j] = m.classes[j];
                cls_w[base + j] = T::one();
                reg_w[base + j] = T::one();
                for c in 0..4 {
                    reg_t[(base + j) * 4 + c] = T::cast(m.targets[j][c]);
                }
                n_pos += 1;
            }
        }
        let mined = mine_negatives(&logits[base * k..(base + a) * k], k, m, mining_ratio);
        n_neg += mined.len();
        for j in mined {
            cls_w[base + j] = T::one();
        }
    }
    let norm = T::cast(n_pos.max(1) as f64);
    for w in cls_w.iter_mut() {
        *w /= norm;
    }
    let rw = T::cast(reg_weight) / norm;
    for w in reg_w.iter_mut() {
        *w *= rw;
    }
    let cls_loss = cls
        .reshape(&[n * a, k])?
        .weighted_cross_entropy(&targets, &cls_w)?;
    let reg_loss = reg
        .reshape(&[n * a, 4])?
        .weighted_smooth_l1(&reg_t, &reg_w)?;
    let total = cls_loss.add(&reg_loss)?;
    let breakdown = LossBreakdown {
        cls_loss: cls_loss.item()?.f64(),
        reg_loss: reg_loss.item()?.f64(),
        total: total.item()?.f64(),
        n_pos,
        n_neg_mined: n_neg,
    };
    Ok((total, breakdown))
}
