//! Fused row-wise losses reducing to a scalar, with analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_rows<T: Scalar>(op: &'static str, x: &Tensor<T>, rows: usize) -> Result<usize> {
    if x.rank() != 2 || x.shape()[0] != rows {
        return Err(Error::shape(
            op,
            format!("expected [{rows}, K] input, got {:?}", x.shape()),
        ));
    }
    Ok(x.shape()[1])
}

/// Stable log-softmax of one row.
pub(crate) fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

impl<T: Scalar> Tensor<T> {
    /// `Σ_r weights[r] · CE(softmax(self[r]), targets[r])` for `[R, K]`
    /// logits. Rows with zero weight contribute nothing.
    pub fn weighted_cross_entropy(&self, targets: &[usize], weights: &[T]) -> Result<Tensor<T>> {
        let rows = targets.len();
        if weights.len() != rows {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("{rows} targets but {} weights", weights.len()),
            ));
        }
        let k = check_rows("weighted_cross_entropy", self, rows)?;
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape(
                "weighted_cross_entropy",
                format!("target class {t} out of range for {k} classes"),
            ));
        }
        let x = self.data();
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for (r, &wr) in weights.iter().enumerate().take(rows) {
            if wr == T::zero() {
                continue;
            }
            let ls = log_softmax_row(&x[r * k..(r + 1) * k]);
            loss += -ls[targets[r]] * weights[r];
            for (p, l) in probs[r * k..(r + 1) * k].iter_mut().zip(&ls) {
                *p = l.exp();
            }
        }
        let targets = targets.to_vec();
        let weights = weights.to_vec();
        Ok(Tensor::from_op(
            vec![],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = probs.clone();
                for r in 0..targets.len() {
                    let row = &mut gi[r * k..(r + 1) * k];
                    if weights[r] == T::zero() {
                        continue;
                    }
                    row[targets[r]] -= T::one();
                    for v in row.iter_mut() {
                        *v *= weights[r] * g[0];
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// `Σ_r weights[r] · Σ_j smoothL1(self[r, j] − targets[r, j])` with the
    /// transition at `|d| = 1`.
    pub fn weighted_smooth_l1(&self, targets: &[T], weights: &[T]) -> Result<Tensor<T>> {
        let rows = weights.len();
        let k = check_rows("weighted_smooth_l1", self, rows)?;
        if targets.len() != rows * k {
            return Err(Error::shape(
                "weighted_smooth_l1",
                format!("expected {} targets, got {}", rows * k, targets.len()),
            ));
        }
        let x = self.data();
        let half = T::cast(0.5);
        let mut loss = T::zero();
        let mut dloss = vec![T::zero(); x.len()];
        for (r, &wr) in weights.iter().enumerate().take(rows) {
            if wr == T::zero() {
                continue;
            }
            for j in r * k..(r + 1) * k {
                let d = x[j] - targets[j];
                let (l, dl) = if d.abs() < T::one() {
                    (half * d * d, d)
                } else {
                    (d.abs() - half, d.signum())
                };
                loss += wr * l;
                dloss[j] = wr * dl;
            }
        }
        Ok(Tensor::from_op(
            vec![],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(dloss.iter().map(|&d| d * g[0]).collect())]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{random_tensor, relative_error, STEP, TOLERANCE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_uniform_logits() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        let l = x.weighted_cross_entropy(&[1, 3], &[1.0, 0.5]).unwrap();
        assert!((l.item().unwrap() - 1.5 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_is_near_zero() {
        let x = Tensor::<f64>::new(&[1, 3], vec![0.0, 60.0, 0.0]).unwrap();
        let l = x.weighted_cross_entropy(&[1], &[1.0]).unwrap();
        assert!(l.item().unwrap() < 1e-20);
    }

    #[test]
    fn smooth_l1_branches() {
        let x = Tensor::<f64>::new(&[1, 4], vec![0.5, -0.5, 3.0, -2.0]).unwrap();
        let l = x.weighted_smooth_l1(&[0.0; 4], &[2.0]).unwrap();
        // 0.125 + 0.125 + 2.5 + 1.5
        assert!((l.item().unwrap() - 2.0 * 4.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        assert!(x.weighted_cross_entropy(&[0], &[1.0]).is_err());
        assert!(x.weighted_cross_entropy(&[0, 4], &[1.0, 1.0]).is_err());
        assert!(x.weighted_smooth_l1(&[0.0; 7], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_tensor(&mut rng, &[6, 5], 2.0);
            let targets = [0, 4, 2, 2, 1, 3];
            let w = [1.0, 0.0, 0.5, 2.0, 1.0, 0.25];
            let err = relative_error(
                std::slice::from_ref(&x),
                |t| t[0].weighted_cross_entropy(&targets, &w),
                STEP,
            )
            .unwrap();
            assert!(err < TOLERANCE, "ce seed {seed}: {err}");
            let tg: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 / 3.0 - 1.5).collect();
            let err = relative_error(&[x], |t| t[0].weighted_smooth_l1(&tg, &w), STEP).unwrap();
            assert!(err < TOLERANCE, "sl1 seed {seed}: {err}");
        }
    }
}
