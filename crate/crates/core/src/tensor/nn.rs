use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// `max(0, x)`; the gradient at exactly zero is zero.
    pub fn relu(&self) -> Tensor<T> {
        let data = self
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, p| {
                let gi = g
                    .iter()
                    .zip(p[0].data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(gi)]
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..len {
                    max = max.max(x[base + k * inner]);
                }
                let mut sum = T::zero();
                for k in 0..len {
                    let e = (x[base + k * inner] - max).exp();
                    y[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..len {
                    y[base + k * inner] /= sum;
                }
            }
        }
        let out = y.clone();
        Ok(Tensor::from_op(
            shape,
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for k in 0..len {
                            let j = base + k * inner;
                            dot += g[j] * out[j];
                        }
                        for k in 0..len {
                            let j = base + k * inner;
                            gi[j] = out[j] * (g[j] - dot);
                        }
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Nearest-neighbour upsampling of an `[N, C, D, H, W]` tensor by integer
    /// per-axis factors. The adjoint sums each replication block.
    pub fn upsample_nearest(&self, factors: [usize; 3]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 5 {
            return Err(Error::shape(
                "upsample_nearest",
                format!("expected 5-D, got {s:?}"),
            ));
        }
        if factors.contains(&0) {
            return Err(Error::Config(format!(
                "upsample factors must be >= 1, got {factors:?}"
            )));
        }
        let (nc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let [fd, fh, fw] = factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let x = self.data();
        let mut y = Vec::with_capacity(nc * od * oh * ow);
        for c in 0..nc {
            for z in 0..od {
                for r in 0..oh {
                    let row = c * d * h * w + (z / fd) * h * w + (r / fh) * w;
                    for q in 0..ow {
                        y.push(x[row + q / fw]);
                    }
                }
            }
        }
        let in_len = self.numel();
        Ok(Tensor::from_op(
            vec![s[0], s[1], od, oh, ow],
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![T::zero(); in_len];
                let mut j = 0;
                for c in 0..nc {
                    for z in 0..od {
                        for r in 0..oh {
                            let row = c * d * h * w + (z / fd) * h * w + (r / fh) * w;
                            for q in 0..ow {
                                gi[row + q / fw] += g[j];
                                j += 1;
                            }
                        }
                    }
                }
                vec![Some(gi)]
            }),
        ))
    }

    /// Inverted dropout. Identity when `train` is false or `rate` is zero.
    pub fn dropout(&self, rate: f64, train: bool, seed: u64) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = T::cast(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().zip(&mask).map(|(&g, &m)| g * m).collect())]),
        ))
    }

    /// Batch normalisation over every axis except the channel axis (axis 1).
    ///
    /// In training mode the batch statistics normalise the input and the
    /// updated running statistics are returned; in evaluation mode the given
    /// running statistics are used and nothing is returned.
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running: &RunningStats<T>,
        train: bool,
    ) -> Result<(Tensor<T>, Option<RunningStats<T>>)> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("need a channel axis, got {s:?}"),
            ));
        }
        let c = s[1];
        if gamma.numel() != c
            || beta.numel() != c
            || running.mean.len() != c
            || running.var.len() != c
        {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{c} channels but gamma {}, beta {}, running {}",
                    gamma.numel(),
                    beta.numel(),
                    running.mean.len()
                ),
            ));
        }
        let n = s[0];
        let inner: usize = s[2..].iter().product();
        let count = n * inner;
        let x = self.data();
        let eps = T::cast(BN_EPS);

        let (mean, var) = if train {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let cnt = T::cast(count as f64);
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    acc += x[base..base + inner].iter().copied().sum::<T>();
                }
                let m = acc / cnt;
                let mut sq = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    sq += x[base..base + inner]
                        .iter()
                        .map(|&v| (v - m) * (v - m))
                        .sum::<T>();
                }
                mean[ch] = m;
                var[ch] = sq / cnt;
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        let (gm, bt) = (gamma.data(), beta.data());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = gm[ch] * h + bt[ch];
                }
            }
        }

        let updated = train.then(|| {
            let m = T::cast(BN_MOMENTUM);
            let unbias = if count > 1 {
                T::cast(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            RunningStats {
                mean: running
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b)
                    .collect(),
                var: running
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (T::one() - m) * r + m * b * unbias)
                    .collect(),
            }
        });

        let out = Tensor::from_op(
            s.to_vec(),
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p| {
                let gm = p[1].data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                let dx = p[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    let cnt = T::cast(count as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            let k = gm[ch] * inv_std[ch];
                            for i in base..base + inner {
                                dx[i] = if train {
                                    k * (g[i] - dbeta[ch] / cnt - xhat[i] * dgamma[ch] / cnt)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }),
        );
        Ok((out, updated))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn relu_values_and_gradient() {
        let x = Tensor::<f64>::param(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = x.relu();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let x = Tensor::<f64>::param(&[4], vec![-1.0, -2.0, -0.5, -3.0]).unwrap();
        let y = x.relu();
        assert!(y.data().iter().all(|&v| v == 0.0));
        y.sum().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_slice() {
        let x = Tensor::<f64>::full(&[2, 5], 3.0);
        let y = x.softmax(1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::<f64>::new(&[3], vec![1000.0, 0.0, -5.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let vals: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 4.0).collect();
        let x = Tensor::new(&[2, 3, 4], vals).unwrap();
        let y = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|k| y.data()[o * 12 + k * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_block_replicates() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.upsample_nearest([1, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let same = x.upsample_nearest([1, 1, 1]).unwrap();
        assert_eq!(same.data(), x.data());
    }

    #[test]
    fn upsample_adjoint_sums_blocks() {
        let x = Tensor::<f64>::param(&[1, 1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        x.upsample_nearest([2, 2, 2])
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0, 8.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f64>::full(&[100], 2.0);
        assert_eq!(x.dropout(0.0, true, 1).unwrap().data(), x.data());
        assert_eq!(x.dropout(0.7, false, 1).unwrap().data(), x.data());
        assert!(x.dropout(1.0, true, 1).is_err());
        assert!(x.dropout(-0.1, true, 1).is_err());
    }

    #[test]
    fn dropout_mean_preserved() {
        let x = Tensor::<f64>::ones(&[100_000]);
        let y = x.dropout(0.5, true, 42).unwrap();
        let mean = y.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_is_deterministic() {
        let x = Tensor::<f32>::ones(&[1000]);
        let a = x.dropout(0.3, true, 9).unwrap();
        let b = x.dropout(0.3, true, 9).unwrap();
        let c = x.dropout(0.3, true, 10).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 2, 2, 2], 7.5);
        let gamma = Tensor::full(&[1], 3.0);
        let beta = Tensor::full(&[1], -0.25);
        let (y, stats) = x
            .batch_norm(&gamma, &beta, &RunningStats::new(1), true)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == -0.25));
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_standardises_normal_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..20_000)
            .map(|_| 5.0 + 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        let x = Tensor::new(&[20_000, 1], vals).unwrap();
        let (y, _) = x
            .batch_norm(
                &Tensor::ones(&[1]),
                &Tensor::zeros(&[1]),
                &RunningStats::new(1),
                true,
            )
            .unwrap();
        let n = y.numel() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.1 && (var - 1.0).abs() < 0.1);
    }

    #[test]
    fn batch_norm_train_mean_is_zero_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..3 * 4 * 27)
            .map(|_| rng.random::<f64>() * 10.0 - 3.0)
            .collect();
        let x = Tensor::new(&[3, 4, 3, 3, 3], vals).unwrap();
        let gamma = Tensor::new(&[4], vec![1.0, 0.5, 2.0, -1.0]).unwrap();
        let (y, _) = x
            .batch_norm(&gamma, &Tensor::zeros(&[4]), &RunningStats::new(4), true)
            .unwrap();
        for ch in 0..4 {
            let mut acc = 0.0;
            for b in 0..3 {
                acc += y.data()[(b * 4 + ch) * 27..(b * 4 + ch + 1) * 27]
                    .iter()
                    .sum::<f64>();
            }
            assert!((acc / 81.0).abs() <= 1e-10);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let x = Tensor::<f64>::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
        let running = RunningStats {
            mean: vec![1.0],
            var: vec![4.0 - BN_EPS],
        };
        let (y, upd) = x
            .batch_norm(&Tensor::ones(&[1]), &Tensor::zeros(&[1]), &running, false)
            .unwrap();
        assert!(upd.is_none());
        assert!((y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2]);
        let r = x.batch_norm(
            &Tensor::ones(&[2]),
            &Tensor::zeros(&[2]),
            &RunningStats::new(2),
            true,
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }
}
