//! Central finite-difference verification of reverse-mode gradients.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detection::{match_anchors, multibox_loss, BBox, GtBox, MatchResult};
use crate::error::Result;
use crate::ga::{nonlocal_attention, GaConfig, GaModule};
use crate::layers::{Conv, ConvBn, WeightInit};
use crate::network::ResNeXtBlock;
use crate::params::{Forward, Mode, ParamStore};
use crate::tensor::{RunningStats, Tensor};

/// Random instances checked per entry of [`run_suite`].
pub const INSTANCES: u64 = 5;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)` between the analytic
/// gradient and a central-difference estimate, over all inputs jointly.
pub fn relative_error<F>(inputs: &[Tensor<f64>], f: F, h: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves = inputs
        .iter()
        .map(|t| Tensor::param(t.shape(), t.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&leaves)?;
    loss.backward()?;
    let mut analytic = Vec::new();
    for leaf in &leaves {
        analytic.extend(leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]));
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    for i in 0..inputs.len() {
        let base = inputs[i].to_vec();
        for j in 0..base.len() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                work[i] = Tensor::new(inputs[i].shape(), v)?;
                f(&work)?.item()
            };
            let up = eval(h)?;
            let down = eval(-h)?;
            numeric.push((up - down) / (2.0 * h));
        }
        work[i] = inputs[i].detach();
    }

    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    Ok(if denom < 1e-12 { diff } else { diff / denom })
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(shape, v).expect("shape matches")
}

/// `sum(r * t)` with fixed pseudo-random `r`, turning any output into a
/// scalar whose gradient exercises every output element differently.
pub fn project(t: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = random_tensor(&mut rng, t.shape(), 1.0);
    Ok(t.mul(&r)?.sum())
}

/// Like [`relative_error`], but over the input `x` and every trainable
/// parameter of `store` read through a training-mode [`Forward`].
pub fn module_relative_error<F>(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    f: F,
    h: f64,
) -> Result<f64>
where
    F: Fn(&Forward<'_, f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let fw = Forward::new(store, Mode::Train, true, 0);
    let xl = Tensor::param(x.shape(), x.to_vec())?;
    f(&fw, &xl)?.backward()?;
    let grads = fw.gradients();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut analytic = xl.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
    for n in &names {
        let len = store.get(n)?.value.len();
        analytic.extend(grads.get(n).cloned().unwrap_or_else(|| vec![0.0; len]));
    }

    let eval = |st: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let fw = Forward::new(st, Mode::Train, false, 0);
        f(&fw, x)?.item()
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let base = x.to_vec();
    for j in 0..base.len() {
        let at = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[j] += delta;
            eval(store, &Tensor::new(x.shape(), v)?)
        };
        numeric.push((at(h)? - at(-h)?) / (2.0 * h));
    }
    let mut work = store.clone();
    for n in &names {
        let len = store.get(n)?.value.len();
        for j in 0..len {
            let orig = store.get(n)?.value[j];
            work.get_mut(n)?.value[j] = orig + h;
            let up = eval(&work, x)?;
            work.get_mut(n)?.value[j] = orig - h;
            let down = eval(&work, x)?;
            work.get_mut(n)?.value[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let diff = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    Ok(if denom < 1e-12 { diff } else { diff / denom })
}

/// Redraws every trainable parameter from `N(0, std)` so that paths which
/// start at zero (attention output, biases) carry gradient.
pub fn randomize_params(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
        for v in p.value.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES as usize && self.max_error <= TOLERANCE
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }
}

type Case = fn(&mut ChaCha8Rng, u64) -> Result<f64>;

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r, s| {
            let (a, b) = (
                random_tensor(r, &[3, 4], 1.0),
                random_tensor(r, &[3, 4], 1.0),
            );
            relative_error(&[a, b], |t| project(&t[0].add(&t[1])?, s), STEP)
        }),
        ("sub", |r, s| {
            let (a, b) = (
                random_tensor(r, &[2, 5], 1.0),
                random_tensor(r, &[2, 5], 1.0),
            );
            relative_error(&[a, b], |t| project(&t[0].sub(&t[1])?, s), STEP)
        }),
        ("mul", |r, s| {
            let (a, b) = (
                random_tensor(r, &[4, 3], 1.0),
                random_tensor(r, &[4, 3], 1.0),
            );
            relative_error(&[a, b], |t| project(&t[0].mul(&t[1])?, s), STEP)
        }),
        ("scale", |r, s| {
            let a = random_tensor(r, &[6], 1.0);
            relative_error(&[a], |t| project(&t[0].scale(-1.7), s), STEP)
        }),
        ("sum", |r, _| {
            let a = random_tensor(r, &[2, 3, 2], 1.0);
            relative_error(&[a], |t| Ok(t[0].mul(&t[0])?.sum()), STEP)
        }),
        ("mean", |r, _| {
            let a = random_tensor(r, &[5, 2], 1.0);
            relative_error(&[a], |t| Ok(t[0].mul(&t[0])?.mean()), STEP)
        }),
        ("matmul", |r, s| {
            let (a, b) = (
                random_tensor(r, &[3, 4], 1.0),
                random_tensor(r, &[4, 2], 1.0),
            );
            relative_error(&[a, b], |t| project(&t[0].matmul(&t[1])?, s), STEP)
        }),
        ("bmm", |r, s| {
            let (a, b) = (
                random_tensor(r, &[2, 3, 4], 1.0),
                random_tensor(r, &[2, 4, 3], 1.0),
            );
            relative_error(&[a, b], |t| project(&t[0].bmm(&t[1])?, s), STEP)
        }),
        ("reshape", |r, s| {
            let a = random_tensor(r, &[2, 6], 1.0);
            relative_error(
                &[a],
                |t| project(&t[0].reshape(&[3, 4])?.mul(&t[0].reshape(&[3, 4])?)?, s),
                STEP,
            )
        }),
        ("permute", |r, s| {
            let a = random_tensor(r, &[2, 3, 4], 1.0);
            relative_error(&[a], |t| project(&t[0].permute(&[2, 0, 1])?, s), STEP)
        }),
        ("concat", |r, s| {
            let (a, b) = (
                random_tensor(r, &[2, 3], 1.0),
                random_tensor(r, &[2, 2], 1.0),
            );
            relative_error(
                &[a, b],
                |t| project(&Tensor::concat(&[t[0].clone(), t[1].clone()], 1)?, s),
                STEP,
            )
        }),
        ("narrow", |r, s| {
            let a = random_tensor(r, &[3, 5], 1.0);
            relative_error(&[a], |t| project(&t[0].narrow(1, 1, 3)?, s), STEP)
        }),
        ("relu", |r, s| {
            let a = random_tensor(r, &[4, 5], 1.0);
            relative_error(&[a], |t| project(&t[0].relu(), s), STEP)
        }),
        ("softmax", |r, s| {
            let a = random_tensor(r, &[2, 4, 3], 2.0);
            relative_error(&[a], |t| project(&t[0].softmax(1)?, s), STEP)
        }),
        ("batch_norm_train", |r, s| {
            let x = random_tensor(r, &[2, 3, 2, 2, 2], 1.0);
            let (g, b) = (random_tensor(r, &[3], 1.0), random_tensor(r, &[3], 1.0));
            let run = RunningStats::new(3);
            relative_error(
                &[x, g, b],
                |t| project(&t[0].batch_norm(&t[1], &t[2], &run, true)?.0, s),
                STEP,
            )
        }),
        ("batch_norm_eval", |r, s| {
            let x = random_tensor(r, &[2, 3, 1, 2, 2], 1.0);
            let (g, b) = (random_tensor(r, &[3], 1.0), random_tensor(r, &[3], 1.0));
            let run = RunningStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
            };
            relative_error(
                &[x, g, b],
                |t| project(&t[0].batch_norm(&t[1], &t[2], &run, false)?.0, s),
                STEP,
            )
        }),
        ("dropout", |r, s| {
            let a = random_tensor(r, &[4, 6], 1.0);
            relative_error(&[a], |t| project(&t[0].dropout(0.3, true, s)?, s), STEP)
        }),
        ("upsample_nearest", |r, s| {
            let a = random_tensor(r, &[1, 2, 1, 2, 3], 1.0);
            relative_error(
                &[a],
                |t| project(&t[0].upsample_nearest([2, 2, 2])?, s),
                STEP,
            )
        }),
        ("conv3d", |r, s| {
            let x = random_tensor(r, &[2, 2, 3, 4, 4], 1.0);
            let (w, b) = (
                random_tensor(r, &[3, 2, 3, 3, 3], 0.5),
                random_tensor(r, &[3], 1.0),
            );
            relative_error(
                &[x, w, b],
                |t| project(&t[0].conv3d(&t[1], Some(&t[2]), [1, 1, 1], 1)?, s),
                STEP,
            )
        }),
        ("conv3d_strided", |r, s| {
            let x = random_tensor(r, &[1, 2, 3, 5, 4], 1.0);
            let w = random_tensor(r, &[2, 2, 3, 3, 3], 0.5);
            relative_error(
                &[x, w],
                |t| project(&t[0].conv3d(&t[1], None, [2, 2, 2], 1)?, s),
                STEP,
            )
        }),
        ("conv3d_grouped", |r, s| {
            let x = random_tensor(r, &[1, 4, 2, 3, 3], 1.0);
            let (w, b) = (
                random_tensor(r, &[6, 2, 3, 3, 3], 0.5),
                random_tensor(r, &[6], 1.0),
            );
            relative_error(
                &[x, w, b],
                |t| project(&t[0].conv3d(&t[1], Some(&t[2]), [1, 1, 1], 2)?, s),
                STEP,
            )
        }),
        ("conv1x1", |r, s| {
            let x = random_tensor(r, &[2, 3, 2, 2, 3], 1.0);
            let (w, b) = (
                random_tensor(r, &[4, 3, 1, 1, 1], 1.0),
                random_tensor(r, &[4], 1.0),
            );
            relative_error(
                &[x, w, b],
                |t| project(&t[0].conv1x1(&t[1], Some(&t[2]))?, s),
                STEP,
            )
        }),
        ("weighted_cross_entropy", |r, _| {
            let x = random_tensor(r, &[5, 4], 2.0);
            let targets: Vec<usize> = (0..5).map(|_| r.random_range(0..4)).collect();
            let weights: Vec<f64> = (0..5).map(|_| r.random::<f64>()).collect();
            relative_error(
                &[x],
                |t| t[0].weighted_cross_entropy(&targets, &weights),
                STEP,
            )
        }),
        ("weighted_smooth_l1", |r, _| {
            let x = random_tensor(r, &[4, 4], 2.0);
            // keep every residual away from the |d| = 1 seam
            let targets: Vec<f64> = x
                .data()
                .iter()
                .map(|&v| {
                    let d = if r.random() {
                        r.random_range(0.1..0.8)
                    } else {
                        r.random_range(1.2..2.0)
                    };
                    v - if r.random() { d } else { -d }
                })
                .collect();
            let weights: Vec<f64> = (0..4).map(|_| r.random::<f64>()).collect();
            relative_error(&[x], |t| t[0].weighted_smooth_l1(&targets, &weights), STEP)
        }),
        ("nonlocal_attention", |r, s| {
            let th = random_tensor(r, &[2, 3, 2, 2, 2], 1.0);
            let ph = random_tensor(r, &[2, 3, 1, 2, 2], 1.0);
            let g = random_tensor(r, &[2, 3, 1, 2, 2], 1.0);
            relative_error(
                &[th, ph, g],
                |t| project(&nonlocal_attention(&t[0], &t[1], &t[2])?.0, s),
                STEP,
            )
        }),
        ("ga_forward", |r, s| {
            let cfg = GaConfig {
                groups: 2,
                spatial_subsample: 2,
                ..Default::default()
            };
            let mut store = ParamStore::new(s);
            let m = GaModule::register(&mut store, "ga", 4, &cfg)?;
            randomize_params(&mut store, s + 1, 0.4);
            let x = random_tensor(r, &[1, 4, 2, 3, 3], 1.0);
            module_relative_error(&store, &x, |f, x| project(&m.forward(f, x)?, s), STEP)
        }),
        ("resnext_block", |r, s| {
            let mut store = ParamStore::new(s);
            let block = ResNeXtBlock::register(&mut store, "block", 4, 6, [2, 2, 2], 2)?;
            randomize_params(&mut store, s + 1, 0.4);
            let x = random_tensor(r, &[2, 4, 2, 4, 4], 1.0);
            module_relative_error(&store, &x, |f, x| project(&block.forward(f, x)?, s), STEP)
        }),
        ("multibox_loss", |r, _| {
            let anchors: Vec<BBox> = (0..20)
                .map(|i| {
                    BBox::new(
                        (i % 5) as f64 * 4.0 + 2.0,
                        (i / 5) as f64 * 4.0 + 2.0,
                        0.0,
                        4.0,
                        4.0,
                    )
                })
                .collect();
            let gts = random_gts(r, 2, 18.0);
            let m = match_anchors(&anchors, &gts, 0.5, 0.4)?;
            let cls = random_tensor(r, &[1, 20, 9], 1.5);
            let reg = random_tensor(r, &[1, 20, 4], 1.5);
            relative_error(
                &[cls, reg],
                |t| Ok(multibox_loss(&t[0], &t[1], std::slice::from_ref(&m), 3, 1.0)?.0),
                STEP,
            )
        }),
        ("micro_network", |r, s| micro_network(r, s)),
    ]
}

fn random_gts(r: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<GtBox> {
    (0..n)
        .map(|_| GtBox {
            bbox: BBox::new(
                r.random_range(1.0..extent),
                r.random_range(1.0..extent),
                r.random_range(0.0..1.0),
                r.random_range(2.0..6.0),
                r.random_range(2.0..6.0),
            ),
            class: r.random_range(1..3),
        })
        .collect()
}

/// Stem, one ResNeXt stage, a GA module and a single detection head,
/// differentiated end to end through the multibox loss.
fn micro_network(r: &mut ChaCha8Rng, s: u64) -> Result<f64> {
    const CLASSES: usize = 3;
    const PER_POSITION: usize = 2;
    let mut store = ParamStore::new(s);
    let stem = ConvBn::register(&mut store, "stem", 1, 4, 3, [2, 2, 2], 1, true)?;
    let stage = ResNeXtBlock::register(&mut store, "stage", 4, 8, [2, 2, 2], 2)?;
    let ga_cfg = GaConfig {
        groups: 2,
        ..Default::default()
    };
    let ga = GaModule::register(&mut store, "ga", 8, &ga_cfg)?;
    let cls = Conv::register(
        &mut store,
        "cls",
        8,
        PER_POSITION * CLASSES,
        3,
        [1, 1, 1],
        1,
        true,
        WeightInit::He,
    )?;
    let reg = Conv::register(
        &mut store,
        "reg",
        8,
        PER_POSITION * 4,
        3,
        [1, 1, 1],
        1,
        true,
        WeightInit::He,
    )?;
    randomize_params(&mut store, s + 1, 0.3);

    // input [1, 1, 4, 8, 8] -> features [1, 8, 1, 2, 2]: 4 positions x 2 anchors
    let x = random_tensor(r, &[1, 1, 4, 8, 8], 1.0);
    let anchors: Vec<BBox> = (0..4)
        .flat_map(|p| {
            let (cx, cy) = ((p % 2) as f64 * 4.0 + 2.0, (p / 2) as f64 * 4.0 + 2.0);
            [
                BBox::new(cx, cy, 2.0, 4.0, 4.0),
                BBox::new(cx, cy, 2.0, 6.0, 3.0),
            ]
        })
        .collect();
    let gts = random_gts(r, 2, 7.0);
    let m: MatchResult = match_anchors(&anchors, &gts, 0.5, 0.4)?;
    let rows = |t: Tensor<f64>, width: usize| -> Result<Tensor<f64>> {
        t.reshape(&[1, PER_POSITION, width, 1, 2, 2])?
            .permute(&[0, 3, 4, 5, 1, 2])?
            .reshape(&[1, 4 * PER_POSITION, width])
    };
    module_relative_error(
        &store,
        &x,
        |f, x| {
            let h = ga.forward(f, &stage.forward(f, &stem.forward(f, x)?)?)?;
            let c = rows(cls.forward(f, &h)?, CLASSES)?;
            let g = rows(reg.forward(f, &h)?, 4)?;
            Ok(multibox_loss(&c, &g, std::slice::from_ref(&m), 3, 1.0)?.0)
        },
        STEP,
    )
}

/// Runs every gradient check over [`INSTANCES`] seeded random instances.
pub fn run_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (name, case) in cases() {
        let mut max_error: f64 = 0.0;
        for seed in 0..INSTANCES {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) + name.len() as u64);
            let err = case(&mut rng, seed)?;
            max_error = if err.is_nan() {
                f64::INFINITY
            } else {
                max_error.max(err)
            };
        }
        checks.push(CheckOutcome {
            name,
            instances: INSTANCES as usize,
            max_error,
        });
    }
    Ok(SuiteReport {
        checks,
        elapsed: start.elapsed(),
    })
}
