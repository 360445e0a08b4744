//! Named parameter storage, initialisation, and the per-pass forward context.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, RunningStats, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    /// Running statistics and other buffers are stored but never optimised.
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal {
        fan_in: usize,
    },
    Normal {
        std: f64,
    },
    Constant(f64),
}

/// 64-bit FNV-1a, used to derive an independent RNG stream per parameter.
pub(crate) fn fnv1a(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parameters keyed by dotted name. Each parameter draws its initial values
/// from its own stream seeded by `(seed, name)`, so adding or removing a
/// module leaves every other parameter's initialisation unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    seed: u64,
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let n = numel(shape);
        let value = match init {
            Init::Constant(c) => vec![T::cast(c); n],
            Init::HeNormal { fan_in } => {
                self.draw_normal(name, n, (2.0 / fan_in.max(1) as f64).sqrt())?
            }
            Init::Normal { std } => self.draw_normal(name, n, std)?,
        };
        self.params.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                value,
                trainable,
            },
        );
        Ok(())
    }

    fn draw_normal(&self, name: &str, n: usize, std: f64) -> Result<Vec<T>> {
        let normal = Normal::new(0.0, std)
            .map_err(|_| Error::Config(format!("invalid standard deviation {std} for `{name}`")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, name));
        Ok((0..n).map(|_| T::cast(normal.sample(&mut rng))).collect())
    }

    pub fn insert(&mut self, name: &str, param: Param<T>) {
        self.params.insert(name.to_string(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    /// Overwrites a parameter's values; the shape must not change.
    pub fn set(&mut self, name: &str, value: Vec<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.len() != value.len() {
            return Err(Error::shape(
                "set_param",
                format!(
                    "`{name}` holds {} values, got {}",
                    p.value.len(),
                    value.len()
                ),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            value: p.value.iter().map(|v| U::cast(v.f64())).collect(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward pass: parameter leaves (created once per name, so
/// reuse accumulates gradient), pending batch-norm statistics, and the
/// dropout seed sequence.
pub struct Forward<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    mode: Mode,
    track_grad: bool,
    leaves: RefCell<BTreeMap<String, Tensor<T>>>,
    stat_updates: RefCell<Vec<(String, RunningStats<T>)>>,
    dropout_seed: u64,
    dropout_calls: Cell<u64>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode, track_grad: bool, dropout_seed: u64) -> Self {
        Self {
            store,
            mode,
            track_grad,
            leaves: RefCell::new(BTreeMap::new()),
            stat_updates: RefCell::new(Vec::new()),
            dropout_seed,
            dropout_calls: Cell::new(0),
        }
    }

    /// Inference: evaluation mode without gradient tracking.
    pub fn eval(store: &'a ParamStore<T>) -> Self {
        Self::new(store, Mode::Eval, false, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Tensor<T>> {
        if let Some(t) = self.leaves.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.store.get(name)?;
        let t = Tensor::leaf(&p.shape, p.value.clone(), self.track_grad && p.trainable)?;
        self.leaves.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats<T>> {
        Ok(RunningStats {
            mean: self
                .store
                .get(&format!("{prefix}.running_mean"))?
                .value
                .clone(),
            var: self
                .store
                .get(&format!("{prefix}.running_var"))?
                .value
                .clone(),
        })
    }

    pub(crate) fn record_stats(&self, prefix: &str, stats: RunningStats<T>) {
        self.stat_updates
            .borrow_mut()
            .push((prefix.to_string(), stats));
    }

    pub fn next_dropout_seed(&self) -> u64 {
        let k = self.dropout_calls.get();
        self.dropout_calls.set(k + 1);
        fnv1a(self.dropout_seed, &k.to_string())
    }

    /// Gradients of every trainable parameter touched in this pass, after
    /// `backward` has run on the loss.
    pub fn gradients(&self) -> BTreeMap<String, Vec<T>> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(k, t)| t.grad().map(|g| (k.clone(), g)))
            .collect()
    }

    /// Batch-norm running statistics gathered in training mode, to be
    /// written once the pass no longer borrows the store.
    pub fn take_stat_updates(&self) -> StatUpdates<T> {
        StatUpdates(self.stat_updates.borrow_mut().drain(..).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdates<T>(Vec<(String, RunningStats<T>)>);

impl<T: Scalar> StatUpdates<T> {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn apply(self, store: &mut ParamStore<T>) -> Result<()> {
        for (prefix, stats) in self.0 {
            store.set(&format!("{prefix}.running_mean"), stats.mean)?;
            store.set(&format!("{prefix}.running_var"), stats.var)?;
        }
        Ok(())
    }
}
