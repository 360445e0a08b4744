use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + g + weight_decay * w`, then `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient; the rest keep
    /// their values and velocity.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Vec<T>>,
        lr: f64,
    ) -> Result<()> {
        let (mu, wd, lr) = (
            T::cast(self.momentum),
            T::cast(self.weight_decay),
            T::cast(lr),
        );
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            if g.len() != p.value.len() {
                return Err(Error::shape(
                    "sgd",
                    format!(
                        "gradient of {name} has {} values, parameter {}",
                        g.len(),
                        p.value.len()
                    ),
                ));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((w, vi), &gi) in p.value.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients together so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::cast(max_norm / norm);
        for v in grads.values_mut().flat_map(|g| g.iter_mut()) {
            *v *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Param};

    fn store_with(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new(0);
        s.insert(
            "w",
            Param {
                shape: vec![1],
                value: vec![w],
                trainable: true,
            },
        );
        s
    }

    #[test]
    fn quadratic_matches_closed_form() {
        // loss = a/2 (w - c)^2, plain gradient descent:
        // w_t - c = (1 - lr a)^t (w_0 - c)
        let (a, c, lr, w0) = (3.0, 1.5, 0.1, -2.0);
        let mut store = store_with(w0);
        let mut opt = Sgd::new(0.0, 0.0);
        for t in 1..=25 {
            let w = store.get("w").unwrap().value[0];
            let grads = BTreeMap::from([("w".to_string(), vec![a * (w - c)])]);
            opt.step(&mut store, &grads, lr).unwrap();
            let expect = c + (1.0 - lr * a).powi(t) * (w0 - c);
            assert!((store.get("w").unwrap().value[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_and_decay_recurrence() {
        let mut store = store_with(1.0);
        let mut opt = Sgd::new(0.5, 0.1);
        let g = BTreeMap::from([("w".to_string(), vec![2.0])]);
        opt.step(&mut store, &g, 0.1).unwrap();
        // v = 2 + 0.1 = 2.1, w = 1 - 0.21
        assert!((store.get("w").unwrap().value[0] - 0.79).abs() < 1e-15);
        opt.step(&mut store, &g, 0.1).unwrap();
        // v = 1.05 + 2 + 0.079 = 3.129, w = 0.79 - 0.3129
        assert!((store.get("w").unwrap().value[0] - 0.4771).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_globally() {
        let mut g = BTreeMap::from([
            ("a".to_string(), vec![3.0f64]),
            ("b".to_string(), vec![0.0, 4.0]),
        ]);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["b"], [0.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_and_frozen_params_unchanged() {
        let mut store = store_with(0.25);
        store
            .register("frozen", &[2], Init::Constant(1.0), false)
            .unwrap();
        let before = store.clone();
        let grads = BTreeMap::from([
            ("w".to_string(), vec![7.0]),
            ("frozen".to_string(), vec![1.0, 1.0]),
        ]);
        let mut opt = Sgd::new(0.9, 1e-4);
        opt.step(&mut store, &grads, 0.0).unwrap();
        assert_eq!(store, before);
        let mut opt = Sgd::new(0.9, 1e-4);
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get("frozen").unwrap(), before.get("frozen").unwrap());
    }
}
