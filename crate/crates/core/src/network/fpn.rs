use std::collections::BTreeMap;

use super::config::{Level, NetworkConfig};
use crate::error::{Error, Result};
use crate::ga::GaModule;
use crate::layers::{Conv, WeightInit};
use crate::params::{Forward, ParamStore};
use crate::{Scalar, Tensor};

/// Emitted pyramid maps and their per-axis strides relative to the input.
#[derive(Debug, Clone)]
pub struct PyramidFeatures<T: Scalar> {
    pub levels: BTreeMap<Level, Tensor<T>>,
    pub strides: BTreeMap<Level, [f64; 3]>,
}

/// Top-down pathway from `C4` to the lowest active level. `P_k` is the
/// smoothed merge of `lateral(C_k)` and the upsampled merge above it.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<Level>,
    pub laterals: BTreeMap<usize, Conv>,
    pub smooth: BTreeMap<Level, Conv>,
    pub ga: BTreeMap<Level, GaModule>,
}

impl Pyramid {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig) -> Result<Self> {
        let levels = cfg.levels();
        let lowest = levels[0].index();
        let top = Level::P4.index();
        let ch = cfg.pyramid_channels;
        let mut laterals = BTreeMap::new();
        for k in lowest..=top {
            laterals.insert(
                k,
                Conv::register(
                    store,
                    &format!("fpn.lateral{k}"),
                    cfg.stage_channels(k),
                    ch,
                    1,
                    [1, 1, 1],
                    1,
                    true,
                    WeightInit::He,
                )?,
            );
        }
        let mut smooth = BTreeMap::new();
        let mut ga = BTreeMap::new();
        for &level in &levels {
            smooth.insert(
                level,
                Conv::register(
                    store,
                    &format!("fpn.smooth.{level}"),
                    ch,
                    ch,
                    3,
                    [1, 1, 1],
                    1,
                    true,
                    WeightInit::He,
                )?,
            );
            if cfg.ga_at_fpn {
                ga.insert(
                    level,
                    GaModule::register(store, &format!("fpn.ga.{level}"), ch, &cfg.ga)?,
                );
            }
        }
        Ok(Self {
            levels,
            laterals,
            smooth,
            ga,
        })
    }

    fn merge<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        feats: &BTreeMap<usize, Tensor<T>>,
        anchor_extent: [usize; 3],
        with_ga: bool,
    ) -> Result<PyramidFeatures<T>> {
        if with_ga && self.ga.len() != self.levels.len() {
            return Err(Error::Config(
                "GA modules are not registered on the pyramid".into(),
            ));
        }
        let mut levels = BTreeMap::new();
        let mut strides = BTreeMap::new();
        let mut above: Option<Tensor<T>> = None;
        for (&k, lateral) in self.laterals.iter().rev() {
            let c = feats
                .get(&k)
                .ok_or_else(|| Error::Input(format!("missing backbone level C{k}")))?;
            let lat = lateral.forward(f, c)?;
            let merged = match above {
                None => lat,
                Some(up) => {
                    let (s, t) = (up.shape(), lat.shape());
                    let mut factors = [1; 3];
                    for i in 0..3 {
                        if t[2 + i] % s[2 + i] != 0 {
                            return Err(Error::shape(
                                "fpn_merge",
                                format!(
                                    "C{k} extent {:?} is not a multiple of {:?}",
                                    &t[2..],
                                    &s[2..]
                                ),
                            ));
                        }
                        factors[i] = t[2 + i] / s[2 + i];
                    }
                    lat.add(&up.upsample_nearest(factors)?)?
                }
            };
            if let Some(level) = Level::from_index(k).filter(|l| self.levels.contains(l)) {
                let x = if with_ga {
                    self.ga[&level].forward(f, &merged)?
                } else {
                    merged.clone()
                };
                let p = self.smooth[&level].forward(f, &x)?;
                let e = &p.shape()[2..];
                strides.insert(
                    level,
                    [
                        anchor_extent[0] as f64 / e[0] as f64,
                        anchor_extent[1] as f64 / e[1] as f64,
                        anchor_extent[2] as f64 / e[2] as f64,
                    ],
                );
                levels.insert(level, p);
            }
            above = Some(merged);
        }
        Ok(PyramidFeatures { levels, strides })
    }

    /// Plain feature pyramid. `anchor_extent` is the input extent that level
    /// strides are measured against.
    pub fn fpn_merge<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        feats: &BTreeMap<usize, Tensor<T>>,
        anchor_extent: [usize; 3],
    ) -> Result<PyramidFeatures<T>> {
        self.merge(f, feats, anchor_extent, false)
    }

    /// As [`Pyramid::fpn_merge`] with a GA module on each merged map before
    /// smoothing.
    pub fn ga_fpn_merge<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        feats: &BTreeMap<usize, Tensor<T>>,
        anchor_extent: [usize; 3],
    ) -> Result<PyramidFeatures<T>> {
        self.merge(f, feats, anchor_extent, true)
    }
}
