//! The GA-SSD network: optional GA on the input, ResNeXt backbone, (GA-)FPN
//! pyramid, and per-level multibox heads.

mod backbone;
mod config;
mod fpn;

use std::collections::BTreeMap;

pub use backbone::{check_input_extents, Backbone, ResNeXtBlock, MAX_STRIDE, TOP_STAGE};
pub use config::{AnchorConfig, DetectionConfig, InputMode, Level, NetworkConfig};
pub use fpn::{Pyramid, PyramidFeatures};

use crate::detection::{generate_level_anchors, AnchorBox};
use crate::error::{Error, Result};
use crate::ga::GaModule;
use crate::layers::{Conv, WeightInit};
use crate::params::{Forward, ParamStore};
use crate::{Scalar, Tensor};

/// Prior foreground probability the classifier starts from.
const FOREGROUND_PRIOR: f64 = 0.01;
/// Standard deviation of the head kernels, small so the prior dominates at
/// initialisation.
const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct Head {
    pub cls: Conv,
    pub reg: Conv,
    pub anchors_per_position: usize,
}

/// Predictions for a batch, rows ordered like [`Network::anchors`].
#[derive(Debug, Clone)]
pub struct NetworkOutput<T: Scalar> {
    /// `[N, A, K]` logits.
    pub cls: Tensor<T>,
    /// `[N, A, 4]` box offsets.
    pub reg: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    /// `[C, D, H, W]` of one input sample.
    pub input_shape: [usize; 4],
    pub ga_load: Option<GaModule>,
    pub backbone: Backbone,
    pub pyramid: Pyramid,
    pub heads: BTreeMap<Level, Head>,
    anchors: Vec<AnchorBox>,
}

impl Network {
    /// Registers every parameter of `cfg` in `store` (seeded by the store).
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let [d, h, w] = cfg.detection.tile;
        let input_shape = match cfg.input_mode {
            InputMode::Volume3d => [1, d, h, w],
            InputMode::MultiChannel25d => [cfg.n_slices, 1, h, w],
        };
        check_input_extents(&[1, input_shape[0], input_shape[1], h, w])?;
        let cin = input_shape[0];
        let ga_load = if cfg.ga_at_load {
            Some(GaModule::register(store, "load.ga", cin, &cfg.ga_load)?)
        } else {
            None
        };
        let backbone = Backbone::register(store, cfg, cin, input_shape[1])?;
        let pyramid = Pyramid::register(store, cfg)?;
        let k = cfg.num_classes;
        let ch = cfg.pyramid_channels;
        let mut heads = BTreeMap::new();
        for level in cfg.levels() {
            let a = cfg.anchors.per_position(level)?;
            let cls = Conv::register(
                store,
                &format!("head.{level}.cls"),
                ch,
                a * k,
                3,
                [1, 1, 1],
                1,
                true,
                WeightInit::Normal(HEAD_INIT_STD),
            )?;
            let reg = Conv::register(
                store,
                &format!("head.{level}.reg"),
                ch,
                a * 4,
                3,
                [1, 1, 1],
                1,
                true,
                WeightInit::Normal(HEAD_INIT_STD),
            )?;
            // start every anchor at background with the prior probability
            let bg = ((k - 1) as f64 * (1.0 - FOREGROUND_PRIOR) / FOREGROUND_PRIOR).ln();
            let bias = (0..a * k)
                .map(|i| T::cast(if i % k == 0 { bg } else { 0.0 }))
                .collect();
            store.set(cls.bias.as_deref().expect("head conv has bias"), bias)?;
            heads.insert(
                level,
                Head {
                    cls,
                    reg,
                    anchors_per_position: a,
                },
            );
        }
        let mut net = Self {
            cfg: cfg.clone(),
            input_shape,
            ga_load,
            backbone,
            pyramid,
            heads,
            anchors: Vec::new(),
        };
        net.anchors = net.compute_anchors()?;
        Ok(net)
    }

    /// Fresh parameters for `cfg` from `seed`.
    pub fn build<T: Scalar>(cfg: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new(seed);
        let net = Self::register(&mut store, cfg)?;
        Ok((net, store))
    }

    /// Extent that level strides are measured against: the crop in 3D, the
    /// slice window in 2.5D (so anchors sit on the centre slice).
    fn anchor_extent(&self) -> [usize; 3] {
        let [_, d, h, w] = self.input_shape;
        match self.cfg.input_mode {
            InputMode::Volume3d => [d, h, w],
            InputMode::MultiChannel25d => [self.cfg.n_slices, h, w],
        }
    }

    fn compute_anchors(&self) -> Result<Vec<AnchorBox>> {
        let [_, d, h, w] = self.input_shape;
        let ext = self.anchor_extent();
        let depths = backbone::depth_schedule(d);
        let mut out = Vec::new();
        for level in self.cfg.levels() {
            let k = level.index();
            let e = [depths[k - 1], h >> k, w >> k];
            let stride = [
                ext[0] as f64 / e[0] as f64,
                (1 << k) as f64,
                (1 << k) as f64,
            ];
            let scales = self.cfg.anchors.scales_for(level)?;
            out.extend(generate_level_anchors(
                level,
                e,
                stride,
                scales,
                &self.cfg.anchors.ratios,
            ));
        }
        Ok(out)
    }

    /// Anchors in crop coordinates (voxel `i` spans `[i, i + 1)`).
    pub fn anchors(&self) -> &[AnchorBox] {
        &self.anchors
    }

    pub fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1..] != self.input_shape {
            return Err(Error::shape(
                "network",
                format!("expected [N, {:?}], got {s:?}", self.input_shape),
            ));
        }
        Ok(())
    }

    /// `C1..C_top` for an input batch, after the optional input GA.
    pub fn backbone_forward<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        x: &Tensor<T>,
        top: usize,
    ) -> Result<BTreeMap<usize, Tensor<T>>> {
        self.check_input(x)?;
        let x = match &self.ga_load {
            Some(ga) => ga.forward(f, x)?,
            None => x.clone(),
        };
        self.backbone.forward(f, &x, top)
    }

    pub fn pyramid<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        x: &Tensor<T>,
    ) -> Result<PyramidFeatures<T>> {
        let feats = self.backbone_forward(f, x, Level::P4.index())?;
        if self.cfg.ga_at_fpn {
            self.pyramid.ga_fpn_merge(f, &feats, self.anchor_extent())
        } else {
            self.pyramid.fpn_merge(f, &feats, self.anchor_extent())
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        x: &Tensor<T>,
    ) -> Result<NetworkOutput<T>> {
        let pyr = self.pyramid(f, x)?;
        let n = x.shape()[0];
        let k = self.cfg.num_classes;
        let mut cls_parts = Vec::new();
        let mut reg_parts = Vec::new();
        for (level, p) in &pyr.levels {
            let head = &self.heads[level];
            let p = if self.cfg.dropout > 0.0 {
                p.dropout(self.cfg.dropout, f.training(), f.next_dropout_seed())?
            } else {
                p.clone()
            };
            let a = head.anchors_per_position;
            let [d, h, w] = [p.shape()[2], p.shape()[3], p.shape()[4]];
            let to_rows = |t: Tensor<T>, width: usize| -> Result<Tensor<T>> {
                t.reshape(&[n, a, width, d, h, w])?
                    .permute(&[0, 3, 4, 5, 1, 2])?
                    .reshape(&[n, d * h * w * a, width])
            };
            cls_parts.push(to_rows(head.cls.forward(f, &p)?, k)?);
            reg_parts.push(to_rows(head.reg.forward(f, &p)?, 4)?);
        }
        let cls = Tensor::concat(&cls_parts, 1)?;
        let reg = Tensor::concat(&reg_parts, 1)?;
        debug_assert_eq!(cls.shape()[1], self.anchors.len());
        Ok(NetworkOutput { cls, reg })
    }
}
