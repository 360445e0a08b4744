//! Group-attention (GA) module: a grouped 3x3x3 convolution over channel
//! partitions, followed by non-local embedded-Gaussian attention
//!
//! ```text
//! y_i = sum_j softmax_j(theta_i . phi_j) * g_j
//! ```
//!
//! and a 1x1x1 output projection added back onto the input. The output always
//! has the input's shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, WeightInit};
use crate::params::{Forward, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_GROUPS: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    /// Requested number of channel groups `M`.
    pub groups: usize,
    /// Width of the theta/phi/g embeddings; `None` means `max(C / 2, 1)`.
    pub embed_channels: Option<usize>,
    /// Stride applied to phi/g positions to bound the pairwise matrix.
    pub spatial_subsample: usize,
    pub residual: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            groups: DEFAULT_GROUPS,
            embed_channels: None,
            spatial_subsample: 1,
            residual: true,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("GA groups must be >= 1".into()));
        }
        if self.embed_channels == Some(0) {
            return Err(Error::Config("GA embed_channels must be >= 1".into()));
        }
        if self.spatial_subsample == 0 {
            return Err(Error::Config("GA spatial_subsample must be >= 1".into()));
        }
        Ok(())
    }

    pub fn embed_for(&self, channels: usize) -> usize {
        self.embed_channels.unwrap_or((channels / 2).max(1))
    }
}

/// Largest divisor of `channels` that does not exceed `requested`.
pub fn resolve_groups(channels: usize, requested: usize) -> Result<usize> {
    if channels == 0 || requested == 0 {
        return Err(Error::Config(format!(
            "cannot split {channels} channels into {requested} groups"
        )));
    }
    Ok((1..=requested.min(channels))
        .rev()
        .find(|m| channels.is_multiple_of(*m))
        .unwrap_or(1))
}

/// Row-stochastic attention matrices, one `[queries, keys]` block per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn row(&self, sample: usize, query: usize) -> &[T] {
        let start = (sample * self.queries + query) * self.keys;
        &self.values[start..start + self.keys]
    }

    pub fn max_row_deviation(&self) -> f64 {
        self.values
            .chunks(self.keys.max(1))
            .map(|r| (r.iter().copied().sum::<T>().f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Non-local attention over flattened spatial positions.
///
/// `theta` is `[N, E, D, H, W]`; `phi` and `g_feat` share a (possibly
/// subsampled) `[N, E, D', H', W']` shape. Returns `y` shaped like `theta`.
pub fn nonlocal_attention<T: Scalar>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g_feat: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionWeights<T>)> {
    let ts = theta.shape().to_vec();
    let ps = phi.shape();
    if ts.len() < 3 || ps.len() != ts.len() || g_feat.shape() != ps {
        return Err(Error::shape(
            "nonlocal_attention",
            format!("theta {ts:?}, phi {ps:?}, g {:?}", g_feat.shape()),
        ));
    }
    if ts[0] != ps[0] || ts[1] != ps[1] {
        return Err(Error::shape(
            "nonlocal_attention",
            format!("embedding channels differ: theta {ts:?} vs phi {ps:?}"),
        ));
    }
    let (y, weights) = attend(theta, phi, g_feat)?;
    let ws = weights.shape();
    let attn = AttentionWeights {
        batch: ws[0],
        queries: ws[1],
        keys: ws[2],
        values: weights.to_vec(),
    };
    Ok((y, attn))
}

/// Shape-checked body of [`nonlocal_attention`], keeping the weights as a
/// `[N, P, P']` tensor.
fn attend<T: Scalar>(
    theta: &Tensor<T>,
    phi: &Tensor<T>,
    g_feat: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let ts = theta.shape().to_vec();
    let ps = phi.shape();
    let (n, e) = (ts[0], ts[1]);
    let p: usize = ts[2..].iter().product();
    let pk: usize = ps[2..].iter().product();
    let q = theta.reshape(&[n, e, p])?.permute(&[0, 2, 1])?;
    let k = phi.reshape(&[n, e, pk])?;
    let weights = q.bmm(&k)?.softmax(2)?;
    let v = g_feat.reshape(&[n, e, pk])?.permute(&[0, 2, 1])?;
    let y = weights.bmm(&v)?.permute(&[0, 2, 1])?.reshape(&ts)?;
    Ok((y, weights))
}

#[derive(Debug, Clone)]
pub struct GaModule {
    pub channels: usize,
    /// Effective group count after clamping to a divisor of `channels`.
    pub groups: usize,
    pub embed: usize,
    pub residual: bool,
    pub group_conv: Conv,
    pub theta: Conv,
    pub phi: Conv,
    pub g: Conv,
    pub out: Conv,
}

impl GaModule {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cfg: &GaConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let groups = resolve_groups(channels, cfg.groups)?;
        let embed = cfg.embed_for(channels);
        let s = cfg.spatial_subsample;
        let conv = |store: &mut ParamStore<T>, name: &str, cin, cout, k, stride, groups, init| {
            Conv::register(
                store,
                &format!("{prefix}.{name}"),
                cin,
                cout,
                k,
                stride,
                groups,
                true,
                init,
            )
        };
        Ok(Self {
            channels,
            groups,
            embed,
            residual: cfg.residual,
            group_conv: conv(
                store,
                "group",
                channels,
                channels,
                3,
                [1, 1, 1],
                groups,
                WeightInit::He,
            )?,
            theta: conv(
                store,
                "theta",
                channels,
                embed,
                1,
                [1, 1, 1],
                1,
                WeightInit::He,
            )?,
            phi: conv(
                store,
                "phi",
                channels,
                embed,
                1,
                [s, s, s],
                1,
                WeightInit::He,
            )?,
            g: conv(store, "g", channels, embed, 1, [s, s, s], 1, WeightInit::He)?,
            // Zero projection: the module starts as an identity map.
            out: conv(
                store,
                "out",
                embed,
                channels,
                1,
                [1, 1, 1],
                1,
                WeightInit::Zero,
            )?,
        })
    }

    pub fn group_stage<T: Scalar>(&self, f: &Forward<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.group_conv.forward(f, x)
    }

    pub fn attention_embed<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        Ok((
            self.theta.forward(f, x)?,
            self.phi.forward(f, x)?,
            self.g.forward(f, x)?,
        ))
    }

    pub fn forward_with_weights<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        x: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttentionWeights<T>)> {
        let grouped = self.group_stage(f, x)?;
        let (theta, phi, g) = self.attention_embed(f, &grouped)?;
        let (y, weights) = nonlocal_attention(&theta, &phi, &g)?;
        let z = self.out.forward(f, &y)?;
        let out = if self.residual { x.add(&z)? } else { z };
        Ok((out, weights))
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let grouped = self.group_stage(f, x)?;
        let (theta, phi, g) = self.attention_embed(f, &grouped)?;
        let z = self.out.forward(f, &attend(&theta, &phi, &g)?.0)?;
        if self.residual {
            x.add(&z)
        } else {
            Ok(z)
        }
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.channels {
            return Err(Error::shape(
                "ga_forward",
                format!("expected [N, {}, D, H, W], got {s:?}", self.channels),
            ));
        }
        Ok(())
    }
}
