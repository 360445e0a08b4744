//! Convolution and normalisation layers bound to names in a [`ParamStore`].

use crate::error::Result;
use crate::params::{Forward, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    He,
    /// Zero-mean normal with a fixed standard deviation.
    Normal(f64),
    Zero,
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: [usize; 3],
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: [usize; 3],
        groups: usize,
        bias: bool,
        init: WeightInit,
    ) -> Result<Self> {
        let weight = format!("{prefix}.weight");
        let fan_in = in_channels / groups * kernel.pow(3);
        let winit = match init {
            WeightInit::He => Init::HeNormal { fan_in },
            WeightInit::Normal(std) => Init::Normal { std },
            WeightInit::Zero => Init::Constant(0.0),
        };
        store.register(
            &weight,
            &[out_channels, in_channels / groups, kernel, kernel, kernel],
            winit,
            true,
        )?;
        let bias = if bias {
            let name = format!("{prefix}.bias");
            store.register(&name, &[out_channels], Init::Constant(0.0), true)?;
            Some(name)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let w = f.param(&self.weight)?;
        let b = self.bias.as_deref().map(|n| f.param(n)).transpose()?;
        if self.kernel == 1 && self.stride == [1, 1, 1] && self.groups == 1 {
            x.conv1x1(&w, b.as_ref())
        } else {
            x.conv3d(&w, b.as_ref(), self.stride, self.groups)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        store.register(
            &format!("{prefix}.gamma"),
            &[channels],
            Init::Constant(1.0),
            true,
        )?;
        store.register(
            &format!("{prefix}.beta"),
            &[channels],
            Init::Constant(0.0),
            true,
        )?;
        store.register(
            &format!("{prefix}.running_mean"),
            &[channels],
            Init::Constant(0.0),
            false,
        )?;
        store.register(
            &format!("{prefix}.running_var"),
            &[channels],
            Init::Constant(1.0),
            false,
        )?;
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gamma = f.param(&format!("{}.gamma", self.prefix))?;
        let beta = f.param(&format!("{}.beta", self.prefix))?;
        let running = f.running_stats(&self.prefix)?;
        let (y, upd) = x.batch_norm(&gamma, &beta, &running, f.training())?;
        if let Some(upd) = upd {
            f.record_stats(&self.prefix, upd);
        }
        Ok(y)
    }
}

/// Convolution (no bias) followed by batch norm and optionally ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: [usize; 3],
        groups: usize,
        relu: bool,
    ) -> Result<Self> {
        let conv = Conv::register(
            store,
            &format!("{prefix}.conv"),
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            false,
            WeightInit::He,
        )?;
        let bn = BatchNorm::register(store, &format!("{prefix}.bn"), out_channels)?;
        Ok(Self { conv, bn, relu })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.bn.forward(f, &self.conv.forward(f, x)?)?;
        Ok(if self.relu { y.relu() } else { y })
    }
}
