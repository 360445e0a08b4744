use std::collections::BTreeMap;

use super::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::ga::resolve_groups;
use crate::layers::ConvBn;
use crate::params::{Forward, ParamStore};
use crate::{Scalar, Tensor};

/// Deepest backbone stage, `C6`.
pub const TOP_STAGE: usize = 6;
/// Required divisor of the input height and width. Extents are rounded up
/// past this point, so the deepest maps may be `1x1`.
pub const MAX_STRIDE: usize = 32;

/// Bottleneck: 1x1 reduce, grouped 3x3x3, 1x1 expand (each with batch norm
/// and ReLU), plus a shortcut that is projected by a strided 1x1 convolution
/// when channels or stride change.
#[derive(Debug, Clone)]
pub struct ResNeXtBlock {
    pub reduce: ConvBn,
    pub grouped: ConvBn,
    pub expand: ConvBn,
    pub shortcut: Option<ConvBn>,
    pub cardinality: usize,
}

impl ResNeXtBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        stride: [usize; 3],
        cardinality: usize,
    ) -> Result<Self> {
        let width = (out_channels / 2).max(1);
        let cardinality = resolve_groups(width, cardinality)?;
        let one = [1, 1, 1];
        let reduce = ConvBn::register(
            store,
            &format!("{prefix}.reduce"),
            in_channels,
            width,
            1,
            one,
            1,
            true,
        )?;
        let grouped = ConvBn::register(
            store,
            &format!("{prefix}.grouped"),
            width,
            width,
            3,
            stride,
            cardinality,
            true,
        )?;
        let expand = ConvBn::register(
            store,
            &format!("{prefix}.expand"),
            width,
            out_channels,
            1,
            one,
            1,
            true,
        )?;
        let shortcut = if in_channels != out_channels || stride != one {
            Some(ConvBn::register(
                store,
                &format!("{prefix}.shortcut"),
                in_channels,
                out_channels,
                1,
                stride,
                1,
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            reduce,
            grouped,
            expand,
            shortcut,
            cardinality,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.reduce.forward(f, x)?;
        let y = self.grouped.forward(f, &y)?;
        let y = self.expand.forward(f, &y)?;
        let s = match &self.shortcut {
            Some(p) => p.forward(f, x)?,
            None => x.clone(),
        };
        s.add(&y)
    }
}

/// Stem (`C1`, stride 2) and stages `C2..C6`, each entered through a
/// stride-2 block. Depth stops being halved once it reaches 1.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: ConvBn,
    /// `stages[k - 2]` produces `C_k`.
    pub stages: Vec<Vec<ResNeXtBlock>>,
}

/// Stride for one stage given the current depth extent.
pub(crate) fn stage_stride(depth: usize) -> [usize; 3] {
    [if depth > 1 { 2 } else { 1 }, 2, 2]
}

/// Depth extent sequence `C1..C6` for an input of depth `d`.
pub(crate) fn depth_schedule(d: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(TOP_STAGE);
    let mut cur = d;
    for _ in 0..TOP_STAGE {
        cur = if cur > 1 { cur.div_ceil(2) } else { 1 };
        out.push(cur);
    }
    out
}

impl Backbone {
    /// Registers parameters. Depth strides depend on the input depth, so the
    /// expected input depth is fixed here.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &NetworkConfig,
        in_channels: usize,
        input_depth: usize,
    ) -> Result<Self> {
        let depths = depth_schedule(input_depth);
        let stem = ConvBn::register(
            store,
            "backbone.stem",
            in_channels,
            cfg.stage_channels(1),
            3,
            stage_stride(input_depth),
            1,
            true,
        )?;
        let mut stages = Vec::new();
        for k in 2..=TOP_STAGE {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let (cin, stride) = if b == 0 {
                    (cfg.stage_channels(k - 1), stage_stride(depths[k - 2]))
                } else {
                    (cfg.stage_channels(k), [1, 1, 1])
                };
                blocks.push(ResNeXtBlock::register(
                    store,
                    &format!("backbone.c{k}.block{b}"),
                    cin,
                    cfg.stage_channels(k),
                    stride,
                    cfg.cardinality,
                )?);
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages })
    }

    /// Feature maps `C1..C_top` keyed by stage index.
    pub fn forward<T: Scalar>(
        &self,
        f: &Forward<'_, T>,
        x: &Tensor<T>,
        top: usize,
    ) -> Result<BTreeMap<usize, Tensor<T>>> {
        let mut feats = BTreeMap::new();
        let mut cur = self.stem.forward(f, x)?;
        feats.insert(1, cur.clone());
        for k in 2..=top.min(TOP_STAGE) {
            for block in &self.stages[k - 2] {
                cur = block.forward(f, &cur)?;
            }
            feats.insert(k, cur.clone());
        }
        Ok(feats)
    }
}

/// Checks that H and W divide by the deepest stride and depth is a power of
/// two or divisible by it.
pub fn check_input_extents(shape: &[usize]) -> Result<()> {
    if shape.len() != 5 {
        return Err(Error::shape(
            "backbone",
            format!("expected [N, C, D, H, W], got {shape:?}"),
        ));
    }
    for (axis, name) in [(3, "height"), (4, "width")] {
        if shape[axis] == 0 || !shape[axis].is_multiple_of(MAX_STRIDE) {
            return Err(Error::shape(
                "backbone",
                format!("{name} {} is not divisible by {MAX_STRIDE}", shape[axis]),
            ));
        }
    }
    let d = shape[2];
    if d == 0 || !(d.is_power_of_two() || d.is_multiple_of(MAX_STRIDE)) {
        return Err(Error::shape(
            "backbone",
            format!("depth {d} must be a power of two or divisible by {MAX_STRIDE}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{project, random_tensor, relative_error, STEP, TOLERANCE};
    use crate::params::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn depth_clamps_at_one() {
        assert_eq!(depth_schedule(32), [16, 8, 4, 2, 1, 1]);
        assert_eq!(depth_schedule(1), [1; 6]);
        assert_eq!(depth_schedule(16), [8, 4, 2, 1, 1, 1]);
    }

    #[test]
    fn stage_extents() {
        let cfg = NetworkConfig {
            stem_channels: 4,
            max_channels: 16,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new(3);
        let bb = Backbone::register(&mut store, &cfg, 1, 32).unwrap();
        let x = Tensor::<f32>::full(&[1, 1, 32, 64, 64], 0.3);
        let f = Forward::eval(&store);
        let feats = bb.forward(&f, &x, 6).unwrap();
        let extents: Vec<Vec<usize>> = (2..=6).map(|k| feats[&k].shape()[2..].to_vec()).collect();
        assert_eq!(
            extents,
            [
                vec![8, 16, 16],
                vec![4, 8, 8],
                vec![2, 4, 4],
                vec![1, 2, 2],
                vec![1, 1, 1]
            ]
        );
        assert_eq!(feats[&3].shape()[1], 16);
        assert!(feats.values().all(|t| t.all_finite()));
        let again = bb.forward(&f, &x, 6).unwrap();
        for k in 1..=6 {
            assert_eq!(feats[&k].to_vec(), again[&k].to_vec());
        }
    }

    #[test]
    fn extent_errors_name_axis() {
        assert!(check_input_extents(&[1, 1, 32, 64, 64]).is_ok());
        assert!(check_input_extents(&[1, 9, 1, 64, 32]).is_ok());
        let msg = check_input_extents(&[1, 1, 32, 48, 64])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("height"), "{msg}");
        let msg = check_input_extents(&[1, 1, 32, 64, 40])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("width"), "{msg}");
        let msg = check_input_extents(&[1, 1, 12, 64, 64])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("depth"), "{msg}");
    }

    #[test]
    fn zero_expand_returns_shortcut() {
        let mut store = ParamStore::<f64>::new(1);
        let block = ResNeXtBlock::register(&mut store, "b", 4, 8, [1, 1, 1], 2).unwrap();
        let w = &block.expand.conv.weight;
        let n = store.get(w).unwrap().value.len();
        store.set(w, vec![0.0; n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[2, 4, 2, 3, 3], 1.0);
        let f = Forward::new(&store, Mode::Train, false, 0);
        let y = block.forward(&f, &x).unwrap();
        let s = block.shortcut.as_ref().unwrap().forward(&f, &x).unwrap();
        assert_eq!(y.to_vec(), s.to_vec());
    }

    #[test]
    fn single_group_equals_plain_bottleneck() {
        // cardinality 1 must agree with a hand-composed ungrouped pipeline
        let mut store = ParamStore::<f64>::new(8);
        let block = ResNeXtBlock::register(&mut store, "b", 4, 4, [1, 1, 1], 1).unwrap();
        assert_eq!(block.cardinality, 1);
        assert!(block.shortcut.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[1, 4, 3, 3, 3], 1.0);
        let f = Forward::eval(&store);
        let y = block.forward(&f, &x).unwrap();
        let stage = |cb: &ConvBn, x: &Tensor<f64>| {
            let w = f.param(&cb.conv.weight).unwrap();
            let c = x.conv3d(&w, None, [1, 1, 1], 1).unwrap();
            // eval-mode batch norm at init: gamma 1, beta 0, mean 0, var 1
            c.scale(1.0 / (1.0 + crate::tensor::BN_EPS).sqrt()).relu()
        };
        let r = stage(
            &block.expand,
            &stage(&block.grouped, &stage(&block.reduce, &x)),
        );
        let expect = x.add(&r).unwrap();
        for (a, b) in y.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradient_check() {
        for seed in 0..5 {
            let mut store = ParamStore::<f64>::new(seed);
            let block = ResNeXtBlock::register(&mut store, "b", 4, 8, [2, 2, 2], 2).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = random_tensor(&mut rng, &[2, 4, 2, 4, 4], 1.0);
            let err = relative_error(
                &[x],
                |t| {
                    let f = Forward::new(&store, Mode::Train, false, 0);
                    project(&block.forward(&f, &t[0])?, seed)
                },
                STEP,
            )
            .unwrap();
            assert!(err < TOLERANCE, "seed {seed}: {err}");
        }
    }
}
