use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel::{for_each_chunk, map_range};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    dims: [usize; 3],
    cout: usize,
    groups: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
    fn col_rows(&self) -> usize {
        self.cin_g() * self.taps()
    }
    fn in_vox(&self) -> usize {
        self.dims.iter().product()
    }
    fn out_vox(&self) -> usize {
        self.out.iter().product()
    }
    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }
}

/// Output extent of a same-padded convolution.
pub fn same_extent(dim: usize, stride: usize) -> usize {
    dim.div_ceil(stride)
}

fn axis_taps(
    out: usize,
    inp: usize,
    k: usize,
    stride: usize,
    tap: usize,
) -> impl Iterator<Item = Option<usize>> {
    let pad = (k / 2) as isize;
    (0..out).map(move |o| {
        let i = (o * stride + tap) as isize - pad;
        (i >= 0 && (i as usize) < inp).then_some(i as usize)
    })
}

/// Unfolds one sample/group of the input into a `[cin_g * taps, out_vox]` matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geom, col: &mut [T]) {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let p = g.out_vox();
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for tz in 0..kd {
            for ty in 0..kh {
                for tx in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut j = 0;
                    for iz in axis_taps(od, d, kd, sd, tz) {
                        for iy in axis_taps(oh, h, kh, sh, ty) {
                            match (iz, iy) {
                                (Some(iz), Some(iy)) => {
                                    let base = iz * h * w + iy * w;
                                    for ix in axis_taps(ow, w, kw, sw, tx) {
                                        dst[j] = ix.map_or(T::zero(), |ix| xc[base + ix]);
                                        j += 1;
                                    }
                                }
                                _ => {
                                    dst[j..j + ow].fill(T::zero());
                                    j += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto the input grid.
fn col2im<T: Scalar>(col: &[T], g: &Geom, x: &mut [T]) {
    let [d, h, w] = g.dims;
    let [od, oh, ow] = g.out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let p = g.out_vox();
    let mut row = 0;
    for ci in 0..g.cin_g() {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for tz in 0..kd {
            for ty in 0..kh {
                for tx in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut j = 0;
                    for iz in axis_taps(od, d, kd, sd, tz) {
                        for iy in axis_taps(oh, h, kh, sh, ty) {
                            match (iz, iy) {
                                (Some(iz), Some(iy)) => {
                                    let base = iz * h * w + iy * w;
                                    for ix in axis_taps(ow, w, kw, sw, tx) {
                                        if let Some(ix) = ix {
                                            xc[base + ix] += src[j];
                                        }
                                        j += 1;
                                    }
                                }
                                _ => j += ow,
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &Geom) -> Vec<T> {
    let p = g.out_vox();
    let per_sample_in = g.cin * g.in_vox();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for_each_chunk(&mut out, g.cout * p, |b, ob| {
        let xs = &x[b * per_sample_in..(b + 1) * per_sample_in];
        let mut col = if g.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * p]
        };
        for grp in 0..g.groups {
            let xg = &xs[grp * cin_g * g.in_vox()..(grp + 1) * cin_g * g.in_vox()];
            let colv: &[T] = if g.pointwise() {
                xg
            } else {
                im2col(xg, g, &mut col);
                &col
            };
            T::gemm(
                cout_g,
                rows,
                p,
                T::one(),
                &wt[grp * cout_g * rows..(grp + 1) * cout_g * rows],
                rows,
                1,
                colv,
                p,
                1,
                T::zero(),
                &mut ob[grp * cout_g * p..(grp + 1) * cout_g * p],
                p,
                1,
            );
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

/// Gradients for input, weight and bias, each present only when needed.
type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

fn conv_backward<T: Scalar>(
    grad: &[T],
    x: &Tensor<T>,
    wt: &Tensor<T>,
    has_bias: bool,
    g: &Geom,
) -> ConvGrads<T> {
    let p = g.out_vox();
    let per_sample_in = g.cin * g.in_vox();
    let per_sample_out = g.cout * p;
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let xd = x.data();
    let wd = wt.data();

    let gx = x.requires_grad().then(|| {
        let mut gx = vec![T::zero(); xd.len()];
        for_each_chunk(&mut gx, per_sample_in, |b, gxs| {
            let gs = &grad[b * per_sample_out..(b + 1) * per_sample_out];
            let mut col = if g.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); rows * p]
            };
            for grp in 0..g.groups {
                let wg = &wd[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                let gg = &gs[grp * cout_g * p..(grp + 1) * cout_g * p];
                let dst = &mut gxs[grp * cin_g * g.in_vox()..(grp + 1) * cin_g * g.in_vox()];
                if g.pointwise() {
                    T::gemm(
                        rows,
                        cout_g,
                        p,
                        T::one(),
                        wg,
                        1,
                        rows,
                        gg,
                        p,
                        1,
                        T::zero(),
                        dst,
                        p,
                        1,
                    );
                } else {
                    T::gemm(
                        rows,
                        cout_g,
                        p,
                        T::one(),
                        wg,
                        1,
                        rows,
                        gg,
                        p,
                        1,
                        T::zero(),
                        &mut col,
                        p,
                        1,
                    );
                    col2im(&col, g, dst);
                }
            }
        });
        gx
    });

    let gw = wt.requires_grad().then(|| {
        let partials = map_range(g.n, |b| {
            let xs = &xd[b * per_sample_in..(b + 1) * per_sample_in];
            let gs = &grad[b * per_sample_out..(b + 1) * per_sample_out];
            let mut gw = vec![T::zero(); wd.len()];
            let mut col = if g.pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); rows * p]
            };
            for grp in 0..g.groups {
                let xg = &xs[grp * cin_g * g.in_vox()..(grp + 1) * cin_g * g.in_vox()];
                let colv: &[T] = if g.pointwise() {
                    xg
                } else {
                    im2col(xg, g, &mut col);
                    &col
                };
                T::gemm(
                    cout_g,
                    p,
                    rows,
                    T::one(),
                    &gs[grp * cout_g * p..(grp + 1) * cout_g * p],
                    p,
                    1,
                    colv,
                    1,
                    p,
                    T::zero(),
                    &mut gw[grp * cout_g * rows..(grp + 1) * cout_g * rows],
                    rows,
                    1,
                );
            }
            gw
        });
        let mut total = vec![T::zero(); wd.len()];
        for part in partials {
            total.iter_mut().zip(&part).for_each(|(a, &b)| *a += b);
        }
        total
    });

    let gb = has_bias.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for b in 0..g.n {
            for (co, acc) in gb.iter_mut().enumerate() {
                let base = b * per_sample_out + co * p;
                *acc += grad[base..base + p].iter().copied().sum::<T>();
            }
        }
        gb
    });
    (gx, gw, gb)
}

impl<T: Scalar> Tensor<T> {
    /// Same-padded 3-D convolution of an `[N, C_in, D, H, W]` input with
    /// weights `[C_out, C_in / groups, kD, kH, kW]`. Padding is zero-filled and
    /// output extents are `ceil(dim / stride)`.
    pub fn conv3d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: [usize; 3],
        groups: usize,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("input must be 5-D, got {xs:?}"),
            ));
        }
        if ws.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("weight must be 5-D, got {ws:?}"),
            ));
        }
        if groups == 0 || !xs[1].is_multiple_of(groups) || !ws[0].is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "groups {groups} must divide C_in {} and C_out {}",
                xs[1], ws[0]
            )));
        }
        if ws[1] * groups != xs[1] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "weight expects {} input channels per group, input has {} over {groups} groups",
                    ws[1], xs[1]
                ),
            ));
        }
        if ws[2..].iter().any(|&k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "kernel extents must be odd, got {:?}",
                &ws[2..]
            )));
        }
        if stride.contains(&0) {
            return Err(Error::Config(format!(
                "stride must be positive, got {stride:?}"
            )));
        }
        if let Some(b) = bias {
            if b.numel() != ws[0] {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "bias has {} entries for {} output channels",
                        b.numel(),
                        ws[0]
                    ),
                ));
            }
        }
        let dims = [xs[2], xs[3], xs[4]];
        let geom = Geom {
            n: xs[0],
            cin: xs[1],
            dims,
            cout: ws[0],
            groups,
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            out: [0, 1, 2].map(|i| same_extent(dims[i], stride[i])),
        };
        let data = conv_forward(self.data(), weight.data(), bias.map(Tensor::data), &geom);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            vec![geom.n, geom.cout, geom.out[0], geom.out[1], geom.out[2]],
            data,
            parents,
            Box::new(move |g, p| {
                let has_bias = has_bias && p[2].requires_grad();
                let (gx, gw, gb) = conv_backward(g, &p[0], &p[1], has_bias, &geom);
                let mut out = vec![gx, gw];
                if p.len() > 2 {
                    out.push(gb);
                }
                out
            }),
        ))
    }

    /// Per-voxel linear map across channels: input `[N, C_in, ...]`, weights
    /// `[C_out, C_in, 1, ...]` (any trailing unit axes).
    pub fn conv1x1(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let xs = self.shape().to_vec();
        let ws = weight.shape();
        if xs.len() < 2 || ws.len() < 2 || ws[2..].iter().any(|&k| k != 1) {
            return Err(Error::shape(
                "conv1x1",
                format!("input {xs:?} / weight {ws:?} are not a pointwise pair"),
            ));
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        if ws[1] != cin {
            return Err(Error::shape(
                "conv1x1",
                format!("weight expects {} input channels, input has {cin}", ws[1]),
            ));
        }
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(Error::shape(
                    "conv1x1",
                    format!("bias {} vs {cout} outputs", b.numel()),
                ));
            }
        }
        let s: usize = xs[2..].iter().product();
        let x = self.data();
        let w = weight.data();
        let bias_data = bias.map(Tensor::data);
        let mut out = vec![T::zero(); n * cout * s];
        for_each_chunk(&mut out, cout * s, |b, ob| {
            T::gemm(
                cout,
                cin,
                s,
                T::one(),
                w,
                cin,
                1,
                &x[b * cin * s..(b + 1) * cin * s],
                s,
                1,
                T::zero(),
                ob,
                s,
                1,
            );
            if let Some(bias) = bias_data {
                for (co, &bv) in bias.iter().enumerate() {
                    ob[co * s..(co + 1) * s].iter_mut().for_each(|v| *v += bv);
                }
            }
        });
        let mut shape = xs.clone();
        shape[1] = cout;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            shape,
            out,
            parents,
            Box::new(move |g, p| {
                let (x, w) = (&p[0], &p[1]);
                let wd = w.data();
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![T::zero(); n * cin * s];
                    for_each_chunk(&mut gx, cin * s, |b, gxs| {
                        T::gemm(
                            cin,
                            cout,
                            s,
                            T::one(),
                            wd,
                            1,
                            cin,
                            &g[b * cout * s..(b + 1) * cout * s],
                            s,
                            1,
                            T::zero(),
                            gxs,
                            s,
                            1,
                        );
                    });
                    gx
                });
                let gw = w.requires_grad().then(|| {
                    let mut gw = vec![T::zero(); cout * cin];
                    for b in 0..n {
                        T::gemm(
                            cout,
                            s,
                            cin,
                            T::one(),
                            &g[b * cout * s..(b + 1) * cout * s],
                            s,
                            1,
                            &x.data()[b * cin * s..(b + 1) * cin * s],
                            1,
                            s,
                            T::one(),
                            &mut gw,
                            cin,
                            1,
                        );
                    }
                    gw
                });
                let mut grads = vec![gx, gw];
                if p.len() > 2 {
                    let mut gb = vec![T::zero(); cout];
                    for b in 0..n {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            let base = (b * cout + co) * s;
                            *acc += g[base..base + s].iter().copied().sum::<T>();
                        }
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }
}


#[cfg(test)]
mod tests {
    use super::reference::naive_conv3d;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::<f64>::ones(&[1, 1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3, 3]);
        let y = x.conv3d(&w, None, [1, 1, 1], 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn identity_kernel_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(&[2, 1, 3, 4, 5], rand_vec(&mut rng, 120)).unwrap();
        let mut k = vec![0.0; 27];
        k[13] = 1.0;
        let w = Tensor::new(&[1, 1, 3, 3, 3], k).unwrap();
        let y = x
            .conv3d(&w, Some(&Tensor::zeros(&[1])), [1, 1, 1], 1)
            .unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = [2, 4, 5, 6, 6];
        let ws = [3, 4, 3, 3, 3];
        let xv = rand_vec(&mut rng, xs.iter().product());
        let wv = rand_vec(&mut rng, ws.iter().product());
        let bv = rand_vec(&mut rng, 3);
        for stride in [[1, 1, 1], [2, 2, 2], [1, 2, 3]] {
            let (expect, shape) = naive_conv3d(&xv, xs, &wv, ws, Some(&bv), stride, 1);
            let x = Tensor::new(&xs, xv.clone()).unwrap();
            let w = Tensor::new(&ws, wv.clone()).unwrap();
            let b = Tensor::new(&[3], bv.clone()).unwrap();
            let y = x.conv3d(&w, Some(&b), stride, 1).unwrap();
            assert_eq!(y.shape(), &shape);
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn grouped_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = [1, 6, 3, 4, 4];
        let ws = [6, 2, 3, 1, 3];
        let xv = rand_vec(&mut rng, xs.iter().product());
        let wv = rand_vec(&mut rng, ws.iter().product());
        let (expect, _) = naive_conv3d(&xv, xs, &wv, ws, None, [1, 1, 1], 3);
        let y = Tensor::new(&xs, xv)
            .unwrap()
            .conv3d(&Tensor::new(&ws, wv).unwrap(), None, [1, 1, 1], 3)
            .unwrap();
        for (a, e) in y.data().iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn configuration_errors() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2, 2, 2]);
        let w = Tensor::<f64>::zeros(&[3, 2, 3, 3, 3]);
        assert!(matches!(
            x.conv3d(&w, None, [1, 1, 1], 2),
            Err(Error::Config(_))
        ));
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3, 3]);
        assert!(matches!(
            x.conv3d(&w, None, [1, 1, 1], 1),
            Err(Error::Shape { .. })
        ));
        let w = Tensor::<f64>::zeros(&[4, 4, 2, 3, 3]);
        assert!(matches!(
            x.conv3d(&w, None, [1, 1, 1], 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_padding_preserves_extents() {
        let x = Tensor::<f32>::ones(&[1, 1, 5, 7, 9]);
        for k in [1, 3, 5] {
            let w = Tensor::<f32>::ones(&[2, 1, k, k, k]);
            assert_eq!(
                x.conv3d(&w, None, [1, 1, 1], 1).unwrap().shape(),
                &[1, 2, 5, 7, 9]
            );
        }
        let w = Tensor::<f32>::ones(&[2, 1, 3, 3, 3]);
        assert_eq!(
            x.conv3d(&w, None, [2, 2, 2], 1).unwrap().shape(),
            &[1, 2, 3, 4, 5]
        );
    }

    #[test]
    fn conv1x1_identity_and_sum() {
        let x = Tensor::<f64>::new(&[1, 2, 1, 1, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let eye = Tensor::new(&[2, 2, 1, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(
            x.conv1x1(&eye, Some(&Tensor::zeros(&[2]))).unwrap().data(),
            x.data()
        );
        let sum = Tensor::new(&[1, 2, 1, 1, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(x.conv1x1(&sum, None).unwrap().data(), &[11.0, 22.0]);
        let bad = Tensor::<f64>::zeros(&[1, 3, 1, 1, 1]);
        assert!(x.conv1x1(&bad, None).is_err());
    }

    #[test]
    fn conv1x1_matches_conv3d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(&[2, 3, 2, 3, 4], rand_vec(&mut rng, 144)).unwrap();
        let w = Tensor::new(&[5, 3, 1, 1, 1], rand_vec(&mut rng, 15)).unwrap();
        let b = Tensor::new(&[5], rand_vec(&mut rng, 5)).unwrap();
        let a = x.conv1x1(&w, Some(&b)).unwrap();
        let c = x.conv3d(&w, Some(&b), [1, 1, 1], 1).unwrap();
        for (u, v) in a.data().iter().zip(c.data()) {
            assert!((u - v).abs() <= 1e-12);
        }
    }
}
