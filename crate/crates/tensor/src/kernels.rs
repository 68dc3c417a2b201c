//! Forward and backward kernels over plain tensors.
//!
//! Every kernel is deterministic: parallel loops only split work over disjoint
//! output elements, and reductions run in a fixed order.

use rayon::prelude::*;

use crate::element::{gemm, Element, MatRef};
use crate::error::{dim_err, Result, TensorError};
use crate::tensor::Tensor;

fn expect_rank<T: Element>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(dim_err!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        ));
    }
    Ok(())
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

// ---------------------------------------------------------------- elementwise

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "add")?;
    a.zip_map(b, |x, y| x + y)
}

pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "sub")?;
    a.zip_map(b, |x, y| x - y)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(a, b, "mul")?;
    a.zip_map(b, |x, y| x * y)
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Adds `bias[c]` along `axis`, the only broadcast the crate supports.
pub fn add_bias<T: Element>(x: &Tensor<T>, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, c, inner) = axis_split(x.shape(), axis)?;
    if bias.shape() != [c] {
        return Err(dim_err!(
            "bias shape {:?} does not match axis {axis} of {:?}",
            bias.shape(),
            x.shape()
        ));
    }
    let mut out = x.clone();
    let b = bias.data();
    for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let bc = b[chunk_idx % c];
        chunk.iter_mut().for_each(|v| *v = *v + bc);
    }
    debug_assert_eq!(out.numel(), outer * c * inner);
    Ok(out)
}

pub fn add_bias_backward<T: Element>(dy: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (_, c, inner) = axis_split(dy.shape(), axis)?;
    let mut db = vec![T::zero(); c];
    for (chunk_idx, chunk) in dy.data().chunks(inner).enumerate() {
        let s: T = chunk.iter().copied().sum();
        db[chunk_idx % c] = db[chunk_idx % c] + s;
    }
    Tensor::from_vec([c], db)
}

/// Multiplies sample `n` (leading axis) by `scales[n]`.
pub fn scale_samples<T: Element>(x: &Tensor<T>, scales: &[T]) -> Result<Tensor<T>> {
    if x.rank() == 0 || x.shape()[0] != scales.len() {
        return Err(dim_err!(
            "scale_samples: {} scales for shape {:?}",
            scales.len(),
            x.shape()
        ));
    }
    let per = x.numel() / scales.len();
    let mut out = x.clone();
    for (chunk, &s) in out.data_mut().chunks_mut(per).zip(scales) {
        chunk.iter_mut().for_each(|v| *v = *v * s);
    }
    Ok(out)
}

// ---------------------------------------------------------------- gelu

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact erf-based GELU: `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_f64_lossy(gelu_scalar(v.as_f64())))
}

pub fn gelu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(dy, |v, g| {
        g * T::from_f64_lossy(gelu_grad_scalar(v.as_f64()))
    })
}

// ---------------------------------------------------------------- matmul

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 2, "matmul lhs")?;
    expect_rank(b, 2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(dim_err!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        &mut out,
        false,
    );
    Tensor::from_vec([m, n], out)
}

/// Returns `(dA, dB)` for `Y = A B`.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let dy_m = MatRef::row_major(dy.data(), m, n);
    let mut da = vec![T::zero(); m * k];
    gemm(dy_m, MatRef::row_major(b.data(), k, n).t(), &mut da, false);
    let mut db = vec![T::zero(); k * n];
    gemm(MatRef::row_major(a.data(), m, k).t(), dy_m, &mut db, false);
    Ok((Tensor::from_vec([m, k], da)?, Tensor::from_vec([k, n], db)?))
}

/// Batched product `[B,m,k] x [B,k,n] -> [B,m,n]`.
pub fn bmm<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(a, 3, "bmm lhs")?;
    expect_rank(b, 3, "bmm rhs")?;
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if bs != bs2 || k != k2 {
        return Err(dim_err!(
            "bmm extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); bs * m * n];
    out.par_chunks_mut(m * n).enumerate().for_each(|(i, o)| {
        gemm(
            MatRef::row_major(&a.data()[i * m * k..(i + 1) * m * k], m, k),
            MatRef::row_major(&b.data()[i * k * n..(i + 1) * k * n], k, n),
            o,
            false,
        );
    });
    Tensor::from_vec([bs, m, n], out)
}

pub fn bmm_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut da = vec![T::zero(); bs * m * k];
    let mut db = vec![T::zero(); bs * k * n];
    da.par_chunks_mut(m * k)
        .zip(db.par_chunks_mut(k * n))
        .enumerate()
        .for_each(|(i, (da_i, db_i))| {
            let a_i = MatRef::row_major(&a.data()[i * m * k..(i + 1) * m * k], m, k);
            let b_i = MatRef::row_major(&b.data()[i * k * n..(i + 1) * k * n], k, n);
            let dy_i = MatRef::row_major(&dy.data()[i * m * n..(i + 1) * m * n], m, n);
            gemm(dy_i, b_i.t(), da_i, false);
            gemm(a_i.t(), dy_i, db_i, false);
        });
    Ok((
        Tensor::from_vec([bs, m, k], da)?,
        Tensor::from_vec([bs, k, n], db)?,
    ))
}

// ---------------------------------------------------------------- conv2d

/// Hyperparameters of a grouped 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dSpec {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec::new(1, 0, 1)
    }
}

/// Output extent of a sliding window.
///
/// A window grid that leaves real (non-padding) input uncovered is rejected;
/// a grid that only leaves trailing padding uncovered is accepted.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(TensorError::Config(
            "stride and kernel must be positive".into(),
        ));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(TensorError::Config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    let out = (padded - kernel) / stride + 1;
    let covered = (out - 1) * stride + kernel;
    if covered < input + padding {
        return Err(TensorError::Config(format!(
            "window grid (kernel {kernel}, stride {stride}, padding {padding}) does not tile input extent {input}"
        )));
    }
    Ok(out)
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    spec: Conv2dSpec,
}

impl ConvGeom {
    fn new<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, spec: Conv2dSpec) -> Result<Self> {
        let (n, cin, h, w) = match x.shape() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            s => {
                return Err(dim_err!(
                    "conv2d input must be [C,H,W] or [N,C,H,W], got {s:?}"
                ))
            }
        };
        expect_rank(weight, 4, "conv2d weight")?;
        let (cout, cin_g, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(TensorError::Config(format!(
                "groups {g} must divide input channels {cin} and output channels {cout}"
            )));
        }
        if cin / g != cin_g {
            return Err(dim_err!(
                "conv2d weight {:?} expects {} input channels per group, input has {}",
                weight.shape(),
                cin_g,
                cin / g
            ));
        }
        let oh = conv_out_extent(h, kh, spec.stride, spec.padding)?;
        let ow = conv_out_extent(w, kw, spec.stride, spec.padding)?;
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            cin_g,
            cout_g: cout / g,
            spec,
        })
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.n, self.cout, self.oh, self.ow]
        } else {
            vec![self.cout, self.oh, self.ow]
        }
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g == 1 && self.cout_g == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds the input channels of group `g` of one sample.
    fn im2col<T: Element>(&self, x: &[T], g: usize, cols: &mut [T]) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let hw = self.oh * self.ow;
        for ci in 0..self.cin_g {
            let plane = &x[(g * self.cin_g + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ky as isize - p;
                        let dst_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds column gradients back into the input-gradient planes of group `g`.
    fn col2im<T: Element>(&self, cols: &[T], g: usize, dx: &mut [T]) {
        let (s, p) = (self.spec.stride as isize, self.spec.padding as isize);
        let hw = self.oh * self.ow;
        for ci in 0..self.cin_g {
            let plane = &mut dx[(g * self.cin_g + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                let d = &mut plane[iy as usize * self.w + ix as usize];
                                *d = *d + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Element>(geo: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (s, p) = (geo.spec.stride as isize, geo.spec.padding as isize);
    for c in 0..geo.cin {
        let plane = &x[c * geo.h * geo.w..][..geo.h * geo.w];
        let k = &w[c * geo.kh * geo.kw..][..geo.kh * geo.kw];
        let o = &mut out[c * geo.oh * geo.ow..][..geo.oh * geo.ow];
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let mut acc = T::zero();
                for ky in 0..geo.kh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for kx in 0..geo.kw {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix < 0 || ix >= geo.w as isize {
                            continue;
                        }
                        acc = acc + k[ky * geo.kw + kx] * plane[iy as usize * geo.w + ix as usize];
                    }
                }
                o[oy * geo.ow + ox] = acc;
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    geo: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
) {
    let (s, p) = (geo.spec.stride as isize, geo.spec.padding as isize);
    let mut dx = dx;
    for c in 0..geo.cin {
        let plane = &x[c * geo.h * geo.w..][..geo.h * geo.w];
        let k = &w[c * geo.kh * geo.kw..][..geo.kh * geo.kw];
        let g = &dy[c * geo.oh * geo.ow..][..geo.oh * geo.ow];
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let go = g[oy * geo.ow + ox];
                for ky in 0..geo.kh {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for kx in 0..geo.kw {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix < 0 || ix >= geo.w as isize {
                            continue;
                        }
                        let idx = iy as usize * geo.w + ix as usize;
                        let kidx = c * geo.kh * geo.kw + ky * geo.kw + kx;
                        dw[kidx] = dw[kidx] + go * plane[idx];
                        if let Some(dx) = dx.as_deref_mut() {
                            let d = &mut dx[c * geo.h * geo.w + idx];
                            *d = *d + go * k[ky * geo.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation on `[C,H,W]` or `[N,C,H,W]` input.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let geo = ConvGeom::new(x, weight, spec)?;
    if let Some(b) = bias {
        if b.shape() != [geo.cout] {
            return Err(dim_err!(
                "conv2d bias {:?} for {} outputs",
                b.shape(),
                geo.cout
            ));
        }
    }
    let in_per = geo.cin * geo.h * geo.w;
    let out_per = geo.cout * geo.oh * geo.ow;
    let mut out = vec![T::zero(); geo.n * out_per];
    let wdata = weight.data();
    out.par_chunks_mut(out_per).enumerate().for_each(|(ni, o)| {
        let xs = &x.data()[ni * in_per..(ni + 1) * in_per];
        if geo.is_depthwise() {
            depthwise_forward(&geo, xs, wdata, o);
        } else {
            let (kr, hw) = (geo.col_rows(), geo.col_cols());
            let mut cols = if geo.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); kr * hw]
            };
            for g in 0..geo.spec.groups {
                let rhs = if geo.is_pointwise() {
                    &xs[g * geo.cin_g * hw..(g + 1) * geo.cin_g * hw]
                } else {
                    geo.im2col(xs, g, &mut cols);
                    &cols[..]
                };
                let wg = &wdata[g * geo.cout_g * kr..(g + 1) * geo.cout_g * kr];
                gemm(
                    MatRef::row_major(wg, geo.cout_g, kr),
                    MatRef::row_major(rhs, kr, hw),
                    &mut o[g * geo.cout_g * hw..(g + 1) * geo.cout_g * hw],
                    false,
                );
            }
        }
        if let Some(b) = bias {
            let hw = geo.oh * geo.ow;
            for (co, chunk) in o.chunks_mut(hw).enumerate() {
                let bc = b.data()[co];
                chunk.iter_mut().for_each(|v| *v = *v + bc);
            }
        }
    });
    Tensor::from_vec(geo.out_shape(x.rank() == 4), out)
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`; `dx` is skipped unless requested.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    spec: Conv2dSpec,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let geo = ConvGeom::new(x, weight, spec)?;
    let in_per = geo.cin * geo.h * geo.w;
    let out_per = geo.cout * geo.oh * geo.ow;
    let hw = geo.oh * geo.ow;
    let kr = geo.col_rows();
    let wdata = weight.data();

    let mut db = vec![T::zero(); geo.cout];
    for sample in dy.data().chunks(out_per) {
        for (co, chunk) in sample.chunks(hw).enumerate() {
            db[co] = db[co] + chunk.iter().copied().sum::<T>();
        }
    }

    let mut dw = vec![T::zero(); weight.numel()];
    let mut dx = if need_dx {
        vec![T::zero(); x.numel()]
    } else {
        Vec::new()
    };

    if geo.is_depthwise() {
        // dW accumulates across samples, so the batch loop stays sequential.
        for ni in 0..geo.n {
            let xs = &x.data()[ni * in_per..(ni + 1) * in_per];
            let gs = &dy.data()[ni * out_per..(ni + 1) * out_per];
            let dxs = if need_dx {
                Some(&mut dx[ni * in_per..(ni + 1) * in_per])
            } else {
                None
            };
            depthwise_backward(&geo, xs, wdata, gs, dxs, &mut dw);
        }
    } else {
        let mut cols = vec![T::zero(); kr * hw];
        let mut dcols = vec![T::zero(); kr * hw];
        for ni in 0..geo.n {
            let xs = &x.data()[ni * in_per..(ni + 1) * in_per];
            let gs = &dy.data()[ni * out_per..(ni + 1) * out_per];
            for g in 0..geo.spec.groups {
                let dy_g = MatRef::row_major(
                    &gs[g * geo.cout_g * hw..(g + 1) * geo.cout_g * hw],
                    geo.cout_g,
                    hw,
                );
                let rhs: &[T] = if geo.is_pointwise() {
                    &xs[g * geo.cin_g * hw..(g + 1) * geo.cin_g * hw]
                } else {
                    geo.im2col(xs, g, &mut cols);
                    &cols
                };
                gemm(
                    dy_g,
                    MatRef::row_major(rhs, kr, hw).t(),
                    &mut dw[g * geo.cout_g * kr..(g + 1) * geo.cout_g * kr],
                    true,
                );
                if need_dx {
                    let wg = MatRef::row_major(
                        &wdata[g * geo.cout_g * kr..(g + 1) * geo.cout_g * kr],
                        geo.cout_g,
                        kr,
                    );
                    let dxs = &mut dx[ni * in_per..(ni + 1) * in_per];
                    if geo.is_pointwise() {
                        gemm(
                            wg.t(),
                            dy_g,
                            &mut dxs[g * geo.cin_g * hw..(g + 1) * geo.cin_g * hw],
                            false,
                        );
                    } else {
                        gemm(wg.t(), dy_g, &mut dcols, false);
                        geo.col2im(&dcols, g, dxs);
                    }
                }
            }
        }
    }

    let dx = if need_dx {
        Some(Tensor::from_vec(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::from_vec(weight.shape().to_vec(), dw)?,
        Tensor::from_vec([geo.cout], db)?,
    ))
}

// ---------------------------------------------------------------- layernorm

/// Normalization over the last axis. Returns `(y, mean, rstd)` per row.
pub fn layernorm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| dim_err!("layernorm on a rank-0 tensor"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err!(
            "layernorm affine shapes {:?}/{:?} for last extent {c}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let rows = x.numel() / c;
    let inv_c = T::one() / T::from_usize(c).expect("extent");
    let mut y = vec![T::zero(); x.numel()];
    let mut mean = vec![T::zero(); rows];
    let mut rstd = vec![T::zero(); rows];
    for (r, (row, out)) in x.data().chunks(c).zip(y.chunks_mut(c)).enumerate() {
        let mu = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in out
            .iter_mut()
            .zip(row)
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *o = (v - mu) * rs * g + b;
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), y)?, mean, rstd))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layernorm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    rstd: &[T],
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.numel();
    let inv_c = T::one() / T::from_usize(c).expect("extent");
    let mut dx = vec![T::zero(); x.numel()];
    let mut dg = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for (r, ((row, g), out)) in x
        .data()
        .chunks(c)
        .zip(dy.data().chunks(c))
        .zip(dx.chunks_mut(c))
        .enumerate()
    {
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..c {
            xhat[j] = (row[j] - mu) * rs;
            dxhat[j] = g[j] * gamma.data()[j];
            sum_d = sum_d + dxhat[j];
            sum_dx = sum_dx + dxhat[j] * xhat[j];
            dg[j] = dg[j] + g[j] * xhat[j];
            db[j] = db[j] + g[j];
        }
        let (md, mdx) = (sum_d * inv_c, sum_dx * inv_c);
        for j in 0..c {
            out[j] = rs * (dxhat[j] - md - xhat[j] * mdx);
        }
    }
    Ok((
        Tensor::from_vec(x.shape().to_vec(), dx)?,
        Tensor::from_vec([c], dg)?,
        Tensor::from_vec([c], db)?,
    ))
}

// ---------------------------------------------------------------- softmax

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut y = x.clone();
    let data = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..n {
                m = m.max(data[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..n {
                let e = (data[base + j * inner] - m).exp();
                data[base + j * inner] = e;
                s = s + e;
            }
            for j in 0..n {
                data[base + j * inner] = data[base + j * inner] / s;
            }
        }
    }
    Ok(y)
}

/// Gradient from the softmax output `y`.
pub fn softmax_backward<T: Element>(
    y: &Tensor<T>,
    dy: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(y.shape(), axis)?;
    let mut dx = vec![T::zero(); y.numel()];
    let (yd, gd) = (y.data(), dy.data());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let dot: T = (0..n)
                .map(|j| yd[base + j * inner] * gd[base + j * inner])
                .sum();
            for j in 0..n {
                let k = base + j * inner;
                dx[k] = yd[k] * (gd[k] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), dx)
}

// ---------------------------------------------------------------- layout

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn check_permutation(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(dim_err!("permutation {perm:?} for rank {rank}"));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(dim_err!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// `out.shape[i] = x.shape[perm[i]]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    check_permutation(perm, x.rank())?;
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(x.numel());
    if rank == 0 {
        return Ok(x.clone());
    }
    // Innermost output axis is copied as a strided run.
    let last = rank - 1;
    let (run, run_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let data = x.data();
    loop {
        let base: usize = idx[..last]
            .iter()
            .zip(&src_strides)
            .map(|(i, s)| i * s)
            .sum();
        if run_stride == 1 {
            out.extend_from_slice(&data[base..base + run]);
        } else {
            out.extend((0..run).map(|j| data[base + j * run_stride]));
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor::from_vec(out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn normalize_axes(axes: &[usize], rank: usize) -> Result<Vec<usize>> {
    let mut a = axes.to_vec();
    a.sort_unstable();
    a.dedup();
    if a.is_empty() || a.iter().any(|&x| x >= rank) {
        return Err(dim_err!("invalid reduction axes {axes:?} for rank {rank}"));
    }
    Ok(a)
}

fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_shape);
    let mut map_strides = vec![0usize; shape.len()];
    let mut k = 0;
    for (i, s) in map_strides.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *s = out_strides[k];
            k += 1;
        }
    }
    (out_shape, map_strides)
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        f(flat, &idx);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

/// Mean over `axes`, which are removed from the shape.
pub fn mean_axes<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let axes = normalize_axes(axes, x.rank())?;
    let (out_shape, map) = reduce_map(x.shape(), &axes);
    let count: usize = axes.iter().map(|&a| x.shape()[a]).product();
    let mut out = vec![T::zero(); x.numel() / count];
    let data = x.data();
    for_each_index(x.shape(), |flat, idx| {
        let o: usize = idx.iter().zip(&map).map(|(i, s)| i * s).sum();
        out[o] = out[o] + data[flat];
    });
    let inv = T::one() / T::from_usize(count).expect("count");
    out.iter_mut().for_each(|v| *v = *v * inv);
    if out_shape.is_empty() {
        return Ok(Tensor::scalar(out[0]));
    }
    Tensor::from_vec(out_shape, out)
}

pub fn mean_axes_backward<T: Element>(
    input_shape: &[usize],
    axes: &[usize],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let axes = normalize_axes(axes, input_shape.len())?;
    let (_, map) = reduce_map(input_shape, &axes);
    let count: usize = axes.iter().map(|&a| input_shape[a]).product();
    let inv = T::one() / T::from_usize(count).expect("count");
    let g = dy.data();
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    for_each_index(input_shape, |flat, idx| {
        let o: usize = idx.iter().zip(&map).map(|(i, s)| i * s).sum();
        dx[flat] = g[o] * inv;
    });
    Tensor::from_vec(input_shape.to_vec(), dx)
}

// ---------------------------------------------------------------- loss

/// Mean soft-target cross entropy over a `[B,K]` batch. Returns `(loss, probabilities)`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    expect_rank(logits, 2, "cross_entropy logits")?;
    same_shape(logits, target, "cross_entropy target")?;
    let probs = softmax(logits, 1)?;
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut total = T::zero();
    for r in 0..b {
        let row = &logits.data()[r * k..(r + 1) * k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let t = &target.data()[r * k..(r + 1) * k];
        total = total + row.iter().zip(t).map(|(&z, &p)| p * (lse - z)).sum::<T>();
    }
    Ok((total / T::from_usize(b).expect("batch"), probs))
}

pub fn cross_entropy_backward<T: Element>(
    probs: &Tensor<T>,
    target: &Tensor<T>,
    dloss: T,
) -> Result<Tensor<T>> {
    let (b, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = dloss / T::from_usize(b).expect("batch");
    let mut dz = vec![T::zero(); b * k];
    for r in 0..b {
        let p = &probs.data()[r * k..(r + 1) * k];
        let t = &target.data()[r * k..(r + 1) * k];
        let mass: T = t.iter().copied().sum();
        for j in 0..k {
            dz[r * k + j] = (p[j] * mass - t[j]) * scale;
        }
    }
    Tensor::from_vec([b, k], dz)
}

/// One-hot rows for class-index targets.
pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if labels.is_empty() {
        return Err(dim_err!("one_hot of an empty label list"));
    }
    let mut t = vec![T::zero(); labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(dim_err!("label {l} out of range for {classes} classes"));
        }
        t[r * classes + l] = T::one();
    }
    Tensor::from_vec([labels.len(), classes], t)
}
