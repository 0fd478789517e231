//! Forward and backward kernels for the fixed operation set.
//!
//! These are plain functions over [`Tensor`]s; [`crate::autodiff::Tape`]
//! records calls to them and replays the matching backward kernels.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output extent of a convolution along one spatial axis (floor semantics).
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dim: "padded spatial extent",
            expected: kernel,
            got: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, wd) = x.nchw()?;
        let (o, i, kh, kw) = w.nchw().map_err(|_| Error::ShapeMismatch {
            op: "conv2d",
            dim: "kernel rank",
            expected: 4,
            got: w.rank(),
        })?;
        if i != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: i,
                got: c,
            });
        }
        if kh != kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "kernel width",
                expected: kh,
                got: kw,
            });
        }
        if kh != 1 && kh != 3 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "kernel size",
                expected: 3,
                got: kh,
            });
        }
        let oh = conv_out_extent(h, kh, stride, pad)?;
        let ow = conv_out_extent(wd, kw, stride, pad)?;
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Unfolds `x` into a `[C*K*K, N*OH*OW]` patch matrix.
    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let p = self.oh * self.ow;
        let cols = self.cols();
        let mut col = vec![0.0f32; self.rows() * cols];
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for ni in 0..self.n {
                        let plane = &x[(ni * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        let base = ni * p;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * self.w..][..self.w];
                            let dst_row = &mut dst[base + oy * self.ow..][..self.ow];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds a patch-matrix gradient back onto the input layout.
    fn col2im(&self, col: &[f32]) -> Vec<f32> {
        let p = self.oh * self.ow;
        let cols = self.cols();
        let mut dx = vec![0.0f32; self.n * self.c * self.h * self.w];
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for ni in 0..self.n {
                        let plane =
                            &mut dx[(ni * self.c + ci) * self.h * self.w..][..self.h * self.w];
                        let base = ni * p;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * self.w..][..self.w];
                            let src_row = &src[base + oy * self.ow..][..self.ow];
                            for (ox, &g) in src_row.iter().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst_row[ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// `out[m, j] += a[m, r] * b[r, j]` for row-major `a: [m, k]`, `b: [k, n]`.
fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for mi in 0..m {
        let out_row = &mut out[mi * n..(mi + 1) * n];
        let a_row = &a[mi * k..(mi + 1) * k];
        for (r, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[r * n..(r + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Four partial sums let the loop vectorize.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[i * 4 + l] * b[i * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// 2-D convolution, `x: [N,C,H,W]`, `w: [O,C,K,K]` with `K` in {1, 3}.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.o {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: g.o,
                got: b.len(),
            });
        }
    }
    let col = g.im2col(x.data());
    let cols = g.cols();
    let mut y = vec![0.0f32; g.o * cols];
    gemm_acc(w.data(), &col, &mut y, g.o, g.rows(), cols);
    let p = g.oh * g.ow;
    let mut out = vec![0.0f32; g.n * g.o * p];
    for oc in 0..g.o {
        let b = bias.map_or(0.0, |b| b[oc]);
        for ni in 0..g.n {
            let src = &y[oc * cols + ni * p..][..p];
            let dst = &mut out[(ni * g.o + oc) * p..][..p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    Tensor::new(&[g.n, g.o, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`]. Each output is computed only if requested.
pub struct Conv2dGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want: [bool; 3],
) -> Result<Conv2dGrads> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    let p = g.oh * g.ow;
    let cols = g.cols();
    // [N,O,P] -> [O, N*P]
    let mut dy = vec![0.0f32; g.o * cols];
    let go = grad_out.data();
    for ni in 0..g.n {
        for oc in 0..g.o {
            dy[oc * cols + ni * p..][..p].copy_from_slice(&go[(ni * g.o + oc) * p..][..p]);
        }
    }
    let rows = g.rows();
    let mut grads = Conv2dGrads {
        x: None,
        w: None,
        bias: None,
    };
    if want[1] {
        let col = g.im2col(x.data());
        let mut dw = vec![0.0f32; g.o * rows];
        for oc in 0..g.o {
            let dy_row = &dy[oc * cols..(oc + 1) * cols];
            for r in 0..rows {
                dw[oc * rows + r] = dot(dy_row, &col[r * cols..(r + 1) * cols]);
            }
        }
        grads.w = Some(Tensor::new(w.shape(), dw)?);
    }
    if want[0] {
        // dcol[r, j] = sum_o w[o, r] * dy[o, j]
        let mut dcol = vec![0.0f32; rows * cols];
        let wd = w.data();
        for oc in 0..g.o {
            let dy_row = &dy[oc * cols..(oc + 1) * cols];
            for r in 0..rows {
                let wv = wd[oc * rows + r];
                if wv == 0.0 {
                    continue;
                }
                let dst = &mut dcol[r * cols..(r + 1) * cols];
                for (d, &v) in dst.iter_mut().zip(dy_row) {
                    *d += wv * v;
                }
            }
        }
        grads.x = Some(Tensor::new(x.shape(), g.col2im(&dcol))?);
    }
    if want[2] {
        let db = (0..g.o)
            .map(|oc| dy[oc * cols..(oc + 1) * cols].iter().sum())
            .collect();
        grads.bias = Some(Tensor::from_vec(db)?);
    }
    Ok(grads)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data).expect("shape preserved")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Channel count and per-channel plane size of an `[N,C,...]` tensor.
fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::ShapeMismatch {
            op: "channel op",
            dim: "rank",
            expected: 2,
            got: x.rank(),
        });
    }
    let n = x.dim(0);
    let c = x.dim(1);
    let plane = x.shape()[2..].iter().product::<usize>();
    Ok((n, c, plane))
}

/// `y[n,c,..] = gain[c] * x[n,c,..] + shift[c]`.
pub fn channel_affine(x: &Tensor, gain: &[f32], shift: &[f32]) -> Result<Tensor> {
    let (n, c, plane) = channel_layout(x)?;
    for (len, dim) in [(gain.len(), "gain length"), (shift.len(), "shift length")] {
        if len != c {
            return Err(Error::ShapeMismatch {
                op: "channel_affine",
                dim,
                expected: c,
                got: len,
            });
        }
    }
    let mut out = x.data().to_vec();
    for ni in 0..n {
        for ci in 0..c {
            let (g, s) = (gain[ci], shift[ci]);
            for v in &mut out[(ni * c + ci) * plane..][..plane] {
                *v = g * *v + s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Returns `(dx, dgain, dshift)`.
pub fn channel_affine_backward(
    x: &Tensor,
    gain: &[f32],
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, plane) = channel_layout(x)?;
    let mut dx = grad_out.data().to_vec();
    let mut dg = vec![0.0f32; c];
    let mut ds = vec![0.0f32; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let xs = &x.data()[off..off + plane];
            let gs = &mut dx[off..off + plane];
            dg[ci] += dot(gs, xs);
            ds[ci] += gs.iter().sum::<f32>();
            for v in gs.iter_mut() {
                *v *= gain[ci];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::from_vec(dg)?,
        Tensor::from_vec(ds)?,
    ))
}

/// Per-channel statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<f32>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

/// Training-mode batch normalization. Returns the output and batch stats.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Result<(Tensor, BatchStats)> {
    let (n, c, plane) = channel_layout(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            dim: "parameter length",
            expected: c,
            got: gamma.len().min(beta.len()),
        });
    }
    let count = n * plane;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ci in 0..c {
        let mut s = 0.0f64;
        for ni in 0..n {
            s += x.data()[(ni * c + ci) * plane..][..plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0f64;
        for ni in 0..n {
            ss += x.data()[(ni * c + ci) * plane..][..plane]
                .iter()
                .map(|&v| (v as f64 - m) * (v as f64 - m))
                .sum::<f64>();
        }
        mean[ci] = m as f32;
        var[ci] = (ss / count as f64) as f32;
    }
    let gain: Vec<f32> = (0..c)
        .map(|ci| gamma[ci] / libm::sqrtf(var[ci] + eps))
        .collect();
    let shift: Vec<f32> = (0..c).map(|ci| beta[ci] - gain[ci] * mean[ci]).collect();
    let y = channel_affine(x, &gain, &shift)?;
    Ok((y, BatchStats { mean, var, count }))
}

/// Returns `(dx, dgamma, dbeta)` for [`batch_norm_train`].
pub fn batch_norm_train_backward(
    x: &Tensor,
    gamma: &[f32],
    stats: &BatchStats,
    eps: f32,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, plane) = channel_layout(x)?;
    let m = stats.count as f32;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ci in 0..c {
        let inv = 1.0 / libm::sqrtf(stats.var[ci] + eps);
        let mu = stats.mean[ci];
        let (mut sum_g, mut sum_gx) = (0.0f32, 0.0f32);
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for j in off..off + plane {
                let xh = (x.data()[j] - mu) * inv;
                let g = grad_out.data()[j];
                sum_g += g;
                sum_gx += g * xh;
            }
        }
        dgamma[ci] = sum_gx;
        dbeta[ci] = sum_g;
        let k = gamma[ci] * inv / m;
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            let (xs, gs) = (&x.data()[off..off + plane], &grad_out.data()[off..off + plane]);
            for ((d, &xv), &g) in dx[off..off + plane].iter_mut().zip(xs).zip(gs) {
                let xh = (xv - mu) * inv;
                *d = k * (m * g - sum_g - xh * sum_gx);
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::from_vec(dgamma)?,
        Tensor::from_vec(dbeta)?,
    ))
}

/// Global average pooling `[N,C,H,W] -> [N,C]`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    let plane = h * w;
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().sum::<f32>() / plane as f32)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn gap_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let plane: usize = input_shape[2..].iter().product();
    let mut dx = Vec::with_capacity(grad_out.len() * plane);
    for &g in grad_out.data() {
        dx.extend(core::iter::repeat_n(g / plane as f32, plane));
    }
    Tensor::new(input_shape, dx)
}

/// `y = x w^T + b` with `x: [N,C]`, `w: [K,C]`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    let (n, c) = rank2(x, "linear input")?;
    let (k, wc) = rank2(w, "linear weight")?;
    if wc != c {
        return Err(Error::ShapeMismatch {
            op: "linear",
            dim: "input features",
            expected: wc,
            got: c,
        });
    }
    if let Some(b) = bias {
        if b.len() != k {
            return Err(Error::ShapeMismatch {
                op: "linear",
                dim: "bias length",
                expected: k,
                got: b.len(),
            });
        }
    }
    let mut out = vec![0.0f32; n * k];
    for ni in 0..n {
        let xr = &x.data()[ni * c..(ni + 1) * c];
        for ki in 0..k {
            out[ni * k + ki] = dot(xr, &w.data()[ki * c..(ki + 1) * c]) + bias.map_or(0.0, |b| b[ki]);
        }
    }
    Tensor::new(&[n, k], out)
}

/// Returns `(dx, dw, dbias)` for [`linear`].
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c) = rank2(x, "linear input")?;
    let (k, _) = rank2(w, "linear weight")?;
    let go = grad_out.data();
    let mut dx = vec![0.0f32; n * c];
    gemm_acc(go, w.data(), &mut dx, n, k, c);
    let mut dw = vec![0.0f32; k * c];
    for ni in 0..n {
        for ki in 0..k {
            let g = go[ni * k + ki];
            for (d, &xv) in dw[ki * c..(ki + 1) * c].iter_mut().zip(&x.data()[ni * c..(ni + 1) * c]) {
                *d += g * xv;
            }
        }
    }
    let mut db = vec![0.0f32; k];
    for ni in 0..n {
        for ki in 0..k {
            db[ki] += go[ni * k + ki];
        }
    }
    Ok((
        Tensor::new(&[n, c], dx)?,
        Tensor::new(&[k, c], dw)?,
        Tensor::from_vec(db)?,
    ))
}

fn rank2(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: what,
            dim: "rank",
            expected: 2,
            got: t.rank(),
        });
    }
    Ok((t.dim(0), t.dim(1)))
}

fn log_softmax_row(row: &[f32]) -> Vec<f32> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = m + libm::logf(row.iter().map(|&v| libm::expf(v - m)).sum::<f32>());
    row.iter().map(|&v| v - lse).collect()
}

/// Mean cross-entropy of `logits: [N,K]` against integer labels.
pub fn softmax_xent(logits: &Tensor, labels: &[u32]) -> Result<f32> {
    let (n, k) = rank2(logits, "softmax_xent")?;
    check_labels(n, k, labels)?;
    let mut total = 0.0f64;
    for (ni, &l) in labels.iter().enumerate() {
        let ls = log_softmax_row(&logits.data()[ni * k..(ni + 1) * k]);
        total -= ls[l as usize] as f64;
    }
    Ok((total / n as f64) as f32)
}

pub fn softmax_xent_backward(logits: &Tensor, labels: &[u32], grad: f32) -> Result<Tensor> {
    let (n, k) = rank2(logits, "softmax_xent")?;
    check_labels(n, k, labels)?;
    let mut out = Vec::with_capacity(n * k);
    for (ni, &l) in labels.iter().enumerate() {
        let ls = log_softmax_row(&logits.data()[ni * k..(ni + 1) * k]);
        for (ki, v) in ls.iter().enumerate() {
            let onehot = if ki == l as usize { 1.0 } else { 0.0 };
            out.push(grad * (libm::expf(*v) - onehot) / n as f32);
        }
    }
    Tensor::new(&[n, k], out)
}

fn check_labels(n: usize, k: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            dim: "label count",
            expected: n,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::InvalidArgument(alloc::format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.same_shape(b, "mae")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| libm::fabs((x - y) as f64))
        .sum();
    Ok((s / a.len() as f64) as f32)
}

/// Mean squared error.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f32> {
    a.same_shape(b, "mse")?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok((s / a.len() as f64) as f32)
}

/// Gradient of [`mae`] w.r.t. `a`, scaled by `grad`: `sign(a - b) / count`.
pub fn mae_backward(a: &Tensor, b: &Tensor, grad: f32) -> Tensor {
    let k = grad / a.len() as f32;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                k
            } else if d < 0.0 {
                -k
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

pub fn mse_backward(a: &Tensor, b: &Tensor, grad: f32) -> Tensor {
    let k = 2.0 * grad / a.len() as f32;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| k * (x - y))
        .collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as the reference.
    pub(crate) fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&[f32]>, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.nchw().unwrap();
        let (o, _, k, _) = w.nchw().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0f32; n * o * oh * ow];
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[oc]);
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((oc * c + ci) * k + ky) * k + kx]
                                        * x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out[((ni * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn all_ones_overlap_counts() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f32 * 0.37 - 2.0).collect()).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]).unwrap();
        let w = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
        match conv2d(&x, &w, None, 1, 1) {
            Err(Error::ShapeMismatch { dim, .. }) => assert_eq!(dim, "input channels"),
            other => panic!("unexpected {other:?}"),
        }
        let w5 = Tensor::zeros(&[1, 2, 5, 5]).unwrap();
        assert!(conv2d(&x, &w5, None, 1, 2).is_err());
    }

    #[test]
    fn stride_two_matches_naive() {
        let x = Tensor::new(&[2, 3, 7, 6], (0..252).map(|v| ((v * 37 % 19) as f32) * 0.1 - 0.9).collect()).unwrap();
        let w = Tensor::new(&[4, 3, 3, 3], (0..108).map(|v| ((v * 11 % 13) as f32) * 0.05 - 0.3).collect()).unwrap();
        let b = [0.1, -0.2, 0.3, 0.0];
        let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        let r = naive_conv(&x, &w, Some(&b), 2, 1);
        assert!(y.max_abs_diff(&r).unwrap() < 1e-5);
    }

    #[test]
    fn affine_arithmetic() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![0.5]).unwrap();
        let y = channel_affine(&x, &[2.0], &[-1.0]).unwrap();
        assert_eq!(y.data(), &[0.0]);
        let id = channel_affine(&x, &[1.0], &[0.0]).unwrap();
        assert_eq!(id, x);
        assert!(channel_affine(&x, &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn loss_values() {
        let a = Tensor::from_vec(vec![0.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
        assert_eq!(mae(&a, &b).unwrap(), 2.0);
        assert_eq!(mse(&a, &b).unwrap(), 8.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let g = mae_backward(&Tensor::scalar(3.0), &Tensor::scalar(1.0), 1.0);
        assert_eq!(g.data(), &[1.0]);
        assert!(mae(&a, &Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn head_ops() {
        let x = Tensor::full(&[2, 3, 4, 4], 1.5).unwrap();
        let g = gap(&x).unwrap();
        assert_eq!(g.shape(), &[2, 3]);
        assert!(g.data().iter().all(|&v| v == 1.5));

        let xi = Tensor::new(&[1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]).unwrap();
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(linear(&xi, &eye, Some(&[0.0; 3])).unwrap(), xi);

        let logits = Tensor::zeros(&[4, 10]).unwrap();
        let l = softmax_xent(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((l - libm::logf(10.0)).abs() < 1e-6);
        assert!(softmax_xent(&logits, &[0, 3, 10, 5]).is_err());
    }
}
