//! Finite-difference checks of tape gradients against an independent
//! `f64` reference.
//!
//! Quantizers are checked through their straight-through surrogate: every
//! rounding offset `round(u) - u` and every clamp decision is frozen at
//! the evaluation point, which leaves a smooth function whose exact
//! derivative the tape must reproduce.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use repapq_core::fake_quant::ActQuantSpec;
use repapq_core::{Gradients, Tape, Tensor, Var};

pub const REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct T64 {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl T64 {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }
}

pub fn random_tensor(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn conv2d(x: &T64, w: &T64, bias: Option<&[f64]>, stride: usize, pad: usize) -> T64 {
    let (n, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, ci, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    assert_eq!(c, ci);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data[((oc * c + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    T64::new(&[n, o, oh, ow], out)
}

pub fn relu(x: &T64) -> T64 {
    T64::new(&x.shape, x.data.iter().map(|&v| v.max(0.0)).collect())
}

pub fn add(a: &T64, b: &T64) -> T64 {
    T64::new(&a.shape, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

fn plane(x: &T64) -> usize {
    x.shape[2..].iter().product()
}

pub fn channel_affine(x: &T64, gain: &[f64], shift: &[f64]) -> T64 {
    let (c, hw) = (x.shape[1], plane(x));
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            v * gain[ch] + shift[ch]
        })
        .collect();
    T64::new(&x.shape, data)
}

pub fn batch_norm(x: &T64, gamma: &[f64], beta: &[f64], eps: f64) -> T64 {
    let (n, c, hw) = (x.shape[0], x.shape[1], plane(x));
    let m = (n * hw) as f64;
    let mut out = x.data.clone();
    for ch in 0..c {
        let idx = |b: usize, k: usize| (b * c + ch) * hw + k;
        let mean = (0..n).flat_map(|b| (0..hw).map(move |k| (b, k))).map(|(b, k)| x.data[idx(b, k)]).sum::<f64>() / m;
        let var = (0..n)
            .flat_map(|b| (0..hw).map(move |k| (b, k)))
            .map(|(b, k)| (x.data[idx(b, k)] - mean).powi(2))
            .sum::<f64>()
            / m;
        let inv = 1.0 / (var + eps).sqrt();
        for b in 0..n {
            for k in 0..hw {
                out[idx(b, k)] = (x.data[idx(b, k)] - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    T64::new(&x.shape, out)
}

pub fn gap(x: &T64) -> T64 {
    let (n, c, hw) = (x.shape[0], x.shape[1], plane(x));
    let data = x.data.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    T64::new(&[n, c], data)
}

pub fn linear(x: &T64, w: &T64, bias: Option<&[f64]>) -> T64 {
    let (n, c, k) = (x.shape[0], x.shape[1], w.shape[0]);
    let mut out = Vec::with_capacity(n * k);
    for b in 0..n {
        for j in 0..k {
            let dot: f64 = (0..c).map(|f| x.data[b * c + f] * w.data[j * c + f]).sum();
            out.push(dot + bias.map_or(0.0, |bs| bs[j]));
        }
    }
    T64::new(&[n, k], out)
}

pub fn mae(a: &T64, b: &T64) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64
}

pub fn mse(a: &T64, b: &T64) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64
}

pub fn softmax_xent(logits: &T64, labels: &[u32]) -> f64 {
    let k = logits.shape[1];
    let mut total = 0.0;
    for (row, &l) in logits.data.chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l as usize];
    }
    total / labels.len() as f64
}

fn round_even(v: f64) -> f64 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - v.signum()
    } else {
        r
    }
}

/// Weight quantizer surrogate frozen at `(w0, s0)`.
pub struct WeightSurrogate {
    per: usize,
    /// `Some(round(u) - u)` inside the range, `None` when clamped.
    offset: Vec<Option<f64>>,
    bound: Vec<f64>,
}

impl WeightSurrogate {
    pub fn new(w0: &Tensor, s0: &[f32], bits: u32) -> Self {
        let per = if s0.len() == 1 { w0.len() } else { w0.len() / w0.dim(0) };
        let half = (1u64 << (bits - 1)) as f64;
        let (lo, hi) = (-half, half - 1.0);
        let mut offset = Vec::new();
        let mut bound = Vec::new();
        for (i, &v) in w0.data().iter().enumerate() {
            let u = v as f64 / s0[i / per] as f64;
            let r = round_even(u);
            if r < lo || r > hi {
                offset.push(None);
                bound.push(r.clamp(lo, hi));
            } else {
                offset.push(Some(r - u));
                bound.push(0.0);
            }
        }
        Self { per, offset, bound }
    }

    pub fn apply(&self, w: &[f64], s: &[f64]) -> Vec<f64> {
        w.iter()
            .enumerate()
            .map(|(i, &v)| {
                let si = s[i / self.per];
                match self.offset[i] {
                    Some(c) => (v / si + c) * si,
                    None => self.bound[i] * si,
                }
            })
            .collect()
    }
}

/// Activation quantizer surrogate frozen at `(x0, spec0)`.
pub struct ActSurrogate {
    bits: u32,
    x_min: f64,
    x_max: f64,
    offset: Vec<Option<f64>>,
    bound: Vec<f64>,
    beta_offset: f64,
}

impl ActSurrogate {
    pub fn new(x0: &[f32], spec: &ActQuantSpec) -> Self {
        let qmax = ((1u64 << spec.bits) - 1) as f64;
        let base = (spec.x_max as f64 - spec.x_min as f64) / qmax;
        let s = base * spec.eta as f64;
        let beta_raw = -(spec.x_min as f64) / s - spec.eps as f64;
        let beta = round_even(beta_raw);
        let mut offset = Vec::new();
        let mut bound = Vec::new();
        for &v in x0 {
            let u = v as f64 / s;
            let r = round_even(u);
            let q = r + beta;
            if q < 0.0 || q > qmax {
                offset.push(None);
                bound.push(q.clamp(0.0, qmax));
            } else {
                offset.push(Some(r - u));
                bound.push(0.0);
            }
        }
        Self {
            bits: spec.bits,
            x_min: spec.x_min as f64,
            x_max: spec.x_max as f64,
            offset,
            bound,
            beta_offset: beta - beta_raw,
        }
    }

    pub fn apply(&self, x: &[f64], eta: f64, eps: f64) -> Vec<f64> {
        let qmax = ((1u64 << self.bits) - 1) as f64;
        let s = (self.x_max - self.x_min) / qmax * eta;
        let beta = -self.x_min / s - eps + self.beta_offset;
        x.iter()
            .enumerate()
            .map(|(i, &v)| match self.offset[i] {
                Some(c) => (v / s + c) * s,
                None => (self.bound[i] - beta) * s,
            })
            .collect()
    }
}

/// Largest relative error between the tape gradient of one parameter
/// and central differences of `f`, over random and coordinate directions.
pub fn check_param(base: &Tensor, grad: &Tensor, f: &dyn Fn(&[f64]) -> f64, rng: &mut ChaCha8Rng) -> f64 {
    assert_eq!(base.shape(), grad.shape());
    let theta: Vec<f64> = base.data().iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = grad.data().iter().map(|&v| v as f64).collect();
    let n = theta.len();
    let mut dirs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for _ in 0..n.min(4) {
        let mut d = vec![0.0; n];
        d[rng.random_range(0..n)] = 1.0;
        dirs.push(d);
    }
    let mut worst: f64 = 0.0;
    for d in dirs {
        let scale = theta.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let h = 1e-6 * scale;
        let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(&d).map(|(t, di)| t + sign * h * di).collect() };
        let fd = (f(&shifted(1.0)) - f(&shifted(-1.0))) / (2.0 * h);
        let an: f64 = g.iter().zip(&d).map(|(a, b)| a * b).sum();
        let mass: f64 = g.iter().zip(&d).map(|(a, b)| (a * b).abs()).sum();
        let denom = an.abs().max(fd.abs()).max(1e-4 * mass).max(1e-9);
        worst = worst.max((an - fd).abs() / denom);
    }
    worst
}

pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
}

fn grad_of(g: &Gradients, v: Var) -> Tensor {
    g.get(v).cloned().expect("parameter gradient")
}

fn f64s(t: &[f64]) -> Vec<f64> {
    t.to_vec()
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Per-op checks: each op feeds an MSE readout against a random target so
/// the upstream gradient is dense and non-uniform.
pub fn op_checks(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push(OpCheck { name: name.to_string(), max_rel_err: e });

    // conv2d, stride 1 and 2, with bias
    for (stride, pad, k) in [(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)] {
        let x = random_tensor(&[2, 3, 6, 6], 1.0, &mut rng);
        let w = random_tensor(&[4, 3, k, k], 0.5, &mut rng);
        let b = random_tensor(&[4], 0.5, &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let target = random_tensor(tape.value(y).shape(), 1.0, &mut rng);
        let tv = tape.constant(target.clone());
        let loss = tape.mse(y, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let t64 = T64::from_tensor(&target);
        let (x64, w64, b64) = (T64::from_tensor(&x), T64::from_tensor(&w), vec64(&b));
        let name = format!("conv2d k{k} s{stride} p{pad}");
        let fx = |p: &[f64]| mse(&conv2d(&T64::new(x.shape(), f64s(p)), &w64, Some(&b64), stride, pad), &t64);
        let fw = |p: &[f64]| mse(&conv2d(&x64, &T64::new(w.shape(), f64s(p)), Some(&b64), stride, pad), &t64);
        let fb = |p: &[f64]| mse(&conv2d(&x64, &w64, Some(p), stride, pad), &t64);
        let e = check_param(&x, &grad_of(&g, xv), &fx, &mut rng)
            .max(check_param(&w, &grad_of(&g, wv), &fw, &mut rng))
            .max(check_param(&b, &grad_of(&g, bv), &fb, &mut rng));
        push(&name, e);
    }

    // relu, add, scale
    {
        let a = random_tensor(&[2, 3, 4, 4], 1.0, &mut rng);
        let b = random_tensor(&[2, 3, 4, 4], 1.0, &mut rng);
        let target = random_tensor(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (av, bv) = (tape.param(a.clone()), tape.param(b.clone()));
        let s = tape.add(av, bv).unwrap();
        let s = tape.scale(s, -1.7);
        let y = tape.relu(s);
        let tv = tape.constant(target.clone());
        let loss = tape.mse(y, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let t64 = T64::from_tensor(&target);
        let b64 = T64::from_tensor(&b);
        let f = |p: &[f64]| {
            let s = add(&T64::new(a.shape(), f64s(p)), &b64);
            mse(&relu(&T64::new(&s.shape, s.data.iter().map(|v| v * -1.7).collect())), &t64)
        };
        push("relu+add+scale", check_param(&a, &grad_of(&g, av), &f, &mut rng));
    }

    // channel_affine
    {
        let x = random_tensor(&[2, 3, 4, 4], 1.0, &mut rng);
        let gain = random_tensor(&[3], 1.0, &mut rng);
        let shift = random_tensor(&[3], 1.0, &mut rng);
        let target = random_tensor(&[2, 3, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, gv, sv) = (tape.param(x.clone()), tape.param(gain.clone()), tape.param(shift.clone()));
        let y = tape.channel_affine(xv, gv, sv).unwrap();
        let tv = tape.constant(target.clone());
        let loss = tape.mse(y, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let t64 = T64::from_tensor(&target);
        let (x64, g64, s64) = (T64::from_tensor(&x), vec64(&gain), vec64(&shift));
        let fx = |p: &[f64]| mse(&channel_affine(&T64::new(x.shape(), f64s(p)), &g64, &s64), &t64);
        let fg = |p: &[f64]| mse(&channel_affine(&x64, p, &s64), &t64);
        let fs = |p: &[f64]| mse(&channel_affine(&x64, &g64, p), &t64);
        let e = check_param(&x, &grad_of(&g, xv), &fx, &mut rng)
            .max(check_param(&gain, &grad_of(&g, gv), &fg, &mut rng))
            .max(check_param(&shift, &grad_of(&g, sv), &fs, &mut rng));
        push("channel_affine", e);
    }

    // batch_norm (training statistics)
    {
        let x = random_tensor(&[3, 2, 3, 3], 1.5, &mut rng);
        let gamma = random_tensor(&[2], 1.0, &mut rng);
        let beta = random_tensor(&[2], 1.0, &mut rng);
        let target = random_tensor(&[3, 2, 3, 3], 1.0, &mut rng);
        let eps = 1e-5;
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.param(x.clone()), tape.param(gamma.clone()), tape.param(beta.clone()));
        let (y, _) = tape.batch_norm(xv, gv, bv, eps).unwrap();
        let tv = tape.constant(target.clone());
        let loss = tape.mse(y, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let t64 = T64::from_tensor(&target);
        let (x64, g64, b64) = (T64::from_tensor(&x), vec64(&gamma), vec64(&beta));
        let e64 = eps as f64;
        let fx = |p: &[f64]| mse(&batch_norm(&T64::new(x.shape(), f64s(p)), &g64, &b64, e64), &t64);
        let fg = |p: &[f64]| mse(&batch_norm(&x64, p, &b64, e64), &t64);
        let fb = |p: &[f64]| mse(&batch_norm(&x64, &g64, p, e64), &t64);
        let e = check_param(&x, &grad_of(&g, xv), &fx, &mut rng)
            .max(check_param(&gamma, &grad_of(&g, gv), &fg, &mut rng))
            .max(check_param(&beta, &grad_of(&g, bv), &fb, &mut rng));
        push("batch_norm", e);
    }

    // gap + linear + softmax cross-entropy
    {
        let x = random_tensor(&[3, 4, 2, 2], 1.0, &mut rng);
        let w = random_tensor(&[5, 4], 0.7, &mut rng);
        let b = random_tensor(&[5], 0.3, &mut rng);
        let labels = [1u32, 4, 0];
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
        let p = tape.gap(xv).unwrap();
        let y = tape.linear(p, wv, Some(bv)).unwrap();
        let loss = tape.softmax_xent(y, &labels).unwrap();
        let g = tape.backward(loss).unwrap();
        let (x64, w64, b64) = (T64::from_tensor(&x), T64::from_tensor(&w), vec64(&b));
        let fx = |p: &[f64]| softmax_xent(&linear(&gap(&T64::new(x.shape(), f64s(p))), &w64, Some(&b64)), &labels);
        let fw = |p: &[f64]| softmax_xent(&linear(&gap(&x64), &T64::new(w.shape(), f64s(p)), Some(&b64)), &labels);
        let fb = |p: &[f64]| softmax_xent(&linear(&gap(&x64), &w64, Some(p)), &labels);
        let e = check_param(&x, &grad_of(&g, xv), &fx, &mut rng)
            .max(check_param(&w, &grad_of(&g, wv), &fw, &mut rng))
            .max(check_param(&b, &grad_of(&g, bv), &fb, &mut rng));
        push("gap+linear+softmax_xent", e);
    }

    // mae and sum
    {
        let a = random_tensor(&[2, 7], 1.0, &mut rng);
        let target = random_tensor(&[2, 7], 1.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.param(a.clone());
        let tv = tape.constant(target.clone());
        let l1 = tape.mae(av, tv).unwrap();
        let s = tape.sum(av);
        let s = tape.scale(s, 0.1);
        let loss = tape.add(l1, s).unwrap();
        let g = tape.backward(loss).unwrap();
        let t64 = T64::from_tensor(&target);
        let f = |p: &[f64]| mae(&T64::new(a.shape(), f64s(p)), &t64) + 0.1 * p.iter().sum::<f64>();
        push("mae+sum", check_param(&a, &grad_of(&g, av), &f, &mut rng));
    }

    // fake_quant_weight, per-channel, with some clamped entries
    for bits in [4u32, 8] {
        let w = random_tensor(&[3, 2, 3, 3], 1.0, &mut rng);
        let scales: Vec<f32> = (0..3)
            .map(|c| {
                let m = w.data()[c * 18..(c + 1) * 18].iter().fold(0.0f32, |a, v| a.max(v.abs()));
                0.8 * m / ((1 << (bits - 1)) - 1) as f32
            })
            .collect();
        let s = Tensor::from_vec(scales.clone()).unwrap();
        let target = random_tensor(&[3, 2, 3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let (wv, sv) = (tape.param(w.clone()), tape.param(s.clone()));
        let y = tape.fake_quant_weight(wv, sv, bits).unwrap();
        let tv = tape.constant(target.clone());
        let loss = tape.mse(y, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let sur = WeightSurrogate::new(&w, &scales, bits);
        let t64 = T64::from_tensor(&target);
        let (w64, s64) = (vec64(&w), vec64(&s));
        let fw = |p: &[f64]| mse(&T64::new(w.shape(), sur.apply(p, &s64)), &t64);
        let fs = |p: &[f64]| mse(&T64::new(w.shape(), sur.apply(&w64, p)), &t64);
        let e = check_param(&w, &grad_of(&g, wv), &fw, &mut rng).max(check_param(&s, &grad_of(&g, sv), &fs, &mut rng));
        push(&format!("fake_quant_weight w{bits}"), e);
    }

    // fake_quant_act with clamping on both sides
    for bits in [4u32, 8] {
        let x = random_tensor(&[2, 2, 4, 4], 1.0, &mut rng);
        let spec = ActQuantSpec {
            bits,
            x_min: -0.9,
            x_max: 1.1,
            eta: 1.07,
            eps: 0.23,
        };
        let target = random_tensor(&[2, 2, 4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let eta = Tensor::scalar(spec.eta);
        let eps = Tensor::scalar(spec.eps);
        let (ev, pv) = (tape.param(eta.clone()), tape.param(eps.clone()));
        let y = tape.fake_quant_act(xv, ev, pv, bits, spec.x_min, spec.x_max).unwrap();
        let tv = tape.constant(target.clone());
        let loss = tape.mse(y, tv).unwrap();
        let g = tape.backward(loss).unwrap();
        let sur = ActSurrogate::new(x.data(), &spec);
        let t64 = T64::from_tensor(&target);
        let x64 = vec64(&x);
        let (e0, p0) = (spec.eta as f64, spec.eps as f64);
        let fx = |p: &[f64]| mse(&T64::new(x.shape(), sur.apply(p, e0, p0)), &t64);
        let fe = |p: &[f64]| mse(&T64::new(x.shape(), sur.apply(&x64, p[0], p0)), &t64);
        let fp = |p: &[f64]| mse(&T64::new(x.shape(), sur.apply(&x64, e0, p[0])), &t64);
        let e = check_param(&x, &grad_of(&g, xv), &fx, &mut rng)
            .max(check_param(&eta, &grad_of(&g, ev), &fe, &mut rng))
            .max(check_param(&eps, &grad_of(&g, pv), &fp, &mut rng));
        push(&format!("fake_quant_act a{bits}"), e);
    }
    out
}

type Readout<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;

/// Frozen successor block: quantized input, fixed quantized weights.
struct Frozen {
    spec: ActQuantSpec,
    weight: Tensor,
    bias: Tensor,
}

/// Gradient of a block objective with a stage term through two frozen
/// quantized successors: `mae(block_k, T_k) + mae(block_{k+2}, T_stage)`.
/// Returns the worst relative error over the block's seven parameter
/// groups.
pub fn abc_stage_check(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, hw, bits) = (2usize, 3usize, 5usize, 6u32);
    let x = random_tensor(&[n, c, hw, hw], 1.0, &mut rng);
    let v = random_tensor(&[c, c, 3, 3], 0.3, &mut rng);
    let bias = random_tensor(&[c], 0.1, &mut rng);
    let sw = Tensor::from_vec(vec![0.02, 0.025, 0.03]).unwrap();
    let eta = Tensor::scalar(1.05);
    let eps = Tensor::scalar(0.1);
    let gain = Tensor::from_vec(vec![1.1, 0.9, 1.3]).unwrap();
    let shift = Tensor::from_vec(vec![0.05, -0.1, 0.02]).unwrap();
    let (x_min, x_max) = (-2.0f32, 2.0f32);
    let frozen: Vec<Frozen> = (0..2)
        .map(|_| {
            let w = random_tensor(&[c, c, 3, 3], 0.3, &mut rng);
            let s = vec![0.02f32; c];
            Frozen {
                spec: ActQuantSpec { bits, x_min: 0.0, x_max: 2.5, eta: 0.95, eps: 0.0 },
                weight: repapq_core::fake_quant::fake_quant_weight(&w, &s, bits).unwrap(),
                bias: random_tensor(&[c], 0.1, &mut rng),
            }
        })
        .collect();
    let t_block = relu(&T64::from_tensor(&random_tensor(&[n, c, hw, hw], 1.0, &mut rng)));
    let t_stage = relu(&T64::from_tensor(&random_tensor(&[n, c, hw, hw], 1.0, &mut rng)));

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vv = tape.param(v.clone());
    let bv = tape.param(bias.clone());
    let sv = tape.param(sw.clone());
    let ev = tape.param(eta.clone());
    let pv = tape.param(eps.clone());
    let gv = tape.param(gain.clone());
    let hv = tape.param(shift.clone());
    let xq = tape.fake_quant_act(xv, ev, pv, bits, x_min, x_max).unwrap();
    let wq = tape.fake_quant_weight(vv, sv, bits).unwrap();
    let y = tape.conv2d(xq, wq, Some(bv), 1, 1).unwrap();
    let y = tape.channel_affine(y, gv, hv).unwrap();
    let yk = tape.relu(y);
    let tk = tape.constant(Tensor::new(&t_block.shape, t_block.data.iter().map(|&v| v as f32).collect()).unwrap());
    let lb = tape.mae(yk, tk).unwrap();
    let mut h = yk;
    let mut succ_inputs = Vec::new();
    for f in &frozen {
        succ_inputs.push(tape.value(h).clone());
        let one = tape.constant(Tensor::scalar(f.spec.eta));
        let zero = tape.constant(Tensor::scalar(f.spec.eps));
        let hq = tape.fake_quant_act(h, one, zero, bits, f.spec.x_min, f.spec.x_max).unwrap();
        let w = tape.constant(f.weight.clone());
        let b = tape.constant(f.bias.clone());
        let o = tape.conv2d(hq, w, Some(b), 1, 1).unwrap();
        h = tape.relu(o);
    }
    let ts = tape.constant(Tensor::new(&t_stage.shape, t_stage.data.iter().map(|&v| v as f32).collect()).unwrap());
    let ls = tape.mae(h, ts).unwrap();
    let loss = tape.add(lb, ls).unwrap();
    let g = tape.backward(loss).unwrap();

    let spec_k = ActQuantSpec { bits, x_min, x_max, eta: eta.item(), eps: eps.item() };
    let in_sur = ActSurrogate::new(x.data(), &spec_k);
    let w_sur = WeightSurrogate::new(&v, sw.data(), bits);
    let succ_sur: Vec<ActSurrogate> = frozen
        .iter()
        .zip(&succ_inputs)
        .map(|(f, xi)| ActSurrogate::new(xi.data(), &f.spec))
        .collect();
    let x64 = vec64(&x);
    let shape = x.shape().to_vec();
    let objective = |v: &[f64], b: &[f64], s: &[f64], eta: f64, eps: f64, gain: &[f64], shift: &[f64]| -> f64 {
        let xq = T64::new(&shape, in_sur.apply(&x64, eta, eps));
        let wq = T64::new(&[c, c, 3, 3], w_sur.apply(v, s));
        let yk = relu(&channel_affine(&conv2d(&xq, &wq, Some(b), 1, 1), gain, shift));
        let mut h = yk.clone();
        for (f, sur) in frozen.iter().zip(&succ_sur) {
            let hq = T64::new(&h.shape, sur.apply(&h.data, f.spec.eta as f64, f.spec.eps as f64));
            h = relu(&conv2d(&hq, &T64::from_tensor(&f.weight), Some(&vec64(&f.bias)), 1, 1));
        }
        mae(&yk, &t_block) + mae(&h, &t_stage)
    };
    let (v0, b0, s0, g0, h0) = (vec64(&v), vec64(&bias), vec64(&sw), vec64(&gain), vec64(&shift));
    let (e0, p0) = (eta.item() as f64, eps.item() as f64);
    let checks: Vec<(&str, &Tensor, Var, Readout<'_>)> = vec![
        ("weight", &v, vv, Box::new(|p: &[f64]| objective(p, &b0, &s0, e0, p0, &g0, &h0))),
        ("bias", &bias, bv, Box::new(|p: &[f64]| objective(&v0, p, &s0, e0, p0, &g0, &h0))),
        ("weight scale", &sw, sv, Box::new(|p: &[f64]| objective(&v0, &b0, p, e0, p0, &g0, &h0))),
        ("act multiplier", &eta, ev, Box::new(|p: &[f64]| objective(&v0, &b0, &s0, p[0], p0, &g0, &h0))),
        ("act offset", &eps, pv, Box::new(|p: &[f64]| objective(&v0, &b0, &s0, e0, p[0], &g0, &h0))),
        ("affine gain", &gain, gv, Box::new(|p: &[f64]| objective(&v0, &b0, &s0, e0, p0, p, &h0))),
        ("affine shift", &shift, hv, Box::new(|p: &[f64]| objective(&v0, &b0, &s0, e0, p0, &g0, p))),
    ];
    checks
        .into_iter()
        .map(|(name, base, var, f)| OpCheck {
            name: format!("abc stage: {name}"),
            max_rel_err: check_param(base, &grad_of(&g, var), &*f, &mut rng),
        })
        .collect()
}
