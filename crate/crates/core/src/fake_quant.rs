//! Simulated (fake) quantization with straight-through gradients.
//!
//! Gradients are the exact derivatives of the STE surrogate in which every
//! `round(u)` is replaced by `u + c`, `c` being detached at the evaluation
//! point. Arithmetic is carried out in `f64` so that wide bit-widths (up to
//! 32) stay lossless.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::BitWidth(bits))
    }
}

/// Round half to even.
#[inline]
pub fn round_even(v: f64) -> f64 {
    libm::rint(v)
}

/// Signed integer range `[-2^(b-1), 2^(b-1) - 1]` for weight codes.
pub fn signed_range(bits: u32) -> (f64, f64) {
    let half = (1u64 << (bits - 1)) as f64;
    (-half, half - 1.0)
}

/// Largest unsigned code `2^b - 1` for activation codes.
pub fn unsigned_max(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

/// Maps each element of `w` (leading axis = output channel) to its scale.
fn scale_index(w: &Tensor, scales: &[f32]) -> Result<usize> {
    let per = w.len() / w.dim(0);
    if scales.len() == 1 {
        Ok(w.len())
    } else if scales.len() == w.dim(0) {
        Ok(per)
    } else {
        Err(Error::ShapeMismatch {
            op: "fake_quant_weight",
            dim: "scale count",
            expected: w.dim(0),
            got: scales.len(),
        })
    }
}

fn check_scales(scales: &[f32]) -> Result<()> {
    match scales.iter().find(|&&s| !(s > 0.0) || !s.is_finite()) {
        Some(&s) => Err(Error::NonPositiveScale {
            op: "fake_quant_weight",
            value: s,
        }),
        None => Ok(()),
    }
}

/// Integer weight code `clamp(round(w / s), lo, hi)`.
#[inline]
pub fn weight_code(w: f32, s: f32, bits: u32) -> f64 {
    let (lo, hi) = signed_range(bits);
    round_even(w as f64 / s as f64).clamp(lo, hi)
}

/// Symmetric per-channel (or per-tensor, one scale) weight quantization.
pub fn fake_quant_weight(w: &Tensor, scales: &[f32], bits: u32) -> Result<Tensor> {
    check_bits(bits)?;
    check_scales(scales)?;
    let per = scale_index(w, scales)?;
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = scales[i / per];
            (weight_code(v, s, bits) * s as f64) as f32
        })
        .collect();
    Tensor::new(w.shape(), data)
}

/// Returns `(dw, dscales)`.
pub fn fake_quant_weight_backward(
    w: &Tensor,
    scales: &[f32],
    bits: u32,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let per = scale_index(w, scales)?;
    let (lo, hi) = signed_range(bits);
    let mut dw = vec![0.0f32; w.len()];
    let mut ds = vec![0.0f64; scales.len()];
    for (i, (&v, &g)) in w.data().iter().zip(grad_out.data()).enumerate() {
        let si = i / per;
        let u = v as f64 / scales[si] as f64;
        let r = round_even(u);
        if r < lo || r > hi {
            ds[si] += g as f64 * r.clamp(lo, hi);
        } else {
            dw[i] = g;
            ds[si] += g as f64 * (r - u);
        }
    }
    Ok((
        Tensor::new(w.shape(), dw)?,
        Tensor::from_vec(ds.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// Frozen range plus learnable multiplier/offset of an activation quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuantSpec {
    pub bits: u32,
    pub x_min: f32,
    pub x_max: f32,
    /// Learnable scale multiplier.
    pub eta: f32,
    /// Learnable zero-point correction.
    pub eps: f32,
}

impl ActQuantSpec {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.x_min < self.x_max) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::Unfrozen);
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::NonPositiveScale {
                op: "fake_quant_act",
                value: self.eta,
            });
        }
        Ok(())
    }

    /// `(x_max - x_min) / (2^b - 1)`, the scale before the multiplier.
    pub fn base_scale(&self) -> f64 {
        (self.x_max as f64 - self.x_min as f64) / unsigned_max(self.bits)
    }

    pub fn scale(&self) -> f64 {
        self.base_scale() * self.eta as f64
    }

    /// Zero point `round(-x_min / s - eps)`.
    pub fn zero_point(&self) -> f64 {
        round_even(-(self.x_min as f64) / self.scale() - self.eps as f64)
    }

    /// Unsigned code in `[0, 2^b - 1]` for a value.
    #[inline]
    pub fn code(&self, x: f32) -> f64 {
        let s = self.scale();
        (round_even(x as f64 / s) + self.zero_point()).clamp(0.0, unsigned_max(self.bits))
    }
}

/// Asymmetric per-tensor activation quantization.
pub fn fake_quant_act(x: &Tensor, spec: &ActQuantSpec) -> Result<Tensor> {
    spec.validate()?;
    let s = spec.scale();
    let beta = spec.zero_point();
    let qmax = unsigned_max(spec.bits);
    let data = x
        .data()
        .iter()
        .map(|&v| (((round_even(v as f64 / s) + beta).clamp(0.0, qmax) - beta) * s) as f32)
        .collect();
    Tensor::new(x.shape(), data)
}

/// Gradients of [`fake_quant_act`] w.r.t. input, multiplier and offset.
pub struct ActQuantGrads {
    pub x: Tensor,
    pub eta: f32,
    pub eps: f32,
}

pub fn fake_quant_act_backward(
    x: &Tensor,
    spec: &ActQuantSpec,
    grad_out: &Tensor,
) -> Result<ActQuantGrads> {
    spec.validate()?;
    let s = spec.scale();
    let beta = spec.zero_point();
    let qmax = unsigned_max(spec.bits);
    let min_over_s = spec.x_min as f64 / s;
    let mut dx: Vec<f32> = vec![0.0; x.len()];
    let (mut ds, mut deps) = (0.0f64, 0.0f64);
    for (i, (&v, &g)) in x.data().iter().zip(grad_out.data()).enumerate() {
        let u = v as f64 / s;
        let r = round_even(u);
        let q = r + beta;
        let g = g as f64;
        if q < 0.0 || q > qmax {
            let bound = q.clamp(0.0, qmax);
            // x_hat = (B - beta) s with beta = -x_min/s - eps + const
            ds += g * (bound - beta - min_over_s);
            deps += g * s;
        } else {
            dx[i] = g as f32;
            ds += g * (r - u);
        }
    }
    Ok(ActQuantGrads {
        x: Tensor::new(x.shape(), dx)?,
        eta: (ds * spec.base_scale()) as f32,
        eps: deps as f32,
    })
}
