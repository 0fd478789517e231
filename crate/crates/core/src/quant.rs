//! Quantizer parameters and their initialization.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fake_quant::{self, check_bits, round_even, signed_range, unsigned_max, ActQuantSpec};
use crate::graph::{BlockQuant, HeadQuant, ModelGraph};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f32 = 0.9;
/// Candidate count used outside of fixtures.
pub const PRODUCTION_GRID: usize = 200;

/// Symmetric zero-offset weight quantizer, one scale per output channel
/// (or a single scale for tensor-wise quantization).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightQuantParams {
    pub bits: u32,
    pub scales: Vec<f32>,
}

impl WeightQuantParams {
    pub fn new(bits: u32, channels: usize) -> Self {
        Self {
            bits,
            scales: vec![1.0; channels],
        }
    }
}

/// Asymmetric tensor-wise activation quantizer with a moving-average range
/// and learnable scale multiplier `eta` and offset correction `eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActQuantParams {
    pub bits: u32,
    pub x_min: f32,
    pub x_max: f32,
    pub eta: f32,
    pub eps: f32,
    pub momentum: f32,
    pub frozen: bool,
}

impl ActQuantParams {
    pub fn new(bits: u32) -> Self {
        Self {
            bits,
            x_min: 0.0,
            x_max: 0.0,
            eta: 1.0,
            eps: 0.0,
            momentum: DEFAULT_MOMENTUM,
            frozen: false,
        }
    }

    pub fn spec(&self) -> Result<ActQuantSpec> {
        if !self.frozen {
            return Err(Error::Unfrozen);
        }
        let spec = ActQuantSpec {
            bits: self.bits,
            x_min: self.x_min,
            x_max: self.x_max,
            eta: self.eta,
            eps: self.eps,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Serialized form: `[x_min, x_max, eta, eps, momentum, frozen]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![
            self.x_min,
            self.x_max,
            self.eta,
            self.eps,
            self.momentum,
            if self.frozen { 1.0 } else { 0.0 },
        ])
        .expect("six elements")
    }

    pub fn load_tensor(&mut self, t: &Tensor) -> Result<()> {
        let d = t.data();
        if d.len() != 6 {
            return Err(Error::InvalidShape(t.shape().to_vec()));
        }
        self.x_min = d[0];
        self.x_max = d[1];
        self.eta = d[2];
        self.eps = d[3];
        self.momentum = d[4];
        self.frozen = d[5] != 0.0;
        Ok(())
    }

    /// Sets the range from moving-average extremes and freezes it.
    pub fn calibrate(&mut self, batches: &[&Tensor]) -> Result<()> {
        let (lo, hi) = calibrate_batchquant(batches, self.momentum)?;
        if !(lo < hi) {
            return Err(Error::DegenerateRange(lo));
        }
        self.x_min = lo;
        self.x_max = hi;
        self.frozen = true;
        Ok(())
    }
}

/// Exponential moving averages of per-batch minima and maxima, seeded by
/// the first batch: `e <- m * e + (1 - m) * batch_extreme`.
pub fn calibrate_batchquant(batches: &[&Tensor], momentum: f32) -> Result<(f32, f32)> {
    let first = batches.first().ok_or(Error::Empty("activation batches"))?;
    let extremes = |t: &Tensor| {
        t.data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    };
    let (mut lo, mut hi) = extremes(first);
    let m = momentum as f64;
    for b in &batches[1..] {
        let (bl, bh) = extremes(b);
        lo = (m * lo as f64 + (1.0 - m) * bl as f64) as f32;
        hi = (m * hi as f64 + (1.0 - m) * bh as f64) as f32;
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("activation extremes"));
    }
    Ok((lo, hi))
}

/// Scale (and zero point for the asymmetric case) from min/max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeInit {
    pub scale: f64,
    pub zero_point: f64,
}

pub fn init_minmax(values: &[f32], bits: u32, symmetric: bool) -> Result<RangeInit> {
    check_bits(bits)?;
    let (lo, hi) = min_max(values)?;
    if symmetric {
        let m = (lo as f64).abs().max((hi as f64).abs());
        Ok(RangeInit {
            scale: m / signed_range(bits).1,
            zero_point: 0.0,
        })
    } else {
        let s = (hi as f64 - lo as f64) / unsigned_max(bits);
        Ok(RangeInit {
            scale: s,
            zero_point: round_even(-(lo as f64) / s),
        })
    }
}

fn min_max(values: &[f32]) -> Result<(f32, f32)> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::NonFinite("values"));
    }
    if lo == hi {
        return Err(Error::DegenerateRange(lo));
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSearchConfig {
    /// Distortion exponent, 1 or 2.
    pub p: u32,
    /// Candidate clips are `r * max|v|` for `r` in `1/G, 2/G, ..., 1`.
    pub grid: usize,
}

impl ClipSearchConfig {
    pub fn new(p: u32, grid: usize) -> Result<Self> {
        if !(p == 1 || p == 2) {
            return Err(Error::InvalidArgument(format!("distortion exponent must be 1 or 2, got {p}")));
        }
        if grid < 2 {
            return Err(Error::InvalidArgument(format!("candidate count must be at least 2, got {grid}")));
        }
        Ok(Self { p, grid })
    }
}

/// Sum of `|v - Q_c(v)|^p` for the symmetric quantizer of clip `c`, whose
/// scale is `c / (2^(b-1) - 1)`.
pub fn clip_distortion(values: &[f32], bits: u32, p: u32, clip: f64) -> f64 {
    let (lo, hi) = signed_range(bits);
    let s = clip / hi;
    let inv = 1.0 / s;
    let mut total = 0.0;
    for &v in values {
        let v = v as f64;
        let e = (v - round_even(v * inv).clamp(lo, hi) * s).abs();
        total += if p == 1 { e } else { e * e };
    }
    total
}

/// Returns the distortion-minimizing clip; ties go to the smaller clip.
pub fn clip_search_clip(values: &[f32], bits: u32, cfg: &ClipSearchConfig) -> Result<f64> {
    check_bits(bits)?;
    let cfg = ClipSearchConfig::new(cfg.p, cfg.grid)?;
    let (lo, hi) = min_max(values)?;
    let m = (lo as f64).abs().max((hi as f64).abs());
    let mut best = (f64::INFINITY, m);
    for r in 1..=cfg.grid {
        let c = m * r as f64 / cfg.grid as f64;
        let d = clip_distortion(values, bits, cfg.p, c);
        if d < best.0 {
            best = (d, c);
        }
    }
    Ok(best.1)
}

/// Symmetric scale of the distortion-minimizing clip.
pub fn clip_search(values: &[f32], bits: u32, cfg: &ClipSearchConfig) -> Result<f32> {
    Ok((clip_search_clip(values, bits, cfg)? / signed_range(bits).1) as f32)
}

/// Per-channel weight scale initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    MinMax,
    Clip(ClipSearchConfig),
}

/// Computes one scale per leading-axis slice of `w` (or one for all of
/// `w` when `per_channel` is false).
pub fn init_weight_scales(w: &Tensor, bits: u32, per_channel: bool, init: WeightInit) -> Result<Vec<f32>> {
    let slices: Vec<&[f32]> = if per_channel {
        w.data().chunks(w.len() / w.dim(0)).collect()
    } else {
        vec![w.data()]
    };
    slices
        .into_iter()
        .map(|v| {
            let s = match init {
                WeightInit::MinMax => init_minmax(v, bits, true).map(|r| r.scale as f32),
                WeightInit::Clip(cfg) => clip_search(v, bits, &cfg),
            };
            match s {
                // An all-zero channel quantizes exactly with any scale.
                Err(Error::DegenerateRange(0.0)) => Ok(1.0),
                Err(Error::DegenerateRange(x)) => Ok(libm::fabsf(x) / signed_range(bits).1 as f32),
                other => other,
            }
        })
        .collect()
}

/// Bit-width assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scheme {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Bit-width for the first convolution and the head, if overridden.
    pub first_last_bits: Option<u32>,
}

impl Scheme {
    /// Parses `W<b>A<b>`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("scheme {s:?} is not of the form W<bits>A<bits>"));
        let rest = s.strip_prefix(['W', 'w']).ok_or_else(bad)?;
        let split = rest.find(['A', 'a']).ok_or_else(bad)?;
        let wb: u32 = rest[..split].parse().map_err(|_| bad())?;
        let ab: u32 = rest[split + 1..].parse().map_err(|_| bad())?;
        check_bits(wb)?;
        check_bits(ab)?;
        Ok(Self {
            weight_bits: wb,
            act_bits: ab,
            first_last_bits: None,
        })
    }

    pub fn with_first_last(mut self, bits: u32) -> Self {
        self.first_last_bits = Some(bits);
        self
    }
}

impl core::fmt::Display for Scheme {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "W{}A{}", self.weight_bits, self.act_bits)
    }
}

/// Attaches per-channel weight and tensor-wise input quantizers to every
/// fused block, and tensor-wise quantizers to the head. Weight scales are
/// initialized with `init`; activation ranges are left unfrozen.
pub fn attach_quantizers(graph: &mut ModelGraph, scheme: &Scheme, init: WeightInit) -> Result<()> {
    let ids = graph.block_ids();
    for (k, id) in ids.iter().enumerate() {
        let block = graph.block_mut(*id);
        let fused = block.fused.as_ref().ok_or_else(|| Error::NotFused(id.to_string()))?;
        let bits_w = match scheme.first_last_bits {
            Some(b) if k == 0 => b,
            _ => scheme.weight_bits,
        };
        let bits_a = match scheme.first_last_bits {
            Some(b) if k == 0 => b,
            _ => scheme.act_bits,
        };
        let scales = init_weight_scales(&fused.weight, bits_w, true, init)?;
        block.quant = Some(BlockQuant {
            weight: WeightQuantParams { bits: bits_w, scales },
            input: ActQuantParams::new(bits_a),
        });
    }
    let (hw, ha) = match scheme.first_last_bits {
        Some(b) => (b, b),
        None => (scheme.weight_bits, scheme.act_bits),
    };
    let scales = init_weight_scales(&graph.head.weight, hw, false, init)?;
    graph.head.quant = Some(HeadQuant {
        weight: WeightQuantParams { bits: hw, scales },
        input: ActQuantParams::new(ha),
    });
    graph.validate()
}

/// Calibrates every activation range from float-model inputs to each
/// quantizer, processed in batches of `batch`.
pub fn calibrate_activation_ranges(graph: &mut ModelGraph, images: &Tensor, batch: usize) -> Result<()> {
    let n = images.dim(0);
    if n == 0 || batch == 0 {
        return Err(Error::Empty("calibration images"));
    }
    let ids = graph.block_ids();
    let mut per_block: Vec<Vec<Tensor>> = vec![Vec::new(); ids.len() + 1];
    let mut start = 0;
    while start < n {
        let count = batch.min(n - start);
        let mut h = images.slice_batch(start, count)?;
        for (k, id) in ids.iter().enumerate() {
            per_block[k].push(h.clone());
            h = graph.block(*id).forward(&h, crate::graph::Precision::Float)?;
        }
        per_block[ids.len()].push(crate::ops::gap(&h)?);
        start += count;
    }
    for (k, id) in ids.iter().enumerate() {
        let q = graph.block_mut(*id).quant.as_mut().ok_or_else(|| Error::Graph(format!("{id}: no quantizers")))?;
        let refs: Vec<&Tensor> = per_block[k].iter().collect();
        q.input.calibrate(&refs)?;
    }
    let hq = graph.head.quant.as_mut().ok_or_else(|| Error::Graph("head: no quantizers".into()))?;
    let refs: Vec<&Tensor> = per_block[ids.len()].iter().collect();
    hq.input.calibrate(&refs)?;
    Ok(())
}

/// Distinct integer codes of `x` under a frozen activation quantizer.
pub fn act_codes(x: &Tensor, spec: &ActQuantSpec) -> Result<Vec<u32>> {
    spec.validate()?;
    Ok(x.data().iter().map(|&v| spec.code(v) as u32).collect())
}

/// Weight codes shifted to `[0, 2^b - 1]`.
pub fn weight_codes_unsigned(values: &[f32], scale: f32, bits: u32) -> Result<Vec<u32>> {
    check_bits(bits)?;
    let off = -signed_range(bits).0;
    Ok(values
        .iter()
        .map(|&v| (fake_quant::weight_code(v, scale, bits) + off) as u32)
        .collect())
}
