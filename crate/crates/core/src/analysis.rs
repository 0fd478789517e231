//! Activation diagnostics and Monte-Carlo checks of the variance-ratio and
//! optimal-clip claims for Gaussian mixtures.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::calib::argmax_rows;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, Precision};
use crate::quant::{clip_distortion, ClipSearchConfig};
use crate::tensor::Tensor;

/// Values at or above this multiple of the layer's mean magnitude are
/// counted as outliers.
pub const OUTLIER_FACTOR: f32 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Quantiles {
    pub q75: f32,
    pub q90: f32,
    pub q95: f32,
    pub q99: f32,
    pub max: f32,
}

/// Nearest-rank quantiles of the nonzero entries of `values`.
pub fn quantile_table(values: &[f32]) -> Option<Quantiles> {
    let mut v: Vec<f32> = values.iter().copied().filter(|&x| x != 0.0).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_unstable_by(f32::total_cmp);
    let q = |p: f64| {
        let rank = libm::ceil(p * v.len() as f64) as usize;
        v[rank.clamp(1, v.len()) - 1]
    };
    Some(Quantiles {
        q75: q(0.75),
        q90: q(0.90),
        q95: q(0.95),
        q99: q(0.99),
        max: v[v.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerOutliers {
    pub layer: String,
    pub sample_max: Vec<f32>,
    pub sample_min: Vec<f32>,
    /// Per-channel maxima and minima for the first few samples.
    pub channel_max: Vec<Vec<f32>>,
    pub channel_min: Vec<Vec<f32>>,
    pub mean_abs: f32,
    pub threshold: f32,
    pub outliers: usize,
    pub elements: usize,
    pub quantiles: Option<Quantiles>,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OutlierReport {
    pub layers: Vec<LayerOutliers>,
}

/// Statistics of a batch of activations `[N, C, ...]`.
pub fn layer_outliers(layer: &str, act: &Tensor, detail_samples: usize) -> Result<LayerOutliers> {
    if act.rank() < 2 {
        return Err(Error::InvalidShape(act.shape().to_vec()));
    }
    let (n, c) = (act.dim(0), act.dim(1));
    let per_sample = act.len() / n;
    let plane = per_sample / c;
    let mut sample_max = Vec::with_capacity(n);
    let mut sample_min = Vec::with_capacity(n);
    let mut channel_max = Vec::new();
    let mut channel_min = Vec::new();
    for (i, s) in act.data().chunks(per_sample).enumerate() {
        sample_max.push(s.iter().copied().fold(f32::NEG_INFINITY, f32::max));
        sample_min.push(s.iter().copied().fold(f32::INFINITY, f32::min));
        if i < detail_samples {
            channel_max.push(s.chunks(plane).map(|p| p.iter().copied().fold(f32::NEG_INFINITY, f32::max)).collect());
            channel_min.push(s.chunks(plane).map(|p| p.iter().copied().fold(f32::INFINITY, f32::min)).collect());
        }
    }
    let mean_abs = (act.data().iter().map(|v| libm::fabs(*v as f64)).sum::<f64>() / act.len() as f64) as f32;
    let threshold = OUTLIER_FACTOR * mean_abs;
    let outliers = act.data().iter().filter(|v| libm::fabsf(**v) >= threshold && threshold > 0.0).count();
    Ok(LayerOutliers {
        layer: layer.to_string(),
        sample_max,
        sample_min,
        channel_max,
        channel_min,
        mean_abs,
        threshold,
        outliers,
        elements: act.len(),
        quantiles: quantile_table(act.data()),
    })
}

/// Outlier statistics of the float block outputs listed in `layers`
/// (flat block indices).
pub fn outlier_stats(graph: &ModelGraph, images: &Tensor, layers: &[usize], detail_samples: usize) -> Result<OutlierReport> {
    let blocks = graph.num_blocks();
    if let Some(&bad) = layers.iter().find(|&&l| l >= blocks) {
        return Err(Error::InvalidArgument(format!("layer {bad} does not exist ({blocks} blocks)")));
    }
    let ids = graph.block_ids();
    let outs = graph.forward_fp(images, true)?.block_outputs.unwrap_or_default();
    let layers = layers
        .iter()
        .map(|&l| layer_outliers(&ids[l].to_string(), &outs[l], detail_samples))
        .collect::<Result<Vec<_>>>()?;
    Ok(OutlierReport { layers })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClipPoint {
    pub ratio: f32,
    pub top1: f32,
}

/// Top-1 accuracy when every block input is clipped to `±c`, where `c` is
/// the `(1 - ratio)` nearest-rank quantile of the nonzero magnitudes of
/// that input over `calib`; `ratio` is the clipped fraction.
pub fn clip_sweep(graph: &ModelGraph, calib: &Tensor, images: &Tensor, labels: &[u32], ratios: &[f32]) -> Result<Vec<ClipPoint>> {
    if ratios.is_empty() {
        return Err(Error::Empty("clip ratios"));
    }
    if let Some(&r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(Error::InvalidArgument(format!("clip ratio {r} outside (0, 1]")));
    }
    let ids = graph.block_ids();
    // Sorted nonzero magnitudes of every block input over the calibration set.
    let mut mags: Vec<Vec<f32>> = vec![Vec::new(); ids.len()];
    let mut h = calib.clone();
    for (k, id) in ids.iter().enumerate() {
        mags[k] = h.data().iter().map(|v| libm::fabsf(*v)).filter(|&v| v != 0.0).collect();
        mags[k].sort_unstable_by(f32::total_cmp);
        h = graph.block(*id).forward(&h, Precision::Float)?;
    }
    let mut out = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let clips: Vec<f32> = mags
            .iter()
            .map(|m| {
                if m.is_empty() {
                    return 0.0;
                }
                let rank = libm::ceil((1.0 - r as f64) * m.len() as f64) as usize;
                m[rank.clamp(1, m.len()) - 1]
            })
            .collect();
        let mut correct = 0;
        let n = images.dim(0);
        let mut start = 0;
        while start < n {
            let count = 64.min(n - start);
            let mut h = images.slice_batch(start, count)?;
            for (k, id) in ids.iter().enumerate() {
                let c = clips[k];
                h = h.map(|v| v.clamp(-c, c));
                h = graph.block(*id).forward(&h, Precision::Float)?;
            }
            let logits = graph.head.forward(&h, Precision::Float)?;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels[start..start + count])
                .filter(|(p, l)| **p == **l as usize)
                .count();
            start += count;
        }
        out.push(ClipPoint {
            ratio: r,
            top1: correct as f32 / n as f32,
        });
    }
    Ok(out)
}

/// Shannon entropy in bits of the empirical histogram of `codes`.
/// `bits` bounds the code range; empty bins contribute nothing.
pub fn code_entropy(codes: &[u32], bits: u32) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let max = if bits >= 32 { u32::MAX } else { (1u32 << bits) - 1 };
    let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
    for &c in codes {
        *hist.entry(c.min(max)).or_default() += 1;
    }
    let n = codes.len() as f64;
    -hist
        .values()
        .map(|&h| {
            let p = h as f64 / n;
            p * libm::log2(p)
        })
        .sum::<f64>()
}

/// Two-component input mixture `p N(mu_x, sigma_x^2) + q N(mu_x, t^2 sigma_x^2)`
/// convolved with weights drawn from `N(mu_w, sigma_w^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MixtureSpec {
    /// Weights of the two components; they sum to one.
    pub alpha: [f64; 2],
    pub mu_x: f64,
    pub sigma_x: f64,
    pub t: f64,
    pub mu_w: f64,
    pub sigma_w: f64,
}

impl MixtureSpec {
    pub fn new(mu_x: f64, sigma_x: f64, t: f64, mu_w: f64, sigma_w: f64) -> Self {
        Self {
            alpha: [0.5, 0.5],
            mu_x,
            sigma_x,
            t,
            mu_w,
            sigma_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_x > 0.0
            && self.sigma_w > 0.0
            && self.t >= 1.0
            && self.alpha.iter().all(|&a| a >= 0.0)
            && libm::fabs(self.alpha[0] + self.alpha[1] - 1.0) < 1e-9
            && [self.mu_x, self.mu_w, self.t].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate mixture {self:?}")))
        }
    }

    /// Closed-form ratio of output-component variances.
    pub fn predicted_ratio(&self) -> f64 {
        let (mx2, sx2, mw2, sw2, t2) = (
            self.mu_x * self.mu_x,
            self.sigma_x * self.sigma_x,
            self.mu_w * self.mu_w,
            self.sigma_w * self.sigma_w,
            self.t * self.t,
        );
        t2 + mx2 * sw2 * (1.0 - t2) / (sx2 * sw2 + sx2 * mw2 + mx2 * sw2)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PropResult {
    pub label: String,
    pub predicted: f64,
    pub empirical: f64,
    /// Monte-Carlo standard error of `empirical`, when estimated.
    pub std_error: Option<f64>,
    /// Relative tolerance, when the check is relative.
    pub rel_tolerance: Option<f64>,
    pub samples: usize,
    pub passed: bool,
    pub detail: String,
}

/// Sample variance and the standard error of that estimate.
fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in xs {
        let d = (x - mean) * (x - mean);
        m2 += d;
        m4 += d * d;
    }
    let var = m2 / (n - 1.0);
    let m4 = m4 / n;
    (var, libm::sqrt(((m4 - var * var) / n).max(0.0)))
}

/// Outputs of one 3×3 convolution window over `in_channels` channels,
/// with fresh weights and inputs from one component per sample.
fn conv_window_outputs(spec: &MixtureSpec, scale: f64, samples: usize, in_channels: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let taps = in_channels * 9;
    (0..samples)
        .map(|_| {
            (0..taps)
                .map(|_| {
                    let z1: f64 = StandardNormal.sample(rng);
                    let z2: f64 = StandardNormal.sample(rng);
                    let x = spec.mu_x + scale * spec.sigma_x * z1;
                    let w = spec.mu_w + spec.sigma_w * z2;
                    w * x
                })
                .sum()
        })
        .collect()
}

/// Monte-Carlo check of the output variance ratio: the two components are
/// sampled separately (`samples` outputs each); passes when the estimate is
/// within three standard errors of the prediction and, for `mu_x != 0`
/// and `t > 1`, both are below `t^2`.
pub fn verify_prop1(spec: &MixtureSpec, samples: usize, seed: u64) -> Result<PropResult> {
    spec.validate()?;
    if samples < 2 {
        return Err(Error::InvalidArgument("at least two samples are needed".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let o1 = conv_window_outputs(spec, 1.0, samples, 1, &mut rng);
    let o2 = conv_window_outputs(spec, spec.t, samples, 1, &mut rng);
    let (v1, se1) = variance_with_se(&o1);
    let (v2, se2) = variance_with_se(&o2);
    let ratio = v2 / v1;
    let se = ratio * libm::sqrt((se1 / v1) * (se1 / v1) + (se2 / v2) * (se2 / v2));
    let predicted = spec.predicted_ratio();
    let t2 = spec.t * spec.t;
    let within = libm::fabs(predicted - ratio) <= 3.0 * se;
    let below = spec.mu_x == 0.0 || spec.t == 1.0 || (predicted < t2 && ratio < t2);
    Ok(PropResult {
        label: format!(
            "variance ratio t={} mu_x={} sigma_x={} mu_w={} sigma_w={}",
            spec.t, spec.mu_x, spec.sigma_x, spec.mu_w, spec.sigma_w
        ),
        predicted,
        empirical: ratio,
        std_error: Some(se),
        rel_tolerance: None,
        samples,
        passed: within && below,
        detail: format!("t^2={t2} gap={:.4} ({:.2} se)", ratio - predicted, (ratio - predicted) / se),
    })
}

/// Grid-searched Lp-optimal symmetric clip. A coarse pass over 256
/// candidates `r * max|v|` is refined on the 4096-point grid within two
/// coarse cells of the coarse optimum.
pub fn optimal_clip(values: &[f32], bits: u32, p: u32) -> Result<f64> {
    ClipSearchConfig::new(p, 4096)?;
    crate::fake_quant::check_bits(bits)?;
    let m = values.iter().fold(0.0f64, |a, &v| a.max(libm::fabs(v as f64)));
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::DegenerateRange(m as f32));
    }
    const FINE: usize = 4096;
    const COARSE: usize = 256;
    const STEP: usize = FINE / COARSE;
    let eval = |r: usize| clip_distortion(values, bits, p, m * r as f64 / FINE as f64);
    let mut best = (f64::INFINITY, FINE);
    for j in 1..=COARSE {
        let r = j * STEP;
        let d = eval(r);
        if d < best.0 {
            best = (d, r);
        }
    }
    let lo = best.1.saturating_sub(2 * STEP).max(1);
    let hi = (best.1 + 2 * STEP).min(FINE);
    let mut fine = (f64::INFINITY, best.1);
    for r in lo..=hi {
        let d = if r == best.1 { best.0 } else { eval(r) };
        if d < fine.0 {
            fine = (d, r);
        }
    }
    Ok(m * fine.1 as f64 / FINE as f64)
}

/// Equal-weight zero-mean mixture `sum_n N(0, t_n^2)`, stratified so each
/// component contributes `samples / N` draws.
pub fn sample_scale_mixture(t_list: &[f64], samples: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let per = samples / t_list.len().max(1);
    let mut v = Vec::with_capacity(per * t_list.len());
    for &t in t_list {
        for _ in 0..per {
            let z: f64 = StandardNormal.sample(rng);
            v.push((t * z) as f32);
        }
    }
    v
}

/// Power mean `(sum t_n^p / N)^(1/p)`.
pub fn power_mean(t_list: &[f64], p: u32) -> f64 {
    let n = t_list.len() as f64;
    let s: f64 = t_list.iter().map(|t| libm::pow(*t, p as f64)).sum();
    libm::pow(s / n, 1.0 / p as f64)
}

/// Compares the grid-searched optimal clip of an equal-weight scale
/// mixture with the power-mean multiple of the single-Gaussian optimum;
/// passes within 5% relative.
pub fn verify_prop2(t_list: &[f64], p: u32, bits: u32, samples: usize, seed: u64) -> Result<PropResult> {
    if !(p == 1 || p == 2) {
        return Err(Error::InvalidArgument(format!("distortion exponent must be 1 or 2, got {p}")));
    }
    if t_list.is_empty() || t_list.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument("scale factors must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = sample_scale_mixture(&[1.0], samples, &mut rng);
    let h = optimal_clip(&base, bits, p)?;
    let mix = sample_scale_mixture(t_list, samples, &mut rng);
    let c = optimal_clip(&mix, bits, p)?;
    let k = power_mean(t_list, p);
    let predicted = k * h;
    let rel = libm::fabs(c - predicted) / predicted;
    Ok(PropResult {
        label: format!("optimal clip p={p} b={bits} t={t_list:?}"),
        predicted,
        empirical: c,
        std_error: None,
        rel_tolerance: Some(0.05),
        samples,
        passed: rel <= 0.05,
        detail: format!("h={h:.4} k={k:.4} c/(k*h)={:.4}", c / predicted),
    })
}

/// Fraction of `trials` seeded mixtures on which codes under the p=1 clip
/// have strictly higher entropy than under the p=2 clip. Each trial draws
/// `n` values from `0.9 N(0, 1) + 0.1 N(0, t^2)` with `t` uniform in
/// `[t_min, 2 t_min]`.
pub fn entropy_trials(trials: usize, n: usize, t_min: f64, bits: u32, seed: u64) -> Result<(usize, Vec<(f64, f64)>)> {
    let mut wins = 0;
    let mut pairs = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let t = rng.random_range(t_min..=2.0 * t_min);
        let values: Vec<f32> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let s = if rng.random_bool(0.1) { t } else { 1.0 };
                (s * z) as f32
            })
            .collect();
        let entropy = |p: u32| -> Result<f64> {
            let cfg = ClipSearchConfig::new(p, crate::quant::PRODUCTION_GRID)?;
            let scale = crate::quant::clip_search(&values, bits, &cfg)?;
            let codes = crate::quant::weight_codes_unsigned(&values, scale, bits)?;
            Ok(code_entropy(&codes, bits))
        };
        let (e1, e2) = (entropy(1)?, entropy(2)?);
        if e1 > e2 {
            wins += 1;
        }
        pairs.push((e1, e2));
    }
    Ok((wins, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let codes: Vec<u32> = (0..256).collect();
        assert!((code_entropy(&codes, 8) - 8.0).abs() < 1e-12);
        assert_eq!(code_entropy(&[5, 5, 5], 8), 0.0);
    }

    #[test]
    fn predicted_ratio_examples() {
        assert!((MixtureSpec::new(1.0, 1.0, 3.0, 0.0, 1.0).predicted_ratio() - 5.0).abs() < 1e-12);
        assert!((MixtureSpec::new(0.0, 1.0, 3.0, 0.0, 1.0).predicted_ratio() - 9.0).abs() < 1e-12);
        assert!((MixtureSpec::new(2.0, 1.0, 1.0, 0.3, 1.0).predicted_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantiles_skip_zeros() {
        let q = quantile_table(&[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((q.q75, q.max), (3.0, 4.0));
        assert!(quantile_table(&[0.0]).is_none());
    }

    #[test]
    fn constant_layer_extremes() {
        let t = Tensor::full(&[3, 2, 2, 2], 0.7).unwrap();
        let l = layer_outliers("x", &t, 1).unwrap();
        assert_eq!(l.sample_max, l.sample_min);
        assert_eq!(l.outliers, 0);
    }

    #[test]
    fn planted_channel_tops_channel_max() {
        let mut t = Tensor::full(&[1, 4, 2, 2], 1.0).unwrap();
        for v in &mut t.data_mut()[8..12] {
            *v *= 100.0;
        }
        let l = layer_outliers("x", &t, 1).unwrap();
        let top = l.channel_max[0].iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(top, 2);
    }

    #[test]
    fn power_means() {
        assert!((power_mean(&[1.0, 3.0], 1) - 2.0).abs() < 1e-12);
        assert!((power_mean(&[1.0, 3.0], 2) - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn prop2_rejects_bad_exponent() {
        assert!(verify_prop2(&[1.0, 2.0], 3, 8, 1000, 0).is_err());
    }
}
