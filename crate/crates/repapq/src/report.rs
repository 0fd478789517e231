//! CSV and JSON report export.
//!
//! CSV schemas (one header line, then one row per item):
//!
//! | report   | columns                                                        |
//! |----------|----------------------------------------------------------------|
//! | boxplot  | `layer,q75,q90,q95,q99,max`                                    |
//! | outliers | `layer,elements,outliers,threshold,mean_abs,sample_max,sample_min` |
//! | clip     | `ratio,top1`                                                   |
//! | verify   | `label,predicted,empirical,std_error,rel_tolerance,samples,passed` |
//!
//! Layers whose activations are all zero have empty quantile cells.
//! `sample_max` and `sample_min` are the largest and smallest per-sample
//! extremes. Floats use Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::path::Path;

use repapq_core::analysis::{ClipPoint, OutlierReport, PropResult};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

pub const BOXPLOT_HEADER: &str = "layer,q75,q90,q95,q99,max";
pub const OUTLIER_HEADER: &str = "layer,elements,outliers,threshold,mean_abs,sample_max,sample_min";
pub const CLIP_HEADER: &str = "ratio,top1";
pub const VERIFY_HEADER: &str = "label,predicted,empirical,std_error,rel_tolerance,samples,passed";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn boxplot_csv(report: &OutlierReport) -> String {
    let mut out = format!("{BOXPLOT_HEADER}\n");
    for l in &report.layers {
        let q = l.quantiles;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            field(&l.layer),
            opt(q.map(|q| q.q75)),
            opt(q.map(|q| q.q90)),
            opt(q.map(|q| q.q95)),
            opt(q.map(|q| q.q99)),
            opt(q.map(|q| q.max)),
        );
    }
    out
}

pub fn outlier_csv(report: &OutlierReport) -> String {
    let mut out = format!("{OUTLIER_HEADER}\n");
    for l in &report.layers {
        let smax = l.sample_max.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let smin = l.sample_min.iter().copied().fold(f32::INFINITY, f32::min);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            field(&l.layer),
            l.elements,
            l.outliers,
            l.threshold,
            l.mean_abs,
            smax,
            smin
        );
    }
    out
}

pub fn clip_csv(points: &[ClipPoint]) -> String {
    let mut out = format!("{CLIP_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.ratio, p.top1);
    }
    out
}

pub fn verify_csv(results: &[PropResult]) -> String {
    let mut out = format!("{VERIFY_HEADER}\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            field(&r.label),
            r.predicted,
            r.empirical,
            opt(r.std_error),
            opt(r.rel_tolerance),
            r.samples,
            r.passed
        );
    }
    out
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

/// Writes an outlier report as a boxplot CSV or as full JSON.
pub fn export_outliers(report: &OutlierReport, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Csv => write_text(path, &boxplot_csv(report)),
        Format::Json => write_json(path, report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use repapq_core::analysis::{layer_outliers, Quantiles};
    use repapq_core::Tensor;

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(boxplot_csv(&OutlierReport::default()), "layer,q75,q90,q95,q99,max\n");
        assert_eq!(clip_csv(&[]), "ratio,top1\n");
    }

    #[test]
    fn boxplot_row() {
        let t = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let mut l = layer_outliers("s0.b0", &t, 1).unwrap();
        assert_eq!(
            l.quantiles,
            Some(Quantiles { q75: 4.0, q90: 4.0, q95: 4.0, q99: 4.0, max: 4.0 })
        );
        l.layer = "a,b".into();
        let r = OutlierReport { layers: vec![l] };
        assert_eq!(boxplot_csv(&r).lines().nth(1).unwrap(), "\"a,b\",4,4,4,4,4");
    }

    #[test]
    fn json_round_trip() {
        let t = Tensor::new(&[2, 2, 1, 1], vec![0.5, -3.0, 0.0, 7.25]).unwrap();
        let r = OutlierReport { layers: vec![layer_outliers("x", &t, 2).unwrap()] };
        let back: OutlierReport = serde_json::from_str(&to_json(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
