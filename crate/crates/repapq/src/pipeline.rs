//! End-to-end quantization of a float checkpoint.

use std::path::{Path, PathBuf};

use repapq_core::analysis::{self, MixtureSpec, PropResult};
use repapq_core::calib::{self, CalibConfig, EvalMetrics, MemoryStore, TargetStore, UnitReport};
use repapq_core::dataset::Dataset;
use repapq_core::fake_quant::ActQuantSpec;
use repapq_core::fusion::{self, DeployConv, DeployLinear, DeployModel, DEPLOY_MAX_BITS};
use repapq_core::graph::{BlockId, ModelGraph, Precision};
use repapq_core::quant::{self, Scheme, WeightInit};
use repapq_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::store::DiskStore;
use crate::{manifest, weights};

pub const MANIFEST_FILE: &str = "model.toml";
pub const WEIGHTS_FILE: &str = "weights.rapq";
pub const DEPLOY_FILE: &str = "deploy.rapq";
pub const REPORT_FILE: &str = "report.json";

pub struct QuantizeOptions {
    pub scheme: Scheme,
    pub init: WeightInit,
    pub calib: CalibConfig,
    /// Directory for spilling float targets instead of keeping them in
    /// memory.
    pub spill: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub samples: usize,
    pub top1: f32,
    pub fp_top1: f32,
    pub per_block_mae: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub model: String,
    pub scheme: String,
    pub init: String,
    pub calib_samples: usize,
    pub config: CalibConfig,
    pub blocks: Vec<UnitReport>,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
}

pub struct QuantizeOutcome {
    pub graph: ModelGraph,
    /// Absent when a bit-width exceeds the integer deploy limit.
    pub deploy: Option<DeployModel>,
    pub report: QuantizeReport,
}

fn init_name(init: &WeightInit) -> String {
    match init {
        WeightInit::MinMax => "minmax".into(),
        WeightInit::Clip(c) => format!("clip-p{}", c.p),
    }
}

/// Fuses `fp`, attaches and initializes quantizers, calibrates them on a
/// sample of `train`, and evaluates on `eval`.
pub fn quantize(
    fp: &ModelGraph,
    train: &Dataset,
    eval: &Dataset,
    opts: &QuantizeOptions,
    log: &mut dyn FnMut(&str),
) -> Result<QuantizeOutcome> {
    let cfg = &opts.calib;
    cfg.validate().stage("config")?;
    let mut reference = fp.clone();
    let mut graph = fp.clone();
    if !fp.is_fused() {
        fusion::fuse_graph(&mut reference, false).stage("fuse")?;
        fusion::fuse_graph(&mut graph, cfg.qprep).stage("fuse")?;
    } else if cfg.qprep {
        return Err(Error::Config("QPRep needs an unfused checkpoint".into()));
    }
    quant::attach_quantizers(&mut graph, &opts.scheme, opts.init).stage("attach")?;
    let calib_set = train.sample_calibration(cfg.calib_size.min(train.len()), cfg.seed).stage("sample")?;
    log(&format!("calibration set: {} samples (seed {})", calib_set.len(), cfg.seed));
    quant::calibrate_activation_ranges(&mut graph, &calib_set.images, 64).stage("batchquant")?;
    let store: Box<dyn TargetStore> = match &opts.spill {
        Some(dir) => Box::new(DiskStore::new(dir).map_err(|e| Error::io(dir, e)).stage("targets")?),
        None => Box::new(MemoryStore::default()),
    };
    let calib_report = calib::calibrate_model(&mut graph, &reference, &calib_set.images, cfg, store, log).stage("calibrate")?;
    let fp_metrics = calib::evaluate(&reference, Precision::Float, None, &eval.images, &eval.labels).stage("evaluate")?;
    let metrics: EvalMetrics =
        calib::evaluate(&graph, Precision::Quantized, Some(&reference), &eval.images, &eval.labels).stage("evaluate")?;
    log(&format!("top1 quantized={:.4} float={:.4}", metrics.top1, fp_metrics.top1));
    let deployable = graph
        .block_ids()
        .iter()
        .filter_map(|&id| graph.block(id).quant.as_ref())
        .all(|q| q.weight.bits <= DEPLOY_MAX_BITS && q.input.bits <= DEPLOY_MAX_BITS)
        && graph
            .head
            .quant
            .as_ref()
            .is_some_and(|q| q.weight.bits <= DEPLOY_MAX_BITS && q.input.bits <= DEPLOY_MAX_BITS);
    let deploy = if deployable {
        Some(DeployModel::from_graph(&graph).stage("deploy")?)
    } else {
        log(&format!("bit-widths above {DEPLOY_MAX_BITS}: no integer deploy model"));
        None
    };
    let report = QuantizeReport {
        model: fp.name.clone(),
        scheme: opts.scheme.to_string(),
        init: init_name(&opts.init),
        calib_samples: calib_set.len(),
        config: cfg.clone(),
        blocks: calib_report.units,
        final_metrics: FinalMetrics {
            samples: metrics.samples,
            top1: metrics.top1,
            fp_top1: fp_metrics.top1,
            per_block_mae: metrics.per_block_mae,
        },
    };
    Ok(QuantizeOutcome { graph, deploy, report })
}

/// Writes manifest, weights, optional deploy model and report into `dir`.
pub fn write_outcome(outcome: &QuantizeOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_model(&outcome.graph, dir)?;
    if let Some(d) = &outcome.deploy {
        weights::write_tensors(&dir.join(DEPLOY_FILE), &deploy_tensors(d))?;
    }
    crate::report::write_json(&dir.join(REPORT_FILE), &outcome.report)
}

pub fn save_model(graph: &ModelGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    manifest::save_manifest(graph, &dir.join(MANIFEST_FILE))?;
    weights::save_weights(graph, &dir.join(WEIGHTS_FILE))
}

pub fn load_model(dir: &Path) -> Result<ModelGraph> {
    let mut g = manifest::load_manifest(&dir.join(MANIFEST_FILE))?;
    weights::load_weights(&mut g, &dir.join(WEIGHTS_FILE))?;
    Ok(g)
}

fn spec_tensor(s: &ActQuantSpec) -> Tensor {
    Tensor::from_vec(vec![s.bits as f32, s.x_min, s.x_max, s.eta, s.eps]).expect("non-empty")
}

fn spec_from(t: &Tensor, name: &str) -> Result<ActQuantSpec> {
    match t.data() {
        &[bits, x_min, x_max, eta, eps] => Ok(ActQuantSpec {
            bits: bits as u32,
            x_min,
            x_max,
            eta,
            eps,
        }),
        _ => Err(Error::TensorShape {
            name: name.into(),
            expected: vec![5],
            got: t.shape().to_vec(),
        }),
    }
}

fn codes_tensor(shape: &[usize], codes: &[i32]) -> Tensor {
    Tensor::new(shape, codes.iter().map(|&c| c as f32).collect()).expect("shape matches codes")
}

/// Deploy model as named tensors. Integer codes are stored as exact f32
/// values; each quantizer is `[bits, x_min, x_max, eta, eps]`.
pub fn deploy_tensors(m: &DeployModel) -> Vec<(String, Tensor)> {
    let v = |x: &[f32]| Tensor::from_vec(x.to_vec()).expect("non-empty");
    let mut out = vec![("input_shape".to_string(), v(&m.input.map(|d| d as f32)))];
    for (id, c) in &m.blocks {
        out.push((format!("{id}.codes"), codes_tensor(&c.shape, &c.codes)));
        out.push((format!("{id}.s_out"), v(&c.s_out)));
        out.push((format!("{id}.bias"), v(&c.bias)));
        out.push((format!("{id}.input"), spec_tensor(&c.input)));
        out.push((format!("{id}.stride"), v(&[c.stride as f32])));
    }
    out.push(("head.codes".into(), codes_tensor(&m.head.shape, &m.head.codes)));
    out.push(("head.s_out".into(), v(&[m.head.s_out])));
    out.push(("head.bias".into(), v(&m.head.bias)));
    out.push(("head.input".into(), spec_tensor(&m.head.input)));
    out
}

fn parse_block_id(s: &str) -> Option<BlockId> {
    let (a, b) = s.strip_prefix('s')?.split_once(".b")?;
    Some(BlockId {
        stage: a.parse().ok()?,
        block: b.parse().ok()?,
    })
}

pub fn read_deploy(path: &Path) -> Result<DeployModel> {
    let tensors = weights::read_tensors(path)?;
    let map: std::collections::BTreeMap<_, _> = tensors.iter().cloned().collect();
    let get = |name: &str| map.get(name).ok_or_else(|| Error::MissingTensor(name.into()));
    let ints = |t: &Tensor| t.data().iter().map(|&c| c as i32).collect::<Vec<_>>();
    let shape_in = get("input_shape")?.data();
    if shape_in.len() != 3 {
        return Err(Error::malformed(path, "input_shape must hold 3 extents"));
    }
    let mut blocks = Vec::new();
    for (name, t) in &tensors {
        let Some(id) = name.strip_suffix(".codes").and_then(parse_block_id) else {
            continue;
        };
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::malformed(path, format!("{name} must have rank 4")));
        }
        blocks.push((
            id,
            DeployConv {
                shape: [s[0], s[1], s[2], s[3]],
                codes: ints(t),
                s_out: get(&format!("{id}.s_out"))?.data().to_vec(),
                bias: get(&format!("{id}.bias"))?.data().to_vec(),
                input: spec_from(get(&format!("{id}.input"))?, &format!("{id}.input"))?,
                stride: get(&format!("{id}.stride"))?.item() as usize,
            },
        ));
    }
    let hc = get("head.codes")?;
    if hc.rank() != 2 {
        return Err(Error::malformed(path, "head.codes must have rank 2"));
    }
    Ok(DeployModel {
        input: [shape_in[0] as usize, shape_in[1] as usize, shape_in[2] as usize],
        blocks,
        head: DeployLinear {
            shape: [hc.dim(0), hc.dim(1)],
            codes: ints(hc),
            s_out: get("head.s_out")?.item(),
            bias: get("head.bias")?.data().to_vec(),
            input: spec_from(get("head.input")?, "head.input")?,
        },
    })
}

pub const PROP1_T: [f64; 3] = [2.0, 4.0, 8.0];
pub const PROP1_MU_X: [f64; 3] = [0.5, 1.0, 2.0];
pub const PROP1_SIGMA_W: [f64; 2] = [0.5, 1.0];
pub const PROP1_MU_W: f64 = 0.2;
pub const PROP2_T_SETS: [&[f64]; 3] = [&[1.0, 2.0], &[1.0, 3.0], &[1.0, 4.0, 8.0]];
pub const PROP2_BITS: u32 = 8;
pub const ENTROPY_TRIALS: usize = 100;
pub const ENTROPY_VALUES: usize = 20_000;
pub const ENTROPY_T_MIN: f64 = 4.0;
pub const ENTROPY_PASS_FRACTION: f64 = 0.95;

/// Sample counts for the verification sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifySamples {
    pub prop1: usize,
    pub prop2: usize,
}

impl Default for VerifySamples {
    fn default() -> Self {
        Self {
            prop1: 200_000,
            prop2: 1_000_000,
        }
    }
}


/// Variance-ratio sweep: every combination of the `PROP1_*` values with
/// unit input deviation.
pub fn prop1_suite(samples: usize, seed: u64) -> Result<Vec<PropResult>> {
    let mut out = Vec::new();
    for (i, (&t, (&mu_x, &sigma_w))) in PROP1_T
        .iter()
        .flat_map(|t| PROP1_MU_X.iter().flat_map(move |m| PROP1_SIGMA_W.iter().map(move |s| (t, (m, s)))))
        .enumerate()
    {
        let spec = MixtureSpec::new(mu_x, 1.0, t, PROP1_MU_W, sigma_w);
        out.push(analysis::verify_prop1(&spec, samples, seed.wrapping_add(i as u64))?);
    }
    Ok(out)
}

pub fn prop2_suite(samples: usize, seed: u64) -> Result<Vec<PropResult>> {
    let mut out = Vec::new();
    for p in [1, 2] {
        for (i, t) in PROP2_T_SETS.iter().enumerate() {
            out.push(analysis::verify_prop2(t, p, PROP2_BITS, samples, seed.wrapping_add(i as u64))?);
        }
    }
    Ok(out)
}

/// Entropy comparison of p=1 and p=2 clips as a pass/fail record;
/// `predicted` holds the required win fraction.
pub fn entropy_suite(seed: u64) -> Result<PropResult> {
    let (wins, _) = analysis::entropy_trials(ENTROPY_TRIALS, ENTROPY_VALUES, ENTROPY_T_MIN, PROP2_BITS, seed)?;
    let frac = wins as f64 / ENTROPY_TRIALS as f64;
    Ok(PropResult {
        label: format!("entropy p1 > p2, t >= {ENTROPY_T_MIN}"),
        predicted: ENTROPY_PASS_FRACTION,
        empirical: frac,
        std_error: None,
        rel_tolerance: None,
        samples: ENTROPY_TRIALS * ENTROPY_VALUES,
        passed: frac >= ENTROPY_PASS_FRACTION,
        detail: format!("{wins} of {ENTROPY_TRIALS} trials"),
    })
}
