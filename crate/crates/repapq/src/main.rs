use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use repapq::config::Settings;
use repapq::error::{Error, Result, StageExt};
use repapq::pipeline::{self, QuantizeOptions, VerifySamples};
use repapq::{data, report};
use repapq_core::analysis;
use repapq_core::calib::{self, EvalMetrics};
use repapq_core::dataset::{self, Dataset, Normalization};
use repapq_core::fusion;
use repapq_core::graph::{NormPlacement, Precision};
use repapq_core::topology::Topology;
use repapq_core::train::{self, OutlierPlant, TrainReport};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "repapq", version, about = "Post-training quantization of reparameterized VGG-style networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural 10-class image set as CIFAR-10 binary batches.
    GenData(GenDataArgs),
    /// Train the float multi-branch reference model.
    TrainDesk(TrainArgs),
    /// Merge every block's branches into one convolution.
    Fuse(FuseArgs),
    /// Fuse, attach quantizers, calibrate, evaluate and fold for deployment.
    Quantize(QuantizeArgs),
    /// Top-1 accuracy of a float, quantized or deploy model.
    Eval(EvalArgs),
    /// Activation outlier statistics and clip sweeps.
    Analyze(AnalyzeArgs),
    /// Monte-Carlo checks of the variance-ratio and clipping claims.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CIFAR-10 binary batch files, or one raw "RTEN" tensor file.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Little-endian u32 labels for a raw tensor file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct EvalDataArgs {
    /// Held-out CIFAR-10 batch files or one raw tensor file.
    #[arg(long, num_args = 1..)]
    eval_data: Vec<PathBuf>,
    /// Labels for a raw held-out tensor file.
    #[arg(long)]
    eval_labels: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    #[arg(long, default_value_t = 2_000)]
    test: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory receiving train.bin and test.bin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    eval: EvalDataArgs,
    /// Topology manifest; the desk reference model when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Use one batch norm after the branch sum in every block.
    #[arg(long)]
    post_add: bool,
    /// Scale two channels in two interior blocks by 20–50 halfway through.
    #[arg(long)]
    plant_outliers: bool,
    /// Use only the first N training samples.
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Key/value settings file; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    /// Directory holding model.toml and weights.rapq.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibFlags {
    /// Bit-widths such as W8A8 or W6A6.
    #[arg(long)]
    scheme: Option<String>,
    /// Bit-width of the first block and the head.
    #[arg(long)]
    first_last_bits: Option<u32>,
    #[arg(long)]
    calib_size: Option<usize>,
    /// Optimizer iterations per block; 0 keeps the initialization.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Iterations between full calibration-set evaluations.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Seed for sampling and optimization [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    /// Do not insert the channel affine after fused convolutions.
    #[arg(long)]
    no_qprep: bool,
    /// Drop the stage-output term from block objectives.
    #[arg(long)]
    no_abc: bool,
    /// Measurement for non-last blocks and the stage term.
    #[arg(long, value_parser = ["mae", "mse"])]
    measure: Option<String>,
    /// Norm of the weight clip search [default: 2].
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
    p: Option<u32>,
    /// Weight-scale initialization.
    #[arg(long, value_parser = ["clip", "minmax"])]
    init: Option<String>,
    /// Key/value settings file; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl CalibFlags {
    fn settings(&self) -> Result<Settings> {
        let cli = Settings {
            scheme: self.scheme.clone(),
            first_last_bits: self.first_last_bits,
            calib_size: self.calib_size,
            iters: self.iters,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            seed: self.seed,
            qprep: self.no_qprep.then_some(false),
            abc: self.no_abc.then_some(false),
            measure: self.measure.clone(),
            p: self.p,
            init: self.init.clone(),
            ..Settings::default()
        };
        layered(cli, self.config.as_deref())
    }
}

fn layered(cli: Settings, file: Option<&Path>) -> Result<Settings> {
    let file = match file {
        Some(p) => Settings::read(p)?,
        None => Settings::default(),
    };
    Ok(cli.over(file))
}

#[derive(Args)]
struct QuantizeArgs {
    /// Directory holding the float model.toml and weights.rapq.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    eval: EvalDataArgs,
    #[command(flatten)]
    flags: CalibFlags,
    /// Keep float targets in this directory instead of memory.
    #[arg(long)]
    spill: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Key/value settings file (normalization keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Float model for per-block distances.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Also evaluate this deploy model.
    #[arg(long)]
    deploy: Option<PathBuf>,
    /// Directory receiving eval.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Key/value settings file (normalization keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Number of samples analysed.
    #[arg(long, default_value_t = 256)]
    samples: usize,
    /// Flat block indices; all blocks when absent.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    /// Samples with per-channel detail.
    #[arg(long, default_value_t = 4)]
    detail: usize,
    /// Write boxplot.csv with per-layer quantiles.
    #[arg(long)]
    boxplot: bool,
    /// Clip ratios in (0, 1] for a clip sweep, e.g. 0.01,0.05,0.2.
    #[arg(long, value_delimiter = ',')]
    clip_ratios: Vec<f32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = VerifySamples::default().prop1)]
    prop1_samples: usize,
    #[arg(long, default_value_t = VerifySamples::default().prop2)]
    prop2_samples: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory receiving verify.json and verify.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn is_raw(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 4];
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(f.read(&mut magic).map_err(|e| Error::io(path, e))? == 4 && &magic == data::RTEN_MAGIC)
}

fn load_data(files: &[PathBuf], labels: Option<&Path>, norm: &Normalization, classes: Option<usize>) -> Result<Dataset> {
    if let [single] = files {
        if is_raw(single)? {
            let labels = labels.ok_or_else(|| Error::Config("a raw tensor file needs --labels".into()))?;
            return data::ingest_raw(single, labels, classes);
        }
    }
    data::ingest_cifar10(files, norm)
}

fn emit(line: &str, log: &mut Option<File>) {
    println!("{line}");
    if let Some(f) = log {
        let _ = writeln!(f, "{line}");
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn log_file(dir: &Path, name: &str) -> Result<Option<File>> {
    let p = dir.join(name);
    Ok(Some(File::create(&p).map_err(|e| Error::io(&p, e))?))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    create_dir(&a.out)?;
    for (name, count, seed) in [("train.bin", a.train, a.seed), ("test.bin", a.test, a.seed.wrapping_add(1))] {
        let (pixels, labels) = dataset::synth_images(count, seed);
        data::write_cifar10(&a.out.join(name), &labels, &pixels)?;
        println!("wrote {} ({count} images)", a.out.join(name).display());
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    model: String,
    train_samples: usize,
    config: train::TrainConfig,
    report: TrainReport,
    eval_top1: Option<f32>,
}

fn train_desk(a: &TrainArgs) -> Result<()> {
    let cli = Settings {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..Settings::default()
    };
    let settings = layered(cli, a.config.as_deref())?;
    let norm = settings.normalization()?;
    let mut topo = match &a.manifest {
        Some(p) => repapq::manifest::read_topology(p)?,
        None => Topology::desk_reference(),
    };
    if a.post_add {
        for b in topo.stages.iter_mut().flat_map(|s| s.blocks.iter_mut()) {
            b.norm = NormPlacement::PostAdd;
        }
    }
    let mut graph = topo.build()?;
    let mut train_set = load_data(&a.data.data, a.data.labels.as_deref(), &norm, Some(topo.classes)).stage("data")?;
    if let Some(n) = a.train_size.filter(|&n| n < train_set.len()) {
        train_set = train_set.split(n)?.0;
    }
    let mut cfg = settings.train();
    if a.plant_outliers {
        cfg.plant = Some(OutlierPlant::desk_default());
    }
    create_dir(&a.out)?;
    let mut log = log_file(&a.out, "train.log")?;
    train::init_weights(&mut graph, cfg.seed)?;
    let report = train::train(&mut graph, &train_set, &cfg, &mut |l| emit(l, &mut log)).stage("train")?;
    let eval_top1 = if a.eval.eval_data.is_empty() {
        None
    } else {
        let ev = load_data(&a.eval.eval_data, a.eval.eval_labels.as_deref(), &norm, Some(topo.classes)).stage("data")?;
        let m = calib::evaluate(&graph, Precision::Float, None, &ev.images, &ev.labels)?;
        emit(&format!("eval top1 {:.4}", m.top1), &mut log);
        Some(m.top1)
    };
    pipeline::save_model(&graph, &a.out)?;
    report::write_json(
        &a.out.join("train.json"),
        &TrainSummary {
            model: graph.name.clone(),
            train_samples: train_set.len(),
            config: cfg,
            report,
            eval_top1,
        },
    )
}

fn fuse(a: &FuseArgs) -> Result<()> {
    let mut g = pipeline::load_model(&a.model)?;
    fusion::fuse_graph(&mut g, false)?;
    pipeline::save_model(&g, &a.out)?;
    println!("fused {} blocks into {}", g.num_blocks(), a.out.display());
    Ok(())
}

fn quantize(a: &QuantizeArgs) -> Result<()> {
    let settings = a.flags.settings()?;
    let norm = settings.normalization()?;
    let opts = QuantizeOptions {
        scheme: settings.scheme()?,
        init: settings.weight_init()?,
        calib: settings.calib()?,
        spill: a.spill.clone(),
    };
    let fp = pipeline::load_model(&a.model).stage("load")?;
    let classes = Some(fp.head.classes());
    let train_set = load_data(&a.data.data, a.data.labels.as_deref(), &norm, classes).stage("data")?;
    let eval_set = if a.eval.eval_data.is_empty() {
        train_set.clone()
    } else {
        load_data(&a.eval.eval_data, a.eval.eval_labels.as_deref(), &norm, classes).stage("data")?
    };
    create_dir(&a.out)?;
    let mut log = log_file(&a.out, "calib.log")?;
    emit(&format!("scheme {} init {:?}", opts.scheme, settings.init.as_deref().unwrap_or("clip")), &mut log);
    let outcome = pipeline::quantize(&fp, &train_set, &eval_set, &opts, &mut |l| emit(l, &mut log))?;
    pipeline::write_outcome(&outcome, &a.out).stage("write")
}

#[derive(Serialize)]
struct EvalReport {
    model: String,
    precision: &'static str,
    metrics: EvalMetrics,
    deploy_top1: Option<f32>,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let g = pipeline::load_model(&a.model)?;
    let reference = a.reference.as_deref().map(pipeline::load_model).transpose()?;
    let norm = layered(Settings::default(), a.config.as_deref())?.normalization()?;
    let ds = load_data(&a.data.data, a.data.labels.as_deref(), &norm, Some(g.head.classes()))?;
    let quantized = g.is_fused() && g.head.quant.is_some();
    let precision = if quantized { Precision::Quantized } else { Precision::Float };
    let metrics = calib::evaluate(&g, precision, reference.as_ref(), &ds.images, &ds.labels)?;
    let deploy_top1 = match &a.deploy {
        Some(p) => {
            let m = pipeline::read_deploy(p)?;
            let mut correct = 0;
            for start in (0..ds.len()).step_by(64) {
                let n = 64.min(ds.len() - start);
                let logits = m.forward(&ds.images.slice_batch(start, n)?)?;
                correct += calib::argmax_rows(&logits)
                    .iter()
                    .zip(&ds.labels[start..start + n])
                    .filter(|(p, l)| **p == **l as usize)
                    .count();
            }
            Some(correct as f32 / ds.len() as f32)
        }
        None => None,
    };
    let r = EvalReport {
        model: g.name.clone(),
        precision: if quantized { "quantized" } else { "float" },
        metrics,
        deploy_top1,
    };
    print!("{}", report::to_json(&r)?);
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        report::write_json(&dir.join("eval.json"), &r)?;
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let g = pipeline::load_model(&a.model)?;
    let norm = layered(Settings::default(), a.config.as_deref())?.normalization()?;
    let ds = load_data(&a.data.data, a.data.labels.as_deref(), &norm, Some(g.head.classes()))?;
    let n = a.samples.min(ds.len());
    let images = ds.images.slice_batch(0, n)?;
    let layers: Vec<usize> = if a.layers.is_empty() { (0..g.num_blocks()).collect() } else { a.layers.clone() };
    let rep = analysis::outlier_stats(&g, &images, &layers, a.detail)?;
    create_dir(&a.out)?;
    report::export_outliers(&rep, &a.out.join("outliers.json"), report::Format::Json)?;
    report::write_text(&a.out.join("outliers.csv"), &report::outlier_csv(&rep))?;
    if a.boxplot {
        report::export_outliers(&rep, &a.out.join("boxplot.csv"), report::Format::Csv)?;
    }
    for l in &rep.layers {
        println!("{} outliers={} of {} threshold={:.4}", l.layer, l.outliers, l.elements, l.threshold);
    }
    if !a.clip_ratios.is_empty() {
        let rest = ds.subset(&(n..ds.len()).collect::<Vec<_>>());
        let eval = match rest {
            Ok(r) if !r.is_empty() => r,
            _ => ds.clone(),
        };
        let points = analysis::clip_sweep(&g, &images, &eval.images, &eval.labels, &a.clip_ratios)?;
        report::write_text(&a.out.join("clip.csv"), &report::clip_csv(&points))?;
        report::write_json(&a.out.join("clip.json"), &points)?;
        for p in &points {
            println!("clip ratio={} top1={:.4}", p.ratio, p.top1);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    passed: bool,
    failures: Vec<String>,
    results: Vec<analysis::PropResult>,
}

/// Runs every suite; `Ok(false)` when an assertion fails.
fn verify(a: &VerifyArgs) -> Result<bool> {
    let mut results = pipeline::prop1_suite(a.prop1_samples, a.seed)?;
    results.extend(pipeline::prop2_suite(a.prop2_samples, a.seed)?);
    results.push(pipeline::entropy_suite(a.seed)?);
    for r in &results {
        eprintln!(
            "{} {}: predicted={:.5} empirical={:.5} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.label,
            r.predicted,
            r.empirical,
            r.detail
        );
    }
    let failures: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.label.clone()).collect();
    let rep = VerifyReport {
        passed: failures.is_empty(),
        failures,
        results,
    };
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        report::write_json(&dir.join("verify.json"), &rep)?;
        report::write_text(&dir.join("verify.csv"), &report::verify_csv(&rep.results))?;
    }
    println!("{}", serde_json::to_string(&serde_json::json!({ "passed": rep.passed, "failures": rep.failures }))?);
    Ok(rep.passed)
}

/// Exit code of a verification run with failed assertions.
const VERIFY_FAILED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainDesk(a) => train_desk(a),
        Command::Fuse(a) => fuse(a),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Verify(a) => match verify(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(VERIFY_FAILED),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
