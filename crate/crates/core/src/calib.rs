//! Sequential block-wise calibration of a fused, quantizer-equipped graph
//! against the outputs of its float counterpart.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fake_quant;
use crate::graph::{BlockId, ModelGraph, Precision};
use crate::ops;
use crate::optim::{AdamConfig, OptimState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Measure {
    Mae,
    Mse,
}

impl Measure {
    pub fn name(self) -> &'static str {
        match self {
            Measure::Mae => "mae",
            Measure::Mse => "mse",
        }
    }

    pub fn eval(self, a: &Tensor, b: &Tensor) -> Result<f32> {
        match self {
            Measure::Mae => ops::mae(a, b),
            Measure::Mse => ops::mse(a, b),
        }
    }

    fn on_tape(self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        match self {
            Measure::Mae => tape.mae(a, b),
            Measure::Mse => tape.mse(a, b),
        }
    }
}

impl core::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" | "MAE" => Ok(Measure::Mae),
            "mse" | "MSE" => Ok(Measure::Mse),
            _ => Err(Error::InvalidArgument(format!("unknown measurement {s:?}"))),
        }
    }
}

/// Base learning rates per parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LearningRates {
    pub weight: f32,
    pub bias: f32,
    /// Weight quantizer scales.
    pub weight_scale: f32,
    /// Activation quantizer multiplier and offset correction.
    pub act_scale: f32,
    /// Channel affine gain and shift.
    pub affine: f32,
    pub others: f32,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            weight: 1e-5,
            bias: 1e-4,
            weight_scale: 1e-5,
            act_scale: 1e-3,
            affine: 1e-2,
            others: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub calib_size: usize,
    pub lr: LearningRates,
    /// Measurement for blocks that are neither last in their stage nor
    /// alone in it.
    pub block_measure: Measure,
    pub stage_measure: Measure,
    /// Measurement for last-in-stage and single-block-stage blocks.
    pub last_block_measure: Measure,
    pub abc: bool,
    pub qprep: bool,
    pub seed: u64,
    /// Iterations between full-set evaluations of the objective.
    pub eval_every: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_size: 32,
            calib_size: 1024,
            lr: LearningRates::default(),
            block_measure: Measure::Mae,
            stage_measure: Measure::Mae,
            last_block_measure: Measure::Mse,
            abc: true,
            qprep: true,
            seed: 42,
            eval_every: 100,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        let lr = &self.lr;
        let rates = [lr.weight, lr.bias, lr.weight_scale, lr.act_scale, lr.affine, lr.others];
        if rates.iter().any(|&r| !(r >= 0.0) || !r.is_finite()) {
            return Err(Error::InvalidArgument("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.calib_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument(
                "batch size, calibration size and evaluation interval must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Measurement rule for the block at `index` of a stage of `len` blocks.
    pub fn block_measure_for(&self, index: usize, len: usize) -> Measure {
        if len == 1 || index + 1 == len {
            self.last_block_measure
        } else {
            self.block_measure
        }
    }
}

/// Storage for float-model targets, keyed by flat block index; the key
/// equal to the block count holds the logits.
pub trait TargetStore {
    fn put(&mut self, key: usize, value: Tensor) -> Result<()>;
    fn get(&self, key: usize) -> Result<Tensor>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    map: BTreeMap<usize, Tensor>,
}

impl TargetStore for MemoryStore {
    fn put(&mut self, key: usize, value: Tensor) -> Result<()> {
        self.map.insert(key, value);
        Ok(())
    }

    fn get(&self, key: usize) -> Result<Tensor> {
        self.map
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Storage(format!("no target stored under key {key}")))
    }
}

/// Runs `graph` in float precision over `images` and stores every block
/// output plus the logits.
pub fn cache_targets(graph: &ModelGraph, images: &Tensor, batch: usize, store: &mut dyn TargetStore) -> Result<()> {
    let n = images.dim(0);
    let blocks = graph.num_blocks();
    let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); blocks + 1];
    let mut start = 0;
    while start < n {
        let count = batch.max(1).min(n - start);
        let out = graph.forward_fp(&images.slice_batch(start, count)?, true)?;
        for (k, t) in out.block_outputs.into_iter().flatten().enumerate() {
            parts[k].push(t);
        }
        parts[blocks].push(out.logits);
        start += count;
    }
    for (k, p) in parts.into_iter().enumerate() {
        store.put(k, Tensor::concat_batch(&p)?)?;
    }
    Ok(())
}

/// State carried across the sequential calibration of blocks.
pub struct CalibRun {
    pub store: Box<dyn TargetStore>,
    /// Output of the already-calibrated quantized prefix on the
    /// calibration images.
    pub feed: Tensor,
    pub reports: Vec<UnitReport>,
}

impl CalibRun {
    /// Caches targets from `fp` and starts the feed at the raw images.
    pub fn new(fp: &ModelGraph, images: &Tensor, mut store: Box<dyn TargetStore>) -> Result<Self> {
        cache_targets(fp, images, 64, store.as_mut())?;
        Ok(Self {
            store,
            feed: images.clone(),
            reports: Vec::new(),
        })
    }
}

/// Outcome of calibrating one block or the head.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct UnitReport {
    pub unit: String,
    pub measurement: Measure,
    /// Measurement of the stage term, when it is present.
    pub stage_measurement: Option<Measure>,
    pub init_loss: f32,
    pub final_loss: f32,
    pub iterations: usize,
    pub diverged: bool,
    /// Mini-batch objective at every iteration.
    pub loss_curve: Vec<f32>,
}

impl UnitReport {
    pub fn log_line(&self) -> String {
        format!(
            "calibrated {} measure={} stage={} init={:.6e} final={:.6e} iters={}{}",
            self.unit,
            self.measurement.name(),
            self.stage_measurement.map_or("none", Measure::name),
            self.init_loss,
            self.final_loss,
            self.iterations,
            if self.diverged { " diverged" } else { "" }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum ParamKind {
    Weight,
    Bias,
    WeightScale,
    ActEta,
    ActEps,
    AffineGain,
    AffineShift,
}

impl ParamKind {
    fn group(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::WeightScale => "weight_scale",
            ParamKind::ActEta | ParamKind::ActEps => "act_scale",
            ParamKind::AffineGain | ParamKind::AffineShift => "affine",
        }
    }
}

/// A named set of parameters sharing a learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: &'static str,
    pub lr: f32,
    pub members: usize,
}

fn group_lr(lr: &LearningRates, name: &str) -> f32 {
    match name {
        "weight" => lr.weight,
        "bias" => lr.bias,
        "weight_scale" => lr.weight_scale,
        "act_scale" => lr.act_scale,
        "affine" => lr.affine,
        _ => lr.others,
    }
}

/// What is being calibrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Block(BlockId),
    Head,
}

impl core::fmt::Display for Unit {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Unit::Block(id) => write!(f, "{id}"),
            Unit::Head => f.write_str("head"),
        }
    }
}

type Params = Vec<(ParamKind, Tensor)>;

fn scalar(v: f32) -> Tensor {
    Tensor::scalar(v)
}

fn vec_t(v: &[f32]) -> Result<Tensor> {
    Tensor::from_vec(v.to_vec())
}

fn read_params(graph: &ModelGraph, unit: Unit, qprep: bool) -> Result<Params> {
    let mut p = Vec::new();
    match unit {
        Unit::Block(id) => {
            let b = graph.block(id);
            let f = b.fused.as_ref().ok_or_else(|| Error::NotFused(id.to_string()))?;
            let q = b.quant.as_ref().ok_or_else(|| Error::Graph(format!("{id}: no quantizers")))?;
            p.push((ParamKind::Weight, f.weight.clone()));
            p.push((ParamKind::Bias, vec_t(&f.bias)?));
            p.push((ParamKind::WeightScale, vec_t(&q.weight.scales)?));
            p.push((ParamKind::ActEta, scalar(q.input.eta)));
            p.push((ParamKind::ActEps, scalar(q.input.eps)));
            if let Some(a) = b.affine.as_ref().filter(|a| a.enabled && qprep) {
                p.push((ParamKind::AffineGain, vec_t(&a.gain)?));
                p.push((ParamKind::AffineShift, vec_t(&a.shift)?));
            }
        }
        Unit::Head => {
            let h = &graph.head;
            let q = h.quant.as_ref().ok_or_else(|| Error::Graph("head: no quantizers".into()))?;
            p.push((ParamKind::Weight, h.weight.clone()));
            p.push((ParamKind::Bias, vec_t(&h.bias)?));
            p.push((ParamKind::WeightScale, vec_t(&q.weight.scales)?));
            p.push((ParamKind::ActEta, scalar(q.input.eta)));
            p.push((ParamKind::ActEps, scalar(q.input.eps)));
        }
    }
    Ok(p)
}

fn write_params(graph: &mut ModelGraph, unit: Unit, params: &Params) {
    for (kind, t) in params {
        let d = t.data();
        match unit {
            Unit::Block(id) => {
                let b = graph.block_mut(id);
                let f = b.fused.as_mut().expect("checked when read");
                let q = b.quant.as_mut().expect("checked when read");
                match kind {
                    ParamKind::Weight => f.weight = t.clone(),
                    ParamKind::Bias => f.bias = d.to_vec(),
                    ParamKind::WeightScale => q.weight.scales = d.to_vec(),
                    ParamKind::ActEta => q.input.eta = d[0],
                    ParamKind::ActEps => q.input.eps = d[0],
                    ParamKind::AffineGain => b.affine.as_mut().expect("checked when read").gain = d.to_vec(),
                    ParamKind::AffineShift => b.affine.as_mut().expect("checked when read").shift = d.to_vec(),
                }
            }
            Unit::Head => {
                let h = &mut graph.head;
                let q = h.quant.as_mut().expect("checked when read");
                match kind {
                    ParamKind::Weight => h.weight = t.clone(),
                    ParamKind::Bias => h.bias = d.to_vec(),
                    ParamKind::WeightScale => q.weight.scales = d.to_vec(),
                    ParamKind::ActEta => q.input.eta = d[0],
                    ParamKind::ActEps => q.input.eps = d[0],
                    ParamKind::AffineGain | ParamKind::AffineShift => {}
                }
            }
        }
    }
}

/// Smallest value kept for quantizer scales and multipliers after an
/// update, so that the quantizers stay defined.
const MIN_SCALE: f32 = 1e-8;

fn project(kind: ParamKind, t: &mut Tensor) {
    if matches!(kind, ParamKind::WeightScale | ParamKind::ActEta) {
        for v in t.data_mut() {
            *v = v.max(MIN_SCALE);
        }
    }
}

/// Builds the quantized forward of `unit` on the tape with trainable
/// parameters `vars` (indexed like the parameter list).
fn unit_on_tape(tape: &mut Tape, graph: &ModelGraph, unit: Unit, x: Var, params: &Params, vars: &[Var]) -> Result<Var> {
    let find = |k: ParamKind| params.iter().position(|(kind, _)| *kind == k).map(|i| vars[i]);
    let need = |k: ParamKind| find(k).ok_or_else(|| Error::Graph(format!("{unit}: missing parameter")));
    let (bits_w, act) = match unit {
        Unit::Block(id) => {
            let q = graph.block(id).quant.as_ref().expect("checked when read");
            (q.weight.bits, q.input)
        }
        Unit::Head => {
            let q = graph.head.quant.as_ref().expect("checked when read");
            (q.weight.bits, q.input)
        }
    };
    if !act.frozen {
        return Err(Error::Unfrozen);
    }
    let xq = tape.fake_quant_act(x, need(ParamKind::ActEta)?, need(ParamKind::ActEps)?, act.bits, act.x_min, act.x_max)?;
    let wq = tape.fake_quant_weight(need(ParamKind::Weight)?, need(ParamKind::WeightScale)?, bits_w)?;
    match unit {
        Unit::Block(id) => {
            let b = graph.block(id);
            let mut y = tape.conv2d(xq, wq, Some(need(ParamKind::Bias)?), b.stride, 1)?;
            if let (Some(g), Some(s)) = (find(ParamKind::AffineGain), find(ParamKind::AffineShift)) {
                y = tape.channel_affine(y, g, s)?;
            } else if let Some(a) = b.affine.as_ref().filter(|a| a.enabled) {
                let g = tape.constant(vec_t(&a.gain)?);
                let s = tape.constant(vec_t(&a.shift)?);
                y = tape.channel_affine(y, g, s)?;
            }
            Ok(tape.relu(y))
        }
        Unit::Head => tape.linear(xq, wq, Some(need(ParamKind::Bias)?)),
    }
}

/// Quantized forward of a frozen block whose input carries gradients.
struct FrozenBlock {
    wq: Tensor,
    bias: Tensor,
    stride: usize,
    act: fake_quant::ActQuantSpec,
    affine: Option<(Tensor, Tensor)>,
}

impl FrozenBlock {
    fn new(graph: &ModelGraph, id: BlockId) -> Result<Self> {
        let b = graph.block(id);
        let f = b.fused.as_ref().ok_or_else(|| Error::NotFused(id.to_string()))?;
        let q = b.quant.as_ref().ok_or_else(|| Error::Graph(format!("{id}: no quantizers")))?;
        Ok(Self {
            wq: fake_quant::fake_quant_weight(&f.weight, &q.weight.scales, q.weight.bits)?,
            bias: vec_t(&f.bias)?,
            stride: b.stride,
            act: q.input.spec()?,
            affine: match b.affine.as_ref().filter(|a| a.enabled) {
                Some(a) => Some((vec_t(&a.gain)?, vec_t(&a.shift)?)),
                None => None,
            },
        })
    }

    fn on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let eta = tape.constant(scalar(self.act.eta));
        let eps = tape.constant(scalar(self.act.eps));
        let xq = tape.fake_quant_act(x, eta, eps, self.act.bits, self.act.x_min, self.act.x_max)?;
        let w = tape.constant(self.wq.clone());
        let b = tape.constant(self.bias.clone());
        let mut y = tape.conv2d(xq, w, Some(b), self.stride, 1)?;
        if let Some((g, s)) = &self.affine {
            let g = tape.constant(g.clone());
            let s = tape.constant(s.clone());
            y = tape.channel_affine(y, g, s)?;
        }
        Ok(tape.relu(y))
    }
}

/// Objective of one unit: its own term plus, optionally, a stage term
/// computed through frozen successors.
struct Objective {
    unit: Unit,
    measure: Measure,
    target: Tensor,
    stage: Option<(Measure, Vec<FrozenBlock>, Vec<BlockId>, Tensor)>,
}

impl Objective {
    /// Loss node for a batch `x` given by `idx`.
    fn build(&self, tape: &mut Tape, graph: &ModelGraph, x: &Tensor, idx: &[usize], params: &Params, vars: &[Var]) -> Result<Var> {
        let xv = tape.constant(x.gather_batch(idx)?);
        let input = match self.unit {
            Unit::Head => tape.gap(xv)?,
            Unit::Block(_) => xv,
        };
        let out = unit_on_tape(tape, graph, self.unit, input, params, vars)?;
        let t = tape.constant(self.target.gather_batch(idx)?);
        let mut loss = self.measure.on_tape(tape, out, t)?;
        if let Some((m, frozen, _, stage_target)) = &self.stage {
            let mut h = out;
            for fb in frozen {
                h = fb.on_tape(tape, h)?;
            }
            let st = tape.constant(stage_target.gather_batch(idx)?);
            let sl = m.on_tape(tape, h, st)?;
            loss = tape.add(loss, sl)?;
        }
        Ok(loss)
    }

    /// Objective over the whole set with the graph's current parameters.
    fn full(&self, graph: &ModelGraph, x: &Tensor) -> Result<f32> {
        let n = x.dim(0);
        let mut sums = (0.0f64, 0.0f64);
        let mut start = 0;
        while start < n {
            let count = 64.min(n - start);
            let xb = x.slice_batch(start, count)?;
            let out = match self.unit {
                Unit::Block(id) => graph.block(id).forward(&xb, Precision::Quantized)?,
                Unit::Head => graph.head.forward(&xb, Precision::Quantized)?,
            };
            let w = count as f64;
            sums.0 += self.measure.eval(&out, &self.target.slice_batch(start, count)?)? as f64 * w;
            if let Some((m, _, ids, stage_target)) = &self.stage {
                let mut h = out;
                for id in ids {
                    h = graph.block(*id).forward(&h, Precision::Quantized)?;
                }
                sums.1 += m.eval(&h, &stage_target.slice_batch(start, count)?)? as f64 * w;
            }
            start += count;
        }
        Ok(((sums.0 + sums.1) / n as f64) as f32)
    }
}

/// The parameter groups used for `unit`.
pub fn param_groups(graph: &ModelGraph, unit: Unit, cfg: &CalibConfig) -> Result<Vec<ParamGroup>> {
    let params = read_params(graph, unit, cfg.qprep)?;
    let mut groups: Vec<ParamGroup> = Vec::new();
    for (kind, _) in &params {
        let name = kind.group();
        match groups.iter_mut().find(|g| g.name == name) {
            Some(g) => g.members += 1,
            None => groups.push(ParamGroup {
                name,
                lr: group_lr(&cfg.lr, name),
                members: 1,
            }),
        }
    }
    Ok(groups)
}

fn unit_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn optimize(graph: &mut ModelGraph, obj: &Objective, x: &Tensor, cfg: &CalibConfig, seed: u64) -> Result<UnitReport> {
    let n = x.dim(0);
    if n == 0 {
        return Err(Error::Empty("calibration set"));
    }
    let mut params = read_params(graph, obj.unit, cfg.qprep)?;
    let mut opt = OptimState::new(AdamConfig::default(), cfg.iterations);
    let slots: Vec<usize> = params
        .iter()
        .map(|(k, t)| opt.register(t.len(), group_lr(&cfg.lr, k.group())))
        .collect();
    let init_loss = obj.full(graph, x)?;
    let mut best = (init_loss, params.clone());
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut diverged = false;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for it in 0..cfg.iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let loss = obj.build(&mut tape, graph, x, &idx, &params, &vars)?;
        let lv = tape.value(loss).item();
        curve.push(lv);
        let grads = tape.backward(loss)?;
        let finite_grads = vars.iter().all(|v| grads.get(*v).is_none_or(Tensor::is_finite));
        if !lv.is_finite() || !finite_grads {
            diverged = true;
            break;
        }
        for ((slot, (kind, p)), v) in slots.iter().zip(params.iter_mut()).zip(&vars) {
            if let Some(g) = grads.get(*v) {
                opt.update(*slot, p, g)?;
                project(*kind, p);
            }
        }
        opt.advance();
        if (it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations {
            write_params(graph, obj.unit, &params);
            let l = obj.full(graph, x)?;
            if !l.is_finite() {
                diverged = true;
                break;
            }
            if l < best.0 {
                best = (l, params.clone());
            }
        }
    }
    write_params(graph, obj.unit, &best.1);
    Ok(UnitReport {
        unit: obj.unit.to_string(),
        measurement: obj.measure,
        stage_measurement: obj.stage.as_ref().map(|s| s.0),
        init_loss,
        final_loss: best.0,
        iterations: curve.len(),
        diverged,
        loss_curve: curve,
    })
}

/// Calibrates block `id` on the current feed, then advances the feed
/// through the calibrated block.
pub fn calibrate_block(graph: &mut ModelGraph, id: BlockId, run: &mut CalibRun, cfg: &CalibConfig) -> Result<UnitReport> {
    cfg.validate()?;
    let k = graph.flat_index(id);
    let stage_len = graph.stages[id.stage].blocks.len();
    let measure = cfg.block_measure_for(id.block, stage_len);
    let last_in_stage = id.block + 1 == stage_len;
    let stage = if cfg.abc && !last_in_stage {
        let ids: Vec<BlockId> = (id.block + 1..stage_len)
            .map(|b| BlockId { stage: id.stage, block: b })
            .collect();
        let frozen = ids.iter().map(|s| FrozenBlock::new(graph, *s)).collect::<Result<Vec<_>>>()?;
        let target = run.store.get(k + (stage_len - 1 - id.block))?;
        Some((cfg.stage_measure, frozen, ids, target))
    } else {
        None
    };
    let obj = Objective {
        unit: Unit::Block(id),
        measure,
        target: run.store.get(k)?,
        stage,
    };
    let feed = core::mem::replace(&mut run.feed, Tensor::scalar(0.0));
    let report = optimize(graph, &obj, &feed, cfg, unit_seed(cfg.seed, k));
    let report = match report {
        Ok(r) => r,
        Err(e) => {
            run.feed = feed;
            return Err(e);
        }
    };
    run.feed = forward_in_batches(&feed, |b| graph.block(id).forward(b, Precision::Quantized))?;
    run.reports.push(report.clone());
    Ok(report)
}

/// Calibrates the head against the float logits with the last-block
/// measurement.
pub fn calibrate_head(graph: &mut ModelGraph, run: &mut CalibRun, cfg: &CalibConfig) -> Result<UnitReport> {
    cfg.validate()?;
    let blocks = graph.num_blocks();
    let obj = Objective {
        unit: Unit::Head,
        measure: cfg.last_block_measure,
        target: run.store.get(blocks)?,
        stage: None,
    };
    let report = optimize(graph, &obj, &run.feed, cfg, unit_seed(cfg.seed, blocks))?;
    run.reports.push(report.clone());
    Ok(report)
}

fn forward_in_batches(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = x.dim(0);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let count = 64.min(n - start);
        parts.push(f(&x.slice_batch(start, count)?)?);
        start += count;
    }
    Tensor::concat_batch(&parts)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibReport {
    pub units: Vec<UnitReport>,
}

/// Calibrates every block in order, then the head. `log` receives one
/// line per calibrated unit.
pub fn calibrate_model(
    graph: &mut ModelGraph,
    fp: &ModelGraph,
    images: &Tensor,
    cfg: &CalibConfig,
    store: Box<dyn TargetStore>,
    log: &mut dyn FnMut(&str),
) -> Result<CalibReport> {
    cfg.validate()?;
    if !graph.is_fused() || graph.head.quant.is_none() {
        return Err(Error::Graph("calibration needs a fused graph with quantizers attached".into()));
    }
    let mut run = CalibRun::new(fp, images, store)?;
    for id in graph.block_ids() {
        let r = calibrate_block(graph, id, &mut run, cfg)?;
        log(&r.log_line());
    }
    let r = calibrate_head(graph, &mut run, cfg)?;
    log(&r.log_line());
    Ok(CalibReport { units: run.reports })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalMetrics {
    pub samples: usize,
    pub top1: f32,
    /// Mean absolute / squared difference of each block output from the
    /// reference model's, when a reference is given.
    pub per_block_mae: Vec<f32>,
    pub per_block_mse: Vec<f32>,
}

pub fn evaluate(
    graph: &ModelGraph,
    precision: Precision,
    reference: Option<&ModelGraph>,
    images: &Tensor,
    labels: &[u32],
) -> Result<EvalMetrics> {
    let n = images.dim(0);
    if n == 0 || labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            dim: "label count",
            expected: n,
            got: labels.len(),
        });
    }
    let blocks = graph.num_blocks();
    let mut correct = 0usize;
    let (mut mae, mut mse) = (vec![0.0f64; blocks], vec![0.0f64; blocks]);
    let mut start = 0;
    while start < n {
        let count = 64.min(n - start);
        let xb = images.slice_batch(start, count)?;
        let out = graph.forward(&xb, precision, reference.is_some())?;
        correct += argmax_rows(&out.logits)
            .iter()
            .zip(&labels[start..start + count])
            .filter(|(p, l)| **p == **l as usize)
            .count();
        if let Some(r) = reference {
            let ro = r.forward_fp(&xb, true)?;
            let (a, b) = (out.block_outputs.unwrap_or_default(), ro.block_outputs.unwrap_or_default());
            for k in 0..blocks {
                mae[k] += ops::mae(&a[k], &b[k])? as f64 * count as f64;
                mse[k] += ops::mse(&a[k], &b[k])? as f64 * count as f64;
            }
        }
        start += count;
    }
    let avg = |v: Vec<f64>| -> Vec<f32> {
        if reference.is_some() {
            v.into_iter().map(|s| (s / n as f64) as f32).collect()
        } else {
            Vec::new()
        }
    };
    Ok(EvalMetrics {
        samples: n,
        top1: correct as f32 / n as f32,
        per_block_mae: avg(mae),
        per_block_mse: avg(mse),
    })
}

/// Index of the largest entry of each row; the first one on ties.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect()
}
