//! Float training of the multi-branch model with batch statistics.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{BatchNormStats, BlockId, ModelGraph, NormPlacement};
use crate::ops::BatchStats;
use crate::optim::{AdamConfig, OptimState};
use crate::tensor::Tensor;

/// Batch statistics of one norm in one block, for the running averages.
type BnStats = (BlockId, Bn, BatchStats);

/// Scales the batch-norm affine of a few channels partway through training,
/// giving those channels outsized activations.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OutlierPlant {
    pub blocks: Vec<(usize, usize)>,
    pub channels_per_block: usize,
    pub gain_min: f32,
    pub gain_max: f32,
    /// Fraction of the total steps after which the gains are applied.
    pub at_fraction: f32,
}

impl OutlierPlant {
    /// Two channels in an interior block of each of the two middle stages.
    pub fn desk_default() -> Self {
        Self {
            blocks: vec![(2, 1), (3, 2)],
            channels_per_block: 2,
            gain_min: 20.0,
            gain_max: 50.0,
            at_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub bn_momentum: f32,
    pub seed: u64,
    pub plant: Option<OutlierPlant>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 64,
            lr: 2e-3,
            bn_momentum: 0.1,
            seed: 42,
            plant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlantedChannel {
    pub block: String,
    pub channel: usize,
    pub gain: f32,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainReport {
    pub steps: usize,
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f32>,
    pub planted: Vec<PlantedChannel>,
}

/// He-normal convolution weights, small-normal head, identity batch norms.
pub fn init_weights(graph: &mut ModelGraph, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |t: &mut Tensor, std: f32| {
        let d = Normal::new(0.0f32, std).expect("positive std");
        for v in t.data_mut() {
            *v = d.sample(&mut rng);
        }
    };
    for id in graph.block_ids() {
        let b = graph.block_mut(id);
        for br in [&mut b.conv3x3, &mut b.conv1x1].into_iter().flatten() {
            let fan_in = br.weight.len() / br.weight.dim(0);
            fill(&mut br.weight, libm::sqrtf(2.0 / fan_in as f32));
        }
    }
    let fan_in = graph.head.features();
    fill(&mut graph.head.weight, libm::sqrtf(1.0 / fan_in as f32));
    graph.head.bias.fill(0.0);
    Ok(())
}

/// Where a trainable tensor lives in the graph.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Conv3(BlockId),
    Conv1(BlockId),
    Gamma(BlockId, Bn),
    Beta(BlockId, Bn),
    HeadWeight,
    HeadBias,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bn {
    Conv3,
    Conv1,
    Identity,
    Post,
}

fn bn_mut(graph: &mut ModelGraph, id: BlockId, which: Bn) -> Option<&mut BatchNormStats> {
    let b = graph.block_mut(id);
    match which {
        Bn::Conv3 => b.conv3x3.as_mut().and_then(|x| x.bn.as_mut()),
        Bn::Conv1 => b.conv1x1.as_mut().and_then(|x| x.bn.as_mut()),
        Bn::Identity => b.identity.as_mut().and_then(|x| x.bn.as_mut()),
        Bn::Post => b.post_bn.as_mut(),
    }
}

fn slots(graph: &ModelGraph) -> Vec<Slot> {
    let mut s = Vec::new();
    for id in graph.block_ids() {
        let b = graph.block(id);
        let mut bns = Vec::new();
        if let Some(br) = &b.conv3x3 {
            s.push(Slot::Conv3(id));
            if br.bn.is_some() {
                bns.push(Bn::Conv3);
            }
        }
        if let Some(br) = &b.conv1x1 {
            s.push(Slot::Conv1(id));
            if br.bn.is_some() {
                bns.push(Bn::Conv1);
            }
        }
        if b.identity.as_ref().is_some_and(|i| i.bn.is_some()) {
            bns.push(Bn::Identity);
        }
        if b.post_bn.is_some() {
            bns.push(Bn::Post);
        }
        for which in bns {
            s.push(Slot::Gamma(id, which));
            s.push(Slot::Beta(id, which));
        }
    }
    s.push(Slot::HeadWeight);
    s.push(Slot::HeadBias);
    s
}

fn read(graph: &mut ModelGraph, slot: Slot) -> Result<Tensor> {
    Ok(match slot {
        Slot::Conv3(id) => graph.block(id).conv3x3.as_ref().expect("listed").weight.clone(),
        Slot::Conv1(id) => graph.block(id).conv1x1.as_ref().expect("listed").weight.clone(),
        Slot::Gamma(id, w) => Tensor::from_vec(bn_mut(graph, id, w).expect("listed").gamma.clone())?,
        Slot::Beta(id, w) => Tensor::from_vec(bn_mut(graph, id, w).expect("listed").beta.clone())?,
        Slot::HeadWeight => graph.head.weight.clone(),
        Slot::HeadBias => Tensor::from_vec(graph.head.bias.clone())?,
    })
}

fn write(graph: &mut ModelGraph, slot: Slot, t: &Tensor) {
    match slot {
        Slot::Conv3(id) => graph.block_mut(id).conv3x3.as_mut().expect("listed").weight = t.clone(),
        Slot::Conv1(id) => graph.block_mut(id).conv1x1.as_mut().expect("listed").weight = t.clone(),
        Slot::Gamma(id, w) => bn_mut(graph, id, w).expect("listed").gamma = t.data().to_vec(),
        Slot::Beta(id, w) => bn_mut(graph, id, w).expect("listed").beta = t.data().to_vec(),
        Slot::HeadWeight => graph.head.weight = t.clone(),
        Slot::HeadBias => graph.head.bias = t.data().to_vec(),
    }
}

/// Training-mode forward on the tape; returns the loss and the batch
/// statistics of every batch norm.
fn forward_train(
    tape: &mut Tape,
    graph: &ModelGraph,
    slots: &[Slot],
    vars: &[Var],
    x: Tensor,
    labels: &[u32],
) -> Result<(Var, Vec<BnStats>)> {
    let var = |s: Slot| vars[slots.iter().position(|x| *x == s).expect("listed")];
    let mut stats = Vec::new();
    let mut h = tape.constant(x);
    for id in graph.block_ids() {
        let b = graph.block(id);
        let pre = b.norm == NormPlacement::PreAdd;
        let mut terms = Vec::new();
        let norm = |tape: &mut Tape, y: Var, which: Bn, stats: &mut Vec<_>| -> Result<Var> {
            let (o, st) = tape.batch_norm(y, var(Slot::Gamma(id, which)), var(Slot::Beta(id, which)), b.bn_eps)?;
            stats.push((id, which, st));
            Ok(o)
        };
        if b.conv3x3.is_some() {
            let y = tape.conv2d(h, var(Slot::Conv3(id)), None, b.stride, 1)?;
            terms.push(if pre { norm(tape, y, Bn::Conv3, &mut stats)? } else { y });
        }
        if b.conv1x1.is_some() {
            let y = tape.conv2d(h, var(Slot::Conv1(id)), None, b.stride, 0)?;
            terms.push(if pre { norm(tape, y, Bn::Conv1, &mut stats)? } else { y });
        }
        if b.identity.is_some() {
            terms.push(if pre { norm(tape, h, Bn::Identity, &mut stats)? } else { h });
        }
        let mut sum = terms[0];
        for t in &terms[1..] {
            sum = tape.add(sum, *t)?;
        }
        if !pre {
            sum = norm(tape, sum, Bn::Post, &mut stats)?;
        }
        h = tape.relu(sum);
    }
    let pooled = tape.gap(h)?;
    let logits = tape.linear(pooled, var(Slot::HeadWeight), Some(var(Slot::HeadBias)))?;
    Ok((tape.softmax_xent(logits, labels)?, stats))
}

fn update_running(graph: &mut ModelGraph, stats: Vec<(BlockId, Bn, BatchStats)>, momentum: f32) {
    for (id, which, st) in stats {
        let bn = bn_mut(graph, id, which).expect("listed");
        let unbias = if st.count > 1 { st.count as f32 / (st.count - 1) as f32 } else { 1.0 };
        for c in 0..bn.gamma.len() {
            bn.running_mean[c] = (1.0 - momentum) * bn.running_mean[c] + momentum * st.mean[c];
            bn.running_var[c] = (1.0 - momentum) * bn.running_var[c] + momentum * st.var[c] * unbias;
        }
    }
}

fn plant(graph: &mut ModelGraph, plant: &OutlierPlant, rng: &mut ChaCha8Rng) -> Result<Vec<PlantedChannel>> {
    let mut out = Vec::new();
    for &(stage, block) in &plant.blocks {
        if stage >= graph.stages.len() || block >= graph.stages[stage].blocks.len() {
            return Err(Error::InvalidArgument(format!("no block s{stage}.b{block} to plant outliers in")));
        }
        let id = BlockId { stage, block };
        let c = graph.block(id).out_channels;
        let mut channels: Vec<usize> = (0..c).collect();
        channels.shuffle(rng);
        for &ch in channels.iter().take(plant.channels_per_block) {
            let gain = rng.random_range(plant.gain_min..=plant.gain_max);
            for which in [Bn::Conv3, Bn::Conv1, Bn::Identity, Bn::Post] {
                if let Some(bn) = bn_mut(graph, id, which) {
                    bn.gamma[ch] *= gain;
                    bn.beta[ch] *= gain;
                }
            }
            out.push(PlantedChannel {
                block: id.to_string(),
                channel: ch,
                gain,
            });
        }
    }
    Ok(out)
}

/// Trains the unfused graph in place. `log` receives one line per epoch.
pub fn train(graph: &mut ModelGraph, data: &Dataset, cfg: &TrainConfig, log: &mut dyn FnMut(&str)) -> Result<TrainReport> {
    if graph.is_fused() {
        return Err(Error::Graph("training needs the multi-branch form".into()));
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Empty("training set"));
    }
    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let slots = slots(graph);
    let mut params = slots.iter().map(|s| read(graph, *s)).collect::<Result<Vec<_>>>()?;
    let mut opt = OptimState::new(AdamConfig::default(), total);
    let ids: Vec<usize> = params.iter().map(|p| opt.register(p.len(), cfg.lr)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plant_step = cfg.plant.as_ref().map(|p| (p.at_fraction.clamp(0.0, 1.0) * total as f32) as usize);
    let mut planted = Vec::new();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut recent: Vec<f32> = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            if plant_step == Some(step) {
                for (s, p) in slots.iter().zip(&params) {
                    write(graph, *s, p);
                }
                planted = plant(graph, cfg.plant.as_ref().expect("checked"), &mut rng)?;
                params = slots.iter().map(|s| read(graph, *s)).collect::<Result<Vec<_>>>()?;
            }
            let x = data.images.gather_batch(chunk)?;
            let labels: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let (loss, stats) = forward_train(&mut tape, graph, &slots, &vars, x, &labels)?;
            let lv = tape.value(loss).item();
            recent.push(lv);
            if recent.len() > 8 {
                recent.remove(0);
            }
            if !lv.is_finite() {
                return Err(Error::Diverged { step, recent });
            }
            let grads = tape.backward(loss)?;
            for ((slot, p), v) in ids.iter().zip(params.iter_mut()).zip(&vars) {
                if let Some(g) = grads.get(*v) {
                    opt.update(*slot, p, g)?;
                }
            }
            opt.advance();
            update_running(graph, stats, cfg.bn_momentum);
            sum += lv as f64 * chunk.len() as f64;
            step += 1;
        }
        let mean = (sum / n as f64) as f32;
        epoch_loss.push(mean);
        log(&format!("epoch {} loss {:.4}", epoch + 1, mean));
    }
    for (s, p) in slots.iter().zip(&params) {
        write(graph, *s, p);
    }
    graph.validate()?;
    Ok(TrainReport {
        steps: step,
        epoch_loss,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::BranchKind;
    use crate::topology::Topology;

    #[test]
    fn slots_cover_branches() {
        let g = Topology::single_block(3, 3, 2, &[BranchKind::Conv3x3, BranchKind::Conv1x1, BranchKind::Identity])
            .build()
            .unwrap();
        // two conv weights, three gamma/beta pairs, head weight and bias
        assert_eq!(slots(&g).len(), 2 + 6 + 2);
    }
}
