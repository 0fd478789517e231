//! Stage / block / branch representation of a reparameterized VGG-style
//! network, with float and simulated-quantization forward passes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fake_quant;
use crate::fusion::{FusedConv, QPRepAffine};
use crate::ops;
use crate::quant::{ActQuantParams, WeightQuantParams};
use crate::tensor::Tensor;

pub const DEFAULT_BN_EPS: f32 = 1e-5;

/// Where batch normalization sits relative to the branch sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum NormPlacement {
    /// One BN per branch, applied before the sum.
    PreAdd,
    /// A single BN applied to the branch sum.
    PostAdd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum BranchKind {
    #[cfg_attr(feature = "serde", serde(rename = "conv3x3"))]
    Conv3x3,
    #[cfg_attr(feature = "serde", serde(rename = "conv1x1"))]
    Conv1x1,
    #[cfg_attr(feature = "serde", serde(rename = "identity"))]
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormStats {
    pub fn identity(channels: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        for (len, dim) in [
            (self.beta.len(), "beta length"),
            (self.running_mean.len(), "running_mean length"),
            (self.running_var.len(), "running_var length"),
        ] {
            if len != c {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    dim,
                    expected: c,
                    got: len,
                });
            }
        }
        if let Some((channel, &value)) = self.running_var.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(Error::NegativeVariance { channel, value });
        }
        Ok(())
    }

    /// Inference-mode per-channel `(gain, shift)`.
    pub fn gain_shift(&self) -> (Vec<f32>, Vec<f32>) {
        let gain: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g / libm::sqrtf(v + self.eps))
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.running_mean)
            .zip(&gain)
            .map(|((&b, &m), &k)| b - k * m)
            .collect();
        (gain, shift)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (gain, shift) = self.gain_shift();
        ops::channel_affine(x, &gain, &shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBranch {
    /// `[O, I, K, K]`, no bias.
    pub weight: Tensor,
    pub bn: Option<BatchNormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityBranch {
    pub bn: Option<BatchNormStats>,
}

/// Quantizers attached to a fused block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockQuant {
    pub weight: WeightQuantParams,
    pub input: ActQuantParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub norm: NormPlacement,
    pub bn_eps: f32,
    pub conv3x3: Option<ConvBranch>,
    pub conv1x1: Option<ConvBranch>,
    pub identity: Option<IdentityBranch>,
    pub post_bn: Option<BatchNormStats>,
    pub fused: Option<FusedConv>,
    pub affine: Option<QPRepAffine>,
    pub quant: Option<BlockQuant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Float,
    /// Simulated quantization through the attached quantizers.
    Quantized,
}

impl Block {
    pub fn branch_kinds(&self) -> Vec<BranchKind> {
        let mut k = Vec::new();
        if self.conv3x3.is_some() {
            k.push(BranchKind::Conv3x3);
        }
        if self.conv1x1.is_some() {
            k.push(BranchKind::Conv1x1);
        }
        if self.identity.is_some() {
            k.push(BranchKind::Identity);
        }
        k
    }

    pub fn is_fused(&self) -> bool {
        self.fused.is_some()
    }

    pub fn validate(&self, label: &str) -> Result<()> {
        let g = |msg: String| Error::Graph(format!("{label}: {msg}"));
        if self.stride == 0 {
            return Err(g("stride must be positive".into()));
        }
        if self.identity.is_some() && (self.stride != 1 || self.in_channels != self.out_channels) {
            return Err(g(
                "identity branch requires stride 1 and equal in/out channels".into(),
            ));
        }
        if self.fused.is_none() && self.branch_kinds().is_empty() {
            return Err(g("block has neither branches nor a fused convolution".into()));
        }
        if self.fused.is_some() && !self.branch_kinds().is_empty() {
            return Err(g("fused block still carries branches".into()));
        }
        for (br, k) in [(&self.conv3x3, 3), (&self.conv1x1, 1)] {
            if let Some(br) = br {
                let expected = [self.out_channels, self.in_channels, k, k];
                if br.weight.shape() != expected {
                    return Err(g(format!(
                        "{k}x{k} branch weight shape {:?}, expected {expected:?}",
                        br.weight.shape()
                    )));
                }
            }
        }
        let branch_bns = [
            self.conv3x3.as_ref().and_then(|b| b.bn.as_ref()),
            self.conv1x1.as_ref().and_then(|b| b.bn.as_ref()),
            self.identity.as_ref().and_then(|b| b.bn.as_ref()),
        ];
        if self.norm == NormPlacement::PostAdd && branch_bns.iter().any(Option::is_some) {
            return Err(g("post-add placement forbids per-branch batch norms".into()));
        }
        if self.norm == NormPlacement::PreAdd && self.post_bn.is_some() {
            return Err(g("pre-add placement forbids a post-add batch norm".into()));
        }
        for bn in branch_bns.into_iter().flatten().chain(self.post_bn.as_ref()) {
            bn.validate()?;
            if bn.channels() != self.out_channels {
                return Err(g("batch norm channel count differs from output channels".into()));
            }
        }
        if let Some(f) = &self.fused {
            let expected = [self.out_channels, self.in_channels, 3, 3];
            if f.weight.shape() != expected || f.bias.len() != self.out_channels {
                return Err(g("fused convolution shape mismatch".into()));
            }
        }
        if let Some(a) = &self.affine {
            if a.gain.len() != self.out_channels || a.shift.len() != self.out_channels {
                return Err(g("affine length differs from output channels".into()));
            }
        }
        if let Some(q) = &self.quant {
            if q.weight.scales.len() != self.out_channels {
                return Err(g("weight scale count differs from output channels".into()));
            }
        }
        Ok(())
    }

    /// Sum of branch outputs before the activation (float, unfused path).
    pub fn branch_sum(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        let mut push = |t: Tensor| -> Result<()> {
            acc = Some(match acc.take() {
                Some(a) => ops::add(&a, &t)?,
                None => t,
            });
            Ok(())
        };
        if let Some(br) = &self.conv3x3 {
            let y = ops::conv2d(x, &br.weight, None, self.stride, 1)?;
            push(match &br.bn {
                Some(bn) => bn.apply(&y)?,
                None => y,
            })?;
        }
        if let Some(br) = &self.conv1x1 {
            let y = ops::conv2d(x, &br.weight, None, self.stride, 0)?;
            push(match &br.bn {
                Some(bn) => bn.apply(&y)?,
                None => y,
            })?;
        }
        if let Some(br) = &self.identity {
            push(match &br.bn {
                Some(bn) => bn.apply(x)?,
                None => x.clone(),
            })?;
        }
        let sum = acc.ok_or_else(|| Error::Graph("block has no branches".into()))?;
        match &self.post_bn {
            Some(bn) => bn.apply(&sum),
            None => Ok(sum),
        }
    }

    /// Block output (post-activation).
    pub fn forward(&self, x: &Tensor, precision: Precision) -> Result<Tensor> {
        let pre = match (&self.fused, precision) {
            (None, Precision::Float) => self.branch_sum(x)?,
            (None, Precision::Quantized) => {
                return Err(Error::NotFused("quantized forward".into()));
            }
            (Some(f), Precision::Float) => {
                let y = ops::conv2d(x, &f.weight, Some(&f.bias), self.stride, 1)?;
                self.apply_affine(y)?
            }
            (Some(f), Precision::Quantized) => {
                let q = self
                    .quant
                    .as_ref()
                    .ok_or_else(|| Error::Graph("quantized forward without quantizers".into()))?;
                let xq = fake_quant::fake_quant_act(x, &q.input.spec()?)?;
                let wq = fake_quant::fake_quant_weight(&f.weight, &q.weight.scales, q.weight.bits)?;
                let y = ops::conv2d(&xq, &wq, Some(&f.bias), self.stride, 1)?;
                self.apply_affine(y)?
            }
        };
        Ok(ops::relu(&pre))
    }

    fn apply_affine(&self, y: Tensor) -> Result<Tensor> {
        match &self.affine {
            Some(a) if a.enabled => ops::channel_affine(&y, &a.gain, &a.shift),
            _ => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadQuant {
    /// Tensor-wise symmetric: a single scale.
    pub weight: WeightQuantParams,
    pub input: ActQuantParams,
}

/// Global average pooling followed by a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `[classes, features]`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub quant: Option<HeadQuant>,
}

impl Head {
    pub fn features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn classes(&self) -> usize {
        self.weight.dim(0)
    }

    /// Logits from pooled features `[N, C]`.
    pub fn forward_pooled(&self, pooled: &Tensor, precision: Precision) -> Result<Tensor> {
        match precision {
            Precision::Float => ops::linear(pooled, &self.weight, Some(&self.bias)),
            Precision::Quantized => {
                let q = self
                    .quant
                    .as_ref()
                    .ok_or_else(|| Error::Graph("quantized forward without head quantizers".into()))?;
                let xq = fake_quant::fake_quant_act(pooled, &q.input.spec()?)?;
                let wq = fake_quant::fake_quant_weight(&self.weight, &q.weight.scales, q.weight.bits)?;
                ops::linear(&xq, &wq, Some(&self.bias))
            }
        }
    }

    pub fn forward(&self, features: &Tensor, precision: Precision) -> Result<Tensor> {
        self.forward_pooled(&ops::gap(features)?, precision)
    }
}

/// Position of a block: stage index and index within the stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub stage: usize,
    pub block: usize,
}

impl core::fmt::Display for BlockId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "s{}.b{}", self.stage, self.block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    /// `(C, H, W)` of a single input.
    pub input: [usize; 3],
    pub stages: Vec<Stage>,
    pub head: Head,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Post-activation block outputs in flat block order, when cached.
    pub block_outputs: Option<Vec<Tensor>>,
}

impl ModelGraph {
    pub fn block_ids(&self) -> Vec<BlockId> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(s, st)| (0..st.blocks.len()).map(move |b| BlockId { stage: s, block: b }))
            .collect()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn block(&self, id: BlockId) -> &Block {
        &self.stages[id.stage].blocks[id.block]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut Block {
        &mut self.stages[id.stage].blocks[id.block]
    }

    /// Flat index of a block.
    pub fn flat_index(&self, id: BlockId) -> usize {
        self.stages[..id.stage].iter().map(|s| s.blocks.len()).sum::<usize>() + id.block
    }

    /// Flat index of the last block of each stage.
    pub fn stage_output_indices(&self) -> Vec<usize> {
        let mut acc = 0;
        self.stages
            .iter()
            .map(|s| {
                acc += s.blocks.len();
                acc - 1
            })
            .collect()
    }

    pub fn is_fused(&self) -> bool {
        self.stages.iter().flat_map(|s| &s.blocks).all(Block::is_fused)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Graph("model has no stages".into()));
        }
        let mut channels = self.input[0];
        for id in self.block_ids() {
            let b = self.block(id);
            let label = id.to_string();
            b.validate(&label)?;
            if b.in_channels != channels {
                return Err(Error::Graph(format!(
                    "{label}: input channels {} do not chain from previous output {channels}",
                    b.in_channels
                )));
            }
            if id.block > 0 && (b.stride != 1 || b.in_channels != b.out_channels) {
                return Err(Error::Graph(format!(
                    "{label}: only the first block of a stage may change stride or width"
                )));
            }
            channels = b.out_channels;
        }
        if self.head.features() != channels || self.head.bias.len() != self.head.classes() {
            return Err(Error::Graph(format!(
                "head expects {} features, network produces {channels}",
                self.head.features()
            )));
        }
        if let Some(q) = &self.head.quant {
            if q.weight.scales.len() != 1 {
                return Err(Error::Graph("head weight quantizer must be tensor-wise".into()));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.nchw()?;
        for (dim, expected, got) in [("channels", self.input[0], c), ("height", self.input[1], h), ("width", self.input[2], w)] {
            if expected != got {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    dim,
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, precision: Precision, cache: bool) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut outputs = cache.then(Vec::new);
        let mut h = x.clone();
        for stage in &self.stages {
            for block in &stage.blocks {
                h = block.forward(&h, precision)?;
                if let Some(o) = outputs.as_mut() {
                    o.push(h.clone());
                }
            }
        }
        let logits = self.head.forward(&h, precision)?;
        Ok(ForwardOutput {
            logits,
            block_outputs: outputs,
        })
    }

    pub fn forward_fp(&self, x: &Tensor, cache: bool) -> Result<ForwardOutput> {
        self.forward(x, Precision::Float, cache)
    }

    /// Runs blocks with flat indices in `range` on `x`.
    pub fn forward_blocks(&self, x: &Tensor, range: core::ops::Range<usize>, precision: Precision) -> Result<Tensor> {
        let ids = self.block_ids();
        let mut h = x.clone();
        for id in &ids[range] {
            h = self.block(*id).forward(&h, precision)?;
        }
        Ok(h)
    }

    /// Names and values of every stored tensor in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let bn_tensors = |out: &mut Vec<(String, Tensor)>, prefix: &str, bn: &BatchNormStats| {
            for (field, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("mean", &bn.running_mean),
                ("var", &bn.running_var),
            ] {
                out.push((format!("{prefix}.{field}"), vec_tensor(v)));
            }
        };
        for id in self.block_ids() {
            let b = self.block(id);
            let p = id.to_string();
            if let Some(br) = &b.conv3x3 {
                out.push((format!("{p}.conv3x3.weight"), br.weight.clone()));
                if let Some(bn) = &br.bn {
                    bn_tensors(&mut out, &format!("{p}.conv3x3.bn"), bn);
                }
            }
            if let Some(br) = &b.conv1x1 {
                out.push((format!("{p}.conv1x1.weight"), br.weight.clone()));
                if let Some(bn) = &br.bn {
                    bn_tensors(&mut out, &format!("{p}.conv1x1.bn"), bn);
                }
            }
            if let Some(bn) = b.identity.as_ref().and_then(|i| i.bn.as_ref()) {
                bn_tensors(&mut out, &format!("{p}.identity.bn"), bn);
            }
            if let Some(bn) = &b.post_bn {
                bn_tensors(&mut out, &format!("{p}.post_bn"), bn);
            }
            if let Some(f) = &b.fused {
                out.push((format!("{p}.fused.weight"), f.weight.clone()));
                out.push((format!("{p}.fused.bias"), vec_tensor(&f.bias)));
            }
            if let Some(a) = &b.affine {
                out.push((format!("{p}.affine.gain"), vec_tensor(&a.gain)));
                out.push((format!("{p}.affine.shift"), vec_tensor(&a.shift)));
            }
            if let Some(q) = &b.quant {
                out.push((format!("{QUANT_PREFIX}{p}.w_scale"), vec_tensor(&q.weight.scales)));
                out.push((format!("{QUANT_PREFIX}{p}.act"), q.input.to_tensor()));
            }
        }
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), vec_tensor(&self.head.bias)));
        if let Some(q) = &self.head.quant {
            out.push((format!("{QUANT_PREFIX}head.w_scale"), vec_tensor(&q.weight.scales)));
            out.push((format!("{QUANT_PREFIX}head.act"), q.input.to_tensor()));
        }
        out
    }

    /// Overwrites every stored tensor from `tensors`. Each name reported by
    /// [`ModelGraph::named_tensors`] must be present with a matching shape.
    pub fn assign_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.named_tensors();
        for (name, cur) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing tensor {name}")))?;
            if t.shape() != cur.shape() {
                return Err(Error::InvalidArgument(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        let get = |n: String| tensors[&n].clone();
        let getv = |n: String| tensors[&n].data().to_vec();
        let load_bn = |prefix: String, bn: &mut BatchNormStats| {
            bn.gamma = getv(format!("{prefix}.gamma"));
            bn.beta = getv(format!("{prefix}.beta"));
            bn.running_mean = getv(format!("{prefix}.mean"));
            bn.running_var = getv(format!("{prefix}.var"));
        };
        for id in self.block_ids() {
            let p = id.to_string();
            let b = self.block_mut(id);
            if let Some(br) = &mut b.conv3x3 {
                br.weight = get(format!("{p}.conv3x3.weight"));
                if let Some(bn) = &mut br.bn {
                    load_bn(format!("{p}.conv3x3.bn"), bn);
                }
            }
            if let Some(br) = &mut b.conv1x1 {
                br.weight = get(format!("{p}.conv1x1.weight"));
                if let Some(bn) = &mut br.bn {
                    load_bn(format!("{p}.conv1x1.bn"), bn);
                }
            }
            if let Some(bn) = b.identity.as_mut().and_then(|i| i.bn.as_mut()) {
                load_bn(format!("{p}.identity.bn"), bn);
            }
            if let Some(bn) = &mut b.post_bn {
                load_bn(format!("{p}.post_bn"), bn);
            }
            if let Some(f) = &mut b.fused {
                f.weight = get(format!("{p}.fused.weight"));
                f.bias = getv(format!("{p}.fused.bias"));
            }
            if let Some(a) = &mut b.affine {
                a.gain = getv(format!("{p}.affine.gain"));
                a.shift = getv(format!("{p}.affine.shift"));
            }
            if let Some(q) = &mut b.quant {
                q.weight.scales = getv(format!("{QUANT_PREFIX}{p}.w_scale"));
                q.input.load_tensor(&get(format!("{QUANT_PREFIX}{p}.act")))?;
            }
        }
        self.head.weight = get("head.weight".into());
        self.head.bias = getv("head.bias".into());
        if let Some(q) = &mut self.head.quant {
            q.weight.scales = getv(format!("{QUANT_PREFIX}head.w_scale"));
            q.input.load_tensor(&get(format!("{QUANT_PREFIX}head.act")))?;
        }
        self.validate()
    }
}

/// Reserved name prefix for quantizer state stored alongside weights.
pub const QUANT_PREFIX: &str = "__quant.";

pub(crate) fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::from_vec(v.to_vec()).expect("non-empty parameter vector")
}
