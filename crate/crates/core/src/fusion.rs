//! Branch fusion, the per-channel affine inserted after fused convolutions,
//! and folding of that affine into integer deployment parameters.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fake_quant::{self, ActQuantSpec};
use crate::graph::{BatchNormStats, Block, BlockId, BranchKind, ModelGraph, NormPlacement};
use crate::ops;
use crate::tensor::Tensor;

/// Single 3×3 convolution replacing a block's branches.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedConv {
    pub weight: Tensor,
    pub bias: Vec<f32>,
    /// Branches that contributed.
    pub sources: Vec<BranchKind>,
}

/// Per-output-channel `y = gain * x + shift` applied after the fused conv.
#[derive(Debug, Clone, PartialEq)]
pub struct QPRepAffine {
    pub gain: Vec<f32>,
    pub shift: Vec<f32>,
    pub enabled: bool,
}

impl QPRepAffine {
    pub fn identity(channels: usize) -> Self {
        Self {
            gain: vec![1.0; channels],
            shift: vec![0.0; channels],
            enabled: true,
        }
    }
}

/// Folds inference-mode batch norm into a convolution.
pub fn fold_bn(weight: &Tensor, bias: Option<&[f32]>, bn: &BatchNormStats) -> Result<(Tensor, Vec<f32>)> {
    bn.validate()?;
    let o = weight.dim(0);
    if bn.channels() != o {
        return Err(Error::ShapeMismatch {
            op: "fold_bn",
            dim: "output channels",
            expected: o,
            got: bn.channels(),
        });
    }
    if let Some(b) = bias {
        if b.len() != o {
            return Err(Error::ShapeMismatch {
                op: "fold_bn",
                dim: "bias length",
                expected: o,
                got: b.len(),
            });
        }
    }
    let per = weight.len() / o;
    let mut w = weight.clone();
    let mut out_bias = Vec::with_capacity(o);
    for c in 0..o {
        let k = bn.gamma[c] / libm::sqrtf(bn.running_var[c] + bn.eps);
        for v in &mut w.data_mut()[c * per..(c + 1) * per] {
            *v *= k;
        }
        let b0 = bias.map_or(0.0, |b| b[c]);
        out_bias.push(bn.beta[c] + k * (b0 - bn.running_mean[c]));
    }
    Ok((w, out_bias))
}

/// Embeds a 1×1 kernel at the centre of a zero 3×3 kernel.
pub fn pad_1x1_to_3x3(w: &Tensor) -> Result<Tensor> {
    let shape = w.shape();
    if w.rank() != 4 || shape[2] != 1 || shape[3] != 1 {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    let (o, i) = (shape[0], shape[1]);
    let mut out = Tensor::zeros(&[o, i, 3, 3])?;
    for (idx, &v) in w.data().iter().enumerate() {
        out.data_mut()[idx * 9 + 4] = v;
    }
    Ok(out)
}

/// 3×3 kernel implementing the identity map (with padding 1).
pub fn identity_to_conv(channels: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[channels, channels, 3, 3])?;
    for c in 0..channels {
        out.data_mut()[(c * channels + c) * 9 + 4] = 1.0;
    }
    Ok(out)
}

fn missing_bn(label: &str, what: &'static str) -> Error {
    Error::MissingBatchNorm {
        block: label.to_string(),
        what,
    }
}

/// Replaces the branches of `block` with one 3×3 convolution. When
/// `insert_affine` is set an identity-initialized affine follows it.
pub fn fuse_block(block: &mut Block, label: &str, insert_affine: bool) -> Result<()> {
    if block.fused.is_some() {
        return Err(Error::AlreadyFused(label.to_string()));
    }
    let (o, i) = (block.out_channels, block.in_channels);
    let mut kernels: Vec<(Tensor, Option<&BatchNormStats>)> = Vec::new();
    let pre = block.norm == NormPlacement::PreAdd;
    if let Some(br) = &block.conv3x3 {
        if pre && br.bn.is_none() {
            return Err(missing_bn(label, "3x3 branch"));
        }
        kernels.push((br.weight.clone(), br.bn.as_ref()));
    }
    if let Some(br) = &block.conv1x1 {
        if pre && br.bn.is_none() {
            return Err(missing_bn(label, "1x1 branch"));
        }
        kernels.push((pad_1x1_to_3x3(&br.weight)?, br.bn.as_ref()));
    }
    if let Some(br) = &block.identity {
        if pre && br.bn.is_none() {
            return Err(missing_bn(label, "identity branch"));
        }
        if i != o || block.stride != 1 {
            return Err(Error::Graph(format!("{label}: identity branch on a non-preserving block")));
        }
        kernels.push((identity_to_conv(o)?, br.bn.as_ref()));
    }
    if kernels.is_empty() {
        return Err(Error::Graph(format!("{label}: nothing to fuse")));
    }
    let mut weight = Tensor::zeros(&[o, i, 3, 3])?;
    let mut bias = vec![0.0f32; o];
    for (k, bn) in &kernels {
        let (wk, bk) = match (pre, bn) {
            (true, Some(bn)) => fold_bn(k, None, bn)?,
            _ => (k.clone(), vec![0.0; o]),
        };
        for (a, b) in weight.data_mut().iter_mut().zip(wk.data()) {
            *a += b;
        }
        for (a, b) in bias.iter_mut().zip(&bk) {
            *a += b;
        }
    }
    if !pre {
        let bn = block.post_bn.as_ref().ok_or_else(|| missing_bn(label, "post-add norm"))?;
        let (w2, b2) = fold_bn(&weight, Some(&bias), bn)?;
        weight = w2;
        bias = b2;
    }
    let sources = block.branch_kinds();
    block.conv3x3 = None;
    block.conv1x1 = None;
    block.identity = None;
    block.post_bn = None;
    block.fused = Some(FusedConv { weight, bias, sources });
    if insert_affine {
        block.affine = Some(QPRepAffine::identity(o));
    }
    Ok(())
}

/// Fuses every block of the graph.
pub fn fuse_graph(graph: &mut ModelGraph, insert_affine: bool) -> Result<()> {
    for id in graph.block_ids() {
        fuse_block(graph.block_mut(id), &id.to_string(), insert_affine)?;
    }
    graph.validate()
}

/// Integer-weight convolution with the affine folded into per-channel
/// output scales and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployConv {
    /// `[O, I, 3, 3]` signed weight codes.
    pub shape: [usize; 4],
    pub codes: Vec<i32>,
    pub s_out: Vec<f32>,
    pub bias: Vec<f32>,
    /// Quantizer producing the input codes.
    pub input: ActQuantSpec,
    pub stride: usize,
}

pub fn fuse_affine_for_deploy(
    fused: &FusedConv,
    affine: Option<&QPRepAffine>,
    w_scales: &[f32],
    w_bits: u32,
    input: &ActQuantSpec,
    stride: usize,
) -> Result<DeployConv> {
    input.validate()?;
    if w_bits > DEPLOY_MAX_BITS || input.bits > DEPLOY_MAX_BITS {
        return Err(Error::BitWidth(w_bits.max(input.bits)));
    }
    let o = fused.weight.dim(0);
    if w_scales.len() != o {
        return Err(Error::ShapeMismatch {
            op: "fuse_affine_for_deploy",
            dim: "weight scale count",
            expected: o,
            got: w_scales.len(),
        });
    }
    if let Some(&s) = w_scales.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::NonPositiveScale {
            op: "fuse_affine_for_deploy",
            value: s,
        });
    }
    let per = fused.weight.len() / o;
    let codes = fused
        .weight
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &w)| fake_quant::weight_code(w, w_scales[idx / per], w_bits) as i32)
        .collect();
    let s_x = input.scale();
    let (gain, shift) = match affine {
        Some(a) if a.enabled => (a.gain.clone(), a.shift.clone()),
        _ => (vec![1.0; o], vec![0.0; o]),
    };
    let s_out = (0..o)
        .map(|c| (gain[c] as f64 * w_scales[c] as f64 * s_x) as f32)
        .collect();
    let bias = (0..o).map(|c| gain[c] * fused.bias[c] + shift[c]).collect();
    let s = fused.weight.shape();
    Ok(DeployConv {
        shape: [s[0], s[1], s[2], s[3]],
        codes,
        s_out,
        bias,
        input: *input,
        stride,
    })
}

/// Deployment is limited to codes that fit 16 bits.
pub const DEPLOY_MAX_BITS: u32 = 16;

/// Centered input codes `q - beta` as integers.
fn centered_codes(x: &Tensor, spec: &ActQuantSpec) -> Vec<i32> {
    let beta = spec.zero_point();
    x.data().iter().map(|&v| (spec.code(v) - beta) as i32).collect()
}

impl DeployConv {
    /// Integer convolution, per-channel rescale, bias; pre-activation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.nchw()?;
        let [o, i, k, _] = self.shape;
        if c != i {
            return Err(Error::ShapeMismatch {
                op: "deploy_conv",
                dim: "input channels",
                expected: i,
                got: c,
            });
        }
        let pad = 1usize;
        let oh = ops::conv_out_extent(h, k, self.stride, pad)?;
        let ow = ops::conv_out_extent(w, k, self.stride, pad)?;
        let q = centered_codes(x, &self.input);
        let mut out = vec![0.0f32; n * o * oh * ow];
        let mut acc = vec![0i64; oh * ow];
        for b in 0..n {
            for oc in 0..o {
                acc.fill(0);
                for ic in 0..i {
                    let plane = &q[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = self.codes[((oc * i + ic) * k + ky) * k + kx] as i64;
                            if wv == 0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * self.stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                                for ox in 0..ow {
                                    let ix = (ox * self.stride + kx) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        acc[oy * ow + ox] += wv * row[ix as usize] as i64;
                                    }
                                }
                            }
                        }
                    }
                }
                let dst = &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = (a as f64 * self.s_out[oc] as f64 + self.bias[oc] as f64) as f32;
                }
            }
        }
        Tensor::new(&[n, o, oh, ow], out)
    }
}

/// Integer-weight linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployLinear {
    /// `[K, C]` signed weight codes.
    pub shape: [usize; 2],
    pub codes: Vec<i32>,
    pub s_out: f32,
    pub bias: Vec<f32>,
    pub input: ActQuantSpec,
}

impl DeployLinear {
    pub fn forward(&self, pooled: &Tensor) -> Result<Tensor> {
        let [k, c] = self.shape;
        if pooled.rank() != 2 || pooled.dim(1) != c {
            return Err(Error::ShapeMismatch {
                op: "deploy_linear",
                dim: "features",
                expected: c,
                got: pooled.shape().last().copied().unwrap_or(0),
            });
        }
        let n = pooled.dim(0);
        let q = centered_codes(pooled, &self.input);
        let mut out = Vec::with_capacity(n * k);
        for b in 0..n {
            for j in 0..k {
                let acc: i64 = (0..c)
                    .map(|f| self.codes[j * c + f] as i64 * q[b * c + f] as i64)
                    .sum();
                out.push((acc as f64 * self.s_out as f64 + self.bias[j] as f64) as f32);
            }
        }
        Tensor::new(&[n, k], out)
    }
}

/// A fully folded network running on integer codes.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployModel {
    pub input: [usize; 3],
    pub blocks: Vec<(BlockId, DeployConv)>,
    pub head: DeployLinear,
}

impl DeployModel {
    pub fn from_graph(graph: &ModelGraph) -> Result<Self> {
        let mut blocks = Vec::new();
        for id in graph.block_ids() {
            let b = graph.block(id);
            let fused = b.fused.as_ref().ok_or_else(|| Error::NotFused(id.to_string()))?;
            let q = b
                .quant
                .as_ref()
                .ok_or_else(|| Error::Graph(format!("{id}: no quantizers attached")))?;
            let conv = fuse_affine_for_deploy(
                fused,
                b.affine.as_ref(),
                &q.weight.scales,
                q.weight.bits,
                &q.input.spec()?,
                b.stride,
            )?;
            blocks.push((id, conv));
        }
        let hq = graph
            .head
            .quant
            .as_ref()
            .ok_or_else(|| Error::Graph("head: no quantizers attached".into()))?;
        let input = hq.input.spec()?;
        if hq.weight.bits > DEPLOY_MAX_BITS || input.bits > DEPLOY_MAX_BITS {
            return Err(Error::BitWidth(hq.weight.bits.max(input.bits)));
        }
        let sw = hq.weight.scales[0];
        let codes = graph
            .head
            .weight
            .data()
            .iter()
            .map(|&w| fake_quant::weight_code(w, sw, hq.weight.bits) as i32)
            .collect();
        let head = DeployLinear {
            shape: [graph.head.classes(), graph.head.features()],
            codes,
            s_out: (sw as f64 * input.scale()) as f32,
            bias: graph.head.bias.clone(),
            input,
        };
        Ok(Self {
            input: graph.input,
            blocks,
            head,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (_, conv) in &self.blocks {
            h = ops::relu(&conv.forward(&h)?);
        }
        self.head.forward(&ops::gap(&h)?)
    }
}
