//! Serializable description of a graph's structure (no tensor values).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fusion::{FusedConv, QPRepAffine};
use crate::graph::{
    BatchNormStats, Block, BranchKind, ConvBranch, Head, HeadQuant, IdentityBranch, ModelGraph,
    NormPlacement, Stage, BlockQuant, DEFAULT_BN_EPS,
};
use crate::quant::{ActQuantParams, WeightQuantParams};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "repapq-manifest/1";

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Topology {
    pub format: String,
    pub name: String,
    /// `[C, H, W]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub stages: Vec<StageSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub head: HeadSpec,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageSpec {
    pub blocks: Vec<BlockSpec>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[cfg_attr(feature = "serde", serde(default = "one"))]
    pub groups: usize,
    pub norm: NormPlacement,
    /// Branches of the multi-branch form. For a fused block these record
    /// which branches contributed to the fused convolution.
    pub branches: Vec<BranchKind>,
    #[cfg_attr(feature = "serde", serde(default = "default_eps"))]
    pub bn_eps: f32,
    #[cfg_attr(feature = "serde", serde(default))]
    pub fused: bool,
    /// Present when a channel affine follows the fused convolution; the
    /// value is its enabled flag.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub affine: Option<bool>,
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub quant: Option<QuantBits>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct QuantBits {
    pub weight_bits: u32,
    pub act_bits: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct HeadSpec {
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Option::is_none"))]
    pub quant: Option<QuantBits>,
}

#[cfg(feature = "serde")]
fn one() -> usize {
    1
}

#[cfg(feature = "serde")]
fn default_eps() -> f32 {
    DEFAULT_BN_EPS
}

impl BlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, branches: &[BranchKind]) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            groups: 1,
            norm: NormPlacement::PreAdd,
            branches: branches.to_vec(),
            bn_eps: DEFAULT_BN_EPS,
            fused: false,
            affine: None,
            quant: None,
        }
    }

    fn build(&self, label: &str) -> Result<Block> {
        if self.groups != 1 {
            return Err(Error::Graph(format!(
                "{label}: grouped convolutions (groups = {}) are not supported",
                self.groups
            )));
        }
        let mut kinds = self.branches.clone();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.branches.len() {
            return Err(Error::Graph(format!("{label}: duplicate branch")));
        }
        if kinds.is_empty() {
            return Err(Error::Graph(format!("{label}: no branches")));
        }
        let (o, i) = (self.out_channels, self.in_channels);
        let pre = self.norm == NormPlacement::PreAdd && !self.fused;
        let bn = || pre.then(|| BatchNormStats::identity(o, self.bn_eps));
        let has = |k| kinds.contains(&k) && !self.fused;
        let conv = |k: usize| -> Result<ConvBranch> {
            Ok(ConvBranch {
                weight: Tensor::zeros(&[o, i, k, k])?,
                bn: bn(),
            })
        };
        let block = Block {
            in_channels: i,
            out_channels: o,
            stride: self.stride,
            norm: self.norm,
            bn_eps: self.bn_eps,
            conv3x3: if has(BranchKind::Conv3x3) { Some(conv(3)?) } else { None },
            conv1x1: if has(BranchKind::Conv1x1) { Some(conv(1)?) } else { None },
            identity: has(BranchKind::Identity).then(|| IdentityBranch { bn: bn() }),
            post_bn: (self.norm == NormPlacement::PostAdd && !self.fused)
                .then(|| BatchNormStats::identity(o, self.bn_eps)),
            fused: if self.fused {
                Some(FusedConv {
                    weight: Tensor::zeros(&[o, i, 3, 3])?,
                    bias: vec![0.0; o],
                    sources: kinds.clone(),
                })
            } else {
                None
            },
            affine: self.affine.map(|enabled| QPRepAffine {
                enabled,
                ..QPRepAffine::identity(o)
            }),
            quant: self.quant.map(|q| BlockQuant {
                weight: WeightQuantParams::new(q.weight_bits, o),
                input: ActQuantParams::new(q.act_bits),
            }),
        };
        if kinds.contains(&BranchKind::Identity) && (self.stride != 1 || i != o) {
            return Err(Error::Graph(format!(
                "{label}: identity branch requires stride 1 and equal in/out channels"
            )));
        }
        if !self.fused && (self.affine.is_some() || self.quant.is_some()) {
            return Err(Error::Graph(format!(
                "{label}: affine and quantizers require a fused block"
            )));
        }
        Ok(block)
    }
}

impl Topology {
    /// One stage with one block on an 8×8 input.
    pub fn single_block(in_channels: usize, out_channels: usize, classes: usize, branches: &[BranchKind]) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            name: "single-block".into(),
            input: [in_channels, 8, 8],
            classes,
            stages: vec![StageSpec {
                blocks: vec![BlockSpec::new(in_channels, out_channels, 1, branches)],
            }],
            head: HeadSpec::default(),
        }
    }

    /// Five stages of widths (16, 16, 32, 64, 128) with (1, 2, 4, 6, 1)
    /// blocks, stride 2 at each stage start, 3×32×32 input, 10 classes.
    pub fn desk_reference() -> Self {
        Self::vgg_like("desk-reference", [3, 32, 32], &[16, 16, 32, 64, 128], &[1, 2, 4, 6, 1], 10)
    }

    /// Generic reparameterized VGG layout: the first block of every stage
    /// downsamples and has no identity branch.
    pub fn vgg_like(name: &str, input: [usize; 3], widths: &[usize], depths: &[usize], classes: usize) -> Self {
        let all = [BranchKind::Conv3x3, BranchKind::Conv1x1, BranchKind::Identity];
        let mut c = input[0];
        let stages = widths
            .iter()
            .zip(depths)
            .map(|(&w, &d)| {
                let blocks = (0..d)
                    .map(|j| {
                        let b = if j == 0 {
                            BlockSpec::new(c, w, 2, &all[..2])
                        } else {
                            BlockSpec::new(w, w, 1, &all)
                        };
                        c = w;
                        b
                    })
                    .collect();
                StageSpec { blocks }
            })
            .collect();
        Self {
            format: MANIFEST_FORMAT.into(),
            name: name.into(),
            input,
            classes,
            stages,
            head: HeadSpec::default(),
        }
    }

    /// Builds a graph with zero weights and identity batch norms.
    pub fn build(&self) -> Result<ModelGraph> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::Graph(format!(
                "unsupported manifest format {:?} (expected {MANIFEST_FORMAT:?})",
                self.format
            )));
        }
        if self.classes == 0 || self.input.contains(&0) {
            return Err(Error::Graph("classes and input extents must be positive".into()));
        }
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(s, st)| {
                let blocks = st
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(b, spec)| spec.build(&format!("s{s}.b{b}")))
                    .collect::<Result<Vec<_>>>()?;
                if blocks.is_empty() {
                    return Err(Error::Graph(format!("stage {s} has no blocks")));
                }
                Ok(Stage { blocks })
            })
            .collect::<Result<Vec<_>>>()?;
        let features = self
            .stages
            .last()
            .and_then(|s| s.blocks.last())
            .map(|b| b.out_channels)
            .unwrap_or(self.input[0]);
        let g = ModelGraph {
            name: self.name.clone(),
            input: self.input,
            stages,
            head: Head {
                weight: Tensor::zeros(&[self.classes, features])?,
                bias: vec![0.0; self.classes],
                quant: self.head.quant.map(|q| HeadQuant {
                    weight: WeightQuantParams::new(q.weight_bits, 1),
                    input: ActQuantParams::new(q.act_bits),
                }),
            },
        };
        g.validate()?;
        Ok(g)
    }
}

impl ModelGraph {
    pub fn topology(&self) -> Topology {
        let stages = self
            .stages
            .iter()
            .map(|st| StageSpec {
                blocks: st
                    .blocks
                    .iter()
                    .map(|b| BlockSpec {
                        in_channels: b.in_channels,
                        out_channels: b.out_channels,
                        stride: b.stride,
                        groups: 1,
                        norm: b.norm,
                        branches: match &b.fused {
                            Some(f) => f.sources.clone(),
                            None => b.branch_kinds(),
                        },
                        bn_eps: b.bn_eps,
                        fused: b.fused.is_some(),
                        affine: b.affine.as_ref().map(|a| a.enabled),
                        quant: b.quant.as_ref().map(|q| QuantBits {
                            weight_bits: q.weight.bits,
                            act_bits: q.input.bits,
                        }),
                    })
                    .collect(),
            })
            .collect();
        Topology {
            format: MANIFEST_FORMAT.into(),
            name: self.name.clone(),
            input: self.input,
            classes: self.head.classes(),
            stages,
            head: HeadSpec {
                quant: self.head.quant.as_ref().map(|q| QuantBits {
                    weight_bits: q.weight.bits,
                    act_bits: q.input.bits,
                }),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_reference_shape() {
        let g = Topology::desk_reference().build().unwrap();
        assert_eq!(g.num_blocks(), 14);
        assert_eq!(g.stage_output_indices(), vec![0, 2, 6, 12, 13]);
        assert_eq!(g.head.features(), 128);
        assert_eq!(g.topology(), Topology::desk_reference());
    }

    #[test]
    fn identity_on_stride_two_rejected() {
        let mut t = Topology::single_block(4, 4, 2, &[BranchKind::Conv3x3, BranchKind::Identity]);
        t.stages[0].blocks[0].stride = 2;
        assert!(matches!(t.build(), Err(Error::Graph(_))));
    }

    #[test]
    fn groups_rejected() {
        let mut t = Topology::single_block(4, 4, 2, &[BranchKind::Conv3x3]);
        t.stages[0].blocks[0].groups = 4;
        assert!(matches!(t.build(), Err(Error::Graph(_))));
    }

    #[test]
    fn unknown_format_rejected() {
        let mut t = Topology::single_block(4, 4, 2, &[BranchKind::Conv3x3]);
        t.format = "repapq-manifest/9".into();
        assert!(t.build().is_err());
    }
}
