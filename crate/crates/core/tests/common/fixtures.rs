//! Randomized graphs shared by property and acceptance tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use repapq_core::graph::{BranchKind, ModelGraph, NormPlacement};
use repapq_core::topology::Topology;
use repapq_core::Tensor;

pub const ALL_BRANCHES: [BranchKind; 3] = [BranchKind::Conv3x3, BranchKind::Conv1x1, BranchKind::Identity];

/// The seven non-empty branch subsets.
pub fn branch_subsets() -> Vec<Vec<BranchKind>> {
    (1u8..8)
        .map(|m| ALL_BRANCHES.iter().enumerate().filter(|(i, _)| m & (1 << i) != 0).map(|(_, &k)| k).collect())
        .collect()
}

/// Overwrites every stored tensor with N(0, 1) draws; BN variances are
/// `|N(0, 1)| + 0.1`.
pub fn randomize(graph: &mut ModelGraph, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    for (name, t) in graph.named_tensors() {
        let data = (0..t.len())
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut rng);
                if name.ends_with(".var") {
                    z.abs() + 0.1
                } else {
                    z
                }
            })
            .collect();
        map.insert(name, Tensor::new(t.shape(), data).unwrap());
    }
    graph.assign_tensors(&map).unwrap();
}

/// A single-block model with random parameters.
pub fn random_block(channels: usize, branches: &[BranchKind], norm: NormPlacement, seed: u64) -> ModelGraph {
    let mut topo = Topology::single_block(channels, channels, 3, branches);
    topo.stages[0].blocks[0].norm = norm;
    let mut g = topo.build().unwrap();
    randomize(&mut g, seed);
    g
}

pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

/// Largest absolute difference between the unfused and fused forwards of
/// one block, over the block output and the logits.
pub fn fusion_gap(graph: &ModelGraph, insert_affine: bool, x: &Tensor) -> f32 {
    let before = graph.forward_fp(x, true).unwrap();
    let mut fused = graph.clone();
    repapq_core::fusion::fuse_graph(&mut fused, insert_affine).unwrap();
    let after = fused.forward_fp(x, true).unwrap();
    let b = before.block_outputs.unwrap();
    let a = after.block_outputs.unwrap();
    let blocks = b.iter().zip(&a).map(|(p, q)| p.max_abs_diff(q).unwrap()).fold(0.0, f32::max);
    blocks.max(before.logits.max_abs_diff(&after.logits).unwrap())
}
