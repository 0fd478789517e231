//! Reverse-mode automatic differentiation over the fixed operation set.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! Nodes may only reference earlier nodes, so creation order is a
//! topological order and [`Tape::backward`] walks it in reverse, visiting
//! each node once. Gradients reaching a node along several paths are summed.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fake_quant::{self, ActQuantSpec};
use crate::ops::{self, BatchStats};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f32),
    ChannelAffine {
        x: Var,
        gain: Var,
        shift: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        stats: BatchStats,
    },
    FakeQuantWeight {
        w: Var,
        scales: Var,
        bits: u32,
    },
    FakeQuantAct {
        x: Var,
        eta: Var,
        eps: Var,
        bits: u32,
        x_min: f32,
        x_max: f32,
    },
    Mae(Var, Var),
    Mse(Var, Var),
    Gap(Var),
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<u32>,
    },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-owner record of a forward computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.val(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            y,
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(Op::Relu(x), y, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), y, &[a, b]))
    }

    /// Multiplies by a constant factor.
    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let y = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), y, &[x])
    }

    pub fn channel_affine(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let y = ops::channel_affine(self.value(x), self.val(gain), self.val(shift))?;
        Ok(self.push(Op::ChannelAffine { x, gain, shift }, y, &[x, gain, shift]))
    }

    /// Training-mode batch norm; also returns the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        let (y, stats) = ops::batch_norm_train(self.value(x), self.val(gamma), self.val(beta), eps)?;
        let out = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                stats: stats.clone(),
            },
            y,
            &[x, gamma, beta],
        );
        Ok((out, stats))
    }

    pub fn fake_quant_weight(&mut self, w: Var, scales: Var, bits: u32) -> Result<Var> {
        let y = fake_quant::fake_quant_weight(self.value(w), self.val(scales), bits)?;
        Ok(self.push(Op::FakeQuantWeight { w, scales, bits }, y, &[w, scales]))
    }

    /// Activation quantizer whose multiplier `eta` and offset `eps` are
    /// one-element nodes; the range is fixed.
    pub fn fake_quant_act(
        &mut self,
        x: Var,
        eta: Var,
        eps: Var,
        bits: u32,
        x_min: f32,
        x_max: f32,
    ) -> Result<Var> {
        let spec = ActQuantSpec {
            bits,
            x_min,
            x_max,
            eta: self.value(eta).item(),
            eps: self.value(eps).item(),
        };
        let y = fake_quant::fake_quant_act(self.value(x), &spec)?;
        Ok(self.push(
            Op::FakeQuantAct {
                x,
                eta,
                eps,
                bits,
                x_min,
                x_max,
            },
            y,
            &[x, eta, eps],
        ))
    }

    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = ops::mae(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mae(a, b), Tensor::scalar(l), &[a, b]))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = ops::mse(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(l), &[a, b]))
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let y = ops::gap(self.value(x))?;
        Ok(self.push(Op::Gap(x), y, &[x]))
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), bias.map(|b| self.val(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(Op::Linear { x, w, bias }, y, &inputs))
    }

    pub fn softmax_xent(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let l = ops::softmax_xent(self.value(logits), labels)?;
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(l),
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    /// Back-propagates from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(
        &self,
        op: &Op,
        _out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, a) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += a;
                    }
                }
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let want = [
                    self.wants(x),
                    self.wants(w),
                    bias.is_some_and(|b| self.wants(b)),
                ];
                let r = ops::conv2d_backward(self.value(x), self.value(w), g, stride, pad, want)?;
                if let Some(t) = r.x {
                    acc(x, t)?;
                }
                if let Some(t) = r.w {
                    acc(w, t)?;
                }
                if let (Some(b), Some(t)) = (bias, r.bias) {
                    acc(b, t)?;
                }
            }
            &Op::Relu(x) => acc(x, ops::relu_backward(self.value(x), g))?,
            &Op::Add(a, b) => {
                if self.wants(a) {
                    acc(a, g.clone())?;
                }
                if self.wants(b) {
                    acc(b, g.clone())?;
                }
            }
            &Op::Scale(x, f) => acc(x, g.map(|v| v * f))?,
            &Op::ChannelAffine { x, gain, shift } => {
                let (dx, dg, ds) = ops::channel_affine_backward(self.value(x), self.val(gain), g)?;
                if self.wants(x) {
                    acc(x, dx)?;
                }
                if self.wants(gain) {
                    acc(gain, dg)?;
                }
                if self.wants(shift) {
                    acc(shift, ds)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                stats,
            } => {
                let (dx, dg, db) =
                    ops::batch_norm_train_backward(self.value(*x), self.val(*gamma), stats, *eps, g)?;
                if self.wants(*x) {
                    acc(*x, dx)?;
                }
                if self.wants(*gamma) {
                    acc(*gamma, dg)?;
                }
                if self.wants(*beta) {
                    acc(*beta, db)?;
                }
            }
            &Op::FakeQuantWeight { w, scales, bits } => {
                let (dw, ds) =
                    fake_quant::fake_quant_weight_backward(self.value(w), self.val(scales), bits, g)?;
                if self.wants(w) {
                    acc(w, dw)?;
                }
                if self.wants(scales) {
                    acc(scales, ds)?;
                }
            }
            &Op::FakeQuantAct {
                x,
                eta,
                eps,
                bits,
                x_min,
                x_max,
            } => {
                let spec = ActQuantSpec {
                    bits,
                    x_min,
                    x_max,
                    eta: self.value(eta).item(),
                    eps: self.value(eps).item(),
                };
                let r = fake_quant::fake_quant_act_backward(self.value(x), &spec, g)?;
                if self.wants(x) {
                    acc(x, r.x)?;
                }
                if self.wants(eta) {
                    acc(eta, Tensor::scalar(r.eta))?;
                }
                if self.wants(eps) {
                    acc(eps, Tensor::scalar(r.eps))?;
                }
            }
            &Op::Mae(a, b) => {
                let ga = ops::mae_backward(self.value(a), self.value(b), g.item());
                if self.wants(b) {
                    acc(b, ga.map(|v| -v))?;
                }
                if self.wants(a) {
                    acc(a, ga)?;
                }
            }
            &Op::Mse(a, b) => {
                let ga = ops::mse_backward(self.value(a), self.value(b), g.item());
                if self.wants(b) {
                    acc(b, ga.map(|v| -v))?;
                }
                if self.wants(a) {
                    acc(a, ga)?;
                }
            }
            &Op::Gap(x) => acc(x, ops::gap_backward(self.value(x).shape(), g)?)?,
            &Op::Linear { x, w, bias } => {
                let (dx, dw, db) = ops::linear_backward(self.value(x), self.value(w), g)?;
                if self.wants(x) {
                    acc(x, dx)?;
                }
                if self.wants(w) {
                    acc(w, dw)?;
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    acc(b, db)?;
                }
            }
            Op::SoftmaxXent { logits, labels } => {
                let d = ops::softmax_xent_backward(self.value(*logits), labels, g.item())?;
                acc(*logits, d)?;
            }
            &Op::Sum(x) => {
                let v = g.item();
                acc(x, self.value(x).map(|_| v))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 3], vec![1., -2., 3., 0.5, 7., -1.]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.backward(y).unwrap_err(), Error::NonScalarLoss(3));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let y = tape.add(y, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let p = tape.param(Tensor::from_vec(vec![0.5, 0.5]).unwrap());
        let y = tape.add(x, p).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn mae_gradient_sign_rule() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(3.0));
        let b = tape.constant(Tensor::scalar(1.0));
        let l = tape.mae(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0]);
    }
}
