//! Adam with per-group learning rates and cosine decay.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cosine-decayed learning rate at `step` of `total_steps`.
pub fn cosine_lr(base_lr: f32, step: usize, total_steps: usize) -> f32 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    let lr = base_lr as f64 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
    lr.max(0.0) as f32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    base_lr: f32,
}

/// Optimizer state: one moment pair per registered parameter.
#[derive(Debug, Clone)]
pub struct OptimState {
    cfg: AdamConfig,
    params: Vec<Moments>,
    step: usize,
    total_steps: usize,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, total_steps: usize) -> Self {
        Self {
            cfg,
            params: Vec::new(),
            step: 0,
            total_steps,
        }
    }

    /// Registers a parameter of `len` elements; returns its slot.
    pub fn register(&mut self, len: usize, base_lr: f32) -> usize {
        self.params.push(Moments {
            m: alloc::vec![0.0; len],
            v: alloc::vec![0.0; len],
            base_lr,
        });
        self.params.len() - 1
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn lr(&self, slot: usize) -> f32 {
        cosine_lr(self.params[slot].base_lr, self.step, self.total_steps)
    }

    /// Applies one Adam update to `param` using `grad`.
    ///
    /// Call [`OptimState::advance`] once all slots are updated.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        param.same_shape(grad, "adam")?;
        let lr = self.lr(slot);
        let t = (self.step + 1) as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - libm::powf(beta1, t as f32);
        let bc2 = 1.0 - libm::powf(beta2, t as f32);
        let st = &mut self.params[slot];
        if st.m.len() != param.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                dim: "moment length",
                expected: st.m.len(),
                got: param.len(),
            });
        }
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.iter_mut())
            .zip(st.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (libm::sqrtf(vh) + eps);
        }
        Ok(())
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-7);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-9);
        assert!(cosine_lr(0.1, 150, 100) >= 0.0);
    }

    #[test]
    fn adam_descends_on_square() {
        // f(p) = p^2, grad 2p
        let mut st = OptimState::new(AdamConfig::default(), 10);
        let slot = st.register(1, 0.1);
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        st.update(slot, &mut p, &g).unwrap();
        st.advance();
        assert!(p.item() < 1.0);
        assert!((p.item() - 0.9).abs() < 1e-6);
    }
}
