//! Adam with warmup/cosine learning-rate schedule and global-norm clipping.

use crate::autograd::ParamGrads;
use crate::glm::ModelState;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub min_lr_ratio: f64,
}

impl Schedule {
    /// Learning rate for 0-based `step`: linear warmup to the peak, then
    /// cosine decay to `min_lr_ratio * peak` at `total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.min_lr_ratio * self.peak_lr;
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Dense gradient accumulator matching the model's parameter list.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub grads: Vec<Matrix<f32>>,
}

impl GradBuffer {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            grads: model
                .params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows, p.value.cols))
                .collect(),
        }
    }

    pub fn add(&mut self, g: ParamGrads<f32>) {
        for (acc, gi) in self.grads.iter_mut().zip(g.grads) {
            if let Some(gi) = gi {
                acc.add_assign(&gi);
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix<f32>>,
    v: Vec<Matrix<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(model: &ModelState) -> Self {
        let zeros = GradBuffer::zeros_like(model).grads;
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Clip `grads` to `clip_norm` (if positive) and apply one update.
    /// Returns the pre-clipping gradient norm.
    pub fn step(&mut self, model: &mut ModelState, grads: &mut GradBuffer, lr: f64, clip_norm: f64) -> f64 {
        let norm = grads.norm();
        if clip_norm > 0.0 && norm > clip_norm {
            grads.scale((clip_norm / norm) as f32);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in model
            .params
            .iter_mut()
            .zip(&grads.grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                p.value.data[i] -= step * m.data[i] / (v.data[i].sqrt() / bc2_sqrt + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::{Hyper, Model};
    use crate::vocab::Vocabulary;

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            warmup_steps: 10,
            total_steps: 110,
            peak_lr: 1.0,
            min_lr_ratio: 0.1,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.55).abs() < 1e-12);
        assert!((s.lr(110) - 0.1).abs() < 1e-12);
        assert!((s.lr(500) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_gradient_and_clips() {
        let h = Hyper {
            dim: 4,
            heads: 1,
            ffn_dim: 4,
            enc_layers: 1,
            dec_layers: 1,
            lte_layers: 1,
            ..Hyper::default()
        };
        let mut model: ModelState = Model::new(h, Vocabulary::build("a".chars()).unwrap(), 0).unwrap();
        let before = model.params[0].value.data[0];
        let mut g = GradBuffer::zeros_like(&model);
        g.grads[0].data[0] = 100.0;
        let mut adam = Adam::new(&model);
        let norm = adam.step(&mut model, &mut g, 0.01, 1.0);
        assert_eq!(norm, 100.0);
        assert!((g.norm() - 1.0).abs() < 1e-6);
        let after = model.params[0].value.data[0];
        assert!((before - after - 0.01).abs() < 1e-6);
        assert_eq!(model.params[1].value, Model::<f32>::new(model.hyper().clone(), model.vocab().clone(), 0).unwrap().params[1].value);
    }
}
