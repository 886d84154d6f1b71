//! First-order optimisers and learning-rate schedules with PyTorch update
//! semantics (coupled L2 weight decay).

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` once `step` optimiser steps are done.
    Milestones { milestones: Vec<(usize, f32)> },
    /// Linear decay from the base rate to zero over `total_steps`.
    Linear { total_steps: usize },
}

impl LrSchedule {
    pub fn rate(&self, base: f32, step: usize) -> f32 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Milestones { milestones } => milestones
                .iter()
                .filter(|(s, _)| step >= *s)
                .fold(base, |lr, (_, f)| lr * f),
            LrSchedule::Linear { total_steps } => {
                let t = (step as f32 / (*total_steps).max(1) as f32).min(1.0);
                base * (1.0 - t)
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let LrSchedule::Milestones { milestones } = self {
            if milestones.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err("schedule steps must be strictly increasing".into());
            }
            if milestones.iter().any(|(_, f)| !(*f > 0.0)) {
                return Err("schedule factors must be positive".into());
            }
        }
        Ok(())
    }
}

pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: Vec<Option<Tensor<f32>>>,
}

impl Sgd {
    pub fn new(n_params: usize, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: vec![None; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f32) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let wd = self.weight_decay;
            let d = g.zip_map(p, |gv, pv| gv + wd * pv);
            let buf = match &mut self.buffers[i] {
                Some(b) => {
                    let m = self.momentum;
                    for (bv, &dv) in b.data_mut().iter_mut().zip(d.data()) {
                        *bv = m * *bv + dv;
                    }
                    b
                }
                slot @ None => slot.insert(d),
            };
            for (pv, &bv) in p.data_mut().iter_mut().zip(buf.data()) {
                *pv -= lr * bv;
            }
        }
    }
}

pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    t: Vec<u32>,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>], weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: vec![0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f32) {
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let wd = self.weight_decay;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = gv + wd * *pv;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn milestone_schedule_multiplies_factors() {
        let s = LrSchedule::Milestones {
            milestones: vec![(80, 0.2), (100, 0.5)],
        };
        assert_eq!(s.rate(0.1, 0), 0.1);
        assert!((s.rate(0.1, 80) - 0.02).abs() < 1e-7);
        assert!((s.rate(0.1, 150) - 0.01).abs() < 1e-7);
        assert!(s.validate().is_ok());
        let bad = LrSchedule::Milestones {
            milestones: vec![(10, 0.5), (10, 0.5)],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn linear_schedule_reaches_zero() {
        let s = LrSchedule::Linear { total_steps: 10 };
        assert_eq!(s.rate(0.01, 0), 0.01);
        assert_eq!(s.rate(0.01, 10), 0.0);
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut p = vec![Tensor::new(vec![1], vec![1.0f32])];
        let g = vec![Some(Tensor::new(vec![1], vec![0.5f32]))];
        let mut opt = Sgd::new(1, 0.9, 0.0);
        opt.step(&mut p, &g, 0.1);
        assert!((p[0].item() - 0.95).abs() < 1e-7);
        opt.step(&mut p, &g, 0.1);
        // buf = 0.9·0.5 + 0.5 = 0.95
        assert!((p[0].item() - 0.855).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0f32, -1.0])];
        let g = vec![Some(Tensor::new(vec![2], vec![3.0f32, -0.1]))];
        let mut opt = Adam::new(&p, 0.0);
        opt.step(&mut p, &g, 0.01);
        assert!((p[0].data()[0] - 0.99).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.99).abs() < 1e-6);
    }
}
