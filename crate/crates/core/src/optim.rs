//! SGD with momentum and L2 weight decay, plus a multi-step learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepLr {
    pub base: f64,
    /// Strictly increasing epochs at which the rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {} must be positive", self.base)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Parameter(format!("lr decay {} outside (0, 1]", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Parameter(format!("weight decay {weight_decay} must be non-negative")));
        }
        Ok(Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// `v = momentum * v + (g + wd * p)`; `p -= lr * v`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Usage("parameter list changed between steps".into()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape("sgd_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            let vd = v.data_mut();
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vd) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps() {
        let s = MultiStepLr {
            base: 0.1,
            milestones: vec![30, 40, 50],
            gamma: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(29), 0.1);
        assert!((s.lr_at(30) - 0.01).abs() < 1e-16);
        assert!((s.lr_at(55) - 1e-4).abs() < 1e-16);
        let bad = MultiStepLr {
            milestones: vec![3, 3],
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn momentum_matches_hand_computation() {
        let mut p = Tensor::vector(&[1.0]);
        let g = Tensor::vector(&[0.5]);
        let mut opt = Sgd::new(0.9, 0.1).unwrap();
        opt.step(&mut [&mut p], &[g.clone()], 0.1).unwrap();
        // v = 0.5 + 0.1 = 0.6; p = 1 - 0.06
        assert!((p.data()[0] - 0.94).abs() < 1e-15);
        opt.step(&mut [&mut p], &[g], 0.1).unwrap();
        // v = 0.54 + 0.5 + 0.094 = 1.134; p = 0.94 - 0.1134
        assert!((p.data()[0] - 0.8266).abs() < 1e-15);
    }
}
