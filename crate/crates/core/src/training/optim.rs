//! RMSProp with per-epoch learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub lr_decay_per_epoch: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 0.002,
            decay: 0.95,
            epsilon: 1e-8,
            lr_decay_per_epoch: 0.9,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.decay) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "optimizer: need learning_rate ≥ 0, decay in [0, 1), epsilon > 0; got {self:?}"
            )));
        }
        if !(self.lr_decay_per_epoch > 0.0) {
            return Err(Error::InvalidArgument(
                "optimizer: lr_decay_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate during zero-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// Mean-square accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub config: RmsPropConfig,
    pub mean_square: Vec<Tensor<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new<'a>(config: RmsPropConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        RmsProp {
            config,
            mean_square: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// `s ← ρs + (1 − ρ)g²; θ ← θ − lr·g / (√s + ε)`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.mean_square.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "rmsprop: {} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                self.mean_square.len()
            )));
        }
        let rho = T::of(self.config.decay);
        let keep = T::one() - rho;
        let eps = T::of(self.config.epsilon);
        let lr = T::of(lr);
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.mean_square) {
            if p.shape() != g.shape() || p.shape() != s.shape() {
                return Err(Error::shape(
                    "rmsprop",
                    format!("parameter {} vs gradient {}", p.shape(), g.shape()),
                ));
            }
            for ((pv, gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
                *sv = rho * *sv + keep * *gv * *gv;
                *pv -= lr * *gv / (sv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::vector(vec![v])
    }

    #[test]
    fn first_step_reference() {
        let mut theta = scalar(0.0);
        let mut opt = RmsProp::new(RmsPropConfig::default(), [&theta]);
        opt.step(&mut [&mut theta], &[scalar(1.0)], 0.002).unwrap();
        assert!((opt.mean_square[0].data()[0] - 0.05).abs() < 1e-15);
        let expected = -0.002 / (0.05f64.sqrt() + 1e-8);
        assert!((theta.data()[0] - expected).abs() < 1e-15);
        assert!((theta.data()[0] + 0.008944).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_parameters() {
        let mut theta = Tensor::vector(vec![0.3, -1.2]);
        let before = theta.clone();
        let mut opt = RmsProp::new(RmsPropConfig::default(), [&theta]);
        opt.step(&mut [&mut theta], &[Tensor::zeros(before.shape())], 0.002)
            .unwrap();
        assert_eq!(theta, before);
        opt.step(&mut [&mut theta], &[Tensor::vector(vec![1.0, 2.0])], 0.0)
            .unwrap();
        assert_eq!(theta, before);
        assert!(opt.mean_square[0].data().iter().all(|s| *s > 0.0));
    }

    #[test]
    fn schedule_decays_per_epoch() {
        let c = RmsPropConfig::default();
        assert_eq!(c.learning_rate_at(0), 0.002);
        assert!((c.learning_rate_at(2) - 0.002 * 0.81).abs() < 1e-18);
    }
}
