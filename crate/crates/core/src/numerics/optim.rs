use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First-order optimizer with multiplicative learning-rate decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    initial_rate: f64,
    decay_factor: f64,
    decays: u32,
    steps: u64,
    moments: Vec<Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, decay_factor: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!("learning rate {learning_rate}")));
        }
        if !(decay_factor > 0.0 && decay_factor <= 1.0) {
            return Err(Error::InvalidArgument(alloc::format!("decay factor {decay_factor}")));
        }
        Ok(Self {
            kind,
            initial_rate: learning_rate,
            decay_factor,
            decays: 0,
            steps: 0,
            moments: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate, 1.0)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), learning_rate, 1.0)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// `initial_rate × decay_factor^k` after `k` decays.
    pub fn learning_rate(&self) -> f64 {
        self.initial_rate * libm::pow(self.decay_factor, self.decays as f64)
    }

    pub fn decays(&self) -> u32 {
        self.decays
    }

    pub fn decay(&mut self) {
        self.decays += 1;
    }

    /// Applies one update to every parameter and clears their gradients.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::MissingGrad(alloc::format!("#{i}")));
            }
        }
        let lr = self.learning_rate();
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in params.iter_mut().filter(|p| p.requires_grad()) {
                    let g = p.grad().expect("checked above").to_vec();
                    for (w, g) in p.data_mut().iter_mut().zip(&g) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.moments.len() != params.len() {
                    self.moments = params
                        .iter()
                        .map(|p| Moments {
                            m: vec![0.0; p.len()],
                            v: vec![0.0; p.len()],
                        })
                        .collect();
                }
                let t = self.steps as f64;
                let c1 = 1.0 - libm::pow(beta1, t);
                let c2 = 1.0 - libm::pow(beta2, t);
                for (p, st) in params.iter_mut().zip(&mut self.moments) {
                    if !p.requires_grad() {
                        continue;
                    }
                    let g = p.grad().expect("checked above").to_vec();
                    for (((w, g), m), v) in p.data_mut().iter_mut().zip(&g).zip(&mut st.m).zip(&mut st.v) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w -= lr * mh / (libm::sqrt(vh) + eps);
                    }
                }
            }
        }
        params.iter_mut().for_each(Tensor::zero_grad);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::scalar(v).into_parameter()
    }

    #[test]
    fn sgd_step_follows_definition() {
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let mut p = [scalar_param(1.0)];
        p[0].accumulate_grad(&[2.0]).unwrap();
        opt.step(&mut p).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);
        assert!(p[0].grad().is_none());
    }

    #[test]
    fn one_decay_halves_the_paper_rate() {
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.001, 0.5).unwrap();
        opt.decay();
        assert_eq!(opt.learning_rate(), 0.0005);
        opt.decay();
        opt.decay();
        assert_eq!(opt.learning_rate(), 0.001 * 0.125);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut opt = Optimizer::adam(0.01).unwrap();
        let mut p = [scalar_param(0.0)];
        assert!(matches!(opt.step(&mut p), Err(Error::MissingGrad(_))));
    }

    fn adam_on_quadratic(steps: usize) -> f64 {
        // f(w) = (w - 3)^2, f'(w) = 2(w - 3).
        let mut opt = Optimizer::adam(0.01).unwrap();
        let mut p = [scalar_param(0.0)];
        for _ in 0..steps {
            let w = p[0].data()[0];
            p[0].accumulate_grad(&[2.0 * (w - 3.0)]).unwrap();
            opt.step(&mut p).unwrap();
        }
        p[0].data()[0]
    }

    #[test]
    fn adam_matches_reference_trajectory_on_quadratic() {
        // Reference value from torch.optim.Adam(lr=0.01), float64, 500 steps.
        let w = adam_on_quadratic(500);
        assert!((w - 2.807_018_874_115_633_4).abs() < 1e-9, "w = {w}");
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        let w = adam_on_quadratic(1000);
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Optimizer::sgd(0.0).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.1, 1.5).is_err());
    }
}
