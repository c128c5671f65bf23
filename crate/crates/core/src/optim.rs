use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Plain gradient descent or bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
        )
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameters, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.dim() != g.dim() {
                return Err(Error::shape(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.dim(),
                    g.dim()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.scaled_add(-self.lr, g);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = grads.iter().map(|g| Tensor::zeros(g.raw_dim())).collect();
                    self.second = self.first.clone();
                } else if self.first.len() != grads.len()
                    || self.first.iter().zip(grads).any(|(m, g)| m.dim() != g.dim())
                {
                    return Err(Error::shape("moment buffers no longer match parameters"));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                {
                    m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    ndarray::Zip::from(&mut **p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= self.lr * (m / c1) / ((v / c2).sqrt() + eps);
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn plain_step() {
        let mut p = array![[1.0]];
        Optimizer::sgd(0.1).step(&mut [&mut p], &[array![[1.0]]]).unwrap();
        assert!((p[[0, 0]] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = array![[1.0, -2.0]];
        let before = p.clone();
        let mut opt = Optimizer::adam(0.1);
        opt.step(&mut [&mut p], &[Tensor::zeros((1, 2))]).unwrap();
        assert_eq!(p, before);
        Optimizer::sgd(0.3)
            .step(&mut [&mut p], &[Tensor::zeros((1, 2))])
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_step_approaches_learning_rate_under_constant_gradient() {
        // bias-corrected moments equal g and g^2 exactly, so the step is
        // lr * g / (|g| + eps) at every iteration.
        let mut p = array![[0.0]];
        let mut opt = Optimizer::adam(0.1);
        let mut last = 0.0;
        for _ in 0..200 {
            let before = p[[0, 0]];
            opt.step(&mut [&mut p], &[array![[2.5]]]).unwrap();
            last = before - p[[0, 0]];
        }
        assert!((last - 0.1 * 2.5 / (2.5 + 1e-8)).abs() < 1e-12);
        assert_eq!(opt.steps(), 200);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = array![[1.0]];
        let err = Optimizer::sgd(0.1).step(&mut [&mut p], &[array![[f64::NAN]]]);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p[[0, 0]], 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = array![[1.0, 2.0]];
        assert!(Optimizer::sgd(0.1).step(&mut [&mut p], &[array![[1.0]]]).is_err());
    }
}
