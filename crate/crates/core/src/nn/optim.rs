use crate::error::{Error, Result};
use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `v ← μ·v + g`, `w ← w − lr·v`.
    SgdMomentum { momentum: f64 },
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

    pub const fn sgd_momentum(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }
}

/// Update rule plus the step counter Adam needs for bias correction. The
/// moment buffers live on each [`Parameter`].
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        match kind {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
            }
            OptimizerKind::Adam { beta1, beta2, eps }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                return Err(Error::Config(format!("invalid Adam hyperparameters {kind:?}")));
            }
            _ => {}
        }
        Ok(Self { kind, lr, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// untouched; the caller zeroes them.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) {
        self.steps += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for p in params {
                    let v = p.moment1.data_mut();
                    for (vi, &g) in v.iter_mut().zip(p.grad.data()) {
                        *vi = momentum * *vi + g;
                    }
                    for (w, &vi) in p.value.data_mut().iter_mut().zip(p.moment1.data()) {
                        *w -= lr * vi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for p in params {
                    let Parameter {
                        value,
                        grad,
                        moment1,
                        moment2,
                    } = p;
                    for (((w, &g), m), v) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(moment1.data_mut())
                        .zip(moment2.data_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(values: &[f64], grad: &[f64]) -> Parameter {
        let mut p = Parameter::new(Tensor::from_vec(values.to_vec()));
        p.grad.data_mut().copy_from_slice(grad);
        p
    }

    #[test]
    fn first_momentum_step_is_plain_sgd() {
        let mut p = param(&[1.0, -2.0], &[0.5, 0.25]);
        let mut opt = Optimizer::new(OptimizerKind::sgd_momentum(0.9), 0.1).unwrap();
        opt.step([&mut p]);
        assert_eq!(p.value.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let g = 0.3;
        let lr = 0.05;
        let mut p = param(&[0.0], &[g]);
        let mut opt = Optimizer::new(OptimizerKind::sgd_momentum(0.9), lr).unwrap();
        opt.step([&mut p]);
        opt.step([&mut p]);
        let expected = -lr * g * (1.0 + 1.9);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for kind in [OptimizerKind::sgd_momentum(0.9), OptimizerKind::adam()] {
            let mut p = param(&[1.5, -0.5, 3.0], &[0.0; 3]);
            let mut opt = Optimizer::new(kind, 0.01).unwrap();
            for _ in 0..5 {
                opt.step([&mut p]);
            }
            assert_eq!(p.value.data(), &[1.5, -0.5, 3.0], "{kind:?}");
            assert_eq!(p.grad.data(), &[0.0; 3]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = param(&[0.0, 0.0], &[2.0, -0.001]);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3).unwrap();
        opt.step([&mut p]);
        assert!((p.value.data()[0] + 1e-3).abs() < 1e-9);
        assert!((p.value.data()[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn nonpositive_lr_rejected() {
        assert!(matches!(
            Optimizer::new(OptimizerKind::adam(), 0.0),
            Err(Error::Config(_))
        ));
        assert!(Optimizer::new(OptimizerKind::sgd_momentum(0.9), -1.0).is_err());
    }
}
