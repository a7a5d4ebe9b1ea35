//! Two-point SPSA estimate of the encoder weight gradient.
//!
//! For a Gaussian direction `z`,
//!
//! ```text
//! g = (L(w + εz) − L(w − εz)) / (2ε) · z
//! ```
//!
//! averaged over `num_directions` independent directions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::split::{ClientModel, Encoder, FeatureBundle};
use crate::tensor::Tensor;
use crate::transcript::MessageKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoConfig {
    pub epsilon: f64,
    pub num_directions: usize,
}

impl Default for ZoConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            num_directions: 1,
        }
    }
}

impl ZoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "zo epsilon must be in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.num_directions == 0 {
            return Err(Error::Config("zo num_directions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub z: Tensor,
}

pub fn sample_direction<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Direction {
    let data = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    Direction {
        z: Tensor::from_vec(data),
    }
}

/// Writes `base + sign·ε·z` into `out`.
fn perturb(out: &mut [f64], base: &[f64], z: &[f64], epsilon: f64, sign: f64) {
    for ((o, &b), &zi) in out.iter_mut().zip(base).zip(z) {
        *o = b + sign * epsilon * zi;
    }
}

struct SpsaSum {
    sum: Vec<f64>,
    epsilon: f64,
    directions: usize,
}

impl SpsaSum {
    fn new(d: usize, epsilon: f64) -> Self {
        Self {
            sum: vec![0.0; d],
            epsilon,
            directions: 0,
        }
    }

    fn add(&mut self, index: usize, z: &[f64], plus: f64, minus: f64) -> Result<()> {
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Estimation { direction: index });
        }
        let coef = (plus - minus) / (2.0 * self.epsilon);
        for (s, &zi) in self.sum.iter_mut().zip(z) {
            *s += coef * zi;
        }
        self.directions += 1;
        Ok(())
    }

    fn finish(mut self) -> Vec<f64> {
        let n = self.directions as f64;
        self.sum.iter_mut().for_each(|s| *s /= n);
        self.sum
    }
}

/// SPSA gradient of `loss_at` at `w`.
///
/// `w` is perturbed in place for each evaluation and restored bit-for-bit
/// before returning, including on error. Exactly `2·num_directions`
/// evaluations are made.
pub fn zo_estimate<F, R>(mut loss_at: F, w: &mut [f64], config: &ZoConfig, rng: &mut R) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    config.validate()?;
    let base = w.to_vec();
    let mut acc = SpsaSum::new(w.len(), config.epsilon);
    let mut run = || -> Result<()> {
        for j in 0..config.num_directions {
            let dir = sample_direction(base.len(), rng);
            let z = dir.z.data();
            perturb(w, &base, z, config.epsilon, 1.0);
            let plus = loss_at(w)?;
            perturb(w, &base, z, config.epsilon, -1.0);
            let minus = loss_at(w)?;
            acc.add(j, z, plus, minus)?;
        }
        Ok(())
    };
    let outcome = run();
    w.copy_from_slice(&base);
    outcome.map(|_| acc.finish())
}

/// Result of one server/client SPSA exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoExchange {
    pub losses_plus: Vec<f64>,
    pub losses_minus: Vec<f64>,
    pub gradient: Vec<f64>,
    /// Payloads in the order sent: kind and element count.
    pub messages: Vec<(MessageKind, usize)>,
}

/// SPSA estimate realized as messages: for each direction the server
/// computes `b± = E(w_E ± εz; h)` on its own weights and sends both down;
/// the client answers with the two scalar losses of its tail. The encoder
/// is restored bit-for-bit afterwards.
pub fn zo_messages<R: Rng + ?Sized>(
    encoder: &mut Encoder,
    client: &ClientModel,
    features: &FeatureBundle,
    labels: &[usize],
    config: &ZoConfig,
    rng: &mut R,
) -> Result<ZoExchange> {
    config.validate()?;
    let base = encoder.flat_values();
    let mut work = base.clone();
    let mut acc = SpsaSum::new(base.len(), config.epsilon);
    let mut exchange = ZoExchange {
        losses_plus: Vec::new(),
        losses_minus: Vec::new(),
        gradient: Vec::new(),
        messages: Vec::new(),
    };
    let mut run = |encoder: &mut Encoder| -> Result<()> {
        for j in 0..config.num_directions {
            let dir = sample_direction(base.len(), rng);
            let z = dir.z.data();

            perturb(&mut work, &base, z, config.epsilon, 1.0);
            encoder.load_flat(&work)?;
            let b_plus = encoder.apply(&features.h)?;
            perturb(&mut work, &base, z, config.epsilon, -1.0);
            encoder.load_flat(&work)?;
            let b_minus = encoder.apply(&features.h)?;
            exchange.messages.push((MessageKind::ZoSmashedPlus, b_plus.len()));
            exchange.messages.push((MessageKind::ZoSmashedMinus, b_minus.len()));

            // client side
            let plus = client.tail_loss(&b_plus, labels)?;
            let minus = client.tail_loss(&b_minus, labels)?;
            exchange.messages.push((MessageKind::ZoLossPlus, 1));
            exchange.messages.push((MessageKind::ZoLossMinus, 1));

            exchange.losses_plus.push(plus);
            exchange.losses_minus.push(minus);
            acc.add(j, z, plus, minus)?;
        }
        Ok(())
    };
    let outcome = run(encoder);
    encoder.load_flat(&base)?;
    outcome?;
    exchange.gradient = acc.finish();
    Ok(exchange)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};
    use crate::tensor::dot;

    fn half_sq(w: &[f64]) -> Result<f64> {
        Ok(0.5 * w.iter().map(|x| x * x).sum::<f64>())
    }

    #[test]
    fn direction_is_deterministic_per_seed() {
        let a = sample_direction(64, &mut stream(1, domain::ZO_DIRECTION, &[]));
        let b = sample_direction(64, &mut stream(1, domain::ZO_DIRECTION, &[]));
        let c = sample_direction(64, &mut stream(2, domain::ZO_DIRECTION, &[]));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.z.len(), 64);
    }

    #[test]
    fn quadratic_gives_projected_gradient() {
        let cfg = ZoConfig::default();
        let mut w = vec![3.0, -4.0];
        let g = zo_estimate(half_sq, &mut w, &cfg, &mut stream(5, domain::ZO_DIRECTION, &[])).unwrap();
        let z = sample_direction(2, &mut stream(5, domain::ZO_DIRECTION, &[])).z;
        let proj = dot(z.data(), &[3.0, -4.0]);
        for (gi, zi) in g.iter().zip(z.data()) {
            assert!((gi - proj * zi).abs() < 1e-8 * (1.0 + (proj * zi).abs()));
        }
        assert_eq!(w, vec![3.0, -4.0]);
    }

    #[test]
    fn evaluation_count_is_two_per_direction() {
        let cfg = ZoConfig {
            epsilon: 1e-3,
            num_directions: 7,
        };
        let mut calls = 0;
        let mut w = vec![1.0; 5];
        zo_estimate(
            |x| {
                calls += 1;
                half_sq(x)
            },
            &mut w,
            &cfg,
            &mut stream(0, domain::ZO_DIRECTION, &[]),
        )
        .unwrap();
        assert_eq!(calls, 14);
    }

    #[test]
    fn non_finite_loss_reports_direction_and_restores() {
        let cfg = ZoConfig {
            epsilon: 0.5,
            num_directions: 3,
        };
        let mut calls = 0;
        let original = vec![0.1, 0.2, 0.3];
        let mut w = original.clone();
        let err = zo_estimate(
            |x| {
                calls += 1;
                Ok(if calls == 4 { f64::NAN } else { half_sq(x)? })
            },
            &mut w,
            &cfg,
            &mut stream(0, domain::ZO_DIRECTION, &[]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Estimation { direction: 1 }));
        assert_eq!(w, original);
    }

    #[test]
    fn config_bounds() {
        for eps in [0.0, 1.0, -0.1, f64::NAN] {
            let c = ZoConfig {
                epsilon: eps,
                num_directions: 1,
            };
            assert!(c.validate().is_err());
        }
        assert!(ZoConfig {
            epsilon: 0.1,
            num_directions: 0
        }
        .validate()
        .is_err());
    }
}
