use crate::error::{Error, Result};

/// Central-difference gradient of `loss_fn` at `w`, one coordinate at a time.
pub fn finite_difference_grad<F>(mut loss_fn: F, w: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = w.to_vec();
    let mut grad = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        probe[i] = w[i] + step;
        let up = loss_fn(&probe)?;
        probe[i] = w[i] - step;
        let down = loss_fn(&probe)?;
        probe[i] = w[i];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}
