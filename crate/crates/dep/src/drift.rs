//! Language-prior drift correction in logit space.
//!
//! The mean displacement of the perturbed logits away from the original
//! estimates the direction the language prior pushes the next token; the
//! correction subtracts a multiple of it from the calibrated logits.

use serde::{Deserialize, Serialize};

use crate::core::LogitVector;
use crate::error::{DepError, Result};

/// Estimated prior drift over the vocabulary, with the guidance strength it
/// was (or will be) applied at.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DriftVector {
    values: Vec<f64>,
    beta: f64,
}

impl DriftVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Records the strength this drift is applied at.
    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !beta.is_finite() || beta < 0.0 {
            return Err(DepError::invalid(
                "drift",
                format!("beta {beta} must be a non-negative real"),
            ));
        }
        self.beta = beta;
        Ok(self)
    }

    /// Token indices of the k largest absolute drift components, descending
    /// by magnitude (ties to the lowest index).
    pub fn top_k(&self, k: usize) -> Vec<(usize, f64)> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|a, b| {
            self.values[*b]
                .abs()
                .total_cmp(&self.values[*a].abs())
                .then(a.cmp(b))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| (i, self.values[i]))
            .collect()
    }
}

/// Mean of the per-variant differences from the original logits. Averaging
/// the differences (rather than differencing the averages) makes an
/// all-identity probe set yield an exactly zero drift; the two orders agree
/// within 1e-12 otherwise.
pub fn drift_direction(perturbed: &[LogitVector], original: &LogitVector) -> Result<DriftVector> {
    if perturbed.is_empty() {
        return Err(DepError::invalid("drift", "no perturbed logit vectors"));
    }
    let n = original.len();
    if let Some(bad) = perturbed.iter().find(|l| l.len() != n) {
        return Err(DepError::invalid(
            "drift",
            format!("perturbed length {} differs from original {n}", bad.len()),
        ));
    }
    let m = perturbed.len() as f64;
    let mut values = vec![0.0; n];
    for l in perturbed {
        for (acc, (p, o)) in values.iter_mut().zip(l.values().iter().zip(original.values())) {
            *acc += p - o;
        }
    }
    for v in &mut values {
        *v /= m;
    }
    Ok(DriftVector { values, beta: 0.0 })
}

/// z = z★ − β·Δ, over the full vocabulary, no clipping or renormalization.
pub fn apply_drift_penalty(z_star: &LogitVector, d: &DriftVector, beta: f64) -> Result<LogitVector> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(DepError::invalid(
            "drift",
            format!("beta {beta} must be a non-negative real"),
        ));
    }
    if d.values.len() != z_star.len() {
        return Err(DepError::invalid(
            "drift",
            format!(
                "drift length {} differs from logits {}",
                d.values.len(),
                z_star.len()
            ),
        ));
    }
    LogitVector::new(
        z_star
            .values()
            .iter()
            .zip(&d.values)
            .map(|(z, dv)| z - beta * dv)
            .collect(),
    )
}
