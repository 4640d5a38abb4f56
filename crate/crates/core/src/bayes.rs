//! Exponential co-state reweighting of mode probabilities.
//!
//! `p̂_k ∝ exp(λ̄_kᵀΔλ − ½‖λ̄_k‖²Δt) p_k`, evaluated in the log domain.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::ModeProbabilities;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectionConfig {
    pub temper_threshold: f64,
    pub temper_scale: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig { temper_threshold: 30.0, temper_scale: 0.5 }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temper_threshold > 0.0) || !(self.temper_scale > 0.0 && self.temper_scale <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tempering needs threshold > 0 and scale in (0, 1], got {} / {}",
                self.temper_threshold, self.temper_scale
            )));
        }
        Ok(())
    }
}

/// Raw log-weights `λ̄_kᵀΔλ − ½‖λ̄_k‖²Δt`.
pub fn log_weights(centroids: &[Vector3<f64>], delta_lambda: &Vector3<f64>, dt: f64) -> Vec<f64> {
    centroids
        .iter()
        .map(|c| c.dot(delta_lambda) - 0.5 * c.norm_squared() * dt)
        .collect()
}

/// Compresses the part of a centered log-weight beyond the threshold.
/// Monotone, so the ordering of the weights is unchanged.
fn temper(w: f64, cfg: &CorrectionConfig) -> f64 {
    if w.abs() > cfg.temper_threshold {
        w.signum() * (cfg.temper_threshold + cfg.temper_scale * (w.abs() - cfg.temper_threshold))
    } else {
        w
    }
}

pub fn correct_probabilities(
    p: &ModeProbabilities,
    centroids: &[Vector3<f64>],
    delta_lambda: &Vector3<f64>,
    dt: f64,
    cfg: &CorrectionConfig,
) -> Result<ModeProbabilities> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInterval(dt));
    }
    if centroids.len() != p.k() {
        return Err(Error::InvalidState(format!(
            "{} centroids for {} modes",
            centroids.len(),
            p.k()
        )));
    }
    if p.0.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidState("mode probabilities must be finite and nonnegative".into()));
    }
    if p.0.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidPrior);
    }
    let raw = log_weights(centroids, delta_lambda, dt);
    if raw.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numerical("non-finite co-state log-weight".into()));
    }
    // centre on the largest supported weight so every exponent is ≤ 0
    let top = raw
        .iter()
        .zip(p.0.iter())
        .filter(|(_, &pk)| pk > 0.0)
        .map(|(w, _)| *w)
        .fold(f64::NEG_INFINITY, f64::max);
    let logs: Vec<f64> = raw
        .iter()
        .zip(p.0.iter())
        .map(|(w, &pk)| if pk > 0.0 { temper(w - top, cfg) + pk.ln() } else { f64::NEG_INFINITY })
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let out = DVector::from_iterator(logs.len(), logs.iter().map(|l| (l - lse).exp()));
    let s = out.sum();
    Ok(ModeProbabilities(out / s))
}
