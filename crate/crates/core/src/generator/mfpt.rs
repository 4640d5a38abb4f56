//! Mean first-passage time into a hazard set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::GeneratorMatrix;
use crate::error::{Error, Result};

/// Expected hitting times for each transient (non-hazard) mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfptResult {
    pub modes: Vec<usize>,
    pub times: Vec<f64>,
}

impl MfptResult {
    pub fn time_from(&self, mode: usize) -> Option<f64> {
        self.modes.iter().position(|&m| m == mode).map(|i| self.times[i])
    }
}

/// Solves `L̃ᵀ m = −1` on the transient modes.
pub fn mfpt(l: &GeneratorMatrix, hazard: &[usize]) -> Result<MfptResult> {
    let k = l.k();
    if hazard.is_empty() || hazard.iter().any(|&h| h >= k) {
        return Err(Error::InvalidState(format!("hazard set {hazard:?} invalid for {k} modes")));
    }
    let transient: Vec<usize> = (0..k).filter(|j| !hazard.contains(j)).collect();
    if transient.is_empty() {
        return Err(Error::InvalidState("hazard set covers every mode".into()));
    }

    // backward reachability from the hazard set along positive rates
    let mut reach = vec![false; k];
    for &h in hazard {
        reach[h] = true;
    }
    let mut changed = true;
    while changed {
        changed = false;
        for from in 0..k {
            if reach[from] {
                continue;
            }
            if (0..k).any(|to| to != from && reach[to] && l.0[(to, from)] > 0.0) {
                reach[from] = true;
                changed = true;
            }
        }
    }
    let stuck: Vec<usize> = transient.iter().copied().filter(|&j| !reach[j]).collect();
    if !stuck.is_empty() {
        return Err(Error::UnreachableHazard(stuck));
    }

    let n = transient.len();
    let sub_t = DMatrix::from_fn(n, n, |i, j| l.0[(transient[j], transient[i])]);
    let rhs = DVector::from_element(n, -1.0);
    let m = sub_t
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::UnreachableHazard(transient.clone()))?;
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical(format!("hitting times not finite and nonnegative: {m:?}")));
    }
    Ok(MfptResult { modes: transient, times: m.iter().copied().collect() })
}
