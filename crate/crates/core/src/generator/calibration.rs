//! Generator diagnostics: one-step calibration and spectral stability.

use super::{expm, GeneratorMatrix, ModeProbabilities, SPECTRAL_TOL};
use crate::error::{Error, Result};

/// `‖exp(LΔt) p − p̂‖₁`.
pub fn calibration_error(
    l: &GeneratorMatrix,
    dt: f64,
    p: &ModeProbabilities,
    empirical: &ModeProbabilities,
) -> Result<f64> {
    if l.k() != p.k() || p.k() != empirical.k() {
        return Err(Error::InvalidState("mode-count mismatch in calibration".into()));
    }
    let e = expm(&(&l.0 * dt))?;
    Ok((e * &p.0 - &empirical.0).lp_norm(1))
}

/// Real parts of the eigenvalues of `L`.
pub fn spectral_stability(l: &GeneratorMatrix) -> Vec<f64> {
    l.0.complex_eigenvalues().iter().map(|c| c.re).collect()
}

/// Errors when any eigenvalue real part exceeds `SPECTRAL_TOL`.
pub fn check_spectral_stability(l: &GeneratorMatrix) -> Result<Vec<f64>> {
    let re = spectral_stability(l);
    let max = re.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > SPECTRAL_TOL {
        log::warn!("generator has eigenvalue real part {max:e}");
        return Err(Error::Numerical(format!("eigenvalue real part {max:e} exceeds {SPECTRAL_TOL:e}")));
    }
    Ok(re)
}
