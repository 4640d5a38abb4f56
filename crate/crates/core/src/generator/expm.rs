//! Matrix exponential by scaling and squaring around a truncated Taylor core.

use nalgebra::DMatrix;

use super::{GeneratorMatrix, ModeProbabilities};
use crate::error::{Error, Result};

const MAX_TAYLOR_TERMS: usize = 40;

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// `exp(A)`. `A` is scaled by `2^-s` so that `‖A‖₁ 2^-s ≤ 1/2`; the Taylor
/// series is cut once the tail bound `‖B‖^{n+1}/(n+1)! · 1/(1 − ‖B‖/(n+2))`
/// drops below machine precision relative to the leading identity.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Numerical("matrix exponential of a non-square matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential of a non-finite matrix".into()));
    }
    let n = a.nrows();
    let norm = norm1(a);
    let mut s = 0i32;
    if norm > 0.5 {
        s = (norm / 0.5).log2().ceil() as i32;
    }
    let b = a / 2f64.powi(s);
    let bn = norm1(&b);

    let mut result = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    let mut bound = 1.0;
    for j in 1..=MAX_TAYLOR_TERMS {
        term = &term * &b / j as f64;
        result += &term;
        bound *= bn / j as f64;
        let tail = bound * bn / (j + 1) as f64 / (1.0 - bn / (j + 2) as f64);
        if tail <= f64::EPSILON * 1e-3 {
            break;
        }
    }
    for _ in 0..s {
        result = &result * &result;
    }
    Ok(result)
}

/// `p′ = exp(LΔt) p`, renormalized if it strays from the simplex by more
/// than `1e-12`.
pub fn propagate_probabilities(l: &GeneratorMatrix, p: &ModeProbabilities, dt: f64) -> Result<ModeProbabilities> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInterval(dt));
    }
    if l.k() != p.k() {
        return Err(Error::InvalidState(format!("generator has {} modes, probabilities {}", l.k(), p.k())));
    }
    let e = expm(&(&l.0 * dt))?;
    let out = ModeProbabilities(e * &p.0);
    if out.on_simplex(1e-12) {
        Ok(out)
    } else {
        out.renormalized()
    }
}
