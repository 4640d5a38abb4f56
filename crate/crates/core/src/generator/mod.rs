//! Continuous-time Markov generator over discovered regimes.
//!
//! Column convention throughout: `L[(l, k)]` is the jump rate from mode `k`
//! to mode `l`, columns sum to zero and probabilities evolve as
//! `p(t + Δt) = exp(LΔt) p(t)`.

mod calibration;
mod estimation;
mod expm;
mod mfpt;
mod mle;

pub use calibration::{calibration_error, check_spectral_stability, spectral_stability};
pub use estimation::{
    assemble_generator, enforce_generator_validity, estimate_diffusion, estimate_drift,
    intercluster_distances, moment_generator, DiffusionEstimate, DriftEstimate, InterclusterDistances,
};
pub use expm::{expm, propagate_probabilities};
pub use mfpt::{mfpt, MfptResult};
pub use mle::{bootstrap_ci, mle_generator, BootstrapResult, Interval, Sojourn};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column sums of a valid generator are zero to this tolerance.
pub const COLUMN_SUM_TOL: f64 = 1e-12;
/// Largest admissible positive eigenvalue real part.
pub const SPECTRAL_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub mode: usize,
}

/// Time-ordered feature samples with their mode labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrajectory {
    k: usize,
    samples: Vec<LabeledSample>,
}

impl LabeledTrajectory {
    pub fn new(k: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.mode >= k {
                return Err(Error::InvalidState(format!("sample {i}: mode {} out of range 0..{k}", s.mode)));
            }
            if !s.t.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidState(format!("sample {i}: non-finite entry")));
            }
            if i > 0 && !(s.t > samples[i - 1].t) {
                return Err(Error::InvalidState(format!("sample {i}: timestamps not strictly increasing")));
            }
        }
        Ok(LabeledTrajectory { k, samples })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Jump counts, dwell times and transition index sets.
    pub fn transition_stats(&self) -> TransitionStats {
        let k = self.k;
        let mut stats = TransitionStats {
            k,
            transitions: vec![vec![Vec::new(); k]; k],
            counts: DMatrix::zeros(k, k),
            dwell: DVector::zeros(k),
        };
        for (i, w) in self.samples.windows(2).enumerate() {
            let (a, b) = (&w[0], &w[1]);
            stats.dwell[a.mode] += b.t - a.t;
            if a.mode != b.mode {
                stats.transitions[a.mode][b.mode].push(i);
                stats.counts[(a.mode, b.mode)] += 1.0;
            }
        }
        stats
    }

    /// Consecutive same-mode runs; the final run has no successor.
    pub fn sojourns(&self) -> Vec<Sojourn> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.samples.len() {
            if i == self.samples.len() || self.samples[i].mode != self.samples[start].mode {
                if i <= start {
                    break;
                }
                let end_t = if i < self.samples.len() { self.samples[i].t } else { self.samples[i - 1].t };
                out.push(Sojourn {
                    mode: self.samples[start].mode,
                    duration: end_t - self.samples[start].t,
                    next: self.samples.get(i).map(|s| s.mode),
                });
                start = i;
            }
        }
        out
    }
}

/// Sufficient statistics of a labeled trajectory. `counts[(k, l)]` is the
/// number of observed `k → l` jumps (row = origin).
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionStats {
    pub k: usize,
    pub transitions: Vec<Vec<Vec<usize>>>,
    pub counts: DMatrix<f64>,
    pub dwell: DVector<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMatrix(pub DMatrix<f64>);

impl GeneratorMatrix {
    pub fn zeros(k: usize) -> Self {
        GeneratorMatrix(DMatrix::zeros(k, k))
    }

    /// Builds a valid generator from off-diagonal rates; the diagonal is
    /// overwritten.
    pub fn from_rates(mut rates: DMatrix<f64>) -> Result<Self> {
        if !rates.is_square() {
            return Err(Error::InvalidState("generator must be square".into()));
        }
        let k = rates.nrows();
        for c in 0..k {
            rates[(c, c)] = 0.0;
            for r in 0..k {
                if r != c && !(rates[(r, c)] >= 0.0 && rates[(r, c)].is_finite()) {
                    return Err(Error::InvalidState(format!("rate ({r},{c}) = {} invalid", rates[(r, c)])));
                }
            }
            let s: f64 = rates.column(c).sum();
            rates[(c, c)] = -s;
        }
        Ok(GeneratorMatrix(rates))
    }

    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn max_abs_column_sum(&self) -> f64 {
        self.0.column_iter().map(|c| c.sum().abs()).fold(0.0, f64::max)
    }

    /// Off-diagonals nonnegative and columns summing to zero.
    pub fn is_valid(&self) -> bool {
        let k = self.k();
        let off_ok = (0..k).all(|c| (0..k).all(|r| r == c || self.0[(r, c)] >= 0.0));
        off_ok && self.0.iter().all(|v| v.is_finite()) && self.max_abs_column_sum() <= COLUMN_SUM_TOL * (1.0 + self.0.amax())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeProbabilities(pub DVector<f64>);

impl ModeProbabilities {
    pub fn uniform(k: usize) -> Self {
        ModeProbabilities(DVector::from_element(k, 1.0 / k as f64))
    }

    pub fn point(k: usize, j: usize) -> Self {
        let mut v = DVector::zeros(k);
        v[j] = 1.0;
        ModeProbabilities(v)
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        ModeProbabilities(DVector::from_vec(v))
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn on_simplex(&self, tol: f64) -> bool {
        self.0.iter().all(|&p| p >= -tol) && (self.0.sum() - 1.0).abs() <= tol
    }

    /// Clamps tiny negatives and rescales onto the simplex.
    pub fn renormalized(mut self) -> Result<Self> {
        for p in self.0.iter_mut() {
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let s = self.0.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidPrior);
        }
        self.0 /= s;
        Ok(self)
    }
}
