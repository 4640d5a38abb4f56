//! Closed-form maximum-likelihood generator and sojourn bootstrap.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mfpt, GeneratorMatrix, LabeledTrajectory};
use crate::error::{Error, Result};

/// `L̂[(l, k)] = N_kl / T_k`. `counts` is indexed origin-row.
///
/// Maximizes `Σ N_kl log L_kl + Σ_k L_kk T_k` subject to nonnegative rates
/// and zero column sums.
pub fn mle_generator(counts: &DMatrix<f64>, dwell: &DVector<f64>) -> Result<GeneratorMatrix> {
    let k = dwell.len();
    if counts.nrows() != k || counts.ncols() != k {
        return Err(Error::InvalidState("jump-count and dwell dimensions differ".into()));
    }
    let mut rates = DMatrix::zeros(k, k);
    for from in 0..k {
        let jumps: f64 = (0..k).filter(|&to| to != from).map(|to| counts[(from, to)]).sum();
        if jumps == 0.0 {
            continue;
        }
        if !(dwell[from] > 0.0) {
            return Err(Error::DegenerateDwell(from));
        }
        for to in 0..k {
            if to != from {
                rates[(to, from)] = counts[(from, to)] / dwell[from];
            }
        }
    }
    GeneratorMatrix::from_rates(rates)
}

/// A maximal run in one mode and the mode it jumped to (if any).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sojourn {
    pub mode: usize,
    pub duration: f64,
    pub next: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// `rates[(l, k)]`: interval for the `k → l` rate (diagonal included).
    pub rates: Vec<Vec<Interval>>,
    /// Per transient mode, when a hazard set was supplied.
    pub mfpt: Option<Vec<(usize, Interval)>>,
    pub resamples: usize,
}

impl BootstrapResult {
    pub fn rate(&self, from: usize, to: usize) -> Interval {
        self.rates[to][from]
    }
}

/// Linear-interpolation sample quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn interval(mut v: Vec<f64>, confidence: f64) -> Interval {
    v.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - confidence);
    Interval { lower: quantile(&v, tail), upper: quantile(&v, 1.0 - tail) }
}

/// Percentile bootstrap over sojourn segments. Each resample draws the
/// trajectory's sojourns with replacement, re-accumulates jump counts and
/// dwell times, and refits the closed-form MLE.
pub fn bootstrap_ci(
    traj: &LabeledTrajectory,
    resamples: usize,
    confidence: f64,
    hazard: Option<&[usize]>,
    seed: u64,
) -> Result<BootstrapResult> {
    if resamples < 100 {
        return Err(Error::InvalidConfig(format!("bootstrap needs at least 100 resamples, got {resamples}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidConfig(format!("confidence {confidence} outside (0, 1)")));
    }
    let k = traj.k();
    let blocks = traj.sojourns();
    if blocks.is_empty() {
        return Err(Error::InvalidState("no sojourns to resample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: Vec<Vec<Vec<f64>>> = vec![vec![Vec::with_capacity(resamples); k]; k];
    let mut mfpt_draws: Vec<Vec<f64>> = vec![Vec::new(); k];
    let mut counts = DMatrix::zeros(k, k);
    let mut dwell = DVector::zeros(k);
    for _ in 0..resamples {
        counts.fill(0.0);
        dwell.fill(0.0);
        for _ in 0..blocks.len() {
            let b = &blocks[rng.random_range(0..blocks.len())];
            dwell[b.mode] += b.duration;
            if let Some(n) = b.next {
                counts[(b.mode, n)] += 1.0;
            }
        }
        let l = match mle_generator(&counts, &dwell) {
            Ok(l) => l,
            Err(_) => continue,
        };
        for to in 0..k {
            for from in 0..k {
                draws[to][from].push(l.0[(to, from)]);
            }
        }
        if let Some(h) = hazard {
            if let Ok(m) = mfpt(&l, h) {
                for (mode, t) in m.modes.iter().zip(m.times) {
                    mfpt_draws[*mode].push(t);
                }
            }
        }
    }
    let rates = draws
        .into_iter()
        .map(|row| row.into_iter().map(|v| interval(v, confidence)).collect())
        .collect();
    let mfpt = hazard.map(|h| {
        (0..k)
            .filter(|j| !h.contains(j))
            .map(|j| (j, interval(std::mem::take(&mut mfpt_draws[j]), confidence)))
            .collect()
    });
    Ok(BootstrapResult { rates, mfpt, resamples })
}

#[cfg(test)]
mod tests {
    use super::super::LabeledSample;
    use super::*;
    use approx::assert_relative_eq;

    /// Grid maximization of the rate log-likelihood for one origin mode.
    fn grid_argmax(n: f64, t: f64) -> f64 {
        let ll = |r: f64| n * r.ln() - r * t;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 1..=500_000 {
            let r = i as f64 * 1e-5;
            let v = ll(r);
            if v > best.0 {
                best = (v, r);
            }
        }
        best.1
    }

    #[test]
    fn closed_form_matches_likelihood_grid() {
        let mut counts = DMatrix::zeros(2, 2);
        counts[(0, 1)] = 2.0;
        let dwell = DVector::from_vec(vec![4.0, 1.0]);
        let l = mle_generator(&counts, &dwell).unwrap();
        assert_relative_eq!(l.0[(1, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(l.0[(1, 0)], grid_argmax(2.0, 4.0), epsilon = 1e-5);
        assert_relative_eq!(grid_argmax(7.0, 3.0), 7.0 / 3.0, epsilon = 1e-5);
    }

    #[test]
    fn no_jumps_gives_zero() {
        let l = mle_generator(&DMatrix::zeros(3, 3), &DVector::from_vec(vec![1.0, 0.0, 2.0])).unwrap();
        assert_eq!(l.0, DMatrix::zeros(3, 3));
    }

    #[test]
    fn zero_dwell_with_jumps_is_degenerate() {
        let mut counts = DMatrix::zeros(2, 2);
        counts[(1, 0)] = 1.0;
        let err = mle_generator(&counts, &DVector::from_vec(vec![1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateDwell(1)));
    }

    fn periodic(horizon: usize) -> LabeledTrajectory {
        // mode 0 for 1 s, mode 1 for 1 s, sampled every 0.5 s
        let samples = (0..horizon)
            .map(|i| LabeledSample { t: i as f64 * 0.5, x: vec![0.0], mode: (i / 2) % 2 })
            .collect();
        LabeledTrajectory::new(2, samples).unwrap()
    }

    #[test]
    fn deterministic_jumps_shrink_interval() {
        let short = bootstrap_ci(&periodic(42), 200, 0.95, None, 1).unwrap();
        let long = bootstrap_ci(&periodic(802), 200, 0.95, None, 1).unwrap();
        assert!(long.rate(0, 1).width() < short.rate(0, 1).width());
        assert!(long.rate(0, 1).contains(1.0));
        assert!(long.rate(0, 1).width() < 0.1);
    }

    #[test]
    fn sojourns_cover_trajectory() {
        let t = periodic(9);
        let s = t.sojourns();
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], Sojourn { mode: 0, duration: 1.0, next: Some(1) });
        assert_eq!(s[4], Sojourn { mode: 0, duration: 0.0, next: None });
        let total: f64 = s.iter().map(|x| x.duration).sum();
        assert_relative_eq!(total, t.transition_stats().dwell.sum(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_small_resample_count() {
        assert!(bootstrap_ci(&periodic(9), 50, 0.95, None, 0).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.125), 1.5);
    }
}
