//! Independent continuous-time Markov chain sampling for oracle checks.

#![allow(dead_code)]

use costate_core::generator::{GeneratorMatrix, LabeledSample, LabeledTrajectory};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Generator with off-diagonal rates uniform in `[lo, hi]`; `rates[(to, from)]`.
pub fn random_generator(rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64) -> GeneratorMatrix {
    let r = DMatrix::from_fn(k, k, |i, j| if i == j { 0.0 } else { rng.random_range(lo..=hi) });
    GeneratorMatrix::from_rates(r).unwrap()
}

fn exit_rate(l: &GeneratorMatrix, from: usize) -> f64 {
    -l.0[(from, from)]
}

/// Draws the next mode after leaving `from`, proportional to its rates.
fn next_mode(l: &GeneratorMatrix, from: usize, rng: &mut ChaCha8Rng) -> usize {
    let total = exit_rate(l, from);
    let mut u = rng.random::<f64>() * total;
    let k = l.k();
    let mut last = from;
    for to in (0..k).filter(|&to| to != from) {
        let r = l.0[(to, from)];
        if r > 0.0 {
            last = to;
            if u < r {
                return to;
            }
            u -= r;
        }
    }
    last
}

fn holding_time(rate: f64, rng: &mut ChaCha8Rng) -> f64 {
    // inverse-CDF exponential draw; 1 − U avoids ln(0)
    -(1.0 - rng.random::<f64>()).ln() / rate
}

/// Time to first enter `hazard` from `start` (gives up at `cap`).
pub fn first_passage(l: &GeneratorMatrix, start: usize, hazard: &[usize], cap: f64, rng: &mut ChaCha8Rng) -> f64 {
    let mut mode = start;
    let mut t = 0.0;
    while !hazard.contains(&mode) {
        let q = exit_rate(l, mode);
        if q <= 0.0 {
            return f64::INFINITY;
        }
        t += holding_time(q, rng);
        if t > cap {
            return f64::INFINITY;
        }
        mode = next_mode(l, mode, rng);
    }
    t
}

/// Exact path sampled at its jump times, continued until every mode's dwell
/// reaches `min_dwell[mode]`.
pub fn sample_path(l: &GeneratorMatrix, start: usize, min_dwell: &[f64], rng: &mut ChaCha8Rng) -> LabeledTrajectory {
    let k = l.k();
    let mut dwell = vec![0.0; k];
    let mut mode = start;
    let mut t = 0.0;
    let mut samples = vec![LabeledSample { t, x: vec![], mode }];
    while (0..k).any(|j| dwell[j] < min_dwell[j]) {
        let h = holding_time(exit_rate(l, mode), rng);
        dwell[mode] += h;
        t += h;
        mode = next_mode(l, mode, rng);
        samples.push(LabeledSample { t, x: vec![], mode });
    }
    LabeledTrajectory::new(k, samples).unwrap()
}

pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
