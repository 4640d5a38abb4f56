//! Seeded Monte Carlo comparison of co-state and EKF alarm times.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pipeline::{run_pipeline, PipelineConfig};
use crate::sim::{simulate_descent, DescentConfig, FaultConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub fault_onset_t: Option<f64>,
    pub costate_alarm_t: Option<f64>,
    pub ekf_alarm_t: Option<f64>,
    pub touchdown_t: Option<f64>,
    pub peak_hazard_prob: Option<f64>,
    pub warmup_hazard_prior: Option<f64>,
    pub costate_windows: usize,
    pub costate_alarm_rate: f64,
    pub ekf_windows: usize,
    pub ekf_alarm_rate: f64,
}

impl RunOutcome {
    /// A co-state alarm counts as first when the EKF never alarms.
    pub fn costate_first(&self) -> bool {
        match (self.costate_alarm_t, self.ekf_alarm_t) {
            (Some(c), Some(e)) => c < e,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub runs: usize,
    pub costate_first: usize,
    pub costate_alarms: usize,
    pub ekf_alarms: usize,
    /// Median delay from fault onset to the co-state alarm.
    pub median_costate_delay: Option<f64>,
    pub nominal_runs: usize,
    /// Pooled fraction of alarmed windows on fault-free runs.
    pub nominal_costate_false_alarm_rate: f64,
    pub nominal_ekf_false_alarm_rate: f64,
}

pub fn single_run(sim: &DescentConfig, fault: &FaultConfig, pipeline: &PipelineConfig, seed: u64) -> Result<RunOutcome> {
    let cfg = DescentConfig { seed, ..sim.clone() };
    let out = simulate_descent(&cfg, fault)?;
    let r = run_pipeline(&out.telemetry, pipeline)?.summary;
    Ok(RunOutcome {
        seed,
        fault_onset_t: out.fault_onset_t,
        costate_alarm_t: r.first_costate_alarm_t,
        ekf_alarm_t: r.first_ekf_alarm_t,
        touchdown_t: out.touchdown_t,
        peak_hazard_prob: r.peak_hazard_prob,
        warmup_hazard_prior: r.warmup_hazard_prior,
        costate_windows: r.costate_windows,
        costate_alarm_rate: r.costate_alarm_rate,
        ekf_windows: r.ekf_windows,
        ekf_alarm_rate: r.ekf_alarm_rate,
    })
}

/// Runs every seed, in parallel across available cores; results keep seed order.
pub fn batch(
    sim: &DescentConfig,
    fault: &FaultConfig,
    pipeline: &PipelineConfig,
    seeds: &[u64],
) -> Result<Vec<RunOutcome>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len().max(1));
    let chunk = seeds.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<RunOutcome>>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|&seed| single_run(sim, fault, pipeline, seed)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seeds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn pooled_rate(runs: &[RunOutcome], pick: impl Fn(&RunOutcome) -> (usize, f64)) -> f64 {
    let (mut windows, mut alarmed) = (0usize, 0.0);
    for r in runs {
        let (w, rate) = pick(r);
        windows += w;
        alarmed += rate * w as f64;
    }
    if windows == 0 {
        0.0
    } else {
        alarmed / windows as f64
    }
}

pub fn summarize(faulted: &[RunOutcome], nominal: &[RunOutcome]) -> CompareSummary {
    let mut delays: Vec<f64> = faulted
        .iter()
        .filter_map(|r| Some(r.costate_alarm_t? - r.fault_onset_t?))
        .collect();
    delays.sort_by(f64::total_cmp);
    CompareSummary {
        runs: faulted.len(),
        costate_first: faulted.iter().filter(|r| r.costate_first()).count(),
        costate_alarms: faulted.iter().filter(|r| r.costate_alarm_t.is_some()).count(),
        ekf_alarms: faulted.iter().filter(|r| r.ekf_alarm_t.is_some()).count(),
        median_costate_delay: (!delays.is_empty()).then(|| delays[delays.len() / 2]),
        nominal_runs: nominal.len(),
        nominal_costate_false_alarm_rate: pooled_rate(nominal, |r| (r.costate_windows, r.costate_alarm_rate)),
        nominal_ekf_false_alarm_rate: pooled_rate(nominal, |r| (r.ekf_windows, r.ekf_alarm_rate)),
    }
}
