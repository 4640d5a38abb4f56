//! Online co-state fusion over an arriving telemetry stream.
//!
//! Each sample yields a co-state, a whitened innovation and a regime label;
//! mode probabilities are propagated through a periodically refit generator
//! and sharpened by co-state reweighting. A baseline EKF runs alongside so
//! both alarm streams come from the same data.
//!
//! Late samples are folded in by restoring the checkpoint taken just before
//! the first sample they precede and replaying forward. Everything the
//! replay touches is either in the checkpointed core or in an append-only
//! log truncated to its checkpointed length, so the result is identical to
//! processing the stream in measurement-time order.

pub mod io;

use std::collections::VecDeque;

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::alarm::WindowedAlarm;
use crate::bayes::{correct_probabilities, CorrectionConfig};
use crate::costate::{
    adaptive_eps, info_weighting, lyapunov_value, project_state_update_with_accel, regularized_gram_inverse,
    rolling_rms_sigma, whitened_innovation, CoState, InnovationWindow, WeightingMatrix, DEFAULT_SIGMA_MIN,
    DEFAULT_WINDOW,
};
use crate::ekf::{chi2_3_quantile, ekf_predict_with_accel, ekf_update, process_noise, EkfState};
use crate::error::{Error, Result};
use crate::generator::{
    calibration_error, mfpt, mle_generator, moment_generator, propagate_probabilities, GeneratorMatrix,
    LabeledSample, LabeledTrajectory, MfptResult, ModeProbabilities,
};
use crate::measurement::{eval_dynamics_with_accel, eval_jacobian, predicted_increment_with_accel, Measurement, StateVector};
use crate::regimes::{extract_features, FeatureSelection, ModeLabel, ModeModel, DEFAULT_MIN_SEPARATION, DEFAULT_MODES, DEFAULT_WARMUP};
use crate::sim::{DescentConfig, TelemetrySample, LUNAR_GRAVITY};

/// Windowed-mean detector on `‖λ‖`. The threshold is
/// `μ + κ σ / √window`, with `μ, σ` the per-sample mean and standard
/// deviation of `‖λ‖` over warm-up, so `κ` counts standard errors of a
/// window mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostateAlarmConfig {
    pub window: usize,
    pub consecutive: usize,
    pub kappa: f64,
}

impl Default for CostateAlarmConfig {
    fn default() -> Self {
        CostateAlarmConfig { window: 20, consecutive: 3, kappa: 6.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NisAlarmConfig {
    pub window: usize,
    pub consecutive: usize,
    pub level: f64,
}

impl Default for NisAlarmConfig {
    fn default() -> Self {
        NisAlarmConfig { window: 20, consecutive: 3, level: 0.999 }
    }
}

/// Noise levels the estimators assume; defaults match the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub meas_std: [f64; 3],
    pub thrust_noise_frac: f64,
    pub accel_noise: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::from(&DescentConfig::default())
    }
}

impl From<&DescentConfig> for NoiseModel {
    fn from(d: &DescentConfig) -> Self {
        NoiseModel { meas_std: d.noise_std, thrust_noise_frac: d.thrust_noise_frac, accel_noise: d.accel_noise }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Weighting {
    /// Per-channel RMS of recent innovations.
    RollingRms,
    /// `σ⁻² ∝ diag(α HQHᵀ + βI)` with `Q = I`.
    Information { alpha: f64, beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorEstimator {
    /// Jump-count MLE, falling back to moments when it fails.
    Mle,
    Moments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub modes: usize,
    pub warmup: usize,
    pub min_separation: f64,
    /// Parts of the feature vector used for clustering.
    pub features: FeatureSelection,
    pub rms_window: usize,
    pub sigma_min: f64,
    pub weighting: Weighting,
    pub estimator: GeneratorEstimator,
    pub refit_every: usize,
    pub refit_window: usize,
    pub calibration_block: usize,
    pub oosm_buffer: usize,
    pub bayes: CorrectionConfig,
    /// Reweighting fires when `‖Δλ‖` reaches this quantile of recent steps.
    pub bayes_quantile: f64,
    pub bayes_history: usize,
    pub costate_alarm: CostateAlarmConfig,
    pub ekf_alarm: NisAlarmConfig,
    pub noise: NoiseModel,
    /// Prior state estimate at the first sample.
    pub initial_state: [f64; 6],
    /// EKF prior standard deviations for position and velocity.
    pub initial_std: [f64; 2],
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            modes: DEFAULT_MODES,
            warmup: DEFAULT_WARMUP,
            min_separation: DEFAULT_MIN_SEPARATION,
            features: FeatureSelection::default(),
            rms_window: DEFAULT_WINDOW,
            sigma_min: DEFAULT_SIGMA_MIN,
            weighting: Weighting::RollingRms,
            estimator: GeneratorEstimator::Mle,
            refit_every: 100,
            refit_window: 400,
            calibration_block: 20,
            oosm_buffer: 10,
            bayes: CorrectionConfig::default(),
            bayes_quantile: 0.9,
            bayes_history: 100,
            costate_alarm: CostateAlarmConfig::default(),
            ekf_alarm: NisAlarmConfig::default(),
            noise: NoiseModel::default(),
            initial_state: DescentConfig::default().initial_state().0.into(),
            initial_std: [10.0, 1.0],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.modes < 2 {
            return bad("at least two modes are required");
        }
        if self.warmup < self.modes {
            return bad("warm-up must hold at least one sample per mode");
        }
        if self.rms_window == 0 || self.refit_every == 0 || self.refit_window < 2 || self.calibration_block == 0 {
            return bad("window, cadence and block sizes must be positive");
        }
        if !(self.sigma_min > 0.0) || !(self.min_separation >= 0.0) {
            return bad("sigma_min must be positive and min_separation nonnegative");
        }
        self.features.validate()?;
        if let Weighting::Information { alpha, beta } = self.weighting {
            if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0) {
                return bad("information weighting needs alpha, beta >= 0, not both zero");
            }
        }
        if !(0.0..=1.0).contains(&self.bayes_quantile) || self.bayes_history == 0 {
            return bad("bayes quantile must lie in [0, 1] with a nonempty history");
        }
        self.bayes.validate()?;
        let c = &self.costate_alarm;
        if c.window == 0 || c.consecutive == 0 || !(c.kappa >= 0.0) {
            return bad("co-state alarm needs positive window/consecutive and kappa >= 0");
        }
        let e = &self.ekf_alarm;
        if e.window == 0 || e.consecutive == 0 || !(e.level > 0.0 && e.level < 1.0) {
            return bad("NIS alarm needs positive window/consecutive and level in (0, 1)");
        }
        if self.noise.meas_std.iter().any(|s| !(*s > 0.0)) {
            return bad("measurement noise std must be positive");
        }
        if !(self.noise.thrust_noise_frac >= 0.0) || !(self.noise.accel_noise >= 0.0) {
            return bad("process noise levels must be nonnegative");
        }
        if self.initial_state.iter().any(|v| !v.is_finite()) || self.initial_std.iter().any(|s| !(*s > 0.0)) {
            return bad("initial state must be finite and its std positive");
        }
        Ok(())
    }
}

/// Per-step nominal statistics of `‖λ‖` frozen at warm-up end.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NominalStats {
    pub mean: f64,
    pub std: f64,
}

impl NominalStats {
    /// Population mean and standard deviation.
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len().max(1) as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        NominalStats { mean, std: var.sqrt() }
    }

    pub fn threshold(&self, cfg: &CostateAlarmConfig) -> f64 {
        self.mean + cfg.kappa * self.std / (cfg.window as f64).sqrt()
    }
}

/// First alarm time of the co-state detector over `(t, ‖λ‖)` rows.
pub fn costate_alarm(trace: &[(f64, f64)], nominal: &NominalStats, cfg: &CostateAlarmConfig) -> Option<f64> {
    let mut a = WindowedAlarm::new(cfg.window, cfg.consecutive, nominal.threshold(cfg));
    for &(t, v) in trace {
        a.push(t, v);
    }
    a.first_alarm_t()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalRow {
    pub t: f64,
    pub lambda: [f64; 3],
    pub lambda_norm: f64,
    pub z: f64,
    pub mode: Option<usize>,
    /// Empty until warm-up clustering succeeds.
    pub probs: Vec<f64>,
    pub hazard_prob: Option<f64>,
    pub mfpt: Option<f64>,
    /// Probabilities before co-state reweighting; empty when it did not fire.
    pub pre_correction: Vec<f64>,
    pub lyapunov: f64,
    pub nis: f64,
    pub costate_alarm: bool,
    pub ekf_alarm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub first_costate_alarm_t: Option<f64>,
    pub first_ekf_alarm_t: Option<f64>,
    pub peak_hazard_prob: Option<f64>,
    pub mean_calibration_error: Option<f64>,
    /// Last sample time extrapolated to zero altitude at its descent rate.
    pub touchdown_t: Option<f64>,
    pub config_echo: PipelineConfig,
    pub warmup_hazard_prior: Option<f64>,
    pub costate_threshold: Option<f64>,
    pub nominal: Option<NominalStats>,
    pub ekf_threshold: f64,
    pub costate_windows: usize,
    pub costate_alarm_rate: f64,
    pub ekf_windows: usize,
    pub ekf_alarm_rate: f64,
    pub calibration_errors: Vec<f64>,
    /// Last fitted generator, row-major.
    pub generator: Option<Vec<Vec<f64>>>,
    pub mode_labels: Option<Vec<ModeLabel>>,
    pub hazard_modes: Vec<usize>,
    pub samples_processed: usize,
    pub samples_skipped: usize,
    pub samples_dropped: usize,
    pub replays: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskReport {
    pub rows: Vec<SignalRow>,
    pub summary: RunSummary,
}

#[derive(Clone, Debug)]
struct WarmEntry {
    t: f64,
    scaled_resid: Vector3<f64>,
    gram_inv: Matrix3<f64>,
    z: f64,
}

#[derive(Clone, Debug)]
struct Anchor {
    t: f64,
    y: Measurement,
    x: StateVector,
}

#[derive(Clone, Debug)]
struct CalibBlock {
    start_t: f64,
    p0: ModeProbabilities,
    counts: Vec<usize>,
    n: usize,
}

#[derive(Clone, Debug)]
struct Core {
    last: Option<Anchor>,
    window: InnovationWindow,
    sigma_ref: Option<WeightingMatrix>,
    ekf: Option<EkfState>,
    model: Option<ModeModel>,
    clustering_failed: bool,
    generator: Option<GeneratorMatrix>,
    hazard: Vec<usize>,
    mfpt: Option<MfptResult>,
    p: Option<ModeProbabilities>,
    prev_std_lambda: Option<Vector3<f64>>,
    /// Maps standardized co-states to units whose step-to-step noise has
    /// variance `Δt` per channel.
    bayes_scale: f64,
    dl_history: VecDeque<f64>,
    since_refit: usize,
    nominal: Option<NominalStats>,
    warmup_prior: Option<f64>,
    costate_alarm: Option<WindowedAlarm>,
    ekf_alarm: WindowedAlarm,
    calib: Option<CalibBlock>,
}

#[derive(Clone, Copy, Debug)]
struct LogLens {
    rows: usize,
    warm: usize,
    labeled: usize,
    calib: usize,
    diag: usize,
}

#[derive(Clone, Debug)]
struct Checkpoint {
    core: Core,
    lens: LogLens,
}

/// Streaming pipeline; feed samples in arrival order with [`Pipeline::push`].
pub struct Pipeline {
    cfg: PipelineConfig,
    core: Core,
    rows: Vec<SignalRow>,
    warm: Vec<WarmEntry>,
    labeled: Vec<LabeledSample>,
    calib: Vec<f64>,
    diag: Vec<String>,
    intake_diag: Vec<String>,
    ring: VecDeque<(TelemetrySample, Checkpoint)>,
    processed_total: usize,
    skipped: usize,
    dropped: usize,
    replays: usize,
    r_meas: Matrix3<f64>,
}

fn quantile(values: &VecDeque<f64>, q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let r_meas = meas_covariance(&cfg);
        let core = Core {
            last: None,
            window: InnovationWindow::new(cfg.rms_window),
            sigma_ref: None,
            ekf: None,
            model: None,
            clustering_failed: false,
            generator: None,
            hazard: Vec::new(),
            mfpt: None,
            p: None,
            prev_std_lambda: None,
            bayes_scale: 1.0,
            dl_history: VecDeque::with_capacity(cfg.bayes_history),
            since_refit: 0,
            nominal: None,
            warmup_prior: None,
            costate_alarm: None,
            ekf_alarm: WindowedAlarm::new(
                cfg.ekf_alarm.window,
                cfg.ekf_alarm.consecutive,
                chi2_3_quantile(cfg.ekf_alarm.level),
            ),
            calib: None,
        };
        Ok(Pipeline {
            cfg,
            core,
            rows: Vec::new(),
            warm: Vec::new(),
            labeled: Vec::new(),
            calib: Vec::new(),
            diag: Vec::new(),
            intake_diag: Vec::new(),
            ring: VecDeque::new(),
            processed_total: 0,
            skipped: 0,
            dropped: 0,
            replays: 0,
            r_meas,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn rows(&self) -> &[SignalRow] {
        &self.rows
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            core: self.core.clone(),
            lens: LogLens {
                rows: self.rows.len(),
                warm: self.warm.len(),
                labeled: self.labeled.len(),
                calib: self.calib.len(),
                diag: self.diag.len(),
            },
        }
    }

    fn restore(&mut self, cp: Checkpoint) {
        self.core = cp.core;
        self.rows.truncate(cp.lens.rows);
        self.warm.truncate(cp.lens.warm);
        self.labeled.truncate(cp.lens.labeled);
        self.calib.truncate(cp.lens.calib);
        self.diag.truncate(cp.lens.diag);
    }

    /// Feeds one sample. Non-finite samples are skipped; samples older than
    /// the replay buffer are dropped. Both are reported as diagnostics.
    pub fn push(&mut self, s: TelemetrySample) -> Result<()> {
        if !(s.t.is_finite() && s.y.is_finite() && s.accel_cmd.iter().all(|v| v.is_finite())) {
            self.skipped += 1;
            self.intake_diag.push(format!("skipped sample at t={}: non-finite field", s.t));
            return Ok(());
        }
        let last_t = match &self.core.last {
            None => return self.process_new(s),
            Some(a) => a.t,
        };
        if s.t > last_t {
            return self.process_new(s);
        }
        if self.ring.iter().any(|(r, _)| r.t == s.t) {
            self.skipped += 1;
            self.intake_diag.push(format!("skipped sample at t={}: duplicate timestamp", s.t));
            return Ok(());
        }
        let idx = self.ring.iter().position(|(r, _)| r.t > s.t).expect("sample precedes the newest processed one");
        if idx == 0 && self.processed_total > self.ring.len() {
            self.dropped += 1;
            self.intake_diag.push(format!(
                "dropped sample at t={} (arrival {}): later than the {}-sample replay buffer",
                s.t, s.arrival_t, self.cfg.oosm_buffer
            ));
            return Ok(());
        }
        self.replays += 1;
        let tail: Vec<(TelemetrySample, Checkpoint)> = self.ring.drain(idx..).collect();
        let mut later = Vec::with_capacity(tail.len());
        let mut first_cp = None;
        for (sample, cp) in tail {
            if first_cp.is_none() {
                first_cp = Some(cp);
            }
            later.push(sample);
        }
        self.processed_total -= later.len();
        self.restore(first_cp.expect("nonempty replay tail"));
        self.process_new(s)?;
        for sample in later {
            self.process_new(sample)?;
        }
        Ok(())
    }

    fn process_new(&mut self, s: TelemetrySample) -> Result<()> {
        let cp = self.checkpoint();
        self.step(&s)?;
        self.ring.push_back((s, cp));
        if self.ring.len() > self.cfg.oosm_buffer + 1 {
            self.ring.pop_front();
        }
        self.processed_total += 1;
        Ok(())
    }

    fn step(&mut self, s: &TelemetrySample) -> Result<()> {
        let cfg = &self.cfg;
        let Some(prev) = self.core.last.clone() else {
            let x0 = StateVector::from_array(cfg.initial_state);
            let upd = ekf_update(&EkfState::new(x0, initial_covariance(cfg)), &s.y, &self.r_meas)?;
            self.core.ekf = Some(upd.state);
            self.core.last = Some(Anchor { t: s.t, y: s.y, x: x0 });
            return Ok(());
        };
        let dt = s.t - prev.t;
        let x = prev.x;
        let a = s.accel_cmd;
        let h = eval_jacobian(&x)?;
        let eta = predicted_increment_with_accel(&x, &a)?;
        let dy = Measurement(s.y.0 - prev.y.0);
        let resid = dy.0 - eta.0 * dt;
        let eps = adaptive_eps(&h);
        let gram_inv = regularized_gram_inverse(&h, eps)?;
        let lambda_proj = CoState(gram_inv * resid / dt);

        self.core.window.push(s.t, resid)?;
        let sigma_live = match cfg.weighting {
            Weighting::RollingRms => rolling_rms_sigma(&self.core.window, cfg.sigma_min),
            Weighting::Information { alpha, beta } => {
                info_weighting(&h, &Matrix6::identity(), alpha, beta, cfg.sigma_min)
            }
        };
        let z = whitened_innovation(&dy, &eta, dt, &sigma_live);
        let sigma_mon = self.core.sigma_ref.clone().unwrap_or_else(|| sigma_live.clone());
        let lambda = CoState(gram_inv * sigma_mon.whiten(&resid) / dt);

        let x_new = project_state_update_with_accel(&x, &lambda_proj, &h, dt, &a)?;
        let f = eval_dynamics_with_accel(&x, &a)?;
        let v = lyapunov_value(&StateVector(x_new.0 - x.0), &StateVector(f.0 * dt), &h, eps)?;

        let ekf = self.core.ekf.as_ref().expect("EKF initialized with the first sample");
        let q = ekf_process_noise(cfg, &a, dt);
        let upd = ekf_update(&ekf_predict_with_accel(ekf, dt, &q, &a)?, &s.y, &self.r_meas)?;
        if upd.regularized {
            self.diag.push(format!("t={}: EKF innovation covariance regularized", s.t));
        }
        self.core.ekf = Some(upd.state);
        self.core.ekf_alarm.push(s.t, upd.nis);
        self.core.last = Some(Anchor { t: s.t, y: s.y, x: x_new });

        let mut row = SignalRow {
            t: s.t,
            lambda: lambda.0.into(),
            lambda_norm: lambda.norm(),
            z,
            mode: None,
            probs: Vec::new(),
            hazard_prob: None,
            mfpt: None,
            pre_correction: Vec::new(),
            lyapunov: v,
            nis: upd.nis,
            costate_alarm: false,
            ekf_alarm: self.core.ekf_alarm.is_active(),
        };

        if self.core.model.is_some() {
            self.regime_step(s.t, dt, &lambda, z, &mut row)?;
        } else if !self.core.clustering_failed {
            self.warm.push(WarmEntry { t: s.t, scaled_resid: resid / dt, gram_inv, z });
            if self.warm.len() == self.cfg.warmup {
                self.finish_warmup(sigma_live)?;
                if let Some(p) = &self.core.p {
                    row.probs = p.0.iter().copied().collect();
                    row.hazard_prob = Some(self.core.hazard.iter().map(|&j| p.0[j]).sum());
                    row.mode = self.labeled.last().map(|l| l.mode);
                    row.mfpt = self.current_mfpt();
                }
            }
        }
        self.rows.push(row);
        Ok(())
    }

    fn finish_warmup(&mut self, sigma_ref: WeightingMatrix) -> Result<()> {
        let lambdas: Vec<CoState> = self.warm.iter().map(|w| CoState(w.gram_inv * sigma_ref.whiten(&w.scaled_resid))).collect();
        let features: Vec<_> =
            self.warm.iter().zip(&lambdas).map(|(w, l)| extract_features(l, w.z, w.t)).collect();
        let model = match ModeModel::from_warmup_selected(&features, self.cfg.modes, self.cfg.min_separation, self.cfg.features) {
            Ok(m) => m,
            Err(e) => {
                self.core.clustering_failed = true;
                self.diag.push(format!("warm-up clustering failed ({e}); running without regimes"));
                return Ok(());
            }
        };
        let norms: Vec<f64> = lambdas.iter().map(|l| l.norm()).collect();
        let nominal = NominalStats::from_samples(&norms);
        let ac = &self.cfg.costate_alarm;
        self.core.costate_alarm = Some(WindowedAlarm::new(ac.window, ac.consecutive, nominal.threshold(ac)));
        self.core.nominal = Some(nominal);
        for (w, f) in self.warm.iter().zip(&features) {
            self.labeled.push(LabeledSample { t: w.t, x: f.as_array().to_vec(), mode: model.assign(f) });
        }
        let std_l: Vec<Vector3<f64>> = lambdas.iter().map(|l| model.standardize_lambda(&l.0)).collect();
        let n = std_l.len();
        let diff_var = if n > 1 {
            std_l.windows(2).map(|w| (w[1] - w[0]).norm_squared()).sum::<f64>() / (3 * (n - 1)) as f64
        } else {
            0.0
        };
        let mean_dt = if n > 1 { (self.warm[n - 1].t - self.warm[0].t) / (n - 1) as f64 } else { 0.0 };
        self.core.bayes_scale = if diff_var > 0.0 && mean_dt > 0.0 { (mean_dt / diff_var).sqrt() } else { 1.0 };
        self.core.prev_std_lambda = Some(std_l[n - 1] * self.core.bayes_scale);
        self.core.sigma_ref = Some(sigma_ref);
        self.core.p = Some(ModeProbabilities::uniform(self.cfg.modes));
        self.core.model = Some(model);
        self.refit();
        self.core.warmup_prior = Some(self.core.hazard.len() as f64 / self.cfg.modes as f64);
        Ok(())
    }

    fn refit(&mut self) {
        let k = self.cfg.modes;
        let n = self.labeled.len();
        let slice = self.labeled[n.saturating_sub(self.cfg.refit_window)..].to_vec();
        let fitted = LabeledTrajectory::new(k, slice).and_then(|traj| match self.cfg.estimator {
            GeneratorEstimator::Mle => {
                let st = traj.transition_stats();
                mle_generator(&st.counts, &st.dwell).or_else(|e| {
                    log::debug!("MLE refit failed ({e}); using moment estimator");
                    moment_generator(&traj)
                })
            }
            GeneratorEstimator::Moments => moment_generator(&traj),
        });
        match fitted {
            Ok(l) if l.is_valid() => self.core.generator = Some(l),
            Ok(_) => self.diag.push("generator refit produced an invalid matrix; keeping previous".into()),
            Err(e) => self.diag.push(format!("generator refit failed ({e}); keeping previous")),
        }
        let model = self.core.model.as_mut().expect("refit after clustering");
        model.relabel();
        self.core.hazard = model.hazard_modes();
        self.core.mfpt = self.core.generator.as_ref().and_then(|l| mfpt(l, &self.core.hazard).ok());
    }

    fn current_mfpt(&self) -> Option<f64> {
        let p = self.core.p.as_ref()?;
        let m = self.core.mfpt.as_ref()?;
        let best = (0..p.k())
            .filter(|j| !self.core.hazard.contains(j))
            .fold(None, |acc: Option<usize>, j| match acc {
                Some(b) if p.0[b] >= p.0[j] => Some(b),
                _ => Some(j),
            })?;
        m.time_from(best).filter(|v| v.is_finite())
    }

    fn regime_step(&mut self, t: f64, dt: f64, lambda: &CoState, z: f64, row: &mut SignalRow) -> Result<()> {
        let phi = extract_features(lambda, z, t);
        let model = self.core.model.as_mut().expect("regime step after clustering");
        let mode = model.update(&phi);
        self.labeled.push(LabeledSample { t, x: phi.as_array().to_vec(), mode });
        let u = self.core.bayes_scale;
        let std_lambda = model.standardize_lambda(&lambda.0) * u;
        let centroids: Vec<Vector3<f64>> = (0..self.cfg.modes).map(|j| model.standardized_lambda(j) * u).collect();

        let mut p = self.core.p.clone().expect("probabilities set at warm-up");
        if let Some(l) = &self.core.generator {
            p = propagate_probabilities(l, &p, dt)?;
        }
        let prev = self.core.prev_std_lambda.replace(std_lambda).unwrap_or(std_lambda);
        let dl = std_lambda - prev;
        let dl_norm = dl.norm();
        let hist = &mut self.core.dl_history;
        let activated = hist.len() >= 10 && dl_norm >= quantile(hist, self.cfg.bayes_quantile);
        if hist.len() == self.cfg.bayes_history {
            hist.pop_front();
        }
        hist.push_back(dl_norm);
        if activated {
            row.pre_correction = p.0.iter().copied().collect();
            p = correct_probabilities(&p, &centroids, &dl, dt, &self.cfg.bayes)?;
        }

        let block = self.core.calib.get_or_insert_with(|| CalibBlock {
            start_t: t,
            p0: p.clone(),
            counts: vec![0; self.cfg.modes],
            n: 0,
        });
        block.counts[mode] += 1;
        block.n += 1;
        if block.n == self.cfg.calibration_block {
            let b = self.core.calib.take().expect("block present");
            if let Some(l) = &self.core.generator {
                let emp = ModeProbabilities::from_vec(b.counts.iter().map(|&c| c as f64 / b.n as f64).collect());
                self.calib.push(calibration_error(l, t - b.start_t, &b.p0, &emp)?);
            }
        }

        self.core.p = Some(p);
        self.core.since_refit += 1;
        if self.core.since_refit >= self.cfg.refit_every {
            self.core.since_refit = 0;
            self.refit();
        }

        let alarm = self.core.costate_alarm.as_mut().expect("alarm armed at warm-up");
        alarm.push(t, lambda.norm());
        row.costate_alarm = alarm.is_active();
        let p = self.core.p.as_ref().expect("set above");
        row.mode = Some(mode);
        row.probs = p.0.iter().copied().collect();
        row.hazard_prob = Some(self.core.hazard.iter().map(|&j| p.0[j]).sum());
        row.mfpt = self.current_mfpt();
        Ok(())
    }

    pub fn finish(self) -> RiskReport {
        let c = &self.core;
        let touchdown_t = c.last.as_ref().map(|a| {
            let vz = a.y.vertical_velocity();
            if vz < 0.0 {
                a.t + a.y.altitude().max(0.0) / -vz
            } else {
                a.t
            }
        });
        let peak = self.rows.iter().filter_map(|r| r.hazard_prob).fold(None, |m: Option<f64>, v| {
            Some(m.map_or(v, |m| m.max(v)))
        });
        let mean_cal = if self.calib.is_empty() {
            None
        } else {
            Some(self.calib.iter().sum::<f64>() / self.calib.len() as f64)
        };
        let mut diagnostics = self.intake_diag.clone();
        diagnostics.extend(self.diag.iter().cloned());
        let summary = RunSummary {
            first_costate_alarm_t: c.costate_alarm.as_ref().and_then(|a| a.first_alarm_t()),
            first_ekf_alarm_t: c.ekf_alarm.first_alarm_t(),
            peak_hazard_prob: peak,
            mean_calibration_error: mean_cal,
            touchdown_t,
            config_echo: self.cfg.clone(),
            warmup_hazard_prior: c.warmup_prior,
            costate_threshold: c.costate_alarm.as_ref().map(|a| a.threshold()),
            nominal: c.nominal,
            ekf_threshold: c.ekf_alarm.threshold(),
            costate_windows: c.costate_alarm.as_ref().map_or(0, |a| a.windows()),
            costate_alarm_rate: c.costate_alarm.as_ref().map_or(0.0, |a| a.alarm_rate()),
            ekf_windows: c.ekf_alarm.windows(),
            ekf_alarm_rate: c.ekf_alarm.alarm_rate(),
            calibration_errors: self.calib,
            generator: c.generator.as_ref().map(|g| (0..g.k()).map(|i| g.0.row(i).iter().copied().collect()).collect()),
            mode_labels: c.model.as_ref().map(|m| m.labels.clone()),
            hazard_modes: c.hazard.clone(),
            samples_processed: self.processed_total,
            samples_skipped: self.skipped,
            samples_dropped: self.dropped,
            replays: self.replays,
            diagnostics,
        };
        RiskReport { rows: self.rows, summary }
    }
}

fn initial_covariance(cfg: &PipelineConfig) -> Matrix6<f64> {
    let [sp, sv] = cfg.initial_std;
    let (a, b) = (sp * sp, sv * sv);
    Matrix6::from_diagonal(&nalgebra::Vector6::new(a, a, a, b, b, b))
}

/// Process noise from thrust-proportional execution error plus a floor.
fn ekf_process_noise(cfg: &PipelineConfig, accel: &Vector3<f64>, dt: f64) -> Matrix6<f64> {
    let thrust = accel + Vector3::new(0.0, 0.0, LUNAR_GRAVITY);
    let var = (cfg.noise.thrust_noise_frac * thrust.norm()).powi(2) + cfg.noise.accel_noise.powi(2);
    process_noise(dt, &Vector3::repeat(var))
}

fn meas_covariance(cfg: &PipelineConfig) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::from(cfg.noise.meas_std).map(|s| s * s))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EkfRow {
    pub t: f64,
    pub innovation: [f64; 3],
    pub nis: f64,
    pub alarm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EkfReport {
    pub rows: Vec<EkfRow>,
    pub first_ekf_alarm_t: Option<f64>,
    pub ekf_threshold: f64,
    pub ekf_windows: usize,
    pub ekf_alarm_rate: f64,
    pub samples_skipped: usize,
}

/// EKF alone over the samples in measurement-time order. Non-finite and
/// duplicate-time samples are skipped.
pub fn run_ekf_baseline(telemetry: &[TelemetrySample], cfg: &PipelineConfig) -> Result<EkfReport> {
    cfg.validate()?;
    let mut samples: Vec<&TelemetrySample> = telemetry.iter().collect();
    samples.sort_by(|a, b| a.t.total_cmp(&b.t));
    let r = meas_covariance(cfg);
    let ac = &cfg.ekf_alarm;
    let mut alarm = WindowedAlarm::new(ac.window, ac.consecutive, chi2_3_quantile(ac.level));
    let mut state: Option<(f64, EkfState)> = None;
    let mut rows = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        let fresh = state.as_ref().is_none_or(|(t, _)| s.t > *t);
        if !fresh || !s.y.is_finite() || !s.accel_cmd.iter().all(|v| v.is_finite()) {
            skipped += 1;
            continue;
        }
        let upd = match &state {
            None => ekf_update(&EkfState::new(StateVector::from_array(cfg.initial_state), initial_covariance(cfg)), &s.y, &r)?,
            Some((t0, ekf)) => {
                let dt = s.t - t0;
                let q = ekf_process_noise(cfg, &s.accel_cmd, dt);
                ekf_update(&ekf_predict_with_accel(ekf, dt, &q, &s.accel_cmd)?, &s.y, &r)?
            }
        };
        if state.is_some() {
            alarm.push(s.t, upd.nis);
        }
        rows.push(EkfRow {
            t: s.t,
            innovation: [upd.innovation[0], upd.innovation[1], upd.innovation[2]],
            nis: upd.nis,
            alarm: alarm.is_active(),
        });
        state = Some((s.t, upd.state));
    }
    Ok(EkfReport {
        rows,
        first_ekf_alarm_t: alarm.first_alarm_t(),
        ekf_threshold: alarm.threshold(),
        ekf_windows: alarm.windows(),
        ekf_alarm_rate: alarm.alarm_rate(),
        samples_skipped: skipped,
    })
}

/// Runs the pipeline over telemetry in arrival order.
pub fn run_pipeline(telemetry: &[TelemetrySample], cfg: &PipelineConfig) -> Result<RiskReport> {
    for (i, w) in telemetry.windows(2).enumerate() {
        if w[1].arrival_t < w[0].arrival_t {
            return Err(Error::Input {
                line: i + 2,
                msg: format!("arrival time {} precedes {}", w[1].arrival_t, w[0].arrival_t),
            });
        }
    }
    let mut p = Pipeline::new(cfg.clone())?;
    for s in telemetry {
        p.push(s.clone())?;
    }
    Ok(p.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate_descent, FaultConfig};

    fn sim(seed: u64) -> Vec<TelemetrySample> {
        let cfg = DescentConfig { seed, ..DescentConfig::default() };
        simulate_descent(&cfg, &FaultConfig::none()).unwrap().telemetry
    }

    #[test]
    fn ekf_baseline_matches_pipeline_nis() {
        let mut tel = sim(8);
        tel.sort_by(|a, b| a.t.total_cmp(&b.t));
        for s in &mut tel {
            s.arrival_t = s.t;
        }
        let cfg = PipelineConfig::default();
        let full = run_pipeline(&tel, &cfg).unwrap();
        let ekf = run_ekf_baseline(&tel, &cfg).unwrap();
        assert_eq!(ekf.rows.len(), full.rows.len() + 1);
        for (a, b) in ekf.rows[1..].iter().zip(&full.rows) {
            assert_eq!((a.t, a.nis, a.alarm), (b.t, b.nis, b.ekf_alarm));
        }
        assert_eq!(ekf.first_ekf_alarm_t, full.summary.first_ekf_alarm_t);
    }

    #[test]
    fn constant_nominal_norm_never_alarms() {
        let nom = NominalStats { mean: 2.0, std: 0.5 };
        let trace: Vec<(f64, f64)> = (0..1000).map(|i| (i as f64, 2.0)).collect();
        assert_eq!(costate_alarm(&trace, &nom, &CostateAlarmConfig::default()), None);
    }

    #[test]
    fn step_change_alarms_after_consecutive_windows() {
        let nom = NominalStats { mean: 2.0, std: 0.5 };
        let cfg = CostateAlarmConfig::default();
        let mut trace: Vec<(f64, f64)> = (0..100).map(|i| (i as f64, 2.0)).collect();
        trace.extend((100..400).map(|i| (i as f64, 2.0 + 10.0 * 0.5)));
        // step lands on a window boundary; third exceeding window closes at sample 159
        assert_eq!(costate_alarm(&trace, &nom, &cfg), Some(159.0));
    }

    #[test]
    fn nominal_stats_population_moments() {
        let s = NominalStats::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_on_simplex() {
        let tel = sim(5);
        let a = run_pipeline(&tel, &PipelineConfig::default()).unwrap();
        let b = run_pipeline(&tel, &PipelineConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.summary.warmup_hazard_prior.is_some());
        for r in &a.rows {
            if !r.probs.is_empty() {
                let s: f64 = r.probs.iter().sum();
                assert!((s - 1.0).abs() <= 1e-12 && r.probs.iter().all(|&p| p >= 0.0));
            }
        }
        for w in a.rows.windows(2) {
            assert!(w[0].t < w[1].t);
        }
    }

    #[test]
    fn late_samples_match_time_sorted_processing() {
        let tel = sim(8);
        assert!(tel.iter().any(|s| s.arrival_t > s.t));
        let mut sorted = tel.clone();
        sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
        for s in sorted.iter_mut() {
            s.arrival_t = s.t;
        }
        let a = run_pipeline(&tel, &PipelineConfig::default()).unwrap();
        let b = run_pipeline(&sorted, &PipelineConfig::default()).unwrap();
        assert!(a.summary.replays > 0);
        assert_eq!(a.summary.samples_dropped, 0);
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn samples_beyond_buffer_are_dropped() {
        let mut tel = sim(2);
        tel.sort_by(|a, b| a.t.total_cmp(&b.t));
        tel.truncate(300);
        for s in tel.iter_mut() {
            s.arrival_t = s.t;
        }
        let mut late = tel.remove(100);
        late.arrival_t = tel[150].arrival_t;
        tel.insert(151, late);
        let rep = run_pipeline(&tel, &PipelineConfig::default()).unwrap();
        assert_eq!(rep.summary.samples_dropped, 1);
        assert!(rep.summary.diagnostics.iter().any(|d| d.contains("dropped")));
    }

    #[test]
    fn non_finite_sample_skipped_with_diagnostic() {
        let mut tel = sim(3);
        tel.truncate(300);
        tel[50].y.0[1] = f64::NAN;
        let rep = run_pipeline(&tel, &PipelineConfig::default()).unwrap();
        assert_eq!(rep.summary.samples_skipped, 1);
        assert!(rep.summary.diagnostics.iter().any(|d| d.contains("non-finite")));
        assert!(rep.rows.iter().all(|r| r.lambda_norm.is_finite()));
    }

    #[test]
    fn unordered_arrivals_rejected() {
        let mut tel = sim(1);
        tel.truncate(20);
        tel.swap(5, 9);
        assert!(matches!(run_pipeline(&tel, &PipelineConfig::default()), Err(Error::Input { .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PipelineConfig { modes: 1, ..PipelineConfig::default() };
        assert!(Pipeline::new(cfg).is_err());
        let cfg = PipelineConfig { ekf_alarm: NisAlarmConfig { level: 1.5, ..Default::default() }, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
