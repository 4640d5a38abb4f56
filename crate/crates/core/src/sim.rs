//! Synthetic lunar powered-descent telemetry.
//!
//! The lander glides along a straight approach line toward the landing
//! site, ranging to a beacon placed further downrange, braking to track a constant-deceleration speed
//! profile. Truth integrates executed thrust and lunar gravity exactly over
//! each (jittered) sample interval; measurements are `h(truth)` plus
//! Gaussian noise. Faults alter executed thrust only, the commanded thrust
//! recorded in telemetry stays nominal.

use std::collections::VecDeque;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{eval_h, Measurement, StateVector};

pub const LUNAR_GRAVITY: f64 = 1.62;

const STREAM_NOISE: u64 = 1;
const STREAM_JITTER: u64 = 2;
const STREAM_DELAY: u64 = 3;
const STREAM_THRUST: u64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescentConfig {
    /// Initial slant distance to the landing site (m).
    pub initial_range: f64,
    /// Initial altitude (m); with `initial_range` fixes the approach angle.
    pub initial_altitude: f64,
    /// Downrange distance of the landing site from the ranging beacon (m).
    /// Keeps the range channel well conditioned at touchdown.
    pub beacon_offset: f64,
    /// Altitudes separating the three phases (m), strictly decreasing.
    pub phase_boundaries: [f64; 2],
    /// Braking deceleration of the reference speed profile per phase (m/s²).
    pub reference_decel: [f64; 3],
    /// Speed-tracking gain per phase (1/s).
    pub speed_gain: [f64; 3],
    /// Cross-track position and rate gains (1/s², 1/s).
    pub cross_track_gains: [f64; 2],
    pub touchdown_speed: f64,
    pub soft_landing_bound: f64,
    /// Thrust acceleration limit (m/s²).
    pub max_thrust: f64,
    /// Executed-thrust noise as a fraction of thrust magnitude, per axis.
    pub thrust_noise_frac: f64,
    /// Additive acceleration noise std (m/s²), per axis.
    pub accel_noise: f64,
    pub sample_period: f64,
    /// Uniform jitter as a fraction of the sample period.
    pub jitter_frac: f64,
    /// Noise std for altitude (m), range (m) and vertical velocity (m/s).
    pub noise_std: [f64; 3],
    pub oosm_fraction: f64,
    pub oosm_max_delay: usize,
    pub max_duration: f64,
    pub seed: u64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            initial_range: 150_000.0,
            initial_altitude: 30_000.0,
            beacon_offset: 5_000.0,
            phase_boundaries: [7_000.0, 2_000.0],
            reference_decel: [2.0, 2.0, 2.0],
            speed_gain: [0.2, 0.3, 0.5],
            cross_track_gains: [0.01, 0.2],
            touchdown_speed: 1.5,
            soft_landing_bound: 2.0,
            max_thrust: 5.0,
            thrust_noise_frac: 0.05,
            accel_noise: 1e-3,
            sample_period: 0.1,
            jitter_frac: 0.2,
            noise_std: [0.25, 0.25, 0.25],
            oosm_fraction: 0.05,
            oosm_max_delay: 5,
            max_duration: 2_000.0,
            seed: 0,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.initial_range > 0.0) || !(self.initial_altitude > 0.0) || self.initial_altitude > self.initial_range {
            return bad("initial altitude must lie in (0, initial_range]");
        }
        if !(self.beacon_offset >= 0.0 && self.beacon_offset.is_finite()) {
            return bad("beacon offset must be finite and nonnegative");
        }
        let [b0, b1] = self.phase_boundaries;
        if !(b0 > b1 && b1 > 0.0) {
            return bad("phase boundaries must be strictly decreasing and positive");
        }
        if self.reference_decel.iter().any(|a| !(*a > 0.0)) || self.speed_gain.iter().any(|g| !(*g >= 0.0)) {
            return bad("reference deceleration must be positive and gains nonnegative");
        }
        if !(self.sample_period > 0.0) || !(0.0..1.0).contains(&self.jitter_frac) {
            return bad("sample period must be positive and jitter fraction in [0, 1)");
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("noise standard deviations must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.oosm_fraction) {
            return bad("out-of-sequence fraction must lie in [0, 1]");
        }
        if !(self.max_thrust > LUNAR_GRAVITY) {
            return bad("max thrust must exceed lunar gravity");
        }
        if !(self.thrust_noise_frac >= 0.0) || !(self.accel_noise >= 0.0) {
            return bad("process noise levels must be nonnegative");
        }
        Ok(())
    }

    pub fn landing_site(&self) -> Vector3<f64> {
        Vector3::new(self.beacon_offset, 0.0, 0.0)
    }

    /// Unit vector from the landing site toward the initial position.
    pub fn approach_axis(&self) -> Vector3<f64> {
        let h = (self.initial_range.powi(2) - self.initial_altitude.powi(2)).max(0.0).sqrt();
        Vector3::new(h, 0.0, self.initial_altitude) / self.initial_range
    }

    pub fn reference_speed(&self, along: f64, phase: usize) -> f64 {
        (2.0 * self.reference_decel[phase] * along.max(0.0) + self.touchdown_speed.powi(2)).sqrt()
    }

    pub fn initial_state(&self) -> StateVector {
        let u = self.approach_axis();
        let v = -u * self.reference_speed(self.initial_range, 0);
        StateVector::new(self.landing_site() + u * self.initial_range, v)
    }

    /// Nominal measurement noise variances.
    pub fn noise_var(&self) -> Vector3<f64> {
        Vector3::from(self.noise_std).map(|s| s * s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    None,
    /// Executed thrust = `magnitude` × commanded thrust.
    ThrustMapScale,
    /// Executed thrust lags the command by `magnitude` seconds.
    TimingMisalignment,
    /// Actual thrust limit = `magnitude` × modeled limit.
    SaturationModelError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    pub kind: FaultKind,
    pub magnitude: f64,
    /// Fault latches on once truth altitude drops to this value (m).
    pub onset_altitude: Option<f64>,
    /// Alternatively, fault latches on at this time (s).
    pub onset_time: Option<f64>,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig { kind: FaultKind::None, magnitude: 1.0, onset_altitude: None, onset_time: None }
    }
}

impl FaultConfig {
    pub fn none() -> Self {
        FaultConfig::default()
    }

    pub fn thrust_scale(scale: f64, onset_altitude: f64) -> Self {
        FaultConfig {
            kind: FaultKind::ThrustMapScale,
            magnitude: scale,
            onset_altitude: Some(onset_altitude),
            onset_time: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.magnitude.is_finite() {
            return Err(Error::InvalidConfig("fault magnitude must be finite".into()));
        }
        match self.kind {
            FaultKind::TimingMisalignment if self.magnitude < 0.0 => {
                Err(Error::InvalidConfig("timing misalignment must be nonnegative".into()))
            }
            FaultKind::SaturationModelError if !(self.magnitude > 0.0) => {
                Err(Error::InvalidConfig("saturation factor must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    fn triggered(&self, t: f64, altitude: f64) -> bool {
        if self.kind == FaultKind::None {
            return false;
        }
        match (self.onset_altitude, self.onset_time) {
            (None, None) => true,
            (a, b) => a.is_some_and(|a| altitude <= a) || b.is_some_and(|b| t >= b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub t: f64,
    pub arrival_t: f64,
    pub y: Measurement,
    /// Commanded net acceleration (thrust minus gravity) held over the
    /// interval ending at `t`, as assumed by the onboard model.
    pub accel_cmd: Vector3<f64>,
    pub truth: Option<StateVector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    /// Telemetry in arrival order.
    pub telemetry: Vec<TelemetrySample>,
    pub touchdown_t: Option<f64>,
    pub touchdown_velocity: Option<Vector3<f64>>,
    pub fault_onset_t: Option<f64>,
}

impl SimOutput {
    /// Telemetry sorted by measurement time.
    pub fn time_ordered(&self) -> Vec<TelemetrySample> {
        let mut v = self.telemetry.clone();
        v.sort_by(|a, b| a.t.total_cmp(&b.t));
        v
    }
}

/// Phase index from altitude: 0 above the first boundary, 1 between, 2
/// below the second. A boundary value belongs to the band above it.
pub fn phase_of(altitude: f64, boundaries: &[f64; 2]) -> usize {
    if altitude >= boundaries[0] {
        0
    } else if altitude >= boundaries[1] {
        1
    } else {
        2
    }
}

/// Thrust-acceleration command law.
pub trait Guidance {
    fn command(&mut self, t: f64, state: &StateVector, cfg: &DescentConfig) -> Vector3<f64>;
}

/// Speed-profile tracking along the approach line with cross-track damping.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProfileGuidance;

impl ProfileGuidance {
    /// Desired net acceleration (before gravity compensation).
    pub fn desired_accel(state: &StateVector, cfg: &DescentConfig) -> Vector3<f64> {
        let u = cfg.approach_axis();
        let p = state.position() - cfg.landing_site();
        let v = state.velocity();
        let phase = phase_of(p.z, &cfg.phase_boundaries);
        let along = p.dot(&u);
        let p_perp = p - u * along;
        let v_along = v.dot(&u);
        let v_perp = v - u * v_along;
        let v_des = -cfg.reference_speed(along, phase);
        let a_ff = cfg.reference_decel[phase] * if along > 0.0 { 1.0 } else { 0.0 };
        let [kp, kd] = cfg.cross_track_gains;
        u * (a_ff + cfg.speed_gain[phase] * (v_des - v_along)) - p_perp * kp - v_perp * kd
    }
}

impl Guidance for ProfileGuidance {
    fn command(&mut self, _t: f64, state: &StateVector, cfg: &DescentConfig) -> Vector3<f64> {
        Self::desired_accel(state, cfg) + Vector3::new(0.0, 0.0, LUNAR_GRAVITY)
    }
}

fn clip_norm(v: Vector3<f64>, limit: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > limit && n > 0.0 {
        v * (limit / n)
    } else {
        v
    }
}

fn integrate(x: &StateVector, a: &Vector3<f64>, dt: f64) -> StateVector {
    let p = x.position() + x.velocity() * dt + a * (0.5 * dt * dt);
    let v = x.velocity() + a * dt;
    StateVector::new(p, v)
}

/// Time in `(0, dt]` at which altitude reaches zero under constant `a_z`.
fn surface_crossing(z: f64, vz: f64, az: f64, dt: f64) -> f64 {
    // 0 = z + vz τ + ½ az τ²
    if az.abs() < 1e-12 {
        return if vz < 0.0 { (-z / vz).clamp(0.0, dt) } else { dt };
    }
    let disc = vz * vz - 2.0 * az * z;
    if disc < 0.0 {
        return dt;
    }
    let s = disc.sqrt();
    let roots = [(-vz - s) / az, (-vz + s) / az];
    roots
        .iter()
        .copied()
        .filter(|r| *r >= 0.0 && *r <= dt * (1.0 + 1e-12))
        .fold(dt, f64::min)
}

pub fn simulate_descent(cfg: &DescentConfig, fault: &FaultConfig) -> Result<SimOutput> {
    simulate_with_guidance(cfg, fault, &mut ProfileGuidance)
}

pub fn simulate_with_guidance(
    cfg: &DescentConfig,
    fault: &FaultConfig,
    guidance: &mut dyn Guidance,
) -> Result<SimOutput> {
    cfg.validate()?;
    fault.validate()?;
    let stream = |id: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(id);
        r
    };
    let mut rng_noise = stream(STREAM_NOISE);
    let mut rng_jitter = stream(STREAM_JITTER);
    let mut rng_delay = stream(STREAM_DELAY);
    let mut rng_thrust = stream(STREAM_THRUST);
    let gravity = Vector3::new(0.0, 0.0, LUNAR_GRAVITY);
    let noise_std = Vector3::from(cfg.noise_std);

    let measure = |x: &StateVector, rng: &mut ChaCha8Rng| -> Result<Measurement> {
        let h = eval_h(x)?.0;
        let n = Vector3::from_fn(|i, _| noise_std[i] * rng.sample::<f64, _>(StandardNormal));
        let mut y = h + n;
        y[1] = y[1].max(0.0);
        Ok(Measurement(y))
    };

    let mut x = cfg.initial_state();
    let mut t = 0.0;
    let mut samples = Vec::new();
    samples.push(TelemetrySample {
        t,
        arrival_t: t,
        y: measure(&x, &mut rng_noise)?,
        accel_cmd: Vector3::zeros(),
        truth: Some(x),
    });
    let mut history: VecDeque<(f64, Vector3<f64>)> = VecDeque::new();
    let mut fault_onset_t = None;
    let mut touchdown_t = None;
    let mut touchdown_velocity = None;

    while t < cfg.max_duration {
        let thrust_cmd = clip_norm(guidance.command(t, &x, cfg), cfg.max_thrust);
        history.push_back((t, thrust_cmd));
        if fault_onset_t.is_none() && fault.triggered(t, x.altitude()) {
            fault_onset_t = Some(t);
        }
        let mut thrust = thrust_cmd;
        if fault_onset_t.is_some() {
            thrust = match fault.kind {
                FaultKind::None => thrust_cmd,
                FaultKind::ThrustMapScale => thrust_cmd * fault.magnitude,
                FaultKind::TimingMisalignment => {
                    let lag_t = t - fault.magnitude;
                    history
                        .iter()
                        .rev()
                        .find(|(tc, _)| *tc <= lag_t + 1e-12)
                        .map(|(_, c)| *c)
                        .unwrap_or(history[0].1)
                }
                FaultKind::SaturationModelError => clip_norm(thrust_cmd, fault.magnitude * cfg.max_thrust),
            };
        }
        let keep_after = t - fault.magnitude.abs() - 1.0;
        while history.len() > 2 && history[1].0 < keep_after {
            history.pop_front();
        }

        let tn = thrust.norm();
        let xi = Vector3::from_fn(|_, _| rng_thrust.sample::<f64, _>(StandardNormal));
        let eta = Vector3::from_fn(|_, _| rng_thrust.sample::<f64, _>(StandardNormal));
        let a_true = thrust + xi * (cfg.thrust_noise_frac * tn) + eta * cfg.accel_noise - gravity;

        let dt = cfg.sample_period * (1.0 + cfg.jitter_frac * rng_jitter.random_range(-1.0..1.0));
        let next = integrate(&x, &a_true, dt);
        if next.altitude() <= 0.0 {
            let tau = surface_crossing(x.altitude(), x.0[5], a_true.z, dt);
            let at = integrate(&x, &a_true, tau);
            touchdown_t = Some(t + tau);
            touchdown_velocity = Some(at.velocity());
            break;
        }
        x = next;
        t += dt;
        samples.push(TelemetrySample {
            t,
            arrival_t: t,
            y: measure(&x, &mut rng_noise)?,
            accel_cmd: thrust_cmd - gravity,
            truth: Some(x),
        });
    }

    for s in samples.iter_mut().skip(1) {
        if rng_delay.random::<f64>() < cfg.oosm_fraction && cfg.oosm_max_delay > 0 {
            let d = rng_delay.random_range(1..=cfg.oosm_max_delay);
            s.arrival_t = s.t + (d as f64 + 0.5) * cfg.sample_period;
        }
    }
    samples.sort_by(|a, b| a.arrival_t.total_cmp(&b.arrival_t).then(a.t.total_cmp(&b.t)));
    Ok(SimOutput { telemetry: samples, touchdown_t, touchdown_velocity, fault_onset_t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quiet() -> DescentConfig {
        DescentConfig {
            noise_std: [0.0; 3],
            thrust_noise_frac: 0.0,
            accel_noise: 0.0,
            oosm_fraction: 0.0,
            ..DescentConfig::default()
        }
    }

    #[test]
    fn phase_bands() {
        let b = [7000.0, 2000.0];
        assert_eq!(phase_of(10_000.0, &b), 0);
        assert_eq!(phase_of(5_000.0, &b), 1);
        assert_eq!(phase_of(2_000.0, &b), 1);
        assert_eq!(phase_of(7_000.0, &b), 0);
        assert_eq!(phase_of(100.0, &b), 2);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = DescentConfig { seed: 42, ..DescentConfig::default() };
        let a = simulate_descent(&cfg, &FaultConfig::none()).unwrap();
        let b = simulate_descent(&cfg, &FaultConfig::none()).unwrap();
        assert_eq!(a, b);
        let c = simulate_descent(&DescentConfig { seed: 43, ..cfg }, &FaultConfig::none()).unwrap();
        assert_ne!(a.telemetry, c.telemetry);
    }

    #[test]
    fn noiseless_measurements_equal_h_of_truth() {
        let out = simulate_descent(&quiet(), &FaultConfig::none()).unwrap();
        for s in &out.telemetry {
            assert_eq!(s.y, eval_h(&s.truth.unwrap()).unwrap());
        }
    }

    #[test]
    fn nominal_descent_lands_softly() {
        for seed in 0..3 {
            let cfg = DescentConfig { seed, ..DescentConfig::default() };
            let out = simulate_descent(&cfg, &FaultConfig::none()).unwrap();
            let v = out.touchdown_velocity.expect("touchdown");
            assert!(v.z.abs() <= cfg.soft_landing_bound, "vz at touchdown {}", v.z);
            assert!(out.touchdown_t.unwrap() > 100.0);
        }
    }

    #[test]
    fn thrust_scale_fault_matches_reintegration() {
        let cfg = quiet();
        let fault = FaultConfig::thrust_scale(0.9, 7000.0);
        let out = simulate_descent(&cfg, &fault).unwrap();
        let onset = out.fault_onset_t.unwrap();
        let s = out.time_ordered();
        let g = Vector3::new(0.0, 0.0, LUNAR_GRAVITY);
        let mut checked = 0;
        for w in s.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let dt = b.t - a.t;
            let commanded = b.accel_cmd + g;
            let executed = if a.t >= onset { commanded * 0.9 } else { commanded };
            let x = integrate(&a.truth.unwrap(), &(executed - g), dt);
            assert_relative_eq!(x.0, b.truth.unwrap().0, epsilon = 1e-9, max_relative = 1e-12);
            if a.t >= onset {
                let az = (b.truth.unwrap().0[5] - a.truth.unwrap().0[5]) / dt + LUNAR_GRAVITY;
                assert_relative_eq!(az, 0.9 * commanded.z, epsilon = 1e-8);
                checked += 1;
            }
        }
        assert!(checked > 100);
        let alt_at_onset = s.iter().find(|x| x.t >= onset).unwrap().truth.unwrap().altitude();
        assert!(alt_at_onset <= 7000.0 && alt_at_onset > 6900.0);
    }

    #[test]
    fn oosm_fraction_is_realized() {
        let mut total = 0usize;
        let mut late = 0usize;
        let mut seed = 0;
        while total < 10_000 {
            let cfg = DescentConfig { seed, ..DescentConfig::default() };
            let out = simulate_descent(&cfg, &FaultConfig::none()).unwrap();
            total += out.telemetry.len() - 1;
            late += out.telemetry.iter().filter(|s| s.arrival_t > s.t).count();
            for w in out.telemetry.windows(2) {
                assert!(w[0].arrival_t <= w[1].arrival_t);
            }
            seed += 1;
        }
        let frac = late as f64 / total as f64;
        assert!((frac - 0.05).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn other_faults_run() {
        let cfg = DescentConfig { seed: 3, ..DescentConfig::default() };
        for fault in [
            FaultConfig { kind: FaultKind::TimingMisalignment, magnitude: 0.5, onset_altitude: Some(7000.0), onset_time: None },
            FaultConfig { kind: FaultKind::SaturationModelError, magnitude: 0.5, onset_altitude: Some(7000.0), onset_time: None },
        ] {
            let out = simulate_descent(&cfg, &fault).unwrap();
            assert!(out.fault_onset_t.is_some());
            assert!(out.telemetry.iter().all(|s| s.y.is_finite()));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = DescentConfig { phase_boundaries: [2000.0, 7000.0], ..DescentConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = DescentConfig { noise_std: [-1.0, 0.1, 0.1], ..DescentConfig::default() };
        assert!(cfg.validate().is_err());
        let f = FaultConfig { magnitude: f64::NAN, ..FaultConfig::default() };
        assert!(f.validate().is_err());
    }
}
