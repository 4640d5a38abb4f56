//! Discrete extended Kalman filter on the lander model, used as the
//! innovation-consistency baseline.

use nalgebra::{Cholesky, Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::alarm::WindowedAlarm;
use crate::error::{Error, Result};
use crate::measurement::{eval_h, eval_jacobian, Measurement, StateVector, MEAS_DIM};

type Gain = SMatrix<f64, 6, 3>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EkfState {
    pub x_hat: StateVector,
    pub p: Matrix6<f64>,
    pub last_nis: f64,
}

impl EkfState {
    pub fn new(x_hat: StateVector, p: Matrix6<f64>) -> Self {
        EkfState { x_hat, p, last_nis: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EkfUpdate {
    pub state: EkfState,
    pub innovation: Vector3<f64>,
    pub nis: f64,
    /// Set when `S` needed jitter to factorize.
    pub regularized: bool,
}

/// Double-integrator transition over `dt`.
pub fn transition(dt: f64) -> Matrix6<f64> {
    let mut f = Matrix6::identity();
    for i in 0..3 {
        f[(i, i + 3)] = dt;
    }
    f
}

/// Piecewise-constant white-acceleration process noise with per-axis
/// acceleration variance `accel_var`.
pub fn process_noise(dt: f64, accel_var: &Vector3<f64>) -> Matrix6<f64> {
    let mut q = Matrix6::zeros();
    let (d2, d3, d4) = (dt * dt, dt * dt * dt, dt * dt * dt * dt);
    for i in 0..3 {
        let s = accel_var[i];
        q[(i, i)] = s * d4 / 4.0;
        q[(i, i + 3)] = s * d3 / 2.0;
        q[(i + 3, i)] = s * d3 / 2.0;
        q[(i + 3, i + 3)] = s * d2;
    }
    q
}

pub fn ekf_predict(s: &EkfState, dt: f64, q_d: &Matrix6<f64>) -> Result<EkfState> {
    ekf_predict_with_accel(s, dt, q_d, &Vector3::zeros())
}

/// Time update with a known acceleration input, integrated exactly over
/// the step. Reduces to the constant-velocity form when `accel = 0`.
pub fn ekf_predict_with_accel(
    s: &EkfState,
    dt: f64,
    q_d: &Matrix6<f64>,
    accel: &Vector3<f64>,
) -> Result<EkfState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInterval(dt));
    }
    let f = transition(dt);
    let mut u = Vector6::zeros();
    for i in 0..3 {
        u[i] = 0.5 * dt * dt * accel[i];
        u[i + 3] = dt * accel[i];
    }
    let x = StateVector(f * s.x_hat.0 + u);
    let p = f * s.p * f.transpose() + q_d;
    Ok(EkfState { x_hat: x, p: 0.5 * (p + p.transpose()), last_nis: s.last_nis })
}

/// Joseph-form measurement update.
pub fn ekf_update(s: &EkfState, y: &Measurement, r: &Matrix3<f64>) -> Result<EkfUpdate> {
    if !y.is_finite() {
        return Err(Error::InvalidState("non-finite measurement".into()));
    }
    let h = eval_jacobian(&s.x_hat)?;
    let nu = y.0 - eval_h(&s.x_hat)?.0;
    let mut sm = h * s.p * h.transpose() + r;
    sm = 0.5 * (sm + sm.transpose());
    let mut regularized = false;
    let chol = match Cholesky::new(sm) {
        Some(c) => c,
        None => {
            regularized = true;
            let jitter = (1e-9 * sm.trace() / MEAS_DIM as f64).max(1e-12);
            sm += Matrix3::identity() * jitter;
            Cholesky::new(sm).ok_or_else(|| Error::Numerical("innovation covariance not factorizable".into()))?
        }
    };
    let s_inv = chol.inverse();
    let k: Gain = s.p * h.transpose() * s_inv;
    let x = StateVector(s.x_hat.0 + k * nu);
    let ikh = Matrix6::identity() - k * h;
    let p = ikh * s.p * ikh.transpose() + k * r * k.transpose();
    let nis = nu.dot(&(s_inv * nu));
    if !x.is_finite() || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("EKF update produced non-finite values".into()));
    }
    Ok(EkfUpdate {
        state: EkfState { x_hat: x, p: 0.5 * (p + p.transpose()), last_nis: nis },
        innovation: nu,
        nis,
        regularized,
    })
}

/// Upper quantile of χ² with three degrees of freedom.
pub fn chi2_3_quantile(level: f64) -> f64 {
    ChiSquared::new(MEAS_DIM as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(level)
}

/// Runs the windowed-mean NIS detector over a history of `(t, NIS)`.
pub fn nis_alarm(history: &[(f64, f64)], window: usize, level: f64, consecutive: usize) -> (bool, Option<f64>) {
    let mut alarm = WindowedAlarm::new(window, consecutive, chi2_3_quantile(level));
    for &(t, nis) in history {
        alarm.push(t, nis);
    }
    (alarm.is_active(), alarm.first_alarm_t())
}
