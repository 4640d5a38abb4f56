//! Lander kinematics and the altitude / range / vertical-velocity sensor model.
//!
//! State ordering is `[x, y, z, vx, vy, vz]` in meters and m/s with `z` the
//! altitude above the landing plane. The range channel measures the distance
//! to the frame origin.

use nalgebra::{SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to the range before it is used as a divisor.
pub const RANGE_GUARD: f64 = 1e-6;

pub const STATE_DIM: usize = 6;
pub const MEAS_DIM: usize = 3;

/// Measurement Jacobian `∂h/∂x`, 3×6.
pub type Jacobian = SMatrix<f64, MEAS_DIM, STATE_DIM>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub Vector6<f64>);

impl StateVector {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>) -> Self {
        StateVector(Vector6::new(
            position.x, position.y, position.z, velocity.x, velocity.y, velocity.z,
        ))
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        StateVector(Vector6::from_row_slice(&a))
    }

    pub fn zeros() -> Self {
        StateVector(Vector6::zeros())
    }

    pub fn position(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn altitude(&self) -> f64 {
        self.0[2]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Guarded range `max(‖p‖, ε_r)`.
    pub fn guarded_range(&self) -> f64 {
        self.position().norm().max(RANGE_GUARD)
    }

    fn check(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidState(format!("non-finite state {:?}", self.0.as_slice())))
        }
    }
}

/// Sensor reading `[altitude, range, vertical velocity]`. Also used for
/// measurement increments and rates, which share the channel layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement(pub Vector3<f64>);

impl Measurement {
    pub fn new(altitude: f64, range: f64, vertical_velocity: f64) -> Self {
        Measurement(Vector3::new(altitude, range, vertical_velocity))
    }

    pub fn altitude(&self) -> f64 {
        self.0[0]
    }

    pub fn range(&self) -> f64 {
        self.0[1]
    }

    pub fn vertical_velocity(&self) -> f64 {
        self.0[2]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Constant-velocity prior: `ṗ = v`, `v̇ = 0`.
pub fn eval_dynamics(state: &StateVector) -> Result<StateVector> {
    eval_dynamics_with_accel(state, &Vector3::zeros())
}

/// Kinematic model driven by a known acceleration input (commanded thrust
/// plus gravity): `ṗ = v`, `v̇ = a`. With `a = 0` this is [`eval_dynamics`].
pub fn eval_dynamics_with_accel(state: &StateVector, accel: &Vector3<f64>) -> Result<StateVector> {
    state.check()?;
    if !accel.iter().all(|a| a.is_finite()) {
        return Err(Error::InvalidState("non-finite acceleration input".into()));
    }
    Ok(StateVector::new(state.velocity(), *accel))
}

pub fn eval_h(state: &StateVector) -> Result<Measurement> {
    state.check()?;
    Ok(Measurement::new(state.0[2], state.guarded_range(), state.0[5]))
}

pub fn eval_jacobian(state: &StateVector) -> Result<Jacobian> {
    state.check()?;
    let r = state.guarded_range();
    let p = state.position();
    let mut h = Jacobian::zeros();
    h[(0, 2)] = 1.0;
    h[(1, 0)] = p.x / r;
    h[(1, 1)] = p.y / r;
    h[(1, 2)] = p.z / r;
    h[(2, 5)] = 1.0;
    Ok(h)
}

/// Model-predicted measurement rate `η = ∂h/∂t + H f` under the
/// constant-velocity prior. `∂h/∂t` is identically zero for this sensor suite.
pub fn predicted_increment(state: &StateVector) -> Result<Measurement> {
    predicted_increment_with_accel(state, &Vector3::zeros())
}

/// `η` when the model carries a known acceleration input; only the
/// vertical-velocity channel picks up the acceleration.
pub fn predicted_increment_with_accel(
    state: &StateVector,
    accel: &Vector3<f64>,
) -> Result<Measurement> {
    let f = eval_dynamics_with_accel(state, accel)?;
    let p = state.position();
    let v = state.velocity();
    let r = state.guarded_range();
    let dh_dt = Vector3::zeros();
    let eta = Vector3::new(v.z, p.dot(&v) / r, f.0[5]) + dh_dt;
    Ok(Measurement(eta))
}
