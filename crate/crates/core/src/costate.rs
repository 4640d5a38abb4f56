//! Regularized algebraic co-state, whitened innovation, weighting and the
//! consistency functional.
//!
//! All matrices in measurement space are 3×3; `Σ` is diagonal throughout.

use std::collections::VecDeque;

use nalgebra::{Cholesky, Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{Jacobian, Measurement, StateVector, MEAS_DIM};

pub const EPS_FLOOR: f64 = 1e-9;
pub const EPS_TRACE_SCALE: f64 = 1e-8;
pub const EPS_ILL_CONDITIONED_SCALE: f64 = 1e-3;
pub const CONDITION_LIMIT: f64 = 1e8;
pub const DEFAULT_SIGMA_MIN: f64 = 1e-3;
pub const DEFAULT_WINDOW: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoState(pub Vector3<f64>);

impl CoState {
    pub fn zeros() -> Self {
        CoState(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Diagonal innovation weighting, stored as per-channel variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingMatrix {
    pub sigma_sq: Vector3<f64>,
}

impl WeightingMatrix {
    pub fn identity() -> Self {
        WeightingMatrix { sigma_sq: Vector3::repeat(1.0) }
    }

    /// Builds a weighting, flooring every channel at `sigma_min²`.
    pub fn floored(sigma_sq: Vector3<f64>, sigma_min: f64) -> Self {
        let floor = sigma_min * sigma_min;
        WeightingMatrix { sigma_sq: sigma_sq.map(|s| if s.is_finite() { s.max(floor) } else { floor }) }
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        WeightingMatrix { sigma_sq: Vector3::new(a, b, c) }
    }

    /// `Σ⁻¹ v`.
    pub fn whiten(&self, v: &Vector3<f64>) -> Vector3<f64> {
        v.component_div(&self.sigma_sq)
    }

    pub fn is_valid(&self) -> bool {
        self.sigma_sq.iter().all(|s| s.is_finite() && *s > 0.0)
    }
}

/// `(HHᵀ + εI)⁻¹` through a Cholesky factorization.
///
/// Fails only when `ε = 0` and `HHᵀ` is singular.
pub fn regularized_gram_inverse(h: &Jacobian, eps: f64) -> Result<Matrix3<f64>> {
    let g = h * h.transpose() + Matrix3::identity() * eps;
    Cholesky::new(g)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("gram matrix not positive definite (eps = {eps:e})")))
}

fn solve_gram(h: &Jacobian, eps: f64, rhs: &Vector3<f64>) -> Result<Vector3<f64>> {
    let g = h * h.transpose() + Matrix3::identity() * eps;
    Cholesky::new(g)
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::Numerical(format!("gram matrix not positive definite (eps = {eps:e})")))
}

/// Ratio of extreme eigenvalues of the symmetric PSD matrix `g`.
pub fn condition_estimate(g: &Matrix3<f64>) -> f64 {
    let ev = g.symmetric_eigenvalues();
    let max = ev.max();
    let min = ev.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Spectral regularizer chosen from the trace and conditioning of `HHᵀ`.
pub fn adaptive_eps(h: &Jacobian) -> f64 {
    let g = h * h.transpose();
    let mean_diag = g.trace() / MEAS_DIM as f64;
    let mut eps = (EPS_TRACE_SCALE * mean_diag).max(EPS_FLOOR);
    if condition_estimate(&g) > CONDITION_LIMIT {
        eps = eps.max(EPS_ILL_CONDITIONED_SCALE * mean_diag);
    }
    eps
}

/// `λ = (HHᵀ + εI)⁻¹ Σ⁻¹ (Δy − ηΔt) / Δt`.
pub fn compute_costate(
    h: &Jacobian,
    sigma: &WeightingMatrix,
    dy_obs: &Measurement,
    eta: &Measurement,
    dt: f64,
    eps: f64,
) -> Result<CoState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInterval(dt));
    }
    let resid = dy_obs.0 - eta.0 * dt;
    let rhs = sigma.whiten(&resid) / dt;
    Ok(CoState(solve_gram(h, eps, &rhs)?))
}

/// Euler step of the augmented dynamics, `x + f dt + Hᵀλ dt`.
pub fn project_state_update(
    x: &StateVector,
    lambda: &CoState,
    h: &Jacobian,
    dt: f64,
) -> Result<StateVector> {
    project_state_update_with_accel(x, lambda, h, dt, &Vector3::zeros())
}

pub fn project_state_update_with_accel(
    x: &StateVector,
    lambda: &CoState,
    h: &Jacobian,
    dt: f64,
    accel: &Vector3<f64>,
) -> Result<StateVector> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInterval(dt));
    }
    let f = crate::measurement::eval_dynamics_with_accel(x, accel)?;
    Ok(StateVector(x.0 + f.0 * dt + h.transpose() * lambda.0 * dt))
}

/// `z = sqrt(ṽᵀ Σ⁻¹ ṽ)` with `ṽ = Δy − ηΔt`.
pub fn whitened_innovation(
    dy_obs: &Measurement,
    eta: &Measurement,
    dt: f64,
    sigma: &WeightingMatrix,
) -> f64 {
    let v = dy_obs.0 - eta.0 * dt;
    v.dot(&sigma.whiten(&v)).max(0.0).sqrt()
}

/// Bounded history of raw innovations `Δy − ηΔt`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InnovationWindow {
    capacity: usize,
    entries: VecDeque<(f64, Vector3<f64>)>,
}

impl InnovationWindow {
    pub fn new(capacity: usize) -> Self {
        InnovationWindow { capacity: capacity.max(1), entries: VecDeque::with_capacity(capacity.max(1)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_time(&self) -> Option<f64> {
        self.entries.back().map(|e| e.0)
    }

    /// Appends an innovation; timestamps must strictly increase.
    pub fn push(&mut self, t: f64, innovation: Vector3<f64>) -> Result<()> {
        if let Some(last) = self.last_time() {
            if !(t > last) {
                return Err(Error::InvalidState(format!(
                    "innovation timestamp {t} not after {last}"
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, innovation));
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.entries.iter().map(|e| &e.1)
    }
}

/// Per-channel RMS over the window, floored at `sigma_min²`.
pub fn rolling_rms_sigma(window: &InnovationWindow, sigma_min: f64) -> WeightingMatrix {
    if window.is_empty() {
        return WeightingMatrix::floored(Vector3::zeros(), sigma_min);
    }
    let mut acc = Vector3::zeros();
    for v in window.iter() {
        acc += v.component_mul(v);
    }
    WeightingMatrix::floored(acc / window.len() as f64, sigma_min)
}

/// Information-shaped weighting `σ⁻² ∝ diag(α HQHᵀ + βI)`, scaled so the
/// largest channel weight is one.
pub fn info_weighting(
    h: &Jacobian,
    q: &Matrix6<f64>,
    alpha: f64,
    beta: f64,
    sigma_min: f64,
) -> WeightingMatrix {
    let m = h * q * h.transpose() * alpha + Matrix3::identity() * beta;
    let w = m.diagonal();
    let wmax = w.max();
    let sigma_sq = if wmax > 0.0 && wmax.is_finite() {
        w.map(|wi| if wi > 0.0 { wmax / wi } else { f64::INFINITY })
    } else {
        Vector3::repeat(1.0)
    };
    WeightingMatrix::floored(sigma_sq, sigma_min)
}

/// `V = ½ eᵀ (HHᵀ+εI)⁻¹ e` with `e = H(dx − f dt)`.
pub fn lyapunov_value(
    dx: &StateVector,
    f_dt: &StateVector,
    h: &Jacobian,
    eps: f64,
) -> Result<f64> {
    let e = h * (dx.0 - f_dt.0);
    let s = solve_gram(h, eps, &e)?;
    Ok((0.5 * e.dot(&s)).max(0.0))
}

/// Regularized projector `Hᵀ(HHᵀ+εI)⁻¹H` onto the row space of `H`.
pub fn regularized_projector(h: &Jacobian, eps: f64) -> Result<Matrix6<f64>> {
    Ok(h.transpose() * regularized_gram_inverse(h, eps)? * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{eval_dynamics, eval_jacobian, predicted_increment};
    use approx::assert_relative_eq;

    fn lander_h(p: [f64; 3]) -> Jacobian {
        eval_jacobian(&StateVector::from_array([p[0], p[1], p[2], 0., 0., 0.])).unwrap()
    }

    fn orthonormal_h() -> Jacobian {
        let mut h = Jacobian::zeros();
        h[(0, 0)] = 1.0;
        h[(1, 1)] = 1.0;
        h[(2, 2)] = 1.0;
        h
    }

    #[test]
    fn gram_inverse_trivial_cases() {
        let g = regularized_gram_inverse(&orthonormal_h(), 0.5).unwrap();
        assert_relative_eq!(g, Matrix3::identity() / 1.5, epsilon = 1e-15);
        let g = regularized_gram_inverse(&Jacobian::zeros(), 1.0).unwrap();
        assert_relative_eq!(g, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn gram_inverse_lander_matches_adjugate() {
        // HHᵀ + 1e-8 I at p = (3,4,0) is [[1+e,0,0],[0,1+e,0],[0,0,1+e]] since
        // row 1 (altitude) is e_z, row 2 (range) is (0.6,0.8,0,..), row 3 e_vz.
        // Off-diagonal (0,1) is e_z·(0.6,0.8,0) = 0. Adjugate in exact arithmetic:
        // inverse = diag(1/(1+e)).
        let g = regularized_gram_inverse(&lander_h([3., 4., 0.]), 1e-8).unwrap();
        let d = 1.0 / (1.0 + 1e-8);
        assert_relative_eq!(g, Matrix3::from_diagonal_element(d), epsilon = 1e-15);

        // Non-diagonal geometry: p = (1,0,1). Rows e_z, (1/√2,0,1/√2), e_vz.
        // G = [[1+e, s, 0],[s, 1+e, 0],[0,0,1+e]], s = 1/√2.
        // 2×2 block inverse by adjugate: 1/((1+e)²−s²) [[1+e, −s],[−s, 1+e]].
        let e = 1e-8;
        let s = 0.5f64.sqrt();
        let det = (1.0 + e) * (1.0 + e) - s * s;
        let g = regularized_gram_inverse(&lander_h([1., 0., 1.]), e).unwrap();
        assert_relative_eq!(g[(0, 0)], (1.0 + e) / det, epsilon = 1e-12);
        assert_relative_eq!(g[(0, 1)], -s / det, epsilon = 1e-12);
        assert_relative_eq!(g[(1, 1)], (1.0 + e) / det, epsilon = 1e-12);
        assert_relative_eq!(g[(2, 2)], 1.0 / (1.0 + e), epsilon = 1e-15);
    }

    #[test]
    fn costate_null_and_identity() {
        let h = orthonormal_h();
        let eta = Measurement::new(1.0, 2.0, 3.0);
        let dy = Measurement(eta.0 * 0.1);
        let l = compute_costate(&h, &WeightingMatrix::identity(), &dy, &eta, 0.1, 1e-6).unwrap();
        assert_eq!(l.0, Vector3::zeros());

        let zero = Measurement::new(0., 0., 0.);
        let dy = Measurement::new(0.1, 0., 0.);
        let l = compute_costate(&h, &WeightingMatrix::identity(), &dy, &zero, 1.0, 0.0).unwrap();
        assert_relative_eq!(l.0, Vector3::new(0.1, 0., 0.), epsilon = 1e-15);
    }

    #[test]
    fn costate_rejects_bad_interval() {
        let h = orthonormal_h();
        let m = Measurement::new(0., 0., 0.);
        for dt in [0.0, -0.1, f64::NAN] {
            let err = compute_costate(&h, &WeightingMatrix::identity(), &m, &m, dt, 1e-6).unwrap_err();
            assert!(matches!(err, Error::InvalidInterval(_)));
        }
    }

    #[test]
    fn costate_lander_vertical_geometry() {
        // p = (0,0,2000): rows 1 and 2 are both e_z, G = [[1+e,1,0],[1,1+e,0],[0,0,1+e]].
        // rhs = Σ⁻¹(1,1,−0.2)/0.1 = (2.5, 2.5, −2).
        // Closed form: first two components solve [[1+e,1],[1,1+e]] u = (2.5,2.5)
        // → u_i = 2.5/(2+e); third = −2/(1+e).
        let x = StateVector::from_array([0., 0., 2000., 0., 0., -50.]);
        let h = eval_jacobian(&x).unwrap();
        let eta = predicted_increment(&x).unwrap();
        let dt = 0.1;
        let dy = Measurement(eta.0 * dt + Vector3::new(1.0, 1.0, -0.2));
        let sigma = WeightingMatrix::diag(4.0, 4.0, 1.0);
        let e = 1e-6;
        let l = compute_costate(&h, &sigma, &dy, &eta, dt, e).unwrap();
        assert_relative_eq!(l.0[0], 2.5 / (2.0 + e), epsilon = 1e-9);
        assert_relative_eq!(l.0[1], 2.5 / (2.0 + e), epsilon = 1e-9);
        assert_relative_eq!(l.0[2], -2.0 / (1.0 + e), epsilon = 1e-9);
    }

    #[test]
    fn costate_scales_inversely_with_sigma() {
        let h = lander_h([300., -40., 500.]);
        let eta = Measurement::new(-3., -2., 0.1);
        let dy = Measurement::new(-0.2, -0.3, 0.05);
        let s1 = WeightingMatrix::diag(0.3, 0.7, 0.02);
        let s2 = WeightingMatrix { sigma_sq: s1.sigma_sq * 2.0 };
        let l1 = compute_costate(&h, &s1, &dy, &eta, 0.1, 1e-6).unwrap();
        let l2 = compute_costate(&h, &s2, &dy, &eta, 0.1, 1e-6).unwrap();
        assert_relative_eq!(l2.0 * 2.0, l1.0, epsilon = 1e-12, max_relative = 1e-12);
    }

    #[test]
    fn adaptive_eps_rules() {
        // collinear altitude and range rows: singular gram → raised regularizer
        let eps = adaptive_eps(&lander_h([0., 0., 100.]));
        assert_relative_eq!(eps, 1e-3, epsilon = 1e-15);
        // well-conditioned: cond = 3 at 30° elevation, tr/m = 1
        let eps = adaptive_eps(&lander_h([3f64.sqrt(), 0., 1.]));
        assert_relative_eq!(eps, 1e-8, epsilon = 1e-20);
        assert_eq!(adaptive_eps(&Jacobian::zeros()), EPS_FLOOR.max(0.0));
    }

    #[test]
    fn projection_cases() {
        let x = StateVector::from_array([10., 20., 30., 1., 2., 3.]);
        let h = lander_h([10., 20., 30.]);
        let x1 = project_state_update(&x, &CoState::zeros(), &h, 0.5).unwrap();
        assert_eq!(x1.0, x.0 + eval_dynamics(&x).unwrap().0 * 0.5);

        let rest = StateVector::from_array([5., 5., 5., 0., 0., 0.]);
        let mut sel = Jacobian::zeros();
        sel[(0, 2)] = 1.0;
        let x1 = project_state_update(&rest, &CoState(Vector3::new(1., 0., 0.)), &sel, 1.0).unwrap();
        assert_eq!(x1.0.as_slice(), &[5., 5., 6., 0., 0., 0.]);
    }

    #[test]
    fn projection_term_by_term() {
        let x = StateVector::from_array([1200., -300., 800., -20., 4., -15.]);
        let h = eval_jacobian(&x).unwrap();
        let lam = CoState(Vector3::new(0.3, -0.7, 0.2));
        let dt = 0.1;
        let x1 = project_state_update(&x, &lam, &h, dt).unwrap();
        let r = (1200f64.powi(2) + 300f64.powi(2) + 800f64.powi(2)).sqrt();
        let expect = [
            1200.0 - 20.0 * dt + (1200.0 / r) * (-0.7) * dt,
            -300.0 + 4.0 * dt + (-300.0 / r) * (-0.7) * dt,
            800.0 - 15.0 * dt + (0.3 + (800.0 / r) * (-0.7)) * dt,
            -20.0,
            4.0,
            -15.0 + 0.2 * dt,
        ];
        for i in 0..6 {
            assert_relative_eq!(x1.0[i], expect[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn whitened_innovation_cases() {
        let eta = Measurement::new(1., 1., 1.);
        assert_eq!(
            whitened_innovation(&Measurement(eta.0 * 0.2), &eta, 0.2, &WeightingMatrix::identity()),
            0.0
        );
        let zero = Measurement::new(0., 0., 0.);
        let z = whitened_innovation(&Measurement::new(3., 4., 0.), &zero, 1.0, &WeightingMatrix::identity());
        assert_relative_eq!(z, 5.0, epsilon = 1e-15);
    }

    #[test]
    fn rolling_rms_cases() {
        let w = InnovationWindow::new(10);
        assert_relative_eq!(rolling_rms_sigma(&w, 0.1).sigma_sq, Vector3::repeat(0.01), epsilon = 1e-17);

        let mut w = InnovationWindow::new(10);
        for i in 0..4 {
            w.push(i as f64, Vector3::zeros()).unwrap();
        }
        assert_eq!(rolling_rms_sigma(&w, 1e-3).sigma_sq, Vector3::repeat(1e-6));

        let mut w = InnovationWindow::new(10);
        for i in 0..5 {
            w.push(i as f64, Vector3::new(0.5, 2.0, 1e-5)).unwrap();
        }
        let s = rolling_rms_sigma(&w, 1e-3);
        assert_relative_eq!(s.sigma_sq, Vector3::new(0.25, 4.0, 1e-6), epsilon = 1e-15);

        let mut w = InnovationWindow::new(4);
        for (i, v) in [1.0, -1.0, 1.0, -1.0].iter().enumerate() {
            w.push(i as f64, Vector3::new(*v, 0.0, 0.0)).unwrap();
        }
        assert_relative_eq!(rolling_rms_sigma(&w, 0.1).sigma_sq[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn window_is_bounded_and_ordered() {
        let mut w = InnovationWindow::new(3);
        for i in 0..10 {
            w.push(i as f64, Vector3::repeat(i as f64)).unwrap();
        }
        assert_eq!(w.len(), 3);
        assert_eq!(w.iter().next().unwrap()[0], 7.0);
        assert!(w.push(9.0, Vector3::zeros()).is_err());
    }

    #[test]
    fn info_weighting_cases() {
        let q = Matrix6::identity();
        let s = info_weighting(&Jacobian::zeros(), &q, 1.0, 1.0, 1e-3);
        assert_eq!(s.sigma_sq, Vector3::repeat(1.0));
        let s = info_weighting(&lander_h([100., 3., 50.]), &q, 0.0, 2.0, 1e-3);
        assert_eq!(s.sigma_sq, Vector3::repeat(1.0));
        let h = lander_h([3., 4., 0.]);
        let d = (h * h.transpose()).diagonal();
        assert_relative_eq!(d, Vector3::repeat(1.0), epsilon = 1e-15);
        let s = info_weighting(&h, &q, 1.0, 0.1, 1e-3);
        assert_relative_eq!(s.sigma_sq, Vector3::repeat(1.0), epsilon = 1e-15);

        // only velocity sensitivity: the vertical-velocity channel dominates
        let mut qv = Matrix6::zeros();
        qv[(5, 5)] = 9.0;
        let s = info_weighting(&h, &qv, 1.0, 1.0, 1e-3);
        assert_relative_eq!(s.sigma_sq, Vector3::new(10.0, 10.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn lyapunov_cases() {
        let h = lander_h([100., 50., 300.]);
        let x = StateVector::from_array([1., 2., 3., 4., 5., 6.]);
        assert_eq!(lyapunov_value(&x, &x, &h, 1e-8).unwrap(), 0.0);

        let h = orthonormal_h();
        let dx = StateVector::from_array([1., 0., 0., 0., 0., 0.]);
        let v = lyapunov_value(&dx, &StateVector::zeros(), &h, 0.0).unwrap();
        assert_relative_eq!(v, 0.5, epsilon = 1e-15);

        // generic: compare with an explicit inverse-based quadratic form
        let h = lander_h([1., 0., 1.]);
        let dx = StateVector::from_array([0.3, -0.1, 0.2, 0.05, 0.0, -0.4]);
        let fdt = StateVector::from_array([0.1, 0.0, -0.1, 0.0, 0.02, 0.1]);
        let e = h * (dx.0 - fdt.0);
        let eps = 1e-4;
        let s = 0.5f64.sqrt();
        let det = (1.0f64 + eps).powi(2) - s * s;
        let q01 = (1.0 + eps) * (e[0] * e[0] + e[1] * e[1]) - 2.0 * s * e[0] * e[1];
        let expect = 0.5 * (q01 / det + e[2] * e[2] / (1.0 + eps));
        let v = lyapunov_value(&dx, &fdt, &h, eps).unwrap();
        assert_relative_eq!(v, expect, epsilon = 1e-14);
    }

    #[test]
    fn projector_converges_linearly_in_eps() {
        let h = lander_h([3f64.sqrt(), 0.2, 1.]);
        let p_exact = h.transpose() * (h * h.transpose()).try_inverse().unwrap() * h;
        let err = |eps: f64| {
            let d = regularized_projector(&h, eps).unwrap() - p_exact;
            d.singular_values().max()
        };
        let eps = [1e-2, 1e-4, 1e-6];
        let errs: Vec<f64> = eps.iter().map(|&e| err(e)).collect();
        for i in 0..2 {
            let ratio = errs[i] / errs[i + 1];
            let eps_ratio = eps[i] / eps[i + 1];
            assert!(ratio > eps_ratio / 2.0 && ratio < eps_ratio * 2.0, "ratio {ratio}");
        }
        assert!((p_exact * p_exact - p_exact).amax() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn state() -> impl Strategy<Value = StateVector> {
            (
                -5000.0..5000.0f64,
                -5000.0..5000.0f64,
                1.0..5000.0f64,
                -100.0..100.0f64,
                -100.0..100.0f64,
                -100.0..100.0f64,
            )
                .prop_map(|(a, b, c, d, e, f)| StateVector::from_array([a, b, c, d, e, f]))
        }

        fn sigma() -> impl Strategy<Value = WeightingMatrix> {
            (1e-3..10.0f64, 1e-3..10.0f64, 1e-3..10.0f64).prop_map(|(a, b, c)| WeightingMatrix::diag(a, b, c))
        }

        proptest! {
            #[test]
            fn null_response(x in state(), s in sigma(), dt in 1e-3..1.0f64) {
                let h = eval_jacobian(&x).unwrap();
                let eta = predicted_increment(&x).unwrap();
                let dy = Measurement(eta.0 * dt);
                let l = compute_costate(&h, &s, &dy, &eta, dt, adaptive_eps(&h)).unwrap();
                prop_assert_eq!(l.0, Vector3::zeros());
            }

            #[test]
            fn doubling_sigma_halves_lambda(x in state(), s in sigma(),
                                            r in proptest::array::uniform3(-1.0..1.0f64)) {
                let h = eval_jacobian(&x).unwrap();
                let eta = predicted_increment(&x).unwrap();
                let dy = Measurement(eta.0 * 0.1 + Vector3::from(r));
                let eps = adaptive_eps(&h);
                let l1 = compute_costate(&h, &s, &dy, &eta, 0.1, eps).unwrap();
                let s2 = WeightingMatrix { sigma_sq: s.sigma_sq * 2.0 };
                let l2 = compute_costate(&h, &s2, &dy, &eta, 0.1, eps).unwrap();
                prop_assert!((l2.0 * 2.0 - l1.0).amax() <= 1e-10 * (1.0 + l1.0.amax()));
            }

            #[test]
            fn lyapunov_nonnegative(x in state(), d in proptest::array::uniform6(-10.0..10.0f64)) {
                let h = eval_jacobian(&x).unwrap();
                let dx = StateVector::from_array(d);
                let v = lyapunov_value(&dx, &StateVector::zeros(), &h, adaptive_eps(&h)).unwrap();
                prop_assert!(v >= 0.0 && v.is_finite());
            }

            #[test]
            fn gram_inverse_is_spd(x in state()) {
                let h = eval_jacobian(&x).unwrap();
                let eps = adaptive_eps(&h);
                let g = regularized_gram_inverse(&h, eps).unwrap();
                prop_assert!((g - g.transpose()).amax() < 1e-6 * g.amax());
                prop_assert!(g.symmetric_eigenvalues().min() > 0.0);
            }

            #[test]
            fn rms_floor_holds(vals in proptest::collection::vec(proptest::array::uniform3(-1.0..1.0f64), 1..60)) {
                let mut w = InnovationWindow::new(50);
                for (i, v) in vals.iter().enumerate() {
                    w.push(i as f64, Vector3::from(*v)).unwrap();
                }
                let s = rolling_rms_sigma(&w, 1e-3);
                prop_assert!(s.sigma_sq.iter().all(|&x| x >= 1e-6));
                prop_assert!(w.len() <= 50);
            }
        }
    }
}
