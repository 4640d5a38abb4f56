//! Risk-aware receding-horizon thrust selection.
//!
//! Minimizes, over `N` thrust-acceleration inputs,
//!
//! `J = Σ_k ℓ(x_{k+1}, u_k) + γ‖λ_k‖₁ + ρ Σ_{j transient} p_{k+1,j} / m_j`
//!
//! with `x` advanced by the co-state projected dynamics under a held
//! co-state forecast and `p` by `exp(LΔt)`. The quadratic stage cost is
//! charged on the state each input produces. Mode probabilities do not
//! depend on the inputs, so the risk terms and the constraint `pᵀWp ≤ R_max`
//! shape feasibility rather than the optimizer's direction.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::costate::CoState;
use crate::error::{Error, Result};
use crate::generator::{expm, mfpt, GeneratorMatrix, ModeProbabilities};
use crate::measurement::{eval_jacobian, StateVector};
use crate::sim::{DescentConfig, Guidance, ProfileGuidance, LUNAR_GRAVITY};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal state-tracking weights.
    pub q: [f64; 6],
    /// Control-effort weight.
    pub r: f64,
    pub gamma: f64,
    pub rho: f64,
    pub hazard: Vec<usize>,
    /// Risk metric; `None` means the indicator of the hazard modes.
    pub w: Option<Vec<Vec<f64>>>,
    pub r_max: f64,
    /// Per-axis bound on thrust acceleration.
    pub u_max: f64,
    pub iterations: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 3,
            dt: 0.1,
            q: [0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            r: 1e-3,
            gamma: 0.0,
            rho: 0.0,
            hazard: vec![2],
            w: None,
            r_max: 1.0,
            u_max: 5.0,
            iterations: 100,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.horizon == 0 || !(self.dt > 0.0) {
            return bad("horizon must be at least 1 and dt positive".into());
        }
        if self.q.iter().chain([&self.r, &self.gamma, &self.rho]).any(|v| !(*v >= 0.0)) {
            return bad("cost weights must be nonnegative".into());
        }
        if !(self.r_max > 0.0) || !(self.u_max > 0.0) {
            return bad("risk bound and control bound must be positive".into());
        }
        if self.hazard.iter().any(|&h| h >= k) {
            return bad(format!("hazard modes {:?} out of range for {k} modes", self.hazard));
        }
        let w = self.risk_metric(k)?;
        let sym = (&w - w.transpose()).amax() <= 1e-12;
        let psd = w.clone().symmetric_eigenvalues().iter().all(|&e| e >= -1e-12);
        if !sym || !psd {
            return bad("risk metric must be symmetric positive semidefinite".into());
        }
        Ok(())
    }

    pub fn risk_metric(&self, k: usize) -> Result<DMatrix<f64>> {
        match &self.w {
            None => Ok(DMatrix::from_fn(k, k, |i, j| if i == j && self.hazard.contains(&i) { 1.0 } else { 0.0 })),
            Some(rows) => {
                if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                    return Err(Error::InvalidConfig(format!("risk metric must be {k}x{k}")));
                }
                Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    pub controls: Vec<Vector3<f64>>,
    pub cost: f64,
    /// Cost after each accepted iteration, starting from the zero sequence.
    pub cost_trace: Vec<f64>,
    pub fallback: bool,
    /// Predicted mode probabilities at steps `1..=N`.
    pub p_trace: Vec<ModeProbabilities>,
    /// `Σ_transient p_j / m_j` at the terminal step.
    pub terminal_inv_mfpt: f64,
}

impl MpcSolution {
    pub fn first(&self) -> Vector3<f64> {
        self.controls[0]
    }
}

struct Problem<'a> {
    x0: StateVector,
    lambda: &'a [CoState],
    cfg: &'a MpcConfig,
    x_ref: [f64; 6],
    /// Per-step risk cost, independent of the inputs.
    risk_cost: f64,
}

impl Problem<'_> {
    fn lambda_at(&self, k: usize) -> CoState {
        match self.lambda.len() {
            0 => CoState::zeros(),
            n => self.lambda[k.min(n - 1)],
        }
    }

    fn cost(&self, u: &[f64]) -> Result<f64> {
        let cfg = self.cfg;
        let mut x = self.x0;
        let mut j = self.risk_cost;
        for k in 0..cfg.horizon {
            let uk = Vector3::new(u[3 * k], u[3 * k + 1], u[3 * k + 2]);
            let lam = self.lambda_at(k);
            let h = eval_jacobian(&x)?;
            let corr = h.transpose() * lam.0 * cfg.dt;
            let a = uk - Vector3::new(0.0, 0.0, LUNAR_GRAVITY);
            let mut next = x.0 + corr;
            for i in 0..3 {
                next[i] += x.0[i + 3] * cfg.dt;
                next[i + 3] += a[i] * cfg.dt;
            }
            x = StateVector(next);
            for i in 0..6 {
                j += cfg.q[i] * (x.0[i] - self.x_ref[i]).powi(2);
            }
            j += cfg.r * uk.norm_squared() + cfg.gamma * lam.0.lp_norm(1);
        }
        Ok(j)
    }

    fn project(&self, u: &mut [f64]) {
        let m = self.cfg.u_max;
        for v in u.iter_mut() {
            *v = v.clamp(-m, m);
        }
    }

    fn gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; u.len()];
        let mut w = u.to_vec();
        for i in 0..u.len() {
            let h = 1e-6 * (1.0 + u[i].abs());
            w[i] = u[i] + h;
            let fp = self.cost(&w)?;
            w[i] = u[i] - h;
            let fm = self.cost(&w)?;
            w[i] = u[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }
}

/// Inverse-MFPT risk `Σ_transient p_j / m_j`; modes that cannot reach the
/// hazard set contribute nothing.
pub fn inverse_mfpt(l: &GeneratorMatrix, p: &ModeProbabilities, hazard: &[usize]) -> f64 {
    if hazard.is_empty() {
        return 0.0;
    }
    match mfpt(l, hazard) {
        Ok(m) => m
            .modes
            .iter()
            .zip(&m.times)
            .filter(|(_, t)| t.is_finite() && **t > 0.0)
            .map(|(&j, t)| p.0[j] / t)
            .sum(),
        Err(_) => 0.0,
    }
}

/// Full-thrust braking against the current velocity, per-axis clipped.
pub fn max_braking(x: &StateVector, u_max: f64) -> Vector3<f64> {
    let v = x.velocity();
    let n = v.norm();
    let dir = if n > 0.0 { -v / n } else { Vector3::z() };
    (dir * u_max * 3f64.sqrt()).map(|c| c.clamp(-u_max, u_max))
}

pub fn solve_mpc(
    x: &StateVector,
    p: &ModeProbabilities,
    l: &GeneratorMatrix,
    lambda_pred: &[CoState],
    x_ref: [f64; 6],
    cfg: &MpcConfig,
) -> Result<MpcSolution> {
    let k = p.k();
    if l.k() != k {
        return Err(Error::InvalidState(format!("generator has {} modes, probabilities {k}", l.k())));
    }
    if !l.is_valid() {
        return Err(Error::InvalidState("generator columns must sum to zero with nonnegative rates".into()));
    }
    if !p.on_simplex(1e-9) {
        return Err(Error::InvalidState("mode probabilities off the simplex".into()));
    }
    cfg.validate(k)?;
    let w = cfg.risk_metric(k)?;
    let e = expm(&(&l.0 * cfg.dt))?;

    let risk = |q: &ModeProbabilities| (q.0.transpose() * &w * &q.0)[(0, 0)];
    let mut feasible = risk(p) <= cfg.r_max + 1e-12;
    let mut p_trace = Vec::with_capacity(cfg.horizon);
    let mut q = p.clone();
    let mut risk_cost = 0.0;
    for _ in 0..cfg.horizon {
        q = ModeProbabilities(&e * &q.0);
        feasible &= risk(&q) <= cfg.r_max + 1e-12;
        risk_cost += cfg.rho * inverse_mfpt(l, &q, &cfg.hazard);
        p_trace.push(q.clone());
    }
    let terminal_inv_mfpt = inverse_mfpt(l, &q, &cfg.hazard);

    let prob = Problem { x0: *x, lambda: lambda_pred, cfg, x_ref, risk_cost };
    if !feasible {
        let u = max_braking(x, cfg.u_max);
        let controls = vec![u; cfg.horizon];
        let flat: Vec<f64> = controls.iter().flat_map(|c| c.iter().copied()).collect();
        let cost = prob.cost(&flat)?;
        return Ok(MpcSolution { controls, cost, cost_trace: vec![cost], fallback: true, p_trace, terminal_inv_mfpt });
    }

    let n = 3 * cfg.horizon;
    let mut u = vec![0.0; n];
    let mut f = prob.cost(&u)?;
    let mut trace = vec![f];
    let mut step = 1.0;
    for _ in 0..cfg.iterations {
        let g = prob.gradient(&u)?;
        let mut accepted = false;
        let mut s = step;
        for _ in 0..60 {
            let mut cand: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - s * b).collect();
            prob.project(&mut cand);
            let d2: f64 = cand.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum();
            if d2 == 0.0 {
                break;
            }
            let fc = prob.cost(&cand)?;
            // sufficient decrease along the projected arc
            if fc <= f - 1e-4 / s * d2 {
                u = cand;
                f = fc;
                accepted = true;
                break;
            }
            s *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(f);
        step = (s * 2.0).min(1e6);
    }
    let controls = (0..cfg.horizon).map(|k| Vector3::new(u[3 * k], u[3 * k + 1], u[3 * k + 2])).collect();
    Ok(MpcSolution { controls, cost: f, cost_trace: trace, fallback: false, p_trace, terminal_inv_mfpt })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcStep {
    pub t: f64,
    pub state: [f64; 6],
    pub control: [f64; 3],
    pub cost: f64,
    pub fallback: bool,
    pub hazard_prob: f64,
    pub terminal_inv_mfpt: f64,
}

/// Closed-loop wrapper tracking the profile velocity with [`solve_mpc`].
pub struct MpcGuidance {
    pub cfg: MpcConfig,
    pub generator: GeneratorMatrix,
    pub p: ModeProbabilities,
    pub lambda: CoState,
    pub last: Option<MpcSolution>,
    pub fallbacks: usize,
    pub log: Vec<MpcStep>,
}

impl MpcGuidance {
    pub fn new(cfg: MpcConfig, generator: GeneratorMatrix, p: ModeProbabilities) -> Self {
        MpcGuidance { cfg, generator, p, lambda: CoState::zeros(), last: None, fallbacks: 0, log: Vec::new() }
    }

    /// Profile state one MPC step ahead of `state`.
    pub fn reference(state: &StateVector, sim: &DescentConfig, dt: f64) -> [f64; 6] {
        let a = ProfileGuidance::desired_accel(state, sim);
        let v = state.velocity() + a * dt;
        let p = state.position() + state.velocity() * dt;
        [p.x, p.y, p.z, v.x, v.y, v.z]
    }
}

impl Guidance for MpcGuidance {
    fn command(&mut self, t: f64, state: &StateVector, sim: &DescentConfig) -> Vector3<f64> {
        let x_ref = Self::reference(state, sim, self.cfg.dt);
        let hazard_prob = self.cfg.hazard.iter().map(|&j| self.p.0[j]).sum();
        let sol = solve_mpc(state, &self.p, &self.generator, &[self.lambda], x_ref, &self.cfg);
        let (u, cost, fallback, inv) = match sol {
            Ok(s) => {
                let u = s.first();
                if let Some(p1) = s.p_trace.first() {
                    self.p = p1.clone();
                }
                let out = (u, s.cost, s.fallback, s.terminal_inv_mfpt);
                self.last = Some(s);
                out
            }
            Err(e) => {
                log::warn!("MPC solve failed ({e}); braking");
                (max_braking(state, self.cfg.u_max), f64::NAN, true, f64::NAN)
            }
        };
        if fallback {
            self.fallbacks += 1;
        }
        self.log.push(MpcStep { t, state: state.0.into(), control: [u.x, u.y, u.z], cost, fallback, hazard_prob, terminal_inv_mfpt: inv });
        u
    }
}
