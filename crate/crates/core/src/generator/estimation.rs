//! Moment-based drift / diffusion statistics and generator assembly.

use nalgebra::DMatrix;

use super::{GeneratorMatrix, LabeledTrajectory, TransitionStats};
use crate::error::{Error, Result};

/// Mean pairwise distances between clusters: `full[(k, l)]` is Euclidean,
/// `per_coord[q][(k, l)]` is the per-coordinate absolute difference.
#[derive(Clone, Debug, PartialEq)]
pub struct InterclusterDistances {
    pub full: DMatrix<f64>,
    pub per_coord: Vec<DMatrix<f64>>,
}

pub fn intercluster_distances(traj: &LabeledTrajectory) -> Result<InterclusterDistances> {
    let k = traj.k();
    let dim = traj.samples().first().map_or(0, |s| s.x.len());
    let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); k];
    for s in traj.samples() {
        if s.x.len() != dim {
            return Err(Error::InvalidState("feature dimension varies along trajectory".into()));
        }
        members[s.mode].push(&s.x);
    }
    if let Some(empty) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::DegenerateCluster(empty));
    }
    let mut full = DMatrix::zeros(k, k);
    let mut per_coord = vec![DMatrix::zeros(k, k); dim];
    for a in 0..k {
        for b in a..k {
            let norm = (members[a].len() * members[b].len()) as f64;
            let mut sum = 0.0;
            let mut sum_q = vec![0.0; dim];
            for xi in &members[a] {
                for xj in &members[b] {
                    let mut d2 = 0.0;
                    for q in 0..dim {
                        let d = xj[q] - xi[q];
                        d2 += d * d;
                        sum_q[q] += d.abs();
                    }
                    sum += d2.sqrt();
                }
            }
            full[(a, b)] = sum / norm;
            full[(b, a)] = sum / norm;
            for q in 0..dim {
                per_coord[q][(a, b)] = sum_q[q] / norm;
                per_coord[q][(b, a)] = sum_q[q] / norm;
            }
        }
    }
    Ok(InterclusterDistances { full, per_coord })
}

/// `a_kl^q` per coordinate, the per-mode aggregate `ā_k^q`, and the scalar
/// pair rate `ā_kl` (row = origin mode).
#[derive(Clone, Debug, PartialEq)]
pub struct DriftEstimate {
    pub a_kl_q: Vec<DMatrix<f64>>,
    pub a_bar_k_q: DMatrix<f64>,
    pub a_bar_kl: DMatrix<f64>,
}

fn increment(traj: &LabeledTrajectory, i: usize, q: usize) -> (f64, f64) {
    let s = traj.samples();
    ((s[i + 1].x[q] - s[i].x[q]).abs(), s[i + 1].t - s[i].t)
}

pub fn estimate_drift(
    traj: &LabeledTrajectory,
    stats: &TransitionStats,
    dist: &InterclusterDistances,
) -> DriftEstimate {
    let k = stats.k;
    let dim = dist.per_coord.len();
    let mut a_kl_q = vec![DMatrix::zeros(k, k); dim];
    for a in 0..k {
        for b in 0..k {
            let idx = &stats.transitions[a][b];
            if a == b || idx.is_empty() {
                continue;
            }
            for q in 0..dim {
                let sum: f64 = idx.iter().map(|&i| {
                    let (dx, dt) = increment(traj, i, q);
                    dx / dt
                }).sum();
                a_kl_q[q][(a, b)] = sum / idx.len() as f64;
            }
        }
    }
    let mut a_bar_k_q = DMatrix::zeros(k, dim);
    let mut a_bar_kl = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            if a == b {
                continue;
            }
            for q in 0..dim {
                let num = a_kl_q[q][(a, b)];
                let l = dist.per_coord[q][(a, b)].abs();
                if l > 0.0 {
                    a_bar_k_q[(a, q)] += num / l;
                    a_bar_kl[(a, b)] += num / l;
                } else if num != 0.0 {
                    log::debug!("drift {a}->{b}: coordinate {q} skipped, zero inter-cluster spread");
                }
            }
        }
    }
    DriftEstimate { a_kl_q, a_bar_k_q, a_bar_kl }
}

/// Per-pair diffusion covariance `σ_kl^{pq}` and its normalized scalar `σ̄_kl`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionEstimate {
    pub sigma_kl_pq: Vec<Vec<DMatrix<f64>>>,
    pub sigma_bar_kl: DMatrix<f64>,
}

pub fn estimate_diffusion(
    traj: &LabeledTrajectory,
    stats: &TransitionStats,
    dist: &InterclusterDistances,
    drift: &DriftEstimate,
) -> DiffusionEstimate {
    let k = stats.k;
    let dim = dist.per_coord.len();
    let mut sigma_kl_pq = vec![vec![DMatrix::zeros(dim, dim); k]; k];
    let mut sigma_bar_kl = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let idx = &stats.transitions[a][b];
            if a == b || idx.len() <= 1 {
                continue;
            }
            let centered: Vec<Vec<f64>> = idx
                .iter()
                .map(|&i| {
                    (0..dim)
                        .map(|q| {
                            let (dx, dt) = increment(traj, i, q);
                            let sdt = dt.sqrt();
                            dx / sdt - drift.a_kl_q[q][(a, b)] * sdt
                        })
                        .collect()
                })
                .collect();
            let denom = (idx.len() - 1) as f64;
            let s = &mut sigma_kl_pq[a][b];
            for p in 0..dim {
                for q in 0..dim {
                    s[(p, q)] = centered.iter().map(|c| c[p] * c[q]).sum::<f64>() / denom;
                }
            }
            let mut bar = 0.0;
            let mut vanished = false;
            for p in 0..dim {
                for q in 0..dim {
                    let d = dist.per_coord[p][(a, b)] * dist.per_coord[q][(a, b)];
                    if d == 0.0 {
                        vanished = true;
                    } else {
                        bar += s[(p, q)] / d;
                    }
                }
            }
            sigma_bar_kl[(a, b)] = if vanished { 0.0 } else { bar };
        }
    }
    DiffusionEstimate { sigma_kl_pq, sigma_bar_kl }
}

/// `L = L1out + L1in + L2` from pair rates `ā` and diffusions `σ̄` (both
/// indexed origin-row). The result may carry negative off-diagonals.
pub fn assemble_generator(a_bar: &DMatrix<f64>, sigma_bar: &DMatrix<f64>) -> GeneratorMatrix {
    let k = a_bar.nrows();
    let mut out = DMatrix::zeros(k, k);
    let mut inn = DMatrix::zeros(k, k);
    let mut l2 = DMatrix::zeros(k, k);
    for c in 0..k {
        for r in 0..k {
            if r != c {
                out[(r, c)] = a_bar[(c, r)];
                inn[(r, c)] = -a_bar[(r, c)];
                l2[(r, c)] = 0.5 * (sigma_bar[(c, r)] + sigma_bar[(r, c)]);
            }
        }
    }
    for c in 0..k {
        let so: f64 = (0..k).filter(|&r| r != c).map(|r| out[(r, c)]).sum();
        let si: f64 = (0..k).filter(|&r| r != c).map(|r| inn[(r, c)]).sum();
        let s2: f64 = (0..k).filter(|&r| r != c).map(|r| l2[(c, r)]).sum();
        out[(c, c)] = -so;
        inn[(c, c)] = -si;
        l2[(c, c)] = -s2;
    }
    GeneratorMatrix(out + inn + l2)
}

/// Clips negative off-diagonals to zero and resets each diagonal so its
/// column sums to zero.
pub fn enforce_generator_validity(l: &GeneratorMatrix) -> GeneratorMatrix {
    let k = l.k();
    let mut m = l.0.clone();
    for c in 0..k {
        let mut s = 0.0;
        for r in 0..k {
            if r != c {
                if !(m[(r, c)] > 0.0) {
                    m[(r, c)] = 0.0;
                }
                s += m[(r, c)];
            }
        }
        m[(c, c)] = -s;
    }
    GeneratorMatrix(m)
}

/// Full moment pipeline: distances, drift, diffusion, assembly, validity.
pub fn moment_generator(traj: &LabeledTrajectory) -> Result<GeneratorMatrix> {
    let stats = traj.transition_stats();
    let dist = intercluster_distances(traj)?;
    let drift = estimate_drift(traj, &stats, &dist);
    let diff = estimate_diffusion(traj, &stats, &dist, &drift);
    Ok(enforce_generator_validity(&assemble_generator(&drift.a_bar_kl, &diff.sigma_bar_kl)))
}
