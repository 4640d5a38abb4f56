//! Online regime discovery over co-state features.
//!
//! Features `φ = (λ, ‖λ‖, z)` are standardized with statistics frozen at the
//! end of warm-up and clustered with sequential k-means (learning rate
//! `1/count`). Modes are then tagged Nominal / Corrective / Hazard by the
//! magnitude of their co-state centroid.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::costate::CoState;
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 5;
pub const DEFAULT_MODES: usize = 3;
pub const DEFAULT_WARMUP: usize = 200;
pub const DEFAULT_MIN_SEPARATION: f64 = 0.5;

pub type Feature = [f64; FEATURE_DIM];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub lambda: Vector3<f64>,
    pub lambda_norm: f64,
    pub z: f64,
    pub time: f64,
}

impl FeatureVector {
    pub fn as_array(&self) -> Feature {
        [self.lambda.x, self.lambda.y, self.lambda.z, self.lambda_norm, self.z]
    }
}

pub fn extract_features(lambda: &CoState, z: f64, t: f64) -> FeatureVector {
    FeatureVector { lambda: lambda.0, lambda_norm: lambda.0.norm(), z, time: t }
}

/// Which parts of `φ` enter the clustering distance. Deselected parts are
/// still averaged into the centroids so labelling keeps working.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSelection {
    pub lambda: bool,
    pub lambda_norm: bool,
    pub z: bool,
}

impl Default for FeatureSelection {
    fn default() -> Self {
        FeatureSelection { lambda: true, lambda_norm: true, z: true }
    }
}

impl FeatureSelection {
    pub fn weights(&self) -> Feature {
        let b = |on: bool| if on { 1.0 } else { 0.0 };
        [b(self.lambda), b(self.lambda), b(self.lambda), b(self.lambda_norm), b(self.z)]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda || self.lambda_norm || self.z) {
            return Err(Error::InvalidConfig("at least one clustering feature must be selected".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeLabel {
    Nominal,
    Corrective,
    Hazard,
}

/// Clustered mode geometry. Centroids live in standardized feature space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeModel {
    pub k: usize,
    pub centroids: Vec<Feature>,
    pub counts: Vec<u64>,
    pub labels: Vec<ModeLabel>,
    pub mean: Feature,
    pub scale: Feature,
    pub weights: Feature,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn wdist2(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| w * (x - y) * (x - y)).sum()
}

/// Greedy pick of the first `k` points pairwise at least `sep` apart.
fn separated_seeds<const D: usize>(points: &[[f64; D]], k: usize, sep: f64, w: &[f64; D]) -> Vec<usize> {
    let mut seeds: Vec<usize> = Vec::with_capacity(k);
    for (i, p) in points.iter().enumerate() {
        if seeds.len() == k {
            break;
        }
        let ok = seeds.iter().all(|&s| {
            let d = wdist2(&points[s], p, w).sqrt();
            d > 0.0 && d >= sep
        });
        if ok {
            seeds.push(i);
        }
    }
    seeds
}

/// Sequential k-means pass: seeds start with count 1, every other point
/// updates its nearest centroid with rate `1/count`.
fn sequential_kmeans<const D: usize>(
    points: &[[f64; D]],
    seeds: &[usize],
    w: &[f64; D],
) -> (Vec<[f64; D]>, Vec<u64>) {
    let mut centroids: Vec<[f64; D]> = seeds.iter().map(|&s| points[s]).collect();
    let mut counts = vec![1u64; seeds.len()];
    for (i, p) in points.iter().enumerate() {
        if seeds.contains(&i) {
            continue;
        }
        let j = nearest_generic(&centroids, p, w);
        counts[j] += 1;
        let rate = 1.0 / counts[j] as f64;
        for d in 0..D {
            centroids[j][d] += rate * (p[d] - centroids[j][d]);
        }
    }
    (centroids, counts)
}

fn nearest_generic<const D: usize>(centroids: &[[f64; D]], x: &[f64; D], w: &[f64; D]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = wdist2(c, x, w);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

impl ModeModel {
    /// Freezes standardization on the warm-up batch, seeds `k` centroids and
    /// runs the sequential update over the batch.
    pub fn from_warmup(samples: &[FeatureVector], k: usize, min_separation: f64) -> Result<Self> {
        Self::from_warmup_selected(samples, k, min_separation, FeatureSelection::default())
    }

    pub fn from_warmup_selected(
        samples: &[FeatureVector],
        k: usize,
        min_separation: f64,
        selection: FeatureSelection,
    ) -> Result<Self> {
        selection.validate()?;
        let weights = selection.weights();
        if k == 0 {
            return Err(Error::InvalidConfig("mode count must be at least 1".into()));
        }
        let raw: Vec<Feature> = samples.iter().map(|s| s.as_array()).collect();
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite feature in warm-up batch".into()));
        }
        let n = raw.len().max(1) as f64;
        let mut mean = [0.0; FEATURE_DIM];
        for r in &raw {
            for d in 0..FEATURE_DIM {
                mean[d] += r[d] / n;
            }
        }
        let mut scale = [0.0; FEATURE_DIM];
        for r in &raw {
            for d in 0..FEATURE_DIM {
                scale[d] += (r[d] - mean[d]).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let std_pts: Vec<Feature> = raw
            .iter()
            .map(|r| {
                let mut o = [0.0; FEATURE_DIM];
                for d in 0..FEATURE_DIM {
                    o[d] = (r[d] - mean[d]) / scale[d];
                }
                o
            })
            .collect();
        let seeds = separated_seeds(&std_pts, k, min_separation, &weights);
        if seeds.len() < k {
            return Err(Error::WarmupIncomplete { needed: k, got: seeds.len() });
        }
        let (centroids, counts) = sequential_kmeans(&std_pts, &seeds, &weights);
        let mut model = ModeModel {
            k,
            centroids,
            counts,
            labels: vec![ModeLabel::Nominal; k],
            mean,
            scale,
            weights,
        };
        model.relabel();
        Ok(model)
    }

    pub fn standardize(&self, phi: &FeatureVector) -> Feature {
        let r = phi.as_array();
        let mut o = [0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            o[d] = (r[d] - self.mean[d]) / self.scale[d];
        }
        o
    }

    /// Nearest centroid in standardized space, ties to the lower index.
    pub fn assign(&self, phi: &FeatureVector) -> usize {
        nearest_generic(&self.centroids, &self.standardize(phi), &self.weights)
    }

    /// Assigns and moves the winning centroid toward the sample.
    pub fn update(&mut self, phi: &FeatureVector) -> usize {
        let x = self.standardize(phi);
        let j = nearest_generic(&self.centroids, &x, &self.weights);
        self.counts[j] += 1;
        let rate = 1.0 / self.counts[j] as f64;
        for d in 0..FEATURE_DIM {
            self.centroids[j][d] += rate * (x[d] - self.centroids[j][d]);
        }
        j
    }

    /// Centroid mapped back to raw feature units.
    pub fn raw_centroid(&self, j: usize) -> Feature {
        let mut o = [0.0; FEATURE_DIM];
        for d in 0..FEATURE_DIM {
            o[d] = self.centroids[j][d] * self.scale[d] + self.mean[d];
        }
        o
    }

    /// Co-state block of centroid `j` in standardized units.
    pub fn standardized_lambda(&self, j: usize) -> Vector3<f64> {
        let c = &self.centroids[j];
        Vector3::new(c[0], c[1], c[2])
    }

    /// Standardized co-state of a raw sample, consistent with
    /// [`ModeModel::standardized_lambda`].
    pub fn standardize_lambda(&self, lambda: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            (lambda.x - self.mean[0]) / self.scale[0],
            (lambda.y - self.mean[1]) / self.scale[1],
            (lambda.z - self.mean[2]) / self.scale[2],
        )
    }

    pub fn hazard_modes(&self) -> Vec<usize> {
        (0..self.k).filter(|&j| self.labels[j] == ModeLabel::Hazard).collect()
    }

    pub fn relabel(&mut self) {
        self.labels = label_regimes(self);
    }
}

/// Hazard = largest centroid `‖λ‖`, Nominal = smallest, the rest Corrective.
/// Ties in `‖λ‖` rank the larger-`z` mode as more hazardous.
pub fn label_regimes(model: &ModeModel) -> Vec<ModeLabel> {
    let k = model.centroids.len();
    if k == 0 {
        return Vec::new();
    }
    let key = |j: usize| (model.centroids[j][3], model.centroids[j][4]);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (na, za) = key(a);
        let (nb, zb) = key(b);
        na.total_cmp(&nb).then(za.total_cmp(&zb)).then(b.cmp(&a))
    });
    let mut labels = vec![ModeLabel::Corrective; k];
    labels[order[k - 1]] = ModeLabel::Hazard;
    if k > 1 {
        labels[order[0]] = ModeLabel::Nominal;
    }
    labels
}

/// Builds a warm-up model from the first `warmup` samples and streams the
/// remainder through the sequential update.
pub fn cluster_online(stream: &[FeatureVector], k: usize, warmup: usize) -> Result<ModeModel> {
    let n_w = warmup.min(stream.len());
    let mut model = ModeModel::from_warmup(&stream[..n_w], k, DEFAULT_MIN_SEPARATION)?;
    for phi in &stream[n_w..] {
        model.update(phi);
    }
    model.relabel();
    Ok(model)
}

pub fn assign_mode(phi: &FeatureVector, model: &ModeModel) -> usize {
    model.assign(phi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoStateCentroids {
    pub lambda_bar: Vec<Vector3<f64>>,
}

/// Sequential k-means in raw co-state space. Fewer than `k` separated
/// samples collapse to as many centroids as could be seeded.
pub fn costate_centroids(samples: &[CoState], k: usize) -> Result<CoStateCentroids> {
    if k == 0 || samples.len() < k {
        return Err(Error::WarmupIncomplete { needed: k.max(1), got: samples.len() });
    }
    let pts: Vec<[f64; 3]> = samples.iter().map(|s| [s.0.x, s.0.y, s.0.z]).collect();
    let n = pts.len() as f64;
    let mut mean = [0.0; 3];
    for p in &pts {
        for d in 0..3 {
            mean[d] += p[d] / n;
        }
    }
    let var: f64 = pts.iter().map(|p| dist2(p, &mean)).sum::<f64>() / (3.0 * n);
    let ones = [1.0; 3];
    let mut seeds = separated_seeds(&pts, k, DEFAULT_MIN_SEPARATION * var.sqrt(), &ones);
    if seeds.is_empty() {
        seeds.push(0);
    }
    let (c, _) = sequential_kmeans(&pts, &seeds, &ones);
    Ok(CoStateCentroids { lambda_bar: c.into_iter().map(Vector3::from).collect() })
}
