//! Ground-truth clusters and continual task arrivals.
//!
//! Clusters are drawn so that same-cluster ground truths sit within an
//! `sigma0^2` l-infinity ball of each other while distinct cluster centers are
//! separated on the `sigma0` scale. Each task carries one noise-free signal
//! column identifying its cluster plus `s - 1` isotropic Gaussian columns.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Lower edge of the admissible center gap window, in units of `sigma0`.
pub const CENTER_GAP_LOWER: f64 = 0.25;
/// Upper edge of the admissible center gap window, in units of `sigma0`.
pub const CENTER_GAP_UPPER: f64 = 4.0;
/// Minimum pairwise l-infinity distance between feature signals.
pub const SIGNAL_MIN_GAP: f64 = 0.5;
/// Signals are normalized to this l-infinity norm.
pub const SIGNAL_NORM: f64 = 1.0;
pub const DEFAULT_ATTEMPT_BUDGET: usize = 10_000;

pub fn linf(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn linf_gap(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub n_clusters: usize,
    pub dim: usize,
    pub sigma0: f64,
    pub centers: Vec<DVector<f64>>,
    /// Feature signal `v_n` of each cluster.
    pub signals: Vec<DVector<f64>>,
    /// Element-wise half-width of the uniform within-cluster perturbation.
    pub within_jitter: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterOptions {
    pub n_clusters: usize,
    pub dim: usize,
    pub sigma0: f64,
    /// Defaults to `sigma0^2 / 2`.
    pub within_jitter: Option<f64>,
    pub attempt_budget: usize,
}

impl ClusterOptions {
    pub fn new(n_clusters: usize, dim: usize, sigma0: f64) -> Self {
        Self {
            n_clusters,
            dim,
            sigma0,
            within_jitter: None,
            attempt_budget: DEFAULT_ATTEMPT_BUDGET,
        }
    }
}

impl ClusterSet {
    pub fn center_gap_window(&self) -> (f64, f64) {
        (CENTER_GAP_LOWER * self.sigma0, CENTER_GAP_UPPER * self.sigma0)
    }

    /// Checks the structural invariants, returning the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.centers.len() != self.n_clusters || self.signals.len() != self.n_clusters {
            return Err("center/signal count differs from n_clusters".into());
        }
        if let Some(msg) = center_window_violation(&self.centers, self.sigma0) {
            return Err(msg);
        }
        for (n, v) in self.signals.iter().enumerate() {
            let norm = linf(v);
            if !(norm > 0.0 && norm <= 2.0) {
                return Err(format!("signal {n} has l-inf norm {norm} outside (0, 2]"));
            }
        }
        if self.within_jitter > self.sigma0 * self.sigma0 / 2.0 {
            return Err(format!(
                "within_jitter {} exceeds sigma0^2/2 = {}",
                self.within_jitter,
                self.sigma0 * self.sigma0 / 2.0
            ));
        }
        Ok(())
    }
}

fn center_window_violation(centers: &[DVector<f64>], sigma0: f64) -> Option<String> {
    let (lo, hi) = (CENTER_GAP_LOWER * sigma0, CENTER_GAP_UPPER * sigma0);
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let gap = linf_gap(&centers[i], &centers[j]);
            if gap < lo || gap > hi {
                return Some(format!(
                    "center gap between clusters {i} and {j} is {gap}, outside [{lo}, {hi}]"
                ));
            }
        }
    }
    None
}

fn signal_gap_violation(signals: &[DVector<f64>]) -> Option<String> {
    for i in 0..signals.len() {
        for j in i + 1..signals.len() {
            let gap = linf_gap(&signals[i], &signals[j]);
            if gap < SIGNAL_MIN_GAP {
                return Some(format!(
                    "signal gap between clusters {i} and {j} is {gap}, below {SIGNAL_MIN_GAP}"
                ));
            }
        }
    }
    None
}

fn gaussian_vector(dim: usize, std: f64, rng: &mut SimRng) -> DVector<f64> {
    DVector::from_iterator(
        dim,
        (0..dim).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        }),
    )
}

pub fn generate_clusters(n_clusters: usize, dim: usize, sigma0: f64, rng: &mut SimRng) -> Result<ClusterSet> {
    generate_clusters_with(&ClusterOptions::new(n_clusters, dim, sigma0), rng)
}

pub fn generate_clusters_with(opts: &ClusterOptions, rng: &mut SimRng) -> Result<ClusterSet> {
    let ClusterOptions {
        n_clusters,
        dim,
        sigma0,
        ..
    } = *opts;
    if !(sigma0 > 0.0 && sigma0 < 1.0) {
        return Err(Error::Domain(format!("sigma0 must lie in (0, 1), got {sigma0}")));
    }
    if n_clusters < 2 {
        return Err(Error::Domain(format!("need at least 2 clusters, got {n_clusters}")));
    }
    if dim < 2 {
        return Err(Error::Domain(format!("need dim >= 2, got {dim}")));
    }
    let max_jitter = sigma0 * sigma0 / 2.0;
    let within_jitter = opts.within_jitter.unwrap_or(max_jitter);
    if !(0.0..=max_jitter).contains(&within_jitter) {
        return Err(Error::Domain(format!(
            "within_jitter must lie in [0, sigma0^2/2 = {max_jitter}], got {within_jitter}"
        )));
    }
    let budget = opts.attempt_budget.max(1);

    let mut last = String::new();
    let mut centers = None;
    for _ in 0..budget {
        let candidate: Vec<_> = (0..n_clusters).map(|_| gaussian_vector(dim, sigma0, rng)).collect();
        match center_window_violation(&candidate, sigma0) {
            None => {
                centers = Some(candidate);
                break;
            }
            Some(msg) => last = msg,
        }
    }
    let centers = centers.ok_or_else(|| Error::GenerationFailure {
        invariant: last.clone(),
        attempts: budget,
    })?;

    let mut signals = None;
    for _ in 0..budget {
        let candidate: Vec<_> = (0..n_clusters)
            .map(|_| loop {
                let v = gaussian_vector(dim, 1.0, rng);
                let norm = linf(&v);
                if norm > 0.0 {
                    break v * (SIGNAL_NORM / norm);
                }
            })
            .collect();
        match signal_gap_violation(&candidate) {
            None => {
                signals = Some(candidate);
                break;
            }
            Some(msg) => last = msg,
        }
    }
    let signals = signals.ok_or(Error::GenerationFailure {
        invariant: last,
        attempts: budget,
    })?;

    Ok(ClusterSet {
        n_clusters,
        dim,
        sigma0,
        centers,
        signals,
        within_jitter,
    })
}

/// Draws a ground truth from cluster `cluster_id`: its center plus uniform
/// element-wise jitter in `[-within_jitter, within_jitter]`.
pub fn sample_ground_truth(clusters: &ClusterSet, cluster_id: usize, rng: &mut SimRng) -> DVector<f64> {
    assert!(cluster_id < clusters.n_clusters, "cluster id out of range");
    let center = &clusters.centers[cluster_id];
    let a = clusters.within_jitter;
    if a == 0.0 {
        return center.clone();
    }
    DVector::from_iterator(center.len(), center.iter().map(|c| c + rng.random_range(-a..=a)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub cluster: usize,
    pub truth: DVector<f64>,
    /// `p x s`; each column is one sample.
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    /// Column of `features` holding `beta * v_cluster`. Hidden from routers.
    pub signal_pos: usize,
    pub beta: f64,
    pub nearest_expert: usize,
    pub arrival: u64,
}

impl Task {
    /// Sum of the feature columns, the gating network's input.
    pub fn feature_sum(&self) -> DVector<f64> {
        feature_sum(&self.features)
    }
}

pub fn feature_sum(features: &DMatrix<f64>) -> DVector<f64> {
    features.column_sum()
}

#[derive(Debug, Clone, Copy)]
pub struct TaskParams {
    pub samples: usize,
    pub sigma_noise: f64,
    pub beta_max: f64,
    pub n_experts: usize,
}

/// Largest admissible `beta_max` (the constant `C`).
pub const BETA_CAP: f64 = 1.0;

pub fn generate_task(clusters: &ClusterSet, id: u64, params: &TaskParams, rng: &mut SimRng) -> Result<Task> {
    let p = clusters.dim;
    let s = params.samples;
    if s == 0 || s >= p {
        return Err(Error::Domain(format!("need 0 < s < p, got s={s}, p={p}")));
    }
    if !(params.beta_max > 0.0 && params.beta_max <= BETA_CAP) {
        return Err(Error::Domain(format!(
            "beta_max must lie in (0, {BETA_CAP}], got {}",
            params.beta_max
        )));
    }
    if !(params.sigma_noise >= 0.0) {
        return Err(Error::Domain(format!(
            "sigma_noise must be non-negative, got {}",
            params.sigma_noise
        )));
    }
    if params.n_experts == 0 {
        return Err(Error::Domain("need at least one expert".into()));
    }

    let cluster = rng.random_range(0..clusters.n_clusters);
    let truth = sample_ground_truth(clusters, cluster, rng);
    // (0, C]: flip the half-open [0, 1) draw.
    let beta = params.beta_max * (1.0 - rng.random::<f64>());
    let signal_pos = rng.random_range(0..s);

    let noise = Normal::new(0.0, params.sigma_noise).map_err(|e| Error::Domain(format!("noise distribution: {e}")))?;
    let signal = &clusters.signals[cluster] * beta;
    let mut features = DMatrix::zeros(p, s);
    for j in 0..s {
        if j == signal_pos {
            features.set_column(j, &signal);
        } else {
            for i in 0..p {
                features[(i, j)] = noise.sample(rng);
            }
        }
    }
    let labels = features.tr_mul(&truth);
    let nearest_expert = rng.random_range(0..params.n_experts);

    Ok(Task {
        id,
        cluster,
        truth,
        features,
        labels,
        signal_pos,
        beta,
        nearest_expert,
        arrival: id,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub samples_per_cluster: usize,
    pub within_min: f64,
    pub within_max: f64,
    /// Bound on same-cluster gaps, `sigma0^2`.
    pub within_limit: f64,
    /// `None` when there is only one cluster.
    pub center_gap: Option<(f64, f64)>,
    pub truth_cross_gap: Option<(f64, f64)>,
    pub center_window: (f64, f64),
    pub pass: bool,
}

pub fn verify_separation(
    clusters: &ClusterSet,
    samples_per_cluster: usize,
    rng: &mut SimRng,
) -> Result<SeparationReport> {
    if samples_per_cluster < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 samples per cluster, got {samples_per_cluster}"
        )));
    }
    let samples: Vec<Vec<DVector<f64>>> = (0..clusters.n_clusters)
        .map(|n| {
            (0..samples_per_cluster)
                .map(|_| sample_ground_truth(clusters, n, rng))
                .collect()
        })
        .collect();

    let mut within = (f64::INFINITY, 0.0_f64);
    for group in &samples {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let g = linf_gap(&group[i], &group[j]);
                within = (within.0.min(g), within.1.max(g));
            }
        }
    }

    let mut center_gap = None::<(f64, f64)>;
    let mut truth_cross = None::<(f64, f64)>;
    let widen = |acc: Option<(f64, f64)>, g: f64| match acc {
        None => Some((g, g)),
        Some((lo, hi)) => Some((lo.min(g), hi.max(g))),
    };
    for a in 0..clusters.n_clusters {
        for b in a + 1..clusters.n_clusters {
            center_gap = widen(center_gap, linf_gap(&clusters.centers[a], &clusters.centers[b]));
            for x in &samples[a] {
                for y in &samples[b] {
                    truth_cross = widen(truth_cross, linf_gap(x, y));
                }
            }
        }
    }

    let within_limit = clusters.sigma0 * clusters.sigma0;
    let window = clusters.center_gap_window();
    let centers_ok = center_gap.is_none_or(|(lo, hi)| lo >= window.0 && hi <= window.1);
    Ok(SeparationReport {
        samples_per_cluster,
        within_min: within.0,
        within_max: within.1,
        within_limit,
        center_gap,
        truth_cross_gap: truth_cross,
        center_window: window,
        pass: within.1 <= within_limit && centers_ok,
    })
}
