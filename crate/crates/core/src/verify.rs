//! Self-check suites run by `edge-moe verify` and by the acceptance tests.
//!
//! Every check draws its own randomized instances from a seeded stream and
//! reports the worst observed deviation against a fixed tolerance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{
    benchmark_error_expectation, cluster_gap_expectation, expert_threshold, inverse_normal_cdf, normal_cdf,
};
use crate::expert::min_norm_update;
use crate::gating::{gradient_from_cache, softmax};
use crate::rng::{seeded, substream, SimRng};
use crate::task_gen::{generate_clusters, generate_task, TaskParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub observed: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} worst={:.3e} tol={:.1e} n={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance,
            self.instances
        )
    }
}

fn check(name: &'static str, observed: f64, tolerance: f64, instances: usize) -> CheckResult {
    CheckResult {
        name,
        passed: observed <= tolerance,
        observed,
        tolerance,
        instances,
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SimRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn gaussian_vector(len: usize, rng: &mut SimRng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

struct UpdateInstance {
    prev: DVector<f64>,
    features: DMatrix<f64>,
    labels: DVector<f64>,
    truth: DVector<f64>,
}

/// Tasks from the generator with a random previous model.
fn update_instances(n: usize, seed: u64) -> Vec<UpdateInstance> {
    let mut rng = seeded(substream(seed, "update-instances"));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let dim = rng.random_range(4..=20usize);
        let samples = rng.random_range(1..dim);
        let sigma0 = rng.random_range(0.2..0.9);
        let Ok(clusters) = generate_clusters(rng.random_range(2..=5), dim, sigma0, &mut rng) else {
            continue;
        };
        let params = TaskParams {
            samples,
            sigma_noise: rng.random_range(0.05..1.0),
            beta_max: 1.0,
            n_experts: 3,
        };
        let task = generate_task(&clusters, out.len() as u64 + 1, &params, &mut rng).expect("valid params");
        let prev = gaussian_vector(dim, &mut rng) * rng.random_range(0.0..2.0);
        out.push(UpdateInstance {
            prev,
            features: task.features,
            labels: task.labels,
            truth: task.truth,
        });
    }
    out
}

/// Projection of `v` onto the column space of `x`.
fn project(x: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let gram = x.tr_mul(x);
    let coef = gram.lu().solve(&x.tr_mul(v)).expect("full column rank");
    x * coef
}

/// Solves `[I X; X^T 0] [w; l] = [prev; y]` directly.
pub fn kkt_min_norm(prev: &DVector<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (p, s) = x.shape();
    let mut k = DMatrix::zeros(p + s, p + s);
    k.view_mut((0, 0), (p, p)).fill_with_identity();
    k.view_mut((0, p), (p, s)).copy_from(x);
    k.view_mut((p, 0), (s, p)).copy_from(&x.transpose());
    let mut rhs = DVector::zeros(p + s);
    rhs.rows_mut(0, p).copy_from(prev);
    rhs.rows_mut(p, s).copy_from(y);
    let sol = k.lu().solve(&rhs).expect("KKT system nonsingular");
    sol.rows(0, p).into_owned()
}

pub fn update_checks(instances: usize, seed: u64) -> Vec<CheckResult> {
    let cases = update_instances(instances, seed);
    let mut interp: f64 = 0.0;
    let mut minimal: f64 = 0.0;
    let mut expand: f64 = f64::NEG_INFINITY;
    let mut kkt: f64 = 0.0;
    for c in &cases {
        let w = min_norm_update(&c.prev, &c.features, &c.labels).expect("well conditioned");
        let ymax = c.labels.amax();
        interp = interp.max((c.features.tr_mul(&w) - &c.labels).amax() / (1.0 + ymax));
        let step = &w - &c.prev;
        let off = &step - project(&c.features, &step);
        if step.norm() > 0.0 {
            minimal = minimal.max(off.norm() / step.norm());
        }
        expand = expand.max((&w - &c.truth).norm() - (&c.prev - &c.truth).norm());
        let oracle = kkt_min_norm(&c.prev, &c.features, &c.labels);
        kkt = kkt.max((&w - &oracle).norm() / oracle.norm().max(f64::MIN_POSITIVE));
    }
    vec![
        check("interpolation", interp, 1e-8, cases.len()),
        check("minimality", minimal, 1e-8, cases.len()),
        check("non_expansiveness", expand, 1e-10, cases.len()),
        check("kkt_oracle", kkt, 1e-8, cases.len()),
    ]
}

pub fn gating_checks(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = seeded(substream(seed, "gating-instances"));
    let mut sum_err: f64 = 0.0;
    let mut shift_err: f64 = 0.0;
    let mut col_err: f64 = 0.0;
    let mut fd_err: f64 = 0.0;
    for _ in 0..instances {
        let m = rng.random_range(2..=12usize);
        let p = rng.random_range(2..=16usize);
        // Keeps gate values moderate; saturated softmax leaves gradients
        // below the resolution of central differences.
        let scale = rng.random_range(0.01..1.0);
        let theta = gaussian_matrix(p, m, &mut rng) * scale;
        let s = gaussian_vector(p, &mut rng);
        let h = theta.tr_mul(&s);
        let pi = softmax(&h);
        sum_err = sum_err.max((pi.sum() - 1.0).abs());
        let shift = rng.random_range(-50.0..50.0);
        let shifted = softmax(&h.add_scalar(shift));
        shift_err = shift_err.max((&shifted - &pi).amax());

        let chosen = rng.random_range(0..m);
        let delta = rng.random_range(0.0..3.0);
        let grad = gradient_from_cache(&pi, &s, chosen, delta);
        let col_sum = grad.column_sum();
        col_err = col_err.max(col_sum.amax() / (1.0 + grad.amax()));

        // Locality loss is pi_chosen * delta since only the chosen expert moved.
        let loss = |t: &DMatrix<f64>| softmax(&t.tr_mul(&s))[chosen] * delta;
        let eps = 1e-6;
        let mut fd = DMatrix::zeros(p, m);
        for i in 0..p {
            for j in 0..m {
                let mut up = theta.clone();
                up[(i, j)] += eps;
                let mut dn = theta.clone();
                dn[(i, j)] -= eps;
                fd[(i, j)] = (loss(&up) - loss(&dn)) / (2.0 * eps);
            }
        }
        let denom = grad.norm().max(1e-8);
        fd_err = fd_err.max((&fd - &grad).norm() / denom);
    }
    vec![
        check("softmax_sum", sum_err, 1e-12, instances),
        check("softmax_shift_invariance", shift_err, 1e-12, instances),
        check("gradient_column_sum", col_err, 1e-10, instances),
        check("finite_difference_gradient", fd_err, 1e-5, instances),
    ]
}

fn bisect_quantile(q: f64) -> f64 {
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if normal_cdf(mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub const QUANTILE_GRID: [f64; 5] = [1e-6, 0.01, 0.5, 0.99, 1.0 - 1e-6];

/// `E ||P u||^2 / ||u||^2` over Gaussian `p x s` feature matrices.
pub fn projection_ratio(dim: usize, samples: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = seeded(substream(seed, "projection"));
    let u = gaussian_vector(dim, &mut rng);
    let mut total = 0.0;
    for _ in 0..draws {
        let x = gaussian_matrix(dim, samples, &mut rng);
        total += project(&x, &u).norm_squared();
    }
    total / draws as f64 / u.norm_squared()
}

pub fn oracle_checks(seed: u64) -> Vec<CheckResult> {
    let mut round: f64 = 0.0;
    let mut bisect: f64 = 0.0;
    for q in QUANTILE_GRID {
        let z = inverse_normal_cdf(q).expect("grid inside (0, 1)");
        round = round.max((normal_cdf(z) - q).abs());
        bisect = bisect.max((z - bisect_quantile(q)).abs());
    }
    let m_th = expert_threshold(10, 10.0, 0.05).expect("valid inputs").m_th;
    let (p, s) = (15, 10);
    let ratio = projection_ratio(p, s, 5000, seed);
    let expected = s as f64 / p as f64;
    vec![
        check("quantile_round_trip", round, 1e-9, QUANTILE_GRID.len()),
        check("quantile_bisection", bisect, 1e-9, QUANTILE_GRID.len()),
        check("threshold_reference", (m_th - 2.5605).abs(), 5e-4, 1),
        check(
            "projection_expectation",
            (ratio - expected).abs() / expected,
            0.02,
            5000,
        ),
    ]
}

/// Benchmark expectation with very large update counts against the pairwise
/// center-gap mean.
pub fn benchmark_limit_check(seed: u64) -> CheckResult {
    let mut rng = seeded(substream(seed, "benchmark-limit"));
    let clusters = generate_clusters(10, 15, 0.6, &mut rng).expect("fig3 clusters");
    let gap = cluster_gap_expectation(&clusters);
    let t = 3000;
    let norms: Vec<f64> = (0..t).map(|i| clusters.centers[i % 10].norm_squared()).collect();
    let counts = vec![10_000u64; t];
    let (g1, g2) = benchmark_error_expectation(&norms, gap, &counts, 1.0 - 10.0 / 15.0);
    check("benchmark_limit", ((g1 + g2) - gap).abs() / gap, 0.01, t)
}

pub fn run_all(instances: usize, seed: u64) -> Vec<CheckResult> {
    let mut out = update_checks(instances, seed);
    out.extend(gating_checks(instances, seed));
    out.extend(oracle_checks(seed));
    out.push(benchmark_limit_check(seed));
    out
}
