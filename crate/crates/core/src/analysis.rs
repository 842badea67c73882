//! Diagnostics computed from finished traces: generalization error series,
//! the benchmark and MoE error decompositions, the expert-count threshold,
//! the exploration horizon and specialization statistics.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::model_error;
use crate::gating::{gate_outputs, softmax, GatingState};
use crate::rng::SimRng;
use crate::sim::{Event, RunTrace};
use crate::task_gen::{generate_task, ClusterSet, TaskParams};

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile.
///
/// Acklam's rational approximation (relative error about 1.2e-9) followed by
/// one Newton step against [`normal_cdf`].
pub fn inverse_normal_cdf(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile level {q} outside (0, 1)")));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const LOW: f64 = 0.024_25;

    let tail = |p: f64| {
        let u = (-2.0 * p.ln()).sqrt();
        (((((C[0] * u + C[1]) * u + C[2]) * u + C[3]) * u + C[4]) * u + C[5])
            / ((((D[0] * u + D[1]) * u + D[2]) * u + D[3]) * u + 1.0)
    };
    let x = if q < LOW {
        tail(q)
    } else if q > 1.0 - LOW {
        -tail(1.0 - q)
    } else {
        let u = q - 0.5;
        let r = u * u;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * u
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    // Upper-tail residual via erfc keeps precision when q is close to 1.
    let residual = if q > 0.5 {
        (1.0 - q) - 0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
    } else {
        normal_cdf(x) - q
    };
    Ok(x - residual / normal_pdf(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub n_clusters: usize,
    pub max_delay: f64,
    pub delta: f64,
    pub m_th: f64,
    /// `ceil(N * M_th * ln(1/delta))`.
    pub recommended_experts: u64,
}

/// Per-cluster expert count above which an idle specialist exists with
/// probability at least `1 - delta`.
pub fn expert_threshold(n_clusters: usize, max_delay: f64, delta: f64) -> Result<ThresholdReport> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta {delta} outside (0, 1)")));
    }
    if n_clusters == 0 {
        return Err(Error::Domain("n_clusters must be at least 1".into()));
    }
    if !(max_delay >= 1.0) {
        return Err(Error::Domain(format!("max delay {max_delay} below 1")));
    }
    let n = n_clusters as f64;
    let load = max_delay / n;
    let m_th = load + inverse_normal_cdf(1.0 - delta)? * (load * (1.0 - 1.0 / n)).sqrt();
    let recommended = (n * m_th * (1.0 / delta).ln()).ceil().max(0.0) as u64;
    Ok(ThresholdReport {
        n_clusters,
        max_delay,
        delta,
        m_th,
        recommended_experts: recommended,
    })
}

/// `T_1 = d_u + ceil(eta^-1 sigma0^-0.5 M ln(M / delta))`.
///
/// `delta` may range up to `M`, where the log term vanishes.
pub fn convergence_time(learning_rate: f64, sigma0: f64, n_experts: usize, delta: f64, max_delay: u64) -> Result<u64> {
    if !(learning_rate > 0.0 && sigma0 > 0.0) || n_experts == 0 {
        return Err(Error::Domain("learning rate, sigma0 and M must be positive".into()));
    }
    let m = n_experts as f64;
    if !(delta > 0.0 && delta <= m) {
        return Err(Error::Domain(format!("delta {delta} outside (0, M]")));
    }
    let span = (m / delta).ln() * m / (learning_rate * sigma0.sqrt());
    Ok(max_delay + span.ceil() as u64)
}

/// `(1/T) sum_t ||w^(m_t) - w_t||^2` over the tasks in `truths`.
pub fn generalization_error(
    expert_models: &[DVector<f64>],
    assignments: &BTreeMap<u64, usize>,
    truths: &BTreeMap<u64, DVector<f64>>,
) -> Result<f64> {
    if let Some(task) = assignments.keys().find(|t| !truths.contains_key(t)) {
        return Err(Error::MissingTruth(*task));
    }
    if truths.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (task, truth) in truths {
        let expert = *assignments.get(task).ok_or(Error::MissingAssignment(*task))?;
        let model = expert_models
            .get(expert)
            .ok_or_else(|| Error::Domain(format!("task {task} assigned to unknown expert {expert}")))?;
        total += model_error(model, truth);
    }
    Ok(total / truths.len() as f64)
}

/// One served task as recovered from a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ServedTask {
    pub task_id: u64,
    pub arrival: u64,
    pub cluster: usize,
    pub expert: usize,
    pub fallback: bool,
    pub truth: DVector<f64>,
}

pub fn served_tasks(trace: &RunTrace) -> Vec<ServedTask> {
    let mut arrivals: BTreeMap<u64, (u64, usize, DVector<f64>)> = BTreeMap::new();
    let mut out = Vec::new();
    for event in &trace.events {
        match event {
            Event::Arrival {
                time,
                task_id,
                cluster,
                truth,
                ..
            } => {
                arrivals.insert(*task_id, (*time, *cluster, DVector::from_column_slice(truth)));
            }
            Event::Routing { record, .. } => {
                let (arrival, cluster, truth) = arrivals.remove(&record.task_id).expect("routing follows its arrival");
                out.push(ServedTask {
                    task_id: record.task_id,
                    arrival,
                    cluster,
                    expert: record.chosen,
                    fallback: record.fallback_used,
                    truth,
                });
            }
            _ => {}
        }
    }
    out
}

/// Replays a trace and reports `G_t` every `stride` steps and at the horizon,
/// using each serving expert's model as of the end of step `t`.
pub fn error_timeseries(trace: &RunTrace, stride: u64) -> Vec<(u64, f64)> {
    let stride = stride.max(1);
    let dim = trace.config.dim;
    let mut models = vec![DVector::zeros(dim); trace.config.n_experts];
    let mut served: Vec<(usize, DVector<f64>)> = Vec::new();
    let mut pending_truth: BTreeMap<u64, DVector<f64>> = BTreeMap::new();
    let mut out = Vec::new();
    let mut events = trace
        .events
        .iter()
        .filter(|e| !matches!(e, Event::Truncated { .. }))
        .peekable();
    for t in 1..=trace.config.horizon {
        while let Some(event) = events.next_if(|e| e.time() <= t) {
            match event {
                Event::Arrival { task_id, truth, .. } => {
                    pending_truth.insert(*task_id, DVector::from_column_slice(truth));
                }
                Event::Routing { record, .. } => {
                    let truth = pending_truth
                        .remove(&record.task_id)
                        .expect("routing follows its arrival");
                    served.push((record.chosen, truth));
                }
                Event::Completion { expert, model, .. } => {
                    models[*expert] = DVector::from_column_slice(model);
                }
                _ => {}
            }
        }
        if t % stride == 0 || t == trace.config.horizon {
            let g = if served.is_empty() {
                0.0
            } else {
                served.iter().map(|(m, w)| model_error(&models[*m], w)).sum::<f64>() / served.len() as f64
            };
            out.push((t, g));
        }
    }
    out
}

/// Mean of `||c_n - c_n'||^2` over all `N^2` ordered center pairs, `n = n'`
/// included.
pub fn cluster_gap_expectation(clusters: &ClusterSet) -> f64 {
    let n = clusters.centers.len();
    let mut total = 0.0;
    for a in &clusters.centers {
        for b in &clusters.centers {
            total += (a - b).norm_squared();
        }
    }
    total / (n * n) as f64
}

fn check_ratio(r: f64) {
    assert!(r > 0.0 && r < 1.0, "overparameterization ratio {r} outside (0, 1)");
}

/// Expected benchmark error split into the forgetting-of-initialization term
/// `G1` and the cross-cluster interference term `G2`.
///
/// `truth_norms[t]` is `||w_t||^2` and `l_counts[t]` is the final update
/// count of the expert that served task `t`.
pub fn benchmark_error_expectation(truth_norms: &[f64], gap_expectation: f64, l_counts: &[u64], r: f64) -> (f64, f64) {
    check_ratio(r);
    assert_eq!(truth_norms.len(), l_counts.len());
    if truth_norms.is_empty() {
        return (0.0, 0.0);
    }
    let t = truth_norms.len() as f64;
    let mut g1 = 0.0;
    let mut g2 = 0.0;
    for (norm, &l) in truth_norms.iter().zip(l_counts) {
        let keep = r.powf(l as f64);
        g1 += keep * norm;
        g2 += (1.0 - keep) * gap_expectation;
    }
    (g1 / t, g2 / t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub g1: f64,
    pub g3: f64,
    /// `c * sigma0^2`.
    pub g4: f64,
    pub total: f64,
}

/// Right-hand side of the MoE error bound with the within-cluster term
/// instantiated as `c * sigma0^2`.
pub fn moe_error_bound(
    truth_norms: &[f64],
    gap_expectation: f64,
    l_final: &[u64],
    l_explore: &[u64],
    r: f64,
    sigma0: f64,
    c: f64,
) -> BoundTerms {
    check_ratio(r);
    assert_eq!(truth_norms.len(), l_final.len());
    assert_eq!(truth_norms.len(), l_explore.len());
    let g4 = c * sigma0 * sigma0;
    if truth_norms.is_empty() {
        return BoundTerms {
            g1: 0.0,
            g3: 0.0,
            g4,
            total: g4,
        };
    }
    let t = truth_norms.len() as f64;
    let mut g1 = 0.0;
    let mut g3 = 0.0;
    for ((norm, &lt), &l1) in truth_norms.iter().zip(l_final).zip(l_explore) {
        assert!(lt >= l1, "final update count {lt} below exploration count {l1}");
        g1 += r.powf(lt as f64) * norm;
        g3 += (1.0 - r.powf(l1 as f64)) * r.powf((lt - l1) as f64) * gap_expectation;
    }
    let (g1, g3) = (g1 / t, g3 / t);
    BoundTerms {
        g1,
        g3,
        g4,
        total: g1 + g3 + g4,
    }
}

/// Maps every expert to `argmax_n theta_m . v_n`, ties to the lowest cluster.
pub fn expert_set_assignment(gating: &GatingState, signals: &[DVector<f64>]) -> Vec<usize> {
    (0..gating.n_experts())
        .map(|m| {
            let theta = gating.params.column(m);
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (n, v) in signals.iter().enumerate() {
                let score = theta.dot(v);
                if score > best_score {
                    best = n;
                    best_score = score;
                }
            }
            best
        })
        .collect()
}

/// Fraction of non-fallback routings after `after` whose expert is assigned
/// to the task's cluster. `None` when no routing qualifies.
pub fn specialization_rate(trace: &RunTrace, assignment: &[usize], after: u64) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for task in served_tasks(trace) {
        if task.arrival <= after || task.fallback {
            continue;
        }
        total += 1;
        if assignment[task.expert] == task.cluster {
            hits += 1;
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}
/// Fraction of sampled tasks on which the softmax separates expert sets:
/// for a task of cluster `n`, a random pair of experts both assigned to
/// `n` has a smaller `|pi_m - pi_m'|` than a random pair with exactly one
/// of them assigned to `n`. Tasks whose cluster has fewer than two experts
/// are skipped; `None` if every sample was skipped.
pub fn softmax_gap_ordering(
    gating: &GatingState,
    assignment: &[usize],
    clusters: &ClusterSet,
    params: &TaskParams,
    samples: usize,
    rng: &mut SimRng,
) -> Result<Option<f64>> {
    let (mut counted, mut ordered) = (0usize, 0usize);
    for _ in 0..samples {
        let task = generate_task(clusters, 0, params, rng)?;
        let (inside, outside): (Vec<usize>, Vec<usize>) =
            (0..assignment.len()).partition(|&m| assignment[m] == task.cluster);
        if inside.len() < 2 || outside.is_empty() {
            continue;
        }
        let pi = softmax(&gate_outputs(&task.features, gating));
        let i = rng.random_range(0..inside.len());
        let j = (i + rng.random_range(1..inside.len())) % inside.len();
        let within = (pi[inside[i]] - pi[inside[j]]).abs();
        let k = inside[rng.random_range(0..inside.len())];
        let across = (pi[k] - pi[outside[rng.random_range(0..outside.len())]]).abs();
        counted += 1;
        ordered += usize::from(within < across);
    }
    Ok((counted > 0).then(|| ordered as f64 / counted as f64))
}

/// `L_t^(m)` for every step `t` in `1..=T`.
pub fn update_counts(trace: &RunTrace) -> Vec<(u64, Vec<u64>)> {
    let mut counts = vec![0u64; trace.config.n_experts];
    let mut completions = trace.events.iter().filter_map(|e| match e {
        Event::Completion { time, expert, .. } => Some((*time, *expert)),
        _ => None,
    });
    let mut next = completions.next();
    let mut out = Vec::with_capacity(trace.config.horizon as usize);
    for t in 1..=trace.config.horizon {
        while let Some((time, expert)) = next.filter(|(time, _)| *time <= t) {
            debug_assert!(time <= t);
            counts[expert] += 1;
            next = completions.next();
        }
        out.push((t, counts.clone()));
    }
    out
}

/// Counts at the end of step `t`; zeros before the first step.
pub fn update_counts_at(trace: &RunTrace, t: u64) -> Vec<u64> {
    let mut counts = vec![0u64; trace.config.n_experts];
    for event in &trace.events {
        if let Event::Completion { time, expert, .. } = event {
            if *time <= t {
                counts[*expert] += 1;
            }
        }
    }
    counts
}

/// Plug-in mutual information, in nats, between task cluster and chosen expert.
pub fn cluster_expert_mutual_information(trace: &RunTrace) -> f64 {
    let tasks = served_tasks(trace);
    if tasks.is_empty() {
        return 0.0;
    }
    let n = trace.config.n_clusters;
    let m = trace.config.n_experts;
    let mut joint = vec![0.0; n * m];
    for task in &tasks {
        joint[task.cluster * m + task.expert] += 1.0;
    }
    let total = tasks.len() as f64;
    let row: Vec<f64> = (0..n).map(|i| joint[i * m..(i + 1) * m].iter().sum()).collect();
    let col: Vec<f64> = (0..m).map(|j| (0..n).map(|i| joint[i * m + j]).sum()).collect();
    let mut mi = 0.0;
    for i in 0..n {
        for j in 0..m {
            let c = joint[i * m + j];
            if c > 0.0 {
                mi += c / total * (c * total / (row[i] * col[j])).ln();
            }
        }
    }
    mi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub series: Vec<(u64, f64)>,
    pub final_error: f64,
    /// `(G1, G2)` under the benchmark recursion.
    pub benchmark: (f64, f64),
    pub bound: Option<BoundTerms>,
    pub update_counts: Vec<u64>,
    pub ratio: f64,
}

/// Builds the full report for a trace. The bound is evaluated when an
/// exploration horizon `t1 < T` is supplied.
pub fn error_report(trace: &RunTrace, stride: u64, t1: Option<u64>, c: f64) -> ErrorReport {
    let series = error_timeseries(trace, stride);
    let final_error = series.last().map_or(0.0, |p| p.1);
    let tasks = served_tasks(trace);
    let ratio = trace.config.overparameterization_ratio();
    let l_final = update_counts_at(trace, trace.config.horizon);
    let norms: Vec<f64> = tasks.iter().map(|t| t.truth.norm_squared()).collect();
    let per_task_final: Vec<u64> = tasks.iter().map(|t| l_final[t.expert]).collect();
    let gap = cluster_gap_expectation(&trace.clusters);
    let benchmark = benchmark_error_expectation(&norms, gap, &per_task_final, ratio);
    let bound = t1.filter(|&t1| t1 < trace.config.horizon).map(|t1| {
        let l_explore = update_counts_at(trace, t1);
        let per_task_explore: Vec<u64> = tasks.iter().map(|t| l_explore[t.expert]).collect();
        moe_error_bound(
            &norms,
            gap,
            &per_task_final,
            &per_task_explore,
            ratio,
            trace.config.sigma0,
            c,
        )
    });
    ErrorReport {
        series,
        final_error,
        benchmark,
        bound,
        update_counts: l_final,
        ratio,
    }
}
