//! Linear gating network with availability-aware top-1 routing.
//!
//! The gate scores expert `m` as `theta_m . sum_i X_i`. Training uses only the
//! locality loss `sum_m pi_m ||dw_m||`; the MSE term of the task loss does not
//! depend on the gate parameters and contributes no gradient.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;
use crate::task_gen::feature_sum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingState {
    /// `p x M`; column `m` is `theta_m`.
    pub params: DMatrix<f64>,
    /// Routing noise is drawn uniformly from `[0, noise_scale]`.
    pub noise_scale: f64,
    pub learning_rate: f64,
}

impl GatingState {
    pub fn new(dim: usize, n_experts: usize, noise_scale: f64, learning_rate: f64) -> Self {
        Self {
            params: DMatrix::zeros(dim, n_experts),
            noise_scale,
            learning_rate,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.params.ncols()
    }

    pub fn apply_gradient(&mut self, gradient: &DMatrix<f64>) {
        assert_eq!(gradient.shape(), self.params.shape(), "gradient shape mismatch");
        self.params -= gradient * self.learning_rate;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub task_id: u64,
    pub chosen: usize,
    pub gate_values: Vec<f64>,
    pub softmax_values: Vec<f64>,
    pub idle_mask: Vec<bool>,
    pub fallback_used: bool,
}

/// `h = Theta^T sum_i X_i`.
pub fn gate_outputs(features: &DMatrix<f64>, gating: &GatingState) -> DVector<f64> {
    gate_outputs_from_sum(&feature_sum(features), gating)
}

pub fn gate_outputs_from_sum(feature_sum: &DVector<f64>, gating: &GatingState) -> DVector<f64> {
    gating.params.tr_mul(feature_sum)
}

/// Max-shifted softmax.
pub fn softmax(gate_values: &DVector<f64>) -> DVector<f64> {
    let max = gate_values.max();
    let exps = gate_values.map(|h| (h - max).exp());
    let total = exps.sum();
    exps / total
}

/// Fallback when every expert is busy: the expert that frees up first, ties
/// broken by the larger gate value and then the lower index.
pub fn fallback_expert(gate_values: &[f64], free_at: &[u64]) -> usize {
    (0..free_at.len())
        .min_by(|&a, &b| {
            free_at[a]
                .cmp(&free_at[b])
                .then(gate_values[b].total_cmp(&gate_values[a]))
                .then(a.cmp(&b))
        })
        .expect("at least one expert")
}

/// Top-1 switch routing restricted to idle experts.
///
/// Noise is drawn for every expert on every call, so the stream consumption
/// does not depend on the idle pattern. Returns `(chosen, fallback_used)`.
pub fn route(
    gate_values: &DVector<f64>,
    idle_mask: &[bool],
    free_at: &[u64],
    gating: &GatingState,
    rng: &mut SimRng,
) -> (usize, bool) {
    let m = gate_values.len();
    assert!(m >= 1, "routing needs at least one expert");
    assert_eq!(idle_mask.len(), m);
    let noise: Vec<f64> = (0..m).map(|_| gating.noise_scale * rng.random::<f64>()).collect();

    let mut best: Option<(usize, f64)> = None;
    for e in (0..m).filter(|&e| idle_mask[e]) {
        let score = gate_values[e] + noise[e];
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((e, score));
        }
    }
    match best {
        Some((e, _)) => (e, false),
        None => (fallback_expert(gate_values.as_slice(), free_at), true),
    }
}

/// `sum_m pi_m * delta_m`.
pub fn locality_loss(softmax_values: &DVector<f64>, model_deltas: &DVector<f64>) -> f64 {
    assert_eq!(softmax_values.len(), model_deltas.len());
    softmax_values.dot(model_deltas)
}

/// Gradient of the locality loss w.r.t. every gate column, given the softmax
/// and feature sum cached when the task was routed.
///
/// Column `chosen` is `pi_c (1 - pi_c) S delta`, column `m != chosen` is
/// `-pi_c pi_m S delta`.
pub fn gradient_from_cache(
    softmax_values: &DVector<f64>,
    feature_sum: &DVector<f64>,
    chosen: usize,
    delta_norm: f64,
) -> DMatrix<f64> {
    let m = softmax_values.len();
    let pi_c = softmax_values[chosen];
    // Sum the others directly; 1 - pi_c loses digits when pi_c is near 1.
    let others: f64 = (0..m).filter(|&k| k != chosen).map(|k| softmax_values[k]).sum();
    let mut grad = DMatrix::zeros(feature_sum.len(), m);
    for k in 0..m {
        let coeff = if k == chosen {
            pi_c * others
        } else {
            -pi_c * softmax_values[k]
        };
        grad.set_column(k, &(feature_sum * (coeff * delta_norm)));
    }
    grad
}

pub fn gating_gradient(features: &DMatrix<f64>, gating: &GatingState, chosen: usize, delta_norm: f64) -> DMatrix<f64> {
    let sum = feature_sum(features);
    let pi = softmax(&gate_outputs_from_sum(&sum, gating));
    gradient_from_cache(&pi, &sum, chosen, delta_norm)
}

/// `Theta - eta * gradient`.
pub fn update_gating(gating: &GatingState, gradient: &DMatrix<f64>) -> GatingState {
    let mut next = gating.clone();
    next.apply_gradient(gradient);
    next
}

/// `|h_m(X_a) - h_m(X_b)|` for one expert.
pub fn gate_gap(features_a: &DMatrix<f64>, features_b: &DMatrix<f64>, gating: &GatingState, expert: usize) -> f64 {
    let theta = gating.params.column(expert);
    let a = theta.dot(&feature_sum(features_a));
    let b = theta.dot(&feature_sum(features_b));
    (a - b).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut SimRng) -> f64 {
        rng.sample(StandardNormal)
    }

    #[test]
    fn zero_gate_outputs() {
        let g = GatingState::new(4, 3, 0.0, 0.2);
        let mut rng = seeded(1);
        let x = DMatrix::from_fn(4, 2, |_, _| randn(&mut rng));
        assert_eq!(gate_outputs(&x, &g), DVector::zeros(3));
    }

    #[test]
    fn self_aligned_gate() {
        let v = DVector::from_vec(vec![0.5, -1.0, 0.25]);
        let mut g = GatingState::new(3, 2, 0.0, 0.2);
        g.params.set_column(1, &v);
        let x = DMatrix::from_column_slice(3, 1, v.as_slice());
        let h = gate_outputs(&x, &g);
        assert_eq!(h[0], 0.0);
        assert!((h[1] - v.norm_squared()).abs() < 1e-15);
    }

    #[test]
    fn gate_outputs_match_per_sample_sum() {
        let mut rng = seeded(2);
        let mut g = GatingState::new(5, 4, 0.0, 0.2);
        g.params = DMatrix::from_fn(5, 4, |_, _| randn(&mut rng));
        let x = DMatrix::from_fn(5, 3, |_, _| randn(&mut rng));
        let h = gate_outputs(&x, &g);
        for m in 0..4 {
            let mut direct = 0.0;
            for i in 0..3 {
                for j in 0..5 {
                    direct += g.params[(j, m)] * x[(j, i)];
                }
            }
            assert!((h[m] - direct).abs() <= 1e-12 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax(&DVector::from_element(4, 3.7));
        for p in u.iter() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let p = softmax(&DVector::from_vec(vec![0.0, 3f64.ln()]));
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let big = softmax(&DVector::from_vec(vec![1000.0, 0.0]));
        assert!(big.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn strict_max_wins() {
        let g = GatingState::new(2, 2, 0.0, 0.2);
        let h = DVector::from_vec(vec![0.5, 0.2]);
        let (c, fb) = route(&h, &[true, true], &[0, 0], &g, &mut seeded(1));
        assert_eq!((c, fb), (0, false));
    }

    #[test]
    fn busy_expert_is_skipped() {
        let g = GatingState::new(2, 2, 1e-6, 0.2);
        let h = DVector::from_vec(vec![0.9, 0.1]);
        let (c, fb) = route(&h, &[false, true], &[5, 0], &g, &mut seeded(1));
        assert_eq!((c, fb), (1, false));
    }

    #[test]
    fn fallback_picks_earliest_free_then_gate() {
        let g = GatingState::new(2, 3, 1e-6, 0.2);
        let h = DVector::from_vec(vec![0.1, 0.3, 0.9]);
        let (c, fb) = route(&h, &[false; 3], &[8, 6, 7], &g, &mut seeded(1));
        assert_eq!((c, fb), (1, true));
        let (c, _) = route(&h, &[false; 3], &[6, 6, 7], &g, &mut seeded(1));
        assert_eq!(c, 1);
        let (c, _) = route(&DVector::zeros(3), &[false; 3], &[6, 6, 6], &g, &mut seeded(1));
        assert_eq!(c, 0);
    }

    #[test]
    fn noise_breaks_ties_uniformly() {
        let m = 4;
        let g = GatingState::new(2, m, 1e-6 * 0.6, 0.2);
        let h = DVector::zeros(m);
        let mut rng = seeded(77);
        let n = 10_000;
        let mut counts = vec![0usize; m];
        for _ in 0..n {
            counts[route(&h, &[true; 4], &[0; 4], &g, &mut rng).0] += 1;
        }
        let p = 1.0 / m as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - p).abs() <= 3.0 * se, "frequency {f}");
        }
    }

    #[test]
    fn locality_loss_examples() {
        let pi = DVector::from_vec(vec![0.5, 0.25, 0.25]);
        assert_eq!(locality_loss(&pi, &DVector::zeros(3)), 0.0);
        let d = DVector::from_vec(vec![0.0, 0.6, 0.0]);
        assert!((locality_loss(&pi, &d) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn zero_delta_gives_zero_gradient() {
        let mut rng = seeded(3);
        let x = DMatrix::from_fn(4, 2, |_, _| randn(&mut rng));
        let g = GatingState::new(4, 3, 0.0, 0.2);
        assert_eq!(gating_gradient(&x, &g, 1, 0.0), DMatrix::zeros(4, 3));
    }

    #[test]
    fn gradient_columns_sum_to_zero() {
        let mut rng = seeded(4);
        let mut g = GatingState::new(6, 5, 0.0, 0.2);
        g.params = DMatrix::from_fn(6, 5, |_, _| randn(&mut rng));
        let x = DMatrix::from_fn(6, 3, |_, _| randn(&mut rng));
        let grad = gating_gradient(&x, &g, 2, 1.7);
        assert!(grad.column_sum().amax() <= 1e-10);
    }

    #[test]
    fn update_steps() {
        let mut g = GatingState::new(3, 2, 0.0, 0.2);
        let before = g.clone();
        assert_eq!(update_gating(&g, &DMatrix::zeros(3, 2)), before);
        g.apply_gradient(&DMatrix::from_element(3, 2, 1.0));
        for v in g.params.iter() {
            assert!((v + 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn gate_gap_examples() {
        let mut rng = seeded(5);
        let x = DMatrix::from_fn(4, 2, |_, _| randn(&mut rng));
        let y = DMatrix::from_fn(4, 2, |_, _| randn(&mut rng));
        let mut g = GatingState::new(4, 2, 0.0, 0.2);
        assert_eq!(gate_gap(&x, &y, &g, 0), 0.0);
        g.params = DMatrix::from_fn(4, 2, |_, _| randn(&mut rng));
        assert_eq!(gate_gap(&x, &x, &g, 1), 0.0);
        let h = gate_outputs(&x, &g) - gate_outputs(&y, &g);
        assert!((gate_gap(&x, &y, &g, 1) - h[1].abs()).abs() < 1e-14);
    }
}
