//! Edge servers as experts: local linear models, availability, and delays.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Largest accepted condition number of a task's Gram matrix `X^T X`.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertState {
    pub id: usize,
    pub model: DVector<f64>,
    /// Exclusive: the expert is idle iff `now >= busy_until`.
    pub busy_until: u64,
    pub update_count: u64,
    pub exec_delay_bounds: (u32, u32),
}

impl ExpertState {
    pub fn new(id: usize, dim: usize, exec_delay_bounds: (u32, u32)) -> Self {
        Self {
            id,
            model: DVector::zeros(dim),
            busy_until: 0,
            update_count: 0,
            exec_delay_bounds,
        }
    }

    /// Moves `busy_until` forward; never backward.
    pub fn occupy_until(&mut self, until: u64) {
        self.busy_until = self.busy_until.max(until);
    }

    pub fn expected_exec_delay(&self) -> f64 {
        let (lo, hi) = self.exec_delay_bounds;
        (f64::from(lo) + f64::from(hi)) / 2.0
    }
}

pub fn availability(expert: &ExpertState, now: u64) -> bool {
    now >= expert.busy_until
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransmissionDistribution {
    Uniform,
    /// Relative weights for `tr_lo, tr_lo + 1, ..., tr_hi`.
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub tr_bounds: (u32, u32),
    pub tr_distribution: TransmissionDistribution,
    /// Transmission delay when the task stays at its nearest station.
    pub same_station_tr: u32,
    /// Default execution bounds handed to every expert.
    pub exec_bounds: (u32, u32),
}

impl Default for DelayModel {
    /// `d_u = 10`, split as transmission in `[0, 6]` and execution in `[1, 4]`.
    fn default() -> Self {
        Self {
            tr_bounds: (0, 6),
            tr_distribution: TransmissionDistribution::Uniform,
            same_station_tr: 0,
            exec_bounds: (1, 4),
        }
    }
}

impl DelayModel {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tr_bounds;
        if lo >= hi {
            return Err(Error::config(
                "tr_delay",
                format!("need lower < upper, got [{lo}, {hi}]"),
            ));
        }
        let (elo, ehi) = self.exec_bounds;
        if elo > ehi || ehi == 0 {
            return Err(Error::config(
                "exec_delay",
                format!("need lower <= upper and upper > 0, got [{elo}, {ehi}]"),
            ));
        }
        if !(lo..=hi).contains(&self.same_station_tr) {
            return Err(Error::config(
                "same_station_tr",
                format!("{} lies outside [{lo}, {hi}]", self.same_station_tr),
            ));
        }
        if lo.min(self.same_station_tr) + elo == 0 {
            return Err(Error::config(
                "exec_delay",
                "total delay could be zero; raise the execution lower bound",
            ));
        }
        if let TransmissionDistribution::Weights(w) = &self.tr_distribution {
            if w.len() != (hi - lo + 1) as usize {
                return Err(Error::config(
                    "tr_weights",
                    format!("expected {} weights, got {}", hi - lo + 1, w.len()),
                ));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config(
                    "tr_weights",
                    "weights must be non-negative with positive sum",
                ));
            }
        }
        Ok(())
    }

    /// `d_u`, the largest possible total delay.
    pub fn max_delay(&self) -> u32 {
        self.tr_bounds.1 + self.exec_bounds.1
    }

    pub fn min_delay(&self) -> u32 {
        self.tr_bounds.0 + self.exec_bounds.0
    }

    /// Mean transmission delay when forwarding to a different station.
    pub fn mean_transmission(&self) -> f64 {
        let (lo, hi) = self.tr_bounds;
        match &self.tr_distribution {
            TransmissionDistribution::Uniform => (f64::from(lo) + f64::from(hi)) / 2.0,
            TransmissionDistribution::Weights(w) => {
                let total: f64 = w.iter().sum();
                w.iter()
                    .enumerate()
                    .map(|(i, x)| x * f64::from(lo + i as u32))
                    .sum::<f64>()
                    / total
            }
        }
    }

    pub fn expected_transmission(&self, chosen: usize, nearest: usize) -> f64 {
        if chosen == nearest {
            f64::from(self.same_station_tr)
        } else {
            self.mean_transmission()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delay {
    pub transmission: u32,
    pub execution: u32,
}

impl Delay {
    pub fn total(&self) -> u32 {
        self.transmission + self.execution
    }
}

pub fn sample_delay(
    model: &DelayModel,
    expert: &ExpertState,
    chosen: usize,
    nearest: usize,
    rng: &mut SimRng,
) -> Delay {
    let (lo, hi) = model.tr_bounds;
    let transmission = if chosen == nearest {
        model.same_station_tr
    } else {
        match &model.tr_distribution {
            TransmissionDistribution::Uniform => rng.random_range(lo..=hi),
            TransmissionDistribution::Weights(w) => {
                let idx = WeightedIndex::new(w).expect("weights validated").sample(rng);
                lo + idx as u32
            }
        }
    };
    let (elo, ehi) = expert.exec_delay_bounds;
    Delay {
        transmission,
        execution: rng.random_range(elo..=ehi),
    }
}

/// Eigenvalue-ratio condition estimate of `X^T X`; infinite when singular.
pub fn gram_condition(gram: &DMatrix<f64>) -> f64 {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// The model closest to `prev` in l2 that interpolates `(features, labels)`:
/// `prev + X (X^T X)^{-1} (y - X^T prev)`.
pub fn min_norm_update(prev: &DVector<f64>, features: &DMatrix<f64>, labels: &DVector<f64>) -> Result<DVector<f64>> {
    let (p, s) = features.shape();
    if prev.len() != p || labels.len() != s {
        return Err(Error::Domain(format!(
            "shape mismatch: model {}, features {p}x{s}, labels {}",
            prev.len(),
            labels.len()
        )));
    }
    if s >= p {
        return Err(Error::Domain(format!("need s < p, got s={s}, p={p}")));
    }
    let gram = features.tr_mul(features);
    let condition = gram_condition(&gram);
    if !(condition <= GRAM_CONDITION_LIMIT) {
        return Err(Error::SingularUpdate {
            condition,
            limit: GRAM_CONDITION_LIMIT,
        });
    }
    let residual = labels - features.tr_mul(prev);
    let coeffs = gram
        .cholesky()
        .ok_or(Error::SingularUpdate {
            condition,
            limit: GRAM_CONDITION_LIMIT,
        })?
        .solve(&residual);
    Ok(prev + features * coeffs)
}

/// Mean squared error `(1/s) ||X^T w - y||^2`.
pub fn training_loss(model: &DVector<f64>, features: &DMatrix<f64>, labels: &DVector<f64>) -> f64 {
    let s = labels.len();
    (features.tr_mul(model) - labels).norm_squared() / s as f64
}

/// Squared l2 distance between a model and a ground truth.
pub fn model_error(model: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    (model - truth).norm_squared()
}
