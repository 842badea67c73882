//! Discrete-time continual-learning loop with in-flight job tracking.
//!
//! Each step first applies the completions due at that step, ordered by task
//! id, then admits exactly one arrival, routes it and schedules its
//! completion. A just-freed expert is therefore routable in the same step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{availability, min_norm_update, model_error, sample_delay, Delay, DelayModel, ExpertState};
use crate::gating::{
    fallback_expert, gate_outputs_from_sum, gradient_from_cache, route, softmax, GatingState, RoutingRecord,
};
use crate::rng::{seeded, substream, SimRng};
use crate::task_gen::{generate_clusters_with, generate_task, ClusterOptions, ClusterSet, Task, TaskParams, BETA_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Moe,
    NearestAvailable,
    FastestAvailable,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Moe, Strategy::NearestAvailable, Strategy::FastestAvailable];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Moe => "moe",
            Strategy::NearestAvailable => "nearest_available",
            Strategy::FastestAvailable => "fastest_available",
        }
    }

    pub fn is_benchmark(&self) -> bool {
        !matches!(self, Strategy::Moe)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::config("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub horizon: u64,
    pub n_experts: usize,
    pub n_clusters: usize,
    pub dim: usize,
    pub samples: usize,
    pub sigma0: f64,
    pub sigma_noise: f64,
    pub beta_max: f64,
    pub within_jitter: f64,
    pub learning_rate: f64,
    pub noise_scale: f64,
    pub delay: DelayModel,
    pub strategy: Strategy,
    pub seed: u64,
    /// Metric rows are emitted every `metric_stride` steps and at the horizon.
    pub metric_stride: u64,
}

impl RunConfig {
    /// Configuration with every `sigma0`-derived default filled in.
    pub fn with_defaults(
        horizon: u64,
        n_experts: usize,
        n_clusters: usize,
        dim: usize,
        samples: usize,
        sigma0: f64,
        strategy: Strategy,
        seed: u64,
    ) -> Self {
        Self {
            horizon,
            n_experts,
            n_clusters,
            dim,
            samples,
            sigma0,
            sigma_noise: 0.1 * sigma0,
            beta_max: BETA_CAP,
            within_jitter: sigma0 * sigma0 / 2.0,
            learning_rate: 0.2,
            noise_scale: 1e-6 * sigma0,
            delay: DelayModel::default(),
            strategy,
            seed,
            metric_stride: 10,
        }
    }

    /// `T = 3000, N = 10, sigma0 = 0.6, d_u = 10, eta = 0.2, p = 15, s = 10`.
    pub fn fig3(strategy: Strategy, n_experts: usize, seed: u64) -> Self {
        Self::with_defaults(3000, n_experts, 10, 15, 10, 0.6, strategy, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::config("horizon", "must be at least 1"));
        }
        if self.n_experts < 1 {
            return Err(Error::config("experts", "must be at least 1"));
        }
        if self.n_clusters < 2 {
            return Err(Error::config("clusters", "must be at least 2"));
        }
        if self.dim < 2 {
            return Err(Error::config("dim", "must be at least 2"));
        }
        if self.samples < 1 || self.samples >= self.dim {
            return Err(Error::config(
                "samples",
                format!("need 1 <= s < p, got s={} p={}", self.samples, self.dim),
            ));
        }
        if !(self.sigma0 > 0.0 && self.sigma0 < 1.0) {
            return Err(Error::config(
                "sigma0",
                format!("must lie in (0, 1), got {}", self.sigma0),
            ));
        }
        if !(self.sigma_noise >= 0.0 && self.sigma_noise.is_finite()) {
            return Err(Error::config("sigma_noise", "must be finite and non-negative"));
        }
        if !(self.beta_max > 0.0 && self.beta_max <= BETA_CAP) {
            return Err(Error::config("beta_max", format!("must lie in (0, {BETA_CAP}]")));
        }
        let max_jitter = self.sigma0 * self.sigma0 / 2.0;
        if !(self.within_jitter >= 0.0 && self.within_jitter <= max_jitter) {
            return Err(Error::config(
                "within_jitter",
                format!("must lie in [0, sigma0^2/2 = {max_jitter}]"),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale", "must be finite and non-negative"));
        }
        if self.metric_stride < 1 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        self.delay.validate()
    }

    pub fn overparameterization_ratio(&self) -> f64 {
        1.0 - self.samples as f64 / self.dim as f64
    }

    fn task_params(&self) -> TaskParams {
        TaskParams {
            samples: self.samples,
            sigma_noise: self.sigma_noise,
            beta_max: self.beta_max,
            n_experts: self.n_experts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingJob {
    pub task_id: u64,
    pub expert: usize,
    /// Step at which execution starts; later than arrival only after a fallback.
    pub dispatched_at: u64,
    pub completes_at: u64,
    pub cached_softmax: DVector<f64>,
    pub cached_feature_sum: DVector<f64>,
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Arrival {
        time: u64,
        task_id: u64,
        cluster: usize,
        nearest_expert: usize,
        truth: Vec<f64>,
    },
    Routing {
        time: u64,
        record: RoutingRecord,
        delay: Delay,
        starts_at: u64,
        completes_at: u64,
    },
    Completion {
        time: u64,
        task_id: u64,
        expert: usize,
        delta_norm: f64,
        update_count: u64,
        /// Expert model after the update.
        model: Vec<f64>,
    },
    GatingUpdate {
        time: u64,
        task_id: u64,
        expert: usize,
        gradient_norm: f64,
    },
    Truncated {
        time: u64,
        task_id: u64,
        expert: usize,
        completes_at: u64,
    },
}

impl Event {
    pub fn time(&self) -> u64 {
        match self {
            Event::Arrival { time, .. }
            | Event::Routing { time, .. }
            | Event::Completion { time, .. }
            | Event::GatingUpdate { time, .. }
            | Event::Truncated { time, .. } => *time,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub time: u64,
    pub generalization_error: f64,
    pub update_counts: Vec<u64>,
    pub fallback_count: u64,
    pub completions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: RunConfig,
    pub clusters: ClusterSet,
    pub events: Vec<Event>,
    pub metrics: Vec<MetricRow>,
    pub experts: Vec<ExpertState>,
    pub gating: GatingState,
}

impl RunTrace {
    pub fn routings(&self) -> impl Iterator<Item = (u64, &RoutingRecord)> {
        self.events.iter().filter_map(|e| match e {
            Event::Routing { time, record, .. } => Some((*time, record)),
            _ => None,
        })
    }

    pub fn fallback_count(&self) -> u64 {
        self.routings().filter(|(_, r)| r.fallback_used).count() as u64
    }

    pub fn completion_count(&self) -> u64 {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Completion { .. }))
            .count() as u64
    }

    /// `(task_id, cluster, truth)` of every arrival, in arrival order.
    pub fn arrivals(&self) -> impl Iterator<Item = (u64, usize, &[f64])> {
        self.events.iter().filter_map(|e| match e {
            Event::Arrival {
                task_id,
                cluster,
                truth,
                ..
            } => Some((*task_id, *cluster, truth.as_slice())),
            _ => None,
        })
    }

    pub fn final_error(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.generalization_error)
    }
}

/// Benchmark offloading without any learned gate.
///
/// `nearest_available` keeps the task at its nearest station when idle, else
/// picks the idle expert with the smallest expected transmission delay;
/// `fastest_available` picks the idle expert with the smallest expected
/// execution delay. Ties go to the lowest index. With no idle expert, the
/// earliest-free expert takes the job. Returns `(chosen, fallback_used)`.
pub fn route_benchmark(
    policy: Strategy,
    nearest: usize,
    idle_mask: &[bool],
    free_at: &[u64],
    experts: &[ExpertState],
    delay_model: &DelayModel,
) -> (usize, bool) {
    let m = idle_mask.len();
    assert!(m >= 1, "routing needs at least one expert");
    let cost = |e: usize| match policy {
        Strategy::NearestAvailable => delay_model.expected_transmission(e, nearest),
        Strategy::FastestAvailable => experts[e].expected_exec_delay(),
        Strategy::Moe => panic!("moe is not a benchmark policy"),
    };
    if policy == Strategy::NearestAvailable && idle_mask[nearest] {
        return (nearest, false);
    }
    let best = (0..m)
        .filter(|&e| idle_mask[e])
        .min_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)));
    match best {
        Some(e) => (e, false),
        None => (fallback_expert(&vec![0.0; m], free_at), true),
    }
}

/// Mutable state of one run.
pub struct Simulation {
    pub config: RunConfig,
    pub clusters: ClusterSet,
    pub experts: Vec<ExpertState>,
    pub gating: GatingState,
    pending: BTreeMap<(u64, u64), PendingJob>,
    world_rng: SimRng,
    route_rng: SimRng,
    delay_rng: SimRng,
    /// Serving expert and truth of every arrived task.
    served: Vec<(usize, DVector<f64>)>,
    events: Vec<Event>,
    metrics: Vec<MetricRow>,
    fallbacks: u64,
    completions: u64,
}

impl Simulation {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        if config.strategy == Strategy::Moe && config.n_clusters >= config.n_experts {
            log::warn!(
                "moe with N={} clusters and only M={} experts: specialization needs N < M",
                config.n_clusters,
                config.n_experts
            );
        }
        let mut world_rng = seeded(substream(config.seed, "world"));
        let mut opts = ClusterOptions::new(config.n_clusters, config.dim, config.sigma0);
        opts.within_jitter = Some(config.within_jitter);
        let clusters = generate_clusters_with(&opts, &mut world_rng)?;
        let experts = (0..config.n_experts)
            .map(|m| ExpertState::new(m, config.dim, config.delay.exec_bounds))
            .collect();
        let gating = GatingState::new(config.dim, config.n_experts, config.noise_scale, config.learning_rate);
        Ok(Self {
            route_rng: seeded(substream(config.seed, "route")),
            delay_rng: seeded(substream(config.seed, "delay")),
            world_rng,
            clusters,
            experts,
            gating,
            pending: BTreeMap::new(),
            served: Vec::with_capacity(config.horizon as usize),
            events: Vec::new(),
            metrics: Vec::new(),
            fallbacks: 0,
            completions: 0,
            config,
        })
    }

    pub fn pending_jobs(&self) -> impl Iterator<Item = &PendingJob> {
        self.pending.values()
    }

    /// Applies every job due at `now` in task-id order and returns the
    /// events produced.
    pub fn process_completions(&mut self, now: u64) -> Result<Vec<Event>> {
        let mut out = Vec::new();
        let due: Vec<(u64, u64)> = self
            .pending
            .range((now, 0)..=(now, u64::MAX))
            .map(|(k, _)| *k)
            .collect();
        debug_assert!(self.pending.keys().next().is_none_or(|k| k.0 >= now));
        for key in due {
            let job = self.pending.remove(&key).expect("due job present");
            let expert = &mut self.experts[job.expert];
            let updated = min_norm_update(&expert.model, &job.features, &job.labels).map_err(|e| Error::Job {
                task_id: job.task_id,
                expert: job.expert,
                source: Box::new(e),
            })?;
            let delta_norm = (&updated - &expert.model).norm();
            expert.model = updated;
            expert.update_count += 1;
            self.completions += 1;
            out.push(Event::Completion {
                time: now,
                task_id: job.task_id,
                expert: job.expert,
                delta_norm,
                update_count: expert.update_count,
                model: expert.model.as_slice().to_vec(),
            });
            if self.config.strategy == Strategy::Moe {
                let grad = gradient_from_cache(&job.cached_softmax, &job.cached_feature_sum, job.expert, delta_norm);
                self.gating.apply_gradient(&grad);
                out.push(Event::GatingUpdate {
                    time: now,
                    task_id: job.task_id,
                    expert: job.expert,
                    gradient_norm: grad.norm(),
                });
            }
        }
        Ok(out)
    }

    fn admit(&mut self, now: u64) -> Result<()> {
        let task: Task = generate_task(&self.clusters, now, &self.config.task_params(), &mut self.world_rng)?;
        self.events.push(Event::Arrival {
            time: now,
            task_id: task.id,
            cluster: task.cluster,
            nearest_expert: task.nearest_expert,
            truth: task.truth.as_slice().to_vec(),
        });

        let sum = task.feature_sum();
        let gate_values = gate_outputs_from_sum(&sum, &self.gating);
        let pi = softmax(&gate_values);
        let idle_mask: Vec<bool> = self.experts.iter().map(|e| availability(e, now)).collect();
        let free_at: Vec<u64> = self.experts.iter().map(|e| e.busy_until).collect();
        let (chosen, fallback_used) = match self.config.strategy {
            Strategy::Moe => route(&gate_values, &idle_mask, &free_at, &self.gating, &mut self.route_rng),
            policy => route_benchmark(
                policy,
                task.nearest_expert,
                &idle_mask,
                &free_at,
                &self.experts,
                &self.config.delay,
            ),
        };
        if fallback_used {
            self.fallbacks += 1;
        }

        let expert = &mut self.experts[chosen];
        let delay = sample_delay(
            &self.config.delay,
            expert,
            chosen,
            task.nearest_expert,
            &mut self.delay_rng,
        );
        let starts_at = now.max(expert.busy_until);
        let completes_at = starts_at + u64::from(delay.total());
        expert.occupy_until(completes_at);

        self.events.push(Event::Routing {
            time: now,
            record: RoutingRecord {
                task_id: task.id,
                chosen,
                gate_values: gate_values.as_slice().to_vec(),
                softmax_values: pi.as_slice().to_vec(),
                idle_mask,
                fallback_used,
            },
            delay,
            starts_at,
            completes_at,
        });
        self.served.push((chosen, task.truth.clone()));
        self.pending.insert(
            (completes_at, task.id),
            PendingJob {
                task_id: task.id,
                expert: chosen,
                dispatched_at: starts_at,
                completes_at,
                cached_softmax: pi,
                cached_feature_sum: sum,
                features: task.features,
                labels: task.labels,
            },
        );
        Ok(())
    }

    /// Average model error over arrived tasks under the current expert models.
    pub fn current_generalization_error(&self) -> f64 {
        if self.served.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .served
            .iter()
            .map(|(m, truth)| model_error(&self.experts[*m].model, truth))
            .sum();
        total / self.served.len() as f64
    }

    pub fn step(&mut self, now: u64) -> Result<()> {
        let completed = self.process_completions(now)?;
        self.events.extend(completed);
        self.admit(now)?;
        if now.is_multiple_of(self.config.metric_stride) || now == self.config.horizon {
            self.metrics.push(MetricRow {
                time: now,
                generalization_error: self.current_generalization_error(),
                update_counts: self.experts.iter().map(|e| e.update_count).collect(),
                fallback_count: self.fallbacks,
                completions: self.completions,
            });
        }
        Ok(())
    }

    pub fn finish(mut self) -> RunTrace {
        let horizon = self.config.horizon;
        for job in self.pending.values() {
            self.events.push(Event::Truncated {
                time: horizon,
                task_id: job.task_id,
                expert: job.expert,
                completes_at: job.completes_at,
            });
        }
        RunTrace {
            config: self.config,
            clusters: self.clusters,
            events: self.events,
            metrics: self.metrics,
            experts: self.experts,
            gating: self.gating,
        }
    }
}

pub fn run(config: &RunConfig) -> Result<RunTrace> {
    let mut sim = Simulation::new(config.clone())?;
    for t in 1..=config.horizon {
        sim.step(t)?;
    }
    Ok(sim.finish())
}
