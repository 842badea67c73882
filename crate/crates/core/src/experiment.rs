//! Experiment specs, multi-cell sweeps and the files they produce.
//!
//! A spec is a flat TOML table. Every `(strategy, experts, replicate)` cell is
//! an isolated simulation; cells run in parallel and are written in sorted
//! order, so identical specs yield identical bytes.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.json          spec echo, derived quantities, cell list
//! metrics.csv            strategy,experts,replicate,seed,time,... for every cell
//! summary.csv            one row per cell
//! cells/<cell>.csv       per-cell series including per-expert update counts
//! traces/<cell>.jsonl    event log, one JSON record per line (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    convergence_time, error_report, expert_set_assignment, expert_threshold, specialization_rate, ThresholdReport,
};
use crate::error::{Error, Result};
use crate::expert::{DelayModel, TransmissionDistribution};
use crate::rng::cell_seed;
use crate::sim::{run, Event, RunConfig, RunTrace, Strategy};
use crate::task_gen::BETA_CAP;

/// Bumped whenever an output column or file changes meaning.
pub const FORMAT_VERSION: u32 = 1;

pub const OUTPUT_DIR_ENV: &str = "EDGE_MOE_OUTPUT_DIR";

fn default_replicates() -> usize {
    5
}
fn default_stride() -> u64 {
    10
}
fn default_true() -> bool {
    true
}
fn default_delta() -> f64 {
    0.05
}
fn default_bound_c() -> f64 {
    1.0
}
fn default_learning_rate() -> f64 {
    0.2
}
fn default_tr() -> [u32; 2] {
    [0, 6]
}
fn default_exec() -> [u32; 2] {
    [1, 4]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub horizon: u64,
    pub clusters: usize,
    pub dim: usize,
    pub samples: usize,
    pub sigma0: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Defaults to `0.1 * sigma0`.
    pub sigma_noise: Option<f64>,
    /// Defaults to 1.
    pub beta_max: Option<f64>,
    /// Defaults to `sigma0^2 / 2`.
    pub within_jitter: Option<f64>,
    /// Defaults to `1e-6 * sigma0`.
    pub noise_scale: Option<f64>,
    #[serde(default = "default_tr")]
    pub tr_delay: [u32; 2],
    pub tr_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub same_station_tr: u32,
    #[serde(default = "default_exec")]
    pub exec_delay: [u32; 2],

    pub experts: Vec<usize>,
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,

    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default = "default_true")]
    pub report_thresholds: bool,
    #[serde(default = "default_true")]
    pub report_bounds: bool,
    #[serde(default = "default_true")]
    pub report_specialization: bool,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_bound_c")]
    pub bound_c: f64,
    #[serde(default)]
    pub write_traces: bool,
}

impl ExperimentSpec {
    pub fn delay_model(&self) -> DelayModel {
        DelayModel {
            tr_bounds: (self.tr_delay[0], self.tr_delay[1]),
            tr_distribution: match &self.tr_weights {
                Some(w) => TransmissionDistribution::Weights(w.clone()),
                None => TransmissionDistribution::Uniform,
            },
            same_station_tr: self.same_station_tr,
            exec_bounds: (self.exec_delay[0], self.exec_delay[1]),
        }
    }

    /// Run configuration of one cell.
    pub fn run_config(&self, strategy: Strategy, n_experts: usize, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::with_defaults(
            self.horizon,
            n_experts,
            self.clusters,
            self.dim,
            self.samples,
            self.sigma0,
            strategy,
            seed,
        );
        cfg.learning_rate = self.learning_rate;
        if let Some(x) = self.sigma_noise {
            cfg.sigma_noise = x;
        }
        cfg.beta_max = self.beta_max.unwrap_or(BETA_CAP);
        if let Some(x) = self.within_jitter {
            cfg.within_jitter = x;
        }
        if let Some(x) = self.noise_scale {
            cfg.noise_scale = x;
        }
        cfg.delay = self.delay_model();
        cfg.metric_stride = self.stride;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts.is_empty() {
            return Err(Error::config("experts", "sweep list is empty"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("strategies", "sweep list is empty"));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be at least 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("delta", "must lie in (0, 1)"));
        }
        if !(self.bound_c >= 0.0 && self.bound_c.is_finite()) {
            return Err(Error::config("bound_c", "must be finite and non-negative"));
        }
        for &m in &self.experts {
            self.run_config(self.strategies[0], m, self.seed).validate()?;
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut experts = self.experts.clone();
        experts.sort_unstable();
        experts.dedup();
        let mut strategies = self.strategies.clone();
        strategies.sort_unstable();
        strategies.dedup();
        let mut out = Vec::new();
        for &strategy in &strategies {
            for &n_experts in &experts {
                for replicate in 0..self.replicates {
                    out.push(Cell {
                        strategy,
                        experts: n_experts,
                        replicate,
                        seed: cell_seed(self.seed, strategy.name(), n_experts, replicate),
                    });
                }
            }
        }
        out
    }
}

pub fn parse_spec(text: &str, origin: &str) -> Result<ExperimentSpec> {
    let spec: ExperimentSpec = toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_string(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path)?;
    parse_spec(&text, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: Strategy,
    pub experts: usize,
    pub replicate: usize,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!("{}_M{}_r{}", self.strategy, self.experts, self.replicate)
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub strategy: Strategy,
    pub experts: usize,
    pub replicate: usize,
    pub seed: u64,
    pub time: u64,
    pub generalization_error: f64,
    pub fallback_count: u64,
    pub completions: u64,
}

/// One row of `summary.csv`. Optional diagnostics are empty when disabled or
/// undefined for the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: Strategy,
    pub experts: usize,
    pub replicate: usize,
    pub seed: u64,
    pub status: String,
    pub final_error: Option<f64>,
    pub fallback_count: Option<u64>,
    pub completions: Option<u64>,
    pub truncated: Option<u64>,
    pub benchmark_g1: Option<f64>,
    pub benchmark_g2: Option<f64>,
    pub convergence_time: Option<u64>,
    pub bound: Option<f64>,
    pub specialization_rate: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub cell: Cell,
    pub summary: CellSummary,
    pub metrics: Vec<MetricsRecord>,
    pub trace: Option<RunTrace>,
}

/// Runs one cell and derives its summary. Failures become a summary with
/// `status = "failed"` rather than an error.
pub fn run_cell(spec: &ExperimentSpec, cell: Cell) -> CellOutput {
    let cfg = spec.run_config(cell.strategy, cell.experts, cell.seed);
    let mut summary = CellSummary {
        strategy: cell.strategy,
        experts: cell.experts,
        replicate: cell.replicate,
        seed: cell.seed,
        status: "ok".into(),
        final_error: None,
        fallback_count: None,
        completions: None,
        truncated: None,
        benchmark_g1: None,
        benchmark_g2: None,
        convergence_time: None,
        bound: None,
        specialization_rate: None,
        error: None,
    };
    let trace = match run(&cfg) {
        Ok(t) => t,
        Err(e) => {
            log::error!("cell {} failed: {e}", cell.label());
            summary.status = "failed".into();
            summary.error = Some(e.to_string());
            return CellOutput {
                cell,
                summary,
                metrics: Vec::new(),
                trace: None,
            };
        }
    };
    let t1 = convergence_time(
        cfg.learning_rate,
        cfg.sigma0,
        cfg.n_experts,
        spec.delta,
        u64::from(cfg.delay.max_delay()),
    )
    .ok();
    let report = error_report(&trace, spec.stride, t1.filter(|_| spec.report_bounds), spec.bound_c);
    summary.final_error = Some(report.final_error);
    summary.fallback_count = Some(trace.fallback_count());
    summary.completions = Some(trace.completion_count());
    summary.truncated = Some(
        trace
            .events
            .iter()
            .filter(|e| matches!(e, Event::Truncated { .. }))
            .count() as u64,
    );
    if spec.report_bounds {
        summary.benchmark_g1 = Some(report.benchmark.0);
        summary.benchmark_g2 = Some(report.benchmark.1);
        summary.convergence_time = t1;
        summary.bound = report.bound.map(|b| b.total);
    }
    if spec.report_specialization && cell.strategy == Strategy::Moe {
        if let Some(t1) = t1.filter(|&t1| t1 < cfg.horizon) {
            let assignment = expert_set_assignment(&trace.gating, &trace.clusters.signals);
            summary.specialization_rate = specialization_rate(&trace, &assignment, t1);
        }
    }
    let metrics = trace
        .metrics
        .iter()
        .map(|row| MetricsRecord {
            strategy: cell.strategy,
            experts: cell.experts,
            replicate: cell.replicate,
            seed: cell.seed,
            time: row.time,
            generalization_error: row.generalization_error,
            fallback_count: row.fallback_count,
            completions: row.completions,
        })
        .collect();
    CellOutput {
        cell,
        summary,
        metrics,
        trace: spec.write_traces.then_some(trace),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: ExperimentSpec,
    pub sigma0_squared: f64,
    pub max_delay: u32,
    pub threshold: Option<ThresholdReport>,
    pub cells: Vec<Cell>,
    pub failed: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub output_dir: PathBuf,
    pub cells: Vec<CellSummary>,
    pub failed: usize,
}

impl ExperimentOutcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.failed > 0)
    }
}

/// Resolves the output directory: the spec's, then the environment
/// variable, then `./results`.
pub fn resolve_output_dir(spec: &ExperimentSpec) -> PathBuf {
    spec.output_dir
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let dir = resolve_output_dir(spec);
    fs::create_dir_all(dir.join("cells"))?;
    if spec.write_traces {
        fs::create_dir_all(dir.join("traces"))?;
    }
    let cells = spec.cells();
    log::info!("running {} cells into {}", cells.len(), dir.display());
    let mut outputs: Vec<CellOutput> = cells.par_iter().map(|&c| run_cell(spec, c)).collect();
    outputs.sort_by_key(|o| o.cell);

    let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))?;
    let mut summary = csv::Writer::from_path(dir.join("summary.csv"))?;
    for out in &outputs {
        for row in &out.metrics {
            metrics.serialize(row)?;
        }
        summary.serialize(&out.summary)?;
        if let Some(trace) = &out.trace {
            write_cell_series(&dir.join("cells").join(format!("{}.csv", out.cell.label())), trace)?;
            write_trace(&dir.join("traces").join(format!("{}.jsonl", out.cell.label())), trace)?;
        } else if !out.metrics.is_empty() {
            write_cell_metrics(
                &dir.join("cells").join(format!("{}.csv", out.cell.label())),
                &out.metrics,
            )?;
        }
    }
    metrics.flush()?;
    summary.flush()?;

    let failed: Vec<String> = outputs
        .iter()
        .filter(|o| o.summary.status != "ok")
        .map(|o| o.cell.label())
        .collect();
    let cfg = spec.run_config(spec.strategies[0], spec.experts[0], spec.seed);
    // The destination is left out so relocated reruns stay byte-identical.
    let mut echoed = spec.clone();
    echoed.output_dir = None;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: echoed,
        sigma0_squared: spec.sigma0 * spec.sigma0,
        max_delay: cfg.delay.max_delay(),
        threshold: if spec.report_thresholds {
            expert_threshold(spec.clusters, f64::from(cfg.delay.max_delay()), spec.delta).ok()
        } else {
            None
        },
        cells,
        failed: failed.clone(),
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;

    Ok(ExperimentOutcome {
        output_dir: dir,
        cells: outputs.into_iter().map(|o| o.summary).collect(),
        failed: failed.len(),
    })
}

fn write_cell_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "generalization_error", "fallback_count", "completions"])?;
    for r in rows {
        w.write_record([
            r.time.to_string(),
            r.generalization_error.to_string(),
            r.fallback_count.to_string(),
            r.completions.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-cell series with one `L_m` column per expert.
fn write_cell_series(path: &Path, trace: &RunTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "time".to_string(),
        "generalization_error".into(),
        "fallback_count".into(),
        "completions".into(),
    ];
    header.extend((0..trace.config.n_experts).map(|m| format!("L_{m}")));
    w.write_record(&header)?;
    for row in &trace.metrics {
        let mut rec = vec![
            row.time.to_string(),
            row.generalization_error.to_string(),
            row.fallback_count.to_string(),
            row.completions.to_string(),
        ];
        rec.extend(row.update_counts.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Line-delimited JSON: a header record with config and clusters, then one
/// event per line, then the final expert and gate snapshots.
pub fn write_trace(path: &Path, trace: &RunTrace) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &serde_json::json!({"record": "header", "config": trace.config, "clusters": trace.clusters}),
    )?;
    w.write_all(b"\n")?;
    for e in &trace.events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut w,
        &serde_json::json!({"record": "final", "experts": trace.experts, "gating": trace.gating}),
    )?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// One row of a plot table. Rows with `kind = "reference"` carry horizontal
/// reference levels in `mean`, named by `strategy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub kind: String,
    pub strategy: String,
    pub experts: usize,
    pub time: u64,
    pub mean: f64,
    pub std_error: f64,
    pub replicates: usize,
}

#[derive(Debug, Clone)]
pub struct PlotData {
    /// Panel name (`moe`, `benchmarks`) to rows.
    pub panels: BTreeMap<String, Vec<PlotRow>>,
    pub warnings: Vec<String>,
}

fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Aggregates `metrics.csv` of a run directory into per-panel tables
/// `plot_moe.csv` and `plot_benchmarks.csv`, written next to it.
pub fn emit_plotdata(dir: &Path) -> Result<PlotData> {
    let manifest: Manifest = serde_json::from_reader(fs::File::open(dir.join("manifest.json"))?)?;
    let records = read_metrics(&dir.join("metrics.csv"))?;

    let mut groups: BTreeMap<(Strategy, usize), BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut seen: BTreeMap<(Strategy, usize), std::collections::BTreeSet<usize>> = BTreeMap::new();
    for r in &records {
        groups
            .entry((r.strategy, r.experts))
            .or_default()
            .entry(r.time)
            .or_default()
            .push(r.generalization_error);
        seen.entry((r.strategy, r.experts)).or_default().insert(r.replicate);
    }

    let mut warnings = Vec::new();
    for cell in &manifest.cells {
        let present = seen
            .get(&(cell.strategy, cell.experts))
            .is_some_and(|s| s.contains(&cell.replicate));
        if !present {
            warnings.push(format!("missing cell {}", cell.label()));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let sigma0 = manifest.spec.sigma0;
    let references = [("sigma0_squared", sigma0 * sigma0), ("sigma0", sigma0)];
    let mut panels: BTreeMap<String, Vec<PlotRow>> = BTreeMap::new();
    for ((strategy, experts), series) in &groups {
        let panel = if strategy.is_benchmark() { "benchmarks" } else { "moe" };
        let rows = panels.entry(panel.to_string()).or_default();
        for (time, values) in series {
            let (mean, std_error) = mean_and_std_error(values);
            rows.push(PlotRow {
                kind: "series".into(),
                strategy: strategy.name().into(),
                experts: *experts,
                time: *time,
                mean,
                std_error,
                replicates: values.len(),
            });
        }
    }
    for (panel, rows) in panels.iter_mut() {
        for (name, level) in references {
            rows.push(PlotRow {
                kind: "reference".into(),
                strategy: name.into(),
                experts: 0,
                time: 0,
                mean: level,
                std_error: 0.0,
                replicates: 0,
            });
        }
        let mut w = csv::Writer::from_path(dir.join(format!("plot_{panel}.csv")))?;
        for row in rows.iter() {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(PlotData { panels, warnings })
}
