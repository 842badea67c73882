//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Experiment cells come from the shipped `specs/fig3.toml`, so the numbers
//! printed here match `edge-moe run specs/fig3.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;

use edge_moe::analysis::{convergence_time, expert_set_assignment, specialization_rate};
use edge_moe::experiment::{load_spec, run_experiment, Cell, ExperimentSpec};
use edge_moe::sim::{run, RunTrace, Strategy};
use edge_moe::verify::{benchmark_limit_check, gating_checks, oracle_checks, update_checks, CheckResult};
use rayon::prelude::*;

const SIGMA0_SQ: f64 = 0.36;
const SIGMA0: f64 = 0.6;
const RANDOM_INSTANCES: usize = 200;

struct CellStats {
    final_error: f64,
    fallbacks: u64,
    series: Vec<(u64, f64)>,
    specialization: Option<f64>,
}

fn fig3_spec() -> ExperimentSpec {
    load_spec(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/fig3.toml")).expect("shipped fig3 spec")
}

fn stats(spec: &ExperimentSpec, trace: &RunTrace) -> CellStats {
    let cfg = &trace.config;
    let specialization = (cfg.strategy == Strategy::Moe)
        .then(|| {
            let t1 = convergence_time(
                cfg.learning_rate,
                cfg.sigma0,
                cfg.n_experts,
                spec.delta,
                u64::from(cfg.delay.max_delay()),
            )
            .ok()?;
            let assignment = expert_set_assignment(&trace.gating, &trace.clusters.signals);
            specialization_rate(trace, &assignment, t1)
        })
        .flatten();
    CellStats {
        final_error: trace.final_error().expect("non-empty run"),
        fallbacks: trace.fallback_count(),
        series: trace.metrics.iter().map(|m| (m.time, m.generalization_error)).collect(),
        specialization,
    }
}

/// Every cell the criteria need, keyed by `(strategy, M)`.
fn run_cells(spec: &ExperimentSpec) -> BTreeMap<(Strategy, usize), Vec<CellStats>> {
    let wanted = [
        (Strategy::Moe, 10),
        (Strategy::Moe, 30),
        (Strategy::Moe, 50),
        (Strategy::Moe, 70),
        (Strategy::NearestAvailable, 30),
    ];
    let cells: Vec<Cell> = spec
        .cells()
        .into_iter()
        .filter(|c| wanted.contains(&(c.strategy, c.experts)))
        .collect();
    let results: Vec<(Cell, CellStats)> = cells
        .par_iter()
        .map(|c| {
            let trace = run(&spec.run_config(c.strategy, c.experts, c.seed)).expect("cell runs");
            (*c, stats(spec, &trace))
        })
        .collect();
    let mut out: BTreeMap<(Strategy, usize), Vec<CellStats>> = BTreeMap::new();
    for (c, s) in results {
        out.entry((c.strategy, c.experts)).or_default().push(s);
    }
    out
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_series(runs: &[CellStats]) -> Vec<(u64, f64)> {
    let n = runs.len() as f64;
    (0..runs[0].series.len())
        .map(|i| (runs[0].series[i].0, runs.iter().map(|r| r.series[i].1).sum::<f64>() / n))
        .collect()
}

fn first_below(series: &[(u64, f64)], level: f64) -> Option<u64> {
    series.iter().find(|(_, g)| *g < level).map(|(t, _)| *t)
}

/// Least-squares slope and its standard error.
fn slope(points: &[(u64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = mean(points.iter().map(|p| p.0 as f64));
    let my = mean(points.iter().map(|p| p.1));
    let sxx: f64 = points.iter().map(|p| (p.0 as f64 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 as f64 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    let rss: f64 = points.iter().map(|p| (p.1 - my - b * (p.0 as f64 - mx)).powi(2)).sum();
    (b, (rss / (n - 2.0) / sxx).sqrt())
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn from_checks(checks: &[CheckResult]) -> Outcome {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let worst: Vec<String> = checks
        .iter()
        .map(|c| format!("{}={:.1e}", c.name, c.observed))
        .collect();
    Outcome {
        passed: failed.is_empty(),
        detail: if failed.is_empty() {
            worst.join(" ")
        } else {
            failed.join("; ")
        },
    }
}

fn criterion_1(cells: &BTreeMap<(Strategy, usize), Vec<CellStats>>) -> Outcome {
    let runs = &cells[&(Strategy::Moe, 30)];
    let g = mean(runs.iter().map(|r| r.final_error));
    Outcome {
        passed: g < SIGMA0_SQ,
        detail: format!("moe M=30 mean final G = {g:.4} (need < {SIGMA0_SQ})"),
    }
}

fn criterion_2(cells: &BTreeMap<(Strategy, usize), Vec<CellStats>>) -> Outcome {
    let runs = &cells[&(Strategy::NearestAvailable, 30)];
    let g = mean(runs.iter().map(|r| r.final_error));
    let series = mean_series(runs);
    let horizon = series.last().unwrap().0;
    let second_half: Vec<(u64, f64)> = series.iter().copied().filter(|(t, _)| 2 * t >= horizon).collect();
    let (b, se) = slope(&second_half);
    // Non-decreasing unless the fitted slope is significantly negative.
    let trend_ok = b + 1.96 * se >= 0.0;
    Outcome {
        passed: g > 0.45 && trend_ok,
        detail: format!(
            "nearest_available M=30 mean final G = {g:.4} (need > 0.45; above sigma0={SIGMA0}: {}), second-half slope {b:.2e} +- {se:.1e}",
            g > SIGMA0
        ),
    }
}

fn criterion_3(cells: &BTreeMap<(Strategy, usize), Vec<CellStats>>) -> Outcome {
    let (a, b) = (&cells[&(Strategy::Moe, 10)], &cells[&(Strategy::Moe, 30)]);
    let (g10, g30) = (
        mean(a.iter().map(|r| r.final_error)),
        mean(b.iter().map(|r| r.final_error)),
    );
    let (f10, f30) = (
        mean(a.iter().map(|r| r.fallbacks as f64)),
        mean(b.iter().map(|r| r.fallbacks as f64)),
    );
    Outcome {
        passed: g10 > g30 && f10 > f30,
        detail: format!("G(M=10) = {g10:.4} vs G(M=30) = {g30:.4}; fallbacks {f10:.1} vs {f30:.1}"),
    }
}

fn criterion_4(cells: &BTreeMap<(Strategy, usize), Vec<CellStats>>) -> Outcome {
    let (a, b) = (&cells[&(Strategy::Moe, 50)], &cells[&(Strategy::Moe, 70)]);
    let (g50, g70) = (
        mean(a.iter().map(|r| r.final_error)),
        mean(b.iter().map(|r| r.final_error)),
    );
    let (c50, c70) = (
        first_below(&mean_series(a), SIGMA0_SQ),
        first_below(&mean_series(b), SIGMA0_SQ),
    );
    // Never crossing counts as crossing at infinity.
    let no_earlier = match (c50, c70) {
        (_, None) => true,
        (None, Some(_)) => false,
        (Some(x), Some(y)) => y >= x,
    };
    Outcome {
        passed: g70 >= g50 - 0.01 && no_earlier,
        detail: format!(
            "G(M=70) = {g70:.4} vs G(M=50) = {g50:.4} (need >= G50 - 0.01); first t below {SIGMA0_SQ}: M=50 {c50:?}, M=70 {c70:?}"
        ),
    }
}

fn criterion_5(cells: &BTreeMap<(Strategy, usize), Vec<CellStats>>) -> Outcome {
    let rates: Vec<f64> = cells[&(Strategy::Moe, 30)]
        .iter()
        .map(|r| r.specialization.unwrap_or(0.0))
        .collect();
    let m = mean(rates.iter().copied());
    let per: Vec<String> = rates.iter().map(|r| format!("{r:.3}")).collect();
    Outcome {
        passed: m >= 0.95,
        detail: format!(
            "moe M=30 post-T_1 specialization mean {m:.3} (need >= 0.95), per seed [{}]",
            per.join(", ")
        ),
    }
}

fn criterion_8(spec: &ExperimentSpec) -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut bytes = Vec::new();
    for name in ["first", "second"] {
        let mut s = spec.clone();
        s.output_dir = Some(tmp.path().join(name));
        run_experiment(&s).expect("experiment runs");
        bytes.push((
            fs::read(tmp.path().join(name).join("metrics.csv")).expect("metrics"),
            fs::read(tmp.path().join(name).join("summary.csv")).expect("summary"),
        ));
    }
    let same = bytes[0] == bytes[1];
    Outcome {
        passed: same,
        detail: format!(
            "fig3 spec run twice: metrics.csv {} bytes, identical = {same}",
            bytes[0].0.len()
        ),
    }
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => Outcome {
            passed: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        },
    }
}

fn main() -> ExitCode {
    let spec = fig3_spec();
    let cells = run_cells(&spec);
    let results = [
        ("1 convergent regime", guarded(|| criterion_1(&cells))),
        ("2 benchmark failure", guarded(|| criterion_2(&cells))),
        ("3 insufficient experts", guarded(|| criterion_3(&cells))),
        ("4 over-provisioning", guarded(|| criterion_4(&cells))),
        ("5 specialization", guarded(|| criterion_5(&cells))),
        (
            "6 numeric properties",
            guarded(|| {
                let mut checks = update_checks(RANDOM_INSTANCES, 6);
                checks.extend(gating_checks(RANDOM_INSTANCES, 6));
                from_checks(&checks)
            }),
        ),
        ("7 oracles", guarded(|| from_checks(&oracle_checks(7)))),
        ("8 determinism", guarded(|| criterion_8(&spec))),
        (
            "9 benchmark limit",
            guarded(|| from_checks(&[benchmark_limit_check(9)])),
        ),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "[{}] criterion {name}: {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
