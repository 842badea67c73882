use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edge_moe::analysis::expert_threshold;
use edge_moe::experiment::{emit_plotdata, load_spec, run_experiment};
use edge_moe::sim::Strategy;
use edge_moe::verify::run_all;

/// Mixture-of-experts routing simulator for mobile edge computing.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment spec.
    Run {
        spec: PathBuf,
        /// Output directory; overrides the spec. Without either,
        /// EDGE_MOE_OUTPUT_DIR and then `results` are used.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<u64>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated expert counts.
        #[arg(long, value_delimiter = ',')]
        experts: Option<Vec<usize>>,
        /// Comma-separated strategies.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<Strategy>>,
        #[arg(long)]
        stride: Option<u64>,
        #[arg(long)]
        write_traces: bool,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Expert-count threshold M_th and the recommended pool size.
    Threshold {
        #[arg(long)]
        clusters: usize,
        #[arg(long, default_value_t = 10.0)]
        max_delay: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long)]
        json: bool,
    },
    /// Aggregate a run directory into per-panel plot tables.
    Plotdata { dir: PathBuf },
    /// Run the numeric property and oracle suites.
    Verify {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const SPEC_ERROR: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            spec,
            output_dir,
            horizon,
            replicates,
            seed,
            experts,
            strategies,
            stride,
            write_traces,
            threads,
        } => {
            let mut s = match load_spec(&spec) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(SPEC_ERROR);
                }
            };
            if output_dir.is_some() {
                s.output_dir = output_dir;
            }
            if let Some(x) = horizon {
                s.horizon = x;
            }
            if let Some(x) = replicates {
                s.replicates = x;
            }
            if let Some(x) = seed {
                s.seed = x;
            }
            if let Some(x) = experts {
                s.experts = x;
            }
            if let Some(x) = strategies {
                s.strategies = x;
            }
            if let Some(x) = stride {
                s.stride = x;
            }
            s.write_traces |= write_traces;
            if let Err(e) = s.validate() {
                eprintln!("error: {e}");
                return ExitCode::from(SPEC_ERROR);
            }
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            match run_experiment(&s) {
                Ok(outcome) => {
                    for c in &outcome.cells {
                        println!(
                            "{:<18} M={:<3} r={} final_G={} fallbacks={} status={}",
                            c.strategy,
                            c.experts,
                            c.replicate,
                            c.final_error.map_or("-".into(), |g| format!("{g:.4}")),
                            c.fallback_count.map_or("-".into(), |f| f.to_string()),
                            c.status
                        );
                    }
                    println!("wrote {}", outcome.output_dir.display());
                    ExitCode::from(outcome.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Threshold {
            clusters,
            max_delay,
            delta,
            json,
        } => match expert_threshold(clusters, max_delay, delta) {
            Ok(r) if json => {
                println!("{}", serde_json::to_string_pretty(&r).expect("plain struct"));
                ExitCode::SUCCESS
            }
            Ok(r) => {
                println!("N={} d_u={} delta={}", r.n_clusters, r.max_delay, r.delta);
                println!("M_th={:.6}", r.m_th);
                println!("recommended_M={}", r.recommended_experts);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(SPEC_ERROR)
            }
        },
        Command::Plotdata { dir } => match emit_plotdata(&dir) {
            Ok(data) => {
                for (panel, rows) in &data.panels {
                    println!("plot_{panel}.csv: {} rows", rows.len());
                }
                ExitCode::from(u8::from(!data.warnings.is_empty()))
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(SPEC_ERROR)
            }
        },
        Command::Verify { instances, seed } => {
            let results = run_all(instances, seed);
            for r in &results {
                println!("{r}");
            }
            ExitCode::from(u8::from(results.iter().any(|r| !r.passed)))
        }
    }
}
