//! `certaindex`: run scheduling experiments, calibrate stopping thresholds,
//! check the stopping-rule bounds and replay probe traces.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use certaindex::metrics::Signal;
use certaindex::probe::ProbeConfig;
use clap::{Args, Parser, Subcommand};

use commands::{CalibrateArgs, CliError, Context, GenTraceArgs, VerifyArgs};
use config::{ExperimentConfig, Format};

const DEFAULT_OUT: &str = "certaindex-out";

#[derive(Parser)]
#[command(name = "certaindex", version, about = "Certainty-driven early exit and scheduling experiments")]
struct Cli {
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory. Falls back to $CERTAINDEX_OUT, then the config's
    /// `output.dir`, then `certaindex-out`.
    #[arg(long, global = true, env = "CERTAINDEX_OUT")]
    out: Option<PathBuf>,

    /// Report format; repeat for both. Defaults to the config's
    /// `output.formats`, or both.
    #[arg(long, global = true, value_enum)]
    format: Vec<Format>,

    /// Worker threads for sweeps and profiling.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every point of the config's sweep.
    Simulate,
    /// Derive a stopping threshold from profiled check points.
    Calibrate {
        /// Calibration CSV; without it the config's workload is profiled.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Largest tolerated fraction of runs made wrong by stopping.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        /// Signal the threshold applies to.
        #[arg(long, default_value = "entropy", value_parser = parse_signal)]
        signal: Signal,
    },
    /// Check the probe-count bound by simulation and the window equivalence
    /// by exhaustive search.
    VerifyTheory {
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 1000)]
        replications: u64,
        #[arg(long, default_value_t = 3)]
        max_groups: usize,
        #[arg(long, default_value_t = 3)]
        max_k: usize,
        /// Probabilities are multiples of 1/grid.
        #[arg(long, default_value_t = 4)]
        grid: u32,
    },
    /// Apply the early-exit rule to recorded probe traces.
    Replay {
        /// Probe trace (JSON lines).
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        probe: ProbeArgs,
    },
    /// Write synthetic chain-of-thought probe traces.
    GenTrace {
        #[arg(long, default_value_t = 50)]
        programs: usize,
        /// Probe points per program.
        #[arg(long, default_value_t = 24)]
        steps: u32,
        #[arg(long, default_value_t = 4)]
        groups: usize,
        /// Chance of a wrong answer before the program settles.
        #[arg(long, default_value_t = 0.6)]
        noise: f64,
        #[arg(long, default_value_t = 0.1)]
        hesitation: f64,
        #[arg(long, default_value_t = 0.2)]
        unsolvable: f64,
        #[command(flatten)]
        probe: ProbeArgs,
    },
}

/// Probe settings; each flag overrides the config's `[probe]` section.
#[derive(Args)]
struct ProbeArgs {
    /// Consistency needed to exit.
    #[arg(long)]
    threshold: Option<f64>,
    /// Non-hesitant answers compared.
    #[arg(long)]
    window: Option<usize>,
    /// Tokens between probes.
    #[arg(long)]
    interval: Option<u64>,
}

impl ProbeArgs {
    fn apply(&self, mut base: ProbeConfig) -> ProbeConfig {
        if let Some(t) = self.threshold {
            base.threshold = t;
        }
        if let Some(w) = self.window {
            base.window = w;
        }
        if let Some(i) = self.interval {
            base.interval_tokens = i;
        }
        base
    }
}

fn parse_signal(s: &str) -> Result<Signal, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown signal `{s}`; expected entropy, reward, consistency, mean_output_length or mean_norm_logprob"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("jobs: must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let mut cfg = cli.config.as_deref().map(ExperimentConfig::load).transpose()?;
    if let (Some(c), Some(seed)) = (cfg.as_mut(), cli.seed) {
        c.seed = seed;
    }
    let out = cli
        .out
        .or_else(|| cfg.as_ref().and_then(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let formats = if !cli.format.is_empty() {
        cli.format
    } else {
        cfg.as_ref().map_or_else(|| vec![Format::Csv, Format::Json], |c| c.output.formats.clone())
    };
    commands::prepare_out(&out)?;
    let ctx = Context {
        seed: cli.seed.or(cfg.as_ref().map(|c| c.seed)),
        out,
        formats,
    };
    let base_probe = cfg.as_ref().map(|c| c.probe.clone()).unwrap_or_default();

    match cli.command {
        Command::Simulate => {
            let cfg = cfg.ok_or_else(|| CliError::Config("config: simulate needs --config".into()))?;
            commands::simulate(&cfg, &ctx)
        }
        Command::Calibrate {
            input,
            tolerance,
            signal,
        } => commands::calibrate(
            &CalibrateArgs {
                input,
                tolerance,
                signal,
            },
            cfg.as_ref(),
            &ctx,
        ),
        Command::VerifyTheory {
            groups,
            epsilon,
            delta,
            replications,
            max_groups,
            max_k,
            grid,
        } => commands::verify_theory(
            &VerifyArgs {
                groups,
                epsilon,
                delta,
                replications,
                max_groups,
                max_k,
                grid_steps: grid,
            },
            &ctx,
        ),
        Command::Replay { trace, probe } => commands::replay_traces(&trace, &probe.apply(base_probe), &ctx).map(|_| ()),
        Command::GenTrace {
            programs,
            steps,
            groups,
            noise,
            hesitation,
            unsolvable,
            probe,
        } => commands::gen_trace(
            &GenTraceArgs {
                programs,
                steps,
                groups,
                noise,
                hesitation,
                unsolvable,
            },
            &probe.apply(base_probe),
            &ctx,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
