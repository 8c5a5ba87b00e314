use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use certaindex::metrics::{Signal, Threshold};
use certaindex::probe::{read_traces, replay, write_savings_table, write_traces, ProbeConfig, ReplayOutcome};
use certaindex::runtime::{synthetic_cot_trace, AnswerProcess, Archetype, WorkloadConfig};
use certaindex::scheduler::{calibrate_threshold, read_calibration_csv, write_calibration_csv, Calibration};
use certaindex::sim::{calibrated_policy, calibration_rows, profile, ProfilePoint, SimReport};
use certaindex::theory::{lemma1_monte_carlo, lemma2_sweep, required_probes};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, Format, GridPoint};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Library failures while running are runtime errors.
impl From<certaindex::Error> for CliError {
    fn from(e: certaindex::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parameter errors in command-line values are config errors.
fn param(e: certaindex::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Settings shared by all subcommands after flags, environment and config
/// have been merged.
pub struct Context {
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub formats: Vec<Format>,
}

impl Context {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.out.join(name);
        let f = File::create(&path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(BufWriter::new(f))
    }
}

/// Makes sure the output directory exists and accepts files.
pub fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".certaindex-write-test");
    File::create(&probe)
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

fn write_json<T: Serialize>(w: impl Write, value: &T) -> Result<(), CliError> {
    let mut w = w;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Columns of `summary.csv`, in order.
pub const SUMMARY_COLUMNS: [&str; 18] = [
    "point",
    "policy",
    "rate",
    "slo_scale",
    "cap",
    "threshold",
    "programs",
    "completed",
    "truncated",
    "mean_latency",
    "p90_latency",
    "attainment",
    "total_tokens",
    "accuracy",
    "throughput",
    "makespan",
    "phi_mean",
    "phi_p99",
];

/// One line of the sweep summary. Missing values are empty in CSV and null
/// in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub point: usize,
    pub policy: String,
    pub rate: Option<f64>,
    pub slo_scale: f64,
    pub cap: u32,
    /// The calibrated cutoff, when the point's policy was calibrated.
    pub threshold: Option<f64>,
    pub programs: usize,
    pub completed: usize,
    pub truncated: usize,
    pub mean_latency: Option<f64>,
    pub p90_latency: Option<f64>,
    pub attainment: Option<f64>,
    pub total_tokens: u64,
    pub accuracy: Option<f64>,
    pub throughput: f64,
    pub makespan: f64,
    pub phi_mean: Option<f64>,
    pub phi_p99: Option<f64>,
}

impl SummaryRow {
    fn new(p: &GridPoint, threshold: Option<f64>, r: &SimReport) -> Self {
        let a = &r.aggregates;
        Self {
            point: p.index,
            policy: p.policy.as_str().to_string(),
            rate: p.rate,
            slo_scale: p.slo_scale,
            cap: p.cap,
            threshold,
            programs: a.programs,
            completed: a.completed,
            truncated: a.truncated,
            mean_latency: a.mean_latency,
            p90_latency: a.p90_latency,
            attainment: a.attainment,
            total_tokens: a.total_tokens,
            accuracy: a.accuracy,
            throughput: a.throughput,
            makespan: a.makespan,
            phi_mean: a.fairness.map(|f| f.mean),
            phi_p99: a.fairness.map(|f| f.p99),
        }
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:>5}  {:<18} {:>8} {:>6} {:>4} {:>10} {:>10} {:>10} {:>12} {:>8}",
        "point", "policy", "rate", "slo", "cap", "mean_lat", "p90_lat", "attain", "tokens", "accuracy"
    );
    for r in rows {
        println!(
            "{:>5}  {:<18} {:>8} {:>6.2} {:>4} {:>10} {:>10} {:>10} {:>12} {:>8}",
            r.point,
            r.policy,
            opt(r.rate, 3),
            r.slo_scale,
            r.cap,
            opt(r.mean_latency, 3),
            opt(r.p90_latency, 3),
            opt(r.attainment, 3),
            r.total_tokens,
            opt(r.accuracy, 3),
        );
    }
}

pub fn simulate(cfg: &ExperimentConfig, ctx: &Context) -> Result<(), CliError> {
    let grid = cfg.grid()?;
    let workload = cfg.workload()?;

    // One profile per cap, shared by every calibrated policy at that cap.
    let mut profiles: BTreeMap<u32, Vec<ProfilePoint>> = BTreeMap::new();
    if let Some(held_out) = cfg.profile_workload() {
        let held_out = held_out?;
        for p in &grid {
            if let Entry::Vacant(slot) = profiles.entry(p.cap) {
                let plan = cfg.calibration_plan(p.cap).expect("calibration section present");
                let recheck = Some(plan.recheck_every);
                slot.insert(profile(&held_out, &cfg.probe, p.cap, plan.detect_at_knob, recheck)?);
            }
        }
    }

    let mut runs = Vec::with_capacity(grid.len());
    for p in &grid {
        let (allocation, threshold) = match cfg.calibration_plan(p.cap) {
            Some(plan) => {
                let (policy, cal) = calibrated_policy(p.policy, &profiles[&p.cap], &plan)
                    .map_err(|e| CliError::Runtime(format!("calibrating point {}: {e}", p.index)))?;
                (policy, cal.map(|c| c.threshold))
            }
            None => (cfg.allocation_for(p), None),
        };
        let sim = cfg.sim_config(p, workload.clone(), allocation);
        sim.validate().map_err(|e| ConfigError::within("config", e))?;
        runs.push((p, threshold, sim));
    }

    let reports: Vec<(usize, Result<SimReport, certaindex::Error>)> = runs
        .par_iter()
        .map(|(p, _, sim)| (p.index, certaindex::sim::run(sim)))
        .collect();

    let mut rows = Vec::with_capacity(reports.len());
    for ((p, threshold, _), (_, report)) in runs.iter().zip(reports) {
        let report = report.map_err(|e| CliError::Runtime(format!("grid point {}: {e}", p.index)))?;
        if ctx.wants(Format::Csv) {
            report.write_csv(ctx.create(&format!("point-{:03}.csv", p.index))?)?;
        }
        if ctx.wants(Format::Json) {
            report.write_json(ctx.create(&format!("point-{:03}.json", p.index))?)?;
        }
        rows.push(SummaryRow::new(p, *threshold, &report));
    }

    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(ctx.create("summary.csv")?);
    w.write_record(SUMMARY_COLUMNS).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    write_json(ctx.create("summary.json")?, &rows)?;
    print_summary(&rows);
    Ok(())
}

/// The part of a config file that calibration produces. It parses back into
/// the `[allocation]` section of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFragment {
    pub allocation: ThresholdList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdList {
    pub thresholds: Vec<Threshold>,
}

impl ThresholdFragment {
    pub fn new(signal: Signal, cal: &Calibration) -> Self {
        Self {
            allocation: ThresholdList {
                thresholds: vec![Threshold::at_least(signal, cal.threshold)],
            },
        }
    }

    pub fn to_toml(&self, cal: &Calibration) -> String {
        let mut s = format!(
            "# stopped {}, harmful {}, accuracy change {:.6}, tokens saved {}\n",
            cal.stopped, cal.harmful, cal.accuracy_delta, cal.tokens_saved
        );
        if cal.disabled {
            s.push_str("# no observed cutoff was safe; this threshold never fires\n");
        }
        s.push_str(&toml::to_string(self).expect("thresholds serialize"));
        s
    }
}

pub struct CalibrateArgs {
    pub input: Option<PathBuf>,
    pub tolerance: f64,
    pub signal: Signal,
}

/// Calibrates from a CSV of profiled check points or, without one, by
/// profiling the workload of the experiment config.
pub fn calibrate(args: &CalibrateArgs, cfg: Option<&ExperimentConfig>, ctx: &Context) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.tolerance) {
        return Err(CliError::Config(format!("tolerance: {} must lie in [0, 1]", args.tolerance)));
    }
    let rows = match (&args.input, cfg) {
        (Some(path), _) => {
            let f = File::open(path).map_err(|e| CliError::Config(format!("input: {}: {e}", path.display())))?;
            read_calibration_csv(BufReader::new(f))?
        }
        (None, Some(cfg)) => {
            let Some(held_out) = cfg.profile_workload() else {
                return Err(CliError::Config(
                    "calibration: profiling needs [workload] and [calibration] sections".into(),
                ));
            };
            let held_out = held_out?;
            let cap = cfg.allocation.resource_cap;
            let plan = cfg.calibration_plan(cap).expect("calibration section present");
            let points = profile(&held_out, &cfg.probe, cap, plan.detect_at_knob, Some(plan.recheck_every))?;
            let rows = calibration_rows(&points, args.signal);
            write_calibration_csv(ctx.create("calibration.csv")?, &rows)?;
            rows
        }
        (None, None) => return Err(CliError::Config("input: give --input or --config".into())),
    };
    let cal = calibrate_threshold(&rows, args.tolerance)?;
    let fragment = ThresholdFragment::new(args.signal, &cal);
    let text = fragment.to_toml(&cal);
    fs::write(ctx.out.join("thresholds.toml"), &text)?;
    if ctx.wants(Format::Json) {
        write_json(ctx.create("calibration.json")?, &cal)?;
    }
    print!("{text}");
    Ok(())
}

pub struct VerifyArgs {
    pub groups: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub replications: u64,
    pub max_groups: usize,
    pub max_k: usize,
    pub grid_steps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub groups: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub seed: u64,
    pub required_probes: u64,
    pub replications: u64,
    pub hits: u64,
    pub coverage: f64,
    pub sweep_sequences: u64,
    pub sweep_premises_met: u64,
    pub sweep_counterexamples: u64,
    pub sweep_passed: bool,
}

pub fn verify_theory(args: &VerifyArgs, ctx: &Context) -> Result<(), CliError> {
    let seed = ctx.seed();
    let k = required_probes(args.groups, args.epsilon, args.delta).map_err(param)?;
    let mc = lemma1_monte_carlo(args.groups, args.epsilon, args.delta, args.replications, seed).map_err(param)?;
    let sweep = lemma2_sweep(args.max_groups, args.max_k, args.grid_steps).map_err(param)?;
    let report = VerifyReport {
        groups: args.groups,
        epsilon: args.epsilon,
        delta: args.delta,
        seed,
        required_probes: k,
        replications: args.replications,
        hits: mc.hits,
        coverage: mc.coverage(),
        sweep_sequences: sweep.sequences_checked,
        sweep_premises_met: sweep.premises_met,
        sweep_counterexamples: sweep.counterexamples,
        sweep_passed: sweep.passed(),
    };
    println!("required probes: k = {k} (M = {}, epsilon = {}, delta = {})", args.groups, args.epsilon, args.delta);
    println!(
        "coverage: {}/{} = {:.4} (target {:.4})",
        report.hits,
        report.replications,
        report.coverage,
        1.0 - args.delta
    );
    println!(
        "window equivalence sweep: {} sequences, {} premises met, {} counterexamples: {}",
        report.sweep_sequences,
        report.sweep_premises_met,
        report.sweep_counterexamples,
        if report.sweep_passed { "PASS" } else { "FAIL" }
    );
    if ctx.wants(Format::Json) {
        write_json(ctx.create("verify.json")?, &report)?;
    }
    if ctx.wants(Format::Csv) {
        let mut w = csv::Writer::from_writer(ctx.create("verify.csv")?);
        w.serialize(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        w.flush()?;
    }
    if !report.sweep_passed {
        return Err(CliError::Runtime(format!("{} counterexamples found", report.sweep_counterexamples)));
    }
    Ok(())
}

pub fn replay_traces(trace: &Path, probe: &ProbeConfig, ctx: &Context) -> Result<Vec<ReplayOutcome>, CliError> {
    probe.validate().map_err(|e| ConfigError::within("probe", e))?;
    let f = File::open(trace).map_err(|e| CliError::Runtime(format!("{}: {e}", trace.display())))?;
    let traces = read_traces(BufReader::new(f))?;
    if traces.is_empty() {
        return Err(certaindex::Error::EmptyTrace.into());
    }
    let outcomes = traces
        .iter()
        .map(|(id, t)| replay(id, t, probe))
        .collect::<Result<Vec<_>, _>>()?;
    let mut table = Vec::new();
    write_savings_table(&mut table, &outcomes)?;
    io::stdout().write_all(&table)?;
    if ctx.wants(Format::Csv) {
        let mut w = ctx.create("savings.csv")?;
        w.write_all(&table)?;
        w.flush()?;
    }
    if ctx.wants(Format::Json) {
        write_json(ctx.create("savings.json")?, &outcomes)?;
    }
    Ok(outcomes)
}

pub struct GenTraceArgs {
    pub programs: usize,
    pub steps: u32,
    pub groups: usize,
    pub noise: f64,
    pub hesitation: f64,
    pub unsolvable: f64,
}

/// Writes `trace.jsonl`: probe answers of synthetic chains of thought that
/// settle on their answer at a random step.
pub fn gen_trace(args: &GenTraceArgs, probe: &ProbeConfig, ctx: &Context) -> Result<(), CliError> {
    if args.steps < 2 {
        return Err(CliError::Config("steps: must be at least 2".into()));
    }
    let workload = WorkloadConfig {
        archetype: Archetype::Cot,
        programs: args.programs,
        convergence: [1, args.steps - 1],
        convergence_cap_fraction: None,
        unsolvable_fraction: args.unsolvable,
        easy_knob: args.steps / 4,
        answer_process: AnswerProcess {
            groups: args.groups,
            noise: args.noise,
            residual_noise: 0.0,
            hesitation_rate: args.hesitation,
        },
        token_mean: probe.interval_tokens as f64,
        token_mean_sigma: 0.0,
        request_sigma: 0.0,
        depth: 1,
        reward_process: None,
        caps: vec![args.steps],
    };
    let specs = workload.generate(ctx.seed()).map_err(param)?;
    for s in &specs {
        s.validate().map_err(param)?;
    }
    let width = args.programs.saturating_sub(1).to_string().len().max(3);
    let traces = specs
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((format!("cot-{i:0width$}"), synthetic_cot_trace(s, probe, args.steps)?)))
        .collect::<Result<Vec<_>, certaindex::Error>>()?;
    let mut w = ctx.create("trace.jsonl")?;
    write_traces(&mut w, &traces)?;
    w.flush()?;
    println!("{} programs written to {}", traces.len(), ctx.out.join("trace.jsonl").display());
    Ok(())
}
