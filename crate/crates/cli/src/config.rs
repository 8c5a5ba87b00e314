//! Experiment configuration files.
//!
//! An experiment is one TOML document. The simulator settings live in named
//! sections and the `[sweep]` section lists the axes whose product forms the
//! grid of runs.

use std::fmt;
use std::path::{Path, PathBuf};

use certaindex::metrics::{Signal, Threshold};
use certaindex::probe::{read_traces, ProbeConfig};
use certaindex::runtime::{SyntheticProgramSpec, WorkloadConfig};
use certaindex::scheduler::{AllocationPolicy, Curve, Estimator, InterSchedPolicy, PolicyKind};
use certaindex::sim::{Arrival, CalibrationPlan, ProgramSource, SimConfig};
use serde::{Deserialize, Serialize};

/// A configuration problem, located by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Re-homes a library validation error under a config section.
    pub fn within(section: &str, err: certaindex::Error) -> Self {
        match err {
            certaindex::Error::InvalidParameter { name, reason } => Self::new(format!("{section}.{name}"), reason),
            other => Self::new(section, other.to_string()),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub sim: SimSection,
    pub arrival: Arrival,
    #[serde(default)]
    pub workload: Option<WorkloadConfig>,
    #[serde(default)]
    pub trace: Option<TraceSection>,
    pub allocation: AllocationSection,
    #[serde(default)]
    pub calibration: Option<CalibrationSection>,
    pub inter: InterSchedPolicy,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub sweep: Sweep,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_estimator() -> Estimator {
    Estimator::Historical { prior: 256.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub token_rate: f64,
    pub base_deadline: f64,
    #[serde(default = "one_f64")]
    pub slo_scale: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub record_events: bool,
}

fn one_f64() -> f64 {
    1.0
}

fn default_horizon() -> f64 {
    1e9
}

/// Replays recorded probe traces instead of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
}

/// Policy settings shared by every grid point. The policy kind and the cap
/// come from the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationSection {
    pub resource_cap: u32,
    #[serde(default = "one_u32")]
    pub detect_at_knob: u32,
    #[serde(default = "one_u32")]
    pub recheck_every: u32,
    #[serde(default)]
    pub thresholds: Vec<Threshold>,
    #[serde(default)]
    pub curve: Option<Curve>,
    #[serde(default)]
    pub length_threshold: Option<u64>,
}

fn one_u32() -> u32 {
    1
}

/// Profile a held-out draw of the workload and derive thresholds and curves
/// from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "default_profile_programs")]
    pub programs: usize,
    /// Seed of the held-out draw; defaults to the experiment seed plus one.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_signal")]
    pub signal: Signal,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default = "default_buckets")]
    pub buckets: usize,
    #[serde(default = "one_f64")]
    pub quantile: f64,
}

fn default_profile_programs() -> usize {
    500
}

fn default_signal() -> Signal {
    Signal::Entropy
}

fn default_buckets() -> usize {
    10
}

/// Sweep axes. An omitted axis takes the single value from its section; a
/// present axis must list at least one value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub rates: Option<Vec<f64>>,
    #[serde(default)]
    pub slo_scales: Option<Vec<f64>>,
    #[serde(default)]
    pub caps: Option<Vec<u32>>,
    /// Policy kinds by name; checked by [`ExperimentConfig::grid`] so that an
    /// unknown name is reported with its position.
    pub policies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "both_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            formats: both_formats(),
        }
    }
}

fn both_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

/// One run of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub index: usize,
    pub policy: PolicyKind,
    pub rate: Option<f64>,
    pub slo_scale: f64,
    pub cap: u32,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(t) = &mut cfg.trace {
            if t.path.is_relative() {
                if let Some(dir) = path.parent() {
                    t.path = dir.join(&t.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::new("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.workload, &self.trace) {
            (Some(_), Some(_)) => return Err(ConfigError::new("trace", "give either [workload] or [trace], not both")),
            (None, None) => return Err(ConfigError::new("workload", "one of [workload] or [trace] is required")),
            (Some(w), None) => w.validate().map_err(|e| ConfigError::within("workload", e))?,
            (None, Some(_)) => {}
        }
        self.inter.validate().map_err(|e| ConfigError::within("inter", e))?;
        self.probe.validate().map_err(|e| ConfigError::within("probe", e))?;
        if let Some(c) = &self.calibration {
            if self.workload.is_none() {
                return Err(ConfigError::new("calibration", "profiling needs a synthetic [workload]"));
            }
            if !self.allocation.thresholds.is_empty() || self.allocation.curve.is_some() {
                return Err(ConfigError::new(
                    "allocation.thresholds",
                    "set thresholds and curve by hand or through [calibration], not both",
                ));
            }
            if c.programs == 0 {
                return Err(ConfigError::new("calibration.programs", "must be at least 1"));
            }
            if !(0.0..=1.0).contains(&c.tolerance) {
                return Err(ConfigError::new("calibration.tolerance", "must lie in [0, 1]"));
            }
            if c.buckets == 0 {
                return Err(ConfigError::new("calibration.buckets", "must be at least 1"));
            }
            if !(c.quantile > 0.0 && c.quantile <= 1.0) {
                return Err(ConfigError::new("calibration.quantile", "must lie in (0, 1]"));
            }
        }
        if let Some(rates) = &self.sweep.rates {
            if !matches!(self.arrival, Arrival::Poisson { .. }) {
                return Err(ConfigError::new("sweep.rates", "a rate sweep needs a poisson arrival"));
            }
            non_empty("sweep.rates", rates)?;
            if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
                return Err(ConfigError::new("sweep.rates", format!("{r} must be positive")));
            }
        }
        if let Some(scales) = &self.sweep.slo_scales {
            non_empty("sweep.slo_scales", scales)?;
            if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                return Err(ConfigError::new("sweep.slo_scales", format!("{s} must be positive")));
            }
        }
        if let Some(caps) = &self.sweep.caps {
            non_empty("sweep.caps", caps)?;
        }
        non_empty("sweep.policies", &self.sweep.policies)?;
        if self.output.formats.is_empty() {
            return Err(ConfigError::new("output.formats", "name at least one format"));
        }
        let grid = self.grid()?;
        // Building every point's simulator settings surfaces range errors
        // before any run starts. Profiled policies are checked once built.
        for p in &grid {
            let mut sim = self.sim_config(p, Vec::new(), self.allocation_for(p));
            if self.calibration.is_some() && p.policy != PolicyKind::Even {
                sim.allocation = AllocationPolicy::even(p.cap);
            }
            sim.validate().map_err(|e| match e {
                certaindex::Error::InvalidParameter { name, reason } => ConfigError::new(sim_field(name), reason),
                other => ConfigError::new("config", other.to_string()),
            })?;
        }
        Ok(())
    }

    /// The grid in row-major order: policies, then caps, then rates, then
    /// SLO scales.
    pub fn grid(&self) -> Result<Vec<GridPoint>, ConfigError> {
        let policies = self
            .sweep
            .policies
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<PolicyKind>().map_err(|_| {
                    let known: Vec<&str> = PolicyKind::ALL.iter().map(|k| k.as_str()).collect();
                    ConfigError::new(
                        format!("sweep.policies[{i}]"),
                        format!("unknown policy kind `{s}`; expected one of {}", known.join(", ")),
                    )
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let caps = self.sweep.caps.clone().unwrap_or_else(|| vec![self.allocation.resource_cap]);
        let rates: Vec<Option<f64>> = match &self.sweep.rates {
            Some(r) => r.iter().copied().map(Some).collect(),
            None => vec![None],
        };
        let scales = self.sweep.slo_scales.clone().unwrap_or_else(|| vec![self.sim.slo_scale]);
        let mut out = Vec::new();
        for &policy in &policies {
            for &cap in &caps {
                for &rate in &rates {
                    for &slo_scale in &scales {
                        out.push(GridPoint {
                            index: out.len(),
                            policy,
                            rate,
                            slo_scale,
                            cap,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// The policy at a grid point from the hand-written settings.
    pub fn allocation_for(&self, p: &GridPoint) -> AllocationPolicy {
        let a = &self.allocation;
        AllocationPolicy {
            kind: p.policy,
            resource_cap: p.cap,
            detect_at_knob: a.detect_at_knob.min(p.cap),
            thresholds: a.thresholds.clone(),
            curve: a.curve.clone(),
            recheck_every: a.recheck_every,
            length_threshold: a.length_threshold,
        }
    }

    pub fn calibration_plan(&self, cap: u32) -> Option<CalibrationPlan> {
        self.calibration.as_ref().map(|c| CalibrationPlan {
            resource_cap: cap,
            detect_at_knob: self.allocation.detect_at_knob.min(cap),
            recheck_every: self.allocation.recheck_every,
            signal: c.signal,
            tolerance: c.tolerance,
            curve_buckets: c.buckets,
            curve_quantile: c.quantile,
        })
    }

    pub fn sim_config(&self, p: &GridPoint, workload: Vec<ProgramSource>, allocation: AllocationPolicy) -> SimConfig {
        let arrival = match (&self.arrival, p.rate) {
            (Arrival::Poisson { .. }, Some(rate)) => Arrival::Poisson { rate },
            (a, _) => a.clone(),
        };
        SimConfig {
            seed: self.seed,
            arrival,
            token_rate: self.sim.token_rate,
            workload,
            slo_scale: p.slo_scale,
            base_deadline: self.sim.base_deadline,
            allocation,
            inter: self.inter.clone(),
            estimator: self.estimator,
            probe: self.probe.clone(),
            horizon: self.sim.horizon,
            record_events: self.sim.record_events,
        }
    }

    /// The held-out draw profiled for calibration, if calibration is set up.
    pub fn profile_workload(&self) -> Option<Result<Vec<SyntheticProgramSpec>, certaindex::Error>> {
        let (w, c) = (self.workload.as_ref()?, self.calibration.as_ref()?);
        let held_out = WorkloadConfig {
            programs: c.programs,
            ..w.clone()
        };
        Some(held_out.generate(c.seed.unwrap_or(self.seed.wrapping_add(1))))
    }

    /// Programs of the experiment. Synthetic workloads are drawn from the
    /// experiment seed, so every grid point sees the same programs.
    pub fn workload(&self) -> Result<Vec<ProgramSource>, certaindex::Error> {
        if let Some(w) = &self.workload {
            return Ok(w.generate(self.seed)?.into_iter().map(ProgramSource::Synthetic).collect());
        }
        let trace = self.trace.as_ref().expect("validated: workload or trace");
        let file = std::fs::File::open(&trace.path)?;
        let traces = read_traces(std::io::BufReader::new(file))?;
        if traces.is_empty() {
            return Err(certaindex::Error::EmptyTrace);
        }
        Ok(traces
            .into_iter()
            .map(|(name, trace)| ProgramSource::Trace { name, trace })
            .collect())
    }
}

fn non_empty<T>(field: &str, v: &[T]) -> Result<(), ConfigError> {
    if v.is_empty() {
        Err(ConfigError::new(field, "must list at least one value"))
    } else {
        Ok(())
    }
}

/// Maps a simulator field name back to where it is written in the file.
fn sim_field(name: &str) -> String {
    match name {
        "token_rate" | "slo_scale" | "horizon" => format!("sim.{name}"),
        n if n.starts_with("arrival") || n.starts_with("estimator") => n.to_string(),
        n => format!("allocation.{n}"),
    }
}
