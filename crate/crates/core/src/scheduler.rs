//! Two-level scheduling of reasoning programs.
//!
//! The intra-program level decides, at each checkpoint of a program, whether
//! to grant it more knob units or stop it and aggregate. The inter-program
//! level orders ready requests for the backend: optionally keeping a
//! program's requests together (gang scheduling), ordering programs by
//! estimated remaining work, and escalating programs that have waited too
//! long.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{Signal, Threshold};
use crate::runtime::{ProgramStatus, ReasoningProgram, Request};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Every program runs to its cap.
    Even,
    /// Stops at the detect point when the program has already generated many
    /// tokens, a certaindex-free baseline.
    LengthProxy,
    /// One threshold test at the detect point.
    StaticThreshold,
    /// One test at the detect point; survivors get a curve-sized budget.
    InitialCurveFit,
    /// Threshold test at the detect point and every `recheck_every` units after.
    KStepThreshold,
    /// Threshold and curve re-evaluated at every recheck.
    DynamicCurveFit,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Even,
        PolicyKind::LengthProxy,
        PolicyKind::StaticThreshold,
        PolicyKind::InitialCurveFit,
        PolicyKind::KStepThreshold,
        PolicyKind::DynamicCurveFit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Even => "even",
            PolicyKind::LengthProxy => "length_proxy",
            PolicyKind::StaticThreshold => "static_threshold",
            PolicyKind::InitialCurveFit => "initial_curve_fit",
            PolicyKind::KStepThreshold => "k_step_threshold",
            PolicyKind::DynamicCurveFit => "dynamic_curve_fit",
        }
    }

    fn uses_curve(self) -> bool {
        matches!(self, PolicyKind::InitialCurveFit | PolicyKind::DynamicCurveFit)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid("kind", format!("unknown policy kind `{s}`")))
    }
}

/// Remaining-budget cap as a step function of certaindex.
///
/// Bucket `i` of `B` covers certaindex values in `[i/B, (i+1)/B)`, the last
/// bucket also taking 1.0. Budgets never increase with certaindex.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct Curve {
    budgets: Vec<u32>,
}

impl Curve {
    pub fn new(budgets: Vec<u32>) -> Result<Self> {
        if budgets.is_empty() {
            return Err(Error::Empty("curve"));
        }
        if let Some(i) = budgets.windows(2).position(|w| w[1] > w[0]) {
            return Err(invalid(
                "curve",
                format!("budget rises from {} to {} at bucket {}", budgets[i], budgets[i + 1], i + 1),
            ));
        }
        Ok(Self { budgets })
    }

    pub fn budgets(&self) -> &[u32] {
        &self.budgets
    }

    fn bucket(&self, certaindex: f64) -> usize {
        let b = self.budgets.len();
        ((certaindex.clamp(0.0, 1.0) * b as f64) as usize).min(b - 1)
    }

    pub fn budget_for(&self, certaindex: f64) -> u32 {
        self.budgets[self.bucket(certaindex)]
    }
}

impl TryFrom<Vec<u32>> for Curve {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Curve::new(v)
    }
}

impl From<Curve> for Vec<u32> {
    fn from(c: Curve) -> Self {
        c.budgets
    }
}

/// Nearest-rank percentile of an ascending slice: `sorted[ceil(p·N) - 1]`.
pub fn nearest_rank<T: Copy>(sorted: &[T], p: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Fits a curve from profiled `(certaindex, remaining knob units needed)`
/// points, taking the given quantile of each bucket.
///
/// Empty buckets borrow from the nearest lower bucket (the overall maximum
/// below the first populated one), then a running maximum from the top
/// makes the curve non-increasing.
pub fn fit_curve(points: &[(f64, u32)], buckets: usize, quantile: f64) -> Result<Curve> {
    if points.is_empty() {
        return Err(Error::Empty("curve profile"));
    }
    if buckets == 0 {
        return Err(invalid("buckets", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(invalid("quantile", format!("{quantile} is outside [0, 1]")));
    }
    let shape = Curve {
        budgets: vec![0; buckets],
    };
    let mut per: Vec<Vec<u32>> = vec![Vec::new(); buckets];
    for &(c, need) in points {
        per[shape.bucket(c)].push(need);
    }
    let overall = points.iter().map(|p| p.1).max().unwrap_or(0);
    let mut budgets = Vec::with_capacity(buckets);
    let mut carry = overall;
    for mut v in per {
        if !v.is_empty() {
            v.sort_unstable();
            carry = nearest_rank(&v, quantile).unwrap_or(overall);
        }
        budgets.push(carry);
    }
    for i in (0..buckets - 1).rev() {
        budgets[i] = budgets[i].max(budgets[i + 1]);
    }
    Curve::new(budgets)
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationPolicy {
    pub kind: PolicyKind,
    pub resource_cap: u32,
    #[serde(default = "one")]
    pub detect_at_knob: u32,
    #[serde(default)]
    pub thresholds: Vec<Threshold>,
    #[serde(default)]
    pub curve: Option<Curve>,
    #[serde(default = "one")]
    pub recheck_every: u32,
    /// Token count at which `length_proxy` stops a program.
    #[serde(default)]
    pub length_threshold: Option<u64>,
}

impl AllocationPolicy {
    pub fn even(resource_cap: u32) -> Self {
        Self {
            kind: PolicyKind::Even,
            resource_cap,
            detect_at_knob: 1,
            thresholds: Vec::new(),
            curve: None,
            recheck_every: 1,
            length_threshold: None,
        }
    }

    pub fn static_threshold(resource_cap: u32, detect_at_knob: u32, thresholds: Vec<Threshold>) -> Self {
        Self {
            kind: PolicyKind::StaticThreshold,
            detect_at_knob,
            thresholds,
            ..Self::even(resource_cap)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resource_cap == 0 {
            return Err(invalid("resource_cap", "must be at least 1"));
        }
        if self.detect_at_knob == 0 || self.detect_at_knob > self.resource_cap {
            return Err(invalid(
                "detect_at_knob",
                format!("{} is outside 1..={}", self.detect_at_knob, self.resource_cap),
            ));
        }
        if self.recheck_every == 0 {
            return Err(invalid("recheck_every", "must be at least 1"));
        }
        if self.kind.uses_curve() && self.curve.is_none() {
            return Err(invalid("curve", format!("{} needs a curve", self.kind)));
        }
        if matches!(self.kind, PolicyKind::StaticThreshold | PolicyKind::KStepThreshold)
            && self.thresholds.is_empty()
        {
            return Err(invalid("thresholds", format!("{} needs at least one threshold", self.kind)));
        }
        if self.kind == PolicyKind::LengthProxy && self.length_threshold.is_none() {
            return Err(invalid("length_threshold", "length_proxy needs a token threshold"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Grant(u32),
    Terminate,
}

/// Whether every threshold is met by the latest signals. A signal the
/// archetype never produces is a configuration error; one it produces but
/// has not yet (a chain-of-thought window that is not full) counts as unmet.
fn thresholds_met(program: &ReasoningProgram, thresholds: &[Threshold]) -> Result<bool> {
    if thresholds.is_empty() {
        return Ok(false);
    }
    let s = program.latest_signals().ok_or_else(|| stale(program))?;
    let mut all = true;
    for t in thresholds {
        all &= s.get(t.signal).is_some_and(|v| t.is_met(v));
    }
    Ok(all)
}

fn stale(program: &ReasoningProgram) -> Error {
    invalid(
        "certaindex",
        format!("program {} has no signals at knob {}", program.id, program.knob),
    )
}

fn check_signals(program: &ReasoningProgram, thresholds: &[Threshold]) -> Result<()> {
    let offered: &[Signal] = program.archetype.signals();
    match thresholds.iter().find(|t| !offered.contains(&t.signal)) {
        Some(t) => Err(Error::MissingSignal(t.signal)),
        None => Ok(()),
    }
}

/// The intra-program decision at a checkpoint. Callers update the
/// program's certaindex before asking.
pub fn allocate(program: &ReasoningProgram, policy: &AllocationPolicy) -> Result<Allocation> {
    if program.status == ProgramStatus::Terminated {
        return Err(Error::ProgramTerminated(program.id));
    }
    check_signals(program, &policy.thresholds)?;
    let cap = program.resource_cap;
    let knob = program.knob;
    if knob >= cap {
        return Ok(Allocation::Terminate);
    }
    let rest = cap - knob;
    let detect = policy.detect_at_knob.min(cap);
    if policy.kind == PolicyKind::Even {
        return Ok(Allocation::Grant(rest));
    }
    if knob < detect {
        return Ok(Allocation::Grant(detect - knob));
    }
    let met = || thresholds_met(program, &policy.thresholds);
    let curve_budget = || -> Result<u32> {
        let s = program.latest_signals().ok_or_else(|| stale(program))?;
        let c = s.get(program.archetype.certainty_signal()).unwrap_or(0.0);
        Ok(policy.curve.as_ref().map_or(rest, |curve| curve.budget_for(c)))
    };
    let decision = match policy.kind {
        PolicyKind::Even => unreachable!(),
        PolicyKind::LengthProxy => {
            let limit = policy.length_threshold.unwrap_or(u64::MAX);
            if knob == detect && program.tokens_used >= limit {
                Allocation::Terminate
            } else {
                Allocation::Grant(rest)
            }
        }
        PolicyKind::StaticThreshold => {
            if knob == detect && met()? {
                Allocation::Terminate
            } else {
                Allocation::Grant(rest)
            }
        }
        PolicyKind::KStepThreshold => {
            if met()? {
                Allocation::Terminate
            } else {
                Allocation::Grant(policy.recheck_every.min(rest))
            }
        }
        PolicyKind::InitialCurveFit => {
            if knob > detect || met()? {
                Allocation::Terminate
            } else {
                match curve_budget()?.min(rest) {
                    0 => Allocation::Terminate,
                    b => Allocation::Grant(b),
                }
            }
        }
        PolicyKind::DynamicCurveFit => {
            if met()? {
                Allocation::Terminate
            } else {
                match curve_budget()?.min(rest) {
                    0 => Allocation::Terminate,
                    b => Allocation::Grant(b.min(policy.recheck_every)),
                }
            }
        }
    };
    Ok(decision)
}

/// One profiled check point: the certaindex seen there and what stopping
/// there would have meant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub certaindex: f64,
    pub correct_if_stopped: bool,
    pub correct_if_full: bool,
    pub tokens_saved: u64,
}

impl CalibrationRow {
    fn harmful(&self) -> bool {
        self.correct_if_full && !self.correct_if_stopped
    }
}

pub const CALIBRATION_COLUMNS: [&str; 4] = ["certaindex", "correct_if_stopped", "correct_if_full", "tokens_saved"];

pub fn read_calibration_csv<R: Read>(reader: R) -> Result<Vec<CalibrationRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in CALIBRATION_COLUMNS {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(invalid("calibration csv", format!("missing column `{col}`")));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<CalibrationRow>().enumerate() {
        rows.push(rec.map_err(|e| invalid("calibration csv", format!("row {}: {e}", i + 1)))?);
    }
    Ok(rows)
}

pub fn write_calibration_csv<W: Write>(writer: W, rows: &[CalibrationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Stop when certaindex is at or above this value.
    pub threshold: f64,
    /// Set when no observed cutoff is safe; `threshold` then exceeds every
    /// observed certaindex.
    pub disabled: bool,
    pub stopped: usize,
    /// Stopped runs that were correct at full budget but not when stopped.
    pub harmful: usize,
    /// Net change in accuracy over the calibration set from stopping.
    pub accuracy_delta: f64,
    pub tokens_saved: u64,
}

/// Picks the most aggressive cutoff among the observed certaindex values
/// such that the fraction of runs turned from correct to incorrect by
/// stopping stays within `accuracy_tolerance`.
pub fn calibrate_threshold(rows: &[CalibrationRow], accuracy_tolerance: f64) -> Result<Calibration> {
    if rows.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    if !(0.0..=1.0).contains(&accuracy_tolerance) {
        return Err(invalid("accuracy_tolerance", format!("{accuracy_tolerance} is outside [0, 1]")));
    }
    if let Some(r) = rows.iter().find(|r| !r.certaindex.is_finite()) {
        return Err(invalid("certaindex", format!("{} is not finite", r.certaindex)));
    }
    let n = rows.len() as f64;
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| a.certaindex.total_cmp(&b.certaindex));
    // Harmful stops among rows at or above each position.
    let mut harmful_above = vec![0usize; sorted.len() + 1];
    for i in (0..sorted.len()).rev() {
        harmful_above[i] = harmful_above[i + 1] + sorted[i].harmful() as usize;
    }
    let summary = |start: usize, threshold: f64, disabled: bool| {
        let stopped = &sorted[start..];
        let delta: i64 = stopped
            .iter()
            .map(|r| r.correct_if_stopped as i64 - r.correct_if_full as i64)
            .sum();
        Calibration {
            threshold,
            disabled,
            stopped: stopped.len(),
            harmful: harmful_above[start],
            accuracy_delta: delta as f64 / n,
            tokens_saved: stopped.iter().map(|r| r.tokens_saved).sum(),
        }
    };
    let mut i = 0;
    while i < sorted.len() {
        let c = sorted[i].certaindex;
        if harmful_above[i] as f64 / n <= accuracy_tolerance + 1e-12 {
            return Ok(summary(i, c, false));
        }
        while i < sorted.len() && sorted[i].certaindex == c {
            i += 1;
        }
    }
    let max = sorted[sorted.len() - 1].certaindex;
    Ok(summary(sorted.len(), max + 1.0, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterOrder {
    Fifo,
    SjfEstimated,
    /// Favours programs already being served, then arrival order; stands in
    /// for a prefix-locality scheduler.
    LpmLikeBaseline,
}

impl InterOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            InterOrder::Fifo => "fifo",
            InterOrder::SjfEstimated => "sjf_estimated",
            InterOrder::LpmLikeBaseline => "lpm_like_baseline",
        }
    }
}

impl FromStr for InterOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [InterOrder::Fifo, InterOrder::SjfEstimated, InterOrder::LpmLikeBaseline]
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| invalid("order", format!("unknown inter-program order `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterSchedPolicy {
    pub gang: bool,
    pub order: InterOrder,
    /// Wait after which a program is escalated; `None` disables escalation.
    #[serde(default)]
    pub starvation_limit: Option<f64>,
    pub batch_capacity: usize,
}

impl InterSchedPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.batch_capacity == 0 {
            return Err(invalid("batch_capacity", "must be at least 1"));
        }
        if let Some(l) = self.starvation_limit {
            if !(l > 0.0) {
                return Err(invalid("starvation_limit", format!("{l} must be positive")));
            }
        }
        Ok(())
    }
}

/// How SJF estimates a program's tokens per knob unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimator {
    /// Mean of the program's completed units, `prior` before any completes.
    Historical { prior: f64 },
    /// The generator's exact expectation, for oracle comparisons.
    Oracle,
}

/// Arithmetic mean of completed iteration token counts, or `prior`.
pub fn estimate_iteration_tokens(history: &[u64], prior: f64) -> f64 {
    if history.is_empty() {
        prior
    } else {
        history.iter().sum::<u64>() as f64 / history.len() as f64
    }
}

/// What the inter-program scheduler knows about a program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgramView {
    pub arrival: f64,
    /// Start time of the program's most recent request.
    pub last_service: Option<f64>,
    /// Estimated tokens still to generate.
    pub remaining_work: f64,
}

impl ProgramView {
    pub fn wait(&self, now: f64) -> f64 {
        now - self.last_service.unwrap_or(self.arrival)
    }
}

/// Programs whose wait is at least `limit`.
pub fn escalate(waiting: &[(u64, f64)], limit: f64) -> BTreeSet<u64> {
    waiting
        .iter()
        .filter(|(_, wait)| *wait >= limit)
        .map(|(id, _)| *id)
        .collect()
}

/// Sort key of a program under the inter-program policy, lower first.
fn program_key(view: &ProgramView, order: InterOrder, escalated: bool) -> [f64; 3] {
    if escalated {
        return [0.0, view.arrival, 0.0];
    }
    match order {
        InterOrder::Fifo => [1.0, view.arrival, 0.0],
        InterOrder::SjfEstimated => [1.0, view.remaining_work, view.arrival],
        InterOrder::LpmLikeBaseline => [1.0, view.last_service.is_none() as u8 as f64, view.arrival],
    }
}

fn cmp_keys(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Orders ready requests and returns at most `batch_capacity` of them.
///
/// With gang scheduling the requests of a program stay together, programs
/// ordered by (escalation, policy key, arrival, id) and requests within a
/// program by branch. Without it each request is ordered on its own by
/// (escalation, issue time, branch, policy key, arrival, id), which
/// interleaves programs.
pub fn next_batch(
    ready: &[Request],
    programs: &BTreeMap<u64, ProgramView>,
    policy: &InterSchedPolicy,
    now: f64,
) -> Vec<Request> {
    let escalated = match policy.starvation_limit {
        Some(limit) => {
            let mut waiting: Vec<(u64, f64)> = ready
                .iter()
                .filter_map(|r| programs.get(&r.program_id).map(|v| (r.program_id, v.wait(now))))
                .collect();
            waiting.dedup_by_key(|w| w.0);
            escalate(&waiting, limit)
        }
        None => BTreeSet::new(),
    };
    let fallback = ProgramView {
        arrival: f64::INFINITY,
        last_service: None,
        remaining_work: f64::INFINITY,
    };
    let view = |id: u64| programs.get(&id).copied().unwrap_or(fallback);
    let key = |r: &Request| {
        let v = view(r.program_id);
        let esc = escalated.contains(&r.program_id);
        (program_key(&v, policy.order, esc), v.arrival)
    };

    let mut sorted: Vec<&Request> = ready.iter().collect();
    if policy.gang {
        sorted.sort_by(|a, b| {
            let (ka, arr_a) = key(a);
            let (kb, arr_b) = key(b);
            cmp_keys(&ka, &kb)
                .then(arr_a.total_cmp(&arr_b))
                .then(a.program_id.cmp(&b.program_id))
                .then(a.branch_id.cmp(&b.branch_id))
        });
    } else {
        sorted.sort_by(|a, b| {
            let (ka, arr_a) = key(a);
            let (kb, arr_b) = key(b);
            let esc = |k: &[f64; 3]| (k[0], if k[0] == 0.0 { k[1] } else { 0.0 });
            let (ea, eb) = (esc(&ka), esc(&kb));
            ea.0.total_cmp(&eb.0)
                .then(ea.1.total_cmp(&eb.1))
                .then(a.issued_at.total_cmp(&b.issued_at))
                .then(a.branch_id.cmp(&b.branch_id))
                .then(cmp_keys(&ka, &kb))
                .then(arr_a.total_cmp(&arr_b))
                .then(a.program_id.cmp(&b.program_id))
        });
    }
    sorted
        .into_iter()
        .take(policy.batch_capacity)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessRecord {
    pub program_id: u64,
    pub finish_time_shared: f64,
    pub output_tokens: u64,
}

impl FairnessRecord {
    pub fn new(program_id: u64, finish_time_shared: f64, output_tokens: u64) -> Result<Self> {
        if output_tokens == 0 {
            return Err(Error::ZeroTokenCount(program_id as usize));
        }
        if !(finish_time_shared >= 0.0) {
            return Err(invalid("finish_time_shared", format!("{finish_time_shared} is negative")));
        }
        Ok(Self {
            program_id,
            finish_time_shared,
            output_tokens,
        })
    }

    /// Finish-time fairness: shared completion time per output token.
    pub fn phi(&self) -> f64 {
        self.finish_time_shared / self.output_tokens as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessSummary {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
}

pub fn fairness_report(records: &[FairnessRecord]) -> Result<FairnessSummary> {
    if records.is_empty() {
        return Err(Error::Empty("fairness records"));
    }
    let mut phi: Vec<f64> = records.iter().map(FairnessRecord::phi).collect();
    phi.sort_by(f64::total_cmp);
    let at = |p| nearest_rank(&phi, p).expect("non-empty");
    Ok(FairnessSummary {
        count: phi.len(),
        mean: phi.iter().sum::<f64>() / phi.len() as f64,
        p50: at(0.5),
        p90: at(0.9),
        p99: at(0.99),
        min: phi[0],
        max: phi[phi.len() - 1],
    })
}
