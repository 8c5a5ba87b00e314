//! Discrete-event simulation of a batched serving backend.
//!
//! The backend has `batch_capacity` slots; a request holds one slot for
//! `tokens / token_rate` seconds. Programs arrive (Poisson or at fixed
//! times), are expanded by the allocation policy at every checkpoint, and
//! their requests are ordered by the inter-program policy whenever a slot
//! frees up or a program arrives. Everything that happens at the same
//! instant is processed before the scheduler runs, so simultaneous arrivals
//! compete fairly.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{Signal, SignalVector, Threshold};
use crate::probe::{ProbeConfig, ProbeTrace};
use crate::runtime::{Archetype, ReasoningProgram, Request, SyntheticProgramSpec};
use crate::scheduler::{
    allocate, calibrate_threshold, estimate_iteration_tokens, fairness_report, fit_curve, nearest_rank,
    next_batch, Allocation, AllocationPolicy, Calibration, CalibrationRow, Curve, Estimator, FairnessRecord,
    FairnessSummary, InterSchedPolicy, PolicyKind, ProgramView,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Arrival {
    /// Programs per second. Inter-arrival gaps are unit exponentials scaled by
    /// `1 / rate`, so runs that differ only in rate see the same gaps
    /// stretched or squeezed.
    Poisson { rate: f64 },
    /// Program `i` arrives at `times[i]`.
    Fixed { times: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramSource {
    Synthetic(SyntheticProgramSpec),
    Trace { name: String, trace: ProbeTrace },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub arrival: Arrival,
    /// Tokens per second generated by one slot.
    pub token_rate: f64,
    pub workload: Vec<ProgramSource>,
    pub slo_scale: f64,
    pub base_deadline: f64,
    pub allocation: AllocationPolicy,
    /// Also carries the backend's slot count.
    pub inter: InterSchedPolicy,
    pub estimator: Estimator,
    pub probe: ProbeConfig,
    pub horizon: f64,
    /// Keep the full event log in the report.
    #[serde(default)]
    pub record_events: bool,
}

impl SimConfig {
    pub fn batch_capacity(&self) -> usize {
        self.inter.batch_capacity
    }

    pub fn validate(&self) -> Result<()> {
        match &self.arrival {
            Arrival::Poisson { rate } if !(rate.is_finite() && *rate > 0.0) => {
                return Err(invalid("arrival.rate", format!("{rate} must be positive")));
            }
            Arrival::Fixed { times } => {
                if times.len() < self.workload.len() {
                    return Err(invalid(
                        "arrival.times",
                        format!("{} times for {} programs", times.len(), self.workload.len()),
                    ));
                }
                if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
                    return Err(invalid("arrival.times", "times must be finite and non-negative"));
                }
            }
            _ => {}
        }
        if !(self.token_rate.is_finite() && self.token_rate > 0.0) {
            return Err(invalid("token_rate", "must be positive"));
        }
        if !(self.slo_scale > 0.0 && self.base_deadline > 0.0) {
            return Err(invalid("slo_scale", "deadline scale and base must be positive"));
        }
        if !(self.horizon > 0.0) {
            return Err(invalid("horizon", "must be positive"));
        }
        if let Estimator::Historical { prior } = self.estimator {
            if !(prior.is_finite() && prior > 0.0) {
                return Err(invalid("estimator.prior", "must be positive"));
            }
        }
        self.allocation.validate()?;
        self.inter.validate()?;
        self.probe.validate()?;
        for source in &self.workload {
            if let ProgramSource::Synthetic(s) = source {
                s.validate()?;
            }
        }
        Ok(())
    }

    fn arrival_times(&self) -> Vec<f64> {
        match &self.arrival {
            Arrival::Fixed { times } => times[..self.workload.len()].to_vec(),
            Arrival::Poisson { rate } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut t = 0.0;
                (0..self.workload.len())
                    .map(|_| {
                        let u: f64 = rng.random();
                        t += -(1.0 - u).ln() / rate;
                        t
                    })
                    .collect()
            }
        }
    }
}

/// Deadline of a program: SLO scale × difficulty × base deadline.
pub fn deadline_for(difficulty_factor: u8, slo_scale: f64, base_deadline: f64) -> f64 {
    slo_scale * difficulty_factor as f64 * base_deadline
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestComplete,
    ProgramTerminate,
    ProbePoint,
    Arrival,
    RequestStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: f64,
    pub kind: EventKind,
    pub program_id: u64,
    /// Branch of the request, for request events.
    pub branch_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramRow {
    pub id: String,
    pub archetype: Archetype,
    pub arrival: f64,
    /// Completion minus arrival; for truncated programs, horizon minus arrival.
    pub latency: f64,
    pub deadline: f64,
    pub met: bool,
    pub tokens: u64,
    pub correct: Option<bool>,
    pub phi: Option<f64>,
    pub knob: u32,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub programs: usize,
    pub completed: usize,
    pub truncated: usize,
    /// Over completed programs.
    pub mean_latency: Option<f64>,
    pub p90_latency: Option<f64>,
    /// Fraction of all programs that finished within their deadline.
    pub attainment: Option<f64>,
    pub total_tokens: u64,
    /// Correct programs over programs with known ground truth; truncated
    /// programs count as incorrect.
    pub accuracy: Option<f64>,
    pub fairness: Option<FairnessSummary>,
    pub throughput: f64,
    pub makespan: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub programs: Vec<ProgramRow>,
    pub aggregates: Aggregates,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<SimEvent>,
}

pub const PROGRAM_CSV_HEADER: &str = "id,archetype,arrival,latency,deadline,met,tokens,correct,phi";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SimReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{PROGRAM_CSV_HEADER}")?;
        for p in &self.programs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                p.id,
                p.archetype,
                p.arrival,
                p.latency,
                p.deadline,
                p.met,
                p.tokens,
                opt(p.correct),
                opt(p.phi)
            )?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.aggregates)?;
        Ok(())
    }
}

/// Fraction of programs that met their deadline.
pub fn attainment(report: &SimReport) -> Result<f64> {
    report.aggregates.attainment.ok_or(Error::Empty("report"))
}

/// One `(total tokens, accuracy)` point per report, sorted by tokens.
pub fn token_accuracy_curve(reports: &[SimReport]) -> Result<Vec<(u64, f64)>> {
    if reports.is_empty() {
        return Err(Error::Empty("report list"));
    }
    let mut pts = reports
        .iter()
        .map(|r| {
            r.aggregates
                .accuracy
                .map(|a| (r.aggregates.total_tokens, a))
                .ok_or_else(|| invalid("accuracy", "a report has no ground truth"))
        })
        .collect::<Result<Vec<_>>>()?;
    pts.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key {
    time: f64,
    rank: EventKind,
    seq: u64,
}

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.rank.cmp(&other.rank))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Pending {
    Arrival(usize),
    Complete(Request),
}

struct Live {
    program: ReasoningProgram,
    arrival: f64,
    deadline: f64,
    stages: VecDeque<Vec<Request>>,
    outstanding: usize,
    last_service: Option<f64>,
    finished: Option<f64>,
    unit_estimate: Option<f64>,
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    queue: BinaryHeap<Reverse<(Key, usize)>>,
    payloads: Vec<Option<Pending>>,
    seq: u64,
    live: Vec<Option<Live>>,
    ready: Vec<Request>,
    running: usize,
    events: Vec<SimEvent>,
    last_completion: f64,
}

impl<'a> Sim<'a> {
    fn push(&mut self, time: f64, rank: EventKind, payload: Pending) {
        let slot = self.payloads.len();
        self.payloads.push(Some(payload));
        self.queue.push(Reverse((
            Key {
                time,
                rank,
                seq: self.seq,
            },
            slot,
        )));
        self.seq += 1;
    }

    fn log(&mut self, time: f64, kind: EventKind, program_id: u64, branch_id: Option<u64>) {
        if self.cfg.record_events {
            self.events.push(SimEvent {
                time,
                kind,
                program_id,
                branch_id,
            });
        }
    }

    fn build(&self, i: usize) -> Result<ReasoningProgram> {
        let cap = self.cfg.allocation.resource_cap;
        match &self.cfg.workload[i] {
            ProgramSource::Synthetic(spec) => {
                ReasoningProgram::synthetic(i as u64, spec.clone(), cap, self.cfg.probe.clone())
            }
            ProgramSource::Trace { name, trace } => {
                ReasoningProgram::from_trace(i as u64, name.clone(), trace, self.cfg.probe.clone())
            }
        }
    }

    fn arrive(&mut self, i: usize, now: f64) -> Result<()> {
        let program = self.build(i)?;
        let difficulty = program.spec().map_or(2, |s| s.difficulty_factor);
        let unit_estimate = match self.cfg.estimator {
            Estimator::Oracle => Some(match program.spec() {
                Some(s) => s.expected_unit_tokens(&self.cfg.probe),
                None => match &self.cfg.workload[i] {
                    ProgramSource::Trace { trace, .. } => {
                        trace.records.last().map_or(0, |r| r.token_offset) as f64 / trace.len() as f64
                    }
                    ProgramSource::Synthetic(_) => unreachable!(),
                },
            }),
            Estimator::Historical { .. } => None,
        };
        self.log(now, EventKind::Arrival, i as u64, None);
        self.live[i] = Some(Live {
            program,
            arrival: now,
            deadline: deadline_for(difficulty, self.cfg.slo_scale, self.cfg.base_deadline),
            stages: VecDeque::new(),
            outstanding: 0,
            last_service: None,
            finished: None,
            unit_estimate,
        });
        self.checkpoint(i, now)
    }

    fn checkpoint(&mut self, i: usize, now: f64) -> Result<()> {
        let live = self.live[i].as_mut().expect("live program");
        if live.program.knob > 0 {
            live.program.update_certaindex()?;
        }
        let decision = allocate(&live.program, &self.cfg.allocation)?;
        let id = live.program.id;
        match decision {
            Allocation::Grant(g) => {
                let expansion = live.program.expand(g, now)?;
                live.stages = expansion.stages.into();
                self.log(now, EventKind::ProbePoint, id, None);
                self.release(i, now);
            }
            Allocation::Terminate => {
                live.program.terminate();
                live.finished = Some(now);
                self.log(now, EventKind::ProgramTerminate, id, None);
            }
        }
        Ok(())
    }

    fn release(&mut self, i: usize, now: f64) {
        let live = self.live[i].as_mut().expect("live program");
        let mut stage = live.stages.pop_front().unwrap_or_default();
        live.outstanding = stage.len();
        for r in &mut stage {
            r.issued_at = now;
        }
        self.ready.extend(stage);
    }

    fn complete(&mut self, mut req: Request, now: f64) -> Result<()> {
        self.running -= 1;
        self.last_completion = self.last_completion.max(now);
        req.completed_at = Some(now);
        let i = req.program_id as usize;
        self.log(now, EventKind::RequestComplete, req.program_id, Some(req.branch_id));
        let live = self.live[i].as_mut().expect("live program");
        live.program.complete_request(&req)?;
        live.outstanding -= 1;
        if live.outstanding == 0 {
            if live.stages.is_empty() {
                self.checkpoint(i, now)?;
            } else {
                self.release(i, now);
            }
        }
        Ok(())
    }

    fn view(&self, live: &Live) -> ProgramView {
        let p = &live.program;
        let per_unit = live.unit_estimate.unwrap_or_else(|| {
            let prior = match self.cfg.estimator {
                Estimator::Historical { prior } => prior,
                Estimator::Oracle => 0.0,
            };
            estimate_iteration_tokens(&p.completed_unit_tokens(), prior)
        });
        ProgramView {
            arrival: live.arrival,
            last_service: live.last_service,
            remaining_work: per_unit * p.resource_cap.saturating_sub(p.completed_units()) as f64,
        }
    }

    fn schedule(&mut self, now: f64) {
        let free = self.cfg.batch_capacity() - self.running;
        if free == 0 || self.ready.is_empty() {
            return;
        }
        let mut views = BTreeMap::new();
        for r in &self.ready {
            views.entry(r.program_id).or_insert_with(|| {
                self.view(self.live[r.program_id as usize].as_ref().expect("live program"))
            });
        }
        let batch = next_batch(&self.ready, &views, &self.cfg.inter, now);
        for req in batch.into_iter().take(free) {
            let pos = self
                .ready
                .iter()
                .position(|r| r.program_id == req.program_id && r.branch_id == req.branch_id)
                .expect("batch drawn from ready");
            self.ready.remove(pos);
            let live = self.live[req.program_id as usize].as_mut().expect("live program");
            live.last_service = Some(now);
            self.running += 1;
            self.log(now, EventKind::RequestStart, req.program_id, Some(req.branch_id));
            let done = now + req.tokens as f64 / self.cfg.token_rate;
            self.push(done, EventKind::RequestComplete, Pending::Complete(req));
        }
        debug_assert!(self.ready.is_empty() || self.running == self.cfg.batch_capacity());
    }

    fn pop(&mut self) -> Option<(f64, Pending)> {
        let Reverse((key, slot)) = self.queue.pop()?;
        Some((key.time, self.payloads[slot].take().expect("event consumed once")))
    }

    fn peek_time(&self) -> Option<f64> {
        self.queue.peek().map(|Reverse((k, _))| k.time)
    }
}

/// Runs one simulation. Identical configurations give identical reports.
pub fn run(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let arrivals = cfg.arrival_times();
    let mut sim = Sim {
        cfg,
        queue: BinaryHeap::new(),
        payloads: Vec::new(),
        seq: 0,
        live: (0..cfg.workload.len()).map(|_| None).collect(),
        ready: Vec::new(),
        running: 0,
        events: Vec::new(),
        last_completion: 0.0,
    };
    for (i, &t) in arrivals.iter().enumerate() {
        sim.push(t, EventKind::Arrival, Pending::Arrival(i));
    }
    while let Some(now) = sim.peek_time() {
        if now > cfg.horizon {
            break;
        }
        while sim.peek_time() == Some(now) {
            match sim.pop().expect("peeked") {
                (_, Pending::Arrival(i)) => sim.arrive(i, now)?,
                (_, Pending::Complete(req)) => sim.complete(req, now)?,
            }
        }
        sim.schedule(now);
    }

    let mut rows = Vec::with_capacity(cfg.workload.len());
    let mut fairness = Vec::new();
    for (i, slot) in sim.live.iter().enumerate() {
        let (program, arrival, deadline, finished) = match slot {
            Some(l) => (Some(&l.program), l.arrival, l.deadline, l.finished),
            None => (None, arrivals[i], f64::NAN, None),
        };
        let archetype = match &cfg.workload[i] {
            ProgramSource::Synthetic(s) => s.archetype,
            ProgramSource::Trace { .. } => Archetype::Cot,
        };
        let deadline = if deadline.is_nan() {
            let difficulty = match &cfg.workload[i] {
                ProgramSource::Synthetic(s) => s.difficulty_factor,
                ProgramSource::Trace { .. } => 2,
            };
            deadline_for(difficulty, cfg.slo_scale, cfg.base_deadline)
        } else {
            deadline
        };
        let tokens = program.map_or(0, |p| p.tokens_used);
        let name = program.map_or_else(|| i.to_string(), |p| p.name.clone());
        let row = match (program, finished) {
            (Some(p), Some(done)) => {
                let latency = done - arrival;
                let outcome = p.aggregate()?;
                let phi = (tokens > 0).then(|| {
                    let rec = FairnessRecord::new(p.id, latency, tokens).expect("tokens checked");
                    fairness.push(rec);
                    rec.phi()
                });
                ProgramRow {
                    id: name,
                    archetype,
                    arrival,
                    latency,
                    deadline,
                    met: latency <= deadline,
                    tokens,
                    correct: outcome.correct,
                    phi,
                    knob: p.knob,
                    truncated: false,
                }
            }
            _ => {
                let known = match &cfg.workload[i] {
                    ProgramSource::Synthetic(_) => Some(false),
                    ProgramSource::Trace { .. } => None,
                };
                ProgramRow {
                    id: name,
                    archetype,
                    arrival,
                    latency: (cfg.horizon - arrival).max(0.0),
                    deadline,
                    met: false,
                    tokens,
                    correct: known,
                    phi: None,
                    knob: program.map_or(0, |p| p.knob),
                    truncated: true,
                }
            }
        };
        rows.push(row);
    }

    let completed: Vec<&ProgramRow> = rows.iter().filter(|r| !r.truncated).collect();
    let mut latencies: Vec<f64> = completed.iter().map(|r| r.latency).collect();
    latencies.sort_by(f64::total_cmp);
    let n = rows.len();
    let total_tokens = rows.iter().map(|r| r.tokens).sum();
    let known: Vec<bool> = rows.iter().filter_map(|r| r.correct).collect();
    let first_arrival = arrivals.iter().copied().fold(f64::INFINITY, f64::min);
    let makespan = if sim.last_completion > first_arrival {
        sim.last_completion - first_arrival
    } else {
        0.0
    };
    let aggregates = Aggregates {
        programs: n,
        completed: completed.len(),
        truncated: n - completed.len(),
        mean_latency: (!latencies.is_empty()).then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
        p90_latency: nearest_rank(&latencies, 0.9),
        attainment: (n > 0).then(|| rows.iter().filter(|r| r.met).count() as f64 / n as f64),
        total_tokens,
        accuracy: (!known.is_empty()).then(|| known.iter().filter(|&&c| c).count() as f64 / known.len() as f64),
        fairness: (!fairness.is_empty()).then(|| fairness_report(&fairness)).transpose()?,
        throughput: if makespan > 0.0 {
            total_tokens as f64 / makespan
        } else {
            0.0
        },
        makespan,
    };
    Ok(SimReport {
        programs: rows,
        aggregates,
        events: sim.events,
    })
}

/// Runs independent simulations on the current rayon pool, keeping order.
pub fn run_many(configs: &[SimConfig]) -> Vec<Result<SimReport>> {
    configs.par_iter().map(run).collect()
}

/// What a program looked like at one check point of a solo profiling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub program: usize,
    pub knob: u32,
    pub signals: SignalVector,
    pub correct_if_stopped: bool,
    pub correct_if_full: bool,
    pub solvable: bool,
    /// Tokens left unspent by stopping here instead of at the cap.
    pub tokens_saved: u64,
    /// Further knob units after which the answer's correctness matches the
    /// full run at every later knob.
    pub remaining_needed: u32,
}

/// Runs each program alone to its cap and records every check point: the
/// detect knob and every `recheck_every` units after it, below the cap.
pub fn profile(
    specs: &[SyntheticProgramSpec],
    probe: &ProbeConfig,
    default_cap: u32,
    detect_at_knob: u32,
    recheck_every: Option<u32>,
) -> Result<Vec<ProfilePoint>> {
    let per: Vec<Result<Vec<ProfilePoint>>> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut p = ReasoningProgram::synthetic(i as u64, spec.clone(), default_cap, probe.clone())?;
            let cap = p.resource_cap;
            let e = p.expand(cap, 0.0)?;
            p.complete_all(&e)?;
            let correct: Vec<bool> = (1..=cap)
                .map(|k| p.outcome_at(k).map(|o| o.correct == Some(true)))
                .collect::<Result<_>>()?;
            let full = correct[cap as usize - 1];
            // settle[k-1]: smallest knob m >= k from which correctness
            // matches the full run all the way to the cap.
            let mut settle = vec![cap; cap as usize];
            let mut from = cap;
            for k in (1..=cap).rev() {
                if correct[k as usize - 1] == full {
                    from = k;
                } else {
                    break;
                }
            }
            for k in 1..=cap {
                settle[k as usize - 1] = from.max(k);
            }
            let mut tokens_at = vec![0u64; cap as usize + 1];
            for (k, u) in p.state.units.iter().enumerate() {
                tokens_at[k + 1] = tokens_at[k] + u.tokens;
            }
            let mut out = Vec::new();
            let mut k = detect_at_knob.min(cap);
            while k < cap {
                out.push(ProfilePoint {
                    program: i,
                    knob: k,
                    signals: p.signals_at(k)?,
                    correct_if_stopped: correct[k as usize - 1],
                    correct_if_full: full,
                    solvable: spec.solvable,
                    tokens_saved: tokens_at[cap as usize] - tokens_at[k as usize],
                    remaining_needed: settle[k as usize - 1] - k,
                });
                match recheck_every {
                    Some(r) => k += r.max(1),
                    None => break,
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for p in per {
        all.extend(p?);
    }
    Ok(all)
}

/// Calibration rows for one signal; check points where the signal is not
/// yet available are skipped because no threshold can fire there.
pub fn calibration_rows(points: &[ProfilePoint], signal: Signal) -> Vec<CalibrationRow> {
    points
        .iter()
        .filter_map(|p| {
            p.signals.get(signal).map(|c| CalibrationRow {
                certaindex: c,
                correct_if_stopped: p.correct_if_stopped,
                correct_if_full: p.correct_if_full,
                tokens_saved: p.tokens_saved,
            })
        })
        .collect()
}

/// Curve fitted on the solvable programs of a profile.
pub fn profile_curve(points: &[ProfilePoint], signal: Signal, buckets: usize, quantile: f64) -> Result<Curve> {
    let pts: Vec<(f64, u32)> = points
        .iter()
        .filter(|p| p.solvable)
        .map(|p| (p.signals.get(signal).unwrap_or(0.0), p.remaining_needed))
        .collect();
    fit_curve(&pts, buckets, quantile)
}

/// Settings for turning a profile into a ready-to-run policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    pub resource_cap: u32,
    pub detect_at_knob: u32,
    pub recheck_every: u32,
    pub signal: Signal,
    pub tolerance: f64,
    pub curve_buckets: usize,
    pub curve_quantile: f64,
}

/// Builds a policy of the given kind from a profile of the workload. The
/// threshold is calibrated over every check point so that the same cutoff
/// is safe wherever a policy tests it. `length_proxy` calibrates its token
/// cutoff from the detect point the same way.
pub fn calibrated_policy(
    kind: PolicyKind,
    points: &[ProfilePoint],
    plan: &CalibrationPlan,
) -> Result<(AllocationPolicy, Option<Calibration>)> {
    let mut policy = AllocationPolicy {
        kind,
        detect_at_knob: plan.detect_at_knob,
        recheck_every: plan.recheck_every,
        ..AllocationPolicy::even(plan.resource_cap)
    };
    let calibration = match kind {
        PolicyKind::Even => None,
        PolicyKind::LengthProxy => {
            // Stops when the cumulative token count at the detect point is
            // high, so the cutoff is calibrated on that count.
            let rows: Vec<CalibrationRow> = points
                .iter()
                .filter(|p| p.knob == plan.detect_at_knob)
                .map(|p| CalibrationRow {
                    certaindex: p.signals.mean_output_length.unwrap_or(0.0) * p.knob as f64,
                    correct_if_stopped: p.correct_if_stopped,
                    correct_if_full: p.correct_if_full,
                    tokens_saved: p.tokens_saved,
                })
                .collect();
            let cal = calibrate_threshold(&rows, plan.tolerance)?;
            policy.length_threshold = Some(cal.threshold.ceil() as u64);
            Some(cal)
        }
        _ => {
            let cal = calibrate_threshold(&calibration_rows(points, plan.signal), plan.tolerance)?;
            policy.thresholds = vec![Threshold::at_least(plan.signal, cal.threshold)];
            if matches!(kind, PolicyKind::InitialCurveFit | PolicyKind::DynamicCurveFit) {
                policy.curve = Some(profile_curve(points, plan.signal, plan.curve_buckets, plan.curve_quantile)?);
            }
            Some(cal)
        }
    };
    policy.validate()?;
    Ok((policy, calibration))
}
