//! Reasoning programs and the synthetic oracle that drives them.
//!
//! A [`ReasoningProgram`] is one query answered by many LLM requests. Its
//! *knob* counts the units of compute spent so far: branches for
//! self-consistency, candidate solutions for Rebase, rollouts for MCTS and
//! probe intervals for a long chain of thought. Each call to
//! [`ReasoningProgram::expand`] adds knob units and returns the requests that
//! realise them, grouped into stages that must run one after another.
//!
//! Instead of a model, answers come from a [`SyntheticProgramSpec`] whose
//! ground truth (the knob at which the answer settles, whether the query is
//! solvable at all) is known, or from a recorded probe trace.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{
    certaindex_entropy, certaindex_reward, cluster_exact, normalize_answer, RewardAggregation, RewardSet,
    Signal, SignalVector,
};
use crate::probe::{
    consistency, final_answer, flag_hesitation, read_traces, AnswerRecord, ProbeConfig, ProbeTrace,
    TerminationReason,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Self-consistency: independent branches, majority vote.
    Sc,
    /// Reward-guided tree search with weighted voting over candidates.
    Rebase,
    /// Monte Carlo tree search, best-of-n by reward.
    Mcts,
    /// A single long chain of thought probed at fixed intervals.
    Cot,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [Archetype::Sc, Archetype::Rebase, Archetype::Mcts, Archetype::Cot];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Sc => "sc",
            Archetype::Rebase => "rebase",
            Archetype::Mcts => "mcts",
            Archetype::Cot => "cot",
        }
    }

    /// Signals that [`ReasoningProgram::update_certaindex`] can produce.
    pub fn signals(self) -> &'static [Signal] {
        match self {
            Archetype::Sc => &[Signal::Entropy, Signal::MeanOutputLength],
            Archetype::Rebase | Archetype::Mcts => &[Signal::Entropy, Signal::Reward, Signal::MeanOutputLength],
            Archetype::Cot => &[Signal::Consistency, Signal::MeanOutputLength],
        }
    }

    /// The signal a curve-fit policy reads.
    pub fn certainty_signal(self) -> Signal {
        match self {
            Archetype::Cot => Signal::Consistency,
            _ => Signal::Entropy,
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid("archetype", format!("unknown archetype `{s}`")))
    }
}

/// Per-unit answer sampler.
///
/// Before the convergence knob each answer is the stationary one with
/// probability `1 - noise` and otherwise a uniformly chosen distractor; from
/// the convergence knob on the noise drops to `residual_noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerProcess {
    /// Number of answer groups `M`, the stationary answer included.
    pub groups: usize,
    pub noise: f64,
    #[serde(default)]
    pub residual_noise: f64,
    /// Probability that a probed chain-of-thought answer hesitates.
    #[serde(default)]
    pub hesitation_rate: f64,
}

impl Default for AnswerProcess {
    fn default() -> Self {
        Self {
            groups: 4,
            noise: 0.6,
            residual_noise: 0.0,
            hesitation_rate: 0.0,
        }
    }
}

/// Lognormal request lengths around a program-level mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenProcess {
    pub mean: f64,
    #[serde(default)]
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardProcess {
    /// Beta concentration `α + β`; larger values mean less noisy rewards.
    pub concentration: f64,
}

impl Default for RewardProcess {
    fn default() -> Self {
        Self { concentration: 20.0 }
    }
}

pub const STATIONARY_ANSWER: &str = "ans-0";

fn distractor(i: usize) -> String {
    format!("ans-{i}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProgramSpec {
    pub archetype: Archetype,
    pub seed: u64,
    pub true_convergence_knob: u32,
    pub solvable: bool,
    pub difficulty_factor: u8,
    #[serde(default)]
    pub answer_process: AnswerProcess,
    pub tokens_per_step: TokenProcess,
    #[serde(default)]
    pub reward_process: Option<RewardProcess>,
    /// Requests chained per unit: rollout depth for MCTS, layers for Rebase.
    #[serde(default = "one")]
    pub depth: u32,
    /// Overrides the allocation policy's cap for this program.
    #[serde(default)]
    pub resource_cap: Option<u32>,
}

fn one() -> u32 {
    1
}

impl SyntheticProgramSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.difficulty_factor) {
            return Err(invalid("difficulty_factor", format!("{} is not 1, 2 or 3", self.difficulty_factor)));
        }
        if self.true_convergence_knob == 0 {
            return Err(invalid("true_convergence_knob", "must be at least 1"));
        }
        let a = &self.answer_process;
        if a.groups < 2 {
            return Err(invalid("groups", "need the stationary answer and at least one distractor"));
        }
        for (name, p) in [
            ("noise", a.noise),
            ("residual_noise", a.residual_noise),
            ("hesitation_rate", a.hesitation_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(name, format!("{p} is outside [0, 1]")));
            }
        }
        if !(self.tokens_per_step.mean.is_finite() && self.tokens_per_step.mean >= 1.0) {
            return Err(invalid("tokens_per_step.mean", "must be at least 1"));
        }
        if !(self.tokens_per_step.sigma.is_finite() && self.tokens_per_step.sigma >= 0.0) {
            return Err(invalid("tokens_per_step.sigma", "must be non-negative"));
        }
        if let Some(r) = self.reward_process {
            if !(r.concentration.is_finite() && r.concentration > 0.0) {
                return Err(invalid("reward_process.concentration", "must be positive"));
            }
        }
        if self.depth == 0 {
            return Err(invalid("depth", "must be at least 1"));
        }
        if self.resource_cap == Some(0) {
            return Err(invalid("resource_cap", "must be at least 1"));
        }
        Ok(())
    }

    /// Requests issued per knob unit.
    pub fn requests_per_unit(&self) -> u32 {
        match self.archetype {
            Archetype::Sc | Archetype::Cot => 1,
            Archetype::Rebase | Archetype::Mcts => self.depth,
        }
    }

    /// Expected tokens per knob unit, exact when `sigma` is zero.
    pub fn expected_unit_tokens(&self, probe: &ProbeConfig) -> f64 {
        match self.archetype {
            Archetype::Cot => probe.interval_tokens as f64,
            _ if self.tokens_per_step.sigma == 0.0 => {
                self.tokens_per_step.mean.round().max(1.0) * self.requests_per_unit() as f64
            }
            _ => self.tokens_per_step.mean * self.requests_per_unit() as f64,
        }
    }

    /// Deterministic draw for knob unit `index` (0-based). The same unit
    /// always yields the same sample however the knob was granted.
    pub fn sample_unit(&self, index: u32, probe: &ProbeConfig) -> UnitSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let knob = index + 1;
        let a = &self.answer_process;
        let noise = if !self.solvable {
            1.0
        } else if knob < self.true_convergence_knob {
            a.noise
        } else {
            a.residual_noise
        };
        let u: f64 = rng.random();
        let pick = rng.random_range(1..a.groups);
        let stationary = self.solvable && u >= noise;
        let mut answer = if stationary {
            STATIONARY_ANSWER.to_string()
        } else {
            distractor(pick)
        };

        let hesitant_draw: f64 = rng.random();
        let mut hesitant = false;
        if self.archetype == Archetype::Cot && hesitant_draw < a.hesitation_rate {
            answer = format!("hmm {answer}");
            hesitant = flag_hesitation(&answer, &probe.hesitation_markers);
        }

        let reward = match (self.archetype, self.reward_process) {
            (Archetype::Mcts | Archetype::Rebase, rp) => {
                let rp = rp.unwrap_or_default();
                let mean = if stationary {
                    let progress = (knob as f64 / self.true_convergence_knob as f64).min(1.0);
                    0.45 + 0.45 * progress
                } else {
                    0.25
                };
                let beta = Beta::new(mean * rp.concentration, (1.0 - mean) * rp.concentration)
                    .expect("beta parameters are positive");
                Some(beta.sample(&mut rng))
            }
            _ => None,
        };

        let tokens = match self.archetype {
            Archetype::Cot => vec![probe.interval_tokens],
            _ => {
                let t = self.tokens_per_step;
                let lognormal = (t.sigma > 0.0).then(|| {
                    LogNormal::new(t.mean.ln() - t.sigma * t.sigma / 2.0, t.sigma).expect("sigma is finite")
                });
                (0..self.requests_per_unit())
                    .map(|_| match &lognormal {
                        Some(d) => d.sample(&mut rng).round().max(1.0) as u64,
                        None => t.mean.round().max(1.0) as u64,
                    })
                    .collect()
            }
        };
        UnitSample {
            answer,
            hesitant,
            reward,
            tokens,
        }
    }
}

/// What the oracle produces for one knob unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSample {
    pub answer: String,
    pub hesitant: bool,
    pub reward: Option<f64>,
    /// Token count of each request of the unit, in chain order.
    pub tokens: Vec<u64>,
}

/// One unit of work sent to the serving backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub program_id: u64,
    /// Per-program sequence number; doubles as the in-program ordering key.
    pub branch_id: u64,
    /// The knob unit this request contributes to.
    pub unit: u32,
    pub issued_at: f64,
    pub tokens: u64,
    pub completed_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramStatus {
    Pending,
    Running,
    Terminated,
}

/// A knob unit and its progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub answer: String,
    pub hesitant: bool,
    pub reward: Option<f64>,
    pub tokens: u64,
    pub pending_requests: u32,
}

impl Unit {
    pub fn is_complete(&self) -> bool {
        self.pending_requests == 0
    }
}

/// Intermediate results of a program: every issued unit, and for
/// chain-of-thought programs the probe trace built from completed units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProgramState {
    pub units: Vec<Unit>,
    pub trace: ProbeTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Oracle {
    Synthetic(SyntheticProgramSpec),
    Replay(Vec<AnswerRecord>),
}

/// Requests produced by one expansion. Stage `s + 1` may only be issued once
/// every request of stage `s` has completed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expansion {
    pub stages: Vec<Vec<Request>>,
}

impl Expansion {
    pub fn requests(&self) -> impl Iterator<Item = &Request> {
        self.stages.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub answer: String,
    /// `None` when the ground truth is unknown (replayed traces).
    pub correct: Option<bool>,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningProgram {
    pub id: u64,
    pub name: String,
    pub archetype: Archetype,
    pub knob: u32,
    pub resource_cap: u32,
    pub certaindex_history: Vec<(u32, SignalVector)>,
    pub state: ProgramState,
    pub tokens_used: u64,
    pub status: ProgramStatus,
    pub probe: ProbeConfig,
    oracle: Oracle,
    next_branch: u64,
}

impl ReasoningProgram {
    /// A program driven by the synthetic oracle. The program's own cap, when
    /// set, takes precedence over `default_cap`.
    pub fn synthetic(id: u64, spec: SyntheticProgramSpec, default_cap: u32, probe: ProbeConfig) -> Result<Self> {
        spec.validate()?;
        let cap = spec.resource_cap.unwrap_or(default_cap);
        if cap == 0 {
            return Err(invalid("resource_cap", "must be at least 1"));
        }
        Ok(Self::with_oracle(id, id.to_string(), spec.archetype, cap, probe, Oracle::Synthetic(spec)))
    }

    /// A chain-of-thought program whose probes replay recorded answers. The
    /// cap is the number of records.
    pub fn from_trace(id: u64, name: impl Into<String>, trace: &ProbeTrace, probe: ProbeConfig) -> Result<Self> {
        if trace.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let cap = trace.len() as u32;
        Ok(Self::with_oracle(
            id,
            name.into(),
            Archetype::Cot,
            cap,
            probe,
            Oracle::Replay(trace.records.clone()),
        ))
    }

    fn with_oracle(id: u64, name: String, archetype: Archetype, cap: u32, probe: ProbeConfig, oracle: Oracle) -> Self {
        Self {
            id,
            name,
            archetype,
            knob: 0,
            resource_cap: cap,
            certaindex_history: Vec::new(),
            state: ProgramState::default(),
            tokens_used: 0,
            status: ProgramStatus::Pending,
            probe,
            oracle,
            next_branch: 0,
        }
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn spec(&self) -> Option<&SyntheticProgramSpec> {
        match &self.oracle {
            Oracle::Synthetic(s) => Some(s),
            Oracle::Replay(_) => None,
        }
    }

    pub fn completed_units(&self) -> u32 {
        self.state.units.iter().take_while(|u| u.is_complete()).count() as u32
    }

    /// Token counts of fully completed units, the history SJF estimates from.
    pub fn completed_unit_tokens(&self) -> Vec<u64> {
        self.state
            .units
            .iter()
            .filter(|u| u.is_complete())
            .map(|u| u.tokens)
            .collect()
    }

    pub fn is_idle(&self) -> bool {
        self.state.units.iter().all(Unit::is_complete)
    }

    fn sample(&self, index: u32) -> UnitSample {
        match &self.oracle {
            Oracle::Synthetic(spec) => spec.sample_unit(index, &self.probe),
            Oracle::Replay(records) => {
                let r = &records[index as usize];
                let prev = index
                    .checked_sub(1)
                    .map_or(0, |p| records[p as usize].token_offset);
                UnitSample {
                    answer: r.answer.clone(),
                    hesitant: r.hesitant || flag_hesitation(&r.answer, &self.probe.hesitation_markers),
                    reward: None,
                    tokens: vec![r.token_offset - prev],
                }
            }
        }
    }

    /// Adds `step_budget` knob units and returns their requests.
    pub fn expand(&mut self, step_budget: u32, now: f64) -> Result<Expansion> {
        if self.status == ProgramStatus::Terminated {
            return Err(Error::ProgramTerminated(self.id));
        }
        if step_budget == 0 {
            return Err(invalid("step_budget", "must be at least 1"));
        }
        if self.knob as u64 + step_budget as u64 > self.resource_cap as u64 {
            return Err(Error::CapExceeded {
                knob: self.knob,
                step: step_budget,
                cap: self.resource_cap,
            });
        }
        self.status = ProgramStatus::Running;
        let first = self.knob;
        let samples: Vec<UnitSample> = (first..first + step_budget).map(|j| self.sample(j)).collect();

        let mut stages: Vec<Vec<Request>> = Vec::new();
        let request = |this: &mut Self, unit: u32, tokens: u64| {
            let r = Request {
                program_id: this.id,
                branch_id: this.next_branch,
                unit,
                issued_at: now,
                tokens,
                completed_at: None,
            };
            this.next_branch += 1;
            r
        };
        match self.archetype {
            Archetype::Sc => {
                let stage = samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| request(self, first + i as u32, s.tokens[0]))
                    .collect();
                stages.push(stage);
            }
            Archetype::Rebase => {
                let depth = samples[0].tokens.len();
                for layer in 0..depth {
                    let stage = samples
                        .iter()
                        .enumerate()
                        .map(|(i, s)| request(self, first + i as u32, s.tokens[layer]))
                        .collect();
                    stages.push(stage);
                }
            }
            Archetype::Mcts | Archetype::Cot => {
                for (i, s) in samples.iter().enumerate() {
                    for &t in &s.tokens {
                        stages.push(vec![request(self, first + i as u32, t)]);
                    }
                }
            }
        }
        for s in samples {
            self.state.units.push(Unit {
                pending_requests: s.tokens.len() as u32,
                answer: s.answer,
                hesitant: s.hesitant,
                reward: s.reward,
                tokens: 0,
            });
        }
        self.knob += step_budget;
        Ok(Expansion { stages })
    }

    /// Records a finished request. Probe records of a chain of thought are
    /// appended once their interval completes.
    pub fn complete_request(&mut self, request: &Request) -> Result<()> {
        if request.program_id != self.id {
            return Err(invalid("request", format!("belongs to program {}", request.program_id)));
        }
        let unit = self
            .state
            .units
            .get_mut(request.unit as usize)
            .filter(|u| u.pending_requests > 0)
            .ok_or_else(|| invalid("request", format!("unit {} has no pending request", request.unit)))?;
        unit.pending_requests -= 1;
        unit.tokens += request.tokens;
        self.tokens_used += request.tokens;
        if self.archetype == Archetype::Cot && unit.is_complete() {
            let rec = AnswerRecord {
                step_index: request.unit + 1,
                token_offset: self.tokens_used,
                answer: unit.answer.clone(),
                hesitant: unit.hesitant,
            };
            self.state.trace.push(rec)?;
        }
        Ok(())
    }

    /// Runs every outstanding request to completion without a backend.
    pub fn complete_all(&mut self, expansion: &Expansion) -> Result<()> {
        for r in expansion.requests() {
            self.complete_request(r)?;
        }
        Ok(())
    }

    fn completed(&self, upto: u32) -> impl Iterator<Item = &Unit> {
        self.state
            .units
            .iter()
            .take(upto as usize)
            .filter(|u| u.is_complete())
    }

    /// Signals over the first `upto` units (completed ones only).
    pub fn signals_at(&self, upto: u32) -> Result<SignalVector> {
        let units: Vec<&Unit> = self.completed(upto).collect();
        if units.is_empty() {
            return Err(Error::NothingToAggregate(self.id));
        }
        let mut s = SignalVector {
            mean_output_length: Some(units.iter().map(|u| u.tokens as f64).sum::<f64>() / units.len() as f64),
            ..Default::default()
        };
        let answers: Vec<&str> = units.iter().map(|u| u.answer.as_str()).collect();
        let rewards = || units.iter().filter_map(|u| u.reward).collect::<Vec<_>>();
        match self.archetype {
            Archetype::Sc => s.certaindex_entropy = Some(certaindex_entropy(&cluster_exact(&answers)?)),
            Archetype::Mcts => {
                s.certaindex_entropy = Some(certaindex_entropy(&cluster_exact(&answers)?));
                s.certaindex_reward = Some(certaindex_reward(&RewardSet::new(rewards(), RewardAggregation::Mean)?));
            }
            Archetype::Rebase => {
                s.certaindex_entropy = Some(certaindex_entropy(&cluster_exact(&answers)?));
                s.certaindex_reward = Some(certaindex_reward(&RewardSet::new(rewards(), RewardAggregation::Max)?));
            }
            Archetype::Cot => {
                let records: Vec<AnswerRecord> = self
                    .state
                    .trace
                    .records
                    .iter()
                    .filter(|r| r.step_index <= upto)
                    .cloned()
                    .collect();
                let k = records.last().map_or(0, |r| r.step_index);
                s.consistency = consistency(&records, k, self.probe.window);
            }
        }
        Ok(s)
    }

    /// Computes the current signals and appends them to the history. A
    /// second update at the same knob point replaces the first.
    pub fn update_certaindex(&mut self) -> Result<SignalVector> {
        let point = self.completed_units();
        let s = self.signals_at(point)?;
        match self.certaindex_history.last_mut() {
            Some((k, last)) if *k == point => *last = s,
            _ => self.certaindex_history.push((point, s)),
        }
        Ok(s)
    }

    pub fn latest_signals(&self) -> Option<&SignalVector> {
        self.certaindex_history
            .last()
            .filter(|(k, _)| *k == self.knob)
            .map(|(_, s)| s)
    }

    pub fn terminate(&mut self) {
        if self.archetype == Archetype::Cot {
            let k = self.completed_units();
            let certain = self
                .signals_at(k)
                .ok()
                .and_then(|s| s.consistency)
                .is_some_and(|c| c >= self.probe.threshold);
            let reason = if certain {
                TerminationReason::Certain
            } else if self.knob >= self.resource_cap {
                TerminationReason::Budget
            } else {
                TerminationReason::CriteriaExternal
            };
            self.state.trace.terminate(reason);
        }
        self.status = ProgramStatus::Terminated;
    }

    /// Final answer of a terminated program.
    pub fn aggregate(&self) -> Result<Outcome> {
        if self.status != ProgramStatus::Terminated {
            return Err(Error::ProgramNotTerminated(self.id));
        }
        self.outcome_at(self.knob)
    }

    /// The answer the program would report if stopped after `upto` units.
    pub fn outcome_at(&self, upto: u32) -> Result<Outcome> {
        let units: Vec<&Unit> = self.completed(upto).collect();
        if units.is_empty() {
            return Err(Error::NothingToAggregate(self.id));
        }
        let (answer, low_confidence) = match self.archetype {
            Archetype::Sc => {
                let answers: Vec<&str> = units.iter().map(|u| u.answer.as_str()).collect();
                (cluster_exact(&answers)?.plurality().label.clone(), false)
            }
            Archetype::Rebase => {
                let answers: Vec<&str> = units.iter().map(|u| u.answer.as_str()).collect();
                let scores: Vec<f64> = units.iter().map(|u| u.reward.unwrap_or(0.0)).collect();
                (weighted_vote(&answers, &scores)?, false)
            }
            Archetype::Mcts => {
                let mut best = units[0];
                for u in &units[1..] {
                    if u.reward.unwrap_or(0.0) > best.reward.unwrap_or(0.0) {
                        best = u;
                    }
                }
                (normalize_answer(&best.answer).to_string(), false)
            }
            Archetype::Cot => {
                let trace = ProbeTrace {
                    records: self
                        .state
                        .trace
                        .records
                        .iter()
                        .filter(|r| r.step_index <= upto)
                        .cloned()
                        .collect(),
                    ..Default::default()
                };
                let f = final_answer(&trace)?;
                (f.answer, f.low_confidence)
            }
        };
        let correct = self
            .spec()
            .map(|s| s.solvable && answer == STATIONARY_ANSWER);
        Ok(Outcome {
            answer,
            correct,
            low_confidence,
        })
    }
}

/// Softmax-weighted vote: each answer's weight is the sum of `e^s` over its
/// paths. Ties go to the earliest-seen answer.
pub fn weighted_vote<S: AsRef<str>>(answers: &[S], scores: &[f64]) -> Result<String> {
    if answers.is_empty() {
        return Err(Error::EmptyAnswerSet);
    }
    if answers.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            left: answers.len(),
            right: scores.len(),
        });
    }
    // Subtracting the max keeps exp() in range and leaves the argmax intact.
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<&str> = Vec::new();
    let mut weight: HashMap<&str, f64> = HashMap::new();
    for (a, &s) in answers.iter().zip(scores) {
        let a = normalize_answer(a.as_ref());
        let w = weight.entry(a).or_insert_with(|| {
            order.push(a);
            0.0
        });
        *w += (s - top).exp();
    }
    let mut best = order[0];
    for &a in &order[1..] {
        if weight[a] > weight[best] {
            best = a;
        }
    }
    Ok(best.to_string())
}

/// Reads a probe-trace JSONL file into chain-of-thought programs, numbered
/// from `first_id` in order of first appearance.
pub fn replay_trace<R: BufRead>(reader: R, probe: &ProbeConfig, first_id: u64) -> Result<Vec<ReasoningProgram>> {
    read_traces(reader)?
        .iter()
        .enumerate()
        .map(|(i, (name, trace))| ReasoningProgram::from_trace(first_id + i as u64, name.clone(), trace, probe.clone()))
        .collect()
}

/// Records the probe answers of a synthetic chain of thought over `steps`
/// intervals, as a recorder attached to a real model would.
pub fn synthetic_cot_trace(spec: &SyntheticProgramSpec, probe: &ProbeConfig, steps: u32) -> Result<ProbeTrace> {
    if spec.archetype != Archetype::Cot {
        return Err(invalid("archetype", "trace recording needs a cot program"));
    }
    let mut p = ReasoningProgram::synthetic(0, spec.clone(), steps, probe.clone())?;
    let e = p.expand(steps, 0.0)?;
    p.complete_all(&e)?;
    Ok(p.state.trace)
}

/// Parameters of a randomly generated workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub archetype: Archetype,
    pub programs: usize,
    /// Inclusive range the convergence knob is drawn from.
    pub convergence: [u32; 2],
    /// When set, the convergence knob of a program is also kept at or below
    /// this fraction of its cap.
    #[serde(default)]
    pub convergence_cap_fraction: Option<f64>,
    #[serde(default)]
    pub unsolvable_fraction: f64,
    /// Solvable programs converging at or before this knob get difficulty 1.
    #[serde(default = "default_easy_knob")]
    pub easy_knob: u32,
    #[serde(default)]
    pub answer_process: AnswerProcess,
    /// Median of the program-level mean request length.
    pub token_mean: f64,
    /// Spread of program-level means around `token_mean`.
    #[serde(default)]
    pub token_mean_sigma: f64,
    /// Spread of request lengths around the program mean.
    #[serde(default)]
    pub request_sigma: f64,
    #[serde(default = "one")]
    pub depth: u32,
    #[serde(default)]
    pub reward_process: Option<RewardProcess>,
    /// Per-program caps, assigned round-robin. Empty leaves caps to the policy.
    #[serde(default)]
    pub caps: Vec<u32>,
}

fn default_easy_knob() -> u32 {
    5
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.convergence;
        if lo == 0 || lo > hi {
            return Err(invalid("convergence", format!("[{lo}, {hi}] is not a range of positive knobs")));
        }
        if !(0.0..=1.0).contains(&self.unsolvable_fraction) {
            return Err(invalid("unsolvable_fraction", "must lie in [0, 1]"));
        }
        if let Some(f) = self.convergence_cap_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(invalid("convergence_cap_fraction", "must lie in (0, 1]"));
            }
        }
        if !(self.token_mean.is_finite() && self.token_mean >= 1.0) {
            return Err(invalid("token_mean", "must be at least 1"));
        }
        if !(self.token_mean_sigma >= 0.0 && self.request_sigma >= 0.0) {
            return Err(invalid("token_mean_sigma", "spreads must be non-negative"));
        }
        if self.caps.contains(&0) {
            return Err(invalid("caps", "every cap must be at least 1"));
        }
        Ok(())
    }

    /// Draws the programs. Each program gets its own seed so that its answers
    /// do not depend on the rest of the workload.
    pub fn generate(&self, seed: u64) -> Result<Vec<SyntheticProgramSpec>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spread = (self.token_mean_sigma > 0.0)
            .then(|| LogNormal::new(self.token_mean.ln(), self.token_mean_sigma).expect("sigma is finite"));
        let mut out = Vec::with_capacity(self.programs);
        for i in 0..self.programs {
            let cap = (!self.caps.is_empty()).then(|| self.caps[i % self.caps.len()]);
            let [lo, mut hi] = self.convergence;
            if let (Some(f), Some(c)) = (self.convergence_cap_fraction, cap) {
                hi = hi.min((f * c as f64).floor() as u32).max(lo);
            }
            let c = rng.random_range(lo..=hi);
            let solvable = rng.random::<f64>() >= self.unsolvable_fraction;
            let mean = match &spread {
                Some(d) => d.sample(&mut rng).max(1.0),
                None => self.token_mean,
            };
            let program_seed: u64 = rng.random();
            out.push(SyntheticProgramSpec {
                archetype: self.archetype,
                seed: program_seed,
                true_convergence_knob: c,
                solvable,
                difficulty_factor: if !solvable {
                    3
                } else if c <= self.easy_knob {
                    1
                } else {
                    2
                },
                answer_process: self.answer_process.clone(),
                tokens_per_step: TokenProcess {
                    mean,
                    sigma: self.request_sigma,
                },
                reward_process: self.reward_process,
                depth: self.depth,
                resource_cap: cap,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(archetype: Archetype, c: u32) -> SyntheticProgramSpec {
        SyntheticProgramSpec {
            archetype,
            seed: 7,
            true_convergence_knob: c,
            solvable: true,
            difficulty_factor: 2,
            answer_process: AnswerProcess {
                groups: 4,
                noise: 0.7,
                residual_noise: 0.0,
                hesitation_rate: 0.0,
            },
            tokens_per_step: TokenProcess { mean: 100.0, sigma: 0.5 },
            reward_process: None,
            depth: 3,
            resource_cap: None,
        }
    }

    fn run_to(p: &mut ReasoningProgram, budget: u32) -> Expansion {
        let e = p.expand(budget, 0.0).unwrap();
        p.complete_all(&e).unwrap();
        e
    }

    #[test]
    fn sc_expansion_is_one_parallel_stage() {
        let mut p = ReasoningProgram::synthetic(1, spec(Archetype::Sc, 3), 30, ProbeConfig::default()).unwrap();
        let e = p.expand(5, 0.0).unwrap();
        assert_eq!(e.stages.len(), 1);
        assert_eq!(e.len(), 5);
        assert!(e.requests().all(|r| r.program_id == 1));
        assert_eq!(p.knob, 5);
    }

    #[test]
    fn cot_step_is_one_interval() {
        let mut s = spec(Archetype::Cot, 3);
        s.tokens_per_step.sigma = 0.0;
        let mut p = ReasoningProgram::synthetic(1, s, 10, ProbeConfig::default()).unwrap();
        let e = p.expand(1, 0.0).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e.stages[0][0].tokens, 64);
    }

    #[test]
    fn expanding_at_cap_fails() {
        let mut p = ReasoningProgram::synthetic(1, spec(Archetype::Mcts, 3), 4, ProbeConfig::default()).unwrap();
        run_to(&mut p, 4);
        assert!(matches!(p.expand(1, 0.0), Err(Error::CapExceeded { .. })));
        p.terminate();
        assert!(matches!(p.expand(1, 0.0), Err(Error::ProgramTerminated(1))));
    }

    #[test]
    fn archetype_request_shapes() {
        let probe = ProbeConfig::default();
        let mut mcts = ReasoningProgram::synthetic(1, spec(Archetype::Mcts, 3), 10, probe.clone()).unwrap();
        let e = mcts.expand(4, 0.0).unwrap();
        // Four rollouts, each a chain of three single-request stages.
        assert_eq!(e.stages.len(), 12);
        assert!(e.stages.iter().all(|s| s.len() == 1));
        let units: Vec<u32> = e.requests().map(|r| r.unit).collect();
        assert_eq!(units, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);

        let mut rebase = ReasoningProgram::synthetic(2, spec(Archetype::Rebase, 3), 10, probe).unwrap();
        let e = rebase.expand(6, 0.0).unwrap();
        assert_eq!(e.stages.len(), 3);
        assert!(e.stages.iter().all(|s| s.len() == 6));
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(weighted_vote(&["a", "b"], &[2.0, 1.0]).unwrap(), "a");
        // e^2 / (e^2 + e^1) is the weight of "a".
        let wa = 2f64.exp() / (2f64.exp() + 1f64.exp());
        assert!((wa - 0.731).abs() < 1e-3);
        assert_eq!(weighted_vote(&["b", "a", "a"], &[1.5, 1.0, 1.0]).unwrap(), "a");
        assert_eq!(weighted_vote(&["x", "y"], &[0.0, 0.0]).unwrap(), "x");

        let mut p = ReasoningProgram::synthetic(1, spec(Archetype::Mcts, 1), 10, ProbeConfig::default()).unwrap();
        run_to(&mut p, 2);
        p.state.units[0].answer = "a".into();
        p.state.units[0].reward = Some(0.3);
        p.state.units[1].answer = "b".into();
        p.state.units[1].reward = Some(0.8);
        assert!(p.aggregate().is_err());
        p.terminate();
        assert_eq!(p.aggregate().unwrap().answer, "b");

        let mut p = ReasoningProgram::synthetic(2, spec(Archetype::Sc, 1), 10, ProbeConfig::default()).unwrap();
        run_to(&mut p, 3);
        for (u, a) in p.state.units.iter_mut().zip(["a", "a", "b"]) {
            u.answer = a.into();
        }
        p.terminate();
        assert_eq!(p.aggregate().unwrap().answer, "a");
        assert_eq!(p.aggregate().unwrap().correct, Some(false));
    }

    #[test]
    fn update_certaindex_examples() {
        let mut sc = spec(Archetype::Sc, 1);
        sc.answer_process.noise = 0.0;
        let mut p = ReasoningProgram::synthetic(1, sc, 10, ProbeConfig::default()).unwrap();
        run_to(&mut p, 5);
        assert_eq!(p.update_certaindex().unwrap().certaindex_entropy, Some(1.0));

        let mut p = ReasoningProgram::synthetic(2, spec(Archetype::Mcts, 1), 10, ProbeConfig::default()).unwrap();
        run_to(&mut p, 2);
        p.state.units[0].reward = Some(0.2);
        p.state.units[1].reward = Some(0.6);
        let r = p.update_certaindex().unwrap().certaindex_reward.unwrap();
        assert!((r - 0.4).abs() < 1e-12);

        let cfg = ProbeConfig {
            window: 3,
            ..Default::default()
        };
        let mut cot = spec(Archetype::Cot, 1);
        cot.answer_process.noise = 0.0;
        let mut p = ReasoningProgram::synthetic(3, cot, 10, cfg).unwrap();
        run_to(&mut p, 2);
        assert_eq!(p.update_certaindex().unwrap().consistency, None);
        run_to(&mut p, 1);
        assert_eq!(p.update_certaindex().unwrap().consistency, Some(1.0));
        assert_eq!(p.certaindex_history.iter().map(|h| h.0).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn nothing_to_aggregate_before_completion() {
        let mut p = ReasoningProgram::synthetic(1, spec(Archetype::Sc, 1), 10, ProbeConfig::default()).unwrap();
        assert!(matches!(p.update_certaindex(), Err(Error::NothingToAggregate(1))));
        p.expand(2, 0.0).unwrap();
        assert!(p.update_certaindex().is_err());
    }

    fn trace_text(lines: &[(u32, u64, &str)]) -> String {
        lines
            .iter()
            .map(|(s, t, a)| {
                format!(r#"{{"program_id":"q","step_index":{s},"token_offset":{t},"answer":"{a}","hesitant":false}}"#)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    #[test]
    fn replay_examples() {
        let text = trace_text(&[(1, 64, "1"), (2, 128, "2"), (3, 192, "3")]);
        let progs = replay_trace(text.as_bytes(), &ProbeConfig::default(), 0).unwrap();
        assert_eq!(progs.len(), 1);
        assert_eq!(progs[0].resource_cap, 3);

        let bad = trace_text(&[(1, 64, "1"), (2, 60, "2")]);
        match replay_trace(bad.as_bytes(), &ProbeConfig::default(), 0) {
            Err(Error::TraceLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a line error, got {other:?}"),
        }

        // Answers settle at record 4; with w = 2 and τ = 1 the window is
        // full of agreeing answers one probe later.
        let answers = ["a", "b", "c", "d", "d", "d", "d", "d", "d", "d"];
        let lines: Vec<(u32, u64, &str)> = answers
            .iter()
            .enumerate()
            .map(|(i, a)| (i as u32 + 1, 64 * (i as u64 + 1), *a))
            .collect();
        let cfg = ProbeConfig {
            window: 2,
            threshold: 1.0,
            ..Default::default()
        };
        let mut p = replay_trace(trace_text(&lines).as_bytes(), &cfg, 0).unwrap().remove(0);
        let mut exit = None;
        for step in 1..=p.resource_cap {
            run_to(&mut p, 1);
            if p.update_certaindex().unwrap().consistency == Some(1.0) {
                exit = Some(step);
                break;
            }
        }
        assert_eq!(exit, Some(5));
        p.terminate();
        assert_eq!(p.state.trace.termination_reason, Some(TerminationReason::Certain));
        assert_eq!(p.aggregate().unwrap().answer, "d");
        assert_eq!(p.aggregate().unwrap().correct, None);
        assert_eq!(p.tokens_used, 320);
    }

    #[test]
    fn noise_free_programs_converge_to_the_stationary_answer() {
        for archetype in Archetype::ALL {
            let mut s = spec(archetype, 4);
            s.answer_process.residual_noise = 0.0;
            let mut p = ReasoningProgram::synthetic(1, s, 40, ProbeConfig::default()).unwrap();
            run_to(&mut p, 40);
            p.terminate();
            let o = p.aggregate().unwrap();
            assert_eq!(o.answer, STATIONARY_ANSWER, "{archetype}");
            assert_eq!(o.correct, Some(true));
        }
    }

    #[test]
    fn unsolvable_programs_never_answer_correctly() {
        let mut s = spec(Archetype::Sc, 1);
        s.solvable = false;
        s.difficulty_factor = 3;
        let mut p = ReasoningProgram::synthetic(1, s, 50, ProbeConfig::default()).unwrap();
        run_to(&mut p, 50);
        assert!(p.state.units.iter().all(|u| u.answer != STATIONARY_ANSWER));
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(Archetype::Sc, 1);
        s.difficulty_factor = 4;
        assert!(s.validate().is_err());
        let mut s = spec(Archetype::Sc, 1);
        s.answer_process.groups = 1;
        assert!(s.validate().is_err());
        assert!("MCTS".parse::<Archetype>().is_ok());
        assert!("beam".parse::<Archetype>().is_err());
    }

    #[test]
    fn generator_is_deterministic_and_respects_ranges() {
        let w = WorkloadConfig {
            archetype: Archetype::Sc,
            programs: 50,
            convergence: [1, 12],
            convergence_cap_fraction: Some(0.5),
            unsolvable_fraction: 0.2,
            easy_knob: 5,
            answer_process: AnswerProcess::default(),
            token_mean: 200.0,
            token_mean_sigma: 0.4,
            request_sigma: 0.0,
            depth: 1,
            reward_process: None,
            caps: vec![5, 10, 20],
        };
        let a = w.generate(3).unwrap();
        assert_eq!(a, w.generate(3).unwrap());
        assert_ne!(a, w.generate(4).unwrap());
        for s in &a {
            let cap = s.resource_cap.unwrap();
            assert!(s.true_convergence_knob >= 1);
            assert!(s.true_convergence_knob <= (cap / 2).max(1));
            assert_eq!(s.difficulty_factor == 3, !s.solvable);
        }
    }

    proptest! {
        #[test]
        fn chunking_does_not_change_the_history(
            seed in any::<u64>(),
            chunks in proptest::collection::vec(1u32..4, 1..6),
            archetype in prop::sample::select(Archetype::ALL.to_vec()),
        ) {
            let mut s = spec(archetype, 3);
            s.seed = seed;
            let total: u32 = chunks.iter().sum();
            let mut whole = ReasoningProgram::synthetic(1, s.clone(), total, ProbeConfig::default()).unwrap();
            run_to(&mut whole, total);
            let mut parts = ReasoningProgram::synthetic(1, s, total, ProbeConfig::default()).unwrap();
            let mut issued = 0;
            for c in chunks {
                let e = run_to(&mut parts, c);
                issued += e.len() as u64;
            }
            prop_assert_eq!(&whole.state.units, &parts.state.units);
            prop_assert_eq!(whole.tokens_used, parts.tokens_used);
            prop_assert_eq!(&whole.state.trace, &parts.state.trace);
            prop_assert_eq!(issued, total as u64 * parts.spec().unwrap().requests_per_unit() as u64);
        }

        #[test]
        fn tokens_equal_completed_request_sum(
            seed in any::<u64>(),
            budget in 1u32..20,
            done in 0usize..60,
        ) {
            let mut s = spec(Archetype::Mcts, 5);
            s.seed = seed;
            let mut p = ReasoningProgram::synthetic(1, s, 20, ProbeConfig::default()).unwrap();
            let e = p.expand(budget, 0.0).unwrap();
            let reqs: Vec<&Request> = e.requests().collect();
            let n = done.min(reqs.len());
            for r in &reqs[..n] {
                p.complete_request(r).unwrap();
            }
            prop_assert_eq!(p.tokens_used, reqs[..n].iter().map(|r| r.tokens).sum::<u64>());
            prop_assert!(p.knob <= p.resource_cap);
        }

        #[test]
        fn rewards_stay_in_unit_interval(seed in any::<u64>(), c in 1u32..10, j in 0u32..30) {
            let mut s = spec(Archetype::Rebase, c);
            s.seed = seed;
            let r = s.sample_unit(j, &ProbeConfig::default()).reward.unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
