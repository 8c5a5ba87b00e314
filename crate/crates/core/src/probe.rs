//! Probing a chain of thought for intermediate answers.
//!
//! Every `interval_tokens` generated tokens the reasoning model is asked for
//! its current final answer. The answers form a [`ProbeTrace`]; generation
//! stops once the last `window` usable answers agree often enough, or once
//! the token budget runs out. Answers containing hesitation markers ("wait",
//! "hmm") are kept in the trace but never enter the consistency window.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::normalize_answer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Probe every this many generated tokens.
    pub interval_tokens: u64,
    pub window: usize,
    /// Consistency needed to exit, in `(0, 1]`.
    pub threshold: f64,
    #[serde(default = "default_markers")]
    pub hesitation_markers: Vec<String>,
    pub max_tokens: u64,
}

fn default_markers() -> Vec<String> {
    vec!["wait".into(), "hmm".into()]
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            interval_tokens: 64,
            window: 3,
            threshold: 1.0,
            hesitation_markers: default_markers(),
            max_tokens: 16_384,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval_tokens == 0 {
            return Err(invalid("interval_tokens", "must be at least 1"));
        }
        if self.window == 0 {
            return Err(invalid("window", "must be at least 1"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(invalid("threshold", format!("{} is outside (0, 1]", self.threshold)));
        }
        if self.max_tokens == 0 {
            return Err(invalid("max_tokens", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of probe intervals that fit in the token budget.
    pub fn max_steps(&self) -> u32 {
        (self.max_tokens / self.interval_tokens).max(1) as u32
    }
}

/// One probed answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    /// Probe ordinal, starting at 1.
    pub step_index: u32,
    /// Cumulative reasoning tokens when the probe fired.
    pub token_offset: u64,
    pub answer: String,
    pub hesitant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    Certain,
    Budget,
    CriteriaExternal,
}

impl TerminationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminationReason::Certain => "certain",
            TerminationReason::Budget => "budget",
            TerminationReason::CriteriaExternal => "criteria_external",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTrace {
    pub records: Vec<AnswerRecord>,
    /// Step index of the record at which generation stopped.
    pub terminated_at: Option<u32>,
    pub termination_reason: Option<TerminationReason>,
}

impl ProbeTrace {
    pub fn new(records: Vec<AnswerRecord>) -> Result<Self> {
        check_monotone(&records).map_err(|(i, reason)| Error::TraceLine { line: i + 1, reason })?;
        Ok(Self {
            records,
            terminated_at: None,
            termination_reason: None,
        })
    }

    /// Appends a record, enforcing increasing step and token offsets.
    pub fn push(&mut self, record: AnswerRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step_index <= last.step_index || record.token_offset <= last.token_offset {
                return Err(invalid(
                    "answer record",
                    format!(
                        "step {} at offset {} does not follow step {} at offset {}",
                        record.step_index, record.token_offset, last.step_index, last.token_offset
                    ),
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Marks the trace terminated at its latest record.
    pub fn terminate(&mut self, reason: TerminationReason) {
        self.terminated_at = self.records.last().map(|r| r.step_index);
        self.termination_reason = Some(reason);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn check_monotone(records: &[AnswerRecord]) -> std::result::Result<(), (usize, String)> {
    for (i, w) in records.windows(2).enumerate() {
        if w[1].token_offset <= w[0].token_offset {
            return Err((
                i + 1,
                format!(
                    "token_offset {} does not increase past {}",
                    w[1].token_offset, w[0].token_offset
                ),
            ));
        }
        if w[1].step_index <= w[0].step_index {
            return Err((
                i + 1,
                format!("step_index {} does not increase past {}", w[1].step_index, w[0].step_index),
            ));
        }
    }
    Ok(())
}

/// True iff any marker is a case-insensitive substring of `answer`.
pub fn flag_hesitation<S: AsRef<str>>(answer: &str, markers: &[S]) -> bool {
    let lower = answer.to_lowercase();
    markers
        .iter()
        .any(|m| !m.as_ref().is_empty() && lower.contains(&m.as_ref().to_lowercase()))
}

/// Sliding-window consistency at step `k`.
///
/// Hesitant records are dropped first; the window is the last `w` usable
/// records with `step_index <= k`, and the score is the fraction of them that
/// equal the window's final answer. Returns `None` while fewer than `w`
/// usable records exist.
pub fn consistency(records: &[AnswerRecord], k: u32, w: usize) -> Option<f64> {
    if w == 0 {
        return None;
    }
    let usable: Vec<&str> = records
        .iter()
        .filter(|r| r.step_index <= k && !r.hesitant)
        .map(|r| normalize_answer(&r.answer))
        .collect();
    if usable.len() < w {
        return None;
    }
    let window = &usable[usable.len() - w..];
    let last = window[w - 1];
    let agree = window.iter().filter(|a| **a == last).count();
    Some(agree as f64 / w as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitDecision {
    Continue,
    ExitCertain,
    ExitBudget,
}

/// Decision at the latest record. Certainty wins over budget exhaustion.
pub fn should_exit(trace: &ProbeTrace, cfg: &ProbeConfig) -> ExitDecision {
    decide_at(&trace.records, cfg)
}

fn decide_at(records: &[AnswerRecord], cfg: &ProbeConfig) -> ExitDecision {
    let Some(last) = records.last() else {
        return ExitDecision::Continue;
    };
    if consistency(records, last.step_index, cfg.window).is_some_and(|c| c >= cfg.threshold) {
        ExitDecision::ExitCertain
    } else if last.token_offset >= cfg.max_tokens {
        ExitDecision::ExitBudget
    } else {
        ExitDecision::Continue
    }
}

/// Scans prefixes of `records` and returns the position (0-based) and
/// decision of the first exit, if any.
pub fn first_exit(records: &[AnswerRecord], cfg: &ProbeConfig) -> Option<(usize, ExitDecision)> {
    (1..=records.len()).find_map(|len| match decide_at(&records[..len], cfg) {
        ExitDecision::Continue => None,
        d => Some((len - 1, d)),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub answer: String,
    /// Set when every record was hesitant and the answer is a fallback.
    pub low_confidence: bool,
}

/// The answer reported when the trace stops.
///
/// On a certain exit this is the answer that closed the consistency window.
/// Otherwise it is the latest non-hesitant answer, falling back to the latest
/// answer of any kind.
pub fn final_answer(trace: &ProbeTrace) -> Result<FinalAnswer> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let upto = match (trace.termination_reason, trace.terminated_at) {
        (Some(TerminationReason::Certain), Some(step)) => step,
        _ => u32::MAX,
    };
    let mut prefix = trace.records.iter().filter(|r| r.step_index <= upto);
    if let Some(r) = prefix.clone().rfind(|r| !r.hesitant) {
        return Ok(FinalAnswer {
            answer: normalize_answer(&r.answer).to_string(),
            low_confidence: false,
        });
    }
    let r = prefix.next_back().unwrap_or(&trace.records[trace.records.len() - 1]);
    Ok(FinalAnswer {
        answer: normalize_answer(&r.answer).to_string(),
        low_confidence: true,
    })
}

/// One line of a probe-trace JSONL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub program_id: String,
    pub step_index: u32,
    pub token_offset: u64,
    pub answer: String,
    pub hesitant: bool,
}

/// Reads probe traces from JSONL, grouping records by program in order of
/// first appearance. Blank lines are skipped.
pub fn read_traces<R: BufRead>(reader: R) -> Result<Vec<(String, ProbeTrace)>> {
    let mut programs: Vec<(String, ProbeTrace)> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceLine = serde_json::from_str(&line).map_err(|e| Error::TraceLine {
            line: lineno,
            reason: e.to_string(),
        })?;
        let slot = *index.entry(rec.program_id.clone()).or_insert_with(|| {
            programs.push((rec.program_id.clone(), ProbeTrace::default()));
            programs.len() - 1
        });
        programs[slot]
            .1
            .push(AnswerRecord {
                step_index: rec.step_index,
                token_offset: rec.token_offset,
                answer: rec.answer,
                hesitant: rec.hesitant,
            })
            .map_err(|e| Error::TraceLine {
                line: lineno,
                reason: e.to_string(),
            })?;
    }
    if programs.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(programs)
}

pub fn write_traces<W: Write>(mut out: W, traces: &[(String, ProbeTrace)]) -> Result<()> {
    for (id, trace) in traces {
        for r in &trace.records {
            let line = TraceLine {
                program_id: id.clone(),
                step_index: r.step_index,
                token_offset: r.token_offset,
                answer: r.answer.clone(),
                hesitant: r.hesitant,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Outcome of replaying one recorded trace under a probe configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub program_id: String,
    pub exit_step: u32,
    pub reason: TerminationReason,
    pub tokens_at_exit: u64,
    pub tokens_full: u64,
    pub answer: String,
}

impl ReplayOutcome {
    pub fn savings(&self) -> f64 {
        1.0 - self.tokens_at_exit as f64 / self.tokens_full as f64
    }
}

/// Applies the exit rule to a recorded trace. A trace that ends without
/// triggering an exit is treated as having exhausted its budget at the last
/// record.
pub fn replay(program_id: &str, trace: &ProbeTrace, cfg: &ProbeConfig) -> Result<ReplayOutcome> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut records = trace.records.clone();
    for r in &mut records {
        r.hesitant |= flag_hesitation(&r.answer, &cfg.hesitation_markers);
    }
    let (pos, reason) = match first_exit(&records, cfg) {
        Some((pos, ExitDecision::ExitCertain)) => (pos, TerminationReason::Certain),
        Some((pos, _)) => (pos, TerminationReason::Budget),
        None => (records.len() - 1, TerminationReason::Budget),
    };
    let mut stopped = ProbeTrace {
        records: records[..=pos].to_vec(),
        ..Default::default()
    };
    stopped.terminate(reason);
    let answer = final_answer(&stopped)?.answer;
    Ok(ReplayOutcome {
        program_id: program_id.to_string(),
        exit_step: records[pos].step_index,
        reason,
        tokens_at_exit: records[pos].token_offset,
        tokens_full: records[records.len() - 1].token_offset,
        answer,
    })
}

/// Header of the savings table produced by [`write_savings_table`].
pub const SAVINGS_HEADER: &str = "program_id,exit_step,exit_reason,tokens_at_exit,tokens_full,savings";

/// Writes one CSV row per program plus a final `TOTAL` row. Savings are
/// printed with six decimals so the output is byte-stable.
pub fn write_savings_table<W: Write>(mut out: W, outcomes: &[ReplayOutcome]) -> Result<()> {
    writeln!(out, "{SAVINGS_HEADER}")?;
    let (mut exit, mut full) = (0u64, 0u64);
    for o in outcomes {
        writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            o.program_id,
            o.exit_step,
            o.reason.as_str(),
            o.tokens_at_exit,
            o.tokens_full,
            o.savings()
        )?;
        exit += o.tokens_at_exit;
        full += o.tokens_full;
    }
    let total = if full == 0 { 0.0 } else { 1.0 - exit as f64 / full as f64 };
    writeln!(out, "TOTAL,,,{exit},{full},{total:.6}")?;
    Ok(())
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn records(answers: &[(u8, bool)]) -> Vec<AnswerRecord> {
        answers
            .iter()
            .enumerate()
            .map(|(i, &(a, h))| AnswerRecord {
                step_index: i as u32 + 1,
                token_offset: (i as u64 + 1) * 64,
                answer: a.to_string(),
                hesitant: h,
            })
            .collect()
    }

    fn first_full_agreement(recs: &[AnswerRecord], w: usize) -> Option<usize> {
        (0..recs.len()).find(|&i| consistency(&recs[..=i], recs[i].step_index, w) == Some(1.0))
    }

    proptest! {
        #[test]
        fn agreeing_window_always_exits(prefix in prop::collection::vec((0u8..3, any::<bool>()), 0..6),
                                        w in 1usize..4, tau in 0.01f64..=1.0) {
            let mut answers = prefix;
            answers.extend(std::iter::repeat_n((7u8, false), w));
            let t = ProbeTrace::new(records(&answers)).unwrap();
            let c = cfg_of(w, tau);
            prop_assert_eq!(should_exit(&t, &c), ExitDecision::ExitCertain);
        }

        #[test]
        fn decisions_are_prefix_deterministic(answers in prop::collection::vec((0u8..3, any::<bool>()), 1..10),
                                              extra in prop::collection::vec((0u8..3, any::<bool>()), 0..5),
                                              w in 1usize..4) {
            let c = cfg_of(w, 1.0);
            let base = records(&answers);
            let mut all = answers.clone();
            all.extend(extra);
            let longer = records(&all);
            let d = decide_at(&base, &c);
            prop_assert_eq!(decide_at(&longer[..base.len()], &c), d);
        }

        #[test]
        fn lowering_threshold_never_delays_exit(answers in prop::collection::vec((0u8..3, any::<bool>()), 1..12),
                                                w in 1usize..5, hi in 0.01f64..=1.0, frac in 0.0f64..=1.0) {
            let lo = (hi * frac).max(1e-6);
            let recs = records(&answers);
            let step = |tau| first_exit(&recs, &cfg_of(w, tau)).map(|(p, _)| p).unwrap_or(usize::MAX);
            prop_assert!(step(lo) <= step(hi));
        }
    }

    fn cfg_of(w: usize, tau: f64) -> ProbeConfig {
        ProbeConfig {
            window: w,
            threshold: tau,
            max_tokens: u64::MAX,
            ..Default::default()
        }
    }

    /// Brute force over every trace of length <= 8 on a binary alphabet:
    /// inserting hesitant records delays the first full agreement by at most
    /// the number of insertions.
    #[test]
    fn hesitant_insertions_delay_by_at_most_their_count() {
        for len in 1..=6usize {
            for bits in 0..(1u32 << len) {
                let base: Vec<(u8, bool)> = (0..len).map(|i| (((bits >> i) & 1) as u8, false)).collect();
                for w in 1..=3 {
                    let Some(orig) = first_full_agreement(&records(&base), w) else { continue };
                    for ins in 0..(1u32 << len) {
                        // Insert a hesitant "9" before position p for each set bit p.
                        let mut with = Vec::new();
                        let mut inserted_before_orig = 0;
                        for (p, &item) in base.iter().enumerate() {
                            if (ins >> p) & 1 == 1 {
                                with.push((9u8, true));
                                if p <= orig {
                                    inserted_before_orig += 1;
                                }
                            }
                            with.push(item);
                        }
                        if with.len() > 8 {
                            continue;
                        }
                        let new = first_full_agreement(&records(&with), w).expect("still agrees");
                        assert!(new <= orig + inserted_before_orig, "{base:?} {with:?} w={w}");
                    }
                }
            }
        }
    }
}
