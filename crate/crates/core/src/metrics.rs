//! Certaindex and alternative progress signals.
//!
//! A reasoning program that has produced `n` answers is summarised by a
//! [`Clustering`] of those answers. The entropy of the cluster-size
//! distribution, normalised by its maximum `ln n`, gives the entropy
//! certaindex: 1 when every path agrees and 0 when every path disagrees.
//! Programs that score their paths with a reward model can use the aggregated
//! reward instead, and several signals can be combined by requiring each to
//! clear its own threshold.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One group of reasoning paths that produced the same answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerCluster {
    pub label: String,
    pub size: usize,
}

/// A partition of `n` reasoning paths into answer clusters.
///
/// Clusters are kept in first-seen order, which downstream majority voting
/// relies on for tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    clusters: Vec<AnswerCluster>,
    n: usize,
}

impl Clustering {
    pub fn new(clusters: Vec<AnswerCluster>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::EmptyAnswerSet);
        }
        let mut seen = std::collections::HashSet::new();
        for c in &clusters {
            if c.size == 0 {
                return Err(invalid("cluster size", format!("`{}` has size 0", c.label)));
            }
            if !seen.insert(c.label.as_str()) {
                return Err(invalid("cluster label", format!("`{}` is repeated", c.label)));
            }
        }
        let n = clusters.iter().map(|c| c.size).sum();
        Ok(Self { clusters, n })
    }

    /// Builds a clustering from bare sizes, labelling clusters `c0`, `c1`, ...
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        Self::new(
            sizes
                .iter()
                .enumerate()
                .map(|(i, &size)| AnswerCluster {
                    label: format!("c{i}"),
                    size,
                })
                .collect(),
        )
    }

    pub fn clusters(&self) -> &[AnswerCluster] {
        &self.clusters
    }

    /// Total number of paths.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of clusters.
    pub fn m(&self) -> usize {
        self.clusters.len()
    }

    /// The largest cluster, earliest-seen on ties.
    pub fn plurality(&self) -> &AnswerCluster {
        let mut best = &self.clusters[0];
        for c in &self.clusters[1..] {
            if c.size > best.size {
                best = c;
            }
        }
        best
    }
}

/// Normalises an answer before exact matching: surrounding whitespace only.
pub fn normalize_answer(answer: &str) -> &str {
    answer.trim()
}

/// Groups answers whose normalised forms are byte-identical.
pub fn cluster_exact<S: AsRef<str>>(answers: &[S]) -> Result<Clustering> {
    if answers.is_empty() {
        return Err(Error::EmptyAnswerSet);
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut clusters: Vec<AnswerCluster> = Vec::new();
    for a in answers {
        let key = normalize_answer(a.as_ref());
        match index.get(key) {
            Some(&i) => clusters[i].size += 1,
            None => {
                index.insert(key, clusters.len());
                clusters.push(AnswerCluster {
                    label: key.to_string(),
                    size: 1,
                });
            }
        }
    }
    Clustering::new(clusters)
}

/// Single-linkage clustering: two answers share a cluster iff a chain of
/// pairs with `similarity >= cutoff` connects them.
///
/// Each cluster is labelled by its earliest member (normalised).
pub fn cluster_similarity<S, F>(answers: &[S], similarity: F, cutoff: f64) -> Result<Clustering>
where
    S: AsRef<str>,
    F: Fn(&str, &str) -> f64,
{
    if answers.is_empty() {
        return Err(Error::EmptyAnswerSet);
    }
    if !(0.0..=1.0).contains(&cutoff) {
        return Err(invalid("cutoff", format!("{cutoff} is outside [0, 1]")));
    }
    let norm: Vec<&str> = answers.iter().map(|a| normalize_answer(a.as_ref())).collect();
    let n = norm.len();
    let mut parent: Vec<usize> = (0..n).collect();

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    for i in 0..n {
        for j in (i + 1)..n {
            if similarity(norm[i], norm[j]) >= cutoff {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    // Keep the smaller index as root so labels are first-seen.
                    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                    parent[hi] = lo;
                }
            }
        }
    }

    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut clusters: Vec<AnswerCluster> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        match slot.get(&root) {
            Some(&s) => clusters[s].size += 1,
            None => {
                slot.insert(root, clusters.len());
                clusters.push(AnswerCluster {
                    label: norm[root].to_string(),
                    size: 1,
                });
            }
        }
    }
    // Distinct roots can share a normalised label when similarity is not
    // reflexive; disambiguate so the clustering invariant holds.
    let mut used = std::collections::HashSet::new();
    for c in clusters.iter_mut() {
        let base = c.label.clone();
        let mut k = 1;
        while !used.insert(c.label.clone()) {
            c.label = format!("{base}#{k}");
            k += 1;
        }
    }
    Clustering::new(clusters)
}

/// Jaccard similarity of the character sets of two strings.
pub fn char_jaccard(a: &str, b: &str) -> f64 {
    let sa: std::collections::BTreeSet<char> = a.chars().collect();
    let sb: std::collections::BTreeSet<char> = b.chars().collect();
    jaccard(&sa, &sb)
}

/// Jaccard similarity of character trigram sets. Strings shorter than three
/// characters contribute themselves as a single shingle.
pub fn trigram_jaccard(a: &str, b: &str) -> f64 {
    jaccard(&trigrams(a), &trigrams(b))
}

fn trigrams(s: &str) -> std::collections::BTreeSet<String> {
    let chars: Vec<char> = s.chars().collect();
    if chars.len() < 3 {
        return std::iter::once(s.to_string()).collect();
    }
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

fn jaccard<T: Ord>(a: &std::collections::BTreeSet<T>, b: &std::collections::BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Entropy (natural log) of the cluster-size distribution.
pub fn semantic_entropy(c: &Clustering) -> f64 {
    let n = c.n() as f64;
    let h: f64 = c
        .clusters()
        .iter()
        .map(|cl| {
            let p = cl.size as f64 / n;
            -p * p.ln()
        })
        .sum();
    h.clamp(0.0, n.ln())
}

/// Entropy certaindex `(ln n - H) / ln n`, clamped to `[0, 1]`.
///
/// A single path is treated as fully self-consistent and scores 1.
pub fn certaindex_entropy(c: &Clustering) -> f64 {
    if c.n() <= 1 {
        return 1.0;
    }
    let max = (c.n() as f64).ln();
    ((max - semantic_entropy(c)) / max).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardAggregation {
    Mean,
    Max,
}

/// Terminal rewards of a program's paths, each normalised to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSet {
    rewards: Vec<f64>,
    aggregation: RewardAggregation,
}

impl RewardSet {
    pub fn new(rewards: Vec<f64>, aggregation: RewardAggregation) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::Empty("reward set"));
        }
        if let Some(&bad) = rewards.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::RewardOutOfRange(bad));
        }
        Ok(Self {
            rewards,
            aggregation,
        })
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn aggregation(&self) -> RewardAggregation {
        self.aggregation
    }
}

pub fn certaindex_reward(r: &RewardSet) -> f64 {
    match r.aggregation {
        RewardAggregation::Mean => r.rewards.iter().sum::<f64>() / r.rewards.len() as f64,
        RewardAggregation::Max => r.rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Mean over paths of `sum_logprob / token_count`.
pub fn mean_norm_logprob(paths: &[(f64, u64)]) -> Result<f64> {
    if paths.is_empty() {
        return Err(Error::Empty("path list"));
    }
    let mut total = 0.0;
    for (i, &(lp, tokens)) in paths.iter().enumerate() {
        if tokens == 0 {
            return Err(Error::ZeroTokenCount(i));
        }
        total += lp / tokens as f64;
    }
    Ok(total / paths.len() as f64)
}

/// A named progress signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Normalised entropy certaindex.
    Entropy,
    /// Aggregated reward certaindex.
    Reward,
    /// Sliding-window answer consistency of a probed chain of thought.
    Consistency,
    MeanOutputLength,
    MeanNormLogprob,
}

impl Signal {
    /// Direction used when a threshold does not specify one.
    pub fn default_direction(self) -> Direction {
        match self {
            // Longer outputs indicate harder problems.
            Signal::MeanOutputLength => Direction::AtMost,
            _ => Direction::AtLeast,
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Signal::Entropy => "entropy",
            Signal::Reward => "reward",
            Signal::Consistency => "consistency",
            Signal::MeanOutputLength => "mean_output_length",
            Signal::MeanNormLogprob => "mean_norm_logprob",
        };
        f.write_str(s)
    }
}

/// Every signal observed for a program at one knob point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalVector {
    pub certaindex_entropy: Option<f64>,
    pub certaindex_reward: Option<f64>,
    pub consistency: Option<f64>,
    pub mean_output_length: Option<f64>,
    pub mean_norm_logprob: Option<f64>,
}

impl SignalVector {
    pub fn get(&self, signal: Signal) -> Option<f64> {
        match signal {
            Signal::Entropy => self.certaindex_entropy,
            Signal::Reward => self.certaindex_reward,
            Signal::Consistency => self.consistency,
            Signal::MeanOutputLength => self.mean_output_length,
            Signal::MeanNormLogprob => self.mean_norm_logprob,
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Met when the signal is `>=` the cutoff.
    AtLeast,
    /// Met when the signal is `<=` the cutoff.
    AtMost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub signal: Signal,
    pub cutoff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
}

impl Threshold {
    pub fn at_least(signal: Signal, cutoff: f64) -> Self {
        Self {
            signal,
            cutoff,
            direction: None,
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction.unwrap_or(self.signal.default_direction())
    }

    pub fn is_met(&self, value: f64) -> bool {
        match self.direction() {
            Direction::AtLeast => value >= self.cutoff,
            Direction::AtMost => value <= self.cutoff,
        }
    }
}

/// True iff every configured threshold is met. An empty set is vacuously met.
pub fn combined_meets_thresholds(s: &SignalVector, thresholds: &[Threshold]) -> Result<bool> {
    let mut all = true;
    for t in thresholds {
        let v = s.get(t.signal).ok_or(Error::MissingSignal(t.signal))?;
        all &= t.is_met(v);
    }
    Ok(all)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn all_partitions(n: usize) -> Vec<Vec<usize>> {
        // Integer partitions of n, as cluster-size multisets.
        fn rec(n: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if n == 0 {
                out.push(cur.clone());
                return;
            }
            for s in (1..=n.min(max)).rev() {
                cur.push(s);
                rec(n - s, s, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(n, n, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn merging_clusters_never_increases_entropy() {
        for n in 1..=6 {
            for sizes in all_partitions(n) {
                let h = semantic_entropy(&Clustering::from_sizes(&sizes).unwrap());
                assert!(h >= 0.0 && h <= (n as f64).ln() + 1e-12);
                for i in 0..sizes.len() {
                    for j in (i + 1)..sizes.len() {
                        let mut merged = sizes.clone();
                        merged[i] += merged[j];
                        merged.remove(j);
                        let hm = semantic_entropy(&Clustering::from_sizes(&merged).unwrap());
                        assert!(hm <= h + 1e-12, "{sizes:?} -> {merged:?}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn entropy_bounds_and_extremes(sizes in prop::collection::vec(1usize..6, 1..8)) {
            let c = Clustering::from_sizes(&sizes).unwrap();
            let n = c.n() as f64;
            let h = semantic_entropy(&c);
            prop_assert!(h >= 0.0 && h <= n.ln() + 1e-12);
            if c.m() == 1 { prop_assert_eq!(h, 0.0); }
            if sizes.iter().all(|&s| s == 1) { prop_assert!((h - n.ln()).abs() < 1e-12); }
            let ci = certaindex_entropy(&c);
            prop_assert!((0.0..=1.0).contains(&ci));
        }

        #[test]
        fn certaindex_is_permutation_and_label_invariant(
            sizes in prop::collection::vec(1usize..6, 1..8),
            seed in any::<u64>(),
        ) {
            let c = Clustering::from_sizes(&sizes).unwrap();
            let mut perm = sizes.clone();
            // Deterministic shuffle from the seed.
            let mut s = seed;
            for i in (1..perm.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let relabelled = Clustering::new(
                perm.iter().enumerate().map(|(i, &size)| AnswerCluster { label: format!("z{i}"), size }).collect()
            ).unwrap();
            prop_assert!((certaindex_entropy(&c) - certaindex_entropy(&relabelled)).abs() < 1e-12);
        }

        #[test]
        fn reward_aggregate_is_bounded(rewards in prop::collection::vec(0.0f64..=1.0, 1..10), max in any::<bool>()) {
            let agg = if max { RewardAggregation::Max } else { RewardAggregation::Mean };
            let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let v = certaindex_reward(&RewardSet::new(rewards, agg).unwrap());
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn exact_clustering_is_idempotent(answers in prop::collection::vec("[a-c]{1,2}", 1..12)) {
            let c = cluster_exact(&answers).unwrap();
            prop_assert_eq!(c.n(), answers.len());
            let expanded: Vec<String> = c.clusters().iter()
                .flat_map(|cl| std::iter::repeat_n(cl.label.clone(), cl.size))
                .collect();
            prop_assert_eq!(cluster_exact(&expanded).unwrap(), c);
        }
    }
}
