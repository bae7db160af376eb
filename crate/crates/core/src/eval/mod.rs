//! Ranking metrics, repeat/non-repeat breakdowns and popularity baselines.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::data::{PrefixExample, Session};
use crate::model::{ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no examples to evaluate")]
    Empty,
    #[error("cutoff k must be at least 1")]
    ZeroK,
    #[error("target {target} outside {size} scored items")]
    Target { target: usize, size: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Item indices by descending score, ties by ascending index, truncated to `k`.
pub fn rank(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// 1-based position `target` would take in [`rank`]'s full ordering, found
/// without sorting.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count();
    ahead + 1
}

pub fn mrr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Anything that scores every item for a batch of prefixes.
pub trait Recommender {
    fn score(&self, examples: &[PrefixExample]) -> Result<Vec<Vec<f64>>>;
}

impl Recommender for ModelParams {
    fn score(&self, examples: &[PrefixExample]) -> Result<Vec<Vec<f64>>> {
        Ok(ModelParams::score(self, examples, 256)?)
    }
}

fn item_counts(sessions: &[Session], num_items: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_items];
    for s in sessions {
        for &i in &s.items {
            counts[i] += 1;
        }
    }
    counts
}

/// Global click counts, identical for every prefix.
#[derive(Debug, Clone)]
pub struct Pop {
    counts: Vec<u64>,
}

impl Pop {
    pub fn from_sessions(train: &[Session], num_items: usize) -> Self {
        Self {
            counts: item_counts(train, num_items),
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn ranking(&self, k: usize) -> Vec<usize> {
        rank(&self.scores(), k)
    }

    fn scores(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

impl Recommender for Pop {
    fn score(&self, examples: &[PrefixExample]) -> Result<Vec<Vec<f64>>> {
        let s = self.scores();
        Ok(examples.iter().map(|_| s.clone()).collect())
    }
}

/// In-prefix counts first, global counts as tie-break.
#[derive(Debug, Clone)]
pub struct SPop {
    pop: Pop,
}

impl SPop {
    pub fn from_sessions(train: &[Session], num_items: usize) -> Self {
        Self {
            pop: Pop::from_sessions(train, num_items),
        }
    }

    /// `count_in_prefix · (max_global + 1) + global`, so one extra in-prefix
    /// occurrence outweighs any global difference.
    pub fn scores(&self, prefix: &[usize]) -> Vec<f64> {
        let base = self.pop.counts.iter().max().copied().unwrap_or(0) + 1;
        let mut local = vec![0u64; self.pop.counts.len()];
        for &i in prefix {
            local[i] += 1;
        }
        local
            .iter()
            .zip(&self.pop.counts)
            .map(|(&l, &g)| (l * base + g) as f64)
            .collect()
    }

    pub fn ranking(&self, prefix: &[usize], k: usize) -> Vec<usize> {
        rank(&self.scores(prefix), k)
    }
}

impl Recommender for SPop {
    fn score(&self, examples: &[PrefixExample]) -> Result<Vec<Vec<f64>>> {
        Ok(examples.iter().map(|e| self.scores(&e.prefix)).collect())
    }
}

/// Sums for one group of examples, one entry per cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub count: usize,
    pub hits: Vec<usize>,
    pub reciprocal_sum: Vec<f64>,
}

impl Segment {
    fn new(n_k: usize) -> Self {
        Self {
            count: 0,
            hits: vec![0; n_k],
            reciprocal_sum: vec![0.0; n_k],
        }
    }

    fn add(&mut self, rank: usize, ks: &[usize]) {
        self.count += 1;
        for (j, &k) in ks.iter().enumerate() {
            self.hits[j] += recall_at_k(rank, k) as usize;
            self.reciprocal_sum[j] += mrr_at_k(rank, k);
        }
    }

    pub fn mrr(&self, j: usize) -> Option<f64> {
        (self.count > 0).then(|| self.reciprocal_sum[j] / self.count as f64)
    }

    pub fn recall(&self, j: usize) -> Option<f64> {
        (self.count > 0).then(|| self.hits[j] as f64 / self.count as f64)
    }
}

/// Metrics for every cutoff, optionally split by repeat targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    pub overall: Segment,
    pub repeat: Option<Segment>,
    pub non_repeat: Option<Segment>,
}

/// One machine-readable line of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub split: String,
    pub model: String,
    pub segment: String,
    pub k: usize,
    pub examples: usize,
    pub mrr: Option<f64>,
    pub recall: Option<f64>,
}

impl MetricReport {
    fn k_index(&self, k: usize) -> usize {
        self.ks.iter().position(|&x| x == k).unwrap_or_else(|| panic!("k={k} was not evaluated"))
    }

    pub fn mrr(&self, k: usize) -> f64 {
        self.overall.mrr(self.k_index(k)).expect("non-empty report")
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.overall.recall(self.k_index(k)).expect("non-empty report")
    }

    pub fn segments(&self) -> Vec<(&'static str, &Segment)> {
        let mut out = vec![("overall", &self.overall)];
        if let (Some(r), Some(n)) = (&self.repeat, &self.non_repeat) {
            out.push(("repeat", r));
            out.push(("non-repeat", n));
        }
        out
    }

    pub fn records(&self, split: &str, model: &str) -> Vec<MetricRecord> {
        let mut out = Vec::new();
        for (name, seg) in self.segments() {
            for (j, &k) in self.ks.iter().enumerate() {
                out.push(MetricRecord {
                    split: split.into(),
                    model: model.into(),
                    segment: name.into(),
                    k,
                    examples: seg.count,
                    mrr: seg.mrr(j),
                    recall: seg.recall(j),
                });
            }
        }
        out
    }

    /// `key=value` lines, one per segment and cutoff.
    pub fn to_text(&self, split: &str, model: &str) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        for r in self.records(split, model) {
            let _ = writeln!(
                s,
                "split={} model={} segment={} k={} examples={} mrr={} recall={}",
                r.split,
                r.model,
                r.segment,
                r.k,
                r.examples,
                fmt(r.mrr),
                fmt(r.recall)
            );
        }
        s
    }
}

/// Scores `examples` in chunks and averages the metrics per example.
pub fn evaluate(
    rec: &dyn Recommender,
    examples: &[PrefixExample],
    ks: &[usize],
    breakdown: bool,
) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(EvalError::Empty);
    }
    if ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let mut overall = Segment::new(ks.len());
    let mut repeat = Segment::new(ks.len());
    let mut non_repeat = Segment::new(ks.len());
    for chunk in examples.chunks(1024) {
        let scores = rec.score(chunk)?;
        for (e, s) in chunk.iter().zip(&scores) {
            if e.target >= s.len() {
                return Err(EvalError::Target {
                    target: e.target,
                    size: s.len(),
                });
            }
            let r = rank_of(s, e.target);
            overall.add(r, ks);
            if e.is_repeat {
                repeat.add(r, ks);
            } else {
                non_repeat.add(r, ks);
            }
        }
    }
    Ok(MetricReport {
        ks: ks.to_vec(),
        overall,
        repeat: breakdown.then_some(repeat),
        non_repeat: breakdown.then_some(non_repeat),
    })
}
