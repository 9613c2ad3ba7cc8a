//! Birthday-paradox support-size estimation.
//!
//! A generator with support size S produces a duplicate in a batch of N
//! i.i.d. samples with probability roughly 1 − exp(−N²/2S), so the smallest
//! N at which duplicates appear reliably pins the support near N². The
//! estimator doubles N until more than the configured fraction of trials
//! contains a duplicate pair, and reports N² with the full trial log.
//!
//! Duplicates are decided automatically: a pair is a duplicate when its
//! squared Euclidean embedding distance falls strictly below a threshold τ.
//! All distance arithmetic runs in f64 regardless of training precision.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

/// Default top-pair count inspected per trial. One pair suffices to detect
/// a duplicate (zero-distance pairs sort first); a few more enrich the
/// audit report.
pub const DEFAULT_TOP_K: usize = 10;
/// Default duplicate-rate threshold: more than half the trials.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;
/// Default trials per batch size.
pub const DEFAULT_TRIALS_PER_N: usize = 20;
/// Default starting batch size for the doubling schedule.
pub const DEFAULT_N0: usize = 3;
/// Default batch-size cap; reaching it turns the estimate into a lower bound.
pub const DEFAULT_N_CAP: usize = 4096;
/// Default calibration percentile for τ: the 1st percentile of pairwise
/// distances among real samples.
pub const DEFAULT_TAU_PERCENTILE: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum DiversityError {
    #[error("need at least 2 samples, got {0}")]
    FewSamples(usize),
    #[error("k = {k} exceeds the {pairs} available pairs")]
    TooManyPairs { k: usize, pairs: usize },
    #[error("embedding dimension changed mid-run: row {index} has {got}, expected {want}")]
    DimMismatch {
        index: usize,
        got: usize,
        want: usize,
    },
    #[error("bad estimator setting: {0}")]
    BadSetting(String),
    #[error("sampler returned {got} rows, requested {want}")]
    ShortSample { got: usize, want: usize },
    #[error("calibration threshold is not positive ({0}); the reference set contains duplicates, pass an explicit threshold")]
    DegenerateThreshold(f64),
}

/// What the sample rows are: flattened pixels, or codes from the trained
/// encoder. The distance is squared Euclidean either way; the row width
/// must stay fixed for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    RawPixel,
    EncoderBottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
}

/// One scored pair, `i < j` indexing into the trial's sample batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub n: usize,
    pub duplicate_rate: f64,
}

/// Estimator outcome. `estimate` is `final_n²`; when the doubling schedule
/// hit the cap without confirming duplicates it is only a lower bound.
/// `pairs` holds the duplicate pairs of the first confirming trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEstimate {
    pub final_n: usize,
    pub estimate: u64,
    pub estimate_is_lower_bound: bool,
    pub embedding: EmbeddingSpec,
    pub trials: Vec<TrialLog>,
    pub pairs: Vec<PairDistance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BirthdayOpts {
    pub n0: usize,
    pub trials_per_n: usize,
    pub confidence: f64,
    pub top_k: usize,
    pub n_cap: usize,
}

impl Default for BirthdayOpts {
    fn default() -> Self {
        Self {
            n0: DEFAULT_N0,
            trials_per_n: DEFAULT_TRIALS_PER_N,
            confidence: DEFAULT_CONFIDENCE,
            top_k: DEFAULT_TOP_K,
            n_cap: DEFAULT_N_CAP,
        }
    }
}

impl BirthdayOpts {
    fn validate(&self) -> Result<(), DiversityError> {
        let bad = |msg: String| Err(DiversityError::BadSetting(msg));
        if self.n0 < 2 {
            return bad(format!("starting batch size {} < 2", self.n0));
        }
        if self.n_cap < self.n0 {
            return bad(format!("cap {} below starting size {}", self.n_cap, self.n0));
        }
        if self.trials_per_n == 0 {
            return bad("zero trials per batch size".into());
        }
        if !(self.confidence > 0.0 && self.confidence <= 1.0) {
            return bad(format!("confidence {} outside (0, 1]", self.confidence));
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        Ok(())
    }
}

pub fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn check_rows(rows: &[Vec<f64>]) -> Result<(), DiversityError> {
    if rows.len() < 2 {
        return Err(DiversityError::FewSamples(rows.len()));
    }
    let want = rows[0].len();
    for (index, r) in rows.iter().enumerate() {
        if r.len() != want {
            return Err(DiversityError::DimMismatch {
                index,
                got: r.len(),
                want,
            });
        }
    }
    Ok(())
}

// max-heap key: worst kept pair on top, ties broken so that the
// lexicographically larger index pair is evicted first
#[derive(PartialEq)]
struct HeapPair(f64, usize, usize);

impl Eq for HeapPair {}

impl Ord for HeapPair {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .total_cmp(&other.0)
            .then(self.1.cmp(&other.1))
            .then(self.2.cmp(&other.2))
    }
}

impl PartialOrd for HeapPair {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The exact `k` closest pairs by squared Euclidean distance, ascending,
/// ties broken by `(i, j)` lexicographic order. A bounded heap keeps memory
/// at `O(k)` while every one of the `n(n−1)/2` pairs is examined.
pub fn top_k_pairs(rows: &[Vec<f64>], k: usize) -> Result<Vec<PairDistance>, DiversityError> {
    check_rows(rows)?;
    let n = rows.len();
    let total = n * (n - 1) / 2;
    if k > total {
        return Err(DiversityError::TooManyPairs { k, pairs: total });
    }
    let mut heap: BinaryHeap<HeapPair> = BinaryHeap::with_capacity(k + 1);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_distance(&rows[i], &rows[j]);
            if heap.len() < k {
                heap.push(HeapPair(d, i, j));
            } else if let Some(worst) = heap.peek() {
                if HeapPair(d, i, j) < *worst {
                    heap.pop();
                    heap.push(HeapPair(d, i, j));
                }
            }
        }
    }
    let mut out: Vec<PairDistance> = heap
        .into_iter()
        .map(|HeapPair(distance, i, j)| PairDistance { i, j, distance })
        .collect();
    out.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });
    Ok(out)
}

/// Strict threshold rule: a pair at exactly τ is not a duplicate.
pub fn duplicate_decision(distance: f64, tau: f64) -> bool {
    assert!(tau > 0.0, "duplicate threshold must be positive");
    distance < tau
}

/// Fraction of `trials` batches of `n` samples that contain at least one
/// duplicate pair, plus the duplicate pairs of the first batch that had any.
pub fn duplicate_rate<S>(
    sampler: &mut S,
    n: usize,
    trials: usize,
    tau: f64,
    top_k: usize,
) -> Result<(f64, Vec<PairDistance>), DiversityError>
where
    S: FnMut(usize) -> Vec<Vec<f64>>,
{
    let mut hits = 0usize;
    let mut first_dups: Vec<PairDistance> = Vec::new();
    for _ in 0..trials {
        let rows = sampler(n);
        if rows.len() != n {
            return Err(DiversityError::ShortSample {
                got: rows.len(),
                want: n,
            });
        }
        let k = top_k.min(n * (n - 1) / 2);
        let pairs = top_k_pairs(&rows, k)?;
        let dups: Vec<PairDistance> = pairs
            .into_iter()
            .filter(|p| duplicate_decision(p.distance, tau))
            .collect();
        if !dups.is_empty() {
            hits += 1;
            if first_dups.is_empty() {
                first_dups = dups;
            }
        }
    }
    Ok((hits as f64 / trials as f64, first_dups))
}

/// Doubles the batch size from `opts.n0` until at least `opts.confidence`
/// of the trials contain a duplicate, then reports `N²`. Hitting `opts.n_cap`
/// first downgrades the result to a lower bound.
pub fn birthday_estimate<S>(
    mut sampler: S,
    embedding: EmbeddingSpec,
    tau: f64,
    opts: &BirthdayOpts,
) -> Result<SupportEstimate, DiversityError>
where
    S: FnMut(usize) -> Vec<Vec<f64>>,
{
    opts.validate()?;
    if !(tau > 0.0) {
        return Err(DiversityError::BadSetting(format!(
            "duplicate threshold {tau} must be positive"
        )));
    }
    let mut trials = Vec::new();
    let mut n = opts.n0;
    loop {
        let (rate, dups) =
            duplicate_rate(&mut sampler, n, opts.trials_per_n, tau, opts.top_k)?;
        trials.push(TrialLog {
            n,
            duplicate_rate: rate,
        });
        let confirmed = rate >= opts.confidence;
        if confirmed || n.saturating_mul(2) > opts.n_cap {
            return Ok(SupportEstimate {
                final_n: n,
                estimate: (n as u64).pow(2),
                estimate_is_lower_bound: !confirmed,
                embedding,
                trials,
                pairs: dups,
            });
        }
        n *= 2;
    }
}

/// τ calibration: the nearest-rank `percentile` (in percent) of all pairwise
/// distances among the reference rows. Errors when the result is not
/// positive, which means the reference set itself contains duplicates.
pub fn percentile_threshold(
    rows: &[Vec<f64>],
    percentile: f64,
) -> Result<f64, DiversityError> {
    check_rows(rows)?;
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(DiversityError::BadSetting(format!(
            "percentile {percentile} outside (0, 100]"
        )));
    }
    let n = rows.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_distance(&rows[i], &rows[j]));
        }
    }
    dists.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * dists.len() as f64).ceil() as usize;
    let tau = dists[rank.saturating_sub(1).min(dists.len() - 1)];
    if tau > 0.0 {
        Ok(tau)
    } else {
        Err(DiversityError::DegenerateThreshold(tau))
    }
}
