//! Identification metrics over prediction matrices: accuracy, pairwise and
//! multiclass AUC, and accuracy limited to an N-class candidate set.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::PredictionMatrix;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction matrix has no rows")]
    EmptyMatrix,
    #[error("pairwise AUC needs at least one score on each side")]
    EmptySide,
    #[error("need at least 2 classes with test sessions, found {0}")]
    TooFewClasses(usize),
    #[error("N = {n} outside 1..={classes}")]
    NOutOfRange { n: usize, classes: usize },
    #[error("enumerating {subsets} subsets is too large; supply a Monte Carlo seed")]
    EnumerationTooLarge { subsets: u128 },
    #[error("unknown tie policy {0:?} (expected strict or half)")]
    UnknownTiePolicy(String),
}

/// Credit given to tied scores in AUC pair comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TiePolicy {
    /// Ties score 0 (literal strict indicator).
    Strict,
    /// Ties score 1/2 (standard AUC).
    #[default]
    Half,
}

impl TiePolicy {
    fn tie_value(self) -> f64 {
        match self {
            TiePolicy::Strict => 0.0,
            TiePolicy::Half => 0.5,
        }
    }
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::Strict => "strict",
            TiePolicy::Half => "half",
        })
    }
}

impl FromStr for TiePolicy {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(TiePolicy::Strict),
            "half" => Ok(TiePolicy::Half),
            _ => Err(MetricError::UnknownTiePolicy(s.to_string())),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &PredictionMatrix) -> Result<f64, MetricError> {
    if pred.is_empty() {
        return Err(MetricError::EmptyMatrix);
    }
    let correct = pred
        .rows
        .iter()
        .filter(|r| argmax(&r.probs) == r.true_class)
        .count();
    Ok(correct as f64 / pred.rows.len() as f64)
}

/// Probability that a score from `a` exceeds one from `b`, with ties
/// credited per `tie`. Sort-and-merge, `O((|a| + |b|) log)`.
pub fn pairwise_auc(a: &[f64], b: &[f64], tie: TiePolicy) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptySide);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    // For each a, count b strictly below and b equal.
    let (mut wins, mut ties) = (0u64, 0u64);
    let (mut lo, mut hi) = (0usize, 0usize);
    for &x in &a {
        while lo < b.len() && b[lo] < x {
            lo += 1;
        }
        hi = hi.max(lo);
        while hi < b.len() && b[hi] <= x {
            hi += 1;
        }
        wins += lo as u64;
        ties += (hi - lo) as u64;
    }
    let total = (a.len() * b.len()) as f64;
    Ok((wins as f64 + tie.tie_value() * ties as f64) / total)
}

/// Mean over ordered pairs of populated classes (A, B) of the AUC that
/// column A separates true-A rows from true-B rows. Classes without test
/// rows are left out of the average.
pub fn multiclass_auc(pred: &PredictionMatrix, tie: TiePolicy) -> Result<f64, MetricError> {
    let all: Vec<usize> = (0..pred.n_classes()).collect();
    multiclass_auc_over(pred, &all, tie)
}

/// Multiclass AUC restricted to `classes` (rows of other classes ignored,
/// scores not renormalized).
pub fn multiclass_auc_over(
    pred: &PredictionMatrix,
    classes: &[usize],
    tie: TiePolicy,
) -> Result<f64, MetricError> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in pred.rows.iter().enumerate() {
        by_class.entry(r.true_class).or_default().push(i);
    }
    let populated: Vec<usize> = classes
        .iter()
        .copied()
        .filter(|c| by_class.contains_key(c))
        .collect();
    let empty = classes.len() - populated.len();
    if empty > 0 {
        log::warn!("{empty} class(es) without test sessions excluded from multiclass AUC");
    }
    if populated.len() < 2 {
        return Err(MetricError::TooFewClasses(populated.len()));
    }
    let mut total = 0.0;
    for &ca in &populated {
        let a_scores: Vec<f64> = by_class[&ca]
            .iter()
            .map(|&i| pred.rows[i].probs[ca])
            .collect();
        for &cb in &populated {
            if ca == cb {
                continue;
            }
            let b_scores: Vec<f64> = by_class[&cb]
                .iter()
                .map(|&i| pred.rows[i].probs[ca])
                .collect();
            total += pairwise_auc(&a_scores, &b_scores, tie)?;
        }
    }
    let k = populated.len() as f64;
    Ok(total / (k * (k - 1.0)))
}

/// Binomial coefficient as f64 (exact for the magnitudes used here).
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn binomial_u128(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of classes scored strictly above the true class.
pub fn n_error(probs: &[f64], true_class: usize) -> usize {
    let own = probs[true_class];
    probs.iter().filter(|&&p| p > own).count()
}

fn check_n(pred: &PredictionMatrix, n: usize) -> Result<(), MetricError> {
    if pred.is_empty() {
        return Err(MetricError::EmptyMatrix);
    }
    if n == 0 || n > pred.n_classes() {
        return Err(MetricError::NOutOfRange {
            n,
            classes: pred.n_classes(),
        });
    }
    Ok(())
}

/// Mean over rows of `C(|C| - N_error, N) / C(|C|, N)`.
pub fn n_class_accuracy(pred: &PredictionMatrix, n: usize) -> Result<f64, MetricError> {
    check_n(pred, n)?;
    let c = pred.n_classes();
    let denom = binomial(c, n);
    let sum: f64 = pred
        .rows
        .iter()
        .map(|r| binomial(c - n_error(&r.probs, r.true_class), n) / denom)
        .sum();
    Ok(sum / pred.rows.len() as f64)
}

/// Closed form for candidate sets that always contain the true class:
/// mean over rows of `C(|C| - 1 - N_error, N - 1) / C(|C| - 1, N - 1)`.
pub fn n_class_accuracy_conditioned(pred: &PredictionMatrix, n: usize) -> Result<f64, MetricError> {
    check_n(pred, n)?;
    let c = pred.n_classes();
    let denom = binomial(c - 1, n - 1);
    let sum: f64 = pred
        .rows
        .iter()
        .map(|r| binomial(c - 1 - n_error(&r.probs, r.true_class), n - 1) / denom)
        .sum();
    Ok(sum / pred.rows.len() as f64)
}

/// Which candidate sets the enumeration oracle draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetConvention {
    /// Every size-N subset of the classes; the row succeeds when no member
    /// of the subset outscores the true class.
    Paper,
    /// Only subsets containing the true class; the row succeeds when the
    /// true class is the argmax within the subset.
    Conditioned,
}

/// Largest subset count enumerated exhaustively.
pub const MAX_ENUMERATED_SUBSETS: u128 = 5_000_000;

/// Verification oracle for N-class accuracy: enumerate (or, given a seed,
/// sample `samples` of) the candidate subsets and count successes directly.
/// A tie with the true class does not count as an error, matching the
/// strict inequality that defines `N_error`.
pub fn n_class_accuracy_oracle(
    pred: &PredictionMatrix,
    n: usize,
    convention: SubsetConvention,
    monte_carlo: Option<(u64, usize)>,
) -> Result<f64, MetricError> {
    check_n(pred, n)?;
    let c = pred.n_classes();
    let mut total = 0.0;
    for (row_idx, r) in pred.rows.iter().enumerate() {
        let own = r.probs[r.true_class];
        let beaten = |subset: &[usize]| subset.iter().all(|&k| !(r.probs[k] > own));
        let rate = match convention {
            SubsetConvention::Paper => {
                let all: Vec<usize> = (0..c).collect();
                subset_rate(&all, n, monte_carlo, row_idx, |s| beaten(s))?
            }
            SubsetConvention::Conditioned => {
                let others: Vec<usize> = (0..c).filter(|&k| k != r.true_class).collect();
                subset_rate(&others, n - 1, monte_carlo, row_idx, |s| beaten(s))?
            }
        };
        total += rate;
    }
    Ok(total / pred.rows.len() as f64)
}

fn subset_rate(
    pool: &[usize],
    k: usize,
    monte_carlo: Option<(u64, usize)>,
    row_idx: usize,
    mut success: impl FnMut(&[usize]) -> bool,
) -> Result<f64, MetricError> {
    let count = binomial_u128(pool.len(), k);
    if count <= MAX_ENUMERATED_SUBSETS {
        let mut hits = 0u128;
        for_each_subset(pool, k, |s| {
            if success(s) {
                hits += 1;
            }
        });
        return Ok(hits as f64 / count as f64);
    }
    let Some((seed, samples)) = monte_carlo else {
        return Err(MetricError::EnumerationTooLarge { subsets: count });
    };
    let mut rng = crate::seed::rng(seed, &[row_idx as u64]);
    let mut buf = Vec::with_capacity(k);
    let mut hits = 0usize;
    for _ in 0..samples {
        buf.clear();
        buf.extend(sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]));
        if success(&buf) {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.max(1) as f64)
}

/// Calls `f` on every size-`k` subset of `pool` in lexicographic order.
pub fn for_each_subset(pool: &[usize], k: usize, mut f: impl FnMut(&[usize])) {
    let n = pool.len();
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    let mut buf = vec![0; k];
    loop {
        for (b, &i) in buf.iter_mut().zip(&idx) {
            *b = pool[i];
        }
        f(&buf);
        // Advance to the next combination.
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub design: String,
    pub params: serde_json::Value,
    pub params_digest: String,
    pub accuracy: f64,
    pub multiclass_auc: f64,
    /// Closed-form N-class accuracy (candidate sets drawn from all classes).
    pub n_class_accuracy: BTreeMap<usize, f64>,
    /// Same, with candidate sets that always contain the true class.
    pub n_class_accuracy_conditioned: BTreeMap<usize, f64>,
    pub sessions: usize,
    pub classes: usize,
    pub seed: u64,
    pub tie_policy: TiePolicy,
}

impl EvaluationReport {
    /// Evaluates `pred`. N values above the class count are skipped with a warning.
    pub fn evaluate(
        design: &str,
        params: serde_json::Value,
        seed: u64,
        pred: &PredictionMatrix,
        n_values: &[usize],
        tie: TiePolicy,
    ) -> Result<Self, MetricError> {
        let mut limited = BTreeMap::new();
        let mut conditioned = BTreeMap::new();
        for &n in n_values {
            if n == 0 || n > pred.n_classes() {
                log::warn!(
                    "{design}: acc@{n} skipped, only {} classes enrolled",
                    pred.n_classes()
                );
                continue;
            }
            limited.insert(n, n_class_accuracy(pred, n)?);
            conditioned.insert(n, n_class_accuracy_conditioned(pred, n)?);
        }
        Ok(Self {
            design: design.to_string(),
            params_digest: params_digest(&params),
            params,
            accuracy: accuracy(pred)?,
            multiclass_auc: multiclass_auc(pred, tie)?,
            n_class_accuracy: limited,
            n_class_accuracy_conditioned: conditioned,
            sessions: pred.rows.len(),
            classes: pred.n_classes(),
            seed,
            tie_policy: tie,
        })
    }

    pub fn csv_header(n_values: &[usize]) -> Vec<String> {
        let mut h: Vec<String> = ["design", "params_digest", "accuracy", "multiclass_auc"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(n_values.iter().map(|n| format!("acc@{n}")));
        h.extend(
            ["sessions", "classes", "seed", "tie_policy"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    /// One CSV record; N values missing from the report are left blank.
    pub fn csv_record(&self, n_values: &[usize]) -> Vec<String> {
        let mut r = vec![
            self.design.clone(),
            self.params_digest.clone(),
            self.accuracy.to_string(),
            self.multiclass_auc.to_string(),
        ];
        r.extend(n_values.iter().map(|n| {
            self.n_class_accuracy
                .get(n)
                .map(|v| v.to_string())
                .unwrap_or_default()
        }));
        r.extend([
            self.sessions.to_string(),
            self.classes.to_string(),
            self.seed.to_string(),
            self.tie_policy.to_string(),
        ]);
        r
    }

    pub fn write_csv<W: Write>(
        reports: &[&EvaluationReport],
        n_values: &[usize],
        w: W,
    ) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(Self::csv_header(n_values))?;
        for r in reports {
            wtr.write_record(r.csv_record(n_values))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn params_digest(params: &serde_json::Value) -> String {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(params).expect("json value serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}
