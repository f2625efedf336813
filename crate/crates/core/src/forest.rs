//! Random forest with Gini splits, grown in resample-and-grow draws, and
//! session-level identification by pooled hard votes.
//!
//! Training repeats `draws` times: sample `rows_per_draw` rows with
//! replacement from the full matrix, then grow `trees_per_draw` fully deep
//! CART trees on that sample, trying `mtry` random features at each node.
//! Every tree owns a seed derived from `(seed, draw, tree)`, so the forest
//! does not depend on how trees are scheduled across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::seed;
use crate::trace::SessionKey;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("training matrix is empty")]
    EmptyMatrix,
    #[error("training data has a single class ({0}); need at least 2")]
    SingleClass(String),
    #[error("feature columns do not match the forest (expected digest {expected}, got {actual})")]
    DigestMismatch { expected: String, actual: String },
    #[error("no feature rows to predict for session {0}")]
    EmptyRows(String),
    #[error("session {session}: {source}")]
    Session {
        session: String,
        #[source]
        source: Box<ForestError>,
    },
    #[error("participant {0} is not an enrolled class")]
    UnknownClass(String),
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("unknown forest profile {0:?} (expected default, duration or delay)")]
    UnknownProfile(String),
    #[error("forest file: {0}")]
    Format(String),
    #[error("forest file i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees_per_draw: usize,
    pub draws: usize,
    pub rows_per_draw: usize,
    /// Features tried per node; `None` means `floor(sqrt(feature count))`.
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees_per_draw: 30,
            draws: 20,
            rows_per_draw: 100_000,
            mtry: None,
            min_node_size: 1,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn total_trees(&self) -> usize {
        self.trees_per_draw * self.draws
    }

    pub fn effective_mtry(&self, n_features: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
            .clamp(1, n_features.max(1))
    }

    pub fn validate(&self) -> Result<(), ForestError> {
        let bad = |what: &str| {
            Err(ForestError::InvalidParams(format!(
                "{what} must be positive"
            )))
        };
        if self.trees_per_draw == 0 {
            return bad("trees_per_draw");
        }
        if self.draws == 0 {
            return bad("draws");
        }
        if self.rows_per_draw == 0 {
            return bad("rows_per_draw");
        }
        if self.min_node_size == 0 {
            return bad("min_node_size");
        }
        if self.mtry == Some(0) {
            return bad("mtry");
        }
        if self.max_depth == Some(0) {
            return bad("max_depth");
        }
        Ok(())
    }
}

/// Named forest configurations used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForestProfile {
    /// 30 trees x 20 draws.
    Default,
    /// 5 trees x 3 draws.
    Duration,
    /// 30 trees x 3 draws.
    Delay,
}

impl ForestProfile {
    pub fn params(self, seed: u64) -> ForestParams {
        let base = ForestParams::default().with_seed(seed);
        match self {
            ForestProfile::Default => base,
            ForestProfile::Duration => ForestParams {
                trees_per_draw: 5,
                draws: 3,
                ..base
            },
            ForestProfile::Delay => ForestParams {
                trees_per_draw: 30,
                draws: 3,
                ..base
            },
        }
    }
}

impl fmt::Display for ForestProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForestProfile::Default => "default",
            ForestProfile::Duration => "duration",
            ForestProfile::Delay => "delay",
        })
    }
}

impl FromStr for ForestProfile {
    type Err = ForestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "default" => Ok(ForestProfile::Default),
            "duration" => Ok(ForestProfile::Duration),
            "delay" => Ok(ForestProfile::Delay),
            _ => Err(ForestError::UnknownProfile(s.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------
// Trees

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
struct NodeRec {
    /// Split feature, or `LEAF`.
    feature: u32,
    /// Left child, or the leaf index for leaves.
    left: u32,
    right: u32,
    /// Rows with `x[feature] <= threshold` go left.
    threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LeafRec {
    majority: u32,
    counts_start: u32,
    counts_len: u32,
}

/// One CART tree in flattened form. Node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<NodeRec>,
    leaves: Vec<LeafRec>,
    /// `(class, count)` pairs, nonzero counts only, grouped per leaf.
    counts: Vec<(u32, u32)>,
}

impl Tree {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    fn leaf_for(&self, x: &[f64]) -> &LeafRec {
        let mut n = &self.nodes[0];
        while n.feature != LEAF {
            let next = if x[n.feature as usize] <= n.threshold {
                n.left
            } else {
                n.right
            };
            n = &self.nodes[next as usize];
        }
        &self.leaves[n.left as usize]
    }

    /// Majority class of the leaf reached by `x` (ties to the lowest class).
    pub fn vote(&self, x: &[f64]) -> usize {
        self.leaf_for(x).majority as usize
    }

    /// Class counts of the leaf reached by `x`.
    pub fn leaf_counts(&self, x: &[f64]) -> &[(u32, u32)] {
        let leaf = self.leaf_for(x);
        let s = leaf.counts_start as usize;
        &self.counts[s..s + leaf.counts_len as usize]
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.feature == LEAF {
                0
            } else {
                1 + rec(t, n.left as usize).max(rec(t, n.right as usize))
            }
        }
        rec(self, 0)
    }

    /// Builds a tree from explicit parts; used for hand-checked fixtures.
    /// `splits` are `(feature, threshold, left, right)` for internal nodes
    /// and `leaf_classes` the majority class of each leaf, referenced as
    /// node ids `splits.len() + leaf_index`.
    pub fn from_parts(splits: &[(u32, f64, u32, u32)], leaf_classes: &[u32]) -> Tree {
        let mut nodes: Vec<NodeRec> = splits
            .iter()
            .map(|&(feature, threshold, left, right)| NodeRec {
                feature,
                left,
                right,
                threshold,
            })
            .collect();
        let mut leaves = Vec::new();
        let mut counts = Vec::new();
        for (i, &c) in leaf_classes.iter().enumerate() {
            nodes.push(NodeRec {
                feature: LEAF,
                left: i as u32,
                right: 0,
                threshold: 0.0,
            });
            leaves.push(LeafRec {
                majority: c,
                counts_start: i as u32,
                counts_len: 1,
            });
            counts.push((c, 1));
        }
        debug_assert!(!splits.is_empty() || leaf_classes.len() == 1);
        Tree {
            nodes,
            leaves,
            counts,
        }
    }
}

const RADIX_BITS: u32 = 11;
const RADIX_MIN_LEN: usize = 512;

/// Sorts `(rank << 32) | label` keys by rank, ascending. Large inputs use
/// an LSD radix sort over the rank bits, which is stable, so the order of
/// equal ranks is deterministic either way; only rank boundaries matter to
/// the split scan.
fn sort_keys(keys: &mut Vec<u64>, scratch: &mut Vec<u64>, max_rank: u32) {
    if keys.len() < RADIX_MIN_LEN {
        keys.sort_unstable();
        return;
    }
    let bits = 32 - max_rank.leading_zeros();
    let mask = (1u64 << RADIX_BITS) - 1;
    let mut counts = vec![0usize; 1 << RADIX_BITS];
    scratch.clear();
    scratch.resize(keys.len(), 0);
    let mut shift = 32;
    while shift < 32 + bits {
        counts.iter_mut().for_each(|c| *c = 0);
        for &k in keys.iter() {
            counts[((k >> shift) & mask) as usize] += 1;
        }
        let mut total = 0;
        for c in counts.iter_mut() {
            let n = *c;
            *c = total;
            total += n;
        }
        for &k in keys.iter() {
            let d = ((k >> shift) & mask) as usize;
            scratch[counts[d]] = k;
            counts[d] += 1;
        }
        std::mem::swap(keys, scratch);
        shift += RADIX_BITS;
    }
}

/// A feature column as dense ranks into its sorted distinct values.
/// Rank order matches value order, so splits can be searched on `u32`
/// keys and mapped back to value thresholds.
struct RankedColumn {
    ranks: Vec<u32>,
    values: Vec<f64>,
}

impl RankedColumn {
    fn new(col: &[f64]) -> Self {
        let mut order: Vec<u32> = (0..col.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
        let mut ranks = vec![0u32; col.len()];
        let mut values: Vec<f64> = Vec::new();
        for &i in &order {
            let v = col[i as usize];
            // `==` merges -0.0 and 0.0, which compare equal at prediction time.
            if values.last() != Some(&v) {
                values.push(v);
            }
            ranks[i as usize] = values.len() as u32 - 1;
        }
        Self { ranks, values }
    }
}

struct Grower<'a> {
    columns: &'a [RankedColumn],
    labels: &'a [u32],
    n_classes: usize,
    mtry: usize,
    min_node_size: usize,
    max_depth: usize,
}

struct Split {
    feature: usize,
    /// Highest rank sent left.
    rank: u32,
    threshold: f64,
}

impl Grower<'_> {
    fn grow(&self, mut sample: Vec<u32>, rng: &mut impl Rng) -> Tree {
        let mut tree = Tree {
            nodes: Vec::new(),
            leaves: Vec::new(),
            counts: Vec::new(),
        };
        let mut features: Vec<usize> = (0..self.columns.len()).collect();
        let mut buf: Vec<u64> = Vec::with_capacity(sample.len());
        let mut scratch: Vec<u64> = Vec::with_capacity(sample.len());
        let mut class_counts = vec![0u32; self.n_classes];
        // (node id, start, end, depth)
        let mut stack = vec![(0usize, 0usize, sample.len(), 0usize)];
        tree.nodes.push(NodeRec {
            feature: LEAF,
            left: 0,
            right: 0,
            threshold: 0.0,
        });

        while let Some((id, start, end, depth)) = stack.pop() {
            let rows = &mut sample[start..end];
            class_counts.iter_mut().for_each(|c| *c = 0);
            for &r in rows.iter() {
                class_counts[self.labels[r as usize] as usize] += 1;
            }
            let populated = class_counts.iter().filter(|&&c| c > 0).count();
            let split =
                if populated > 1 && rows.len() > self.min_node_size && depth < self.max_depth {
                    self.best_split(
                        rows,
                        &class_counts,
                        &mut features,
                        &mut buf,
                        &mut scratch,
                        rng,
                    )
                } else {
                    None
                };
            match split {
                None => {
                    tree.nodes[id] = self.make_leaf(&mut tree, &class_counts);
                }
                Some(Split {
                    feature,
                    rank,
                    threshold,
                }) => {
                    let col = &self.columns[feature].ranks;
                    let mut mid = 0;
                    for i in 0..rows.len() {
                        if col[rows[i] as usize] <= rank {
                            rows.swap(i, mid);
                            mid += 1;
                        }
                    }
                    debug_assert!(mid > 0 && mid < rows.len());
                    let left = tree.nodes.len();
                    tree.nodes.push(NodeRec {
                        feature: LEAF,
                        left: 0,
                        right: 0,
                        threshold: 0.0,
                    });
                    tree.nodes.push(NodeRec {
                        feature: LEAF,
                        left: 0,
                        right: 0,
                        threshold: 0.0,
                    });
                    tree.nodes[id] = NodeRec {
                        feature: feature as u32,
                        left: left as u32,
                        right: left as u32 + 1,
                        threshold,
                    };
                    stack.push((left + 1, start + mid, end, depth + 1));
                    stack.push((left, start, start + mid, depth + 1));
                }
            }
        }
        tree
    }

    fn make_leaf(&self, tree: &mut Tree, class_counts: &[u32]) -> NodeRec {
        let counts_start = tree.counts.len() as u32;
        let mut majority = 0u32;
        let mut best = 0u32;
        for (c, &n) in class_counts.iter().enumerate() {
            if n > 0 {
                tree.counts.push((c as u32, n));
                if n > best {
                    best = n;
                    majority = c as u32;
                }
            }
        }
        let leaf = tree.leaves.len() as u32;
        tree.leaves.push(LeafRec {
            majority,
            counts_start,
            counts_len: tree.counts.len() as u32 - counts_start,
        });
        NodeRec {
            feature: LEAF,
            left: leaf,
            right: 0,
            threshold: 0.0,
        }
    }

    /// Best Gini split over `mtry` randomly drawn features. Maximizing
    /// `sum_k L_k^2 / n_L + sum_k R_k^2 / n_R` minimizes weighted Gini impurity.
    fn best_split(
        &self,
        rows: &[u32],
        class_counts: &[u32],
        features: &mut [usize],
        buf: &mut Vec<u64>,
        scratch: &mut Vec<u64>,
        rng: &mut impl Rng,
    ) -> Option<Split> {
        let n = rows.len();
        let parent: f64 = class_counts
            .iter()
            .map(|&c| (c as f64) * (c as f64))
            .sum::<f64>()
            / n as f64;
        let mut best_score = parent + 1e-12 * parent.max(1.0);
        let mut best: Option<(usize, u32, u32)> = None;
        let mut left = vec![0u64; self.n_classes];
        let mut right = vec![0u64; self.n_classes];
        let sum_all2: u64 = class_counts
            .iter()
            .map(|&c| u64::from(c) * u64::from(c))
            .sum();

        for i in 0..self.mtry {
            let j = rng.gen_range(i..features.len());
            features.swap(i, j);
            let feature = features[i];
            let ranks = &self.columns[feature].ranks;

            // Key: rank in the high half, label in the low half.
            buf.clear();
            let (mut lo, mut hi) = (u32::MAX, 0u32);
            for &r in rows {
                let k = ranks[r as usize];
                lo = lo.min(k);
                hi = hi.max(k);
                buf.push((u64::from(k) << 32) | u64::from(self.labels[r as usize]));
            }
            if lo >= hi {
                continue;
            }
            sort_keys(buf, scratch, hi);

            left.iter_mut().for_each(|c| *c = 0);
            for (r, &c) in right.iter_mut().zip(class_counts) {
                *r = u64::from(c);
            }
            let mut sum_l2 = 0u64;
            let mut sum_r2 = sum_all2;
            for k in 0..n - 1 {
                let c = (buf[k] & 0xFFFF_FFFF) as usize;
                sum_l2 += 2 * left[c] + 1;
                left[c] += 1;
                sum_r2 -= 2 * right[c] - 1;
                right[c] -= 1;
                let (a, b) = (buf[k] >> 32, buf[k + 1] >> 32);
                if a < b {
                    let n_l = (k + 1) as f64;
                    let score = sum_l2 as f64 / n_l + sum_r2 as f64 / (n as f64 - n_l);
                    if score > best_score {
                        best_score = score;
                        best = Some((feature, a as u32, b as u32));
                    }
                }
            }
        }
        best.map(|(feature, rank, next)| {
            let values = &self.columns[feature].values;
            let (a, b) = (values[rank as usize], values[next as usize]);
            let mut threshold = a * 0.5 + b * 0.5;
            if threshold >= b {
                threshold = a;
            }
            Split {
                feature,
                rank,
                threshold,
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Forest

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// Participant ids; class index = position.
    pub classes: Vec<String>,
    pub params: ForestParams,
    pub feature_digest: String,
    pub n_features: usize,
}

/// Row labels for `matrix` as indices into the sorted participant list.
pub fn class_table(matrix: &FeatureMatrix) -> (Vec<String>, Vec<u32>) {
    let classes: Vec<String> = matrix
        .sessions
        .iter()
        .map(|k| k.participant.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, u32> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u32))
        .collect();
    let labels = (0..matrix.nrows())
        .map(|i| index[matrix.session_of(i).participant.as_str()])
        .collect();
    (classes, labels)
}

/// Trains a forest on `matrix`, labelling each row by its session's participant.
pub fn train(matrix: &FeatureMatrix, params: &ForestParams) -> Result<Forest, ForestError> {
    params.validate()?;
    if matrix.is_empty() || matrix.ncols() == 0 {
        return Err(ForestError::EmptyMatrix);
    }
    let (classes, labels) = class_table(matrix);
    if classes.len() < 2 {
        return Err(ForestError::SingleClass(classes[0].clone()));
    }
    let nrows = matrix.nrows();
    let ncols = matrix.ncols();
    let columns: Vec<RankedColumn> = (0..ncols)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = (0..nrows).map(|i| matrix.data[i * ncols + j]).collect();
            RankedColumn::new(&col)
        })
        .collect();
    let grower = Grower {
        columns: &columns,
        labels: &labels,
        n_classes: classes.len(),
        mtry: params.effective_mtry(ncols),
        min_node_size: params.min_node_size,
        max_depth: params.max_depth.unwrap_or(usize::MAX),
    };
    let draw_size = params.rows_per_draw.min(nrows);
    let mut trees = Vec::with_capacity(params.total_trees());
    for draw in 0..params.draws {
        let mut rng = seed::rng(params.seed, &[draw as u64, u64::MAX]);
        let sample: Vec<u32> = (0..draw_size)
            .map(|_| rng.gen_range(0..nrows as u32))
            .collect();
        let grown: Vec<Tree> = (0..params.trees_per_draw)
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::rng(params.seed, &[draw as u64, t as u64]);
                grower.grow(sample.clone(), &mut rng)
            })
            .collect();
        trees.extend(grown);
    }
    Ok(Forest {
        trees,
        classes,
        params: params.clone(),
        feature_digest: matrix.column_digest(),
        n_features: ncols,
    })
}

impl Forest {
    pub fn class_index(&self, participant: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(participant))
            .ok()
    }

    fn check_digest(&self, m: &FeatureMatrix) -> Result<(), ForestError> {
        let actual = m.column_digest();
        if actual != self.feature_digest {
            return Err(ForestError::DigestMismatch {
                expected: self.feature_digest.clone(),
                actual,
            });
        }
        Ok(())
    }

    /// Raw vote tallies over every (row, tree) pair.
    pub fn vote_counts(&self, rows: &FeatureMatrix) -> Result<Vec<u64>, ForestError> {
        self.check_digest(rows)?;
        let mut votes = vec![0u64; self.classes.len()];
        for i in 0..rows.nrows() {
            let x = rows.row(i);
            for tree in &self.trees {
                votes[tree.vote(x)] += 1;
            }
        }
        Ok(votes)
    }

    /// Fraction of rows whose pooled-vote argmax is their own participant.
    pub fn training_accuracy(&self, matrix: &FeatureMatrix) -> Result<f64, ForestError> {
        self.check_digest(matrix)?;
        let mut correct = 0usize;
        let mut votes = vec![0u32; self.classes.len()];
        for i in 0..matrix.nrows() {
            votes.iter_mut().for_each(|v| *v = 0);
            for tree in &self.trees {
                votes[tree.vote(matrix.row(i))] += 1;
            }
            let pred = argmax_u32(&votes);
            if Some(pred) == self.class_index(&matrix.session_of(i).participant) {
                correct += 1;
            }
        }
        Ok(correct as f64 / matrix.nrows().max(1) as f64)
    }
}

fn argmax_u32(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pools one hard vote per (row, tree) and normalizes by rows x trees.
pub fn predict_session(forest: &Forest, rows: &FeatureMatrix) -> Result<Vec<f64>, ForestError> {
    if rows.is_empty() {
        let who = rows
            .sessions
            .first()
            .map(|k| k.to_string())
            .unwrap_or_default();
        return Err(ForestError::EmptyRows(who));
    }
    let votes = forest.vote_counts(rows)?;
    let total = (rows.nrows() * forest.trees.len()) as f64;
    Ok(votes.into_iter().map(|v| v as f64 / total).collect())
}

// ---------------------------------------------------------------------------
// Prediction matrices

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub session: SessionKey,
    /// Index of the true participant in the class list.
    pub true_class: usize,
    pub probs: Vec<f64>,
}

/// Per test session, a probability estimate over the enrolled classes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionMatrix {
    pub classes: Vec<String>,
    pub rows: Vec<PredictionRow>,
}

impl PredictionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        Self {
            classes,
            rows: Vec::new(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Test sessions per class.
    pub fn class_support(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_classes()];
        for r in &self.rows {
            out[r.true_class] += 1;
        }
        out
    }
}

/// Predicts every test session, ordering rows by session key.
pub fn predict_all<'a>(
    forest: &Forest,
    sessions: impl IntoIterator<Item = (&'a SessionKey, &'a FeatureMatrix)>,
) -> Result<PredictionMatrix, ForestError> {
    let mut items: Vec<(&SessionKey, &FeatureMatrix)> = sessions.into_iter().collect();
    items.sort_by(|a, b| a.0.cmp(b.0));
    let rows = items
        .par_iter()
        .map(|(key, m)| {
            let wrap = |e: ForestError| ForestError::Session {
                session: key.to_string(),
                source: Box::new(e),
            };
            let true_class = forest
                .class_index(&key.participant)
                .ok_or_else(|| wrap(ForestError::UnknownClass(key.participant.clone())))?;
            let probs = predict_session(forest, m).map_err(wrap)?;
            Ok(PredictionRow {
                session: (*key).clone(),
                true_class,
                probs,
            })
        })
        .collect::<Result<Vec<_>, ForestError>>()?;
    Ok(PredictionMatrix {
        classes: forest.classes.clone(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Binary format

const MAGIC: &[u8; 8] = b"MRFOREST";
const FORMAT_VERSION: u32 = 1;

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    put_u32(w, b.len() as u32);
    w.extend_from_slice(b);
}

impl Forest {
    /// Versioned little-endian encoding: magic, version, params (JSON),
    /// feature digest, class table, then per tree the flattened node,
    /// leaf and count arrays.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, FORMAT_VERSION);
        put_bytes(
            &mut w,
            &serde_json::to_vec(&self.params).expect("params serialize"),
        );
        put_bytes(&mut w, self.feature_digest.as_bytes());
        put_u32(&mut w, self.n_features as u32);
        put_u32(&mut w, self.classes.len() as u32);
        for c in &self.classes {
            put_bytes(&mut w, c.as_bytes());
        }
        put_u32(&mut w, self.trees.len() as u32);
        for t in &self.trees {
            put_u32(&mut w, t.nodes.len() as u32);
            for n in &t.nodes {
                put_u32(&mut w, n.feature);
                put_u32(&mut w, n.left);
                put_u32(&mut w, n.right);
                w.extend_from_slice(&n.threshold.to_le_bytes());
            }
            put_u32(&mut w, t.leaves.len() as u32);
            for l in &t.leaves {
                put_u32(&mut w, l.majority);
                put_u32(&mut w, l.counts_start);
                put_u32(&mut w, l.counts_len);
            }
            put_u32(&mut w, t.counts.len() as u32);
            for &(c, n) in &t.counts {
                put_u32(&mut w, c);
                put_u32(&mut w, n);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Forest, ForestError> {
        let mut r = ByteReader(bytes);
        if &r.take::<8>()? != MAGIC {
            return Err(ForestError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(ForestError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let params: ForestParams = serde_json::from_slice(&r.bytes()?)
            .map_err(|e| ForestError::Format(format!("params: {e}")))?;
        let feature_digest = r.string()?;
        let n_features = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let classes = (0..n_classes)
            .map(|_| r.string())
            .collect::<Result<Vec<_>, _>>()?;
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n_nodes = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let feature = r.u32()?;
                let left = r.u32()?;
                let right = r.u32()?;
                let threshold = f64::from_le_bytes(r.take()?);
                nodes.push(NodeRec {
                    feature,
                    left,
                    right,
                    threshold,
                });
            }
            let n_leaves = r.u32()? as usize;
            let mut leaves = Vec::with_capacity(n_leaves);
            for _ in 0..n_leaves {
                leaves.push(LeafRec {
                    majority: r.u32()?,
                    counts_start: r.u32()?,
                    counts_len: r.u32()?,
                });
            }
            let n_counts = r.u32()? as usize;
            let mut counts = Vec::with_capacity(n_counts);
            for _ in 0..n_counts {
                counts.push((r.u32()?, r.u32()?));
            }
            let tree = Tree {
                nodes,
                leaves,
                counts,
            };
            validate_tree(&tree, n_features, n_classes)?;
            trees.push(tree);
        }
        if !r.0.is_empty() {
            return Err(ForestError::Format("trailing bytes".into()));
        }
        Ok(Forest {
            trees,
            classes,
            params,
            feature_digest,
            n_features,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ForestError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Forest, ForestError> {
        Forest::from_bytes(&std::fs::read(path)?)
    }
}

fn validate_tree(t: &Tree, n_features: usize, n_classes: usize) -> Result<(), ForestError> {
    let bad = |m: &str| Err(ForestError::Format(m.to_string()));
    if t.nodes.is_empty() {
        return bad("empty tree");
    }
    for n in &t.nodes {
        if n.feature == LEAF {
            if n.left as usize >= t.leaves.len() {
                return bad("leaf index out of range");
            }
        } else if n.feature as usize >= n_features
            || n.left as usize >= t.nodes.len()
            || n.right as usize >= t.nodes.len()
        {
            return bad("node reference out of range");
        }
    }
    for l in &t.leaves {
        if l.majority as usize >= n_classes
            || (l.counts_start + l.counts_len) as usize > t.counts.len()
        {
            return bad("leaf record out of range");
        }
    }
    Ok(())
}

struct ByteReader<'a>(&'a [u8]);

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], ForestError> {
        let mut out = [0u8; N];
        self.0
            .read_exact(&mut out)
            .map_err(|_| ForestError::Format("truncated".into()))?;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ForestError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, ForestError> {
        let n = self.u32()? as usize;
        if self.0.len() < n {
            return Err(ForestError::Format("truncated".into()));
        }
        let (b, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(b.to_vec())
    }

    fn string(&mut self) -> Result<String, ForestError> {
        String::from_utf8(self.bytes()?).map_err(|e| ForestError::Format(e.to_string()))
    }
}
