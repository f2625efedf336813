//! Train/test partitions for the between-session, within-session,
//! duration-grid and delay-matrix designs.
//!
//! A plan assigns every session a role and, where the design cuts inside a
//! session, half-open time spans. A feature row belongs to a span only when
//! its whole widest window lies inside the span, so spans that do not
//! overlap never share a frame.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::seed;
use crate::trace::{Session, SessionKey};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("train weeks and test weeks overlap in week(s) {0:?}")]
    OverlappingWeeks(Vec<u8>),
    #[error("{design}: no training sessions after filtering")]
    EmptyTrain { design: String },
    #[error("{design}: no test sessions after filtering")]
    EmptyTest { design: String },
    #[error("invalid split parameter: {0}")]
    InvalidParams(String),
    #[error("plan violates partition rules: {0}")]
    Invariant(String),
    #[error("plan file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("plan file {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

/// Half-open time interval `[start, end)` in seconds from session start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub start: f64,
    pub end: f64,
}

impl Span {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn length(&self) -> f64 {
        (self.end - self.start).max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }

    /// Whether a window of half-width `half` centred on `t` lies inside the span.
    /// The final span of a session ends at the last frame time, which a
    /// window may touch, so the right edge is inclusive for windows.
    pub fn contains_window(&self, t: f64, half: f64) -> bool {
        t - half >= self.start && t + half <= self.end
    }

    /// Gap between two disjoint spans (0 if they touch or overlap).
    pub fn gap_to(&self, other: &Span) -> f64 {
        if self.end <= other.start {
            other.start - self.end
        } else if other.end <= self.start {
            self.start - other.end
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Whole session (or its train spans) used for training.
    Train,
    /// Session (or its test span) scored against a model trained elsewhere.
    Test,
    /// Session contributes both train spans and a test span.
    Within,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAssignment {
    pub key: SessionKey,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train: Vec<Span>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test: Vec<Span>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub buffers: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl SessionAssignment {
    fn whole(key: SessionKey, role: Role, duration: f64) -> Self {
        let full = vec![Span::new(0.0, duration)];
        let (train, test) = match role {
            Role::Train => (full, Vec::new()),
            Role::Test => (Vec::new(), full),
            _ => (Vec::new(), Vec::new()),
        };
        Self {
            key,
            role,
            train,
            test,
            buffers: Vec::new(),
            note: None,
        }
    }

    fn excluded(key: SessionKey, note: impl Into<String>) -> Self {
        Self {
            key,
            role: Role::Excluded,
            train: Vec::new(),
            test: Vec::new(),
            buffers: Vec::new(),
            note: Some(note.into()),
        }
    }

    pub fn in_train(&self, t: f64, half: f64) -> bool {
        self.train.iter().any(|s| s.contains_window(t, half))
    }

    pub fn in_test(&self, t: f64, half: f64) -> bool {
        self.test.iter().any(|s| s.contains_window(t, half))
    }
}

/// A replayable partition: design name, parameters, seed and one
/// assignment per session, sorted by session key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub design: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub sessions: Vec<SessionAssignment>,
}

impl SplitPlan {
    fn new(
        design: &str,
        params: serde_json::Value,
        seed: u64,
        mut sessions: Vec<SessionAssignment>,
    ) -> Self {
        sessions.sort_by(|a, b| a.key.cmp(&b.key));
        Self {
            design: design.to_string(),
            params,
            seed,
            sessions,
        }
    }

    pub fn get(&self, key: &SessionKey) -> Option<&SessionAssignment> {
        self.sessions
            .binary_search_by(|a| a.key.cmp(key))
            .ok()
            .map(|i| &self.sessions[i])
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &SessionAssignment> {
        self.sessions.iter().filter(move |a| a.role == role)
    }

    /// Sessions that contribute training data.
    pub fn training(&self) -> impl Iterator<Item = &SessionAssignment> {
        self.sessions.iter().filter(|a| !a.train.is_empty())
    }

    /// Sessions that contribute a test span.
    pub fn testing(&self) -> impl Iterator<Item = &SessionAssignment> {
        self.sessions.iter().filter(|a| !a.test.is_empty())
    }

    pub fn training_participants(&self) -> BTreeSet<&str> {
        self.training()
            .map(|a| a.key.participant.as_str())
            .collect()
    }

    /// Checks the partition rules: spans of one session are pairwise
    /// disjoint, train and test spans sit at least `min_separation` apart,
    /// and every tested participant has training data.
    pub fn validate(&self, min_separation: f64) -> Result<(), SplitError> {
        let enrolled = self.training_participants();
        for a in &self.sessions {
            let all: Vec<&Span> = a.train.iter().chain(&a.test).chain(&a.buffers).collect();
            for (i, x) in all.iter().enumerate() {
                for y in &all[i + 1..] {
                    if x.overlaps(y) {
                        return Err(SplitError::Invariant(format!(
                            "{}: spans {x:?} and {y:?} overlap",
                            a.key
                        )));
                    }
                }
            }
            for tr in &a.train {
                for te in &a.test {
                    if tr.gap_to(te) < min_separation - 1e-9 {
                        return Err(SplitError::Invariant(format!(
                            "{}: train {tr:?} and test {te:?} closer than {min_separation} s",
                            a.key
                        )));
                    }
                }
            }
            if !a.test.is_empty() && !enrolled.contains(a.key.participant.as_str()) {
                return Err(SplitError::Invariant(format!(
                    "{}: tested participant has no training data",
                    a.key
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SplitError> {
        let p = path.display().to_string();
        let text = serde_json::to_string_pretty(self).map_err(|source| SplitError::Json {
            path: p.clone(),
            source,
        })?;
        std::fs::write(path, text + "\n").map_err(|source| SplitError::Io { path: p, source })
    }

    pub fn load(path: &Path) -> Result<Self, SplitError> {
        let p = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| SplitError::Io {
            path: p.clone(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| SplitError::Json { path: p, source })
    }
}

/// What the planner needs to know about a session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionInfo {
    pub key: SessionKey,
    pub duration: f64,
}

impl SessionInfo {
    pub fn of(session: &Session) -> Self {
        Self {
            key: session.key(),
            duration: session.duration(),
        }
    }
}

// ---------------------------------------------------------------------------
// Between-session

pub const DEFAULT_TRAIN_WEEKS: [u8; 6] = [1, 2, 3, 4, 5, 6];
pub const DEFAULT_TEST_WEEKS: [u8; 2] = [7, 8];

/// Assigns whole sessions by week. Test-week sessions of participants
/// with no training-week session are excluded.
pub fn between_split(
    sessions: &[SessionInfo],
    train_weeks: &[u8],
    test_weeks: &[u8],
) -> Result<SplitPlan, SplitError> {
    let overlap: Vec<u8> = train_weeks
        .iter()
        .copied()
        .filter(|w| test_weeks.contains(w))
        .collect();
    if !overlap.is_empty() {
        return Err(SplitError::OverlappingWeeks(overlap));
    }
    let design = "between";
    let enrolled: BTreeSet<&str> = sessions
        .iter()
        .filter(|s| train_weeks.contains(&s.key.week))
        .map(|s| s.key.participant.as_str())
        .collect();
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let a = if train_weeks.contains(&s.key.week) {
            SessionAssignment::whole(s.key.clone(), Role::Train, s.duration)
        } else if !test_weeks.contains(&s.key.week) {
            SessionAssignment::excluded(s.key.clone(), "week not in train or test set")
        } else if enrolled.contains(s.key.participant.as_str()) {
            SessionAssignment::whole(s.key.clone(), Role::Test, s.duration)
        } else {
            log::info!(
                "{design}: {} excluded, participant absent from training weeks",
                s.key
            );
            SessionAssignment::excluded(s.key.clone(), "participant absent from training weeks")
        };
        out.push(a);
    }
    let plan = SplitPlan::new(
        design,
        json!({ "train_weeks": train_weeks, "test_weeks": test_weeks }),
        0,
        out,
    );
    require_nonempty(&plan)?;
    Ok(plan)
}

fn require_nonempty(plan: &SplitPlan) -> Result<(), SplitError> {
    if plan.training().next().is_none() {
        return Err(SplitError::EmptyTrain {
            design: plan.design.clone(),
        });
    }
    if plan.testing().next().is_none() {
        return Err(SplitError::EmptyTest {
            design: plan.design.clone(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Within-session

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestPlacement {
    #[default]
    End,
    Start,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WithinConfig {
    pub train_fraction: f64,
    /// Seconds between train and test spans.
    pub buffer_s: f64,
    /// Sessions shorter than this (seconds) are excluded.
    pub min_length_s: f64,
    pub placement: TestPlacement,
}

impl Default for WithinConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            buffer_s: 60.0,
            min_length_s: 300.0,
            placement: TestPlacement::End,
        }
    }
}

impl WithinConfig {
    pub fn validate(&self) -> Result<(), SplitError> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(SplitError::InvalidParams(format!(
                "train_fraction {} not in (0, 1)",
                self.train_fraction
            )));
        }
        if !(self.buffer_s >= 0.0) {
            return Err(SplitError::InvalidParams(format!(
                "buffer {} is negative",
                self.buffer_s
            )));
        }
        Ok(())
    }

    /// Shortest session that still leaves a non-empty training span.
    pub fn required_length(&self) -> f64 {
        self.min_length_s
            .max(self.buffer_s / (1.0 - self.train_fraction))
    }
}

/// Cuts each session into train, buffer and test spans. The test span
/// covers `1 - train_fraction` of the session.
pub fn within_split(
    sessions: &[SessionInfo],
    config: &WithinConfig,
    seed: u64,
) -> Result<SplitPlan, SplitError> {
    config.validate()?;
    let design = "within";
    let min_len = config.required_length();
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let d = s.duration;
        if d < min_len {
            log::info!(
                "{design}: {} excluded, {d:.1} s is shorter than {min_len:.1} s",
                s.key
            );
            out.push(SessionAssignment::excluded(
                s.key.clone(),
                format!("shorter than {min_len} s"),
            ));
            continue;
        }
        let test_len = d * (1.0 - config.train_fraction);
        let test_start = match config.placement {
            TestPlacement::End => d - test_len,
            TestPlacement::Start => 0.0,
            TestPlacement::Random => {
                let mut rng = seed::rng(
                    seed,
                    &[seed::tag_str(design), seed::tag_str(&s.key.to_string())],
                );
                rng.gen_range(0.0..=d - test_len)
            }
        };
        let test = Span::new(test_start, test_start + test_len);
        let (buffers, train) = carve_around(test, d, config.buffer_s);
        out.push(SessionAssignment {
            key: s.key.clone(),
            role: Role::Within,
            train,
            test: vec![test],
            buffers,
            note: None,
        });
    }
    let params = json!({
        "train_fraction": config.train_fraction,
        "buffer_s": config.buffer_s,
        "min_length_s": config.min_length_s,
        "placement": config.placement,
    });
    let plan = SplitPlan::new(design, params, seed, out);
    require_nonempty(&plan)?;
    Ok(plan)
}

/// Buffers flanking `test` (clipped to the session) and the non-empty
/// remainder on each side.
fn carve_around(test: Span, duration: f64, buffer: f64) -> (Vec<Span>, Vec<Span>) {
    let mut buffers = Vec::new();
    let mut rest = Vec::new();
    let lb = Span::new((test.start - buffer).max(0.0), test.start);
    let rb = Span::new(test.end, (test.end + buffer).min(duration));
    if !lb.is_empty() {
        buffers.push(lb);
    }
    if !rb.is_empty() {
        buffers.push(rb);
    }
    let left = Span::new(0.0, lb.start);
    let right = Span::new(rb.end, duration);
    if !left.is_empty() {
        rest.push(left);
    }
    if !right.is_empty() {
        rest.push(right);
    }
    (buffers, rest)
}

// ---------------------------------------------------------------------------
// Duration grid

pub const DURATION_SESSIONS: [usize; 4] = [1, 2, 4, 7];
pub const DURATION_MINUTES: [f64; 4] = [1.0, 3.0, 10.0, 30.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurationConfig {
    pub test_minutes: f64,
    pub buffer_minutes: f64,
    pub min_session_minutes: f64,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self {
            test_minutes: 5.0,
            buffer_minutes: 1.0,
            min_session_minutes: 8.0,
        }
    }
}

/// One Monte Carlo draw of the duration design.
///
/// Randomness is drawn per (seed, rep, participant) for the session choice
/// and per (seed, rep, session) for span placement, so cells of one
/// repetition share their draws: the 2-session training set is a prefix of
/// the 4-session one, and a session's test span does not move with the
/// requested minutes.
pub fn duration_sample(
    sessions: &[SessionInfo],
    n_sessions: usize,
    train_minutes: f64,
    config: &DurationConfig,
    seed: u64,
    rep: u32,
) -> Result<SplitPlan, SplitError> {
    if n_sessions == 0 || !(train_minutes > 0.0) {
        return Err(SplitError::InvalidParams(format!(
            "need positive session count and minutes, got {n_sessions} and {train_minutes}"
        )));
    }
    let design = "duration";
    let test_len = config.test_minutes * 60.0;
    let buffer = config.buffer_minutes * 60.0;
    let want = train_minutes * 60.0;
    let min_len = config.min_session_minutes * 60.0;

    let mut by_participant: BTreeMap<&str, Vec<&SessionInfo>> = BTreeMap::new();
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        if s.duration < min_len {
            out.push(SessionAssignment::excluded(
                s.key.clone(),
                format!("shorter than {} min", config.min_session_minutes),
            ));
        } else {
            by_participant
                .entry(s.key.participant.as_str())
                .or_default()
                .push(s);
        }
    }

    for (participant, mut usable) in by_participant {
        usable.sort_by(|a, b| a.key.cmp(&b.key));
        if usable.len() < 2 {
            log::info!(
                "{design}: participant {participant} has fewer than 2 usable sessions, excluded"
            );
            for s in usable {
                out.push(SessionAssignment::excluded(
                    s.key.clone(),
                    "participant has fewer than 2 usable sessions",
                ));
            }
            continue;
        }
        let mut rng = seed::rng(
            seed,
            &[
                seed::tag_str("duration-sessions"),
                rep as u64,
                seed::tag_str(participant),
            ],
        );
        usable.shuffle(&mut rng);
        let n_train = n_sessions.min(usable.len() - 1);
        for (i, s) in usable.into_iter().enumerate() {
            let mut rng = seed::rng(
                seed,
                &[
                    seed::tag_str("duration-spans"),
                    rep as u64,
                    seed::tag_str(&s.key.to_string()),
                ],
            );
            let test_start = rng.gen_range(0.0..=s.duration - test_len);
            let choose_left: bool = rng.gen();
            let test = Span::new(test_start, test_start + test_len);
            if i >= n_train {
                out.push(SessionAssignment {
                    key: s.key.clone(),
                    role: Role::Test,
                    train: Vec::new(),
                    test: vec![test],
                    buffers: Vec::new(),
                    note: None,
                });
                continue;
            }
            let (buffers, _) = carve_around(test, s.duration, buffer);
            let left_end = (test.start - buffer).max(0.0);
            let right_start = (test.end + buffer).min(s.duration);
            let train = place_training(left_end, right_start, s.duration, want, choose_left);
            out.push(SessionAssignment {
                key: s.key.clone(),
                role: Role::Within,
                train,
                test: vec![test],
                buffers,
                note: None,
            });
        }
    }

    let params = json!({
        "n_sessions": n_sessions,
        "train_minutes": train_minutes,
        "rep": rep,
        "test_minutes": config.test_minutes,
        "buffer_minutes": config.buffer_minutes,
        "min_session_minutes": config.min_session_minutes,
    });
    let plan = SplitPlan::new(design, params, seed, out);
    require_nonempty(&plan)?;
    Ok(plan)
}

/// Training spans for a session whose free time is `[0, left_end)` and
/// `[right_start, duration)`. Blocks sit against the buffers.
fn place_training(
    left_end: f64,
    right_start: f64,
    duration: f64,
    want: f64,
    prefer_left: bool,
) -> Vec<Span> {
    let left_avail = left_end;
    let right_avail = duration - right_start;
    let left_block = |len: f64| Span::new(left_end - len, left_end);
    let right_block = |len: f64| Span::new(right_start, right_start + len);
    let fits_left = left_avail >= want;
    let fits_right = right_avail >= want;
    let spans = match (fits_left, fits_right) {
        (true, true) if prefer_left => vec![left_block(want)],
        (true, true) => vec![right_block(want)],
        (true, false) => vec![left_block(want)],
        (false, true) => vec![right_block(want)],
        (false, false) => {
            // Larger side whole, remainder from the other side, capped.
            if left_avail >= right_avail {
                let rest = (want - left_avail).min(right_avail);
                vec![left_block(left_avail), right_block(rest)]
            } else {
                let rest = (want - right_avail).min(left_avail);
                vec![left_block(rest), right_block(right_avail)]
            }
        }
    };
    spans.into_iter().filter(|s| !s.is_empty()).collect()
}

// ---------------------------------------------------------------------------
// Delay matrix

#[derive(Debug, Clone, PartialEq)]
pub struct DelayPlan {
    pub train_week: u8,
    pub test_week: u8,
    pub plan: SplitPlan,
}

/// One plan per ordered pair of distinct weeks: train on all of one week,
/// test on the other week's sessions whose participant was trained on.
/// Pairs that end up empty are skipped with a warning.
pub fn delay_pairs(sessions: &[SessionInfo], weeks: &[u8]) -> Vec<DelayPlan> {
    let mut out = Vec::new();
    for &train_week in weeks {
        for &test_week in weeks {
            if train_week == test_week {
                continue;
            }
            match between_split(sessions, &[train_week], &[test_week]) {
                Ok(mut plan) => {
                    plan.design = "delay".to_string();
                    out.push(DelayPlan {
                        train_week,
                        test_week,
                        plan,
                    });
                }
                Err(e) => {
                    log::warn!("delay cell (train {train_week}, test {test_week}) skipped: {e}")
                }
            }
        }
    }
    out
}

/// Rank-correlation trend test for the delay matrix.
pub mod trend {
    use rand::seq::SliceRandom;
    use serde::{Deserialize, Serialize};

    use crate::seed;

    #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
    pub struct TrendTest {
        pub rho: f64,
        /// One-sided p-value for a negative association.
        pub p_negative: f64,
        pub p_two_sided: f64,
        pub permutations: usize,
        pub n: usize,
    }

    /// Ranks starting at 1, ties sharing their mean rank.
    pub fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
        let mut out = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let r = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = r;
            }
            i = j + 1;
        }
        out
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        if sxx == 0.0 || syy == 0.0 {
            return 0.0;
        }
        sxy / (sxx * syy).sqrt()
    }

    /// Spearman's rho (Pearson correlation of mid-ranks); 0 when either
    /// side is constant.
    pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), y.len(), "spearman needs paired samples");
        pearson(&ranks(x), &ranks(y))
    }

    /// Spearman rho with a permutation p-value from shuffling `y`.
    pub fn permutation_test(x: &[f64], y: &[f64], permutations: usize, seed: u64) -> TrendTest {
        let rx = ranks(x);
        let ry = ranks(y);
        let rho = pearson(&rx, &ry);
        let mut rng = seed::rng(seed, &[seed::tag_str("trend")]);
        let mut perm = ry.clone();
        let (mut below, mut extreme) = (0usize, 0usize);
        for _ in 0..permutations {
            perm.shuffle(&mut rng);
            let r = pearson(&rx, &perm);
            if r <= rho + 1e-12 {
                below += 1;
            }
            if r.abs() >= rho.abs() - 1e-12 {
                extreme += 1;
            }
        }
        let denom = (permutations + 1) as f64;
        TrendTest {
            rho,
            p_negative: (below + 1) as f64 / denom,
            p_two_sided: (extreme + 1) as f64 / denom,
            permutations,
            n: x.len(),
        }
    }
}
