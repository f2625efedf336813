//! Per-frame streams, windowed summary statistics and the M1..M6 presets.
//!
//! A session yields 51 scalar streams: the 42 of the full feature set plus
//! the 9 legacy global streams (x/z position and yaw) used only by M1 and
//! M2. Each preset picks streams, window sizes and statistics; a feature
//! row is emitted every whole second where all of the preset's windows fit
//! inside the session and cross no frame-rate gap.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::body_space::{self, to_body_space, DEFAULT_HALF_WINDOW_S};
use crate::trace::{validate_rate, Session, SessionKey, TrackedObject};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("session {0} has fewer than 2 frames; speeds are undefined")]
    TooFewFrames(String),
    #[error("cannot summarize an empty window")]
    EmptyWindow,
    #[error("unknown feature preset {0:?} (expected M1..M6)")]
    UnknownPreset(String),
    #[error("feature matrices have different columns")]
    ColumnMismatch,
    #[error("feature cache: {0}")]
    Cache(String),
    #[error("feature cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Streams

/// Ordered pair of tracked objects; the displacement is `first - second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pair {
    HeadLeft,
    HeadRight,
    RightLeft,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::HeadLeft, Pair::HeadRight, Pair::RightLeft];

    pub fn objects(self) -> (TrackedObject, TrackedObject) {
        match self {
            Pair::HeadLeft => (TrackedObject::Head, TrackedObject::Left),
            Pair::HeadRight => (TrackedObject::Head, TrackedObject::Right),
            Pair::RightLeft => (TrackedObject::Right, TrackedObject::Left),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Pair::HeadLeft => "head_left",
            Pair::HeadRight => "head_right",
            Pair::RightLeft => "right_left",
        }
    }
}

/// Body-space axis: x rightward, y up, z forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpeedKind {
    Total,
    Horizontal,
    Vertical,
    /// |vz| of a body-space displacement velocity.
    Forward,
    /// |vx| of a body-space displacement velocity.
    Rightward,
}

impl SpeedKind {
    fn prefix(self) -> &'static str {
        match self {
            SpeedKind::Total => "",
            SpeedKind::Horizontal => "h",
            SpeedKind::Vertical => "v",
            SpeedKind::Forward => "f",
            SpeedKind::Rightward => "r",
        }
    }

    fn of(self, v: &Vector3<f64>) -> f64 {
        match self {
            SpeedKind::Total => v.norm(),
            SpeedKind::Horizontal => v.x.hypot(v.z),
            SpeedKind::Vertical => v.y.abs(),
            SpeedKind::Forward => v.z.abs(),
            SpeedKind::Rightward => v.x.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamGroup {
    RawPose,
    Legacy,
    BscDisplacement,
    Speed,
    BscSpeed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    PosY(TrackedObject),
    Pitch(TrackedObject),
    Roll(TrackedObject),
    PosX(TrackedObject),
    PosZ(TrackedObject),
    Yaw(TrackedObject),
    Displacement(Axis, Pair),
    Speed(SpeedKind, TrackedObject),
    DisplacementSpeed(SpeedKind, Pair),
}

const OBJS: [TrackedObject; 3] = TrackedObject::ALL;

impl Stream {
    pub fn group(self) -> StreamGroup {
        match self {
            Stream::PosY(_) | Stream::Pitch(_) | Stream::Roll(_) => StreamGroup::RawPose,
            Stream::PosX(_) | Stream::PosZ(_) | Stream::Yaw(_) => StreamGroup::Legacy,
            Stream::Displacement(..) => StreamGroup::BscDisplacement,
            Stream::Speed(..) => StreamGroup::Speed,
            Stream::DisplacementSpeed(..) => StreamGroup::BscSpeed,
        }
    }

    /// Streams of one group in canonical order.
    pub fn group_members(group: StreamGroup) -> Vec<Stream> {
        match group {
            StreamGroup::RawPose => [Stream::PosY as fn(_) -> _, Stream::Pitch, Stream::Roll]
                .iter()
                .flat_map(|c| OBJS.iter().map(move |&o| c(o)))
                .collect(),
            StreamGroup::Legacy => [Stream::PosX as fn(_) -> _, Stream::PosZ, Stream::Yaw]
                .iter()
                .flat_map(|c| OBJS.iter().map(move |&o| c(o)))
                .collect(),
            StreamGroup::BscDisplacement => [Axis::X, Axis::Y, Axis::Z]
                .iter()
                .flat_map(|&a| Pair::ALL.iter().map(move |&p| Stream::Displacement(a, p)))
                .collect(),
            StreamGroup::Speed => [SpeedKind::Total, SpeedKind::Horizontal, SpeedKind::Vertical]
                .iter()
                .flat_map(|&k| OBJS.iter().map(move |&o| Stream::Speed(k, o)))
                .collect(),
            StreamGroup::BscSpeed => [
                SpeedKind::Total,
                SpeedKind::Horizontal,
                SpeedKind::Vertical,
                SpeedKind::Forward,
                SpeedKind::Rightward,
            ]
            .iter()
            .flat_map(|&k| {
                Pair::ALL
                    .iter()
                    .map(move |&p| Stream::DisplacementSpeed(k, p))
            })
            .collect(),
        }
    }

    /// All 51 streams: the 42 of the full set followed by the 9 legacy ones.
    pub fn all() -> Vec<Stream> {
        [
            StreamGroup::RawPose,
            StreamGroup::BscDisplacement,
            StreamGroup::Speed,
            StreamGroup::BscSpeed,
            StreamGroup::Legacy,
        ]
        .into_iter()
        .flat_map(Stream::group_members)
        .collect()
    }

    /// Position of this stream in [`Stream::all`].
    pub fn index(self) -> usize {
        Stream::all()
            .iter()
            .position(|&s| s == self)
            .expect("every stream is enumerated")
    }

    pub fn is_speed(self) -> bool {
        matches!(self, Stream::Speed(..) | Stream::DisplacementSpeed(..))
    }

    pub fn name(self) -> String {
        match self {
            Stream::PosY(o) => format!("py_{}", o.name()),
            Stream::Pitch(o) => format!("pitch_{}", o.name()),
            Stream::Roll(o) => format!("roll_{}", o.name()),
            Stream::PosX(o) => format!("px_{}", o.name()),
            Stream::PosZ(o) => format!("pz_{}", o.name()),
            Stream::Yaw(o) => format!("yaw_{}", o.name()),
            Stream::Displacement(a, p) => {
                let axis = match a {
                    Axis::X => "bx",
                    Axis::Y => "by",
                    Axis::Z => "bz",
                };
                format!("{axis}_{}", p.name())
            }
            Stream::Speed(k, o) => format!("{}speed_{}", k.prefix(), o.name()),
            Stream::DisplacementSpeed(k, p) => format!("b{}speed_{}", k.prefix(), p.name()),
        }
    }
}

/// Per-frame values of every stream. Speed streams are `NaN` (missing) at
/// frame 0.
#[derive(Debug, Clone)]
pub struct StreamSet {
    pub times: Vec<f64>,
    /// Indexed by [`Stream::index`].
    pub values: Vec<Vec<f64>>,
}

impl StreamSet {
    pub fn get(&self, stream: Stream) -> &[f64] {
        &self.values[stream.index()]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Computes all streams for a parsed, root-composed session.
pub fn compute_streams(session: &Session, bsc_half_window: f64) -> Result<StreamSet, FeatureError> {
    let n = session.frames.len();
    if n < 2 {
        return Err(FeatureError::TooFewFrames(session.key().to_string()));
    }
    let streams = Stream::all();
    let ctxs = body_space::session_contexts(session, bsc_half_window);
    let times = session.times();

    let displacements: Vec<[Vector3<f64>; 3]> = session
        .frames
        .iter()
        .zip(&ctxs)
        .map(|(f, ctx)| {
            Pair::ALL.map(|p| {
                let (a, b) = p.objects();
                to_body_space(ctx, &(f.pose(a).position - f.pose(b).position))
            })
        })
        .collect();

    let mut values = vec![Vec::with_capacity(n); streams.len()];
    for (i, frame) in session.frames.iter().enumerate() {
        let dt = if i > 0 {
            times[i] - times[i - 1]
        } else {
            f64::NAN
        };
        for (slot, stream) in values.iter_mut().zip(&streams) {
            let v = match *stream {
                Stream::PosY(o) => frame.pose(o).position.y,
                Stream::Pitch(o) => frame.pose(o).rotation.pitch,
                Stream::Roll(o) => frame.pose(o).rotation.roll,
                Stream::PosX(o) => frame.pose(o).position.x,
                Stream::PosZ(o) => frame.pose(o).position.z,
                Stream::Yaw(o) => frame.pose(o).rotation.yaw,
                Stream::Displacement(axis, p) => {
                    let d = &displacements[i][pair_slot(p)];
                    match axis {
                        Axis::X => d.x,
                        Axis::Y => d.y,
                        Axis::Z => d.z,
                    }
                }
                Stream::Speed(kind, o) if i > 0 => {
                    let prev = session.frames[i - 1].pose(o).position;
                    kind.of(&((frame.pose(o).position - prev) / dt))
                }
                Stream::DisplacementSpeed(kind, p) if i > 0 => {
                    let k = pair_slot(p);
                    kind.of(&((displacements[i][k] - displacements[i - 1][k]) / dt))
                }
                Stream::Speed(..) | Stream::DisplacementSpeed(..) => f64::NAN,
            };
            slot.push(v);
        }
    }
    Ok(StreamSet { times, values })
}

fn pair_slot(p: Pair) -> usize {
    Pair::ALL.iter().position(|&q| q == p).unwrap()
}

// ---------------------------------------------------------------------------
// Summary statistics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Statistic {
    Mean,
    Median,
    Max,
    Min,
    Sd,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [
        Statistic::Mean,
        Statistic::Median,
        Statistic::Max,
        Statistic::Min,
        Statistic::Sd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
            Statistic::Max => "max",
            Statistic::Min => "min",
            Statistic::Sd => "sd",
        }
    }
}

/// One statistic of a window. Standard deviation uses the n-1 denominator
/// and is 0 for a single value.
pub fn summarize(values: &[f64], stat: Statistic) -> Result<f64, FeatureError> {
    let mut scratch = values.to_vec();
    Ok(summarize_all(&mut scratch)?[stat_slot(stat)])
}

fn stat_slot(stat: Statistic) -> usize {
    Statistic::ALL.iter().position(|&s| s == stat).unwrap()
}

/// All five statistics in [`Statistic::ALL`] order. Reorders `values`.
pub fn summarize_all(values: &mut [f64]) -> Result<[f64; 5], FeatureError> {
    let n = values.len();
    if n == 0 {
        return Err(FeatureError::EmptyWindow);
    }
    let mut sum = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values.iter() {
        sum += v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mean = sum / n as f64;
    let sd = if n > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mid = n / 2;
    let (below, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    let median = if n % 2 == 1 {
        upper
    } else {
        let lower = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    };
    Ok([mean, median, hi, lo, sd])
}

// ---------------------------------------------------------------------------
// Presets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PresetName {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
}

impl PresetName {
    pub const ALL: [PresetName; 6] = [
        PresetName::M1,
        PresetName::M2,
        PresetName::M3,
        PresetName::M4,
        PresetName::M5,
        PresetName::M6,
    ];

    pub fn preset(self) -> FeaturePreset {
        FeaturePreset::new(self)
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for PresetName {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| FeatureError::UnknownPreset(s.to_string()))
    }
}

pub const ALL_WINDOWS_S: [f64; 4] = [1.0, 3.0, 10.0, 30.0];

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePreset {
    pub name: PresetName,
    pub streams: Vec<Stream>,
    pub windows: Vec<f64>,
    pub stats: Vec<Statistic>,
}

impl FeaturePreset {
    /// The ablation ladder: M1 is position + orientation of all three
    /// objects over a 1 s window; M2 drops x/z position; M3 drops yaw; M4
    /// adds the 3/10/30 s windows; M5 adds body-space displacements; M6 adds
    /// the speed streams.
    pub fn new(name: PresetName) -> Self {
        use StreamGroup::*;
        let raw = Stream::group_members(RawPose);
        let (streams, windows): (Vec<Stream>, &[f64]) = match name {
            PresetName::M1 => (m1_streams(), &ALL_WINDOWS_S[..1]),
            PresetName::M2 => (
                m1_streams()
                    .into_iter()
                    .filter(|s| !matches!(s, Stream::PosX(_) | Stream::PosZ(_)))
                    .collect(),
                &ALL_WINDOWS_S[..1],
            ),
            PresetName::M3 => (raw, &ALL_WINDOWS_S[..1]),
            PresetName::M4 => (raw, &ALL_WINDOWS_S[..]),
            PresetName::M5 => (
                [RawPose, BscDisplacement]
                    .into_iter()
                    .flat_map(Stream::group_members)
                    .collect(),
                &ALL_WINDOWS_S[..],
            ),
            PresetName::M6 => (
                [RawPose, BscDisplacement, Speed, BscSpeed]
                    .into_iter()
                    .flat_map(Stream::group_members)
                    .collect(),
                &ALL_WINDOWS_S[..],
            ),
        };
        Self {
            name,
            streams,
            windows: windows.to_vec(),
            stats: Statistic::ALL.to_vec(),
        }
    }

    pub fn feature_count(&self) -> usize {
        self.streams.len() * self.windows.len() * self.stats.len()
    }

    pub fn max_window(&self) -> f64 {
        self.windows.iter().copied().fold(0.0, f64::max)
    }

    /// Column names in matrix order: stream-major, then window, then statistic.
    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.feature_count());
        for s in &self.streams {
            let stream = s.name();
            for w in &self.windows {
                for st in &self.stats {
                    out.push(format!("{stream}_w{w}s_{}", st.name()));
                }
            }
        }
        out
    }
}

/// M1 order: for each object, x/y/z position then yaw/pitch/roll.
fn m1_streams() -> Vec<Stream> {
    OBJS.iter()
        .flat_map(|&o| {
            [
                Stream::PosX(o),
                Stream::PosY(o),
                Stream::PosZ(o),
                Stream::Yaw(o),
                Stream::Pitch(o),
                Stream::Roll(o),
            ]
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Feature matrices

/// Extraction parameters that affect feature values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    pub bsc_half_window_s: f64,
    /// Inter-frame intervals above this (seconds) invalidate any window they touch.
    pub max_gap_s: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            bsc_half_window_s: DEFAULT_HALF_WINDOW_S,
            max_gap_s: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTag {
    /// Index into [`FeatureMatrix::sessions`].
    pub session: u32,
    pub sample_time: f64,
}

/// Dense row-major feature table with per-row session tags.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub sessions: Vec<SessionKey>,
    pub tags: Vec<RowTag>,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn empty(columns: Vec<String>) -> Self {
        Self {
            columns,
            sessions: Vec::new(),
            tags: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.tags.len()
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.ncols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn session_of(&self, i: usize) -> &SessionKey {
        &self.sessions[self.tags[i].session as usize]
    }

    pub fn sample_time(&self, i: usize) -> f64 {
        self.tags[i].sample_time
    }

    /// SHA-256 over the ordered column names.
    pub fn column_digest(&self) -> String {
        column_digest(&self.columns)
    }

    /// Rows whose (session, sample time) satisfy `keep`, preserving order.
    pub fn select_rows(&self, mut keep: impl FnMut(&SessionKey, f64) -> bool) -> FeatureMatrix {
        let mut out = FeatureMatrix::empty(self.columns.clone());
        let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
        for i in 0..self.nrows() {
            let tag = self.tags[i];
            if !keep(self.session_of(i), tag.sample_time) {
                continue;
            }
            let idx = *remap.entry(tag.session).or_insert_with(|| {
                out.sessions
                    .push(self.sessions[tag.session as usize].clone());
                (out.sessions.len() - 1) as u32
            });
            out.tags.push(RowTag {
                session: idx,
                sample_time: tag.sample_time,
            });
            out.data.extend_from_slice(self.row(i));
        }
        out
    }

    /// Stacks matrices with identical columns.
    pub fn concat<'a>(
        columns: Vec<String>,
        parts: impl IntoIterator<Item = &'a FeatureMatrix>,
    ) -> Result<FeatureMatrix, FeatureError> {
        let mut out = FeatureMatrix::empty(columns);
        for m in parts {
            if m.columns != out.columns {
                return Err(FeatureError::ColumnMismatch);
            }
            let offset = out.sessions.len() as u32;
            out.sessions.extend(m.sessions.iter().cloned());
            out.tags.extend(m.tags.iter().map(|t| RowTag {
                session: t.session + offset,
                sample_time: t.sample_time,
            }));
            out.data.extend_from_slice(&m.data);
        }
        Ok(out)
    }

    /// CSV with metadata columns participant, dataset, week, section,
    /// sample_time followed by the feature columns.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["participant", "dataset", "week", "section", "sample_time"];
        header.extend(self.columns.iter().map(String::as_str));
        wtr.write_record(&header)?;
        for i in 0..self.nrows() {
            let key = self.session_of(i);
            let mut rec = vec![
                key.participant.clone(),
                key.dataset.to_string(),
                key.week.to_string(),
                key.section.clone(),
                self.sample_time(i).to_string(),
            ];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn column_digest(columns: &[String]) -> String {
    let mut h = Sha256::new();
    for c in columns {
        h.update(c.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}

/// Half-open window `[t - w/2, t + w/2)` as frame index range, or `None`
/// when it leaves `[0, end]` or touches a rate gap.
fn window_range(
    times: &[f64],
    gaps: &[crate::trace::RateGap],
    t: f64,
    width: f64,
) -> Option<(usize, usize)> {
    let (lo, hi) = (t - width / 2.0, t + width / 2.0);
    let end = *times.last()?;
    if lo < 0.0 || hi > end || gaps.iter().any(|g| g.overlaps(lo, hi)) {
        return None;
    }
    let a = times.partition_point(|&x| x < lo);
    let b = times.partition_point(|&x| x < hi);
    (b > a).then_some((a, b))
}

/// Sum of `f(x)` over four interleaved accumulators, which breaks the
/// add latency chain of a plain fold.
fn lane_sum(v: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = v.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().map(|&x| f(x)).sum();
    for c in chunks {
        for k in 0..4 {
            acc[k] += f(c[k]);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Sorted contents of a sliding frame range. Successive sample windows
/// overlap heavily, so each move merges out the frames that left and
/// merges in the frames that arrived instead of re-sorting. NaN entries
/// (undefined speeds) are skipped.
#[derive(Debug, Default)]
struct SortedWindow {
    a: usize,
    b: usize,
    sorted: Vec<f64>,
    merged: Vec<f64>,
    delta: Vec<f64>,
    arrivals: Vec<f64>,
}

impl SortedWindow {
    fn load_sorted(dst: &mut Vec<f64>, values: &[f64]) {
        dst.clear();
        dst.extend(values.iter().copied().filter(|v| !v.is_nan()));
        dst.sort_unstable_by(f64::total_cmp);
    }

    fn advance(&mut self, values: &[f64], a: usize, b: usize) {
        if a < self.a || b < self.b || a >= self.b {
            Self::load_sorted(&mut self.sorted, &values[a..b]);
        } else if a > self.a || b > self.b {
            // One pass: drop the departed frames, merge in the arrivals.
            Self::load_sorted(&mut self.delta, &values[self.a..a]);
            Self::load_sorted(&mut self.arrivals, &values[self.b..b]);
            self.merged.clear();
            let (gone, new) = (&self.delta, &self.arrivals);
            let (mut g, mut j) = (0, 0);
            for &v in &self.sorted {
                if g < gone.len() && v.total_cmp(&gone[g]).is_eq() {
                    g += 1;
                    continue;
                }
                while j < new.len() && new[j].total_cmp(&v).is_lt() {
                    self.merged.push(new[j]);
                    j += 1;
                }
                self.merged.push(v);
            }
            self.merged.extend_from_slice(&new[j..]);
            std::mem::swap(&mut self.sorted, &mut self.merged);
        }
        self.a = a;
        self.b = b;
    }

    /// Statistics in [`Statistic::ALL`] order; `None` for an empty window.
    fn stats(&self) -> Option<[f64; 5]> {
        let v = &self.sorted;
        let n = v.len();
        if n == 0 {
            return None;
        }
        let mean = lane_sum(v, |x| x) / n as f64;
        let sd = if n > 1 {
            (lane_sum(v, |x| (x - mean) * (x - mean)) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some([mean, median, v[n - 1], v[0], sd])
    }
}

/// Featurizes one session under `preset`. Sessions too short for any
/// complete row produce an empty matrix (with a warning).
pub fn featurize_session(
    session: &Session,
    preset: &FeaturePreset,
    params: &FeatureParams,
) -> Result<FeatureMatrix, FeatureError> {
    let streams = compute_streams(session, params.bsc_half_window_s)?;
    featurize_streams(session, &streams, preset, params)
}

/// Featurizes from precomputed streams, letting several presets share one
/// stream pass.
pub fn featurize_streams(
    session: &Session,
    streams: &StreamSet,
    preset: &FeaturePreset,
    params: &FeatureParams,
) -> Result<FeatureMatrix, FeatureError> {
    let gaps = validate_rate(session, session.nominal_hz, params.max_gap_s).gaps;
    let times = &streams.times;
    let mut out = FeatureMatrix::empty(preset.column_names());
    out.sessions.push(session.key());
    let stream_idx: Vec<usize> = preset.streams.iter().map(|s| s.index()).collect();
    let stat_idx: Vec<usize> = preset.stats.iter().map(|&s| stat_slot(s)).collect();
    let end = session.duration();
    let mut row = Vec::with_capacity(preset.feature_count());

    let mut windows: Vec<SortedWindow> = (0..stream_idx.len() * preset.windows.len())
        .map(|_| SortedWindow::default())
        .collect();
    let mut t = 0.0;
    let mut k = 0u64;
    'sample: while t <= end {
        let ranges: Option<Vec<(usize, usize)>> = preset
            .windows
            .iter()
            .map(|&w| window_range(times, &gaps, t, w))
            .collect();
        k += 1;
        let this_t = t;
        t = k as f64;
        let Some(ranges) = ranges else { continue };
        row.clear();
        let mut slot = 0;
        for &si in &stream_idx {
            let values = &streams.values[si];
            for &(a, b) in &ranges {
                let win = &mut windows[slot];
                slot += 1;
                win.advance(values, a, b);
                let Some(stats) = win.stats() else {
                    continue 'sample;
                };
                row.extend(stat_idx.iter().map(|&j| stats[j]));
            }
        }
        out.tags.push(RowTag {
            session: 0,
            sample_time: this_t,
        });
        out.data.extend_from_slice(&row);
    }
    if out.is_empty() {
        log::warn!(
            "session {} ({:.1} s) too short for preset {}: no complete feature rows",
            session.key(),
            end,
            preset.name
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Binary cache

const CACHE_MAGIC: &[u8; 4] = b"MRFM";
const CACHE_VERSION: u32 = 1;

/// On-disk feature cache keyed by (trace digest, preset, parameters).
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn key(trace_digest: &str, preset: PresetName, params: &FeatureParams) -> String {
        let mut h = Sha256::new();
        h.update(trace_digest.as_bytes());
        h.update(preset.to_string().as_bytes());
        h.update(params.bsc_half_window_s.to_le_bytes());
        h.update(params.max_gap_s.to_le_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{}.mrfm", &key[..32]))
    }

    pub fn load(&self, key: &str) -> Result<Option<FeatureMatrix>, FeatureError> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path)?;
        decode_matrix(&bytes, key).map(Some)
    }

    pub fn store(&self, key: &str, m: &FeatureMatrix) -> Result<(), FeatureError> {
        std::fs::create_dir_all(&self.dir)?;
        let tmp = self.path(key).with_extension("tmp");
        std::fs::write(&tmp, encode_matrix(m, key))?;
        std::fs::rename(tmp, self.path(key))?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get_or_compute(
        &self,
        session: &Session,
        preset: PresetName,
        params: &FeatureParams,
    ) -> Result<FeatureMatrix, FeatureError> {
        let key = Self::key(&session.digest(), preset, params);
        if let Some(m) = self.load(&key)? {
            return Ok(m);
        }
        let m = featurize_session(session, &preset.preset(), params)?;
        self.store(&key, &m)?;
        Ok(m)
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_matrix(m: &FeatureMatrix, key: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + m.data.len() * 8);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    put_str(&mut buf, key);
    buf.extend_from_slice(&(m.columns.len() as u32).to_le_bytes());
    for c in &m.columns {
        put_str(&mut buf, c);
    }
    buf.extend_from_slice(&(m.sessions.len() as u32).to_le_bytes());
    for s in &m.sessions {
        buf.extend_from_slice(&[s.dataset, s.week]);
        put_str(&mut buf, &s.section);
        put_str(&mut buf, &s.participant);
    }
    buf.extend_from_slice(&(m.tags.len() as u64).to_le_bytes());
    for t in &m.tags {
        buf.extend_from_slice(&t.session.to_le_bytes());
        buf.extend_from_slice(&t.sample_time.to_le_bytes());
    }
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], FeatureError> {
        let mut out = [0u8; N];
        self.0
            .read_exact(&mut out)
            .map_err(|_| FeatureError::Cache("truncated".into()))?;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FeatureError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, FeatureError> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn string(&mut self) -> Result<String, FeatureError> {
        let n = self.u32()? as usize;
        if self.0.len() < n {
            return Err(FeatureError::Cache("truncated".into()));
        }
        let (s, rest) = self.0.split_at(n);
        self.0 = rest;
        String::from_utf8(s.to_vec()).map_err(|e| FeatureError::Cache(e.to_string()))
    }
}

pub fn decode_matrix(bytes: &[u8], expected_key: &str) -> Result<FeatureMatrix, FeatureError> {
    let mut r = Reader(bytes);
    if &r.take::<4>()? != CACHE_MAGIC {
        return Err(FeatureError::Cache("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(FeatureError::Cache(format!(
            "unsupported version {version}"
        )));
    }
    if r.string()? != expected_key {
        return Err(FeatureError::Cache("key mismatch".into()));
    }
    let ncols = r.u32()? as usize;
    let columns = (0..ncols)
        .map(|_| r.string())
        .collect::<Result<Vec<_>, _>>()?;
    let nsessions = r.u32()? as usize;
    let mut sessions = Vec::with_capacity(nsessions);
    for _ in 0..nsessions {
        let [dataset, week] = r.take::<2>()?;
        let section = r.string()?;
        let participant = r.string()?;
        sessions.push(SessionKey {
            dataset,
            week,
            section,
            participant,
        });
    }
    let nrows = u64::from_le_bytes(r.take()?) as usize;
    let mut tags = Vec::with_capacity(nrows);
    for _ in 0..nrows {
        let session = r.u32()?;
        if session as usize >= nsessions {
            return Err(FeatureError::Cache("row tag out of range".into()));
        }
        tags.push(RowTag {
            session,
            sample_time: r.f64()?,
        });
    }
    let mut data = Vec::with_capacity(nrows * ncols);
    for _ in 0..nrows * ncols {
        data.push(r.f64()?);
    }
    if !r.0.is_empty() {
        return Err(FeatureError::Cache("trailing bytes".into()));
    }
    Ok(FeatureMatrix {
        columns,
        sessions,
        tags,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn stream_inventory() {
        let all = Stream::all();
        assert_eq!(all.len(), 51);
        let full: Vec<_> = all
            .iter()
            .filter(|s| s.group() != StreamGroup::Legacy)
            .collect();
        assert_eq!(full.len(), 42);
        let count = |g| all.iter().filter(|s| s.group() == g).count();
        assert_eq!(count(StreamGroup::RawPose), 9);
        assert_eq!(count(StreamGroup::BscDisplacement), 9);
        assert_eq!(count(StreamGroup::Speed), 9);
        assert_eq!(count(StreamGroup::BscSpeed), 15);
        let names: std::collections::HashSet<_> = all.iter().map(|s| s.name()).collect();
        assert_eq!(names.len(), 51);
    }

    #[test]
    fn preset_column_counts() {
        let expected = [90, 60, 45, 180, 360, 840];
        for (p, n) in PresetName::ALL.iter().zip(expected) {
            let preset = p.preset();
            assert_eq!(preset.feature_count(), n, "{p}");
            assert_eq!(preset.column_names().len(), n);
        }
    }

    #[test]
    fn preset_parsing() {
        assert_eq!("m4".parse::<PresetName>().unwrap(), PresetName::M4);
        assert!("M7".parse::<PresetName>().is_err());
    }

    #[test]
    fn summarize_constant_window() {
        let v = [2.5; 7];
        for stat in [
            Statistic::Mean,
            Statistic::Median,
            Statistic::Max,
            Statistic::Min,
        ] {
            assert_eq!(summarize(&v, stat).unwrap(), 2.5);
        }
        assert_eq!(summarize(&v, Statistic::Sd).unwrap(), 0.0);
    }

    #[test]
    fn summarize_one_to_four() {
        let v = [3.0, 1.0, 4.0, 2.0];
        assert_eq!(summarize(&v, Statistic::Median).unwrap(), 2.5);
        // sqrt(((1.5^2 + 0.5^2) * 2) / 3) = sqrt(5/3)
        assert_abs_diff_eq!(
            summarize(&v, Statistic::Sd).unwrap(),
            (5.0f64 / 3.0).sqrt(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            summarize(&v, Statistic::Sd).unwrap(),
            1.290994,
            epsilon = 1e-6
        );
        assert_eq!(summarize(&v, Statistic::Mean).unwrap(), 2.5);
        assert_eq!(summarize(&v, Statistic::Max).unwrap(), 4.0);
        assert_eq!(summarize(&v, Statistic::Min).unwrap(), 1.0);
    }

    #[test]
    fn summarize_edge_cases() {
        assert_eq!(summarize(&[7.0], Statistic::Sd).unwrap(), 0.0);
        assert_eq!(summarize(&[7.0], Statistic::Median).unwrap(), 7.0);
        assert!(matches!(
            summarize(&[], Statistic::Mean),
            Err(FeatureError::EmptyWindow)
        ));
    }
}
