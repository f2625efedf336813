//! Telemetry data model, rotation conventions and the JSONL trace format.
//!
//! World coordinates are left-handed: +Y up, +Z forward, +X rightward.
//! Rotations are Tait-Bryan angles in degrees, applied intrinsically as
//! yaw (Y), then pitch (X), then roll (Z), so the rotation matrix is
//! `Ry(yaw) * Rx(pitch) * Rz(roll)`. Positive yaw turns +Z toward +X.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Maximum Frobenius deviation of `RᵀR` from identity accepted as a rotation.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

/// Below this `|cos(pitch)|` the decomposition is treated as gimbal-locked.
const GIMBAL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("missing session header record")]
    MissingHeader,
    #[error("line {line}: invalid header: {message}")]
    InvalidHeader { line: usize, message: String },
    #[error("line {line}: timestamp {t} does not increase past previous frame at {previous}")]
    NonMonotonic { line: usize, t: f64, previous: f64 },
    #[error("line {line}: unknown record type {kind:?}")]
    UnknownRecord { line: usize, kind: String },
    #[error("trace contains no frames")]
    NoFrames,
    #[error("matrix is not a proper rotation (deviation {deviation:.3e}, det {det:.6})")]
    NotRotation { deviation: f64, det: f64 },
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

/// Tait-Bryan angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl EulerAngles {
    pub const fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        euler_to_matrix(self.yaw, self.pitch, self.roll)
    }

    /// Brings the angles into the canonical ranges: pitch in [-90, 90],
    /// yaw and roll in [-180, 180). Angles already canonical only get wrapped.
    pub fn normalized(&self) -> Self {
        if (-90.0..=90.0).contains(&self.pitch) {
            Self::new(wrap_degrees(self.yaw), self.pitch, wrap_degrees(self.roll))
        } else {
            // Total on rotation matrices, so unwrap cannot fail here.
            matrix_to_euler(&self.matrix()).expect("euler_to_matrix yields a rotation")
        }
    }
}

/// Wraps an angle in degrees into [-180, 180).
pub fn wrap_degrees(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs.
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Rotation matrix for intrinsic yaw(Y) -> pitch(X) -> roll(Z), angles in degrees.
pub fn euler_to_matrix(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.to_radians().sin_cos();
    let (sp, cp) = pitch.to_radians().sin_cos();
    let (sr, cr) = roll.to_radians().sin_cos();
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    ry * rx * rz
}

/// Inverse of [`euler_to_matrix`]. At gimbal lock (|pitch| = 90°) roll is
/// set to 0 and yaw absorbs the free angle.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> Result<EulerAngles, TraceError> {
    let deviation = (r.transpose() * r - Matrix3::identity()).norm();
    let det = r.determinant();
    if !(deviation <= ORTHONORMAL_TOLERANCE) || (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
        return Err(TraceError::NotRotation { deviation, det });
    }
    let cos_pitch = r[(1, 0)].hypot(r[(1, 1)]);
    let pitch = (-r[(1, 2)]).atan2(cos_pitch);
    let (yaw, roll) = if cos_pitch < GIMBAL_EPS {
        ((-r[(2, 0)]).atan2(r[(0, 0)]), 0.0)
    } else {
        (r[(0, 2)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(1, 1)]))
    };
    Ok(EulerAngles::new(
        wrap_degrees(yaw.to_degrees()),
        pitch.to_degrees(),
        wrap_degrees(roll.to_degrees()),
    ))
}

/// Position in meters plus orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: EulerAngles,
}

impl Pose {
    pub fn new(position: Vector3<f64>, rotation: EulerAngles) -> Self {
        Self { position, rotation }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), EulerAngles::default())
    }

    /// Unit +Z carried through the pose's rotation.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.matrix().column(2).into_owned()
    }
}

/// Expresses `local` (given relative to `root`) in the root's parent frame.
pub fn compose_root(root: &Pose, local: &Pose) -> Pose {
    let root_r = root.rotation.matrix();
    let position = root.position + root_r * local.position;
    let rotation = matrix_to_euler(&(root_r * local.rotation.matrix()))
        .expect("product of rotations is a rotation");
    Pose::new(position, rotation)
}

/// One 30 Hz sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame {
    /// Seconds since session start.
    pub t: f64,
    pub head: Pose,
    pub left: Pose,
    pub right: Pose,
    /// Root transform as recorded; cleared once the tracked poses are composed.
    pub root: Option<Pose>,
}

impl MotionFrame {
    pub fn pose(&self, object: TrackedObject) -> &Pose {
        match object {
            TrackedObject::Head => &self.head,
            TrackedObject::Left => &self.left,
            TrackedObject::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackedObject {
    Head,
    Left,
    Right,
}

impl TrackedObject {
    pub const ALL: [TrackedObject; 3] = [
        TrackedObject::Head,
        TrackedObject::Left,
        TrackedObject::Right,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrackedObject::Head => "head",
            TrackedObject::Left => "left",
            TrackedObject::Right => "right",
        }
    }
}

/// Identity of one participant-week recording. Ordering is
/// (dataset, week, section, participant).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionKey {
    pub dataset: u8,
    pub week: u8,
    pub section: String,
    pub participant: String,
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/d{}/w{}/{}",
            self.participant, self.dataset, self.week, self.section
        )
    }
}

/// One participant's recording for one week.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub participant_id: String,
    pub dataset_id: u8,
    pub week: u8,
    pub section_id: String,
    pub nominal_hz: f64,
    pub frames: Vec<MotionFrame>,
}

impl Session {
    pub fn key(&self) -> SessionKey {
        SessionKey {
            dataset: self.dataset_id,
            week: self.week,
            section: self.section_id.clone(),
            participant: self.participant_id.clone(),
        }
    }

    /// Time of the last frame, seconds.
    pub fn duration(&self) -> f64 {
        self.frames.last().map_or(0.0, |f| f.t)
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    /// Applies `transform` as a root to every tracked pose.
    pub fn transformed(&self, transform: &Pose) -> Session {
        let frames = self
            .frames
            .iter()
            .map(|f| MotionFrame {
                t: f.t,
                head: compose_root(transform, &f.head),
                left: compose_root(transform, &f.left),
                right: compose_root(transform, &f.right),
                root: None,
            })
            .collect();
        Session {
            frames,
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Session {
        Session {
            participant_id: self.participant_id.clone(),
            dataset_id: self.dataset_id,
            week: self.week,
            section_id: self.section_id.clone(),
            nominal_hz: self.nominal_hz,
            frames: Vec::new(),
        }
    }

    /// SHA-256 over the metadata and the bit patterns of every numeric field.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.participant_id.as_bytes());
        h.update([0, self.dataset_id, self.week]);
        h.update(self.section_id.as_bytes());
        h.update(self.nominal_hz.to_le_bytes());
        for f in &self.frames {
            h.update(f.t.to_le_bytes());
            for pose in [&f.head, &f.left, &f.right] {
                for v in pose_values(pose) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn pose_values(p: &Pose) -> [f64; 6] {
    [
        p.position.x,
        p.position.y,
        p.position.z,
        p.rotation.yaw,
        p.rotation.pitch,
        p.rotation.roll,
    ]
}

// ---------------------------------------------------------------------------
// JSONL format

#[derive(Debug, Serialize, Deserialize)]
struct PoseRecord {
    p: [f64; 3],
    r: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(pose: &Pose) -> Self {
        let v = pose_values(pose);
        PoseRecord {
            p: [v[0], v[1], v[2]],
            r: [v[3], v[4], v[5]],
        }
    }
}

impl From<PoseRecord> for Pose {
    fn from(r: PoseRecord) -> Self {
        Pose::new(
            Vector3::new(r.p[0], r.p[1], r.p[2]),
            EulerAngles::new(r.r[0], r.r[1], r.r[2]).normalized(),
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Session {
        participant: String,
        dataset: u8,
        week: u8,
        section: String,
        hz: f64,
    },
    Frame {
        t: f64,
        head: PoseRecord,
        left: PoseRecord,
        right: PoseRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        root: Option<PoseRecord>,
    },
    #[serde(other)]
    Unknown,
}

fn unknown_kind(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("type").map(|t| t.to_string()))
        .unwrap_or_else(|| "<missing>".to_string())
}

/// Parses one JSONL trace. Root records, when present, are composed into the
/// tracked poses and then dropped.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Session, TraceError> {
    let mut session: Option<Session> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        match (record, session.as_mut()) {
            (
                Record::Session {
                    participant,
                    dataset,
                    week,
                    section,
                    hz,
                },
                None,
            ) => {
                if !(1..=2).contains(&dataset) {
                    return Err(invalid_header(
                        line_no,
                        format!("dataset {dataset} not in 1..=2"),
                    ));
                }
                if !(1..=8).contains(&week) {
                    return Err(invalid_header(line_no, format!("week {week} not in 1..=8")));
                }
                if !(hz.is_finite() && hz > 0.0) {
                    return Err(invalid_header(line_no, format!("hz {hz} must be positive")));
                }
                session = Some(Session {
                    participant_id: participant,
                    dataset_id: dataset,
                    week,
                    section_id: section,
                    nominal_hz: hz,
                    frames: Vec::new(),
                });
            }
            (Record::Session { .. }, Some(_)) => {
                return Err(invalid_header(line_no, "second session header".into()));
            }
            (Record::Frame { .. }, None) => return Err(TraceError::MissingHeader),
            (
                Record::Frame {
                    t,
                    head,
                    left,
                    right,
                    root,
                },
                Some(s),
            ) => {
                if !(t.is_finite() && t >= 0.0) {
                    return Err(TraceError::Malformed {
                        line: line_no,
                        message: format!("timestamp {t} must be finite and non-negative"),
                    });
                }
                if let Some(prev) = s.frames.last() {
                    if t <= prev.t {
                        return Err(TraceError::NonMonotonic {
                            line: line_no,
                            t,
                            previous: prev.t,
                        });
                    }
                }
                let (mut head, mut left, mut right): (Pose, Pose, Pose) =
                    (head.into(), left.into(), right.into());
                if let Some(root) = root {
                    let root: Pose = root.into();
                    head = compose_root(&root, &head);
                    left = compose_root(&root, &left);
                    right = compose_root(&root, &right);
                }
                s.frames.push(MotionFrame {
                    t,
                    head,
                    left,
                    right,
                    root: None,
                });
            }
            (Record::Unknown, _) => {
                return Err(TraceError::UnknownRecord {
                    line: line_no,
                    kind: unknown_kind(&line),
                });
            }
        }
    }
    let session = session.ok_or(TraceError::MissingHeader)?;
    if session.frames.is_empty() {
        return Err(TraceError::NoFrames);
    }
    Ok(session)
}

fn invalid_header(line: usize, message: String) -> TraceError {
    TraceError::InvalidHeader { line, message }
}

/// Writes `session` in the JSONL trace format. Poses are written as world
/// poses (no root records).
pub fn write_trace<W: Write>(session: &Session, mut w: W) -> Result<(), TraceError> {
    let header = Record::Session {
        participant: session.participant_id.clone(),
        dataset: session.dataset_id,
        week: session.week,
        section: session.section_id.clone(),
        hz: session.nominal_hz,
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    for f in &session.frames {
        let rec = Record::Frame {
            t: f.t,
            head: (&f.head).into(),
            left: (&f.left).into(),
            right: (&f.right).into(),
            root: f.root.as_ref().map(PoseRecord::from),
        };
        serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_file(path: &std::path::Path) -> Result<Session, TraceError> {
    let file = std::fs::File::open(path)?;
    parse_trace(std::io::BufReader::new(file))
}

// ---------------------------------------------------------------------------
// Frame-rate validation

/// One inter-frame interval longer than the allowed gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateGap {
    /// Index of the frame that ends the gap.
    pub frame: usize,
    pub start: f64,
    pub end: f64,
}

impl RateGap {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// True when the gap interval intersects the half-open window `[lo, hi)`.
    pub fn overlaps(&self, lo: f64, hi: f64) -> bool {
        self.start < hi && self.end > lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub nominal_hz: f64,
    pub max_gap: f64,
    pub frames: usize,
    pub gaps: Vec<RateGap>,
}

impl GapReport {
    pub fn is_clean(&self) -> bool {
        self.gaps.is_empty()
    }
}

/// Lists every inter-frame interval exceeding `max_gap` seconds.
pub fn validate_rate(session: &Session, nominal_hz: f64, max_gap: f64) -> GapReport {
    let gaps = session
        .frames
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].t - w[0].t > max_gap)
        .map(|(i, w)| RateGap {
            frame: i + 1,
            start: w[0].t,
            end: w[1].t,
        })
        .collect();
    GapReport {
        nominal_hz,
        max_gap,
        frames: session.frames.len(),
        gaps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent route: compose the same intrinsic sequence with quaternions.
    fn quat(yaw: f64, pitch: f64, roll: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw.to_radians())
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch.to_radians())
            * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll.to_radians())
    }

    #[test]
    fn zero_angles_give_identity() {
        assert_eq!(euler_to_matrix(0.0, 0.0, 0.0), Matrix3::identity());
    }

    #[test]
    fn positive_yaw_turns_forward_to_right() {
        let m = euler_to_matrix(90.0, 0.0, 0.0);
        let v = m * Vector3::z();
        assert_abs_diff_eq!(v, Vector3::x(), epsilon = 1e-12);
        let q = quat(90.0, 0.0, 0.0) * Vector3::z();
        assert_abs_diff_eq!(v, q, epsilon = 1e-12);
    }

    #[test]
    fn matrix_agrees_with_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let (y, p, r) = (
                rng.gen_range(-180.0..180.0),
                rng.gen_range(-90.0..90.0),
                rng.gen_range(-180.0..180.0),
            );
            let m = euler_to_matrix(y, p, r);
            let q = quat(y, p, r).to_rotation_matrix().into_inner();
            assert_abs_diff_eq!(m, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (y, p, r) = (
                rng.gen_range(-180.0..180.0),
                rng.gen_range(-89.0..89.0),
                rng.gen_range(-180.0..180.0),
            );
            let e = matrix_to_euler(&euler_to_matrix(y, p, r)).unwrap();
            assert_abs_diff_eq!(e.yaw, y, epsilon = 1e-9);
            assert_abs_diff_eq!(e.pitch, p, epsilon = 1e-9);
            assert_abs_diff_eq!(e.roll, r, epsilon = 1e-9);
        }
        let e = matrix_to_euler(&euler_to_matrix(45.0, 30.0, -10.0)).unwrap();
        assert_abs_diff_eq!(e.yaw, 45.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.pitch, 30.0, epsilon = 1e-9);
        assert_abs_diff_eq!(e.roll, -10.0, epsilon = 1e-9);
        assert_eq!(
            matrix_to_euler(&Matrix3::identity()).unwrap(),
            EulerAngles::default()
        );
    }

    #[test]
    fn gimbal_lock_sets_roll_zero() {
        for (y, p, r) in [(30.0, 90.0, 20.0), (30.0, -90.0, 20.0), (-170.0, 90.0, 0.0)] {
            let m = euler_to_matrix(y, p, r);
            let e = matrix_to_euler(&m).unwrap();
            assert_abs_diff_eq!(e.pitch, p, epsilon = 1e-6);
            assert_eq!(e.roll, 0.0);
            assert_abs_diff_eq!(e.matrix(), m, epsilon = 1e-9);
        }
        let e = matrix_to_euler(&euler_to_matrix(30.0, 90.0, 20.0)).unwrap();
        assert_abs_diff_eq!(e.yaw, 10.0, epsilon = 1e-6);
    }

    #[test]
    fn rejects_non_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 1)] = 1e-3;
        assert!(matches!(
            matrix_to_euler(&m),
            Err(TraceError::NotRotation { .. })
        ));
        let reflect = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(matrix_to_euler(&reflect).is_err());
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let m = euler_to_matrix(
                rng.gen_range(-360.0..360.0),
                rng.gen_range(-180.0..180.0),
                rng.gen_range(-360.0..360.0),
            );
            assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
            assert_abs_diff_eq!(m.determinant(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_degrees(180.0), -180.0);
        assert_eq!(wrap_degrees(-180.0), -180.0);
        assert_eq!(wrap_degrees(540.0), -180.0);
        assert_abs_diff_eq!(wrap_degrees(-190.0), 170.0, epsilon = 1e-12);
        assert!(wrap_degrees(-1e-17) < 180.0);
    }

    #[test]
    fn normalizes_out_of_range_pitch() {
        let e = EulerAngles::new(0.0, 120.0, 0.0).normalized();
        assert!(e.pitch.abs() <= 90.0);
        assert_abs_diff_eq!(
            e.matrix(),
            euler_to_matrix(0.0, 120.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn compose_root_cases() {
        let p = Pose::new(
            Vector3::new(0.3, 1.2, -0.4),
            EulerAngles::new(12.0, -7.0, 3.0),
        );
        assert_eq!(compose_root(&Pose::identity(), &p), p);

        let root = Pose::new(Vector3::new(1.0, 0.0, 0.0), EulerAngles::default());
        let local = Pose::new(Vector3::new(0.0, 1.7, 0.0), EulerAngles::default());
        assert_abs_diff_eq!(
            compose_root(&root, &local).position,
            Vector3::new(1.0, 1.7, 0.0)
        );

        let root = Pose::new(Vector3::zeros(), EulerAngles::new(90.0, 0.0, 0.0));
        let local = Pose::new(Vector3::new(0.0, 0.0, 2.0), EulerAngles::default());
        let world = compose_root(&root, &local);
        let oracle = quat(90.0, 0.0, 0.0) * Vector3::new(0.0, 0.0, 2.0);
        assert_abs_diff_eq!(world.position, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(world.position, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(world.rotation.yaw, 90.0, epsilon = 1e-12);
    }

    #[test]
    fn compose_root_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pose = |rng: &mut ChaCha8Rng| {
            Pose::new(
                Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
                EulerAngles::new(
                    rng.gen_range(-180.0..180.0),
                    rng.gen_range(-80.0..80.0),
                    rng.gen_range(-180.0..180.0),
                ),
            )
        };
        for _ in 0..200 {
            let (a, b, c) = (pose(&mut rng), pose(&mut rng), pose(&mut rng));
            let left = compose_root(&compose_root(&a, &b), &c);
            let right = compose_root(&a, &compose_root(&b, &c));
            assert_abs_diff_eq!(left.position, right.position, epsilon = 1e-9);
            assert_abs_diff_eq!(
                left.rotation.matrix(),
                right.rotation.matrix(),
                epsilon = 1e-9
            );
        }
    }

    fn frame_line(t: f64, extra: &str) -> String {
        format!(
            r#"{{"type":"frame","t":{t},"head":{{"p":[0,1.6,0],"r":[0,0,0]}},"left":{{"p":[-0.2,1.0,0.3],"r":[0,0,0]}},"right":{{"p":[0.2,1.0,0.3],"r":[0,0,0]}}{extra}}}"#
        )
    }

    const HEADER: &str =
        r#"{"type":"session","participant":"P001","dataset":1,"week":3,"section":"S07","hz":30}"#;

    #[test]
    fn parses_two_frames() {
        let text = format!(
            "{HEADER}\n{}\n{}\n",
            frame_line(0.0, ""),
            frame_line(0.0333, "")
        );
        let s = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(s.frames.len(), 2);
        assert_eq!(s.participant_id, "P001");
        assert_eq!((s.dataset_id, s.week, s.section_id.as_str()), (1, 3, "S07"));
        assert_eq!(s.nominal_hz, 30.0);
    }

    #[test]
    fn reports_non_monotonic_line() {
        let text = format!(
            "{HEADER}\n{}\n{}\n",
            frame_line(0.5, ""),
            frame_line(0.2, "")
        );
        match parse_trace(text.as_bytes()) {
            Err(TraceError::NonMonotonic { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors() {
        let missing = format!("{}\n", frame_line(0.0, ""));
        assert!(matches!(
            parse_trace(missing.as_bytes()),
            Err(TraceError::MissingHeader)
        ));
        assert!(matches!(
            parse_trace("".as_bytes()),
            Err(TraceError::MissingHeader)
        ));
        let bad = format!("{HEADER}\n{{\"type\":\"frame\",\"t\":\n");
        assert!(matches!(
            parse_trace(bad.as_bytes()),
            Err(TraceError::Malformed { line: 2, .. })
        ));
        let unknown = format!("{HEADER}\n{{\"type\":\"gaze\",\"t\":0}}\n");
        match parse_trace(unknown.as_bytes()) {
            Err(TraceError::UnknownRecord { line, kind }) => {
                assert_eq!(line, 2);
                assert!(kind.contains("gaze"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_trace(format!("{HEADER}\n").as_bytes()),
            Err(TraceError::NoFrames)
        ));
    }

    #[test]
    fn root_is_composed_at_parse_time() {
        let root = r#","root":{"p":[0,0,0],"r":[90,0,0]}"#;
        let line = |t: f64| {
            format!(
                r#"{{"type":"frame","t":{t},"head":{{"p":[0,0,1],"r":[0,0,0]}},"left":{{"p":[0,0,0],"r":[0,0,0]}},"right":{{"p":[0,0,0],"r":[0,0,0]}}{root}}}"#
            )
        };
        let text = format!("{HEADER}\n{}\n{}\n", line(0.0), line(1.0 / 30.0));
        let s = parse_trace(text.as_bytes()).unwrap();
        for f in &s.frames {
            assert!(f.root.is_none());
            let oracle = quat(90.0, 0.0, 0.0) * Vector3::z();
            assert_abs_diff_eq!(f.head.position, oracle, epsilon = 1e-12);
            assert_abs_diff_eq!(f.head.position, Vector3::x(), epsilon = 1e-12);
            assert_abs_diff_eq!(f.head.rotation.yaw, 90.0, epsilon = 1e-12);
        }
    }

    fn uniform_session(times: &[f64]) -> Session {
        Session {
            participant_id: "P".into(),
            dataset_id: 1,
            week: 1,
            section_id: "S".into(),
            nominal_hz: 30.0,
            frames: times
                .iter()
                .map(|&t| MotionFrame {
                    t,
                    head: Pose::identity(),
                    left: Pose::identity(),
                    right: Pose::identity(),
                    root: None,
                })
                .collect(),
        }
    }

    #[test]
    fn rate_gaps() {
        let times: Vec<f64> = (0..300).map(|i| i as f64 / 30.0).collect();
        assert!(validate_rate(&uniform_session(&times), 30.0, 0.5).is_clean());

        let holed: Vec<f64> = times
            .iter()
            .copied()
            .filter(|&t| !(t > 3.0 && t < 5.0))
            .collect();
        let report = validate_rate(&uniform_session(&holed), 30.0, 0.5);
        assert_eq!(report.gaps.len(), 1);
        let gap = report.gaps[0];
        assert!(gap.start <= 3.0 && gap.end >= 5.0 && gap.length() < 2.1);
        assert!(gap.overlaps(4.0, 4.5));
        assert!(!gap.overlaps(5.1, 6.0));
    }
}
