//! Seeded synthetic cohorts of seated-discussion sessions.
//!
//! Each participant is a vector of standard-normal latents mapped onto
//! physical traits. Weeks follow a random walk in latent space, sessions
//! re-draw a fraction of the latent variance, and motion within a session
//! is built from band-limited sinusoid noise, gesture events and heading
//! turns. The generator is a test instrument: its knobs exist to control
//! how identifiable participants are across sessions and weeks.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::trace::{write_trace, EulerAngles, MotionFrame, Pose, Session, TraceError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error("writing {path}: {source}")]
    Write { path: String, source: TraceError },
    #[error("creating {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Number of latent dimensions behind a profile.
pub const LATENT_DIM: usize = 19;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantProfile {
    /// Standard-normal coordinates the physical traits are derived from.
    pub latent: Vec<f64>,
    pub height: f64,
    pub arm_span: f64,
    /// Body-space hand rest positions relative to the head (x right, y up, z forward).
    pub left_rest: [f64; 3],
    pub right_rest: [f64; 3],
    pub bob_amplitude: f64,
    pub bob_frequency: f64,
    /// Gesture events per minute, per hand.
    pub gesture_rate: f64,
    pub sway_amplitude: f64,
    /// Degrees per second while turning.
    pub turn_rate: f64,
    pub head_pitch_bias: f64,
    pub head_roll_bias: f64,
    /// (pitch, roll) rest orientation of each controller, degrees.
    pub left_tilt: [f64; 2],
    pub right_tilt: [f64; 2],
}

impl ParticipantProfile {
    pub fn from_latent(z: &[f64]) -> Self {
        assert_eq!(
            z.len(),
            LATENT_DIM,
            "profile latent has {LATENT_DIM} entries"
        );
        let height = (1.72 + 0.09 * z[0]).clamp(1.4, 2.1);
        let arm_span = (height * (1.0 + 0.03 * z[1])).max(1.0);
        Self {
            latent: z.to_vec(),
            height,
            arm_span,
            left_rest: [
                -(0.20 + 0.05 * z[2]),
                -(0.55 + 0.07 * z[3]),
                0.28 + 0.07 * z[4],
            ],
            right_rest: [
                0.20 + 0.05 * z[5],
                -(0.55 + 0.07 * z[6]),
                0.28 + 0.07 * z[7],
            ],
            bob_amplitude: 0.012 * (0.4 * z[8]).exp(),
            bob_frequency: 0.3 * (0.3 * z[9]).exp(),
            gesture_rate: 4.0 * (0.5 * z[10]).exp(),
            sway_amplitude: 0.025 * (0.4 * z[11]).exp(),
            turn_rate: 40.0 * (0.4 * z[12]).exp(),
            head_pitch_bias: -6.0 + 6.0 * z[13],
            head_roll_bias: 3.0 * z[14],
            left_tilt: [-15.0 + 10.0 * z[15], 8.0 * z[16]],
            right_tilt: [-15.0 + 10.0 * z[17], 8.0 * z[18]],
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        let z: Vec<f64> = (0..LATENT_DIM)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self::from_latent(&z)
    }
}

/// Root-mean-square latent difference; a metric because it is a scaled
/// Euclidean distance.
pub fn profile_distance(a: &ParticipantProfile, b: &ParticipantProfile) -> f64 {
    let ss: f64 = a
        .latent
        .iter()
        .zip(&b.latent)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    (ss / LATENT_DIM as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_participants: usize,
    pub weeks: u8,
    pub minutes: f64,
    pub hz: f64,
    /// Fraction of latent variance re-drawn for every session, in [0, 1].
    pub session_noise: f64,
    /// Standard deviation of each weekly latent random-walk step.
    pub weekly_drift: f64,
    /// Rotate each session about the vertical axis and shift it
    /// horizontally by a random amount.
    pub spawn_randomization: bool,
    pub participants_per_section: usize,
    pub dataset_id: u8,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            n_participants: 30,
            weeks: 8,
            minutes: 10.0,
            hz: 30.0,
            session_noise: 0.6,
            weekly_drift: 0.4,
            spawn_randomization: true,
            participants_per_section: 10,
            dataset_id: 1,
            seed: 1,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_participants == 0 {
            return bad("n_participants must be positive".into());
        }
        if !(1..=8).contains(&self.weeks) {
            return bad(format!("weeks must be in 1..=8, got {}", self.weeks));
        }
        if !(self.minutes > 0.0) || !self.minutes.is_finite() {
            return bad(format!("minutes must be positive, got {}", self.minutes));
        }
        if !(self.hz > 0.0) || !self.hz.is_finite() {
            return bad(format!("hz must be positive, got {}", self.hz));
        }
        if !(0.0..=1.0).contains(&self.session_noise) {
            return bad(format!(
                "session_noise must be in [0, 1], got {}",
                self.session_noise
            ));
        }
        if !(self.weekly_drift >= 0.0) || !self.weekly_drift.is_finite() {
            return bad(format!(
                "weekly_drift must be non-negative, got {}",
                self.weekly_drift
            ));
        }
        if self.participants_per_section == 0 {
            return bad("participants_per_section must be positive".into());
        }
        if !(1..=2).contains(&self.dataset_id) {
            return bad(format!(
                "dataset_id must be 1 or 2, got {}",
                self.dataset_id
            ));
        }
        Ok(())
    }

    pub fn participant_id(&self, p: usize) -> String {
        format!("P{p:03}")
    }

    pub fn section_id(&self, p: usize) -> String {
        format!("S{}", p / self.participants_per_section + 1)
    }

    pub fn session_count(&self) -> usize {
        self.n_participants * self.weeks as usize
    }

    /// Base (week 1) profile of participant `p`.
    pub fn base_profile(&self, p: usize) -> ParticipantProfile {
        ParticipantProfile::sample(&mut seed::rng(
            self.seed,
            &[seed::tag_str("profile"), p as u64],
        ))
    }

    /// Week-`week` profile: the base latent plus `week - 1` random-walk steps.
    pub fn week_profile(&self, p: usize, week: u8) -> ParticipantProfile {
        let mut z = self.base_profile(p).latent;
        for w in 2..=week {
            let mut rng = seed::rng(self.seed, &[seed::tag_str("drift"), p as u64, w as u64]);
            for zi in z.iter_mut() {
                let step: f64 = rng.sample(StandardNormal);
                *zi += self.weekly_drift * step;
            }
        }
        ParticipantProfile::from_latent(&z)
    }

    /// Profile in effect for one session: the weekly latent with a
    /// `session_noise` share of its variance re-drawn.
    pub fn session_profile(&self, p: usize, week: u8) -> ParticipantProfile {
        let weekly = self.week_profile(p, week).latent;
        let mut rng = seed::rng(
            self.seed,
            &[seed::tag_str("session-noise"), p as u64, week as u64],
        );
        let keep = (1.0 - self.session_noise).sqrt();
        let fresh = self.session_noise.sqrt();
        let z: Vec<f64> = weekly
            .iter()
            .map(|&w| {
                let e: f64 = rng.sample(StandardNormal);
                keep * w + fresh * e
            })
            .collect();
        ParticipantProfile::from_latent(&z)
    }

    /// The rigid placement applied to a session when spawn randomization is on.
    pub fn spawn_transform(&self, p: usize, week: u8) -> Pose {
        let mut rng = seed::rng(self.seed, &[seed::tag_str("spawn"), p as u64, week as u64]);
        let yaw = rng.gen_range(-180.0..180.0);
        let x = rng.gen_range(-5.0..5.0);
        let z = rng.gen_range(-5.0..5.0);
        Pose::new(Vector3::new(x, 0.0, z), EulerAngles::new(yaw, 0.0, 0.0))
    }

    pub fn generate_session(&self, p: usize, week: u8) -> Session {
        let profile = self.session_profile(p, week);
        let mut rng = seed::rng(self.seed, &[seed::tag_str("motion"), p as u64, week as u64]);
        let frames = synthesize_motion(&profile, self.minutes * 60.0, self.hz, &mut rng);
        let session = Session {
            participant_id: self.participant_id(p),
            dataset_id: self.dataset_id,
            week,
            section_id: self.section_id(p),
            nominal_hz: self.hz,
            frames,
        };
        if self.spawn_randomization {
            session.transformed(&self.spawn_transform(p, week))
        } else {
            session
        }
    }
}

/// All sessions of the cohort, ordered by participant then week.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Vec<Session>, SynthError> {
    spec.validate()?;
    let cells: Vec<(usize, u8)> = (0..spec.n_participants)
        .flat_map(|p| (1..=spec.weeks).map(move |w| (p, w)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|&(p, w)| spec.generate_session(p, w))
        .collect())
}

/// File name used for a generated session.
pub fn trace_file_name(session: &Session) -> String {
    format!(
        "{}_d{}_w{}.jsonl",
        session.participant_id, session.dataset_id, session.week
    )
}

/// Generates the cohort straight to `dir`, one JSONL trace per session.
pub fn write_cohort(spec: &CohortSpec, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let cells: Vec<(usize, u8)> = (0..spec.n_participants)
        .flat_map(|p| (1..=spec.weeks).map(move |w| (p, w)))
        .collect();
    cells
        .par_iter()
        .map(|&(p, w)| {
            let session = spec.generate_session(p, w);
            let path = dir.join(trace_file_name(&session));
            let io = |source| SynthError::Io {
                path: path.display().to_string(),
                source,
            };
            let file = std::fs::File::create(&path).map_err(io)?;
            let mut w = std::io::BufWriter::new(file);
            write_trace(&session, &mut w).map_err(|source| SynthError::Write {
                path: path.display().to_string(),
                source,
            })?;
            std::io::Write::flush(&mut w).map_err(|source| SynthError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok(path)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Motion

/// Sum of sinusoids with log-uniform frequencies in `[lo, hi]` Hz and random
/// phases, scaled to the requested RMS.
struct BandNoise {
    omega: Vec<f64>,
    phase: Vec<f64>,
    amp: f64,
}

const PARTIALS: usize = 5;

impl BandNoise {
    fn new(rng: &mut ChaCha8Rng, lo: f64, hi: f64, rms: f64) -> Self {
        let (llo, lhi) = (lo.ln(), hi.ln());
        let omega = (0..PARTIALS)
            .map(|_| TAU * rng.gen_range(llo..lhi).exp())
            .collect();
        let phase = (0..PARTIALS).map(|_| rng.gen_range(0.0..TAU)).collect();
        // Each unit sinusoid has variance 1/2.
        let amp = rms * (2.0 / PARTIALS as f64).sqrt();
        Self { omega, phase, amp }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp
            * self
                .omega
                .iter()
                .zip(&self.phase)
                .map(|(w, p)| (w * t + p).sin())
                .sum::<f64>()
    }
}

/// A raised-cosine bump: 0 at both ends, 1 at the midpoint.
fn bump(start: f64, length: f64, t: f64) -> f64 {
    let u = (t - start) / length;
    if (0.0..1.0).contains(&u) {
        0.5 * (1.0 - (TAU * u).cos())
    } else {
        0.0
    }
}

struct Gesture {
    start: f64,
    length: f64,
    /// Body-space displacement at the peak.
    reach: Vector3<f64>,
    pitch: f64,
}

fn gestures(rng: &mut ChaCha8Rng, rate_per_min: f64, reach: f64, duration: f64) -> Vec<Gesture> {
    let gap = Exp::new(rate_per_min / 60.0).expect("positive gesture rate");
    let mut out = Vec::new();
    let mut t = gap.sample(rng);
    while t < duration {
        let length = rng.gen_range(1.0..3.0);
        let lift = reach * rng.gen_range(0.5..1.0);
        out.push(Gesture {
            start: t,
            length,
            reach: Vector3::new(rng.gen_range(-0.3..0.3) * lift, 0.8 * lift, 0.6 * lift),
            pitch: -rng.gen_range(15.0..45.0),
        });
        t += length + gap.sample(rng);
    }
    out
}

/// Body heading over time: holds still, then turns by a random angle at
/// the participant's turn rate.
fn heading_track(rng: &mut ChaCha8Rng, turn_rate: f64, duration: f64) -> Vec<(f64, f64, f64)> {
    // (start, end, delta degrees)
    let gap = Exp::new(1.0 / 40.0).expect("positive rate");
    let mut out = Vec::new();
    let mut t = gap.sample(rng);
    while t < duration {
        let delta: f64 = 35.0 * rng.sample::<f64, _>(StandardNormal);
        let length = (delta.abs() / turn_rate).max(0.3);
        out.push((t, t + length, delta));
        t += length + gap.sample(rng);
    }
    out
}

fn heading_at(turns: &[(f64, f64, f64)], t: f64) -> f64 {
    let mut h = 0.0;
    for &(s, e, d) in turns {
        if t >= e {
            h += d;
        } else if t > s {
            let u = (t - s) / (e - s);
            h += d * (0.5 - 0.5 * (std::f64::consts::PI * u).cos());
        } else {
            break;
        }
    }
    h
}

fn hand_pose(
    rest: &[f64; 3],
    tilt: &[f64; 2],
    gestures: &[Gesture],
    tremor: &[BandNoise; 5],
    t: f64,
) -> (Vector3<f64>, f64, f64, f64) {
    let mut local = Vector3::new(rest[0], rest[1], rest[2]);
    let mut pitch = tilt[0];
    for g in gestures {
        if t >= g.start + g.length {
            continue;
        }
        if t < g.start {
            break;
        }
        let b = bump(g.start, g.length, t);
        local += g.reach * b;
        pitch += g.pitch * b;
    }
    local += Vector3::new(tremor[0].at(t), tremor[1].at(t), tremor[2].at(t));
    (
        local,
        pitch + tremor[3].at(t),
        tilt[1] + tremor[4].at(t),
        0.0,
    )
}

/// Frames for one session in a body-centred world frame (seat at the
/// origin, initial heading +Z).
pub fn synthesize_motion(
    profile: &ParticipantProfile,
    duration_s: f64,
    hz: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<MotionFrame> {
    let n = (duration_s * hz).round().max(1.0) as usize;
    let eye = 0.52 * profile.height + 0.25; // seated eye height
    let reach = 0.25 * profile.arm_span / 1.72;

    let sway = [
        BandNoise::new(rng, 0.02, 0.2, profile.sway_amplitude),
        BandNoise::new(rng, 0.02, 0.2, profile.sway_amplitude),
    ];
    let head_yaw = BandNoise::new(rng, 0.03, 0.4, 12.0);
    let head_pitch = BandNoise::new(rng, 0.03, 0.4, 5.0);
    let head_roll = BandNoise::new(rng, 0.03, 0.3, 2.0);
    let bob_phase = rng.gen_range(0.0..TAU);
    let mut hand_noise = || -> [BandNoise; 5] {
        [
            BandNoise::new(rng, 0.05, 0.8, 0.015),
            BandNoise::new(rng, 0.05, 0.8, 0.015),
            BandNoise::new(rng, 0.05, 0.8, 0.015),
            BandNoise::new(rng, 0.05, 0.8, 4.0),
            BandNoise::new(rng, 0.05, 0.8, 4.0),
        ]
    };
    let left_noise = hand_noise();
    let right_noise = hand_noise();
    let left_g = gestures(rng, profile.gesture_rate, reach, duration_s);
    let right_g = gestures(rng, profile.gesture_rate, reach, duration_s);
    let turns = heading_track(rng, profile.turn_rate, duration_s);

    let mut frames = Vec::with_capacity(n);
    let mut left_from = 0usize;
    let mut right_from = 0usize;
    for i in 0..n {
        let t = i as f64 / hz;
        let heading = heading_at(&turns, t);
        let body = EulerAngles::new(heading, 0.0, 0.0).matrix();
        let seat = Vector3::new(sway[0].at(t), 0.0, sway[1].at(t));
        let bob = profile.bob_amplitude * (TAU * profile.bob_frequency * t + bob_phase).sin();
        let head_local = Vector3::new(0.0, eye + bob, 0.0) + seat;
        let head = Pose::new(
            body * head_local,
            EulerAngles::new(
                heading + head_yaw.at(t),
                profile.head_pitch_bias + head_pitch.at(t),
                profile.head_roll_bias + head_roll.at(t),
            )
            .normalized(),
        );
        while left_from < left_g.len() && left_g[left_from].start + left_g[left_from].length <= t {
            left_from += 1;
        }
        while right_from < right_g.len()
            && right_g[right_from].start + right_g[right_from].length <= t
        {
            right_from += 1;
        }
        let hand = |rest, tilt, g: &[Gesture], noise, from: usize| {
            let (local, pitch, roll, yaw) = hand_pose(rest, tilt, &g[from..], noise, t);
            Pose::new(
                body * (head_local + local),
                EulerAngles::new(heading + yaw, pitch, roll).normalized(),
            )
        };
        let left = hand(
            &profile.left_rest,
            &profile.left_tilt,
            &left_g,
            &left_noise,
            left_from,
        );
        let right = hand(
            &profile.right_rest,
            &profile.right_tilt,
            &right_g,
            &right_noise,
            right_from,
        );
        frames.push(MotionFrame {
            t,
            head,
            left,
            right,
            root: None,
        });
    }
    frames
}
