//! Body-space coordinates: vertical stays vertical, forward is the
//! horizontal direction of the head's mean forward vector over a ±3 s
//! window around each frame, and rightward completes the frame.

use nalgebra::{Matrix3, Vector3};

use crate::trace::Session;

pub const DEFAULT_HALF_WINDOW_S: f64 = 3.0;

/// Horizontal magnitudes below this leave the heading undefined.
pub const DEGENERATE_HORIZONTAL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BscFrameContext {
    pub frame_time: f64,
    pub half_window: f64,
    pub heading_theta: f64,
    pub bsc_rotation: Matrix3<f64>,
}

impl BscFrameContext {
    pub fn new(frame_time: f64, half_window: f64, heading_theta: f64) -> Self {
        Self {
            frame_time,
            half_window,
            heading_theta,
            bsc_rotation: bsc_rotation(heading_theta),
        }
    }
}

/// Head forward vector with its vertical component zeroed.
fn projected_forward(session: &Session, i: usize) -> Vector3<f64> {
    let f = session.frames[i].head.forward();
    Vector3::new(f.x, 0.0, f.z)
}

/// Mean horizontal projection of the head forward vector over frames with
/// `|t - frame_time| <= half_window`. Returns `None` for an empty window.
pub fn mean_forward(session: &Session, frame_time: f64, half_window: f64) -> Option<Vector3<f64>> {
    let (mut sum, mut n) = (Vector3::zeros(), 0usize);
    for (i, f) in session.frames.iter().enumerate() {
        if (f.t - frame_time).abs() <= half_window {
            sum += projected_forward(session, i);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// `atan2(v.x, v.z)`, or `fallback` when the horizontal part of `v` is
/// (numerically) zero.
pub fn heading_theta(v: &Vector3<f64>, fallback: f64) -> f64 {
    if v.x.hypot(v.z) < DEGENERATE_HORIZONTAL {
        fallback
    } else {
        v.x.atan2(v.z)
    }
}

/// Rotation about the vertical axis that maps heading `theta` onto +Z.
pub fn bsc_rotation(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// Expresses a world-space displacement in body space. The vertical
/// component is passed through untouched.
pub fn to_body_space(ctx: &BscFrameContext, d: &Vector3<f64>) -> Vector3<f64> {
    let r = &ctx.bsc_rotation;
    Vector3::new(
        r[(0, 0)] * d.x + r[(0, 2)] * d.z,
        d.y,
        r[(2, 0)] * d.x + r[(2, 2)] * d.z,
    )
}

/// Per-frame body-space contexts for a whole session.
///
/// The window mean is maintained as a running sum over a two-pointer
/// window, so the pass is linear in the frame count. A degenerate mean
/// holds the previous frame's heading (0 before any valid heading).
pub fn session_contexts(session: &Session, half_window: f64) -> Vec<BscFrameContext> {
    let n = session.frames.len();
    let forwards: Vec<Vector3<f64>> = (0..n).map(|i| projected_forward(session, i)).collect();
    let times = session.times();
    let mut out = Vec::with_capacity(n);
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut sum = Vector3::zeros();
    let mut theta = 0.0;
    for (i, &t) in times.iter().enumerate() {
        while hi < n && times[hi] - t <= half_window {
            sum += forwards[hi];
            hi += 1;
        }
        while t - times[lo] > half_window {
            sum -= forwards[lo];
            lo += 1;
        }
        // Refresh periodically so the subtraction error cannot accumulate.
        if i % 4096 == 0 {
            sum = forwards[lo..hi].iter().sum();
        }
        let mean = sum / (hi - lo) as f64;
        theta = heading_theta(&mean, theta);
        out.push(BscFrameContext::new(t, half_window, theta));
    }
    out
}
