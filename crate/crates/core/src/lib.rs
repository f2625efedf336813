//! Motion re-identification toolkit for VR telemetry.
//!
//! The pipeline runs from raw 30 Hz head/controller traces through
//! body-space featurization and random-forest identification to
//! class-count-invariant evaluation:
//!
//! * [`trace`]: poses, rotation conventions, root composition, JSONL traces.
//! * [`body_space`]: windowed heading and the rotation into body-space coordinates.
//! * [`features`]: per-frame streams, windowed summaries and the M1..M6 presets.
//! * [`split`]: between/within/duration/delay train-test plans.
//! * [`forest`]: seeded random forest with session-level vote pooling.
//! * [`metrics`]: accuracy, multiclass AUC and N-class limited accuracy.
//! * [`synth`]: seeded synthetic cohorts with controllable identifiability.
//! * [`experiment`]: end-to-end experiment runners and report writers.

// Negated float comparisons are used on purpose: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod body_space;
pub mod error;
pub mod experiment;
pub mod features;
pub mod forest;
pub mod metrics;
pub mod seed;
pub mod split;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};

/// Tool version embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
