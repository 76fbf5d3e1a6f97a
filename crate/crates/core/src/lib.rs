//! Table-tennis rally reconstruction from monocular tracks, conformal
//! anticipation of the opponent's return, and a pre-positioning robot
//! simulator that consumes those predictions.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: world-frame vocabulary (table, frames, segments, exchanges)
//!   and dataset statistics.
//! - [`camera`]: pinhole model, vanishing-point ground projection and the
//!   ten-point calibration.
//! - [`ball`]: hit/bounce detection and the Stokes-drag trajectory fit.
//! - [`pipeline`]: track/reconstruction file formats and per-point
//!   orchestration.
//! - [`synth`]: ground-truth rally generator used as the oracle throughout.
//! - [`anticipate`]: ensemble aggregation and split-conformal regions.
//! - [`control`]: reachable-set pre-positioning, contact models and the
//!   three-strategy return-rate experiment.
//!
//! Data-parallel loops (calibration sweeps, corpus reconstruction, conformal
//! scoring, episode batches) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! identical either way.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // negated comparisons reject NaN on purpose

pub mod anticipate;
pub mod ball;
pub mod camera;
pub mod control;
pub mod model;
pub mod optimize;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use model::{TableGeometry, Vec3};
