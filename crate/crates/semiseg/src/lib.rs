//! Semi-supervised 3D segmentation training.
//!
//! A student/teacher consistency framework for volumetric binary segmentation
//! with a third supervision branch: a promptable segmentation oracle, prompted
//! automatically from the student's own coarse predictions. Pseudo-labels from
//! the oracle enter the objective through a ramp-down-weighted consistency
//! term, so the oracle guides training early and fades out as the student
//! matures.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`volumes`] — volume/mask data model, NIfTI-1 ingestion, dataset splits,
//!   patch sampling, and synthetic phantom generation for desk-scale tests.
//! - [`schedules`] — the ramp-up/ramp-down consistency weights and the
//!   stepwise learning-rate schedule.
//! - [`network`] — a V-Net-style volumetric encoder-decoder with a
//!   size-configurable tiny variant that trains on CPU.
//! - [`teacher`] — EMA teacher maintenance and uncertainty estimation/masking.
//! - [`oracle`] — prompt extraction, oracle backends (synthetic and an
//!   out-of-process spool adapter), and pseudo-label plumbing.
//! - [`losses`] — all objective terms and their weighted combination.
//! - [`metrics`] — Dice/Jaccard/ASD/95HD with brute-force references.
//! - [`trainer`] — the training state machine, sliding-window inference,
//!   checkpointing, and evaluation.

pub mod error;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod oracle;
pub mod rng;
pub mod schedules;
pub mod teacher;
pub mod trainer;
pub mod volumes;

pub use error::SegError;
