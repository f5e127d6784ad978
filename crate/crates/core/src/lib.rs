//! Squeezed-Xception toolkit for on-device defect detection.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`tensor`] : dense tensors with a reverse-mode tape.
//! * [`arch`] : the architecture IR, its rewrite passes and the parameter
//!   accountant.
//! * [`model`] : compilation of an [`arch::ArchGraph`] into a trainable model,
//!   plus checkpoints.
//! * [`tiles`] : annotation parsing, tiling and dataset generation.
//! * [`train`] : the training loop and metrics history.
//! * [`detect`] : grid detection with pseudo bounding boxes.
//! * [`telemetry`] : resource sampling and comparison reports.

pub mod arch;
pub mod detect;
pub mod model;
pub mod telemetry;
pub mod tensor;
pub mod tiles;
pub mod train;
