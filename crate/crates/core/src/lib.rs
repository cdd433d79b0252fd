// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse-autoencoder feature-shift analysis and transferability scoring.
//!
//! The crate is organised as a pipeline:
//!
//! - [`activation_io`]: the binary activation dump format, manifests and
//!   pairing of plain / in-context streams.
//! - [`sae`]: sparse-autoencoder forward pass (TopK and ReLU laws) and the
//!   model file format.
//! - [`train`]: AdamW training with cosine learning-rate and L1 warmups.
//! - [`shift`]: per-dimension shift scores, top-N selection, overlap,
//!   concentration and zero-ablation.
//! - [`sts`]: transferability scores over a selected dimension set and
//!   data-mixture ratios.
//! - [`stats`]: Pearson correlation, least-squares fits and seed aggregation.
//! - [`synth`]: planted synthetic worlds used as ground truth for the whole
//!   pipeline.

pub mod activation_io;
pub mod error;
pub mod linalg;
pub mod sae;
pub mod shift;
pub mod stats;
pub mod sts;
pub mod synth;
pub mod train;

pub use activation_io::{
    align_pairs, read_dump, write_dump, ActivationDump, Manifest, PairedStream, Role, Segment,
    Space,
};
pub use error::{Error, Result};
pub use linalg::{Matrix, Real};
pub use sae::{ActivationLaw, SaeModel};
pub use shift::{ConcentrationCurve, ShiftReport};
pub use stats::{CorrelationResult, SeedSummary};
pub use sts::{StsMode, StsRow, StsTable};
pub use synth::{Domain, SynthSpec, SynthWorld};
pub use train::{TrainConfig, TrainLog};
