//! Joint generative and contrastive representation learning for anomalous
//! sound detection.
//!
//! The crate is organised as a pipeline:
//!
//! * [`data`] reads the DCASE2020 Task 2 development layout, or generates a
//!   synthetic dataset with the same schema.
//! * [`features`] turns waveforms into log-Mel spectrograms.
//! * [`pae`] is the masked-frame predictive autoencoder, trained per machine
//!   type, which also provides the frame-level anomaly score.
//! * [`geco`] trains the residual convolutional extractor with cross-entropy
//!   over machine IDs plus a contrastive term that separates originals from
//!   PAE reconstructions.
//! * [`scoring`] computes cosine-to-center clip scores and fuses them with the
//!   frame-level score.
//! * [`metrics`] implements AUC / pAUC and the per-type averaging protocol.
//! * [`pipeline`] stages everything on disk and backs the `geco` binary.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod features;
pub mod geco;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pae;
pub mod pipeline;
pub mod plot;
pub mod schedule;
pub mod scoring;

pub use error::{Error, Result};
