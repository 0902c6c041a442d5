//! Sharded teacher-student distillation with verifiable (exact) unlearning.
//!
//! The crate is organised bottom-up:
//!
//! - [`data`]: datasets, synthetic generation, CSV ingestion and the
//!   shard → chunk → slice [`data::PartitionPlan`].
//! - [`model`]: small deterministic classifiers trained with plain SGD on a
//!   soft-label cross-entropy loss, plus ensemble averaging.
//! - [`checkpoint`]: lossless binary persistence of every intermediate state.
//! - [`teacher`]: the sliced, checkpointed teacher ensemble.
//! - [`student`]: constituent mapping and incremental multi-teacher training
//!   of student constituents.
//! - [`unlearning`]: student-side, teacher-side and simultaneous removal
//!   requests with an independent exactness oracle.
//! - [`costmodel`] and [`simulate`]: closed-form retraining costs, the
//!   data-point step ledger, and step-count simulation.

pub mod checkpoint;
pub mod costmodel;
pub mod data;
mod error;
pub mod model;
pub mod seed;
pub mod simulate;
pub mod student;
pub mod teacher;
pub mod unlearning;

pub use error::{Error, Result};
