//! Continual-learning engine behind the CLaaS service.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small deterministic dense classifier trained with SGD, plus the
//!   CLBW weights format.
//! - [`scenario`]: CSV ingestion, synthetic Gaussian blobs and New-Classes
//!   (class-incremental) experience streams.
//! - [`strategies`]: stateful learners (naive fine-tuning, cumulative
//!   retraining, experience replay) with training-loop hooks.
//! - [`evaluation`]: accuracy matrix, average accuracy, forgetting, BWT, top-k
//!   accuracy, efficiency traces and multi-seed aggregation.
//! - [`drift`]: supervised (accuracy decay) and unsupervised (KS, PSI) drift
//!   detectors with a tumbling-window monitor.
//! - [`registry`]: blob storage and the per-experiment model version journal.
//! - [`harness`]: runs a full scenario for several seeds and collects a
//!   [`evaluation::RunRecord`].

pub mod drift;
pub mod evaluation;
pub mod harness;
pub mod nn;
pub mod registry;
pub mod scenario;
pub mod strategies;

mod seed;

pub use seed::derive_seed;
