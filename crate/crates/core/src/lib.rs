//! Interactive rare-class retrieval with relevance feedback.
//!
//! A retrieval session starts from a tiny labeled query (one positive, a few
//! negatives) over a pool of frozen image embeddings. Every iteration trains
//! a linear SVM on the labels gathered so far, scores the unlabeled pool with
//! a selection strategy, and hands the top `b` candidates to an annotator.
//!
//! Modules:
//!
//! - [`dataset`]: binary embedding store and class-frequency diagnostics.
//! - [`classifier`]: dual coordinate descent linear SVM with a logistic score.
//! - [`strategy`]: selection criteria (PF-MA, MA, MP, ALAMP, DAL, CoreSet,
//!   random) and the step / distance diversifiers.
//! - [`session`]: the train, score, select, annotate loop.
//! - [`metrics`]: class coverage over K-means clusters, discovery rate,
//!   batch positive ratio and held-out f1.
//! - [`bench`]: synthetic long-tailed datasets and the experiment harness.
//!
//! Hot loops go through [`par`], which uses rayon when the `parallel` feature
//! is enabled and runs sequentially otherwise.

pub mod bench;
pub mod classifier;
pub mod dataset;
mod error;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod session;
pub mod strategy;

pub use error::{Error, Result};

/// Row index into an [`dataset::EmbeddedDataset`].
pub type SampleId = u32;
/// Index into a dataset's `class_names`.
pub type ClassId = u32;
