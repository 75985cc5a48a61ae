//! Request and response bodies.

use serde::{Deserialize, Serialize};

use rareseek_core::session::{Query, SessionConfig};
use rareseek_core::strategy::Strategy;
use rareseek_core::{ClassId, SampleId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub dataset: String,
    /// Overrides `config.strategy` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    /// Missing fields take the server defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SessionConfig>,
    pub positive_ids: Vec<SampleId>,
    #[serde(default)]
    pub negative_ids: Vec<SampleId>,
    /// Class used for metrics and demo labels; defaults to the class of the
    /// first positive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<ClassId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingLabels,
    Ready,
    Finished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub dataset: String,
    pub strategy: Strategy,
    pub phase: Phase,
    /// Current iteration: the one awaiting labels, or the last one once
    /// finished.
    pub t: usize,
    pub budget: usize,
    pub max_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub sample_id: SampleId,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchView {
    pub iteration: usize,
    pub items: Vec<BatchItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session: SessionHandle,
    pub batch: BatchView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub sample_id: SampleId,
    pub relevant: bool,
}

/// Either explicit labels for every outstanding id, or `{"auto": true}` in
/// demo mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    #[serde(default)]
    pub labels: Vec<LabelEntry>,
    #[serde(default)]
    pub auto: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationView {
    pub iteration: usize,
    pub sample_ids: Vec<SampleId>,
    pub labels: Vec<bool>,
    pub batch_ratio: f64,
    pub cov: f64,
    pub pos: f64,
    pub f1: f64,
}

/// Per-iteration metric series, index-aligned.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub iteration: Vec<usize>,
    pub cov: Vec<f64>,
    pub pos: Vec<f64>,
    pub batch_ratio: Vec<f64>,
    pub f1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub series: Series,
    /// Positives found through feedback, in discovery order.
    pub discovered: Vec<SampleId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResponse {
    pub session: SessionHandle,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<Report>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session: SessionHandle,
    pub target_class: ClassId,
    pub query: Query,
    pub labeled: usize,
    pub log: Vec<IterationView>,
    pub series: Series,
    pub discovered: Vec<SampleId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending: Option<BatchView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub dim: usize,
    pub num_samples: usize,
    pub num_classes: usize,
    pub pool_size: usize,
    pub test_size: usize,
    pub class_names: Vec<String>,
    pub has_images: bool,
}
