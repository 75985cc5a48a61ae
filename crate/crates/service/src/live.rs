//! One interactive session: the core state machine plus phase tracking,
//! metrics and the optional journal.

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::json;

use rareseek_core::dataset::EmbeddedDataset;
use rareseek_core::metrics::{self, Evaluator, IterationMetrics};
use rareseek_core::session::{self, Query, SessionConfig, SessionState};
use rareseek_core::{ClassId, SampleId};

use crate::api::*;
use crate::error::ApiError;
use crate::journal::{Event, Journal};

pub struct LiveSession {
    id: String,
    dataset: Arc<EmbeddedDataset>,
    config: SessionConfig,
    query: Query,
    target: ClassId,
    evaluator: Arc<Evaluator>,
    state: SessionState,
    phase: Phase,
    journal: Option<Journal>,
}

/// Rejects malformed queries before any state exists.
pub fn validate_query(dataset: &EmbeddedDataset, req: &CreateSessionRequest) -> Result<(), ApiError> {
    if req.positive_ids.is_empty() || req.negative_ids.is_empty() {
        return Err(ApiError::unprocessable(
            "single_class_query",
            "a query needs at least one positive and one negative id",
        ));
    }
    let mut bad: Vec<SampleId> = req
        .positive_ids
        .iter()
        .chain(&req.negative_ids)
        .copied()
        .filter(|&id| !dataset.in_pool(id))
        .collect();
    if !bad.is_empty() {
        bad.sort_unstable();
        bad.dedup();
        return Err(ApiError::unprocessable("invalid_ids", "ids are not pool samples")
            .with_details(json!({ "ids": bad })));
    }
    let mut counts: HashMap<SampleId, usize> = HashMap::new();
    for &id in req.positive_ids.iter().chain(&req.negative_ids) {
        *counts.entry(id).or_default() += 1;
    }
    let mut dup: Vec<SampleId> = counts.into_iter().filter(|e| e.1 > 1).map(|e| e.0).collect();
    if !dup.is_empty() {
        dup.sort_unstable();
        return Err(ApiError::unprocessable(
            "invalid_ids",
            "ids must appear once across positives and negatives",
        )
        .with_details(json!({ "ids": dup })));
    }
    if let Some(c) = req.target_class {
        if c as usize >= dataset.num_classes() {
            return Err(ApiError::unprocessable("invalid_request", format!("class {c} does not exist")));
        }
    }
    Ok(())
}

/// Class that metrics and demo labels refer to.
pub fn target_class(dataset: &EmbeddedDataset, req: &CreateSessionRequest) -> ClassId {
    req.target_class
        .unwrap_or_else(|| dataset.oracle_labels()[req.positive_ids[0] as usize])
}

impl LiveSession {
    /// Initializes the session and proposes the first batch. The request
    /// must already have passed [`validate_query`].
    pub fn start(
        id: String,
        dataset: Arc<EmbeddedDataset>,
        req: &CreateSessionRequest,
        config: SessionConfig,
        evaluator: Arc<Evaluator>,
    ) -> Result<Self, ApiError> {
        let target = target_class(&dataset, req);
        let query = Query {
            positive_ids: req.positive_ids.clone(),
            negative_ids: req.negative_ids.clone(),
            target_class: Some(target),
        };
        let state = session::init_session(&dataset, &query, &config)?;
        let mut live = LiveSession {
            id,
            dataset,
            config,
            query,
            target,
            evaluator,
            state,
            phase: Phase::Ready,
            journal: None,
        };
        live.advance()?;
        Ok(live)
    }

    pub fn attach_journal(&mut self, journal: Journal) {
        self.journal = Some(journal);
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Proposes the next batch when none is outstanding.
    pub fn advance(&mut self) -> Result<(), ApiError> {
        if self.phase != Phase::Ready {
            return Ok(());
        }
        if self.state.is_finished() {
            self.phase = Phase::Finished;
            return Ok(());
        }
        session::propose(&mut self.state, &self.dataset, &self.config)?;
        self.phase = Phase::AwaitingLabels;
        Ok(())
    }

    /// Maps a submission onto the outstanding batch order. Nothing changes on
    /// error.
    pub fn resolve(&self, sub: &LabelSubmission, demo: bool) -> Result<Vec<bool>, ApiError> {
        if self.phase != Phase::AwaitingLabels {
            return Err(ApiError::conflict(format!(
                "session {} has no batch awaiting labels",
                self.id
            )));
        }
        let batch = self.state.pending().expect("awaiting labels implies a batch");
        if sub.auto {
            if !demo {
                return Err(ApiError::unprocessable(
                    "demo_disabled",
                    "automatic labels need a server started in demo mode",
                ));
            }
            if !sub.labels.is_empty() {
                return Err(ApiError::unprocessable(
                    "invalid_request",
                    "send either labels or auto, not both",
                ));
            }
            let truth = self.dataset.oracle_labels();
            return Ok(batch.ids.iter().map(|&id| truth[id as usize] == self.target).collect());
        }

        let position: HashMap<SampleId, usize> =
            batch.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut labels: Vec<Option<bool>> = vec![None; batch.ids.len()];
        let mut unknown = Vec::new();
        let mut duplicate = Vec::new();
        for e in &sub.labels {
            match position.get(&e.sample_id) {
                None => unknown.push(e.sample_id),
                Some(&i) if labels[i].is_some() => duplicate.push(e.sample_id),
                Some(&i) => labels[i] = Some(e.relevant),
            }
        }
        let missing: Vec<SampleId> = batch
            .ids
            .iter()
            .zip(&labels)
            .filter(|(_, l)| l.is_none())
            .map(|(&id, _)| id)
            .collect();
        if !(unknown.is_empty() && duplicate.is_empty() && missing.is_empty()) {
            return Err(ApiError::unprocessable(
                "label_mismatch",
                "labels must cover the outstanding batch exactly once",
            )
            .with_details(json!({
                "unknown": unknown,
                "duplicate": duplicate,
                "missing": missing,
            })));
        }
        Ok(labels.into_iter().map(|l| l.expect("checked")).collect())
    }

    /// Absorbs resolved labels, records metrics and proposes the next batch
    /// unless the session is over.
    pub fn apply(&mut self, labels: &[bool]) -> Result<(), ApiError> {
        session::absorb(&mut self.state, labels, self.config.max_iterations)?;
        self.phase = Phase::Ready;
        let metrics = self.metrics()?;
        self.state.log.last_mut().expect("just absorbed").metrics = Some(metrics);
        self.advance()
    }

    /// Journals the labels, then applies them.
    pub fn submit(&mut self, sub: &LabelSubmission, demo: bool) -> Result<LabelResponse, ApiError> {
        let labels = self.resolve(sub, demo)?;
        if let Some(j) = self.journal.as_mut() {
            j.append(&Event::Labeled { labels: labels.clone() })
                .map_err(|e| ApiError::internal(format!("journal write failed: {e}")))?;
        }
        self.apply(&labels)?;
        let finished = self.phase == Phase::Finished;
        Ok(LabelResponse {
            session: self.handle(),
            batch: if finished { None } else { self.batch() },
            report: finished.then(|| Report {
                series: self.series(),
                discovered: self.feedback_positives(),
            }),
        })
    }

    /// Coverage and discovery count only members of the target class, so a
    /// human's off-class "relevant" marks do not break the metric.
    fn metrics(&mut self) -> Result<IterationMetrics, ApiError> {
        let members: Vec<SampleId> = self
            .state
            .discovered
            .ids()
            .iter()
            .copied()
            .filter(|&id| self.evaluator.clusters.member_index(id).is_some())
            .collect();
        let model = session::ensure_model(&mut self.state, &self.dataset, &self.config)?.clone();
        let f1 = if self.dataset.test().is_empty() {
            0.0
        } else {
            metrics::f1_heldout(&model, &self.dataset, self.target)?
        };
        Ok(IterationMetrics {
            cov: metrics::coverage(&members, &self.evaluator.clusters)?,
            pos: metrics::discovery_rate(members.len(), self.evaluator.clusters.class_size()),
            f1,
        })
    }

    pub fn handle(&self) -> SessionHandle {
        SessionHandle {
            session_id: self.id.clone(),
            dataset: self.dataset.name().to_owned(),
            strategy: self.config.strategy,
            phase: self.phase,
            t: if self.phase == Phase::Finished {
                self.state.t
            } else {
                self.state.t + 1
            },
            budget: self.config.budget,
            max_iterations: self.config.max_iterations,
        }
    }

    pub fn batch(&self) -> Option<BatchView> {
        let b = self.state.pending()?;
        let images = self.dataset.manifest().image_paths.is_some();
        Some(BatchView {
            iteration: b.iteration,
            items: b
                .ids
                .iter()
                .zip(&b.values)
                .map(|(&id, &score)| BatchItem {
                    sample_id: id,
                    score,
                    image_url: images.then(|| {
                        format!("/v1/datasets/{}/samples/{id}/image", self.dataset.name())
                    }),
                })
                .collect(),
        })
    }

    fn feedback_positives(&self) -> Vec<SampleId> {
        let from_query = self.state.discovered.up_to(0).len();
        self.state.discovered.ids()[from_query..].to_vec()
    }

    pub fn series(&self) -> Series {
        let mut s = Series::default();
        for rec in &self.state.log {
            let m = rec.metrics.unwrap_or_default();
            s.iteration.push(rec.iteration);
            s.cov.push(m.cov);
            s.pos.push(m.pos);
            s.batch_ratio.push(rec.positive_ratio);
            s.f1.push(m.f1);
        }
        s
    }

    pub fn view(&self) -> StateView {
        StateView {
            session: self.handle(),
            target_class: self.target,
            query: self.query.clone(),
            labeled: self.state.labeled.len(),
            log: self
                .state
                .log
                .iter()
                .map(|rec| {
                    let m = rec.metrics.unwrap_or_default();
                    IterationView {
                        iteration: rec.iteration,
                        sample_ids: rec.batch.ids.clone(),
                        labels: rec.labels.clone(),
                        batch_ratio: rec.positive_ratio,
                        cov: m.cov,
                        pos: m.pos,
                        f1: m.f1,
                    }
                })
                .collect(),
            series: self.series(),
            discovered: self.feedback_positives(),
            pending: self.batch(),
        }
    }

    pub fn labeled_ids(&self) -> Vec<SampleId> {
        self.state.labeled.ids().collect()
    }
}
