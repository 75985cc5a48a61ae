//! The relevance-feedback loop for one class of interest.
//!
//! Each iteration: (1) train the classifier on `D_l`, (2) score the unlabeled
//! pool with the configured strategy, (3) select the top-`b` batch, applying
//! the step or distance diversifier for `*-S` / `*-D`, (4) absorb the
//! annotator's labels into `D_l` and the discovered positives `P_t`.
//!
//! [`propose`] and [`absorb`] expose steps 1 to 3 and step 4 separately so a human
//! can sit between them; [`run_iteration`] and [`run_session`] drive both
//! with an [`Annotator`].

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierConfig, ClassifierModel, LabeledPool};
use crate::dataset::EmbeddedDataset;
use crate::metrics::{DiscoveredSet, Evaluator, IterationMetrics};
use crate::par::Parallelism;
use crate::strategy::{
    self, CoresetTracker, CriterionScores, DalConfig, DiversifierConfig, MarginHistory,
    SelectionBatch, Strategy,
};
use crate::{rng, ClassId, Error, Result, SampleId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub strategy: Strategy,
    /// Annotation budget `b` per iteration.
    pub budget: usize,
    /// Maximum number of iterations `T`.
    pub max_iterations: usize,
    /// Positives in the initial query.
    pub n_pos: usize,
    /// Negatives in the initial query.
    pub n_neg: usize,
    pub classifier: ClassifierConfig,
    pub diversifier: DiversifierConfig,
    pub dal: DalConfig,
    pub seed: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            strategy: Strategy::Pfma,
            budget: 10,
            max_iterations: 25,
            n_pos: 1,
            n_neg: 5,
            classifier: ClassifierConfig::default(),
            diversifier: DiversifierConfig::default(),
            dal: DalConfig::default(),
            seed: 0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.n_pos == 0 {
            return Err(Error::Config("n_pos must be at least 1".into()));
        }
        self.classifier.validate()?;
        self.dal.classifier.validate()?;
        if matches!(self.strategy, Strategy::MaD | Strategy::MpD | Strategy::MaS | Strategy::MpS) {
            self.diversifier.validate(self.budget)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub positive_ids: Vec<SampleId>,
    pub negative_ids: Vec<SampleId>,
    /// Known only for oracle runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<ClassId>,
}

/// Draws `n_pos` positives uniformly from the class's pool members and
/// `n_neg` negatives uniformly from pool members of every other class.
pub fn sample_initial_query(
    dataset: &EmbeddedDataset,
    class_id: ClassId,
    n_pos: usize,
    n_neg: usize,
    seed: u64,
) -> Result<Query> {
    let labels = dataset.oracle_labels();
    let mut pos: Vec<SampleId> = Vec::new();
    let mut neg: Vec<SampleId> = Vec::new();
    for &id in dataset.pool() {
        if labels[id as usize] == class_id {
            pos.push(id);
        } else {
            neg.push(id);
        }
    }
    pos.sort_unstable();
    neg.sort_unstable();
    if pos.len() < n_pos {
        return Err(Error::ClassTooSmall {
            class: class_id,
            available: pos.len(),
            required: n_pos,
        });
    }
    if neg.len() < n_neg {
        return Err(Error::ClassTooSmall {
            class: class_id,
            available: neg.len(),
            required: n_neg,
        });
    }
    let mut rng = rng::rng(seed);
    let pick = |from: &[SampleId], k: usize, rng: &mut rng::Rng| -> Vec<SampleId> {
        index::sample(rng, from.len(), k)
            .into_iter()
            .map(|i| from[i])
            .collect()
    };
    let positive_ids = pick(&pos, n_pos, &mut rng);
    let negative_ids = pick(&neg, n_neg, &mut rng);
    Ok(Query {
        positive_ids,
        negative_ids,
        target_class: Some(class_id),
    })
}

/// One absorbed iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub batch: SelectionBatch,
    pub labels: Vec<bool>,
    pub positive_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<IterationMetrics>,
}

#[derive(Clone, Debug)]
pub struct SessionState {
    /// Completed iterations.
    pub t: usize,
    pub labeled: LabeledPool,
    pub discovered: DiscoveredSet,
    pub margins: MarginHistory,
    pub log: Vec<IterationRecord>,
    model: Option<(ClassifierModel, u64)>,
    unlabeled: Vec<SampleId>,
    pending: Option<SelectionBatch>,
    coreset: Option<CoresetTracker>,
    finished: bool,
}

impl SessionState {
    pub fn model(&self) -> Option<&ClassifierModel> {
        self.model.as_ref().map(|m| &m.0)
    }

    /// Pool members not yet labeled, ascending.
    pub fn unlabeled(&self) -> &[SampleId] {
        &self.unlabeled
    }

    pub fn pending(&self) -> Option<&SelectionBatch> {
        self.pending.as_ref()
    }

    /// True once `T` iterations ran or the pool is exhausted.
    pub fn is_finished(&self) -> bool {
        self.finished
    }
}

/// Seeds `D_l` with the query: positives labeled 1, negatives 0.
pub fn init_session(
    dataset: &EmbeddedDataset,
    query: &Query,
    config: &SessionConfig,
) -> Result<SessionState> {
    config.validate()?;
    let mut seen = HashSet::new();
    for &id in query.positive_ids.iter().chain(&query.negative_ids) {
        if !dataset.in_pool(id) {
            return Err(Error::InvalidSample(id));
        }
        if !seen.insert(id) {
            return Err(Error::Config(format!(
                "sample {id} appears twice in the query"
            )));
        }
    }
    if query.positive_ids.is_empty() {
        return Err(Error::Config("query has no positive sample".into()));
    }
    let labeled: LabeledPool = query
        .positive_ids
        .iter()
        .map(|&id| (id, true))
        .chain(query.negative_ids.iter().map(|&id| (id, false)))
        .collect();
    let mut discovered = DiscoveredSet::new();
    discovered.extend_iteration(query.positive_ids.iter().copied());
    let mut unlabeled: Vec<SampleId> = dataset
        .pool()
        .iter()
        .copied()
        .filter(|id| !labeled.contains(*id))
        .collect();
    unlabeled.sort_unstable();
    let finished = unlabeled.is_empty();
    Ok(SessionState {
        t: 0,
        labeled,
        discovered,
        margins: MarginHistory::new(),
        log: Vec::new(),
        model: None,
        unlabeled,
        pending: None,
        coreset: None,
        finished,
    })
}

/// Trains on the current `D_l` unless the cached model already matches it.
pub fn ensure_model<'s>(
    state: &'s mut SessionState,
    dataset: &EmbeddedDataset,
    config: &SessionConfig,
) -> Result<&'s ClassifierModel> {
    let generation = state.labeled.generation();
    let stale = state.model.as_ref().is_none_or(|m| m.1 != generation);
    if stale {
        let model = classifier::train(&state.labeled, dataset.features(), &config.classifier)?;
        state.model = Some((model, generation));
    }
    Ok(&state.model.as_ref().expect("model just trained").0)
}

/// Trains on `D_l` and proposes the next batch, which stays pending until
/// [`absorb`].
pub fn propose<'s>(
    state: &'s mut SessionState,
    dataset: &EmbeddedDataset,
    config: &SessionConfig,
) -> Result<&'s SelectionBatch> {
    if state.pending.is_some() {
        return Err(Error::State("a batch is already awaiting labels".into()));
    }
    if state.finished || state.t >= config.max_iterations {
        return Err(Error::State("session is finished".into()));
    }
    if state.unlabeled.is_empty() {
        return Err(Error::EmptyPool);
    }
    let policy = Parallelism::default();
    let iteration = state.t + 1;
    let step_seed = rng::derive(config.seed, &[iteration as u64]);
    let features = dataset.features();
    let b = config.budget;

    let model = ensure_model(state, dataset, config)?.clone();
    let needs_f = matches!(
        config.strategy,
        Strategy::Ma
            | Strategy::Mp
            | Strategy::Pfma
            | Strategy::Alamp
            | Strategy::MaS
            | Strategy::MaD
            | Strategy::MpS
            | Strategy::MpD
    );
    let f = if needs_f {
        model.predict_with(&state.unlabeled, features, policy)?
    } else {
        Vec::new()
    };
    let ids = &state.unlabeled;
    let prefix = |s: CriterionScores, k: usize| s.ranked_prefix(k);

    let mut batch = match config.strategy {
        Strategy::Ma => strategy::select_top(&strategy::score_ma(ids, &f)?, b, &state.labeled)?,
        Strategy::Mp => strategy::select_top(&strategy::score_mp(ids, &f)?, b, &state.labeled)?,
        Strategy::Pfma => {
            strategy::select_top(&strategy::score_pfma(ids, &f)?, b, &state.labeled)?
        }
        Strategy::Alamp => {
            let s = strategy::score_alamp(ids, &f, &state.margins)?;
            state.margins.record(ids, &f);
            strategy::select_top(&s, b, &state.labeled)?
        }
        Strategy::Random => {
            strategy::select_top(&strategy::score_random(ids, step_seed)?, b, &state.labeled)?
        }
        Strategy::Dal => {
            let s = strategy::score_dal(&state.labeled, ids, features, &config.dal, step_seed)?;
            strategy::select_top(&s, b, &state.labeled)?
        }
        Strategy::Coreset => {
            let tracker = state
                .coreset
                .get_or_insert_with(|| CoresetTracker::new(features.num_rows()));
            let fresh: Vec<SampleId> = state
                .labeled
                .entries()
                .iter()
                .skip(tracker.absorbed())
                .map(|e| e.0)
                .collect();
            tracker.absorb(&fresh, ids, features, policy);
            tracker.select(ids, features, b, policy)?
        }
        Strategy::MaS | Strategy::MpS => {
            let s = if config.strategy == Strategy::MaS {
                strategy::score_ma(ids, &f)?
            } else {
                strategy::score_mp(ids, &f)?
            };
            let ranked = prefix(s, config.diversifier.step.saturating_mul(b));
            strategy::diversify_step(&ranked, config.diversifier.step, b)?
        }
        Strategy::MaD | Strategy::MpD => {
            let s = if config.strategy == Strategy::MaD {
                strategy::score_ma(ids, &f)?
            } else {
                strategy::score_mp(ids, &f)?
            };
            let ranked = prefix(s, config.diversifier.pool_size);
            strategy::diversify_distance(&ranked, features, config.diversifier.pool_size, b)?
        }
    };
    batch.iteration = iteration;
    Ok(state.pending.insert(batch))
}

/// Step 4: absorbs one label per pending batch id (in batch order). On a
/// count mismatch nothing changes.
pub fn absorb(state: &mut SessionState, labels: &[bool], max_iterations: usize) -> Result<()> {
    let Some(batch) = state.pending.as_ref() else {
        return Err(Error::State("no batch is awaiting labels".into()));
    };
    if labels.len() != batch.len() {
        return Err(Error::AnnotationCount {
            expected: batch.len(),
            got: labels.len(),
        });
    }
    let batch = state.pending.take().expect("checked above");
    for (&id, &y) in batch.ids.iter().zip(labels) {
        state.labeled.insert(id, y);
        state.margins.remove(id);
    }
    state.discovered.extend_iteration(
        batch
            .ids
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y)
            .map(|(&id, _)| id),
    );
    let taken: HashSet<SampleId> = batch.ids.iter().copied().collect();
    state.unlabeled.retain(|id| !taken.contains(id));
    state.t += 1;
    let positives = labels.iter().filter(|&&y| y).count();
    state.log.push(IterationRecord {
        iteration: batch.iteration,
        positive_ratio: positives as f64 / labels.len().max(1) as f64,
        labels: labels.to_vec(),
        batch,
        metrics: None,
    });
    if state.t >= max_iterations || state.unlabeled.is_empty() {
        state.finished = true;
    }
    Ok(())
}

/// Supplies binary relevance labels for a batch.
pub trait Annotator {
    fn annotate(&mut self, batch: &SelectionBatch) -> Vec<bool>;
}

impl<F: FnMut(&SelectionBatch) -> Vec<bool>> Annotator for F {
    fn annotate(&mut self, batch: &SelectionBatch) -> Vec<bool> {
        self(batch)
    }
}

/// Ground-truth annotator: relevant iff the sample's class is the target.
pub struct OracleAnnotator<'a> {
    labels: &'a [ClassId],
    target: ClassId,
}

impl<'a> OracleAnnotator<'a> {
    pub fn new(dataset: &'a EmbeddedDataset, target: ClassId) -> Self {
        OracleAnnotator {
            labels: dataset.oracle_labels(),
            target,
        }
    }
}

impl Annotator for OracleAnnotator<'_> {
    fn annotate(&mut self, batch: &SelectionBatch) -> Vec<bool> {
        batch
            .ids
            .iter()
            .map(|&id| self.labels[id as usize] == self.target)
            .collect()
    }
}

pub fn run_iteration(
    state: &mut SessionState,
    dataset: &EmbeddedDataset,
    config: &SessionConfig,
    annotator: &mut dyn Annotator,
) -> Result<()> {
    let batch = propose(state, dataset, config)?;
    let labels = annotator.annotate(batch);
    if let Err(e) = absorb(state, &labels, config.max_iterations) {
        state.pending = None;
        return Err(e);
    }
    Ok(())
}

/// Runs until `T` iterations or pool exhaustion. With an evaluator, every
/// log record carries coverage, discovery rate and held-out f1 measured
/// after the batch is absorbed (f1 uses the classifier refit on the updated
/// `D_l`, which the next iteration reuses).
pub fn run_session(
    dataset: &EmbeddedDataset,
    query: &Query,
    config: &SessionConfig,
    annotator: &mut dyn Annotator,
    evaluator: Option<&Evaluator>,
) -> Result<SessionState> {
    let mut state = init_session(dataset, query, config)?;
    while !state.finished {
        run_iteration(&mut state, dataset, config, annotator)?;
        if let Some(ev) = evaluator {
            ensure_model(&mut state, dataset, config)?;
            let metrics = ev.evaluate(state.discovered.ids(), state.model(), dataset)?;
            state.log.last_mut().expect("just logged").metrics = Some(metrics);
        }
    }
    Ok(state)
}
