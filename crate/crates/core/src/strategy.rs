//! Selection criteria over the unlabeled pool.
//!
//! Classifier-driven criteria (MA, MP, PF-MA, ALAMP) are elementwise maps of
//! the scores `f(x) ∈ [0, 1]`. Random, DAL and CoreSet ignore the target
//! classifier. The `*-S` and `*-D` diversifiers post-process a ranked list.
//!
//! Ranking is always by descending value with ties broken by ascending
//! sample id, so batches are reproducible bit for bit.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierConfig, LabeledPool};
use crate::dataset::{dist_sq, Features};
use crate::par::{self, Parallelism};
use crate::{rng, Error, Result, SampleId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Random,
    Ma,
    Mp,
    Pfma,
    Alamp,
    Dal,
    Coreset,
    MaS,
    MaD,
    MpS,
    MpD,
}

impl Strategy {
    pub const ALL: [Strategy; 11] = [
        Strategy::Random,
        Strategy::Ma,
        Strategy::Mp,
        Strategy::Pfma,
        Strategy::Alamp,
        Strategy::Dal,
        Strategy::Coreset,
        Strategy::MaS,
        Strategy::MaD,
        Strategy::MpS,
        Strategy::MpD,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Ma => "ma",
            Strategy::Mp => "mp",
            Strategy::Pfma => "pfma",
            Strategy::Alamp => "alamp",
            Strategy::Dal => "dal",
            Strategy::Coreset => "coreset",
            Strategy::MaS => "ma-s",
            Strategy::MaD => "ma-d",
            Strategy::MpS => "mp-s",
            Strategy::MpD => "mp-d",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.token() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_owned()))
    }
}

impl Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Criterion values aligned with sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct CriterionScores {
    pub sample_ids: Vec<SampleId>,
    pub values: Vec<f64>,
    pub strategy: Strategy,
}

impl CriterionScores {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// The `k` best entries, sorted by descending value then ascending id.
    pub fn ranked_prefix(&self, k: usize) -> CriterionScores {
        let top = rank_top(&self.sample_ids, &self.values, k, None);
        CriterionScores {
            sample_ids: top.iter().map(|e| e.0).collect(),
            values: top.iter().map(|e| e.1).collect(),
            strategy: self.strategy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiversifierConfig {
    /// `*-S`: take one sample every `step` ranks.
    pub step: usize,
    /// `*-D`: size of the candidate pool fed to farthest-first selection.
    pub pool_size: usize,
}

impl Default for DiversifierConfig {
    fn default() -> Self {
        DiversifierConfig {
            step: 5,
            pool_size: 50,
        }
    }
}

impl DiversifierConfig {
    pub fn validate(&self, budget: usize) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Config("diversifier step must be at least 1".into()));
        }
        if self.pool_size < budget {
            return Err(Error::Config(format!(
                "diversifier pool size {} is smaller than the budget {budget}",
                self.pool_size
            )));
        }
        Ok(())
    }
}

/// DAL discriminator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DalConfig {
    /// Unlabeled subsample is capped at `cap_factor × |labeled|`.
    pub cap_factor: usize,
    pub classifier: ClassifierConfig,
}

impl Default for DalConfig {
    fn default() -> Self {
        DalConfig {
            cap_factor: 50,
            classifier: ClassifierConfig {
                max_epochs: 50,
                tolerance: 1e-2,
                ..ClassifierConfig::default()
            },
        }
    }
}

/// Ordered batch proposed to the annotator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionBatch {
    pub ids: Vec<SampleId>,
    pub values: Vec<f64>,
    pub iteration: usize,
}

impl SelectionBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn from_pairs(pairs: Vec<(SampleId, f64)>) -> Self {
        let (ids, values) = pairs.into_iter().unzip();
        SelectionBatch {
            ids,
            values,
            iteration: 0,
        }
    }
}

/// Previous-iteration binary margins keyed by sample id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarginHistory {
    // NaN marks "no entry"; dense so a 100k pool costs one allocation.
    values: Vec<f64>,
    count: usize,
}

impl MarginHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: SampleId) -> Option<f64> {
        self.values
            .get(id as usize)
            .copied()
            .filter(|v| !v.is_nan())
    }

    /// Records `margin ∈ [0, 1]` for `id`.
    pub fn set(&mut self, id: SampleId, margin: f64) {
        debug_assert!((0.0..=1.0).contains(&margin));
        let i = id as usize;
        if i >= self.values.len() {
            self.values.resize(i + 1, f64::NAN);
        }
        if self.values[i].is_nan() {
            self.count += 1;
        }
        self.values[i] = margin;
    }

    pub fn remove(&mut self, id: SampleId) {
        if let Some(v) = self.values.get_mut(id as usize) {
            if !v.is_nan() {
                *v = f64::NAN;
                self.count -= 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Replaces the history with the margins of the current scores.
    pub fn record(&mut self, ids: &[SampleId], f: &[f64]) {
        self.values.iter_mut().for_each(|v| *v = f64::NAN);
        self.count = 0;
        for (&id, &p) in ids.iter().zip(f) {
            self.set(id, binary_margin(p));
        }
    }
}

/// Distance of `f` from 0.5, symmetric under `f ↦ 1 − f` at the bit level.
#[inline]
fn half_distance(f: f64) -> f64 {
    if f >= 0.5 {
        f - 0.5
    } else {
        (1.0 - f) - 0.5
    }
}

/// Most Ambiguous: `1 − |0.5 − f|`.
#[inline]
pub fn ma(f: f64) -> f64 {
    1.0 - half_distance(f)
}

/// Most Positive: `f`.
#[inline]
pub fn mp(f: f64) -> f64 {
    f
}

/// Positive-First Most Ambiguous: MA on the predicted-positive half, the raw
/// score below 0.5. Every predicted positive outranks every predicted
/// negative.
#[inline]
pub fn pfma(f: f64) -> f64 {
    if f >= 0.5 {
        ma(f)
    } else {
        f
    }
}

/// Two-class margin `|2f − 1|`, the gap between the class probabilities.
#[inline]
pub fn binary_margin(f: f64) -> f64 {
    2.0 * half_distance(f)
}

/// Normalized margin drop between consecutive iterations, in [−1, 1].
/// Both margins zero gives 0.
#[inline]
pub fn alamp(prev_margin: f64, curr_margin: f64) -> f64 {
    let den = prev_margin + curr_margin;
    if den == 0.0 {
        0.0
    } else {
        (prev_margin - curr_margin) / den
    }
}

fn check_probabilities(ids: &[SampleId], f: &[f64]) -> Result<()> {
    if ids.len() != f.len() {
        return Err(Error::Config(format!(
            "{} ids but {} scores",
            ids.len(),
            f.len()
        )));
    }
    match f.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(Error::ProbabilityRange {
            index,
            value: f[index],
        }),
        None => Ok(()),
    }
}

fn elementwise(
    ids: &[SampleId],
    f: &[f64],
    strategy: Strategy,
    map: impl Fn(f64) -> f64,
) -> Result<CriterionScores> {
    check_probabilities(ids, f)?;
    Ok(CriterionScores {
        sample_ids: ids.to_vec(),
        values: f.iter().map(|&v| map(v)).collect(),
        strategy,
    })
}

pub fn score_ma(ids: &[SampleId], f: &[f64]) -> Result<CriterionScores> {
    elementwise(ids, f, Strategy::Ma, ma)
}

pub fn score_mp(ids: &[SampleId], f: &[f64]) -> Result<CriterionScores> {
    elementwise(ids, f, Strategy::Mp, mp)
}

pub fn score_pfma(ids: &[SampleId], f: &[f64]) -> Result<CriterionScores> {
    elementwise(ids, f, Strategy::Pfma, pfma)
}

/// ALAMP against the previous iteration's margins. With an empty history
/// (first iteration) the values fall back to MA.
pub fn score_alamp(
    ids: &[SampleId],
    f: &[f64],
    history: &MarginHistory,
) -> Result<CriterionScores> {
    check_probabilities(ids, f)?;
    if history.is_empty() {
        let mut s = score_ma(ids, f)?;
        s.strategy = Strategy::Alamp;
        return Ok(s);
    }
    let values = ids
        .iter()
        .zip(f)
        .map(|(&id, &p)| {
            history
                .get(id)
                .map(|prev| alamp(prev, binary_margin(p)))
                .ok_or_else(|| {
                    Error::State(format!("no previous margin recorded for sample {id}"))
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CriterionScores {
        sample_ids: ids.to_vec(),
        values,
        strategy: Strategy::Alamp,
    })
}

/// Seeded uniform ranking: value `n − position` of each id in a shuffle.
pub fn score_random(ids: &[SampleId], seed: u64) -> Result<CriterionScores> {
    if ids.is_empty() {
        return Err(Error::EmptyPool);
    }
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(seed));
    let mut values = vec![0.0; n];
    for (rank, &pos) in order.iter().enumerate() {
        values[pos] = (n - rank) as f64;
    }
    Ok(CriterionScores {
        sample_ids: ids.to_vec(),
        values,
        strategy: Strategy::Random,
    })
}

/// Discriminative active learning: a labeled (0) vs unlabeled (1) linear
/// classifier; value is the predicted probability of "unlabeled".
pub fn score_dal(
    labeled: &LabeledPool,
    unlabeled: &[SampleId],
    features: &Features,
    config: &DalConfig,
    seed: u64,
) -> Result<CriterionScores> {
    if labeled.is_empty() || unlabeled.is_empty() {
        return Err(Error::EmptyPool);
    }
    let cap = config.cap_factor.max(1) * labeled.len();
    let mut sub: Vec<SampleId> = if unlabeled.len() <= cap {
        unlabeled.to_vec()
    } else {
        index::sample(&mut rng::rng(seed), unlabeled.len(), cap)
            .into_iter()
            .map(|i| unlabeled[i])
            .collect()
    };
    sub.sort_unstable();
    let examples: Vec<(SampleId, bool)> = labeled
        .ids()
        .map(|id| (id, false))
        .chain(sub.iter().map(|&id| (id, true)))
        .collect();
    let model = classifier::train_rows(&examples, features, &config.classifier)?;
    Ok(CriterionScores {
        sample_ids: unlabeled.to_vec(),
        values: model.predict(unlabeled, features)?,
        strategy: Strategy::Dal,
    })
}

#[inline]
fn rank_cmp(a: &(SampleId, f64), b: &(SampleId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Best `k` of `(id, value)` by the crate ranking, skipping ids in `exclude`.
fn rank_top(
    ids: &[SampleId],
    values: &[f64],
    k: usize,
    exclude: Option<&LabeledPool>,
) -> Vec<(SampleId, f64)> {
    let mut pairs: Vec<(SampleId, f64)> = ids
        .iter()
        .copied()
        .zip(values.iter().copied())
        .filter(|(id, _)| exclude.is_none_or(|l| !l.contains(*id)))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, rank_cmp);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(rank_cmp);
    pairs
}

/// Top-`b` by value, ties by ascending id, never returning a labeled id.
pub fn select_top(
    scores: &CriterionScores,
    b: usize,
    labeled: &LabeledPool,
) -> Result<SelectionBatch> {
    if b == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    if let Some(i) = scores.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Config(format!(
            "non-finite criterion value for sample {}",
            scores.sample_ids[i]
        )));
    }
    Ok(SelectionBatch::from_pairs(rank_top(
        &scores.sample_ids,
        &scores.values,
        b,
        Some(labeled),
    )))
}

/// `*-S`: ranks 0, S, 2S, … until `b` are taken; if the list runs out, the
/// best remaining ranks fill the batch. `ranked` must be sorted.
pub fn diversify_step(ranked: &CriterionScores, step: usize, b: usize) -> Result<SelectionBatch> {
    if ranked.is_empty() {
        return Err(Error::EmptyPool);
    }
    if step == 0 || b == 0 {
        return Err(Error::Config("step and budget must be at least 1".into()));
    }
    let n = ranked.len();
    let mut taken = vec![false; n];
    let mut picks = Vec::with_capacity(b.min(n));
    for r in (0..n).step_by(step).take(b) {
        taken[r] = true;
        picks.push(r);
    }
    for r in 0..n {
        if picks.len() >= b {
            break;
        }
        if !taken[r] {
            taken[r] = true;
            picks.push(r);
        }
    }
    Ok(SelectionBatch::from_pairs(
        picks
            .into_iter()
            .map(|r| (ranked.sample_ids[r], ranked.values[r]))
            .collect(),
    ))
}

/// `*-D`: farthest-first traversal of the top-`pool_size` ranks, seeded with
/// rank 0. Ties go to the smaller sample id.
pub fn diversify_distance(
    ranked: &CriterionScores,
    features: &Features,
    pool_size: usize,
    b: usize,
) -> Result<SelectionBatch> {
    if ranked.is_empty() {
        return Err(Error::EmptyPool);
    }
    if b == 0 || pool_size < b {
        return Err(Error::Config(format!(
            "need 1 <= budget ({b}) <= pool size ({pool_size})"
        )));
    }
    let m = pool_size.min(ranked.len());
    let ids = &ranked.sample_ids[..m];
    let mut min_d = vec![f64::INFINITY; m];
    let mut chosen = vec![false; m];
    let mut picks = Vec::with_capacity(b.min(m));
    let mut next = 0usize;
    loop {
        chosen[next] = true;
        picks.push((ids[next], ranked.values[next]));
        if picks.len() == b.min(m) {
            break;
        }
        let row = features.row(ids[next]);
        let mut best: Option<usize> = None;
        for j in 0..m {
            if chosen[j] {
                continue;
            }
            let d = dist_sq(row, features.row(ids[j]));
            if d < min_d[j] {
                min_d[j] = d;
            }
            best = match best {
                None => Some(j),
                Some(k) if min_d[j] > min_d[k] || (min_d[j] == min_d[k] && ids[j] < ids[k]) => {
                    Some(j)
                }
                keep => keep,
            };
        }
        next = best.expect("unchosen candidate remains");
    }
    Ok(SelectionBatch::from_pairs(picks))
}

/// Incremental k-center state: squared distance from each sample to the
/// nearest labeled sample. Feeding it only the newly labeled ids each
/// iteration gives the same greedy picks as recomputing from scratch.
#[derive(Clone, Debug, Default)]
pub struct CoresetTracker {
    min_dist: Vec<f64>,
    absorbed: usize,
}

impl CoresetTracker {
    pub fn new(num_samples: usize) -> Self {
        CoresetTracker {
            min_dist: vec![f64::INFINITY; num_samples],
            absorbed: 0,
        }
    }

    /// Number of centers folded in so far.
    pub fn absorbed(&self) -> usize {
        self.absorbed
    }

    /// Folds `centers` into the nearest-center distances of `candidates`.
    pub fn absorb(
        &mut self,
        centers: &[SampleId],
        candidates: &[SampleId],
        features: &Features,
        policy: Parallelism,
    ) {
        if centers.is_empty() {
            return;
        }
        let updated = par::map(policy, candidates, |&id| {
            let row = features.row(id);
            centers
                .iter()
                .map(|&c| dist_sq(row, features.row(c)))
                .fold(self.min_dist[id as usize], f64::min)
        });
        for (&id, d) in candidates.iter().zip(updated) {
            self.min_dist[id as usize] = d;
        }
        self.absorbed += centers.len();
    }

    /// Greedy k-center picks among `candidates` (ascending ids) without
    /// mutating the tracker.
    pub fn select(
        &self,
        candidates: &[SampleId],
        features: &Features,
        b: usize,
        policy: Parallelism,
    ) -> Result<SelectionBatch> {
        if candidates.is_empty() {
            return Err(Error::EmptyPool);
        }
        if b == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        let mut dist: Vec<f64> = candidates
            .iter()
            .map(|&id| self.min_dist[id as usize])
            .collect();
        let mut taken = vec![false; candidates.len()];
        let mut picks = Vec::with_capacity(b);
        for _ in 0..b.min(candidates.len()) {
            let mut best: Option<usize> = None;
            for j in 0..candidates.len() {
                if taken[j] {
                    continue;
                }
                best = match best {
                    None => Some(j),
                    Some(k)
                        if dist[j] > dist[k]
                            || (dist[j] == dist[k] && candidates[j] < candidates[k]) =>
                    {
                        Some(j)
                    }
                    keep => keep,
                };
            }
            let j = best.expect("candidate remains");
            taken[j] = true;
            let value = if dist[j].is_finite() { dist[j].sqrt() } else { f64::MAX };
            picks.push((candidates[j], value));
            let row = features.row(candidates[j]);
            par::zip_for_each(policy, candidates, &mut dist, |&id, d| {
                let nd = dist_sq(row, features.row(id));
                if nd < *d {
                    *d = nd;
                }
            });
        }
        Ok(SelectionBatch::from_pairs(picks))
    }
}

/// CoreSet baseline: greedy k-center over the unlabeled pool, distances to
/// labeled ∪ already selected.
pub fn select_coreset(
    labeled: &LabeledPool,
    unlabeled: &[SampleId],
    features: &Features,
    b: usize,
) -> Result<SelectionBatch> {
    let mut candidates = unlabeled.to_vec();
    candidates.sort_unstable();
    let mut tracker = CoresetTracker::new(features.num_rows());
    let centers: Vec<SampleId> = labeled.ids().collect();
    tracker.absorb(&centers, &candidates, features, Parallelism::default());
    tracker.select(&candidates, features, b, Parallelism::default())
}
