//! Retrieval metrics: class coverage, discovery rate, batch positive ratio
//! and held-out f1.
//!
//! Coverage clusters each class's pool members offline with K-means (labels
//! are used here and nowhere in selection) and reports the fraction of
//! clusters hit by at least one discovered positive, averaged over several
//! clusterings. Classes with fewer than `K` members use one cluster per
//! sample.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::dataset::{EmbeddedDataset, Features};
use crate::{rng, ClassId, Error, Result, SampleId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageConfig {
    pub k: usize,
    pub kmeans_runs: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        CoverageConfig {
            k: 32,
            kmeans_runs: 10,
            kmeans_max_iters: 100,
            seed: 0,
        }
    }
}

impl CoverageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.kmeans_runs == 0 || self.kmeans_max_iters == 0 {
            return Err(Error::Config(
                "coverage k, kmeans_runs and kmeans_max_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-run cluster assignments of one class's pool members.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSets {
    pub class_id: ClassId,
    pub k: usize,
    pub effective_k: usize,
    /// Class members, ascending.
    pub members: Vec<SampleId>,
    /// `assignments[run][i]` is the cluster of `members[i]`.
    pub assignments: Vec<Vec<u32>>,
}

impl ClusterSets {
    pub fn runs(&self) -> usize {
        self.assignments.len()
    }

    pub fn class_size(&self) -> usize {
        self.members.len()
    }

    pub fn member_index(&self, id: SampleId) -> Option<usize> {
        self.members.binary_search(&id).ok()
    }

    pub fn cluster_of(&self, run: usize, id: SampleId) -> Option<u32> {
        self.member_index(id).map(|i| self.assignments[run][i])
    }

    /// `<dir>/<dataset>.c<class>.k<K>.s<seed>.clusters`
    pub fn cache_path(dir: &Path, dataset: &str, class: ClassId, k: usize, seed: u64) -> PathBuf {
        dir.join(format!("{dataset}.c{class}.k{k}.s{seed}.clusters"))
    }

    /// Little-endian `u32` words: class, K, effective K, runs, member count,
    /// the member ids, then each run's assignments.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut words = vec![
            self.class_id,
            self.k as u32,
            self.effective_k as u32,
            self.runs() as u32,
            self.members.len() as u32,
        ];
        words.extend(&self.members);
        for run in &self.assignments {
            words.extend(run);
        }
        fs::write(path, crate::dataset::encode_u32(&words)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let corrupt = || Error::DimensionMismatch {
            what: format!("cluster cache {}", path.display()),
            expected: 0,
            actual: bytes.len() as u64,
        };
        if bytes.len() % 4 != 0 || words.len() < 5 {
            return Err(corrupt());
        }
        let (runs, m) = (words[3] as usize, words[4] as usize);
        if words.len() != 5 + m + runs * m {
            return Err(corrupt());
        }
        let members = words[5..5 + m].to_vec();
        let assignments = (0..runs)
            .map(|r| words[5 + m + r * m..5 + m + (r + 1) * m].to_vec())
            .collect();
        Ok(ClusterSets {
            class_id: words[0],
            k: words[1] as usize,
            effective_k: words[2] as usize,
            members,
            assignments,
        })
    }
}

/// Clusters the pool members of `class_id`, `kmeans_runs` times with derived
/// seeds.
pub fn build_class_clusters(
    dataset: &EmbeddedDataset,
    class_id: ClassId,
    config: &CoverageConfig,
) -> Result<ClusterSets> {
    config.validate()?;
    let members = dataset.pool_members(class_id);
    if members.is_empty() {
        return Err(Error::EmptyClass(class_id));
    }
    let m = members.len();
    let (effective_k, assignments) = if m < config.k {
        let singletons: Vec<u32> = (0..m as u32).collect();
        (m, vec![singletons; config.kmeans_runs])
    } else {
        let runs = (0..config.kmeans_runs)
            .map(|r| {
                let mut rng = rng::rng_at(config.seed, &[class_id as u64, r as u64]);
                kmeans(
                    dataset.features(),
                    &members,
                    config.k,
                    config.kmeans_max_iters,
                    &mut rng,
                )
            })
            .collect();
        (config.k, runs)
    };
    Ok(ClusterSets {
        class_id,
        k: config.k,
        effective_k,
        members,
        assignments,
    })
}

/// [`build_class_clusters`] with an on-disk cache keyed by dataset name,
/// class, K and seed. A cached file with a different run count is rebuilt.
pub fn cached_class_clusters(
    dataset: &EmbeddedDataset,
    class_id: ClassId,
    config: &CoverageConfig,
    cache_dir: &Path,
) -> Result<ClusterSets> {
    let path = ClusterSets::cache_path(cache_dir, dataset.name(), class_id, config.k, config.seed);
    if let Ok(sets) = ClusterSets::load(&path) {
        if sets.runs() == config.kmeans_runs && sets.members == dataset.pool_members(class_id) {
            return Ok(sets);
        }
    }
    let sets = build_class_clusters(dataset, class_id, config)?;
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    sets.save(&path)?;
    Ok(sets)
}

#[inline]
fn dist_to_center(x: &[f32], c: &[f64]) -> f64 {
    x.iter()
        .zip(c)
        .map(|(&a, &b)| {
            let d = a as f64 - b;
            d * d
        })
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding. Returns one cluster index per
/// entry of `ids`. Empty clusters are reseeded with the point farthest from
/// its current center. Requires `ids.len() >= k`.
pub fn kmeans(
    features: &Features,
    ids: &[SampleId],
    k: usize,
    max_iters: usize,
    rng: &mut rng::Rng,
) -> Vec<u32> {
    let n = ids.len();
    let dim = features.dim();
    assert!(k >= 1 && n >= k, "kmeans needs at least k points");

    // k-means++ seeding
    let mut centers: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend(features.row(ids[first]).iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = ids
        .iter()
        .map(|&id| dist_to_center(features.row(id), &centers[..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.extend(features.row(ids[pick]).iter().map(|&v| v as f64));
        let center = &centers[c * dim..(c + 1) * dim];
        for (d, &id) in d2.iter_mut().zip(ids) {
            *d = d.min(dist_to_center(features.row(id), center));
        }
    }

    let mut assign = vec![u32::MAX; n];
    let mut dist = vec![0.0f64; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, &id) in ids.iter().enumerate() {
            let x = features.row(id);
            let (best, bd) = centers
                .chunks_exact(dim)
                .enumerate()
                .map(|(c, ctr)| (c, dist_to_center(x, ctr)))
                .fold((0usize, f64::INFINITY), |acc, cur| {
                    if cur.1 < acc.1 {
                        cur
                    } else {
                        acc
                    }
                });
            dist[i] = bd;
            if assign[i] != best as u32 {
                assign[i] = best as u32;
                changed = true;
            }
        }

        let mut counts = vec![0usize; k];
        let mut sums = vec![0.0f64; k * dim];
        for (i, &id) in ids.iter().enumerate() {
            let c = assign[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(features.row(id)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // move the worst-fitted point into the empty cluster
                let far = (0..n)
                    .filter(|&i| counts[assign[i] as usize] > 1)
                    .fold(None::<usize>, |acc, i| match acc {
                        Some(j) if dist[j] >= dist[i] => Some(j),
                        _ => Some(i),
                    });
                let Some(far) = far else { continue };
                let old = assign[far] as usize;
                counts[old] -= 1;
                let row = features.row(ids[far]);
                for (s, &v) in sums[old * dim..(old + 1) * dim].iter_mut().zip(row) {
                    *s -= v as f64;
                }
                assign[far] = c as u32;
                dist[far] = 0.0;
                counts[c] = 1;
                for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                    *s = v as f64;
                }
                changed = true;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Fraction of clusters containing at least one id of `discovered`, averaged
/// over clustering runs.
pub fn coverage(discovered: &[SampleId], clusters: &ClusterSets) -> Result<f64> {
    let idx = discovered
        .iter()
        .map(|&id| {
            clusters.member_index(id).ok_or(Error::ForeignSample {
                sample: id,
                class: clusters.class_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut hit = vec![false; clusters.effective_k];
    let mut total = 0.0;
    for run in &clusters.assignments {
        hit.iter_mut().for_each(|h| *h = false);
        let mut count = 0usize;
        for &i in &idx {
            let c = run[i] as usize;
            if !hit[c] {
                hit[c] = true;
                count += 1;
            }
        }
        total += count as f64 / clusters.effective_k as f64;
    }
    Ok(total / clusters.runs() as f64)
}

/// `|P| / k_C`.
pub fn discovery_rate(discovered: usize, class_size: usize) -> f64 {
    assert!(class_size >= 1, "class size must be positive");
    discovered as f64 / class_size as f64
}

/// Positives over batch size for each logged batch.
pub fn batch_positive_ratio<'a, I>(batches: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [bool]>,
{
    batches
        .into_iter()
        .map(|labels| {
            if labels.is_empty() {
                0.0
            } else {
                labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64
            }
        })
        .collect()
}

/// Binary f1; 0 when precision + recall is 0.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// f1 on the test split with `class_id` as the positive class and
/// `score >= 0.5` (raw margin >= 0) as a positive prediction.
pub fn f1_heldout(
    model: &ClassifierModel,
    dataset: &EmbeddedDataset,
    class_id: ClassId,
) -> Result<f64> {
    let test = dataset.test();
    if test.is_empty() {
        return Err(Error::EmptySplit(crate::dataset::TEST_SPLIT.into()));
    }
    let margins = model.margins(test, dataset.features())?;
    let labels = dataset.oracle_labels();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&id, &m) in test.iter().zip(&margins) {
        match (m >= 0.0, labels[id as usize] == class_id) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(f1_score(tp, fp, fn_))
}

/// Discovered positives `P_t` in acquisition order with per-iteration
/// boundaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredSet {
    ids: Vec<SampleId>,
    /// `boundaries[t]` is `|P_t|`; index 0 holds the query positives.
    boundaries: Vec<usize>,
    #[serde(skip)]
    seen: HashSet<SampleId>,
}

impl DiscoveredSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds ids (duplicates ignored) and closes the current iteration.
    pub fn extend_iteration(&mut self, ids: impl IntoIterator<Item = SampleId>) {
        for id in ids {
            if self.seen.insert(id) {
                self.ids.push(id);
            }
        }
        self.boundaries.push(self.ids.len());
    }

    pub fn ids(&self) -> &[SampleId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// `P_t` for a closed iteration `t`.
    pub fn up_to(&self, t: usize) -> &[SampleId] {
        &self.ids[..self.boundaries[t]]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub cov: f64,
    pub pos: f64,
    pub f1: f64,
}

/// Everything needed to score a session against one target class.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub clusters: ClusterSets,
}

impl Evaluator {
    pub fn new(clusters: ClusterSets) -> Self {
        Evaluator { clusters }
    }

    pub fn class_id(&self) -> ClassId {
        self.clusters.class_id
    }

    pub fn evaluate(
        &self,
        discovered: &[SampleId],
        model: Option<&ClassifierModel>,
        dataset: &EmbeddedDataset,
    ) -> Result<IterationMetrics> {
        Ok(IterationMetrics {
            cov: coverage(discovered, &self.clusters)?,
            pos: discovery_rate(discovered.len(), self.clusters.class_size()),
            f1: match model {
                Some(m) => f1_heldout(m, dataset, self.class_id())?,
                None => 0.0,
            },
        })
    }
}
