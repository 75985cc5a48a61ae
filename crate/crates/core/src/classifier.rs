//! Lightweight binary classifier trained each iteration on the labeled pool.
//!
//! L2-regularized L1-loss (hinge) linear SVM solved in the dual by coordinate
//! descent with shrinking, following the LIBLINEAR scheme. The bias is an
//! extra constant feature of value 1, so it is regularized with the weights.
//! Scores are `logistic(w·x + b)`, which keeps `score >= 0.5` exactly
//! equivalent to a non-negative raw margin.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Features;
use crate::par::{self, Parallelism};
use crate::{rng, Error, Result, SampleId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    #[default]
    Uniform,
    /// Scales C of the minority label by `n_majority / n_minority`.
    Balanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub c: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
    pub class_weighting: ClassWeighting,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            c: 1.0,
            max_epochs: 1000,
            tolerance: 1e-4,
            class_weighting: ClassWeighting::Uniform,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Annotated samples `D_l` in insertion order. Re-labeling an id overwrites
/// the earlier label in place.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPool {
    entries: Vec<(SampleId, bool)>,
    index: HashMap<SampleId, usize>,
    generation: u64,
}

impl LabeledPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or overwrites a label. Returns the previous label if the id
    /// was already present.
    pub fn insert(&mut self, id: SampleId, positive: bool) -> Option<bool> {
        self.generation += 1;
        match self.index.get(&id) {
            Some(&pos) => {
                let old = std::mem::replace(&mut self.entries[pos].1, positive);
                if old != positive {
                    tracing::warn!(sample = id, old, new = positive, "label overwritten");
                }
                Some(old)
            }
            None => {
                self.index.insert(id, self.entries.len());
                self.entries.push((id, positive));
                None
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn label(&self, id: SampleId) -> Option<bool> {
        self.index.get(&id).map(|&p| self.entries[p].1)
    }

    pub fn entries(&self) -> &[(SampleId, bool)] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn count_positive(&self) -> usize {
        self.entries.iter().filter(|e| e.1).count()
    }

    /// Bumped on every mutation; lets callers reuse a model trained on an
    /// unchanged pool.
    pub fn generation(&self) -> u64 {
        self.generation
    }
}

impl FromIterator<(SampleId, bool)> for LabeledPool {
    fn from_iter<I: IntoIterator<Item = (SampleId, bool)>>(iter: I) -> Self {
        let mut pool = LabeledPool::new();
        for (id, y) in iter {
            pool.insert(id, y);
        }
        pool
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_size: usize,
}

/// Logistic score. Negative margins always map strictly below 0.5, even when
/// `exp` rounds to 1 for tiny magnitudes.
#[inline]
pub fn logistic(margin: f64) -> f64 {
    let s = if margin >= 0.0 {
        1.0 / (1.0 + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (1.0 + e)
    };
    if margin < 0.0 && s >= 0.5 {
        0.5 - f64::EPSILON / 4.0
    } else {
        s
    }
}

impl ClassifierModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn margin(&self, x: &[f32]) -> f64 {
        // four independent accumulators keep the loop vectorizable
        let mut acc = [0.0f64; 4];
        let mut cx = x.chunks_exact(4);
        let mut cw = self.weights.chunks_exact(4);
        for (xs, ws) in (&mut cx).zip(&mut cw) {
            for k in 0..4 {
                acc[k] += xs[k] as f64 * ws[k];
            }
        }
        let mut tail = 0.0;
        for (xv, wv) in cx.remainder().iter().zip(cw.remainder()) {
            tail += *xv as f64 * wv;
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail + self.bias
    }

    fn check(&self, rows: &[SampleId], features: &Features) -> Result<()> {
        if self.weights.len() != features.dim() {
            return Err(Error::ModelDimension {
                model: self.weights.len(),
                features: features.dim(),
            });
        }
        let n = features.num_rows();
        if let Some(&bad) = rows.iter().find(|&&id| id as usize >= n) {
            return Err(Error::InvalidSample(bad));
        }
        Ok(())
    }

    /// Raw margins `w·x + b` for `rows`.
    pub fn margins(&self, rows: &[SampleId], features: &Features) -> Result<Vec<f64>> {
        self.margins_with(rows, features, Parallelism::default())
    }

    pub fn margins_with(
        &self,
        rows: &[SampleId],
        features: &Features,
        policy: Parallelism,
    ) -> Result<Vec<f64>> {
        self.check(rows, features)?;
        Ok(par::map(policy, rows, |&id| self.margin(features.row(id))))
    }

    /// Scores in [0, 1] for `rows`.
    pub fn predict(&self, rows: &[SampleId], features: &Features) -> Result<Vec<f64>> {
        self.predict_with(rows, features, Parallelism::default())
    }

    pub fn predict_with(
        &self,
        rows: &[SampleId],
        features: &Features,
        policy: Parallelism,
    ) -> Result<Vec<f64>> {
        self.check(rows, features)?;
        Ok(par::map(policy, rows, |&id| {
            logistic(self.margin(features.row(id)))
        }))
    }

    /// Writes `dim` little-endian `f32` weights followed by the bias.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .weights
            .iter()
            .chain(std::iter::once(&self.bias))
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let expected = 4 * (dim as u64 + 1);
        if bytes.len() as u64 != expected {
            return Err(Error::DimensionMismatch {
                what: format!("model {}", path.display()),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let mut values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let bias = values.pop().unwrap_or_default();
        Ok(ClassifierModel {
            weights: values,
            bias,
            train_size: 0,
        })
    }
}

/// Trains on the labeled pool. Positive labels map to `+1`.
pub fn train(
    pool: &LabeledPool,
    features: &Features,
    config: &ClassifierConfig,
) -> Result<ClassifierModel> {
    let n = features.num_rows();
    if let Some(&(bad, _)) = pool.entries().iter().find(|e| e.0 as usize >= n) {
        return Err(Error::InvalidSample(bad));
    }
    train_rows(pool.entries(), features, config)
}

/// Trains on explicit `(row, label)` pairs; duplicate rows are kept as
/// separate training points.
pub fn train_rows(
    examples: &[(SampleId, bool)],
    features: &Features,
    config: &ClassifierConfig,
) -> Result<ClassifierModel> {
    config.validate()?;
    let n_pos = examples.iter().filter(|e| e.1).count();
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassPool);
    }
    let dim = features.dim();
    let (c_pos, c_neg) = match config.class_weighting {
        ClassWeighting::Uniform => (config.c, config.c),
        ClassWeighting::Balanced if n_pos < n_neg => {
            (config.c * n_neg as f64 / n_pos as f64, config.c)
        }
        ClassWeighting::Balanced => (config.c, config.c * n_pos as f64 / n_neg as f64),
    };

    // Dense f64 copy of the training rows with the constant bias column.
    let stride = dim + 1;
    let l = examples.len();
    let mut x = vec![0.0f64; l * stride];
    for (i, &(id, _)) in examples.iter().enumerate() {
        let dst = &mut x[i * stride..(i + 1) * stride];
        for (d, s) in dst.iter_mut().zip(features.row(id)) {
            *d = *s as f64;
        }
        dst[dim] = 1.0;
    }
    let y: Vec<f64> = examples.iter().map(|e| if e.1 { 1.0 } else { -1.0 }).collect();
    let upper: Vec<f64> = examples
        .iter()
        .map(|e| if e.1 { c_pos } else { c_neg })
        .collect();
    let qd: Vec<f64> = x.chunks_exact(stride).map(|r| dot(r, r)).collect();

    let mut w = vec![0.0f64; stride];
    let mut alpha = vec![0.0f64; l];
    let mut index: Vec<usize> = (0..l).collect();
    let mut active = l;
    let mut pg_max_old = f64::INFINITY;
    let mut pg_min_old = f64::NEG_INFINITY;
    let mut rng = rng::rng(config.seed);

    for _epoch in 0..config.max_epochs {
        let mut pg_max_new = f64::NEG_INFINITY;
        let mut pg_min_new = f64::INFINITY;

        for i in 0..active {
            let j = i + rng.random_range(0..active - i);
            index.swap(i, j);
        }

        let mut s = 0;
        while s < active {
            let i = index[s];
            let xi = &x[i * stride..(i + 1) * stride];
            let g = y[i] * dot(&w, xi) - 1.0;
            let c = upper[i];
            let mut pg = 0.0;
            if alpha[i] == 0.0 {
                if g > pg_max_old {
                    active -= 1;
                    index.swap(s, active);
                    continue;
                } else if g < 0.0 {
                    pg = g;
                }
            } else if alpha[i] == c {
                if g < pg_min_old {
                    active -= 1;
                    index.swap(s, active);
                    continue;
                } else if g > 0.0 {
                    pg = g;
                }
            } else {
                pg = g;
            }
            pg_max_new = pg_max_new.max(pg);
            pg_min_new = pg_min_new.min(pg);

            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, c);
                let step = (alpha[i] - old) * y[i];
                for (wk, xk) in w.iter_mut().zip(xi) {
                    *wk += step * xk;
                }
            }
            s += 1;
        }

        if pg_max_new - pg_min_new <= config.tolerance {
            if active == l {
                break;
            }
            // converged on the shrunk set; re-check everything once
            active = l;
            pg_max_old = f64::INFINITY;
            pg_min_old = f64::NEG_INFINITY;
            continue;
        }
        pg_max_old = if pg_max_new <= 0.0 { f64::INFINITY } else { pg_max_new };
        pg_min_old = if pg_min_new >= 0.0 { f64::NEG_INFINITY } else { pg_min_new };
    }

    let bias = w.pop().unwrap_or_default();
    if w.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(Error::State("solver produced non-finite weights".into()));
    }
    Ok(ClassifierModel {
        weights: w,
        bias,
        train_size: l,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(dim: usize, rows: &[f32]) -> Features {
        Features::new(dim, rows.to_vec()).unwrap()
    }

    fn all_ids(f: &Features) -> Vec<SampleId> {
        (0..f.num_rows() as u32).collect()
    }

    #[test]
    fn symmetric_1d_boundary_at_zero() {
        let f = feats(1, &[1.0, 1.0, -1.0, -1.0, 0.0]);
        let pool: LabeledPool = [(0, true), (1, true), (2, false), (3, false)]
            .into_iter()
            .collect();
        let m = train(&pool, &f, &ClassifierConfig::default()).unwrap();
        assert!(m.weights[0] > 0.0);
        // boundary x* = -b / w
        assert!((-m.bias / m.weights[0]).abs() < 1e-3);
    }

    #[test]
    fn xor_converges_with_finite_margins() {
        let f = feats(2, &[1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
        let pool: LabeledPool = [(0, true), (1, true), (2, false), (3, false)]
            .into_iter()
            .collect();
        let m = train(&pool, &f, &ClassifierConfig::default()).unwrap();
        let margins = m.margins(&all_ids(&f), &f).unwrap();
        assert!(margins.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_class_and_bad_ids_rejected() {
        let f = feats(1, &[1.0, 2.0]);
        let pool: LabeledPool = [(0, true), (1, true)].into_iter().collect();
        assert!(matches!(
            train(&pool, &f, &ClassifierConfig::default()),
            Err(Error::SingleClassPool)
        ));
        let pool: LabeledPool = [(0, true), (7, false)].into_iter().collect();
        assert!(matches!(
            train(&pool, &f, &ClassifierConfig::default()),
            Err(Error::InvalidSample(7))
        ));
        let bad = ClassifierConfig {
            c: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn logistic_values() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(20.0) > 0.999999);
        let expect = [0.2689414213699951, 0.5, 0.7310585786300049];
        for (m, e) in [-1.0, 0.0, 1.0].iter().zip(expect) {
            assert!((logistic(*m) - e).abs() < 1e-9);
        }
        assert!(logistic(-1e-300) < 0.5);
        assert!(logistic(-5e-324) < 0.5);
        assert!(logistic(5e-324) >= 0.5);
    }

    #[test]
    fn predict_rejects_invalid_index_and_dim() {
        let f = feats(2, &[0.0, 1.0]);
        let m = ClassifierModel {
            weights: vec![1.0, 1.0],
            bias: 0.0,
            train_size: 0,
        };
        assert!(matches!(m.predict(&[3], &f), Err(Error::InvalidSample(3))));
        let m1 = ClassifierModel {
            weights: vec![1.0],
            bias: 0.0,
            train_size: 0,
        };
        assert!(matches!(
            m1.predict(&[0], &f),
            Err(Error::ModelDimension { .. })
        ));
    }

    #[test]
    fn relabel_overwrites() {
        let mut pool = LabeledPool::new();
        assert_eq!(pool.insert(4, true), None);
        let g = pool.generation();
        assert_eq!(pool.insert(4, false), Some(true));
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.label(4), Some(false));
        assert!(pool.generation() > g);
    }

    #[test]
    fn balanced_weighting_moves_boundary_toward_majority() {
        // one positive at +1, five negatives spread around -1..0.2
        let f = feats(1, &[1.0, -1.0, -0.8, -0.5, 0.0, 0.2]);
        let pool: LabeledPool = (0..6).map(|i| (i, i == 0)).collect();
        let uni = train(&pool, &f, &ClassifierConfig::default()).unwrap();
        let bal = train(
            &pool,
            &f,
            &ClassifierConfig {
                class_weighting: ClassWeighting::Balanced,
                ..Default::default()
            },
        )
        .unwrap();
        let x = [0];
        assert!(bal.margins(&x, &f).unwrap()[0] >= uni.margins(&x, &f).unwrap()[0] - 1e-9);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = ClassifierModel {
            weights: vec![0.5, -0.25, 3.0],
            bias: 0.125,
            train_size: 6,
        };
        m.save(&path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 16);
        let back = ClassifierModel::load(&path, 3).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.bias, m.bias);
        assert!(ClassifierModel::load(&path, 2).is_err());
    }
}
