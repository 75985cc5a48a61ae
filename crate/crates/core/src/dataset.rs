//! Embedding store.
//!
//! A dataset is a JSON manifest next to headerless little-endian binaries:
//! features as `f32` rows (row-major, `num_samples × dim`), labels as one
//! `u32` class id per sample, and one `u32` index file per split. The
//! retrieval universe is the `"pool"` split; held-out f1 uses `"test"`.
//!
//! Oracle labels live inside [`EmbeddedDataset`] but are only reachable
//! through [`EmbeddedDataset::oracle_labels`]. Selection strategies take
//! [`Features`] and never see them.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{ClassId, Error, Result, SampleId};

pub const POOL_SPLIT: &str = "pool";
pub const TEST_SPLIT: &str = "test";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub dim: usize,
    pub num_samples: usize,
    pub features_file: PathBuf,
    pub labels_file: PathBuf,
    pub split_files: BTreeMap<String, PathBuf>,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_paths: Option<Vec<PathBuf>>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest {
                path: path.to_owned(),
                message: e.to_string(),
            })?;
        manifest.check_shape(path)?;
        Ok(manifest)
    }

    fn check_shape(&self, path: &Path) -> Result<()> {
        let bad = |message: &str| Error::Manifest {
            path: path.to_owned(),
            message: message.to_owned(),
        };
        if self.dim == 0 {
            return Err(bad("dim must be at least 1"));
        }
        if self.num_samples == 0 {
            return Err(bad("num_samples must be at least 1"));
        }
        if self.class_names.is_empty() {
            return Err(bad("class_names is empty"));
        }
        for required in [POOL_SPLIT, TEST_SPLIT] {
            if !self.split_files.contains_key(required) {
                return Err(bad(&format!("missing required split {required:?}")));
            }
        }
        if let Some(paths) = &self.image_paths {
            if paths.len() != self.num_samples {
                return Err(bad("image_paths length differs from num_samples"));
            }
        }
        Ok(())
    }

    /// Resolves a manifest-relative path.
    pub fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            base.join(p)
        }
    }
}

/// Dense row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f32>,
}

impl Features {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Config(format!(
                "feature buffer of {} values is not a multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Features { dim, data })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn num_rows(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn row(&self, id: SampleId) -> &[f32] {
        let start = id as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Squared Euclidean distance between two rows.
    #[inline]
    pub fn dist_sq(&self, a: SampleId, b: SampleId) -> f64 {
        dist_sq(self.row(a), self.row(b))
    }

    fn normalize_rows(&mut self) {
        for row in self.data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.dim, p % self.dim))
    }
}

#[inline]
pub fn dist_sq(a: &[f32], b: &[f32]) -> f64 {
    // f32 lanes vectorize; rows are short enough that f32 accumulation per
    // chunk of 8 then f64 across chunks keeps the error well below 1e-6.
    let mut acc = 0.0f64;
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        let mut s = 0.0f32;
        for k in 0..8 {
            let d = x[k] - y[k];
            s += d * d;
        }
        acc += s as f64;
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedDataset {
    manifest: DatasetManifest,
    features: Features,
    labels: Vec<ClassId>,
    splits: BTreeMap<String, Vec<SampleId>>,
    pool_mask: Vec<bool>,
    normalized: bool,
}

impl EmbeddedDataset {
    /// Builds and validates a dataset from in-memory parts. File paths in the
    /// manifest are not touched.
    pub fn from_parts(
        manifest: DatasetManifest,
        features: Vec<f32>,
        labels: Vec<ClassId>,
        splits: BTreeMap<String, Vec<SampleId>>,
        normalize: bool,
    ) -> Result<Self> {
        manifest.check_shape(Path::new(&manifest.name))?;
        let expected = manifest.num_samples * manifest.dim;
        if features.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "features".into(),
                expected: 4 * expected as u64,
                actual: 4 * features.len() as u64,
            });
        }
        if labels.len() != manifest.num_samples {
            return Err(Error::DimensionMismatch {
                what: "labels".into(),
                expected: 4 * manifest.num_samples as u64,
                actual: 4 * labels.len() as u64,
            });
        }
        let mut features = Features::new(manifest.dim, features)?;
        if let Some((row, col)) = features.first_non_finite() {
            return Err(Error::NonFinite { row, col });
        }
        let num_classes = manifest.class_names.len();
        if let Some((sample, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(Error::LabelOutOfRange {
                sample,
                label,
                num_classes,
            });
        }
        for (name, ids) in &splits {
            let mut seen = HashSet::with_capacity(ids.len());
            for &id in ids {
                if id as usize >= manifest.num_samples {
                    return Err(Error::Split {
                        split: name.clone(),
                        message: format!(
                            "index {id} out of range for {} samples",
                            manifest.num_samples
                        ),
                    });
                }
                if !seen.insert(id) {
                    return Err(Error::Split {
                        split: name.clone(),
                        message: format!("index {id} listed twice"),
                    });
                }
            }
        }
        for required in [POOL_SPLIT, TEST_SPLIT] {
            if !splits.contains_key(required) {
                return Err(Error::Split {
                    split: required.into(),
                    message: "missing".into(),
                });
            }
        }
        let mut pool_mask = vec![false; manifest.num_samples];
        for &id in &splits[POOL_SPLIT] {
            pool_mask[id as usize] = true;
        }
        if let Some(&sample) = splits[TEST_SPLIT].iter().find(|&&id| pool_mask[id as usize]) {
            return Err(Error::OverlappingSplits {
                first: POOL_SPLIT.into(),
                second: TEST_SPLIT.into(),
                sample,
            });
        }
        if normalize {
            features.normalize_rows();
        }
        Ok(EmbeddedDataset {
            manifest,
            features,
            labels,
            splits,
            pool_mask,
            normalized: normalize,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.dim
    }

    pub fn num_samples(&self) -> usize {
        self.manifest.num_samples
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn split(&self, name: &str) -> Option<&[SampleId]> {
        self.splits.get(name).map(Vec::as_slice)
    }

    pub fn pool(&self) -> &[SampleId] {
        &self.splits[POOL_SPLIT]
    }

    pub fn test(&self) -> &[SampleId] {
        &self.splits[TEST_SPLIT]
    }

    pub fn in_pool(&self, id: SampleId) -> bool {
        self.pool_mask.get(id as usize).copied().unwrap_or(false)
    }

    /// Ground-truth class ids. Reserved for annotators and evaluation.
    pub fn oracle_labels(&self) -> &[ClassId] {
        &self.labels
    }

    /// Pool members of `class`, ascending.
    pub fn pool_members(&self, class: ClassId) -> Vec<SampleId> {
        let mut ids: Vec<SampleId> = self
            .pool()
            .iter()
            .copied()
            .filter(|&id| self.labels[id as usize] == class)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Pool size per class id.
    pub fn pool_class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_classes()];
        for &id in self.pool() {
            sizes[self.labels[id as usize] as usize] += 1;
        }
        sizes
    }

    pub fn image_path(&self, id: SampleId) -> Option<&Path> {
        self.manifest
            .image_paths
            .as_ref()
            .and_then(|p| p.get(id as usize))
            .map(PathBuf::as_path)
    }
}

/// Loads and validates a dataset. Relative paths in the manifest resolve
/// against the manifest's directory.
pub fn load_dataset(manifest_path: &Path, normalize: bool) -> Result<EmbeddedDataset> {
    let mut manifest = DatasetManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let features_path = manifest.resolve(base, &manifest.features_file);
    let expected = 4 * (manifest.num_samples as u64) * (manifest.dim as u64);
    let bytes = read_exact_len(&features_path, "features", expected)?;
    let features: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let labels_path = manifest.resolve(base, &manifest.labels_file);
    let labels = decode_u32(&read_exact_len(
        &labels_path,
        "labels",
        4 * manifest.num_samples as u64,
    )?);

    let mut splits = BTreeMap::new();
    for (name, file) in &manifest.split_files {
        let path = manifest.resolve(base, file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::DimensionMismatch {
                what: format!("split {name}"),
                expected: (bytes.len() as u64 / 4) * 4,
                actual: bytes.len() as u64,
            });
        }
        splits.insert(name.clone(), decode_u32(&bytes));
    }

    if let Some(paths) = manifest.image_paths.as_mut() {
        for p in paths.iter_mut() {
            *p = manifest_relative(base, p);
        }
    }
    EmbeddedDataset::from_parts(manifest, features, labels, splits, normalize)
}

fn manifest_relative(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

fn read_exact_len(path: &Path, what: &str, expected: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(Error::DimensionMismatch {
            what: format!("{what} file {}", path.display()),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(bytes)
}

fn decode_u32(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn encode_u32(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `dataset` as `<dir>/<stem>.json` plus its binaries and returns the
/// manifest path. Reloading with `normalize = false` reproduces the features
/// and labels bit for bit.
pub fn write_dataset(dataset: &EmbeddedDataset, dir: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, bytes: Vec<u8>| -> Result<PathBuf> {
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(PathBuf::from(name))
    };

    let mut manifest = dataset.manifest.clone();
    manifest.features_file = write(
        format!("{stem}.features.f32"),
        dataset
            .features
            .data
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    )?;
    manifest.labels_file = write(format!("{stem}.labels.u32"), encode_u32(&dataset.labels))?;
    manifest.split_files = BTreeMap::new();
    for (name, ids) in &dataset.splits {
        let file = write(format!("{stem}.{name}.u32"), encode_u32(ids))?;
        manifest.split_files.insert(name.clone(), file);
    }

    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Class-frequency statistics over the pool split.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassStats {
    pub pool_size: usize,
    /// Pool count per class id (zero for classes absent from the pool).
    pub sizes: Vec<usize>,
    pub frequencies: Vec<f64>,
    /// Aggregates over classes present in the pool.
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub present_classes: usize,
}

pub fn class_stats(dataset: &EmbeddedDataset) -> Result<ClassStats> {
    let pool_size = dataset.pool().len();
    if pool_size == 0 {
        return Err(Error::EmptySplit(POOL_SPLIT.into()));
    }
    let sizes = dataset.pool_class_sizes();
    let frequencies: Vec<f64> = sizes
        .iter()
        .map(|&k| k as f64 / pool_size as f64)
        .collect();
    let mut present: Vec<f64> = sizes
        .iter()
        .zip(&frequencies)
        .filter(|(&k, _)| k > 0)
        .map(|(_, &f)| f)
        .collect();
    present.sort_by(f64::total_cmp);
    let n = present.len();
    let median = if n % 2 == 1 {
        present[n / 2]
    } else {
        0.5 * (present[n / 2 - 1] + present[n / 2])
    };
    Ok(ClassStats {
        pool_size,
        min: present[0],
        max: present[n - 1],
        mean: present.iter().sum::<f64>() / n as f64,
        median,
        present_classes: n,
        sizes,
        frequencies,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn manifest(name: &str, n: usize, dim: usize, classes: usize) -> DatasetManifest {
        DatasetManifest {
            name: name.into(),
            dim,
            num_samples: n,
            features_file: "f.f32".into(),
            labels_file: "l.u32".into(),
            split_files: [(POOL_SPLIT, "p.u32"), (TEST_SPLIT, "t.u32")]
                .into_iter()
                .map(|(k, v)| (k.to_string(), PathBuf::from(v)))
                .collect(),
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
            image_paths: None,
        }
    }

    /// Small in-memory dataset: every id in `pool` goes to the pool split,
    /// the rest to test.
    pub(crate) fn toy(
        dim: usize,
        rows: Vec<f32>,
        labels: Vec<u32>,
        pool: Vec<u32>,
    ) -> EmbeddedDataset {
        let n = labels.len();
        let classes = *labels.iter().max().unwrap() as usize + 1;
        let test: Vec<u32> = (0..n as u32).filter(|i| !pool.contains(i)).collect();
        let splits = [(POOL_SPLIT.to_string(), pool), (TEST_SPLIT.to_string(), test)]
            .into_iter()
            .collect();
        EmbeddedDataset::from_parts(manifest("toy", n, dim, classes), rows, labels, splits, false)
            .unwrap()
    }

    fn write_raw(dir: &Path, n: usize, dim: usize, feature_bytes: Vec<u8>) -> PathBuf {
        let m = manifest("raw", n, dim, 2);
        fs::write(dir.join("f.f32"), feature_bytes).unwrap();
        let labels: Vec<u32> = (0..n as u32).map(|i| i % 2).collect();
        fs::write(dir.join("l.u32"), encode_u32(&labels)).unwrap();
        fs::write(dir.join("p.u32"), encode_u32(&[0, 1, 2, 3])).unwrap();
        fs::write(dir.join("t.u32"), encode_u32(&[4, 5])).unwrap();
        let path = dir.join("m.json");
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        path
    }

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn loads_six_by_two() {
        let dir = tempfile::tempdir().unwrap();
        let vals: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let path = write_raw(dir.path(), 6, 2, f32_bytes(&vals));
        let ds = load_dataset(&path, false).unwrap();
        assert_eq!(ds.features().num_rows(), 6);
        assert_eq!(ds.features().row(5), &[10.0, 11.0]);
        assert_eq!(ds.pool(), &[0, 1, 2, 3]);
    }

    #[test]
    fn normalizes_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut vals = vec![1.0f32; 12];
        vals[0] = 3.0;
        vals[1] = 4.0;
        let path = write_raw(dir.path(), 6, 2, f32_bytes(&vals));
        let ds = load_dataset(&path, true).unwrap();
        assert_eq!(ds.features().row(0), &[0.6, 0.8]);
        for i in 0..6 {
            let n: f64 = ds.features().row(i).iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn short_feature_file_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_raw(dir.path(), 6, 2, vec![0u8; 47]);
        match load_dataset(&path, false) {
            Err(Error::DimensionMismatch {
                expected, actual, ..
            }) => {
                assert_eq!((expected, actual), (48, 47));
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn reports_non_finite_position() {
        let dir = tempfile::tempdir().unwrap();
        let mut vals = vec![0.5f32; 12];
        vals[7] = f32::NAN;
        let path = write_raw(dir.path(), 6, 2, f32_bytes(&vals));
        match load_dataset(&path, false) {
            Err(Error::NonFinite { row, col }) => assert_eq!((row, col), (3, 1)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_and_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_raw(dir.path(), 6, 2, vec![0u8; 48]);
        fs::write(dir.path().join("t.u32"), encode_u32(&[3, 4])).unwrap();
        assert!(matches!(
            load_dataset(&path, false),
            Err(Error::OverlappingSplits { sample: 3, .. })
        ));
        fs::remove_file(dir.path().join("l.u32")).unwrap();
        assert!(matches!(load_dataset(&path, false), Err(Error::Io { .. })));
        assert!(matches!(
            load_dataset(&dir.path().join("nope.json"), false),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn label_out_of_range_rejected() {
        let m = manifest("x", 2, 1, 2);
        let splits = [(POOL_SPLIT.to_string(), vec![0]), (TEST_SPLIT.to_string(), vec![1])]
            .into_iter()
            .collect();
        let err = EmbeddedDataset::from_parts(m, vec![1.0, 2.0], vec![0, 2], splits, false);
        assert!(matches!(err, Err(Error::LabelOutOfRange { label: 2, .. })));
    }

    #[test]
    fn stats_direct_count() {
        let ds = toy(1, vec![0.0; 5], vec![0, 0, 0, 1, 1], vec![0, 1, 2, 3]);
        let s = class_stats(&ds).unwrap();
        assert_eq!(s.frequencies, vec![0.75, 0.25]);
        assert_eq!((s.min, s.max), (0.25, 0.75));
        assert_eq!(s.median, 0.5);
    }

    #[test]
    fn stats_single_class_pool() {
        let ds = toy(1, vec![0.0; 4], vec![0, 0, 0, 1], vec![0, 1, 2]);
        let s = class_stats(&ds).unwrap();
        assert_eq!((s.min, s.max, s.mean, s.median), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn stats_empty_pool_errors() {
        let ds = toy(1, vec![0.0; 2], vec![0, 1], vec![]);
        assert!(matches!(class_stats(&ds), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn write_then_load_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![0.1f32, -2.5, 3.25e-7, 1e30, 0.0, -0.0];
        let ds = toy(2, rows, vec![0, 1, 1], vec![0, 2]);
        let path = write_dataset(&ds, dir.path(), "rt").unwrap();
        let back = load_dataset(&path, false).unwrap();
        let bits = |d: &EmbeddedDataset| -> Vec<u32> {
            d.features().as_slice().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&ds), bits(&back));
        assert_eq!(ds.oracle_labels(), back.oracle_labels());
        assert_eq!(ds.pool(), back.pool());
        // two loads compare equal
        assert_eq!(back, load_dataset(&path, false).unwrap());
    }
}
