//! Datasets and minibatch construction.
//!
//! Batches are drawn either i.i.d. or label-clustered (L labels drawn with
//! replacement, k examples per drawn label, same-label examples adjacent).
//! A batch can then be cut into contiguous microbatches, or into two halves
//! that separate every same-label pair.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("bad magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: String, expected: u32, found: u32 },
    #[error("{path} is truncated: need {needed} bytes, have {actual}")]
    Truncated { path: String, needed: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("malformed dataset cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Invalid(#[from] Error),
}

/// Labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(n, width)`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Indices of each class; together a partition of `0..n`.
    pub by_class: Vec<Vec<usize>>,
}

/// A minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let features = Tensor::concat_rows(&parts.iter().map(|b| b.features.clone()).collect::<Vec<_>>())?;
        Ok(Batch { features, labels: parts.iter().flat_map(|b| b.labels.iter().copied()).collect() })
    }
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} rows but {} labels", labels.len())));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            by_class[l].push(i);
        }
        Ok(Dataset { features, labels, classes, by_class })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let features = self.features.select_rows(indices)?;
        Dataset::new(features, indices.iter().map(|&i| self.labels[i]).collect(), self.classes)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch { features: self.features.select_rows(indices)?, labels: indices.iter().map(|&i| self.labels[i]).collect() })
    }

    /// First `fraction` of rows (by index) for training, the rest for validation.
    pub fn train_validation_split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        let n_train = (self.len() as f64 * fraction).round() as usize;
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::InvalidArgument(format!("split fraction {fraction} leaves an empty side")));
        }
        let train: Vec<usize> = (0..n_train).collect();
        let val: Vec<usize> = (n_train..self.len()).collect();
        Ok((self.subset(&train)?, self.subset(&val)?))
    }
}

/// Gaussian mixture: class `c` is `N(class_sep * u_c, I)` with a seeded random unit vector `u_c`.
///
/// Example `i` belongs to class `i % classes`, so any index prefix is
/// close to class-balanced.
pub fn make_gaussian_mixture(classes: usize, per_class: usize, width: usize, class_sep: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || width == 0 {
        return Err(Error::InvalidArgument("mixture counts must be positive".into()));
    }
    if !(class_sep >= 0.0) {
        return Err(Error::InvalidArgument(format!("class_sep must be >= 0, got {class_sep}")));
    }
    let mut mean_rng = Rng::derive(seed, 0);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let v = mean_rng.normal(&[width], 0.0, 1.0)?;
        let norm = v.norm_l2();
        means.push(v.scale(class_sep / norm));
    }
    let mut noise_rng = Rng::derive(seed, 1);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * width);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &m in means[c].data() {
            data.push(m + noise_rng.standard_normal());
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new([n, width], data)?, labels, classes)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { path: path.display().to_string(), needed: at + 4, actual: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(DataError::BadMagic { path: path.display().to_string(), expected, found });
    }
    Ok(())
}

/// Loads an IDX image/label pair (unsigned-byte images, big-endian header),
/// flattening images and scaling pixels to `[0, 1]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(ip)?;
    let labels = read_file(lp)?;
    check_magic(&images, IDX_IMAGES_MAGIC, ip)?;
    check_magic(&labels, IDX_LABELS_MAGIC, lp)?;

    let n_img = be_u32(&images, 4, ip)? as usize;
    let rows = be_u32(&images, 8, ip)? as usize;
    let cols = be_u32(&images, 12, ip)? as usize;
    let n_lab = be_u32(&labels, 4, lp)? as usize;
    if n_img != n_lab {
        return Err(DataError::CountMismatch { images: n_img, labels: n_lab });
    }
    let width = rows * cols;
    let needed = 16 + n_img * width;
    if images.len() < needed {
        return Err(DataError::Truncated { path: ip.display().to_string(), needed, actual: images.len() });
    }
    if labels.len() < 8 + n_lab {
        return Err(DataError::Truncated { path: lp.display().to_string(), needed: 8 + n_lab, actual: labels.len() });
    }
    let pixels = images[16..needed].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + n_lab].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset::new(Tensor::new([n_img, width], pixels)?, labels, classes)?)
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    rows: usize,
    width: usize,
    classes: usize,
}

const CACHE_FORMAT: &str = "renorm-dataset";

/// Writes the dataset cache: a JSON header line, a JSON label-array line,
/// then `rows * width` little-endian `f64` values.
pub fn save_dataset_cache(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let header = CacheHeader {
        format: CACHE_FORMAT.into(),
        version: 1,
        rows: ds.len(),
        width: ds.width(),
        classes: ds.classes,
    };
    let mut out = Vec::with_capacity(ds.features.len() * 8 + 256);
    serde_json::to_writer(&mut out, &header).map_err(|e| DataError::Cache(e.to_string()))?;
    out.push(b'\n');
    serde_json::to_writer(&mut out, &ds.labels).map_err(|e| DataError::Cache(e.to_string()))?;
    out.push(b'\n');
    for v in ds.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&out)).map_err(io)
}

pub fn load_dataset_cache(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let io = |source| DataError::Io { path: path.display().to_string(), source };
    let mut reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(io)?;
    let header: CacheHeader = serde_json::from_str(&line).map_err(|e| DataError::Cache(e.to_string()))?;
    if header.format != CACHE_FORMAT || header.version != 1 {
        return Err(DataError::Cache(format!("unsupported format {} v{}", header.format, header.version)));
    }
    line.clear();
    reader.read_line(&mut line).map_err(io)?;
    let labels: Vec<usize> = serde_json::from_str(&line).map_err(|e| DataError::Cache(e.to_string()))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io)?;
    let needed = header.rows * header.width * 8;
    if payload.len() != needed {
        return Err(DataError::Truncated { path: path.display().to_string(), needed, actual: payload.len() });
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Ok(Dataset::new(Tensor::new([header.rows, header.width], data)?, labels, header.classes)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Iid,
    LabelClustered,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub mode: SamplingMode,
    pub batch_size: usize,
    /// Labels drawn per batch (clustered mode).
    pub labels_per_batch: usize,
    /// Examples per drawn label (clustered mode).
    pub per_label: usize,
}

impl SamplerSpec {
    pub fn iid(batch_size: usize) -> Self {
        SamplerSpec { mode: SamplingMode::Iid, batch_size, labels_per_batch: 0, per_label: 0 }
    }

    pub fn clustered(labels_per_batch: usize, per_label: usize) -> Self {
        SamplerSpec {
            mode: SamplingMode::LabelClustered,
            batch_size: labels_per_batch * per_label,
            labels_per_batch,
            per_label,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.mode == SamplingMode::LabelClustered
            && (self.per_label == 0 || self.labels_per_batch * self.per_label != self.batch_size)
        {
            return Err(Error::InvalidArgument(format!(
                "clustered sampling needs labels_per_batch * per_label == batch_size, got {} * {} != {}",
                self.labels_per_batch, self.per_label, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Draws one minibatch.
///
/// i.i.d.: `batch_size` distinct examples. Clustered: `labels_per_batch`
/// labels with replacement, then `per_label` distinct examples of each,
/// emitted as `(label_0 x k, label_1 x k, ...)`.
pub fn sample_batch(ds: &Dataset, spec: &SamplerSpec, rng: &mut Rng) -> Result<Batch> {
    spec.validate()?;
    let indices = match spec.mode {
        SamplingMode::Iid => rng.sample_without_replacement(ds.len(), spec.batch_size)?,
        SamplingMode::LabelClustered => {
            if let Some((c, members)) = ds.by_class.iter().enumerate().find(|(_, m)| m.len() < spec.per_label) {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {} examples, need {} per label",
                    members.len(),
                    spec.per_label
                )));
            }
            let mut out = Vec::with_capacity(spec.batch_size);
            for _ in 0..spec.labels_per_batch {
                let members = &ds.by_class[rng.below(ds.classes)];
                for j in rng.sample_without_replacement(members.len(), spec.per_label)? {
                    out.push(members[j]);
                }
            }
            out
        }
    };
    ds.batch(&indices)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    Contiguous,
    LabelDisjointHalves,
}

/// How a minibatch is divided into independently normalized groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Microbatching {
    pub size: usize,
    pub rule: SplitRule,
}

impl Microbatching {
    pub fn whole(batch_size: usize) -> Self {
        Microbatching { size: batch_size, rule: SplitRule::Contiguous }
    }
}

pub fn split_microbatches(batch: &Batch, micro: &Microbatching) -> Result<Vec<Batch>> {
    let m = batch.len();
    if micro.size == 0 || !m.is_multiple_of(micro.size) {
        return Err(Error::InvalidArgument(format!("microbatch size {} does not divide batch size {m}", micro.size)));
    }
    match micro.rule {
        SplitRule::Contiguous => (0..m / micro.size)
            .map(|j| {
                let (s, e) = (j * micro.size, (j + 1) * micro.size);
                Ok(Batch { features: batch.features.slice_rows(s, e)?, labels: batch.labels[s..e].to_vec() })
            })
            .collect(),
        SplitRule::LabelDisjointHalves => {
            if micro.size * 2 != m {
                return Err(Error::InvalidArgument(format!("half split needs size {} == {m} / 2", micro.size)));
            }
            if batch.labels.chunks(2).any(|p| p[0] != p[1]) {
                return Err(Error::InvalidArgument("half split needs a batch of adjacent same-label pairs".into()));
            }
            let first: Vec<usize> = (0..m).step_by(2).collect();
            let second: Vec<usize> = (1..m).step_by(2).collect();
            let pick = |idx: &[usize]| -> Result<Batch> {
                Ok(Batch {
                    features: batch.features.select_rows(idx)?,
                    labels: idx.iter().map(|&i| batch.labels[i]).collect(),
                })
            };
            Ok(vec![pick(&first)?, pick(&second)?])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> Dataset {
        make_gaussian_mixture(4, 6, 3, 2.0, 11).unwrap()
    }

    #[test]
    fn mixture_is_deterministic_and_partitioned() {
        let a = small();
        assert_eq!(a, small());
        assert_ne!(a.features, make_gaussian_mixture(4, 6, 3, 2.0, 12).unwrap().features);
        let mut all: Vec<usize> = a.by_class.concat();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
        let (tr, va) = a.train_validation_split(0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (19, 5));
        assert_eq!(tr.features.data(), &a.features.data()[..19 * 3]);
    }

    #[test]
    fn mixture_means_have_requested_separation() {
        let ds = make_gaussian_mixture(3, 4000, 5, 6.0, 1).unwrap();
        for c in 0..3 {
            let idx = &ds.by_class[c];
            let mut mean = [0.0; 5];
            for &i in idx {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += ds.features.get(&[i, j]).unwrap() / idx.len() as f64;
                }
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 6.0).abs() < 0.1, "class {c} mean norm {norm}");
        }
    }

    #[test]
    fn iid_full_batch_is_permutation() {
        let ds = small();
        let b = sample_batch(&ds, &SamplerSpec::iid(24), &mut Rng::new(0)).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..24)
            .map(|i| b.features.slice_rows(i, i + 1).unwrap().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..24)
            .map(|i| ds.features.slice_rows(i, i + 1).unwrap().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
    }

    #[test]
    fn clustered_batches_are_pair_structured() {
        let ds = make_gaussian_mixture(40, 5, 2, 1.0, 3).unwrap();
        let spec = SamplerSpec::clustered(16, 2);
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let b = sample_batch(&ds, &spec, &mut rng).unwrap();
            assert_eq!(b.len(), 32);
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for &l in &b.labels {
                *counts.entry(l).or_default() += 1;
            }
            assert!(counts.values().all(|&c| c >= 2 && c % 2 == 0));
            assert!(b.labels.chunks(2).all(|p| p[0] == p[1]));
        }
    }

    #[test]
    fn clustered_k1_draws_labels_with_replacement() {
        let ds = make_gaussian_mixture(3, 10, 2, 1.0, 3).unwrap();
        let b = sample_batch(&ds, &SamplerSpec::clustered(300, 1), &mut Rng::new(1)).unwrap();
        let mut counts = [0usize; 3];
        for &l in &b.labels {
            counts[l] += 1;
        }
        // 300 draws > 10 per class: only possible with replacement
        assert!(counts.iter().all(|&c| c > 60 && c < 140), "{counts:?}");
    }

    #[test]
    fn small_class_rejected() {
        let ds = make_gaussian_mixture(3, 1, 2, 1.0, 3).unwrap();
        assert!(sample_batch(&ds, &SamplerSpec::clustered(2, 2), &mut Rng::new(1)).is_err());
        let bad = SamplerSpec { batch_size: 5, ..SamplerSpec::clustered(2, 2) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let ds = small();
        for spec in [SamplerSpec::iid(8), SamplerSpec::clustered(4, 2)] {
            let mut a = Rng::new(9);
            let mut b = Rng::new(9);
            for _ in 0..5 {
                assert_eq!(sample_batch(&ds, &spec, &mut a).unwrap(), sample_batch(&ds, &spec, &mut b).unwrap());
            }
        }
    }

    #[test]
    fn contiguous_split() {
        let ds = make_gaussian_mixture(4, 8, 2, 1.0, 0).unwrap();
        let b = sample_batch(&ds, &SamplerSpec::iid(32), &mut Rng::new(2)).unwrap();
        let parts = split_microbatches(&b, &Microbatching { size: 4, rule: SplitRule::Contiguous }).unwrap();
        assert_eq!(parts.len(), 8);
        assert!(parts.iter().all(|p| p.len() == 4));
        assert_eq!(Batch::concat(&parts).unwrap(), b);
        let one = split_microbatches(&b, &Microbatching::whole(32)).unwrap();
        assert_eq!(one, vec![b.clone()]);
        assert!(split_microbatches(&b, &Microbatching { size: 5, rule: SplitRule::Contiguous }).is_err());
    }

    #[test]
    fn half_split_separates_pairs() {
        let features = Tensor::new([6, 1], (0..6).map(f64::from).collect()).unwrap();
        let b = Batch { features, labels: vec![0, 0, 1, 1, 2, 2] };
        let halves = split_microbatches(&b, &Microbatching { size: 3, rule: SplitRule::LabelDisjointHalves }).unwrap();
        assert_eq!(halves[0].labels, vec![0, 1, 2]);
        assert_eq!(halves[1].labels, vec![0, 1, 2]);
        assert_eq!(halves[0].features.data(), &[0.0, 2.0, 4.0]);
        assert_eq!(halves[1].features.data(), &[1.0, 3.0, 5.0]);

        let bad = Batch { features: b.features.clone(), labels: vec![0, 1, 1, 1, 2, 2] };
        assert!(split_microbatches(&bad, &Microbatching { size: 3, rule: SplitRule::LabelDisjointHalves }).is_err());
        assert!(split_microbatches(&b, &Microbatching { size: 2, rule: SplitRule::LabelDisjointHalves }).is_err());
    }
}
