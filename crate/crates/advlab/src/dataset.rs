//! Datasets and their plumbing: the IDX on-disk format, two synthetic
//! generators that stand in for corpora we cannot redistribute, and the
//! split/subsample operations the harness builds its desk-scale slices with.
//!
//! Feature values always live in [0, 1]. `Domain` records whether a dataset
//! is continuous in the unit box (images) or strictly binary (presence
//! indicators); attack code uses this to decide which perturbations are
//! admissible. Labels are stored one-hot so that training code can consume
//! soft targets through the same code path.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;
use crate::rng::{derive_seed, gaussian, rng_from_seed, uniform01};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Entries may take any value in [0, 1].
    ContinuousUnit,
    /// Entries are exactly 0.0 or 1.0.
    Binary,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Matrix,
    labels: Matrix,
    domain: Domain,
    name: String,
    /// (rows, cols) of the source images, kept so a load/save cycle through
    /// IDX reproduces the original header byte for byte.
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Matrix, domain: Domain, name: &str) -> Result<Self> {
        ensure!(
            samples.rows() == labels.rows(),
            "dataset {name}: {} samples but {} label rows",
            samples.rows(),
            labels.rows()
        );
        ensure!(labels.cols() >= 2, "dataset {name}: need at least 2 classes");
        for i in 0..labels.rows() {
            let row = labels.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            ensure!(
                ones == 1 && zeros == row.len() - 1,
                "dataset {name}: label row {i} is not one-hot"
            );
        }
        for (idx, &v) in samples.data().iter().enumerate() {
            match domain {
                Domain::ContinuousUnit => ensure!(
                    (0.0..=1.0).contains(&v),
                    "dataset {name}: sample entry {idx} = {v} outside [0,1]"
                ),
                Domain::Binary => ensure!(
                    v == 0.0 || v == 1.0,
                    "dataset {name}: sample entry {idx} = {v} not binary"
                ),
            }
        }
        Ok(Dataset { samples, labels, domain, name: name.to_string(), image_shape: None })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }

    /// Class index of sample `i` (position of the 1 in its one-hot row).
    pub fn class_of(&self, i: usize) -> usize {
        let row = self.labels.row(i);
        row.iter().position(|&v| v == 1.0).expect("labels validated one-hot")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for i in 0..self.len() {
            counts[self.class_of(i)] += 1;
        }
        counts
    }

    /// New dataset holding `indices` in the given order. Indices may not repeat
    /// the bounds check is the only restriction; callers control ordering.
    pub fn take_rows(&self, indices: &[usize]) -> Result<Dataset> {
        let m = self.input_dim();
        let k = self.num_classes();
        let mut samples = Matrix::zeros(indices.len(), m);
        let mut labels = Matrix::zeros(indices.len(), k);
        for (out, &idx) in indices.iter().enumerate() {
            ensure!(idx < self.len(), "take_rows: index {idx} out of bounds ({})", self.len());
            samples.row_mut(out).copy_from_slice(self.samples.row(idx));
            labels.row_mut(out).copy_from_slice(self.labels.row(idx));
        }
        Ok(Dataset {
            samples,
            labels,
            domain: self.domain,
            name: self.name.clone(),
            image_shape: self.image_shape,
        })
    }

    /// Same labels and metadata, different feature rows — the shape of an
    /// adversarially perturbed copy. The replacement must match the original
    /// dimensions and still satisfy this dataset's domain.
    pub fn with_samples(&self, samples: Matrix) -> Result<Dataset> {
        ensure!(
            samples.rows() == self.len() && samples.cols() == self.input_dim(),
            "with_samples: expected {}x{}, got {}x{}",
            self.len(),
            self.input_dim(),
            samples.rows(),
            samples.cols()
        );
        Dataset::new(samples, self.labels.clone(), self.domain, &self.name).map(|mut d| {
            d.image_shape = self.image_shape;
            d
        })
    }

    /// SHA-256 over a canonical encoding of everything that affects results.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"advlab-dataset-v1");
        h.update(self.name.as_bytes());
        h.update([match self.domain {
            Domain::ContinuousUnit => 0u8,
            Domain::Binary => 1u8,
        }]);
        for dim in [self.len(), self.input_dim(), self.num_classes()] {
            h.update((dim as u64).to_le_bytes());
        }
        for &v in self.samples.data() {
            h.update(v.to_le_bytes());
        }
        for i in 0..self.len() {
            h.update([self.class_of(i) as u8]);
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// IDX input/output
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    let slice = bytes
        .get(off..off + 4)
        .ok_or_else(|| Error::Format(format!("IDX file truncated reading {what}")))?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Load an images/labels IDX pair. Pixels are scaled to [0, 1] by dividing by
/// 255; labels become one-hot with width `max_label + 1` (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let magic = read_be_u32(&img_bytes, 0, "image magic")?;
    ensure_format(magic == IDX_IMAGES_MAGIC, || {
        format!("bad image magic 0x{magic:08x} (want 0x{IDX_IMAGES_MAGIC:08x})")
    })?;
    let n = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, 8, "image rows")? as usize;
    let cols = read_be_u32(&img_bytes, 12, "image cols")? as usize;
    let pixel_count = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    ensure_format(img_bytes.len() == 16 + pixel_count, || {
        format!("image payload is {} bytes, header implies {}", img_bytes.len() - 16, pixel_count)
    })?;

    let lmagic = read_be_u32(&lbl_bytes, 0, "label magic")?;
    ensure_format(lmagic == IDX_LABELS_MAGIC, || {
        format!("bad label magic 0x{lmagic:08x} (want 0x{IDX_LABELS_MAGIC:08x})")
    })?;
    let ln = read_be_u32(&lbl_bytes, 4, "label count")? as usize;
    ensure_format(ln == n, || format!("{n} images but {ln} labels"))?;
    ensure_format(lbl_bytes.len() == 8 + ln, || {
        format!("label payload is {} bytes, header implies {}", lbl_bytes.len() - 8, ln)
    })?;

    let raw_labels = &lbl_bytes[8..];
    let num_classes = raw_labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let num_classes = num_classes.max(2);

    let m = rows * cols;
    let mut samples = Matrix::zeros(n, m);
    for i in 0..n {
        let src = &img_bytes[16 + i * m..16 + (i + 1) * m];
        for (dst, &b) in samples.row_mut(i).iter_mut().zip(src) {
            *dst = b as f64 / 255.0;
        }
    }
    let mut labels = Matrix::zeros(n, num_classes);
    for (i, &b) in raw_labels.iter().enumerate() {
        labels.set(i, b as usize, 1.0);
    }

    let mut d = Dataset::new(samples, labels, Domain::ContinuousUnit, "mnist")?;
    d.image_shape = Some((rows, cols));
    Ok(d)
}

fn ensure_format(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Format(msg()))
    }
}

/// Write the dataset as an IDX pair. Values are quantized back to bytes with
/// `round(v * 255)`, which is exact for anything that came out of `load_idx`.
pub fn save_idx(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = d.image_shape.unwrap_or((1, d.input_dim()));
    ensure!(
        rows * cols == d.input_dim(),
        "image shape {rows}x{cols} does not match input dim {}",
        d.input_dim()
    );
    let n = d.len();

    let mut img = Vec::with_capacity(16 + n * d.input_dim());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in d.samples.data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }

    let mut lbl = Vec::with_capacity(8 + n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(n as u32).to_be_bytes());
    for i in 0..n {
        lbl.push(d.class_of(i) as u8);
    }

    atomic_write(images_path, &img)?;
    atomic_write(labels_path, &lbl)?;
    Ok(())
}

/// Write `bytes` to `path` via a temp file + rename so readers never observe
/// a partially written file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Binary presence-indicator data imitating a malware feature matrix.
///
/// Each of the two classes owns a disjoint set of `m / 8` indicator features
/// that fire with probability `1 - flip_rate` for members of the class; every
/// other feature is background noise firing with probability `flip_rate`.
/// Samples alternate classes, so any prefix of the set is close to balanced.
pub fn synth_sparse_binary(n: usize, m: usize, seed: u64, flip_rate: f64) -> Result<Dataset> {
    ensure!(m >= 16, "synth_sparse_binary: m = {m} < 16");
    ensure!(n >= 2, "synth_sparse_binary: n = {n} < 2");
    ensure!(
        flip_rate > 0.0 && flip_rate < 0.5,
        "synth_sparse_binary: flip_rate = {flip_rate} outside (0, 0.5)"
    );
    let per_class = m / 8;
    let mut rng = rng_from_seed(seed);

    // Disjoint indicator sets: first 2 * per_class entries of a seeded
    // permutation of the feature indices.
    let mut features: Vec<usize> = (0..m).collect();
    features.shuffle(&mut rng);
    let owners = {
        let mut owners = vec![None; m];
        for (pos, &f) in features[..2 * per_class].iter().enumerate() {
            owners[f] = Some(pos / per_class); // 0 or 1
        }
        owners
    };

    let mut samples = Matrix::zeros(n, m);
    let mut labels = Matrix::zeros(n, 2);
    for i in 0..n {
        let class = i % 2;
        for (j, owner) in owners.iter().enumerate() {
            let p = match owner {
                Some(owner) if *owner == class => 1.0 - flip_rate,
                _ => flip_rate,
            };
            if uniform01(&mut rng) < p {
                samples.set(i, j, 1.0);
            }
        }
        labels.set(i, class, 1.0);
    }
    Dataset::new(samples, labels, Domain::Binary, "synth_sparse_binary")
}

/// Two spherical Gaussian clusters along a random unit direction `u`, centred
/// at ±(separation / 2)·u with unit isotropic noise, then affinely rescaled so
/// all entries land in [0, 1]. Samples alternate classes.
pub fn synth_gaussian_clusters(n: usize, m: usize, seed: u64, separation: f64) -> Result<Dataset> {
    ensure!(m >= 1, "synth_gaussian_clusters: m = 0");
    ensure!(n >= 2, "synth_gaussian_clusters: n = {n} < 2");
    ensure!(separation >= 0.0, "synth_gaussian_clusters: separation = {separation} < 0");
    let mut rng = rng_from_seed(seed);

    let mut u: Vec<f64> = (0..m).map(|_| gaussian(&mut rng)).collect();
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut u {
            *v /= norm;
        }
    } else {
        u[0] = 1.0;
    }

    let mut samples = Matrix::zeros(n, m);
    let mut labels = Matrix::zeros(n, 2);
    for i in 0..n {
        let class = i % 2;
        let sign = if class == 0 { -1.0 } else { 1.0 };
        for (j, &uj) in u.iter().enumerate() {
            let center = sign * 0.5 * separation * uj;
            samples.set(i, j, center + gaussian(&mut rng));
        }
        labels.set(i, class, 1.0);
    }

    // Single global affine map into [0, 1], so class geometry is preserved.
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in samples.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    for v in samples.data_mut() {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
    }

    Dataset::new(samples, labels, Domain::ContinuousUnit, "synth_gaussian_clusters")
}

// ---------------------------------------------------------------------------
// Split / subsample
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub shuffle: bool,
}

/// Split into (train, test). With `shuffle` the row order is permuted by the
/// seed first; otherwise the split is a plain prefix/suffix cut.
pub fn split(d: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    ensure!(
        (0.0..=1.0).contains(&spec.train_fraction),
        "split: train_fraction = {} outside [0,1]",
        spec.train_fraction
    );
    let n = d.len();
    let n_train = (spec.train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    if spec.shuffle {
        let mut rng = rng_from_seed(spec.seed);
        order.shuffle(&mut rng);
    }
    let train = d.take_rows(&order[..n_train])?;
    let test = d.take_rows(&order[n_train..])?;
    Ok((train, test))
}

/// Stratified subsample of exactly `n` rows. Per-class quotas are apportioned
/// by the largest-remainder rule (ties broken toward the lower class index);
/// rows within a class are chosen by seeded shuffle, and the selected indices
/// are emitted in their original order.
pub fn subsample(d: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    ensure!(n <= d.len(), "subsample: requested {n} of {} rows", d.len());
    if n == d.len() {
        let all: Vec<usize> = (0..n).collect();
        return d.take_rows(&all);
    }
    let counts = d.class_counts();
    let total = d.len() as f64;

    let mut quotas: Vec<usize> = Vec::with_capacity(counts.len());
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(counts.len());
    for (class, &c) in counts.iter().enumerate() {
        let exact = n as f64 * c as f64 / total;
        let floor = exact.floor() as usize;
        quotas.push(floor);
        remainders.push((class, exact - floor as f64));
    }
    let assigned: usize = quotas.iter().sum();
    // Stable sort by descending remainder keeps the lowest-class tie order.
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for &(class, _) in remainders.iter().take(n - assigned) {
        quotas[class] += 1;
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for i in 0..d.len() {
        by_class[d.class_of(i)].push(i);
    }
    let mut rng = rng_from_seed(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for (class, pool) in by_class.iter_mut().enumerate() {
        ensure!(
            quotas[class] <= pool.len(),
            "subsample: class {class} quota {} exceeds {} available",
            quotas[class],
            pool.len()
        );
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..quotas[class]]);
    }
    chosen.sort_unstable();
    d.take_rows(&chosen)
}

// ---------------------------------------------------------------------------
// Dataset specs (config-facing)
// ---------------------------------------------------------------------------

/// Declarative description of a (train, test) pair; this is what experiment
/// configs reference and what synthetic sidecar files record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Mnist {
        dir: PathBuf,
        /// 0 means "use the full split".
        #[serde(default)]
        train_size: usize,
        #[serde(default)]
        test_size: usize,
        seed: u64,
    },
    SparseBinary {
        n_train: usize,
        n_test: usize,
        m: usize,
        seed: u64,
        flip_rate: f64,
    },
    GaussianClusters {
        n_train: usize,
        n_test: usize,
        m: usize,
        seed: u64,
        separation: f64,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Mnist { dir, train_size, test_size, seed } => {
                let train = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = load_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                let train = if *train_size == 0 {
                    train
                } else {
                    subsample(&train, *train_size, derive_seed(*seed, 1))?
                };
                let test = if *test_size == 0 {
                    test
                } else {
                    subsample(&test, *test_size, derive_seed(*seed, 2))?
                };
                Ok((train, test))
            }
            DatasetSpec::SparseBinary { n_train, n_test, m, seed, flip_rate } => {
                let all = synth_sparse_binary(n_train + n_test, *m, *seed, *flip_rate)?;
                split_counts(&all, *n_train)
            }
            DatasetSpec::GaussianClusters { n_train, n_test, m, seed, separation } => {
                let all = synth_gaussian_clusters(n_train + n_test, *m, *seed, *separation)?;
                split_counts(&all, *n_train)
            }
        }
    }

    /// Short name for report rows.
    pub fn dataset_name(&self) -> &'static str {
        match self {
            DatasetSpec::Mnist { .. } => "mnist",
            DatasetSpec::SparseBinary { .. } => "synth_sparse_binary",
            DatasetSpec::GaussianClusters { .. } => "synth_gaussian_clusters",
        }
    }
}

fn split_counts(d: &Dataset, n_train: usize) -> Result<(Dataset, Dataset)> {
    let train: Vec<usize> = (0..n_train).collect();
    let test: Vec<usize> = (n_train..d.len()).collect();
    Ok((d.take_rows(&train)?, d.take_rows(&test)?))
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    generator: DatasetSpec,
}

/// Save a synthetic dataset as an IDX pair plus a JSON sidecar recording the
/// generator parameters, so the exact data can be rebuilt from the sidecar.
pub fn save_synth_idx(
    d: &Dataset,
    spec: &DatasetSpec,
    images_path: &Path,
    labels_path: &Path,
    sidecar_path: &Path,
) -> Result<()> {
    save_idx(d, images_path, labels_path)?;
    let doc = Sidecar { format_version: 1, generator: spec.clone() };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
    atomic_write(sidecar_path, json.as_bytes())
}

pub fn load_sidecar(path: &Path) -> Result<DatasetSpec> {
    let text = std::fs::read_to_string(path)?;
    let doc: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("sidecar parse: {e}")))?;
    ensure_format(doc.format_version == 1, || {
        format!("unsupported sidecar format_version {}", doc.format_version)
    })?;
    Ok(doc.generator)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Dataset {
        // Three 2x2 "images" with distinct byte patterns.
        let samples = Matrix::from_rows(&[
            vec![0.0, 1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0],
            vec![1.0, 254.0 / 255.0, 0.0, 128.0 / 255.0],
            vec![17.0 / 255.0, 0.0, 0.0, 0.0],
        ])
        .unwrap();
        let labels = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut d = Dataset::new(samples, labels, Domain::ContinuousUnit, "toy").unwrap();
        d.image_shape = Some((2, 2));
        d
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (img1, lbl1) = (dir.path().join("img1"), dir.path().join("lbl1"));
        let (img2, lbl2) = (dir.path().join("img2"), dir.path().join("lbl2"));
        let d = toy_dataset();
        save_idx(&d, &img1, &lbl1).unwrap();
        let loaded = load_idx(&img1, &lbl1).unwrap();
        assert_eq!(loaded.samples().data(), d.samples().data());
        assert_eq!(loaded.class_of(0), 0);
        assert_eq!(loaded.class_of(1), 1);
        save_idx(&loaded, &img2, &lbl2).unwrap();
        assert_eq!(std::fs::read(&img1).unwrap(), std::fs::read(&img2).unwrap());
        assert_eq!(std::fs::read(&lbl1).unwrap(), std::fs::read(&lbl2).unwrap());
    }

    #[test]
    fn idx_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let d = toy_dataset();
        save_idx(&d, &img, &lbl).unwrap();

        let mut bytes = std::fs::read(&img).unwrap();
        bytes[2] = 0x07; // corrupt magic
        let bad_magic = dir.path().join("bad_magic");
        std::fs::write(&bad_magic, &bytes).unwrap();
        let err = load_idx(&bad_magic, &lbl).unwrap_err();
        assert_eq!(err.exit_code(), 2, "bad magic should be a format error: {err}");

        let truncated = dir.path().join("trunc");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_idx(&truncated, &lbl).unwrap_err();
        assert_eq!(err.exit_code(), 2, "truncation should be a format error: {err}");

        // Count mismatch between images and labels.
        let mut lbl_bytes = std::fs::read(&lbl).unwrap();
        lbl_bytes[7] = 9;
        let bad_count = dir.path().join("bad_count");
        std::fs::write(&bad_count, &lbl_bytes).unwrap();
        assert!(load_idx(&img, &bad_count).is_err());
    }

    #[test]
    fn sparse_binary_is_learnable_by_a_stump() {
        let d = synth_sparse_binary(1000, 64, 7, 0.05).unwrap();
        let (train, test) = split_counts(&d, 600).unwrap();

        // Oracle: best single-feature classifier fit on train, scored on test.
        let mut best = (0usize, 0usize, 0.0f64); // (feature, polarity-class, acc)
        for j in 0..train.input_dim() {
            for class_if_one in 0..2 {
                let acc = |ds: &Dataset| {
                    let mut correct = 0;
                    for i in 0..ds.len() {
                        let pred = if ds.samples().get(i, j) == 1.0 {
                            class_if_one
                        } else {
                            1 - class_if_one
                        };
                        if pred == ds.class_of(i) {
                            correct += 1;
                        }
                    }
                    correct as f64 / ds.len() as f64
                };
                let train_acc = acc(&train);
                if train_acc > best.2 {
                    best = (j, class_if_one, train_acc);
                }
            }
        }
        let (j, class_if_one, _) = best;
        let mut correct = 0;
        for i in 0..test.len() {
            let pred =
                if test.samples().get(i, j) == 1.0 { class_if_one } else { 1 - class_if_one };
            if pred == test.class_of(i) {
                correct += 1;
            }
        }
        let test_acc = correct as f64 / test.len() as f64;
        assert!(test_acc > 0.9, "stump test accuracy {test_acc}");
        assert_eq!(d.domain(), Domain::Binary);
    }

    #[test]
    fn gaussian_clusters_follow_separation() {
        let mean_classifier_acc = |sep: f64| {
            let d = synth_gaussian_clusters(1000, 20, 11, sep).unwrap();
            let (train, test) = split_counts(&d, 600).unwrap();
            let m = train.input_dim();
            let mut mean0 = vec![0.0; m];
            let mut mean1 = vec![0.0; m];
            let counts = train.class_counts();
            for i in 0..train.len() {
                let target = if train.class_of(i) == 0 { &mut mean0 } else { &mut mean1 };
                for (t, &v) in target.iter_mut().zip(train.samples().row(i)) {
                    *t += v;
                }
            }
            for v in &mut mean0 {
                *v /= counts[0] as f64;
            }
            for v in &mut mean1 {
                *v /= counts[1] as f64;
            }
            let w: Vec<f64> = mean1.iter().zip(&mean0).map(|(a, b)| a - b).collect();
            let proj = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let thresh = 0.5 * (proj(&mean0) + proj(&mean1));
            let mut correct = 0;
            for i in 0..test.len() {
                let pred = if proj(test.samples().row(i)) > thresh { 1 } else { 0 };
                if pred == test.class_of(i) {
                    correct += 1;
                }
            }
            correct as f64 / test.len() as f64
        };

        assert!(mean_classifier_acc(6.0) > 0.95, "separated clusters should be easy");
        let chance = mean_classifier_acc(0.0);
        assert!(chance < 0.65, "zero separation should be near chance, got {chance}");

        let d = synth_gaussian_clusters(100, 5, 3, 4.0).unwrap();
        let (lo, hi) =
            d.samples().data().iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn subsample_uses_largest_remainder_quotas() {
        // Class counts 5/3/2; asking for 6 gives exact quotas 3.0/1.8/1.2,
        // so largest-remainder assigns 3/2/1.
        let mut samples = Matrix::zeros(10, 3);
        for i in 0..10 {
            samples.set(i, 0, i as f64 / 10.0);
        }
        let mut labels = Matrix::zeros(10, 3);
        for i in 0..10 {
            let class = if i < 5 {
                0
            } else if i < 8 {
                1
            } else {
                2
            };
            labels.set(i, class, 1.0);
        }
        let d = Dataset::new(samples, labels, Domain::ContinuousUnit, "quota").unwrap();
        let sub = subsample(&d, 6, 99).unwrap();
        assert_eq!(sub.class_counts(), vec![3, 2, 1]);

        let again = subsample(&d, 6, 99).unwrap();
        assert_eq!(again.samples().data(), sub.samples().data());

        assert!(subsample(&d, 11, 0).is_err());
        let full = subsample(&d, 10, 0).unwrap();
        assert_eq!(full.samples().data(), d.samples().data());
    }

    #[test]
    fn split_respects_fraction_and_order() {
        let d = synth_sparse_binary(100, 16, 5, 0.1).unwrap();
        let (train, test) =
            split(&d, SplitSpec { train_fraction: 0.7, seed: 1, shuffle: false }).unwrap();
        assert_eq!(train.len(), 70);
        assert_eq!(test.len(), 30);
        assert_eq!(train.samples().row(0), d.samples().row(0));

        let (strain, _) =
            split(&d, SplitSpec { train_fraction: 0.7, seed: 1, shuffle: true }).unwrap();
        assert_eq!(strain.len(), 70);
        // The generator alternates classes, so both shuffled halves stay mixed.
        let counts = strain.class_counts();
        assert!(counts.iter().all(|&c| c > 20), "shuffled split badly skewed: {counts:?}");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = synth_sparse_binary(50, 16, 1, 0.1).unwrap();
        let b = synth_sparse_binary(50, 16, 1, 0.1).unwrap();
        let c = synth_sparse_binary(50, 16, 2, 0.1).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }

    #[test]
    fn dataset_spec_round_trips_through_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let spec =
            DatasetSpec::SparseBinary { n_train: 30, n_test: 10, m: 16, seed: 3, flip_rate: 0.05 };
        let (train, _) = spec.load().unwrap();
        save_synth_idx(
            &train,
            &spec,
            &dir.path().join("img"),
            &dir.path().join("lbl"),
            &dir.path().join("sidecar.json"),
        )
        .unwrap();
        let loaded_spec = load_sidecar(&dir.path().join("sidecar.json")).unwrap();
        assert_eq!(loaded_spec, spec);
        let (train2, _) = loaded_spec.load().unwrap();
        assert_eq!(train2.samples().data(), train.samples().data());

        // The binary values survive the byte quantization exactly.
        let reloaded = load_idx(&dir.path().join("img"), &dir.path().join("lbl")).unwrap();
        assert_eq!(reloaded.samples().data(), train.samples().data());
    }

    #[test]
    fn one_hot_validation_rejects_bad_rows() {
        let samples = Matrix::zeros(2, 3);
        let labels = Matrix::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert!(Dataset::new(samples, labels, Domain::ContinuousUnit, "bad").is_err());

        let samples = Matrix::from_rows(&[vec![1.5, 0.0]]).unwrap();
        let labels = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(Dataset::new(samples, labels, Domain::ContinuousUnit, "oob").is_err());

        let samples = Matrix::from_rows(&[vec![0.5, 0.0]]).unwrap();
        let labels = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(Dataset::new(samples, labels, Domain::Binary, "notbinary").is_err());
    }
}
