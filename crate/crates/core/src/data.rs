//! Labeled datasets: synthetic Gaussian-blob worlds, augmentation, stratified
//! splits, and csv/idx ingestion.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
    pub name: String,
    pub seed: u64,
}

impl LabeledDataset {
    /// Validates labels and features. `classes` is `max(label) + 1`.
    pub fn new(x: Matrix, y: Vec<usize>, name: impl Into<String>, seed: u64) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::dims("dataset labels", x.rows(), y.len()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        let classes = y.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; classes];
        for &c in &y {
            counts[c] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidArgument(format!("class {c} has no samples")));
        }
        Ok(Self {
            x,
            y,
            classes,
            name: name.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    /// Rows `idx` as a new dataset; `classes` is preserved even if some class
    /// is absent from the subset.
    pub fn subset(&self, idx: &[usize], name: impl Into<String>) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            name: name.into(),
            seed: self.seed,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub classes: usize,
    pub n_per_class: usize,
    pub d_in: usize,
    pub spread: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            n_per_class: 200,
            d_in: 32,
            spread: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn generate(&self, name: &str, seed: u64) -> Result<LabeledDataset> {
        gen_cluster_dataset(self.classes, self.n_per_class, self.d_in, self.spread, seed)
            .map(|mut ds| {
                ds.name = name.to_string();
                ds
            })
    }
}

/// Gaussian blobs: class centers are random unit vectors scaled by 3, samples
/// add isotropic noise with standard deviation `spread`. Rows are shuffled.
pub fn gen_cluster_dataset(
    classes: usize,
    n_per_class: usize,
    d_in: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if d_in < 4 {
        return Err(Error::InvalidArgument(format!("d_in must be >= 4, got {d_in}")));
    }
    if n_per_class < 2 {
        return Err(Error::InvalidArgument("n_per_class must be >= 2".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| 3.0 * a / n).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..classes * n_per_class).map(|i| i % classes).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(order.len() * d_in);
    for &c in &order {
        for &m in &centers[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + spread * z);
        }
    }
    let x = Matrix::from_vec(order.len(), d_in, data)?;
    LabeledDataset::new(x, order, format!("blobs-{seed}"), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub jitter_sigma: f64,
    pub mask_prob: f64,
    pub scale_range: [f64; 2],
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.5,
            mask_prob: 0.1,
            scale_range: [0.8, 1.2],
        }
    }
}

impl AugmentPolicy {
    pub fn neutral() -> Self {
        Self {
            jitter_sigma: 0.0,
            mask_prob: 0.0,
            scale_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidArgument("jitter_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidArgument("mask_prob must be in [0,1]".into()));
        }
        if !(lo <= 1.0 && 1.0 <= hi && lo.is_finite() && hi.is_finite()) {
            return Err(Error::InvalidArgument("scale_range must satisfy lo <= 1 <= hi".into()));
        }
        Ok(())
    }
}

/// `x′ = scale·(x + ε)` with each coordinate zeroed with probability
/// `mask_prob`.
pub fn augment<R: Rng + ?Sized>(x: &[f64], policy: &AugmentPolicy, rng: &mut R) -> Vec<f64> {
    let [lo, hi] = policy.scale_range;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    x.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            let masked = rng.random::<f64>() < policy.mask_prob;
            if masked {
                0.0
            } else if policy.jitter_sigma == 0.0 {
                scale * v
            } else {
                scale * (v + policy.jitter_sigma * z)
            }
        })
        .collect()
}

pub fn augment_matrix<R: Rng + ?Sized>(x: &Matrix, policy: &AugmentPolicy, rng: &mut R) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let a = augment(x.row(r), policy, rng);
        out.row_mut(r).copy_from_slice(&a);
    }
    out
}

/// Class-stratified seeded split into `fractions.len()` disjoint parts whose
/// union is the whole dataset.
pub fn split(ds: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::InvalidArgument("fractions must be non-negative".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("fractions sum to {total}, expected 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for c in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let mut start = 0usize;
        let mut cum = 0.0;
        for (p, f) in fractions.iter().enumerate() {
            cum += f;
            let end = if p + 1 == fractions.len() {
                idx.len()
            } else {
                ((cum * n).round() as usize).min(idx.len())
            };
            parts[p].extend_from_slice(&idx[start..end.max(start)]);
            start = end.max(start);
        }
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(p, mut idx)| {
            if idx.is_empty() {
                return Err(Error::InvalidArgument(format!("split part {p} is empty")));
            }
            idx.shuffle(&mut rng);
            Ok(ds.subset(&idx, format!("{}/{p}", ds.name)))
        })
        .collect()
}

pub fn train_test_split(
    ds: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut parts = split(ds, &[train_fraction, 1.0 - train_fraction], seed)?;
    let test = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalFormat {
    Csv,
    Idx,
}

/// Loads a csv file (`label,f0,f1,...`) or an idx image file. For idx, the
/// labels file is the sibling whose name swaps `images-idx3` for
/// `labels-idx1`. Features end up in `[0,1]`: idx bytes are divided by 255,
/// csv values outside `[0,1]` are min-max scaled globally.
pub fn load_external(path: &Path, format: ExternalFormat) -> Result<LabeledDataset> {
    match format {
        ExternalFormat::Csv => {
            let mut ds = load_csv(path)?;
            scale_to_unit(&mut ds.x);
            Ok(ds)
        }
        ExternalFormat::Idx => {
            let labels = idx_labels_path(path)?;
            load_idx(path, &labels)
        }
    }
}

fn idx_labels_path(images: &Path) -> Result<PathBuf> {
    let name = images
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Format("idx path has no file name".into()))?;
    if !name.contains("images-idx3") {
        return Err(Error::Format(format!(
            "cannot derive labels file from `{name}` (expected `images-idx3` in the name)"
        )));
    }
    Ok(images.with_file_name(name.replace("images-idx3", "labels-idx1")))
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("external")
        .to_string()
}

/// Global min-max scaling, skipped when every value already lies in `[0,1]`.
fn scale_to_unit(x: &mut Matrix) {
    let data = x.data_mut();
    if data.iter().all(|v| (0.0..=1.0).contains(v)) {
        return;
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    data.iter_mut().for_each(|v| *v = (*v - lo) / span);
}

/// Reads `label,f0,f1,...` verbatim, without rescaling.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    let ok_header = headers.len() >= 2
        && &headers[0] == "label"
        && headers.iter().skip(1).enumerate().all(|(i, h)| h == format!("f{i}"));
    if !ok_header {
        return Err(Error::Format(format!(
            "{}: header must be `label,f0,f1,...`",
            path.display()
        )));
    }
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record.len() != d + 1 {
            return Err(Error::Format(format!(
                "{} row {}: expected {} features, got {}",
                path.display(),
                line + 1,
                d,
                record.len().saturating_sub(1)
            )));
        }
        let label: usize = record[0].trim().parse().map_err(|_| {
            Error::Format(format!("{} row {}: bad label `{}`", path.display(), line + 1, &record[0]))
        })?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("{} row {}: bad value `{field}`", path.display(), line + 1))
            })?;
            data.push(v);
        }
    }
    let n = labels.len();
    LabeledDataset::new(Matrix::from_vec(n, d, data)?, labels, dataset_name(path), 0)
}

/// Writes `label,f0,...` with shortest round-trip float formatting.
pub fn export_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for i in 0..ds.dim() {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for (r, &label) in ds.y.iter().enumerate() {
        out.push_str(&label.to_string());
        for v in ds.x.row(r) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{}: truncated idx header", path.display())))
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "{}: idx magic {magic:#010x}, expected {IDX_IMAGES:#010x}",
            images.display()
        )));
    }
    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!(
            "{}: idx magic {magic:#010x}, expected {IDX_LABELS:#010x}",
            labels.display()
        )));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let n_labels = be_u32(&lab, 4, labels)? as usize;
    if n != n_labels {
        return Err(Error::Format(format!("idx: {n} images but {n_labels} labels")));
    }
    let d = rows * cols;
    let pixels = img
        .get(16..16 + n * d)
        .ok_or_else(|| Error::Format(format!("{}: truncated image data", images.display())))?;
    let ys = lab
        .get(8..8 + n)
        .ok_or_else(|| Error::Format(format!("{}: truncated label data", labels.display())))?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let y = ys.iter().map(|&b| b as usize).collect();
    LabeledDataset::new(Matrix::from_vec(n, d, data)?, y, dataset_name(images), 0)
}
