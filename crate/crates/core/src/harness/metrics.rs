//! Linear probes, detection accuracy, and the flat metrics record.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackReport;
use crate::data::{AugmentPolicy, LabeledDataset};
use crate::detection::{sample_inputs, Detector};
use crate::encoders::{EncoderModel, ShadowBank};
use crate::error::{Error, Result};
use crate::math::loss::softmax_cross_entropy;
use crate::math::{Dense, Layer, Matrix, Mode, Network, OptimConfig, SgdMomentum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    /// Standardize each feature with train-split mean and std first.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 64,
            optim: OptimConfig::with_lr(0.1),
            standardize: true,
        }
    }
}

/// Test accuracy of a multinomial logistic head trained on frozen features.
pub fn linear_probe(
    encoder: &EncoderModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    hyper: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let ftr = encoder.encode_batch(&train.x)?;
    let fte = encoder.encode_batch(&test.x)?;
    let classes = train.classes.max(test.classes);
    probe_features(&ftr, &train.y, &fte, &test.y, classes, hyper, seed)
}

/// [`linear_probe`] on precomputed features.
pub fn probe_features(
    train_f: &Matrix,
    train_y: &[usize],
    test_f: &Matrix,
    test_y: &[usize],
    classes: usize,
    hyper: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if train_f.rows() != train_y.len() || test_f.rows() != test_y.len() {
        return Err(Error::InvalidArgument("probe labels do not match features".into()));
    }
    if test_y.is_empty() {
        return Err(Error::InvalidArgument("empty probe test split".into()));
    }
    let mut seen = train_y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::InvalidArgument("probe train split has a single class".into()));
    }
    if let Some(&c) = train_y.iter().chain(test_y).find(|&&c| c >= classes) {
        return Err(Error::InvalidArgument(format!("label {c} out of range for {classes} classes")));
    }
    let (mut xtr, mut xte) = (train_f.clone(), test_f.clone());
    if hyper.standardize {
        standardize(&mut xtr, &mut xte);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = Network::new(vec![Layer::Dense(Dense::init(xtr.cols(), classes, &mut rng))]);
    let mut opt = SgdMomentum::new(hyper.optim)?;
    let mut order: Vec<usize> = (0..xtr.rows()).collect();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch.max(1)) {
            let logits = head.forward(&xtr.select_rows(chunk), Mode::Train)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("probe loss {loss} at epoch {epoch}")));
            }
            let (grads, _) = head.backward(&grad)?;
            opt.step(head.params_mut(), &grads, epoch)?;
        }
    }
    let logits = head.infer(&xte)?;
    let correct = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == test_y[r])
        .count();
    Ok(correct as f64 / test_y.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn standardize(train: &mut Matrix, test: &mut Matrix) {
    let n = train.rows().max(1) as f64;
    let mean: Vec<f64> = train.column_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; train.cols()];
    for row in train.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            var[j] += (v - mean[j]).powi(2) / n;
        }
    }
    let std: Vec<f64> = var.into_iter().map(|v| v.sqrt().max(1e-8)).collect();
    for m in [train, test] {
        for r in 0..m.rows() {
            for (j, v) in m.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[j]) / std[j];
            }
        }
    }
}

/// One row of [`detection_accuracy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    /// Strategy label, or `none` for clean inputs.
    pub defense: String,
    /// Fraction of inputs whose full verdict names the right strategy (or
    /// clean).
    pub verdict_accuracy: f64,
    /// Balanced accuracy of this strategy's own classifier on perturbed vs
    /// clean inputs; empty for the clean row.
    pub binary_accuracy: Option<f64>,
    pub median_confidence: f64,
    pub samples: usize,
}

/// Per-strategy accuracy on a held-out bank, plus a clean row.
pub fn detection_accuracy(
    detector: &Detector,
    held_out: &ShadowBank,
    n_per_encoder: usize,
    seed: u64,
) -> Result<Vec<DetectionRow>> {
    if held_out.is_empty() {
        return Err(Error::InvalidArgument("empty held-out bank".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let neutral = AugmentPolicy::neutral();
    let mut xs = Vec::new();
    let mut clean = Vec::new();
    for (m, entry) in held_out.entries.iter().enumerate() {
        let x = sample_inputs(held_out, m, n_per_encoder, 0, 0.0, &neutral, &mut rng);
        clean.push(entry.encoder.encode_batch(&x)?);
        xs.push(x);
    }
    let mut rows = Vec::new();
    for (k, strategy) in detector.strategies.iter().enumerate() {
        let (mut verdict_ok, mut pos_ok, mut neg_ok, mut total) = (0, 0, 0, 0);
        let mut conf = Vec::new();
        for (x, c) in xs.iter().zip(&clean) {
            let mut p = Matrix::zeros(c.rows(), c.cols());
            for r in 0..c.rows() {
                p.row_mut(r).copy_from_slice(&strategy.apply(c.row(r), &mut rng)?);
            }
            for v in detector.detect_batch(x, &p)? {
                verdict_ok += usize::from(v.defense_index() == Some(k));
                conf.push(v.confidence());
            }
            let classifier = &detector.classifiers[k];
            pos_ok += classifier.scores(x, &p)?.iter().filter(|&&s| s >= detector.threshold).count();
            neg_ok += classifier.scores(x, c)?.iter().filter(|&&s| s < detector.threshold).count();
            total += c.rows();
        }
        rows.push(DetectionRow {
            defense: strategy.label(),
            verdict_accuracy: verdict_ok as f64 / total as f64,
            binary_accuracy: Some((pos_ok + neg_ok) as f64 / (2 * total) as f64),
            median_confidence: median(&mut conf),
            samples: total,
        });
    }
    let (mut ok, mut total, mut conf) = (0, 0, Vec::new());
    for (x, c) in xs.iter().zip(&clean) {
        for v in detector.detect_batch(x, c)? {
            ok += usize::from(v.defense_index().is_none());
            conf.push(v.confidence());
            total += 1;
        }
    }
    rows.push(DetectionRow {
        defense: crate::attack::CLEAN_LABEL.into(),
        verdict_accuracy: ok as f64 / total as f64,
        binary_accuracy: None,
        median_confidence: median(&mut conf),
        samples: total,
    });
    Ok(rows)
}

/// Median of `v` (mean of the middle pair when even); NaN when empty.
pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Flat per-cell record behind every emitted number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub cell: String,
    pub defense: String,
    pub mode: String,
    pub besa: bool,
    pub probe_accuracy: Option<f64>,
    pub detection_accuracy: Option<f64>,
    pub recovery_mse: Option<f64>,
    pub recovery_cosine: Option<f64>,
    pub queries: u64,
    pub seed: u64,
    pub status: String,
}

impl MetricsRow {
    pub fn from_report(r: &AttackReport) -> Self {
        let defense = r.cell.split('/').next().unwrap_or_default().to_string();
        Self {
            cell: r.cell.clone(),
            defense,
            mode: r.mode.name().into(),
            besa: r.besa_enabled,
            probe_accuracy: r.probe_accuracy,
            detection_accuracy: r.detection_agreement,
            recovery_mse: r.recovery.map(|s| s.mse),
            recovery_cosine: r.recovery.map(|s| s.cosine),
            queries: r.queries_used,
            seed: r.seed,
            status: match &r.error {
                None => "ok".into(),
                Some(_) => "failed".into(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n_per: usize, classes: usize, sep: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Matrix::zeros(n_per * classes, 4);
        let mut y = Vec::new();
        for c in 0..classes {
            for i in 0..n_per {
                let r = c * n_per + i;
                for j in 0..4 {
                    let centre = if j == c % 4 { sep } else { 0.0 } + if c >= 4 { -sep } else { 0.0 };
                    x.set(r, j, centre + rng.random_range(-0.1..0.1));
                }
                y.push(c);
            }
        }
        (x, y)
    }

    #[test]
    fn separable_features_probe_perfectly() {
        let (xtr, ytr) = blobs(30, 4, 3.0, 1);
        let (xte, yte) = blobs(10, 4, 3.0, 2);
        let acc = probe_features(&xtr, &ytr, &xte, &yte, 4, &ProbeConfig::default(), 0).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn shuffled_labels_probe_at_chance() {
        let classes = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (xtr, mut ytr) = blobs(100, classes, 3.0, 4);
        let (xte, mut yte) = blobs(100, classes, 3.0, 5);
        ytr.shuffle(&mut rng);
        yte.shuffle(&mut rng);
        let acc = probe_features(&xtr, &ytr, &xte, &yte, classes, &ProbeConfig::default(), 0).unwrap();
        assert!((acc - 1.0 / classes as f64).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn single_class_split_is_rejected() {
        let x = Matrix::zeros(4, 2);
        let e = probe_features(&x, &[1, 1, 1, 1], &x, &[0, 1, 0, 1], 2, &ProbeConfig::default(), 0);
        assert!(e.is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
