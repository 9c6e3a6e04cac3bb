//! Binary meta-classifiers that tell which defense, if any, perturbed a
//! feature vector.
//!
//! A classifier sees `[P·x, f, sig(f)]`: a fixed random projection of the
//! query sample, the returned features, and a five-value digit signature of
//! the features (fraction of exact zeros, and for `j = 1..4` the mean of
//! `cos(2π·10^j·fᵢ)` over nonzero entries). The signature makes rounding and
//! sparsification visible at any feature scale; the first network layer is a
//! batchnorm so the three blocks enter on comparable scales.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, LayerLayout};
use crate::data::{augment, AugmentPolicy};
use crate::defenses::DefenseKind;
use crate::encoders::ShadowBank;
use crate::error::{Error, Result};
use crate::math::loss::{bce_with_logits, sigmoid};
use crate::math::{Activation, BatchNorm, Dense, Layer, Matrix, Mode, Network, OptimConfig, SgdMomentum};
use crate::rng::derive_seed;

pub const SIGNATURE_LEN: usize = 5;

pub fn digit_signature(f: &[f64]) -> [f64; SIGNATURE_LEN] {
    let nonzero = f.iter().filter(|v| **v != 0.0).count();
    let mut out = [0.0; SIGNATURE_LEN];
    out[0] = 1.0 - nonzero as f64 / f.len().max(1) as f64;
    for (j, slot) in out.iter_mut().enumerate().skip(1) {
        let scale = 2.0 * std::f64::consts::PI * 10f64.powi(j as i32);
        let s: f64 = f.iter().filter(|v| **v != 0.0).map(|v| (scale * v).cos()).sum();
        *slot = s / nonzero.max(1) as f64;
    }
    out
}

/// Fixed seeded `d_in × p` projection with `N(0, 1/d_in)` entries.
pub fn sample_projection(d_in: usize, p: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = 1.0 / (d_in as f64).sqrt();
    let data = (0..d_in * p)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    Matrix::from_vec(d_in, p, data).expect("sized")
}

/// `[P·x, f, sig(f)]` for every row pair.
pub fn meta_inputs(projection: &Matrix, x: &Matrix, f: &Matrix) -> Result<Matrix> {
    if x.rows() != f.rows() {
        return Err(Error::dims("meta input rows", x.rows(), f.rows()));
    }
    let px = x.matmul(projection)?;
    let p = projection.cols();
    let width = p + f.cols() + SIGNATURE_LEN;
    let mut out = Matrix::zeros(x.rows(), width);
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        row[..p].copy_from_slice(px.row(r));
        row[p..p + f.cols()].copy_from_slice(f.row(r));
        row[p + f.cols()..].copy_from_slice(&digit_signature(f.row(r)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub n_per_encoder: usize,
    pub projection_dim: usize,
    /// Label-0 rows perturbed by the other strategies in the set, besides clean ones.
    pub hard_negatives: bool,
    /// Probability that a sampled shadow input is augmented first.
    pub augment_prob: f64,
    pub augment: AugmentPolicy,
    pub epochs: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub holdout_fraction: f64,
    pub threshold: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            n_per_encoder: 64,
            projection_dim: 16,
            hard_negatives: true,
            augment_prob: 0.5,
            augment: AugmentPolicy::default(),
            epochs: 50,
            batch: 64,
            optim: OptimConfig::with_lr(0.01),
            holdout_fraction: 0.2,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDataset {
    pub inputs: Matrix,
    pub labels: Vec<f64>,
}

impl DetectionDataset {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1.0).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

/// Even positions of a dataset feed detection, odd positions recovery.
pub(crate) fn pool(len: usize, parity: usize) -> Vec<usize> {
    (parity..len).step_by(2).collect()
}

/// Draws `n` inputs for shadow entry `m` from the given pool, each augmented
/// with probability `augment_prob`.
pub(crate) fn sample_inputs<R: Rng + ?Sized>(
    bank: &ShadowBank,
    m: usize,
    n: usize,
    parity: usize,
    augment_prob: f64,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Matrix {
    let ds = bank.dataset_of(m);
    let candidates = pool(ds.len(), parity);
    let mut x = Matrix::zeros(n, ds.dim());
    for r in 0..n {
        let i = candidates[rng.random_range(0..candidates.len())];
        let row = if rng.random::<f64>() < augment_prob {
            augment(ds.sample(i), policy, rng)
        } else {
            ds.sample(i).to_vec()
        };
        x.row_mut(r).copy_from_slice(&row);
    }
    x
}

/// Rows for classifier `k` of `strategies`: per shadow entry, `n_per_encoder`
/// positives `(x, E^k(x))` and as many negatives. Negatives are clean
/// `(x, E(x))`, or with hard negatives half clean and half spread over the
/// other strategies.
pub fn build_detection_dataset<R: Rng + ?Sized>(
    bank: &ShadowBank,
    strategies: &[DefenseKind],
    k: usize,
    projection: &Matrix,
    cfg: &DetectionConfig,
    rng: &mut R,
) -> Result<DetectionDataset> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("empty shadow bank".into()));
    }
    if k >= strategies.len() {
        return Err(Error::InvalidArgument(format!("defense index {k} out of range")));
    }
    let n = cfg.n_per_encoder;
    let others: Vec<&DefenseKind> = if cfg.hard_negatives {
        strategies.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, s)| s).collect()
    } else {
        Vec::new()
    };
    let mut pos_rows = Vec::new();
    let mut neg_rows = Vec::new();
    for (m, entry) in bank.entries.iter().enumerate() {
        let x = sample_inputs(bank, m, n, 0, cfg.augment_prob, &cfg.augment, rng);
        let clean = entry.encoder.encode_batch(&x)?;
        let mut perturbed = Matrix::zeros(n, clean.cols());
        let mut negative = clean.clone();
        let half = if others.is_empty() { n } else { n / 2 };
        for r in 0..n {
            let p = strategies[k].apply(clean.row(r), rng)?;
            perturbed.row_mut(r).copy_from_slice(&p);
            if r >= half {
                let o = others[(r - half) * others.len() / (n - half)];
                let q = o.apply(clean.row(r), rng)?;
                negative.row_mut(r).copy_from_slice(&q);
            }
        }
        pos_rows.push(meta_inputs(projection, &x, &perturbed)?);
        neg_rows.push(meta_inputs(projection, &x, &negative)?);
    }
    let mut inputs = Matrix::zeros(0, 0);
    for m in pos_rows.iter().chain(&neg_rows) {
        inputs = inputs.vstack(m)?;
    }
    let n_pos: usize = pos_rows.iter().map(Matrix::rows).sum();
    let mut labels = vec![1.0; n_pos];
    labels.resize(inputs.rows(), 0.0);
    Ok(DetectionDataset { inputs, labels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaClassifier {
    pub defense_index: usize,
    pub defense: DefenseKind,
    pub net: Network,
    pub projection: Matrix,
    pub d_f: usize,
    pub held_out_accuracy: f64,
}

impl MetaClassifier {
    pub fn logits(&self, x: &Matrix, f: &Matrix) -> Result<Vec<f64>> {
        if f.cols() != self.d_f {
            return Err(Error::dims("detector feature dim", self.d_f, f.cols()));
        }
        if x.cols() != self.projection.rows() {
            return Err(Error::dims("detector sample dim", self.projection.rows(), x.cols()));
        }
        Ok(self.net.infer(&meta_inputs(&self.projection, x, f)?)?.into_data())
    }

    /// Probabilities in `[0,1]` that each row was perturbed by this defense.
    pub fn scores(&self, x: &Matrix, f: &Matrix) -> Result<Vec<f64>> {
        Ok(self.logits(x, f)?.into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ClassifierHeader {
            defense_index: self.defense_index,
            defense: self.defense.clone(),
            d_in: self.projection.rows(),
            projection_dim: self.projection.cols(),
            d_f: self.d_f,
            held_out_accuracy: self.held_out_accuracy,
            layout: checkpoint::network_layout(&self.net),
        };
        let mut tensors = vec![self.projection.data()];
        tensors.extend(checkpoint::network_tensors(&self.net));
        checkpoint::write(path, checkpoint::CLASSIFIER_MAGIC, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut tensors): (ClassifierHeader, _) = checkpoint::read(path, checkpoint::CLASSIFIER_MAGIC)?;
        if tensors.is_empty() {
            return Err(Error::Format("classifier file has no projection".into()));
        }
        let projection = Matrix::from_vec(h.d_in, h.projection_dim, tensors.remove(0))
            .map_err(|_| Error::Format("projection shape".into()))?;
        Ok(Self {
            defense_index: h.defense_index,
            defense: h.defense,
            net: checkpoint::network_from_parts(&h.layout, tensors)?,
            projection,
            d_f: h.d_f,
            held_out_accuracy: h.held_out_accuracy,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierHeader {
    defense_index: usize,
    defense: DefenseKind,
    d_in: usize,
    projection_dim: usize,
    d_f: usize,
    held_out_accuracy: f64,
    layout: Vec<LayerLayout>,
}

fn classifier_net(d_meta: usize, rng: &mut ChaCha8Rng) -> Network {
    Network::new(vec![
        Layer::BatchNorm(BatchNorm::new(d_meta)),
        Layer::Dense(Dense::init(d_meta, 256, rng)),
        Layer::BatchNorm(BatchNorm::new(256)),
        Layer::Activation(Activation::leaky()),
        Layer::Dense(Dense::init(256, 64, rng)),
        Layer::BatchNorm(BatchNorm::new(64)),
        Layer::Activation(Activation::leaky()),
        Layer::Dense(Dense::init(64, 1, rng)),
    ])
}

/// BCE training on a seeded split; `held_out_accuracy` is measured on the
/// `holdout_fraction` of rows never trained on.
pub fn train_meta_classifier(
    k: usize,
    defense: DefenseKind,
    ds: &DetectionDataset,
    projection: &Matrix,
    cfg: &DetectionConfig,
    seed: u64,
) -> Result<MetaClassifier> {
    let n = ds.labels.len();
    let pos = ds.positives();
    if n < 4 || pos == 0 || pos == n {
        return Err(Error::InvalidArgument("detection dataset needs both labels".into()));
    }
    let ratio = pos as f64 / n as f64;
    if (ratio - 0.5).abs() > 0.05 {
        return Err(Error::InvalidArgument(format!(
            "detection dataset unbalanced: {pos} positives of {n}"
        )));
    }
    let d_meta = ds.inputs.cols();
    let d_f = d_meta - projection.cols() - SIGNATURE_LEN;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((n as f64) * cfg.holdout_fraction).round() as usize;
    let (hold, train) = order.split_at(n_hold.min(n - 2));
    let mut train = train.to_vec();

    let mut net = classifier_net(d_meta, &mut rng);
    let mut opt = SgdMomentum::new(cfg.optim)?;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let x = ds.inputs.select_rows(chunk);
            let y: Vec<f64> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let logits = net.forward(&x, Mode::Train)?;
            let (loss, grad) = bce_with_logits(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("bce loss {loss} at epoch {epoch}")));
            }
            let (grads, _) = net.backward(&grad)?;
            opt.step(net.params_mut(), &grads, epoch)
                .map_err(|e| Error::Divergence(e.to_string()))?;
        }
    }
    let held_out_accuracy = if hold.is_empty() {
        f64::NAN
    } else {
        let logits = net.infer(&ds.inputs.select_rows(hold))?;
        let correct = hold
            .iter()
            .zip(logits.data())
            .filter(|(&i, &z)| (z >= 0.0) == (ds.labels[i] == 1.0))
            .count();
        correct as f64 / hold.len() as f64
    };
    Ok(MetaClassifier {
        defense_index: k,
        defense,
        net,
        projection: projection.clone(),
        d_f,
        held_out_accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum Verdict {
    Clean { confidence: f64 },
    Defense { index: usize, confidence: f64 },
}

impl Verdict {
    pub fn defense_index(&self) -> Option<usize> {
        match self {
            Verdict::Clean { .. } => None,
            Verdict::Defense { index, .. } => Some(*index),
        }
    }

    /// Highest classifier score.
    pub fn confidence(&self) -> f64 {
        match self {
            Verdict::Clean { confidence } | Verdict::Defense { confidence, .. } => *confidence,
        }
    }
}

/// Picks a verdict from per-classifier scores: clean when every score is
/// below `threshold`, else the argmax (lowest index on ties).
pub fn verdict_from_scores(scores: &[f64], threshold: f64) -> Verdict {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let confidence = scores.get(best).copied().unwrap_or(0.0);
    if scores.is_empty() || confidence < threshold {
        Verdict::Clean { confidence }
    } else {
        Verdict::Defense {
            index: best,
            confidence,
        }
    }
}

/// Verdicts for a batch of `(x_q, f_q)` pairs. The argmax runs on logits so
/// saturated sigmoids do not tie.
pub fn detect_batch(classifiers: &[MetaClassifier], x: &Matrix, f: &Matrix, threshold: f64) -> Result<Vec<Verdict>> {
    let logits: Vec<Vec<f64>> = classifiers.iter().map(|c| c.logits(x, f)).collect::<Result<_>>()?;
    Ok((0..x.rows())
        .map(|r| {
            let row: Vec<f64> = logits.iter().map(|l| l[r]).collect();
            match verdict_from_scores(&row, f64::NEG_INFINITY) {
                Verdict::Defense { index, .. } => {
                    let confidence = sigmoid(row[index]);
                    if confidence < threshold {
                        Verdict::Clean { confidence }
                    } else {
                        Verdict::Defense { index, confidence }
                    }
                }
                Verdict::Clean { .. } => Verdict::Clean { confidence: 0.0 },
            }
        })
        .collect())
}

pub fn detect(classifiers: &[MetaClassifier], x_q: &[f64], f_q: &[f64], threshold: f64) -> Result<Verdict> {
    let v = detect_batch(classifiers, &Matrix::row_vector(x_q), &Matrix::row_vector(f_q), threshold)?;
    Ok(v[0])
}

/// One classifier per strategy, sharing one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub strategies: Vec<DefenseKind>,
    pub classifiers: Vec<MetaClassifier>,
    pub threshold: f64,
}

impl Detector {
    pub fn detect(&self, x_q: &[f64], f_q: &[f64]) -> Result<Verdict> {
        detect(&self.classifiers, x_q, f_q, self.threshold)
    }

    pub fn detect_batch(&self, x: &Matrix, f: &Matrix) -> Result<Vec<Verdict>> {
        detect_batch(&self.classifiers, x, f, self.threshold)
    }
}

pub fn train_detector(
    bank: &ShadowBank,
    strategies: &[DefenseKind],
    cfg: &DetectionConfig,
    seed: u64,
) -> Result<Detector> {
    if strategies.is_empty() {
        return Err(Error::InvalidArgument("no strategies to detect".into()));
    }
    let d_in = bank.d_in().ok_or_else(|| Error::InvalidArgument("empty shadow bank".into()))?;
    let projection = sample_projection(d_in, cfg.projection_dim, derive_seed(seed, "projection", 0));
    let classifiers = (0..strategies.len())
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "detection-rows", k as u64));
            let ds = build_detection_dataset(bank, strategies, k, &projection, cfg, &mut rng)?;
            train_meta_classifier(
                k,
                strategies[k].clone(),
                &ds,
                &projection,
                cfg,
                derive_seed(seed, "detection-train", k as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Detector {
        strategies: strategies.to_vec(),
        classifiers,
        threshold: cfg.threshold,
    })
}
