//! Generators mapping defense-perturbed features back to clean ones.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, LayerLayout};
use crate::data::AugmentPolicy;
use crate::defenses::DefenseKind;
use crate::detection::sample_inputs;
use crate::encoders::{normalize_rows, ShadowBank};
use crate::error::{Error, Result};
use crate::math::loss::{loss, loss_and_grad};
use crate::math::{Activation, BatchNorm, Dense, Layer, LossKind, Matrix, Mode, Network, OptimConfig, SgdMomentum};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryGenerator {
    pub defense_index: usize,
    pub defense: Option<DefenseKind>,
    pub net: Network,
    pub d_f: usize,
    pub blocks: usize,
    pub loss: LossKind,
}

/// `blocks` repetitions of BN → LeakyReLU → Dense(d_f, d_f); nothing follows
/// the last dense layer.
pub fn build_generator(d_f: usize, blocks: usize, seed: u64) -> Result<RecoveryGenerator> {
    if blocks == 0 {
        return Err(Error::InvalidArgument("generator needs at least one block".into()));
    }
    if d_f == 0 {
        return Err(Error::InvalidArgument("d_f must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(3 * blocks);
    for _ in 0..blocks {
        layers.push(Layer::BatchNorm(BatchNorm::new(d_f)));
        layers.push(Layer::Activation(Activation::leaky()));
        layers.push(Layer::Dense(Dense::init(d_f, d_f, &mut rng)));
    }
    Ok(RecoveryGenerator {
        defense_index: 0,
        defense: None,
        net: Network::new(layers),
        d_f,
        blocks,
        loss: LossKind::Cosine,
    })
}

impl RecoveryGenerator {
    /// Eval-mode forward pass, unit-normalized like encoder features.
    pub fn recover_batch(&self, f: &Matrix) -> Result<Matrix> {
        if f.cols() != self.d_f {
            return Err(Error::dims("generator input", self.d_f, f.cols()));
        }
        let mut out = self.net.infer(f)?;
        normalize_rows(&mut out);
        Ok(out)
    }

    pub fn recover(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.recover_batch(&Matrix::row_vector(f))?.into_data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = GeneratorHeader {
            defense_index: self.defense_index,
            defense: self.defense.clone(),
            d_f: self.d_f,
            blocks: self.blocks,
            loss: self.loss,
            layout: checkpoint::network_layout(&self.net),
        };
        checkpoint::write(path, checkpoint::GENERATOR_MAGIC, &header, &checkpoint::network_tensors(&self.net))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, tensors): (GeneratorHeader, _) = checkpoint::read(path, checkpoint::GENERATOR_MAGIC)?;
        Ok(Self {
            defense_index: h.defense_index,
            defense: h.defense,
            net: checkpoint::network_from_parts(&h.layout, tensors)?,
            d_f: h.d_f,
            blocks: h.blocks,
            loss: h.loss,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct GeneratorHeader {
    defense_index: usize,
    defense: Option<DefenseKind>,
    d_f: usize,
    blocks: usize,
    loss: LossKind,
    layout: Vec<LayerLayout>,
}

/// Paired `(E^k(x), E(x))` rows with the shadow entry each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryData {
    pub perturbed: Matrix,
    pub clean: Matrix,
    pub source: Vec<usize>,
}

impl RecoveryData {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> RecoveryData {
        RecoveryData {
            perturbed: self.perturbed.select_rows(idx),
            clean: self.clean.select_rows(idx),
            source: idx.iter().map(|&i| self.source[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub n_per_encoder: usize,
    pub blocks: usize,
    pub loss: LossKind,
    pub epochs: usize,
    pub batch: usize,
    pub optim: OptimConfig,
    pub augment_prob: f64,
    pub augment: AugmentPolicy,
    pub holdout_fraction: f64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            n_per_encoder: 128,
            blocks: 3,
            loss: LossKind::Cosine,
            epochs: 100,
            batch: 128,
            optim: OptimConfig::default(),
            augment_prob: 0.5,
            augment: AugmentPolicy::default(),
            holdout_fraction: 0.1,
        }
    }
}

/// Samples come from the odd positions of each shadow dataset, which the
/// detection builder never touches.
pub fn build_recovery_dataset<R: Rng + ?Sized>(
    bank: &ShadowBank,
    defense: &DefenseKind,
    cfg: &RecoveryConfig,
    rng: &mut R,
) -> Result<RecoveryData> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("empty shadow bank".into()));
    }
    let n = cfg.n_per_encoder;
    let d_f = bank.d_f().expect("nonempty");
    let mut perturbed = Matrix::zeros(0, d_f);
    let mut clean = Matrix::zeros(0, d_f);
    let mut source = Vec::new();
    for (m, entry) in bank.entries.iter().enumerate() {
        let x = sample_inputs(bank, m, n, 1, cfg.augment_prob, &cfg.augment, rng);
        let c = entry.encoder.encode_batch(&x)?;
        let mut p = Matrix::zeros(n, d_f);
        for r in 0..n {
            let v = defense.apply(c.row(r), rng)?;
            p.row_mut(r).copy_from_slice(&v);
        }
        perturbed = perturbed.vstack(&p)?;
        clean = clean.vstack(&c)?;
        source.extend(std::iter::repeat_n(m, n));
    }
    Ok(RecoveryData {
        perturbed,
        clean,
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTraining {
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
}

/// Minimizes `loss_kind` between `G(perturbed)` and `clean` with SGD momentum.
/// A seeded `holdout_fraction` of the pairs is kept aside to report held-out
/// loss before and after training.
pub fn train_generator(
    g: &mut RecoveryGenerator,
    data: &RecoveryData,
    loss_kind: LossKind,
    cfg: &RecoveryConfig,
    seed: u64,
) -> Result<GeneratorTraining> {
    if data.len() < 2 * cfg.batch.max(1) {
        return Err(Error::InvalidArgument(format!(
            "generator training needs at least {} pairs, got {}",
            2 * cfg.batch,
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((data.len() as f64) * cfg.holdout_fraction).round() as usize;
    let (hold, train) = order.split_at(n_hold);
    let hold = data.select(hold);
    let mut train = train.to_vec();

    let holdout_loss = |g: &RecoveryGenerator| -> Result<f64> {
        if hold.is_empty() {
            return Ok(f64::NAN);
        }
        loss(loss_kind, &g.recover_batch(&hold.perturbed)?, &hold.clean)
    };
    let initial = holdout_loss(g)?;
    let mut opt = SgdMomentum::new(cfg.optim)?;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut rng);
        for chunk in train.chunks(cfg.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = data.select(chunk);
            let out = g.net.forward(&batch.perturbed, Mode::Train)?;
            let (l, grad) = loss_and_grad(loss_kind, &out, &batch.clean)?;
            if !l.is_finite() {
                return Err(Error::Divergence(format!("generator loss {l} at epoch {epoch}")));
            }
            let (grads, _) = g.net.backward(&grad)?;
            opt.step(g.net.params_mut(), &grads, epoch)
                .map_err(|e| Error::Divergence(e.to_string()))?;
        }
    }
    g.loss = loss_kind;
    Ok(GeneratorTraining {
        initial_holdout_loss: initial,
        final_holdout_loss: holdout_loss(g)?,
    })
}

/// One generator per strategy.
pub fn train_generators(
    bank: &ShadowBank,
    strategies: &[DefenseKind],
    cfg: &RecoveryConfig,
    seed: u64,
) -> Result<Vec<RecoveryGenerator>> {
    let d_f = bank.d_f().ok_or_else(|| Error::InvalidArgument("empty shadow bank".into()))?;
    (0..strategies.len())
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "recovery-rows", k as u64));
            let data = build_recovery_dataset(bank, &strategies[k], cfg, &mut rng)?;
            let mut g = build_generator(d_f, cfg.blocks, derive_seed(seed, "generator-init", k as u64))?;
            g.defense_index = k;
            g.defense = Some(strategies[k].clone());
            train_generator(&mut g, &data, cfg.loss, cfg, derive_seed(seed, "generator-train", k as u64))?;
            Ok(g)
        })
        .collect()
}
