//! MLP encoders: construction, NT-Xent pretraining, the shadow bank and
//! checkpoints.
//!
//! `encode` returns the unit-normalized output of the network head (by
//! default batchnorm then ReLU after the final dense layer), so every encoder
//! emits features on the same scale regardless of architecture.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, LayerLayout};
use crate::data::{augment_matrix, AugmentPolicy, LabeledDataset};
use crate::error::{Error, Result};
use crate::math::loss::nt_xent;
use crate::math::{Activation, BatchNorm, Dense, Layer, Matrix, Mode, Network, OptimConfig, SgdMomentum};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub d_f: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputHead,
}

/// What follows the final dense layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    /// BatchNorm then ReLU, giving non-negative features.
    #[default]
    BnRelu,
}

impl ArchSpec {
    pub fn new(hidden_widths: Vec<usize>, activation: Activation, d_f: usize, seed: u64) -> Self {
        Self {
            hidden_widths,
            activation,
            d_f,
            seed,
            output: OutputHead::default(),
        }
    }

    pub fn with_output(self, output: OutputHead) -> Self {
        Self { output, ..self }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidArgument("architecture needs a hidden layer".into()));
        }
        if let Some(w) = self.hidden_widths.iter().find(|&&w| w < 4) {
            return Err(Error::InvalidArgument(format!("hidden width {w} < 4")));
        }
        if self.d_f == 0 {
            return Err(Error::InvalidArgument("d_f must be positive".into()));
        }
        self.activation.validate()
    }

    /// Default architecture pool for shadow encoders.
    pub fn default_pool(d_f: usize) -> Vec<ArchSpec> {
        vec![
            ArchSpec::new(vec![64, 64], Activation::leaky(), d_f, 0),
            ArchSpec::new(vec![96], Activation::leaky(), d_f, 0),
            ArchSpec::new(vec![64, 64], Activation::Relu, d_f, 0),
            ArchSpec::new(vec![128, 48], Activation::Tanh, d_f, 0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub algorithm: String,
    pub dataset: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub arch: ArchSpec,
    pub net: Network,
    pub d_in: usize,
    pub d_f: usize,
    pub meta: TrainMeta,
}

/// Dense → BN → activation per hidden width, then a final dense to `d_f`.
pub fn init_encoder(spec: &ArchSpec, d_in: usize) -> Result<EncoderModel> {
    spec.validate()?;
    if d_in == 0 {
        return Err(Error::InvalidArgument("d_in must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::new();
    let mut prev = d_in;
    for &w in &spec.hidden_widths {
        layers.push(Layer::Dense(Dense::init(prev, w, &mut rng)));
        layers.push(Layer::BatchNorm(BatchNorm::new(w)));
        layers.push(Layer::Activation(spec.activation));
        prev = w;
    }
    layers.push(Layer::Dense(Dense::init(prev, spec.d_f, &mut rng)));
    if spec.output == OutputHead::BnRelu {
        layers.push(Layer::BatchNorm(BatchNorm::new(spec.d_f)));
        layers.push(Layer::Activation(Activation::Relu));
    }
    Ok(EncoderModel {
        arch: spec.clone(),
        net: Network::new(layers),
        d_in,
        d_f: spec.d_f,
        meta: TrainMeta {
            algorithm: "init".into(),
            dataset: String::new(),
            seed: spec.seed,
        },
    })
}

pub(crate) fn normalize_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

impl EncoderModel {
    /// Eval-mode features of every row, unit-normalized.
    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in {
            return Err(Error::dims("encoder input", self.d_in, x.cols()));
        }
        let mut f = self.net.infer(x)?;
        normalize_rows(&mut f);
        Ok(f)
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&Matrix::row_vector(x))?.into_data())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = EncoderHeader {
            arch: self.arch.clone(),
            d_in: self.d_in,
            d_f: self.d_f,
            meta: self.meta.clone(),
            layout: checkpoint::network_layout(&self.net),
        };
        checkpoint::write(path, checkpoint::ENCODER_MAGIC, &header, &checkpoint::network_tensors(&self.net))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, tensors): (EncoderHeader, _) = checkpoint::read(path, checkpoint::ENCODER_MAGIC)?;
        let net = checkpoint::network_from_parts(&h.layout, tensors)?;
        if net.input_dim() != Some(h.d_in) || net.output_dim() != Some(h.d_f) {
            return Err(Error::Format("encoder header dims disagree with layers".into()));
        }
        Ok(Self {
            arch: h.arch,
            net,
            d_in: h.d_in,
            d_f: h.d_f,
            meta: h.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderHeader {
    arch: ArchSpec,
    d_in: usize,
    d_f: usize,
    meta: TrainMeta,
    layout: Vec<LayerLayout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub tau: f64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            tau: 0.5,
            optim: OptimConfig::with_lr(0.05),
        }
    }
}

/// Minimizes NT-Xent over pairs of augmented views. Returns the mean loss of
/// each epoch. With a [`OutputHead::BnRelu`] head the loss sees the batchnorm
/// output before rectification.
pub fn pretrain_contrastive(
    enc: &mut EncoderModel,
    ds: &LabeledDataset,
    policy: &AugmentPolicy,
    hyper: &PretrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if hyper.batch < 4 {
        return Err(Error::InvalidArgument(format!("pretrain batch {} < 4", hyper.batch)));
    }
    if ds.dim() != enc.d_in {
        return Err(Error::dims("pretrain dataset", enc.d_in, ds.dim()));
    }
    policy.validate()?;
    let mut opt = SgdMomentum::new(hyper.optim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut layers = std::mem::take(&mut enc.net).into_layers();
    let relu = (enc.arch.output == OutputHead::BnRelu).then(|| layers.pop()).flatten();
    enc.net = Network::new(layers);
    let result = contrastive_epochs(enc, ds, policy, hyper, &mut opt, &mut rng, &mut order, &mut history);
    if let Some(relu) = relu {
        let mut layers = std::mem::take(&mut enc.net).into_layers();
        layers.push(relu);
        enc.net = Network::new(layers);
    }
    result?;
    enc.meta = TrainMeta {
        algorithm: "nt-xent".into(),
        dataset: ds.name.clone(),
        seed,
    };
    Ok(history)
}

#[allow(clippy::too_many_arguments)]
fn contrastive_epochs(
    enc: &mut EncoderModel,
    ds: &LabeledDataset,
    policy: &AugmentPolicy,
    hyper: &PretrainConfig,
    opt: &mut SgdMomentum,
    rng: &mut ChaCha8Rng,
    order: &mut [usize],
    history: &mut Vec<f64>,
) -> Result<()> {
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hyper.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let x = ds.x.select_rows(chunk);
            let a = augment_matrix(&x, policy, rng);
            let b = augment_matrix(&x, policy, rng);
            let z = enc.net.forward(&a.vstack(&b)?, Mode::Train)?;
            let (loss, grad) = nt_xent(&z, hyper.tau)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("nt-xent loss {loss} at epoch {epoch}")));
            }
            let (grads, _) = enc.net.backward(&grad)?;
            opt.step(enc.net.params_mut(), &grads, epoch)
                .map_err(|e| Error::Divergence(e.to_string()))?;
            total += loss;
            batches += 1;
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEntry {
    pub encoder: EncoderModel,
    /// Index into [`ShadowBank::datasets`].
    pub dataset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowBank {
    pub entries: Vec<ShadowEntry>,
    pub datasets: Vec<LabeledDataset>,
}

impl ShadowBank {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_f(&self) -> Option<usize> {
        self.entries.first().map(|e| e.encoder.d_f)
    }

    pub fn d_in(&self) -> Option<usize> {
        self.entries.first().map(|e| e.encoder.d_in)
    }

    pub fn dataset_of(&self, m: usize) -> &LabeledDataset {
        &self.datasets[self.entries[m].dataset]
    }

    /// Splits off the last `n` entries, e.g. as a held-out evaluation bank.
    pub fn split_off(&mut self, n: usize) -> ShadowBank {
        let at = self.entries.len().saturating_sub(n);
        ShadowBank {
            entries: self.entries.split_off(at),
            datasets: self.datasets.clone(),
        }
    }

    /// ≥ 2 datasets and ≥ 2 architectures represented.
    pub fn is_diverse(&self) -> bool {
        let mut ds: Vec<usize> = self.entries.iter().map(|e| e.dataset).collect();
        ds.sort_unstable();
        ds.dedup();
        let mut archs: Vec<String> = self
            .entries
            .iter()
            .map(|e| serde_json::to_string(&e.encoder.arch.with_seed(0)).expect("serializable"))
            .collect();
        archs.sort();
        archs.dedup();
        ds.len() >= 2 && archs.len() >= 2
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = BankManifest {
            datasets: Vec::new(),
            entries: Vec::new(),
        };
        for (i, ds) in self.datasets.iter().enumerate() {
            let file = format!("dataset-{i}.csv");
            crate::data::export_csv(ds, &dir.join(&file))?;
            manifest.datasets.push(ManifestDataset {
                name: ds.name.clone(),
                seed: ds.seed,
                classes: ds.classes,
                file,
            });
        }
        for (m, e) in self.entries.iter().enumerate() {
            let file = format!("shadow-{m:03}.enc");
            e.encoder.save(&dir.join(&file))?;
            manifest.entries.push(ManifestEntry {
                file,
                dataset: e.dataset,
            });
        }
        fs::write(dir.join("bank.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: BankManifest = serde_json::from_slice(&fs::read(dir.join("bank.json"))?)
            .map_err(|e| Error::Format(format!("bank manifest: {e}")))?;
        let mut datasets = Vec::new();
        for d in &manifest.datasets {
            let mut ds = crate::data::load_csv(&dir.join(&d.file))?;
            ds.name = d.name.clone();
            ds.seed = d.seed;
            ds.classes = d.classes;
            datasets.push(ds);
        }
        let mut entries = Vec::new();
        for e in &manifest.entries {
            if e.dataset >= datasets.len() {
                return Err(Error::Format(format!("bank entry references dataset {}", e.dataset)));
            }
            entries.push(ShadowEntry {
                encoder: EncoderModel::load(&dir.join(&e.file))?,
                dataset: e.dataset,
            });
        }
        Ok(Self { entries, datasets })
    }
}

#[derive(Serialize, Deserialize)]
struct BankManifest {
    datasets: Vec<ManifestDataset>,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestDataset {
    name: String,
    seed: u64,
    classes: usize,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    dataset: usize,
}

/// Entry `m` uses pair `m mod (D·A)` of the dataset-fastest enumeration of
/// (dataset, arch) pairs and is pretrained with its own derived seed.
pub fn build_shadow_bank(
    m: usize,
    datasets: Vec<LabeledDataset>,
    arch_pool: &[ArchSpec],
    policy: &AugmentPolicy,
    hyper: &PretrainConfig,
    seed: u64,
) -> Result<ShadowBank> {
    if m < 4 {
        return Err(Error::InvalidArgument(format!("shadow bank needs M >= 4, got {m}")));
    }
    if datasets.len() < 2 {
        return Err(Error::InvalidArgument("shadow bank needs at least 2 datasets".into()));
    }
    if arch_pool.is_empty() {
        return Err(Error::InvalidArgument("empty architecture pool".into()));
    }
    let d = datasets.len();
    let d_in = datasets[0].dim();
    if datasets.iter().any(|ds| ds.dim() != d_in) {
        return Err(Error::InvalidArgument("shadow datasets disagree on d_in".into()));
    }
    let entries: Vec<ShadowEntry> = (0..m)
        .into_par_iter()
        .map(|i| {
            let pair = i % (d * arch_pool.len());
            let (ds_idx, arch_idx) = (pair % d, pair / d);
            let arch = arch_pool[arch_idx].with_seed(derive_seed(seed, "shadow-init", i as u64));
            let mut enc = init_encoder(&arch, d_in)?;
            pretrain_contrastive(
                &mut enc,
                &datasets[ds_idx],
                policy,
                hyper,
                derive_seed(seed, "shadow-train", i as u64),
            )?;
            Ok(ShadowEntry {
                encoder: enc,
                dataset: ds_idx,
            })
        })
        .collect::<Result<_>>()?;
    let bank = ShadowBank { entries, datasets };
    if !bank.is_diverse() {
        return Err(Error::InvalidArgument(
            "shadow bank covers fewer than 2 datasets or 2 architectures; raise M or the pool size".into(),
        ));
    }
    Ok(bank)
}
