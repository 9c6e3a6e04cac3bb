//! Surrogate stealing loops, optionally boosted by detect → recover.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, augment_matrix, AugmentPolicy, LabeledDataset};
use crate::defenses::{DefenseConfig, DefenseKind};
use crate::detection::{train_detector, DetectionConfig, Detector, MetaClassifier, Verdict};
use crate::encoders::{init_encoder, ArchSpec, EncoderModel, OutputHead, ShadowBank};
use crate::error::{Error, Result};
use crate::harness::metrics::{linear_probe, ProbeConfig};
use crate::math::loss::{cosine_loss, cosine_similarity, info_nce};
use crate::math::{Activation, Gradients, Matrix, Mode, OptimConfig, SgdMomentum};
use crate::recovery::{train_generators, RecoveryConfig, RecoveryGenerator};
use crate::rng::{derive_seed, SeedStreams, Stream};
use crate::service::{serve_tcp, Endpoint, QueryRecord, Service, StreamClient, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Plain,
    Augmented,
    Contrastive,
}

impl AttackMode {
    pub const ALL: [AttackMode; 3] = [AttackMode::Plain, AttackMode::Augmented, AttackMode::Contrastive];

    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Plain => "plain",
            AttackMode::Augmented => "augmented",
            AttackMode::Contrastive => "contrastive",
        }
    }
}

impl std::str::FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Cadence {
    /// Detect on the first query only and reuse the verdict.
    Once,
    /// Detect on queries 0, n, 2n, …; each verdict holds until the next.
    EveryN { n: u64 },
    PerQuery,
}

impl Cadence {
    pub fn validate(&self) -> Result<()> {
        match self {
            Cadence::EveryN { n: 0 } => Err(Error::InvalidArgument("every_n cadence needs n > 0".into())),
            _ => Ok(()),
        }
    }

    fn due(&self, query: u64) -> bool {
        match self {
            Cadence::Once => query == 0,
            Cadence::EveryN { n } => query % n == 0,
            Cadence::PerQuery => true,
        }
    }
}

/// Surrogate optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateTraining {
    pub optim: OptimConfig,
    pub batch: usize,
    pub max_epochs: usize,
    pub tau: f64,
    /// Convergence: relative loss improvement below `tolerance` over `window` epochs.
    pub tolerance: f64,
    pub window: usize,
    pub augment: AugmentPolicy,
}

impl Default for SurrogateTraining {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            batch: 128,
            max_epochs: 100,
            tau: 0.5,
            tolerance: 1e-4,
            window: 10,
            augment: AugmentPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub besa_enabled: bool,
    pub cadence: Cadence,
    pub query_budget: u64,
    pub surrogate: ArchSpec,
    pub query_dataset: String,
    pub seed: u64,
    #[serde(default)]
    pub training: SurrogateTraining,
    #[serde(default)]
    pub probe: ProbeConfig,
}

impl AttackConfig {
    pub fn new(mode: AttackMode, besa_enabled: bool, query_budget: u64, d_f: usize, seed: u64) -> Self {
        Self {
            mode,
            besa_enabled,
            cadence: Cadence::PerQuery,
            query_budget,
            surrogate: default_surrogate(d_f),
            query_dataset: "query".into(),
            seed,
            training: SurrogateTraining::default(),
            probe: ProbeConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_budget == 0 {
            return Err(Error::InvalidArgument("query budget must be > 0".into()));
        }
        if self.training.batch < 2 {
            return Err(Error::InvalidArgument("surrogate batch must be >= 2".into()));
        }
        if !(self.training.tau > 0.0) {
            return Err(Error::InvalidArgument("temperature must be > 0".into()));
        }
        self.cadence.validate()?;
        self.surrogate.validate()?;
        self.training.optim.validate()?;
        self.training.augment.validate()
    }
}

pub fn default_surrogate(d_f: usize) -> ArchSpec {
    ArchSpec::new(vec![64, 64], Activation::leaky(), d_f, 0).with_output(OutputHead::Linear)
}

/// Loss and parameter gradients of one surrogate batch, without updating.
///
/// plain: `−mean cos(S(x), f)`; augmented: the same over `x` stacked with an
/// augmented view of `x` sharing `f`; contrastive: InfoNCE of `S(x)` against
/// the batch targets.
pub fn surrogate_loss<R: Rng + ?Sized>(
    s: &mut EncoderModel,
    x: &Matrix,
    f: &Matrix,
    mode: AttackMode,
    hyper: &SurrogateTraining,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty surrogate batch".into()));
    }
    if x.rows() != f.rows() {
        return Err(Error::dims("surrogate targets", x.rows(), f.rows()));
    }
    let (inputs, targets) = match mode {
        AttackMode::Augmented => (x.vstack(&augment_matrix(x, &hyper.augment, rng))?, f.vstack(f)?),
        _ => (x.clone(), f.clone()),
    };
    let out = s.net.forward(&inputs, Mode::Train)?;
    let (loss, grad) = match mode {
        AttackMode::Contrastive => info_nce(&out, &targets, hyper.tau)?,
        _ => cosine_loss(&out, &targets)?,
    };
    let (grads, _) = s.net.backward(&grad)?;
    Ok((loss, grads))
}

/// One SGD-momentum step on a batch; returns the loss before the update.
pub fn surrogate_step<R: Rng + ?Sized>(
    s: &mut EncoderModel,
    opt: &mut SgdMomentum,
    x: &Matrix,
    f: &Matrix,
    mode: AttackMode,
    hyper: &SurrogateTraining,
    epoch: usize,
    rng: &mut R,
) -> Result<f64> {
    let (loss, grads) = surrogate_loss(s, x, f, mode, hyper, rng)?;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("surrogate loss {loss} at epoch {epoch}")));
    }
    opt.step(s.net.params_mut(), &grads, epoch)
        .map_err(|e| Error::Divergence(e.to_string()))?;
    Ok(loss)
}

/// The attacker's detector and per-strategy generators for one strategy set.
#[derive(Debug, Clone, PartialEq)]
pub struct BesaModels {
    pub detector: Detector,
    pub generators: Vec<RecoveryGenerator>,
}

#[derive(Serialize, Deserialize)]
struct BesaIndex {
    strategies: Vec<DefenseKind>,
    threshold: f64,
}

impl BesaModels {
    pub fn train(
        bank: &ShadowBank,
        strategies: &[DefenseKind],
        detection: &DetectionConfig,
        recovery: &RecoveryConfig,
        seed: u64,
    ) -> Result<Self> {
        let detector = train_detector(bank, strategies, detection, derive_seed(seed, "detector", 0))?;
        let generators = train_generators(bank, strategies, recovery, derive_seed(seed, "generators", 0))?;
        Ok(Self { detector, generators })
    }

    pub fn strategies(&self) -> &[DefenseKind] {
        &self.detector.strategies
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let index = BesaIndex {
            strategies: self.detector.strategies.clone(),
            threshold: self.detector.threshold,
        };
        fs::write(dir.join("besa.json"), serde_json::to_string_pretty(&index)?)?;
        for (k, c) in self.detector.classifiers.iter().enumerate() {
            c.save(&dir.join(format!("classifier-{k}.met")))?;
        }
        for (k, g) in self.generators.iter().enumerate() {
            g.save(&dir.join(format!("generator-{k}.gen")))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let index: BesaIndex = serde_json::from_str(&fs::read_to_string(dir.join("besa.json"))?)?;
        let k = index.strategies.len();
        let classifiers = (0..k)
            .map(|i| MetaClassifier::load(&dir.join(format!("classifier-{i}.met"))))
            .collect::<Result<Vec<_>>>()?;
        let generators = (0..k)
            .map(|i| RecoveryGenerator::load(&dir.join(format!("generator-{i}.gen"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            detector: Detector {
                strategies: index.strategies,
                classifiers,
                threshold: index.threshold,
            },
            generators,
        })
    }
}

/// How many rows went through detection and recovery.
#[derive(Debug, Default)]
pub struct CallCounters {
    pub detect: AtomicU64,
    pub recover: AtomicU64,
}

impl CallCounters {
    pub fn detect_calls(&self) -> u64 {
        self.detect.load(Ordering::SeqCst)
    }

    pub fn recover_calls(&self) -> u64 {
        self.recover.load(Ordering::SeqCst)
    }
}

/// Evaluation-only view: the attack itself never reads these.
#[derive(Debug, Clone, Copy, Default)]
pub struct Evaluation<'a> {
    pub target: Option<&'a EncoderModel>,
    pub probe_train: Option<&'a LabeledDataset>,
    pub probe_test: Option<&'a LabeledDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    /// Mean squared error and mean cosine of the features used for training
    /// against the clean target features.
    pub mse: f64,
    pub cosine: f64,
    /// The same for the features as returned by the service.
    pub raw_mse: f64,
    pub raw_cosine: f64,
}

pub const CLEAN_LABEL: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub cell: String,
    pub mode: AttackMode,
    pub besa_enabled: bool,
    pub cadence: Cadence,
    pub served_defense: String,
    pub strategies: Vec<String>,
    pub seed: u64,
    pub queries_used: u64,
    pub budget_exhausted: bool,
    pub skipped_zero_targets: u64,
    /// Per query: label of the strategy acted on, or `none`. Empty without BESA.
    pub verdicts: Vec<String>,
    /// Per query: the defense the service actually applied.
    pub ground_truth: Vec<String>,
    pub detection_agreement: Option<f64>,
    pub truth_in_strategy_set: Option<bool>,
    pub recovery: Option<RecoveryStats>,
    pub probe_accuracy: Option<f64>,
    pub baseline_probe_accuracy: Option<f64>,
    pub epochs: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub detect_calls: u64,
    pub recover_calls: u64,
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl AttackReport {
    fn empty(cfg: &AttackConfig) -> Self {
        Self {
            cell: String::new(),
            mode: cfg.mode,
            besa_enabled: cfg.besa_enabled,
            cadence: cfg.cadence,
            served_defense: String::new(),
            strategies: Vec::new(),
            seed: cfg.seed,
            queries_used: 0,
            budget_exhausted: false,
            skipped_zero_targets: 0,
            verdicts: Vec::new(),
            ground_truth: Vec::new(),
            detection_agreement: None,
            truth_in_strategy_set: None,
            recovery: None,
            probe_accuracy: None,
            baseline_probe_accuracy: None,
            epochs: 0,
            converged: false,
            final_loss: f64::NAN,
            detect_calls: 0,
            recover_calls: 0,
            error: None,
            wall_time_s: 0.0,
        }
    }

    /// Compares verdicts against the service audit log.
    pub fn attach_ground_truth(&mut self, audit: &[QueryRecord]) {
        self.ground_truth = audit.iter().map(|r| r.applied_defense.clone()).collect();
        if self.verdicts.is_empty() {
            return;
        }
        let agree = self
            .verdicts
            .iter()
            .zip(&self.ground_truth)
            .filter(|(v, t)| v == t)
            .count();
        self.detection_agreement = Some(agree as f64 / self.verdicts.len().max(1) as f64);
        let mut known = self.strategies.clone();
        known.push(CLEAN_LABEL.into());
        self.truth_in_strategy_set = Some(self.ground_truth.iter().all(|t| known.contains(t)));
    }
}

/// Outcome of [`run_besa`].
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub surrogate: EncoderModel,
    pub report: AttackReport,
}

fn has_signal(f: &[f64]) -> bool {
    f.iter().map(|v| v * v).sum::<f64>() > 1e-24
}

fn converged(history: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || history.len() <= window {
        return false;
    }
    let now = history[history.len() - 1];
    let then = history[history.len() - 1 - window];
    (then - now) / then.abs().max(1e-12) < tolerance
}

/// Steals a surrogate through `endpoint`.
///
/// Each epoch spends one pass over the query set (the first pass as-is, later
/// passes as augmented views) while budget remains, runs detection per the
/// cadence, swaps in `G_k*` outputs for flagged queries, and takes one
/// shuffled pass over every pair collected so far. Training stops once the
/// budget is spent and the loss has converged, or after `max_epochs`.
pub fn run_besa(
    cfg: &AttackConfig,
    endpoint: &mut dyn Endpoint,
    query_set: &LabeledDataset,
    besa: Option<&BesaModels>,
    counters: &CallCounters,
    eval: Evaluation<'_>,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if query_set.is_empty() {
        return Err(Error::InvalidArgument("empty query set".into()));
    }
    let besa = match (cfg.besa_enabled, besa) {
        (true, None) => return Err(Error::Config("BESA is enabled but no detector/generators were given".into())),
        (true, Some(b)) => Some(b),
        (false, _) => None,
    };
    if let Some(b) = besa {
        if b.generators.len() != b.detector.strategies.len() {
            return Err(Error::InvalidArgument("one generator per strategy required".into()));
        }
    }
    let started = Instant::now();
    let d_in = query_set.dim();
    let d_f = cfg.surrogate.d_f;
    let mut report = AttackReport::empty(cfg);
    report.strategies = besa
        .map(|b| b.strategies().iter().map(DefenseKind::label).collect())
        .unwrap_or_default();

    let mut surrogate = init_encoder(&cfg.surrogate, d_in)?;
    let mut opt = SgdMomentum::new(cfg.training.optim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "attack-loop", 0));

    let mut xs = Matrix::zeros(0, d_in);
    let mut fs_used = Matrix::zeros(0, d_f);
    let mut eval_rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut current: Option<Verdict> = None;
    let mut sent: u64 = 0;
    let mut history = Vec::new();
    let mut out_of_queries = false;

    for epoch in 0..cfg.training.max_epochs {
        if !out_of_queries {
            let start = sent;
            let want = (cfg.query_budget - sent).min(query_set.len() as u64);
            let mut queries = Matrix::zeros(want as usize, d_in);
            for j in 0..want {
                let q = start + j;
                let base = query_set.sample((q % query_set.len() as u64) as usize);
                let row = if q < query_set.len() as u64 {
                    base.to_vec()
                } else {
                    augment(base, &cfg.training.augment, &mut rng)
                };
                queries.row_mut(j as usize).copy_from_slice(&row);
            }
            let mut answered = Vec::with_capacity(want as usize);
            for (r, res) in endpoint.query_batch(&queries).into_iter().enumerate() {
                match res {
                    Ok(f) if f.len() == d_f => answered.push((r, f)),
                    Ok(f) => return Err(Error::dims("service features", d_f, f.len())),
                    Err(Error::BudgetExhausted) => {
                        report.budget_exhausted = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            sent += answered.len() as u64;
            if report.budget_exhausted || sent >= cfg.query_budget {
                out_of_queries = true;
            }
            let idx: Vec<usize> = answered.iter().map(|(r, _)| *r).collect();
            let qx = queries.select_rows(&idx);
            let mut qf = Matrix::zeros(idx.len(), d_f);
            for (i, (_, f)) in answered.iter().enumerate() {
                qf.row_mut(i).copy_from_slice(f);
            }
            let raw = qf.clone();
            if let Some(b) = besa {
                let verdicts = detect_per_cadence(b, &qx, &qf, start, cfg.cadence, &mut current, counters)?;
                recover_flagged(b, &mut qf, &verdicts, counters)?;
                report.verdicts.extend(verdicts.iter().map(|v| match v.defense_index() {
                    Some(k) => b.strategies()[k].label(),
                    None => CLEAN_LABEL.to_string(),
                }));
            }
            let mut keep = Vec::with_capacity(qf.rows());
            for r in 0..qf.rows() {
                if has_signal(qf.row(r)) {
                    keep.push(r);
                } else {
                    report.skipped_zero_targets += 1;
                }
            }
            if eval.target.is_some() {
                for r in 0..qx.rows() {
                    eval_rows.push((qx.row(r).to_vec(), raw.row(r).to_vec(), qf.row(r).to_vec()));
                }
            }
            xs = xs.vstack(&qx.select_rows(&keep))?;
            fs_used = fs_used.vstack(&qf.select_rows(&keep))?;
        }
        if xs.rows() < 2 {
            break;
        }
        let mut order: Vec<usize> = (0..xs.rows()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.training.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let (bx, bf) = (xs.select_rows(chunk), fs_used.select_rows(chunk));
            total += surrogate_step(&mut surrogate, &mut opt, &bx, &bf, cfg.mode, &cfg.training, epoch, &mut rng)?;
            batches += 1;
        }
        history.push(total / batches.max(1) as f64);
        report.epochs = epoch + 1;
        if out_of_queries && converged(&history, cfg.training.window, cfg.training.tolerance) {
            report.converged = true;
            break;
        }
    }

    report.queries_used = sent;
    report.final_loss = history.last().copied().unwrap_or(f64::NAN);
    report.detect_calls = counters.detect_calls();
    report.recover_calls = counters.recover_calls();
    if let Some(target) = eval.target {
        report.recovery = recovery_stats(target, &eval_rows)?;
    }
    if let (Some(train), Some(test)) = (eval.probe_train, eval.probe_test) {
        report.probe_accuracy = Some(linear_probe(
            &surrogate,
            train,
            test,
            &cfg.probe,
            derive_seed(cfg.seed, "probe", 0),
        )?);
    }
    surrogate.meta.algorithm = format!("steal-{}", cfg.mode.name());
    surrogate.meta.dataset = cfg.query_dataset.clone();
    surrogate.meta.seed = cfg.seed;
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(AttackOutcome { surrogate, report })
}

fn detect_per_cadence(
    besa: &BesaModels,
    x: &Matrix,
    f: &Matrix,
    first_query: u64,
    cadence: Cadence,
    current: &mut Option<Verdict>,
    counters: &CallCounters,
) -> Result<Vec<Verdict>> {
    let due: Vec<usize> = (0..x.rows()).filter(|&r| cadence.due(first_query + r as u64)).collect();
    let fresh = if due.is_empty() {
        Vec::new()
    } else {
        counters.detect.fetch_add(due.len() as u64, Ordering::SeqCst);
        besa.detector.detect_batch(&x.select_rows(&due), &f.select_rows(&due))?
    };
    let mut fresh = fresh.into_iter();
    let mut next_due = due.iter().peekable();
    let mut out = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        if next_due.peek() == Some(&&r) {
            next_due.next();
            *current = fresh.next();
        }
        out.push(current.unwrap_or(Verdict::Clean { confidence: 0.0 }));
    }
    Ok(out)
}

fn recover_flagged(besa: &BesaModels, f: &mut Matrix, verdicts: &[Verdict], counters: &CallCounters) -> Result<()> {
    for (k, g) in besa.generators.iter().enumerate() {
        let rows: Vec<usize> = (0..verdicts.len())
            .filter(|&r| verdicts[r].defense_index() == Some(k))
            .collect();
        if rows.is_empty() {
            continue;
        }
        counters.recover.fetch_add(rows.len() as u64, Ordering::SeqCst);
        let rec = g.recover_batch(&f.select_rows(&rows))?;
        for (i, &r) in rows.iter().enumerate() {
            f.row_mut(r).copy_from_slice(rec.row(i));
        }
    }
    Ok(())
}

fn recovery_stats(target: &EncoderModel, rows: &[(Vec<f64>, Vec<f64>, Vec<f64>)]) -> Result<Option<RecoveryStats>> {
    if rows.is_empty() {
        return Ok(None);
    }
    let d_in = rows[0].0.len();
    let mut x = Matrix::zeros(rows.len(), d_in);
    for (r, row) in rows.iter().enumerate() {
        x.row_mut(r).copy_from_slice(&row.0);
    }
    let clean = target.encode_batch(&x)?;
    let mut s = RecoveryStats {
        mse: 0.0,
        cosine: 0.0,
        raw_mse: 0.0,
        raw_cosine: 0.0,
    };
    let cos = |a: &[f64], b: &[f64]| cosine_similarity(a, b).unwrap_or(0.0);
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    for (r, (_, raw, used)) in rows.iter().enumerate() {
        let c = clean.row(r);
        s.mse += mse(used, c);
        s.cosine += cos(used, c);
        s.raw_mse += mse(raw, c);
        s.raw_cosine += cos(raw, c);
    }
    let n = rows.len() as f64;
    s.mse /= n;
    s.cosine /= n;
    s.raw_mse /= n;
    s.raw_cosine /= n;
    Ok(Some(s))
}

/// What the provider serves in a grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDefense {
    pub name: String,
    /// `None` serves clean features.
    pub served: Option<DefenseConfig>,
    /// Un-X cells: the attacker's strategy set excludes the served defense.
    pub unknown: bool,
}

impl GridDefense {
    /// `none`, a preset name (`topk`, `rd`, `np`, `h1`, `h2`, `h3`), or
    /// `un-<single preset>`.
    pub fn parse(name: &str, d_f: usize) -> Result<Self> {
        if name == "none" {
            return Ok(Self {
                name: name.into(),
                served: None,
                unknown: false,
            });
        }
        let (unknown, preset) = match name.strip_prefix("un-") {
            Some(p) => (true, p),
            None => (false, name),
        };
        let kind = DefenseKind::preset(preset, d_f).map_err(|e| Error::Config(e.to_string()))?;
        if unknown && matches!(kind, DefenseKind::Hybrid { .. }) {
            return Err(Error::Config(format!("unknown-defense cells take a single defense, got '{name}'")));
        }
        Ok(Self {
            name: name.into(),
            served: Some(DefenseConfig::fixed(kind)),
            unknown,
        })
    }

    /// The attacker's strategy set for this cell given the full set.
    pub fn attacker_strategies(&self, full: &[DefenseKind]) -> Vec<DefenseKind> {
        match (&self.served, self.unknown) {
            (Some(cfg), true) => full
                .iter()
                .filter(|k| !matches!(k, DefenseKind::Hybrid { .. }) && !cfg.strategies.contains(k))
                .cloned()
                .collect(),
            _ => full.to_vec(),
        }
    }

    pub fn label(&self) -> String {
        match &self.served {
            None => CLEAN_LABEL.into(),
            Some(cfg) => cfg.strategies.iter().map(DefenseKind::label).collect::<Vec<_>>().join("|"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub defenses: Vec<GridDefense>,
    pub modes: Vec<AttackMode>,
    pub besa: Vec<bool>,
    /// Replicate indices; each expands into per-cell seeds.
    pub seeds: Vec<u64>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.defenses.len() * self.modes.len() * self.besa.len() * self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every strategy set some BESA cell needs.
    pub fn required_strategy_sets(&self, full: &[DefenseKind]) -> Vec<Vec<DefenseKind>> {
        let mut sets: Vec<Vec<DefenseKind>> = Vec::new();
        if !self.besa.contains(&true) {
            return sets;
        }
        for d in &self.defenses {
            let s = d.attacker_strategies(full);
            if !sets.contains(&s) {
                sets.push(s);
            }
        }
        sets
    }
}

/// Shared inputs for every cell of a grid.
pub struct MatrixEnv<'a> {
    pub root_seed: u64,
    pub target: &'a EncoderModel,
    pub query_set: &'a LabeledDataset,
    pub probe_train: &'a LabeledDataset,
    pub probe_test: &'a LabeledDataset,
    pub full_strategies: &'a [DefenseKind],
    pub besa: &'a [BesaModels],
    pub service_budget: u64,
    /// Template for every cell; mode, flag and seed are overwritten.
    pub attack: &'a AttackConfig,
    pub transport: Transport,
}

pub fn cell_id(defense: &str, mode: AttackMode, besa: bool, replicate: u64) -> String {
    format!("{defense}/{}/{}/r{replicate}", mode.name(), if besa { "besa" } else { "base" })
}

/// Runs one cell against a fresh in-process service.
pub fn run_cell(
    env: &MatrixEnv<'_>,
    defense: &GridDefense,
    mode: AttackMode,
    besa_on: bool,
    replicate: u64,
) -> Result<(AttackReport, Vec<QueryRecord>)> {
    let streams = SeedStreams::new(env.root_seed);
    let service = Service::new(
        env.target.clone(),
        defense.served.clone(),
        env.service_budget,
        streams.seed(Stream::Service, replicate),
    )?;
    let mut cfg = env.attack.clone();
    cfg.mode = mode;
    cfg.besa_enabled = besa_on;
    cfg.seed = streams.seed(Stream::Attack, replicate);
    cfg.surrogate = cfg.surrogate.with_seed(derive_seed(cfg.seed, "surrogate-init", 0));
    let models = if besa_on {
        let wanted = defense.attacker_strategies(env.full_strategies);
        let found = env.besa.iter().find(|b| b.strategies() == wanted.as_slice());
        Some(found.ok_or_else(|| {
            Error::Config(format!(
                "no trained BESA models for strategy set [{}]; run train-besa first",
                wanted.iter().map(DefenseKind::label).collect::<Vec<_>>().join(", ")
            ))
        })?)
    } else {
        None
    };
    let counters = CallCounters::default();
    let eval = Evaluation {
        target: Some(env.target),
        probe_train: Some(env.probe_train),
        probe_test: Some(env.probe_test),
    };
    let outcome = match env.transport {
        Transport::InProcess => {
            let mut endpoint = service.clone();
            run_besa(&cfg, &mut endpoint, env.query_set, models, &counters, eval)?
        }
        Transport::Stream => {
            let server = serve_tcp(service.clone(), "127.0.0.1:0")?;
            let mut client = StreamClient::connect(server.local_addr())?;
            run_besa(&cfg, &mut client, env.query_set, models, &counters, eval)?
        }
    };
    let audit = service.audit_log();
    let mut report = outcome.report;
    report.cell = cell_id(&defense.name, mode, besa_on, replicate);
    report.served_defense = defense.label();
    report.seed = replicate;
    report.attach_ground_truth(&audit);
    Ok((report, audit))
}

/// Cartesian product of defense × mode × BESA flag × replicate. Cells run in
/// parallel; a failing cell yields a report with `error` set.
pub fn run_matrix(grid: &Grid, env: &MatrixEnv<'_>) -> Result<Vec<AttackReport>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty experiment grid".into()));
    }
    let mut cells = Vec::with_capacity(grid.len());
    for d in &grid.defenses {
        for &m in &grid.modes {
            for &b in &grid.besa {
                for &s in &grid.seeds {
                    cells.push((d, m, b, s));
                }
            }
        }
    }
    let mut reports: Vec<AttackReport> = cells
        .par_iter()
        .map(|&(d, m, b, s)| match run_cell(env, d, m, b, s) {
            Ok((r, _)) => r,
            Err(e) => {
                let mut r = AttackReport::empty(env.attack);
                r.cell = cell_id(&d.name, m, b, s);
                r.mode = m;
                r.besa_enabled = b;
                r.seed = s;
                r.served_defense = d.label();
                r.error = Some(e.to_string());
                r
            }
        })
        .collect();
    // pair each BESA cell with its baseline twin
    let baselines: Vec<(String, Option<f64>)> = reports
        .iter()
        .filter(|r| !r.besa_enabled)
        .map(|r| (r.cell.replace("/base/", "/besa/"), r.probe_accuracy))
        .collect();
    for r in reports.iter_mut().filter(|r| r.besa_enabled) {
        r.baseline_probe_accuracy = baselines.iter().find(|(c, _)| *c == r.cell).and_then(|(_, a)| *a);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WorldConfig;
    use crate::math::loss::info_nce;

    fn tiny_world() -> LabeledDataset {
        WorldConfig {
            classes: 3,
            n_per_class: 40,
            d_in: 8,
            spread: 0.6,
        }
        .generate("tiny", 1)
        .unwrap()
    }

    #[test]
    fn cosine_optimum_has_zero_gradient() {
        let ds = tiny_world();
        let mut s = init_encoder(&ArchSpec::new(vec![16], Activation::leaky(), 4, 3).with_output(OutputHead::Linear), 8).unwrap();
        let x = ds.x.select_rows(&(0..16).collect::<Vec<_>>());
        let f = s.net.clone().forward(&x, Mode::Train).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (loss, grads) =
            surrogate_loss(&mut s, &x, &f, AttackMode::Plain, &SurrogateTraining::default(), &mut rng).unwrap();
        assert!((loss + 1.0).abs() < 1e-12);
        let norm: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn contrastive_loss_matches_hand_value() {
        let pred = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let target = Matrix::from_rows(&[vec![3.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let (loss, _) = info_nce(&pred, &target, 0.5).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // row 0: logits (2, 2r); row 1: logits (0, 2r)
        let l0 = -(2.0f64).exp().ln() + ((2.0f64).exp() + (2.0 * r).exp()).ln();
        let l1 = -(2.0 * r) + (1.0 + (2.0 * r).exp()).ln();
        assert!((loss - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn fifty_steps_reduce_the_loss() {
        let world = WorldConfig::default().generate("w", 2).unwrap();
        let teacher = init_encoder(&ArchSpec::new(vec![32], Activation::leaky(), 16, 9), 32).unwrap();
        let x = world.x.select_rows(&(0..128).collect::<Vec<_>>());
        let f = teacher.encode_batch(&x).unwrap();
        let mut s = init_encoder(&default_surrogate(16), 32).unwrap();
        let hyper = SurrogateTraining::default();
        let mut opt = SgdMomentum::new(hyper.optim).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let first = surrogate_step(&mut s, &mut opt, &x, &f, AttackMode::Plain, &hyper, 0, &mut rng).unwrap();
        for _ in 0..49 {
            surrogate_step(&mut s, &mut opt, &x, &f, AttackMode::Plain, &hyper, 0, &mut rng).unwrap();
        }
        let (last, _) = surrogate_loss(&mut s, &x, &f, AttackMode::Plain, &hyper, &mut rng).unwrap();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut s = init_encoder(&default_surrogate(4), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = surrogate_loss(
            &mut s,
            &Matrix::zeros(0, 8),
            &Matrix::zeros(0, 4),
            AttackMode::Plain,
            &SurrogateTraining::default(),
            &mut rng,
        );
        assert!(e.is_err());
    }

    fn quick_cfg(besa: bool) -> AttackConfig {
        let mut cfg = AttackConfig::new(AttackMode::Plain, besa, 150, 8, 5);
        cfg.training.max_epochs = 3;
        cfg.probe.epochs = 5;
        cfg
    }

    #[test]
    fn baseline_never_touches_besa_models() {
        let ds = tiny_world();
        let target = init_encoder(&ArchSpec::new(vec![16], Activation::leaky(), 8, 1), 8).unwrap();
        let mut service = Service::new(target, None, 1_000, 0).unwrap();
        let counters = CallCounters::default();
        let out = run_besa(&quick_cfg(false), &mut service, &ds, None, &counters, Evaluation::default()).unwrap();
        assert_eq!(counters.detect_calls(), 0);
        assert_eq!(counters.recover_calls(), 0);
        assert!(out.report.verdicts.is_empty());
        assert_eq!(out.report.queries_used, 150);
        assert_eq!(service.audit_log().len(), 150);
    }

    #[test]
    fn budget_exhaustion_stops_gracefully() {
        let ds = tiny_world();
        let target = init_encoder(&ArchSpec::new(vec![16], Activation::leaky(), 8, 1), 8).unwrap();
        let mut service = Service::new(target, None, 70, 0).unwrap();
        let counters = CallCounters::default();
        let out = run_besa(&quick_cfg(false), &mut service, &ds, None, &counters, Evaluation::default()).unwrap();
        assert!(out.report.budget_exhausted);
        assert_eq!(out.report.queries_used, 70);
        assert!(out.report.final_loss.is_finite());
    }

    #[test]
    fn besa_without_models_is_a_config_error() {
        let ds = tiny_world();
        let target = init_encoder(&ArchSpec::new(vec![16], Activation::leaky(), 8, 1), 8).unwrap();
        let mut service = Service::new(target, None, 100, 0).unwrap();
        let e = run_besa(&quick_cfg(true), &mut service, &ds, None, &CallCounters::default(), Evaluation::default());
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn cadence_schedule() {
        assert!(Cadence::Once.due(0) && !Cadence::Once.due(1));
        let c = Cadence::EveryN { n: 3 };
        assert_eq!((0..7).filter(|&q| c.due(q)).collect::<Vec<_>>(), vec![0, 3, 6]);
        assert!(Cadence::EveryN { n: 0 }.validate().is_err());
    }

    #[test]
    fn unknown_cells_drop_the_served_defense() {
        let full = vec![
            DefenseKind::top_k_default(32),
            DefenseKind::rounding_default(),
            DefenseKind::noise_default(),
            DefenseKind::hybrid1(),
        ];
        let d = GridDefense::parse("un-np", 32).unwrap();
        assert_eq!(
            d.attacker_strategies(&full),
            vec![DefenseKind::top_k_default(32), DefenseKind::rounding_default()]
        );
        assert_eq!(GridDefense::parse("np", 32).unwrap().attacker_strategies(&full), full);
        assert!(GridDefense::parse("un-h1", 32).is_err());
        let grid = Grid {
            defenses: vec![GridDefense::parse("topk", 32).unwrap(), GridDefense::parse("np", 32).unwrap()],
            modes: vec![AttackMode::Plain, AttackMode::Contrastive],
            besa: vec![true, false],
            seeds: vec![0],
        };
        assert_eq!(grid.len(), 8);
    }
}
