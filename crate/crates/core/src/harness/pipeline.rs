//! Experiment stages and the artifact directory they share.

use std::fs;
use std::path::{Path, PathBuf};

use crate::attack::{run_cell, run_matrix, AttackReport, BesaModels, Grid, GridDefense, MatrixEnv};
use crate::data::{export_csv, split, LabeledDataset};
use crate::defenses::DefenseKind;
use crate::encoders::{build_shadow_bank, init_encoder, pretrain_contrastive, EncoderModel, ShadowBank};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{detection_accuracy, linear_probe, DetectionRow, MetricsRow};
use crate::harness::report::emit_reports;
use crate::rng::{derive_seed, SeedStreams, Stream};
use crate::service::{QueryRecord, Transport};

/// The target world split by role, plus the attacker's public worlds.
#[derive(Debug, Clone)]
pub struct World {
    pub target_pretrain: LabeledDataset,
    pub query: LabeledDataset,
    pub probe_train: LabeledDataset,
    pub probe_test: LabeledDataset,
    pub public: Vec<LabeledDataset>,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let streams = SeedStreams::new(cfg.seed);
    let whole = cfg.world.generate("target-world", streams.seed(Stream::Data, 0))?;
    let mut parts = split(&whole, &cfg.split.fractions(), streams.seed(Stream::Data, 1))?.into_iter();
    let mut next = |name: &str| {
        let mut ds = parts.next().expect("four parts");
        ds.name = name.into();
        ds
    };
    let (target_pretrain, query, probe_train, probe_test) =
        (next("target-pretrain"), next("query"), next("probe-train"), next("probe-test"));
    let public = (0..cfg.bank.public_worlds)
        .map(|i| {
            cfg.world
                .generate(&format!("public-{i}"), streams.seed(Stream::Data, 100 + i as u64))
        })
        .collect::<Result<_>>()?;
    Ok(World {
        target_pretrain,
        query,
        probe_train,
        probe_test,
        public,
    })
}

/// The provider's encoder, pretrained on its private split.
pub fn train_target(cfg: &ExperimentConfig, world: &World) -> Result<EncoderModel> {
    let root = SeedStreams::new(cfg.seed).seed(Stream::Service, u64::MAX);
    let arch = cfg.target.arch.with_seed(derive_seed(root, "target-init", 0));
    let mut enc = init_encoder(&arch, world.target_pretrain.dim())?;
    pretrain_contrastive(
        &mut enc,
        &world.target_pretrain,
        &cfg.target.augment,
        &cfg.target.pretrain,
        derive_seed(root, "target-pretrain", 0),
    )?;
    Ok(enc)
}

/// Training bank of `size` encoders and a held-out bank of `held_out`.
pub fn train_bank(cfg: &ExperimentConfig, world: &World) -> Result<(ShadowBank, ShadowBank)> {
    let mut bank = build_shadow_bank(
        cfg.bank.size + cfg.bank.held_out,
        world.public.clone(),
        &cfg.bank.archs,
        &cfg.bank.augment,
        &cfg.bank.pretrain,
        SeedStreams::new(cfg.seed).seed(Stream::Bank, 0),
    )?;
    let held_out = bank.split_off(cfg.bank.held_out);
    Ok((bank, held_out))
}

fn set_key(set: &[DefenseKind]) -> String {
    set.iter().map(DefenseKind::label).collect::<Vec<_>>().join(",")
}

pub fn train_besa(cfg: &ExperimentConfig, bank: &ShadowBank, set: &[DefenseKind]) -> Result<BesaModels> {
    let root = SeedStreams::new(cfg.seed).seed(Stream::Besa, 0);
    BesaModels::train(
        bank,
        set,
        &cfg.besa.detection,
        &cfg.besa.recovery,
        derive_seed(root, &set_key(set), 0),
    )
}

/// Strategy sets needed by the grid and the single-cell config: the full set
/// first, then Un-X subsets.
pub fn strategy_sets(cfg: &ExperimentConfig) -> Result<Vec<Vec<DefenseKind>>> {
    let full = cfg.strategies()?;
    let mut sets = vec![full.clone()];
    let mut defenses = cfg.grid_defenses()?;
    defenses.push(GridDefense::parse(&cfg.cell.defense, cfg.d_f())?);
    for d in defenses {
        let s = d.attacker_strategies(&full);
        if s.is_empty() {
            return Err(Error::Config(format!("cell '{}' leaves the attacker no strategies", d.name)));
        }
        if !sets.contains(&s) {
            sets.push(s);
        }
    }
    Ok(sets)
}

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn target(&self) -> PathBuf {
        self.dir.join("target.enc")
    }

    pub fn bank(&self) -> PathBuf {
        self.dir.join("bank")
    }

    pub fn held_out(&self) -> PathBuf {
        self.dir.join("bank-held-out")
    }

    pub fn besa(&self) -> PathBuf {
        self.dir.join("besa")
    }

    pub fn write_config(&self, cfg: &ExperimentConfig) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        fs::write(self.dir.join("config.toml"), cfg.emit()?)?;
        Ok(())
    }

    pub fn write_world(&self, world: &World) -> Result<()> {
        let dir = self.data_dir();
        fs::create_dir_all(&dir)?;
        for ds in [&world.target_pretrain, &world.query, &world.probe_train, &world.probe_test]
            .into_iter()
            .chain(&world.public)
        {
            export_csv(ds, &dir.join(format!("{}.csv", ds.name)))?;
        }
        Ok(())
    }

    pub fn target_or_train(&self, cfg: &ExperimentConfig, world: &World) -> Result<EncoderModel> {
        if self.target().exists() {
            return EncoderModel::load(&self.target());
        }
        let t = train_target(cfg, world)?;
        fs::create_dir_all(&self.dir)?;
        t.save(&self.target())?;
        Ok(t)
    }

    pub fn banks_or_train(&self, cfg: &ExperimentConfig, world: &World) -> Result<(ShadowBank, ShadowBank)> {
        if let Some(banks) = self.banks()? {
            return Ok(banks);
        }
        let (bank, held) = train_bank(cfg, world)?;
        bank.save_dir(&self.bank())?;
        held.save_dir(&self.held_out())?;
        Ok((bank, held))
    }

    pub fn banks(&self) -> Result<Option<(ShadowBank, ShadowBank)>> {
        if !self.bank().join("bank.json").exists() {
            return Ok(None);
        }
        let held = if self.held_out().join("bank.json").exists() {
            ShadowBank::load_dir(&self.held_out())?
        } else {
            ShadowBank {
                entries: Vec::new(),
                datasets: Vec::new(),
            }
        };
        Ok(Some((ShadowBank::load_dir(&self.bank())?, held)))
    }

    /// Every saved strategy set, in directory order.
    pub fn besa_models(&self) -> Result<Vec<BesaModels>> {
        let dir = self.besa();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut subdirs: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("besa.json").exists())
            .collect();
        subdirs.sort();
        subdirs.iter().map(|p| BesaModels::load_dir(p)).collect()
    }

    /// Trains and saves whichever of `sets` is not on disk yet.
    pub fn besa_or_train(
        &self,
        cfg: &ExperimentConfig,
        bank: &ShadowBank,
        sets: &[Vec<DefenseKind>],
    ) -> Result<Vec<BesaModels>> {
        let mut models = self.besa_models()?;
        for set in sets {
            if models.iter().any(|m| m.strategies() == set.as_slice()) {
                continue;
            }
            let m = train_besa(cfg, bank, set)?;
            m.save_dir(&self.besa().join(format!("set-{:02}", models.len())))?;
            models.push(m);
        }
        Ok(models)
    }
}

/// Runs the configured grid end to end, training whatever is missing.
pub fn run_experiment(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Vec<AttackReport>> {
    art.write_config(cfg)?;
    let world = build_world(cfg)?;
    let target = art.target_or_train(cfg, &world)?;
    let grid = Grid {
        defenses: cfg.grid_defenses()?,
        modes: cfg.grid.modes.clone(),
        besa: cfg.grid.besa.clone(),
        seeds: cfg.grid.replicates.clone(),
    };
    let full = cfg.strategies()?;
    let besa = if grid.besa.contains(&true) {
        let (bank, _) = art.banks_or_train(cfg, &world)?;
        art.besa_or_train(cfg, &bank, &grid.required_strategy_sets(&full))?
    } else {
        Vec::new()
    };
    let template = cfg.attack_template();
    let env = MatrixEnv {
        root_seed: cfg.seed,
        target: &target,
        query_set: &world.query,
        probe_train: &world.probe_train,
        probe_test: &world.probe_test,
        full_strategies: &full,
        besa: &besa,
        service_budget: cfg.service.budget,
        attack: &template,
        transport: Transport::InProcess,
    };
    let reports = run_matrix(&grid, &env)?;
    write_results(&reports, &art.dir)?;
    Ok(reports)
}

/// Metrics, records and summary, plus the full reports and wall times.
pub fn write_results(reports: &[AttackReport], dir: &Path) -> Result<Vec<MetricsRow>> {
    let rows: Vec<MetricsRow> = reports.iter().map(MetricsRow::from_report).collect();
    emit_reports(&rows, dir)?;
    let mut full = String::new();
    let mut timing = String::from("cell,wall_time_s\n");
    for r in reports {
        full.push_str(&serde_json::to_string(r)?);
        full.push('\n');
        timing.push_str(&format!("{},{:.3}\n", r.cell, r.wall_time_s));
    }
    fs::write(dir.join("reports.jsonl"), full)?;
    fs::write(dir.join("timing.csv"), timing)?;
    Ok(rows)
}

/// Runs the single configured cell. BESA models must already be on disk.
pub fn run_single(cfg: &ExperimentConfig, art: &Artifacts) -> Result<(AttackReport, Vec<QueryRecord>)> {
    let world = build_world(cfg)?;
    let defense = GridDefense::parse(&cfg.cell.defense, cfg.d_f())?;
    let full = cfg.strategies()?;
    let besa = if cfg.cell.besa {
        let models = art.besa_models()?;
        let wanted = defense.attacker_strategies(&full);
        if !models.iter().any(|m| m.strategies() == wanted.as_slice()) {
            return Err(Error::Config(format!(
                "BESA is on but no detector/generators for [{}] exist under {}; run `besa train-besa` with the same --config and --out first",
                set_key(&wanted),
                art.besa().display()
            )));
        }
        models
    } else {
        Vec::new()
    };
    let target = art.target_or_train(cfg, &world)?;
    let template = cfg.attack_template();
    let env = MatrixEnv {
        root_seed: cfg.seed,
        target: &target,
        query_set: &world.query,
        probe_train: &world.probe_train,
        probe_test: &world.probe_test,
        full_strategies: &full,
        besa: &besa,
        service_budget: cfg.service.budget,
        attack: &template,
        transport: cfg.cell.transport,
    };
    run_cell(&env, &defense, cfg.cell.mode, cfg.cell.besa, cfg.cell.replicate)
}

/// Detection accuracy of the full-set models on the held-out bank.
pub fn evaluate_detection(cfg: &ExperimentConfig, art: &Artifacts) -> Result<Vec<DetectionRow>> {
    let (_, held) = art
        .banks()?
        .ok_or_else(|| Error::Config("no shadow bank found; run `besa train-bank` first".into()))?;
    let full = cfg.strategies()?;
    let models = art.besa_models()?;
    let m = models
        .iter()
        .find(|m| m.strategies() == full.as_slice())
        .ok_or_else(|| Error::Config("no BESA models for the full strategy set; run `besa train-besa` first".into()))?;
    detection_accuracy(
        &m.detector,
        &held,
        64,
        SeedStreams::new(cfg.seed).seed(Stream::Besa, 1),
    )
}

/// Probe accuracy of the target encoder and of a random-init encoder of the
/// same architecture.
pub fn evaluate_probes(cfg: &ExperimentConfig, art: &Artifacts) -> Result<(f64, f64)> {
    let world = build_world(cfg)?;
    let target = art.target_or_train(cfg, &world)?;
    let random = init_encoder(&target.arch, target.d_in)?;
    let seed = SeedStreams::new(cfg.seed).seed(Stream::Attack, u64::MAX);
    let probe = &cfg.attack.probe;
    Ok((
        linear_probe(&target, &world.probe_train, &world.probe_test, probe, seed)?,
        linear_probe(&random, &world.probe_train, &world.probe_test, probe, seed)?,
    ))
}
