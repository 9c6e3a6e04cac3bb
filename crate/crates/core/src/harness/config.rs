//! Declarative experiment configuration (TOML).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{default_surrogate, AttackConfig, AttackMode, Cadence, GridDefense, SurrogateTraining};
use crate::data::{AugmentPolicy, WorldConfig};
use crate::defenses::DefenseKind;
use crate::detection::DetectionConfig;
use crate::encoders::{ArchSpec, PretrainConfig};
use crate::error::{Error, Result};
use crate::harness::metrics::ProbeConfig;
use crate::math::Activation;
use crate::recovery::RecoveryConfig;
use crate::service::{Transport, DEFAULT_BUDGET};

/// Fractions of the target world given to each role; they sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub target_pretrain: f64,
    pub query: f64,
    pub probe_train: f64,
    pub probe_test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            target_pretrain: 0.4,
            query: 0.3,
            probe_train: 0.15,
            probe_test: 0.15,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> [f64; 4] {
        [self.target_pretrain, self.query, self.probe_train, self.probe_test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub arch: ArchSpec,
    pub pretrain: PretrainConfig,
    pub augment: AugmentPolicy,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            arch: ArchSpec::new(vec![128, 64], Activation::leaky(), 32, 0),
            pretrain: PretrainConfig::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    /// Training bank size M.
    pub size: usize,
    /// Extra encoders kept out of BESA training for evaluation.
    pub held_out: usize,
    pub public_worlds: usize,
    pub archs: Vec<ArchSpec>,
    pub pretrain: PretrainConfig,
    pub augment: AugmentPolicy,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            size: 32,
            held_out: 16,
            public_worlds: 8,
            archs: ArchSpec::default_pool(32),
            pretrain: PretrainConfig::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BesaConfig {
    /// The attacker's strategy set, by preset name.
    pub strategies: Vec<String>,
    pub detection: DetectionConfig,
    pub recovery: RecoveryConfig,
}

impl Default for BesaConfig {
    fn default() -> Self {
        Self {
            strategies: ["topk", "rd", "np", "h1", "h2", "h3"].map(String::from).to_vec(),
            detection: DetectionConfig::default(),
            recovery: RecoveryConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub query_budget: u64,
    pub cadence: Cadence,
    pub surrogate: ArchSpec,
    pub training: SurrogateTraining,
    pub probe: ProbeConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            query_budget: 2_000,
            cadence: Cadence::PerQuery,
            surrogate: default_surrogate(32),
            training: SurrogateTraining::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// `none`, a preset name, or `un-<preset>`.
    pub defenses: Vec<String>,
    pub modes: Vec<AttackMode>,
    pub besa: Vec<bool>,
    pub replicates: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            defenses: ["topk", "rd", "np"].map(String::from).to_vec(),
            modes: AttackMode::ALL.to_vec(),
            besa: vec![false, true],
            replicates: (0..5).collect(),
        }
    }
}

/// The single cell run by the `attack` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    pub defense: String,
    pub mode: AttackMode,
    pub besa: bool,
    pub replicate: u64,
    pub transport: Transport,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            defense: "np".into(),
            mode: AttackMode::Plain,
            besa: true,
            replicate: 0,
            transport: Transport::InProcess,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub budget: u64,
    /// Defense served by the `serve` subcommand (`none` or a preset name).
    pub defense: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            budget: DEFAULT_BUDGET,
            defense: "np".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every seed stream.
    pub seed: u64,
    pub out: String,
    pub world: WorldConfig,
    pub split: SplitConfig,
    pub target: TargetConfig,
    pub bank: BankConfig,
    pub besa: BesaConfig,
    pub attack: AttackSection,
    pub grid: GridConfig,
    pub cell: CellConfig,
    pub service: ServiceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/default".into(),
            world: WorldConfig::default(),
            split: SplitConfig::default(),
            target: TargetConfig::default(),
            bank: BankConfig::default(),
            besa: BesaConfig::default(),
            attack: AttackSection::default(),
            grid: GridConfig::default(),
            cell: CellConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn emit(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn d_f(&self) -> usize {
        self.target.arch.d_f
    }

    pub fn strategies(&self) -> Result<Vec<DefenseKind>> {
        self.besa
            .strategies
            .iter()
            .map(|s| DefenseKind::preset(s, self.d_f()).map_err(|e| Error::Config(e.to_string())))
            .collect()
    }

    pub fn grid_defenses(&self) -> Result<Vec<GridDefense>> {
        self.grid.defenses.iter().map(|d| GridDefense::parse(d, self.d_f())).collect()
    }

    /// Attack template; mode, flag and seed are set per cell.
    pub fn attack_template(&self) -> AttackConfig {
        let mut a = AttackConfig::new(AttackMode::Plain, false, self.attack.query_budget, self.d_f(), 0);
        a.cadence = self.attack.cadence;
        a.surrogate = self.attack.surrogate.clone();
        a.training = self.attack.training.clone();
        a.probe = self.attack.probe.clone();
        a
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| Error::Config(e.to_string());
        let d_f = self.d_f();
        check_world(&self.world)?;
        let fractions = self.split.fractions();
        if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be positive and sum to 1".into()));
        }
        self.target.arch.validate().map_err(config)?;
        self.target.augment.validate().map_err(config)?;
        if self.bank.size == 0 || self.bank.public_worlds < 2 || self.bank.archs.len() < 2 {
            return Err(Error::Config(
                "bank needs size > 0, at least 2 public worlds and 2 architectures".into(),
            ));
        }
        for a in &self.bank.archs {
            a.validate().map_err(config)?;
            if a.d_f != d_f {
                return Err(Error::Config(format!("bank architecture d_f {} != target d_f {d_f}", a.d_f)));
            }
        }
        self.bank.augment.validate().map_err(config)?;
        let strategies = self.strategies()?;
        if strategies.is_empty() {
            return Err(Error::Config("BESA strategy set is empty".into()));
        }
        for s in &strategies {
            s.validate().map_err(config)?;
        }
        if self.attack.surrogate.d_f != d_f {
            return Err(Error::Config(format!(
                "surrogate d_f {} != target d_f {d_f}",
                self.attack.surrogate.d_f
            )));
        }
        self.attack_template().validate().map_err(config)?;
        self.grid_defenses()?;
        if self.grid.modes.is_empty() || self.grid.besa.is_empty() || self.grid.replicates.is_empty() {
            return Err(Error::Config("grid axes must be nonempty".into()));
        }
        GridDefense::parse(&self.cell.defense, d_f)?;
        if self.service.defense != "none" {
            DefenseKind::preset(&self.service.defense, d_f).map_err(config)?;
        }
        if self.service.budget == 0 {
            return Err(Error::Config("service budget must be > 0".into()));
        }
        Ok(())
    }
}

fn check_world(w: &WorldConfig) -> Result<()> {
    if w.classes < 2 || w.n_per_class < 4 || w.d_in == 0 || !(w.spread > 0.0) {
        return Err(Error::Config(
            "world needs >= 2 classes, >= 4 samples per class, d_in > 0 and spread > 0".into(),
        ));
    }
    Ok(())
}
