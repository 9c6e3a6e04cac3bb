//! The query endpoint: a target encoder behind a defense and a budget.

pub mod stream;
pub mod wire;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::defenses::{apply_defense, DefenseConfig};
use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng::rng_from;

pub use stream::{serve_stream, serve_tcp, StreamClient};

pub const DEFAULT_BUDGET: u64 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    InProcess,
    Stream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_index: u64,
    pub applied_defense: String,
    pub input_hash: String,
    pub features: Vec<f64>,
}

/// First 16 hex digits of SHA-256 over the little-endian input bytes.
pub fn input_hash(x: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in x {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

struct State {
    target: EncoderModel,
    defense: Option<DefenseConfig>,
    budget: u64,
    seed: u64,
    served: AtomicU64,
    audit: Mutex<Vec<QueryRecord>>,
}

/// Cheap to clone; clones share budget and audit log.
#[derive(Clone)]
pub struct Service {
    state: Arc<State>,
}

impl std::fmt::Debug for Service {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Service")
            .field("budget", &self.state.budget)
            .field("served", &self.served())
            .finish()
    }
}

impl Service {
    /// `defense = None` serves clean features.
    pub fn new(target: EncoderModel, defense: Option<DefenseConfig>, budget: u64, seed: u64) -> Result<Self> {
        if let Some(d) = &defense {
            d.validate()?;
        }
        Ok(Self {
            state: Arc::new(State {
                target,
                defense,
                budget,
                seed,
                served: AtomicU64::new(0),
                audit: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn budget(&self) -> u64 {
        self.state.budget
    }

    pub fn served(&self) -> u64 {
        self.state.served.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> u64 {
        self.state.budget - self.served()
    }

    pub fn d_in(&self) -> usize {
        self.state.target.d_in
    }

    /// Claims the next query index, or fails once the budget is spent.
    fn claim(&self) -> Result<u64> {
        let budget = self.state.budget;
        self.state
            .served
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |s| (s < budget).then_some(s + 1))
            .map_err(|_| Error::BudgetExhausted)
    }

    /// `apply_defense(defense, encode(target, x), query_index)`. Malformed
    /// inputs are rejected without spending budget.
    pub fn query(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state.target.d_in {
            return Err(Error::MalformedInput(format!(
                "expected {} inputs, got {}",
                self.state.target.d_in,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::MalformedInput("non-finite input".into()));
        }
        let index = self.claim()?;
        let clean = self.state.target.encode(x)?;
        let (features, applied) = match &self.state.defense {
            None => (clean, "none".to_string()),
            Some(cfg) => {
                let mut rng = rng_from(self.state.seed, "service-noise", index);
                let (f, kind) = apply_defense(cfg, &clean, index, &mut rng)?;
                (f, kind.label())
            }
        };
        self.state.audit.lock().expect("audit lock").push(QueryRecord {
            query_index: index,
            applied_defense: applied,
            input_hash: input_hash(x),
            features: features.clone(),
        });
        Ok(features)
    }

    /// Audit records ordered by query index.
    pub fn audit_log(&self) -> Vec<QueryRecord> {
        let mut log = self.state.audit.lock().expect("audit lock").clone();
        log.sort_by_key(|r| r.query_index);
        log
    }

    pub fn write_audit_csv(&self, path: &Path) -> Result<()> {
        write_audit_csv(&self.audit_log(), path)
    }
}

/// `query_index,applied_defense,input_hash`, one row per served query.
pub fn write_audit_csv(records: &[QueryRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    w.write_record(["query_index", "applied_defense", "input_hash"])
        .map_err(|e| Error::Io(e.into()))?;
    for r in records {
        w.write_record([r.query_index.to_string(), r.applied_defense.clone(), r.input_hash.clone()])
            .map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

/// Anything the attacker can send queries to.
pub trait Endpoint {
    fn query(&mut self, x: &[f64]) -> Result<Vec<f64>>;

    fn query_batch(&mut self, x: &Matrix) -> Vec<Result<Vec<f64>>> {
        x.iter_rows().map(|r| self.query(r)).collect()
    }
}

impl Endpoint for Service {
    fn query(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        Service::query(self, x)
    }
}
