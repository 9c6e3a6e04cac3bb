//! Provider-side perturbations of returned feature vectors.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DefenseKind {
    TopK { k: usize },
    Rounding { digits: u32 },
    NoisePoison { sigma2: f64 },
    Hybrid { parts: Vec<DefenseKind> },
}

impl DefenseKind {
    pub fn top_k_default(d_f: usize) -> Self {
        DefenseKind::TopK { k: (d_f / 16).max(1) }
    }

    pub fn rounding_default() -> Self {
        DefenseKind::Rounding { digits: 1 }
    }

    pub fn noise_default() -> Self {
        DefenseKind::NoisePoison { sigma2: 0.2 }
    }

    /// `[RD, NP]`
    pub fn hybrid1() -> Self {
        DefenseKind::Hybrid {
            parts: vec![Self::rounding_default(), Self::noise_default()],
        }
    }

    /// `[RD, TopK]`
    pub fn hybrid2(d_f: usize) -> Self {
        DefenseKind::Hybrid {
            parts: vec![Self::rounding_default(), Self::top_k_default(d_f)],
        }
    }

    /// `[NP, TopK]`
    pub fn hybrid3(d_f: usize) -> Self {
        DefenseKind::Hybrid {
            parts: vec![Self::noise_default(), Self::top_k_default(d_f)],
        }
    }

    /// Resolves a short name (`topk`, `rd`, `np`, `h1`, `h2`, `h3`) to its
    /// default parameters.
    pub fn preset(name: &str, d_f: usize) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "topk" | "top_k" => Self::top_k_default(d_f),
            "rd" | "rounding" => Self::rounding_default(),
            "np" | "noise" => Self::noise_default(),
            "h1" | "hybrid1" => Self::hybrid1(),
            "h2" | "hybrid2" => Self::hybrid2(d_f),
            "h3" | "hybrid3" => Self::hybrid3(d_f),
            other => return Err(Error::Config(format!("unknown defense preset `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DefenseKind::TopK { k } if *k == 0 => {
                Err(Error::InvalidArgument("top-k needs k >= 1".into()))
            }
            DefenseKind::NoisePoison { sigma2 } if !(*sigma2 >= 0.0 && sigma2.is_finite()) => {
                Err(Error::InvalidArgument(format!("sigma2 must be >= 0, got {sigma2}")))
            }
            DefenseKind::Hybrid { parts } => {
                if parts.is_empty() {
                    return Err(Error::InvalidArgument("hybrid needs at least one part".into()));
                }
                for p in parts {
                    if matches!(p, DefenseKind::Hybrid { .. }) {
                        return Err(Error::InvalidArgument("hybrids cannot nest".into()));
                    }
                    p.validate()?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Applies the strategy (hybrid parts in listed order). Only noise
    /// consumes randomness.
    pub fn apply<R: Rng + ?Sized>(&self, f: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        match self {
            DefenseKind::TopK { k } => top_k(f, *k),
            DefenseKind::Rounding { digits } => Ok(round_features(f, *digits)),
            DefenseKind::NoisePoison { sigma2 } => noise_poison(f, *sigma2, rng),
            DefenseKind::Hybrid { parts } => {
                let mut out = f.to_vec();
                for p in parts {
                    out = p.apply(&out, rng)?;
                }
                Ok(out)
            }
        }
    }

    /// Compact label used in reports and audit logs.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefenseKind::TopK { k } => write!(f, "TopK{{{k}}}"),
            DefenseKind::Rounding { digits } => write!(f, "RD{{{digits}}}"),
            DefenseKind::NoisePoison { sigma2 } => write!(f, "NP{{{sigma2}}}"),
            DefenseKind::Hybrid { parts } => {
                write!(f, "Hybrid[")?;
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, "+")?;
                    }
                    write!(f, "{p}")?;
                }
                write!(f, "]")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", deny_unknown_fields)]
pub enum SelectionPolicy {
    Fixed { index: usize },
    PerQueryRandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub strategies: Vec<DefenseKind>,
    pub policy: SelectionPolicy,
}

impl DefenseConfig {
    pub fn fixed(kind: DefenseKind) -> Self {
        Self {
            strategies: vec![kind],
            policy: SelectionPolicy::Fixed { index: 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::InvalidArgument("defense config has no strategies".into()));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        if let SelectionPolicy::Fixed { index } = self.policy {
            if index >= self.strategies.len() {
                return Err(Error::InvalidArgument(format!(
                    "fixed index {index} out of {} strategies",
                    self.strategies.len()
                )));
            }
        }
        Ok(())
    }

    /// Index of the strategy used for `query_index`; a pure function of the
    /// policy and the index.
    pub fn select(&self, query_index: u64) -> usize {
        match self.policy {
            SelectionPolicy::Fixed { index } => index,
            SelectionPolicy::PerQueryRandom { seed } => {
                rng_from(seed, "defense-select", query_index).random_range(0..self.strategies.len())
            }
        }
    }
}

/// Selects a strategy for `query_index` and applies it. The returned kind is
/// ground truth for evaluation only.
pub fn apply_defense<R: Rng + ?Sized>(
    cfg: &DefenseConfig,
    f: &[f64],
    query_index: u64,
    rng: &mut R,
) -> Result<(Vec<f64>, DefenseKind)> {
    let kind = &cfg.strategies[cfg.select(query_index)];
    Ok((kind.apply(f, rng)?, kind.clone()))
}

/// Keeps the `k` entries of largest magnitude, zeroing the rest. Among equal
/// magnitudes the lower index wins.
pub fn top_k(f: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > f.len() {
        return Err(Error::InvalidArgument(format!(
            "top-k: k={k} out of range 1..={}",
            f.len()
        )));
    }
    let mut idx: Vec<usize> = (0..f.len()).collect();
    // stable sort keeps lower indices first among equal magnitudes
    idx.sort_by(|&a, &b| f[b].abs().total_cmp(&f[a].abs()));
    let mut out = vec![0.0; f.len()];
    for &i in &idx[..k] {
        out[i] = f[i];
    }
    Ok(out)
}

/// Rounds every entry to `digits` decimals, halves away from zero. At 17 or
/// more digits the input is returned unchanged.
pub fn round_features(f: &[f64], digits: u32) -> Vec<f64> {
    f.iter().map(|&x| round_half_away(x, digits)).collect()
}

pub fn round_half_away(x: f64, digits: u32) -> f64 {
    if digits >= 17 || !x.is_finite() || x == 0.0 {
        return x;
    }
    let p = 10f64.powi(digits as i32);
    let y = x.abs() * p;
    if y < 4.0e15 {
        let frac = y - y.floor();
        // y carries at most half an ulp of error; away from the tie the
        // rounded-integer decision is exact and n / p is correctly rounded
        let margin = 4.0 * f64::EPSILON * y.max(1.0);
        if (frac - 0.5).abs() > margin {
            let n = if frac > 0.5 { y.floor() + 1.0 } else { y.floor() };
            return (n / p).copysign(x);
        }
    }
    round_decimal_exact(x, digits)
}

/// Rounds on the exact decimal expansion of `x`.
fn round_decimal_exact(x: f64, digits: u32) -> f64 {
    // every finite double has a terminating expansion of at most 1074
    // fractional digits, so this string is exact
    let s = format!("{:.1100}", x.abs());
    let (int_part, frac_part) = s.split_once('.').expect("fixed-point format");
    let d = digits as usize;
    let mut kept: Vec<u8> = int_part.bytes().chain(frac_part.bytes().take(d)).collect();
    let round_up = frac_part.as_bytes()[d] >= b'5';
    if round_up {
        let mut i = kept.len();
        loop {
            if i == 0 {
                kept.insert(0, b'1');
                break;
            }
            i -= 1;
            if kept[i] == b'9' {
                kept[i] = b'0';
            } else {
                kept[i] += 1;
                break;
            }
        }
    }
    let split = kept.len() - d;
    let text = format!(
        "{}.{}",
        std::str::from_utf8(&kept[..split]).expect("ascii"),
        std::str::from_utf8(&kept[split..]).expect("ascii")
    );
    let v: f64 = text.trim_end_matches('.').parse().expect("decimal literal");
    v.copysign(x)
}

/// `f + z`, `z ~ N(0, sigma2·I)`.
pub fn noise_poison<R: Rng + ?Sized>(f: &[f64], sigma2: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma2 must be >= 0, got {sigma2}")));
    }
    let sd = sigma2.sqrt();
    Ok(f
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + sd * z
        })
        .collect())
}
