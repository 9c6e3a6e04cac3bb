//! Binary model container.
//!
//! Layout: 8-byte magic, `u64` LE header length, UTF-8 JSON header, then every
//! tensor as little-endian `f64` in the order listed by the header.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Activation, BatchNorm, Dense, Layer, Matrix, Network};

pub const ENCODER_MAGIC: &[u8; 8] = b"BESAENC1";
pub const CLASSIFIER_MAGIC: &[u8; 8] = b"BESAMET1";
pub const GENERATOR_MAGIC: &[u8; 8] = b"BESAGEN1";

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    meta: H,
    tensors: Vec<usize>,
}

pub fn encode<H: Serialize>(magic: &[u8; 8], meta: &H, tensors: &[&[f64]]) -> Result<Vec<u8>> {
    let env = Envelope {
        meta,
        tensors: tensors.iter().map(|t| t.len()).collect(),
    };
    let header = serde_json::to_vec(&env)?;
    let body: usize = tensors.iter().map(|t| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + header.len() + body);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<Vec<f64>>)> {
    let found = bytes
        .get(..8)
        .ok_or_else(|| Error::Format("file shorter than the magic".into()))?;
    if found != magic {
        if found[..7] == magic[..7] {
            return Err(Error::Format(format!(
                "version mismatch: found `{}`, expected `{}`",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(magic)
            )));
        }
        return Err(Error::Format(format!(
            "bad magic `{}`, expected `{}`",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let len = bytes
        .get(8..16)
        .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
        .ok_or_else(|| Error::Format("truncated header length".into()))?;
    let header = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let env: Envelope<H> = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
    let mut at = 16 + len;
    let mut tensors = Vec::with_capacity(env.tensors.len());
    for (i, &n) in env.tensors.iter().enumerate() {
        let end = n.checked_mul(8).and_then(|b| at.checked_add(b));
        let chunk = end
            .and_then(|end| bytes.get(at..end))
            .ok_or_else(|| Error::Format(format!("truncated tensor {i}")))?;
        tensors.push(
            chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
        at += n * 8;
    }
    if at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok((env.meta, tensors))
}

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], meta: &H, tensors: &[&[f64]]) -> Result<()> {
    fs::write(path, encode(magic, meta, tensors)?)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<Vec<f64>>)> {
    decode(magic, &fs::read(path)?)
}

/// Shape-only description of a layer; the numbers travel as tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerLayout {
    Dense { input: usize, output: usize },
    Batchnorm { width: usize, eps: f64, momentum: f64 },
    Activation { activation: Activation },
}

pub fn network_layout(net: &Network) -> Vec<LayerLayout> {
    net.layers()
        .iter()
        .map(|l| match l {
            Layer::Dense(d) => LayerLayout::Dense {
                input: d.input_dim(),
                output: d.output_dim(),
            },
            Layer::BatchNorm(b) => LayerLayout::Batchnorm {
                width: b.width(),
                eps: b.eps,
                momentum: b.momentum,
            },
            Layer::Activation(a) => LayerLayout::Activation { activation: *a },
        })
        .collect()
}

/// Every tensor including batchnorm running statistics.
pub fn network_tensors(net: &Network) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    for l in net.layers() {
        match l {
            Layer::Dense(d) => {
                out.push(d.weights.data());
                out.push(&d.bias);
            }
            Layer::BatchNorm(b) => {
                out.push(&b.gamma);
                out.push(&b.beta);
                out.push(&b.running_mean);
                out.push(&b.running_var);
            }
            Layer::Activation(_) => {}
        }
    }
    out
}

pub fn network_from_parts(layout: &[LayerLayout], tensors: Vec<Vec<f64>>) -> Result<Network> {
    let mut it = tensors.into_iter();
    let mut next = |len: usize| -> Result<Vec<f64>> {
        let t = it
            .next()
            .ok_or_else(|| Error::Format("fewer tensors than the layout needs".into()))?;
        if t.len() != len {
            return Err(Error::Format(format!("tensor of length {} where {len} expected", t.len())));
        }
        Ok(t)
    };
    let mut layers = Vec::with_capacity(layout.len());
    for l in layout {
        layers.push(match *l {
            LayerLayout::Dense { input, output } => {
                let w = Matrix::from_vec(input, output, next(input * output)?)?;
                Layer::Dense(Dense::new(w, next(output)?)?)
            }
            LayerLayout::Batchnorm { width, eps, momentum } => {
                let bn = BatchNorm {
                    gamma: next(width)?,
                    beta: next(width)?,
                    running_mean: next(width)?,
                    running_var: next(width)?,
                    eps,
                    momentum,
                };
                if bn.running_var.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::Format("negative running variance".into()));
                }
                Layer::BatchNorm(bn)
            }
            LayerLayout::Activation { activation } => Layer::Activation(activation),
        });
    }
    if it.next().is_some() {
        return Err(Error::Format("more tensors than the layout needs".into()));
    }
    Ok(Network::new(layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchNorm::new(4);
        bn.running_var = vec![0.5, 1.5, 2.0, 0.25];
        Network::new(vec![
            Layer::Dense(Dense::init(3, 4, &mut rng)),
            Layer::BatchNorm(bn),
            Layer::Activation(Activation::leaky()),
            Layer::Dense(Dense::init(4, 2, &mut rng)),
        ])
    }

    #[test]
    fn round_trip_is_exact() {
        let n = net();
        let bytes = encode(ENCODER_MAGIC, &network_layout(&n), &network_tensors(&n)).unwrap();
        let (layout, tensors): (Vec<LayerLayout>, _) = decode(ENCODER_MAGIC, &bytes).unwrap();
        assert_eq!(network_from_parts(&layout, tensors).unwrap(), n);
    }

    #[test]
    fn magic_and_truncation_errors() {
        let n = net();
        let bytes = encode(ENCODER_MAGIC, &network_layout(&n), &network_tensors(&n)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<Vec<LayerLayout>>(ENCODER_MAGIC, &bad).is_err());
        let mut v2 = bytes.clone();
        v2[7] = b'2';
        let err = decode::<Vec<LayerLayout>>(ENCODER_MAGIC, &v2).unwrap_err();
        assert!(err.to_string().contains("version mismatch"));
        assert!(decode::<Vec<LayerLayout>>(GENERATOR_MAGIC, &bytes).is_err());
        assert!(decode::<Vec<LayerLayout>>(ENCODER_MAGIC, &bytes[..bytes.len() - 3]).is_err());
    }
}
