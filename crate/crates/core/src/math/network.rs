//! Ordered layer stacks with cached forward passes and exact backward passes.

use serde::{Deserialize, Serialize};

use super::layer::{BatchNormTrace, Layer, Mode};
use super::Matrix;
use crate::error::{Error, Result};

enum Trace {
    Dense { input: Matrix },
    BatchNorm(BatchNormTrace),
    Activation { input: Matrix, output: Matrix },
}

/// Gradients aligned with [`Network::params`].
pub type Gradients = Vec<Vec<f64>>;

#[derive(Default, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    #[serde(skip)]
    cache: Option<Vec<Trace>>,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self::new(self.layers.clone())
    }
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("layers", &self.layers)
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self {
            layers,
            cache: None,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dense(d) => Some(d.input_dim()),
            Layer::BatchNorm(b) => Some(b.width()),
            Layer::Activation(_) => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Dense(d) => Some(d.output_dim()),
            Layer::BatchNorm(b) => Some(b.width()),
            Layer::Activation(_) => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Trainable tensors in a fixed order: per dense `(W, b)`, per batchnorm `(gamma, beta)`.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.data());
                    out.push(&d.bias[..]);
                }
                Layer::BatchNorm(b) => {
                    out.push(&b.gamma[..]);
                    out.push(&b.beta[..]);
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.weights.data_mut());
                    out.push(&mut d.bias[..]);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma[..]);
                    out.push(&mut b.beta[..]);
                }
                Layer::Activation(_) => {}
            }
        }
        out
    }

    /// Forward pass that records what `backward` needs.
    ///
    /// In train mode batchnorm layers use batch statistics and update their
    /// running statistics; in eval mode nothing is mutated except the cache.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        self.cache = None;
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense(d) => {
                    let y = d.forward(&h)?;
                    traces.push(Trace::Dense { input: h });
                    y
                }
                Layer::BatchNorm(b) => {
                    let (y, t) = match mode {
                        Mode::Train => b.forward_train_traced(&h)?,
                        Mode::Eval => b.forward_eval_traced(&h)?,
                    };
                    traces.push(Trace::BatchNorm(t));
                    y
                }
                Layer::Activation(a) => {
                    let y = a.forward(&h);
                    traces.push(Trace::Activation {
                        input: h,
                        output: y.clone(),
                    });
                    y
                }
            };
        }
        self.cache = Some(traces);
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        self.forward(x, Mode::Train)
    }

    /// Eval-mode inference; no state is touched.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(&h)?,
                Layer::BatchNorm(b) => b.forward_eval(&h)?,
                Layer::Activation(a) => a.forward(&h),
            };
        }
        Ok(h)
    }

    /// Backpropagates `upstream` (gradient w.r.t. the last forward output).
    /// Consumes the cache, returns parameter gradients and the input gradient.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<(Gradients, Matrix)> {
        let traces = self.cache.take().ok_or(Error::MissingCache)?;
        let mut grads: Vec<Vec<f64>> = Vec::new();
        let mut g = upstream.clone();
        for (layer, trace) in self.layers.iter().zip(traces.iter()).rev() {
            g = match (layer, trace) {
                (Layer::Dense(d), Trace::Dense { input }) => {
                    if g.shape() != (input.rows(), d.output_dim()) {
                        return Err(Error::dims("dense backward", d.output_dim(), g.cols()));
                    }
                    let (gw, gb, gx) = d.backward(input, &g)?;
                    grads.push(gb);
                    grads.push(gw);
                    gx
                }
                (Layer::BatchNorm(b), Trace::BatchNorm(t)) => {
                    if g.shape() != t.xhat.shape() {
                        return Err(Error::dims("batchnorm backward", b.width(), g.cols()));
                    }
                    let (gg, gb, gx) = b.backward(t, &g);
                    grads.push(gb);
                    grads.push(gg);
                    gx
                }
                (Layer::Activation(a), Trace::Activation { input, output }) => {
                    if g.shape() != input.shape() {
                        return Err(Error::dims("activation backward", input.cols(), g.cols()));
                    }
                    a.backward(input, output, &g)
                }
                _ => return Err(Error::MissingCache),
            };
        }
        grads.reverse();
        Ok((grads, g))
    }
}
