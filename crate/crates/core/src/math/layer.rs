//! Layer kinds and their forward/backward rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
/// Weight on the previous running statistic.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
}

impl Activation {
    pub fn leaky() -> Self {
        Activation::LeakyRelu {
            slope: LEAKY_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Activation::LeakyRelu { slope } = *self {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "leaky relu slope must be in (0,1), got {slope}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation input and the output.
    #[inline]
    fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    pub(crate) fn backward(&self, input: &Matrix, output: &Matrix, grad: &Matrix) -> Matrix {
        let data = input
            .data()
            .iter()
            .zip(output.data())
            .zip(grad.data())
            .map(|((&x, &y), &g)| g * self.derivative(x, y))
            .collect();
        Matrix::from_vec(grad.rows(), grad.cols(), data).expect("shape preserved")
    }
}

/// Fully connected layer, `Y = X·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::dims("Dense bias", weights.cols(), bias.len()));
        }
        Ok(Self { weights, bias })
    }

    /// Uniform init in `±1/√fan_in` for weights and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let data = (0..input * output)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..output).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weights: Matrix::from_vec(input, output, data).expect("sized"),
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("dense input", self.input_dim(), x.cols()));
        }
        let mut y = x.matmul(&self.weights)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }

    /// Returns `(grad_W, grad_b, grad_input)`.
    pub(crate) fn backward(&self, input: &Matrix, grad: &Matrix) -> Result<(Vec<f64>, Vec<f64>, Matrix)> {
        let gw = input.t_matmul(grad)?;
        let gb = grad.column_sums();
        let gx = grad.matmul_t(&self.weights)?;
        Ok((gw.into_data(), gb, gx))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

pub(crate) struct BatchNormTrace {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Batch-statistics normalization; updates the running statistics.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        self.forward_train_traced(x).map(|(y, _)| y)
    }

    /// Running-statistics normalization; never touches state.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_eval_traced(x).map(|(y, _)| y)
    }

    pub(crate) fn forward_train_traced(&mut self, x: &Matrix) -> Result<(Matrix, BatchNormTrace)> {
        let width = self.width();
        if x.cols() != width {
            return Err(Error::dims("batchnorm input", width, x.cols()));
        }
        let n = x.rows();
        if n < 2 {
            return Err(Error::InvalidArgument(
                "batchnorm in train mode needs at least 2 rows".into(),
            ));
        }
        let nf = n as f64;
        let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / nf).collect();
        let mut var = vec![0.0; width];
        for row in x.iter_rows() {
            for ((v, &xv), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = xv - m;
                *v += d * d;
            }
        }
        for v in &mut var {
            *v /= nf;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let (y, xhat) = self.normalize(x, &mean, &inv_std);

        let unbias = nf / (nf - 1.0);
        for c in 0..width {
            self.running_mean[c] = self.momentum * self.running_mean[c] + (1.0 - self.momentum) * mean[c];
            self.running_var[c] =
                self.momentum * self.running_var[c] + (1.0 - self.momentum) * var[c] * unbias;
        }
        Ok((
            y,
            BatchNormTrace {
                xhat,
                inv_std,
                mode: Mode::Train,
            },
        ))
    }

    pub(crate) fn forward_eval_traced(&self, x: &Matrix) -> Result<(Matrix, BatchNormTrace)> {
        if x.cols() != self.width() {
            return Err(Error::dims("batchnorm input", self.width(), x.cols()));
        }
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let (y, xhat) = self.normalize(x, &self.running_mean, &inv_std);
        Ok((
            y,
            BatchNormTrace {
                xhat,
                inv_std,
                mode: Mode::Eval,
            },
        ))
    }

    fn normalize(&self, x: &Matrix, mean: &[f64], inv_std: &[f64]) -> (Matrix, Matrix) {
        let mut xhat = x.clone();
        let mut y = x.clone();
        let width = self.width();
        for r in 0..x.rows() {
            let xr = xhat.row_mut(r);
            for c in 0..width {
                xr[c] = (xr[c] - mean[c]) * inv_std[c];
            }
            let yr = y.row_mut(r);
            let xr = xhat.row(r);
            for c in 0..width {
                yr[c] = self.gamma[c] * xr[c] + self.beta[c];
            }
        }
        (y, xhat)
    }

    /// Returns `(grad_gamma, grad_beta, grad_input)`.
    pub(crate) fn backward(&self, trace: &BatchNormTrace, grad: &Matrix) -> (Vec<f64>, Vec<f64>, Matrix) {
        let width = self.width();
        let n = grad.rows();
        let mut g_gamma = vec![0.0; width];
        let mut g_beta = vec![0.0; width];
        for (gr, xr) in grad.iter_rows().zip(trace.xhat.iter_rows()) {
            for c in 0..width {
                g_gamma[c] += gr[c] * xr[c];
                g_beta[c] += gr[c];
            }
        }
        let mut gx = Matrix::zeros(n, width);
        match trace.mode {
            Mode::Eval => {
                for r in 0..n {
                    let gr = grad.row(r);
                    let out = gx.row_mut(r);
                    for c in 0..width {
                        out[c] = gr[c] * self.gamma[c] * trace.inv_std[c];
                    }
                }
            }
            Mode::Train => {
                // dx = inv_std/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), dxhat = dy·gamma
                let nf = n as f64;
                let sum_dxhat: Vec<f64> = (0..width).map(|c| g_beta[c] * self.gamma[c]).collect();
                let sum_dxhat_xhat: Vec<f64> = (0..width).map(|c| g_gamma[c] * self.gamma[c]).collect();
                for r in 0..n {
                    let gr = grad.row(r);
                    let xr = trace.xhat.row(r);
                    let out = gx.row_mut(r);
                    for c in 0..width {
                        let dxhat = gr[c] * self.gamma[c];
                        out[c] = trace.inv_std[c] / nf
                            * (nf * dxhat - sum_dxhat[c] - xr[c] * sum_dxhat_xhat[c]);
                    }
                }
            }
        }
        (g_gamma, g_beta, gx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "layer")]
pub enum Layer {
    Dense(Dense),
    BatchNorm(BatchNorm),
    Activation(Activation),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.data().len() + d.bias.len(),
            Layer::BatchNorm(b) => b.gamma.len() + b.beta.len(),
            Layer::Activation(_) => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Activation(Activation::LeakyRelu { .. }) => "leakyrelu",
            Layer::Activation(Activation::Relu) => "relu",
            Layer::Activation(Activation::Tanh) => "tanh",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_and_sum() {
        let d = Dense::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        let y = d.forward(&Matrix::row_vector(&[3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);

        let d = Dense::new(Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap(), vec![1.0]).unwrap();
        let y = d.forward(&Matrix::row_vector(&[2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let d = Dense::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            d.forward(&Matrix::row_vector(&[1.0, 2.0, 3.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batchnorm_standardizes_columns() {
        // column with mean 5 and (biased) variance 4
        let x = Matrix::from_vec(4, 1, vec![3.0, 3.0, 7.0, 7.0]).unwrap();
        let mut bn = BatchNorm::new(1);
        let y = bn.forward_train(&x).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // eps=1e-5 caps the output variance at 4/(4+1e-5)
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
        assert!((var - 4.0 / (4.0 + BN_EPS)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let x = Matrix::from_vec(3, 2, vec![1.0, -2.0, 0.5, 4.0, 9.0, 3.0]).unwrap();
        let mut bn = BatchNorm::new(2);
        bn.gamma = vec![0.0, 0.0];
        bn.beta = vec![0.25, -1.5];
        let y = bn.forward_train(&x).unwrap();
        for row in y.iter_rows() {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn batchnorm_eval_is_deterministic_and_batch_independent() {
        let mut bn = BatchNorm::new(2);
        bn.running_mean = vec![0.3, -0.7];
        bn.running_var = vec![2.0, 0.5];
        bn.gamma = vec![1.5, 0.5];
        let row = [1.25, -3.0];
        let a = bn.forward_eval(&Matrix::row_vector(&row)).unwrap();
        let b = bn.forward_eval(&Matrix::row_vector(&row)).unwrap();
        assert_eq!(a, b);
        let batch = Matrix::from_rows(&[vec![9.0, 9.0], row.to_vec(), vec![-4.0, 0.0]]).unwrap();
        let c = bn.forward_eval(&batch).unwrap();
        assert_eq!(c.row(1), a.row(0));
    }

    #[test]
    fn batchnorm_train_needs_two_rows() {
        let mut bn = BatchNorm::new(2);
        assert!(bn.forward_train(&Matrix::row_vector(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn leaky_relu_examples() {
        let a = Activation::leaky();
        let y = a.forward(&Matrix::row_vector(&[2.0, -2.0, 0.0]));
        assert_eq!(y.data(), &[2.0, -0.02, 0.0]);
        let neg = Matrix::row_vector(&[-1.0, -3.5, -0.25]);
        let y = a.forward(&neg);
        for (o, i) in y.data().iter().zip(neg.data()) {
            assert_eq!(*o, 0.01 * i);
        }
        assert!(Activation::LeakyRelu { slope: 1.0 }.validate().is_err());
    }
}
