//! Central finite differences for checking analytic gradients.

/// Numerical gradient of `f` at `x` with step `eps`.
pub fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`.
///
/// Meaningless for gradients that are zero by construction (a bias feeding a
/// train-mode batchnorm): there the numerical side is pure round-off, so
/// compare such tensors with [`max_abs`] instead.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

use super::{Matrix, Mode, Network};
use crate::error::Result;

/// Largest absolute entry of `a`.
pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Relative errors between analytic and numerical gradients of
/// `L = Σ weights ⊙ net(x)` (train mode), one per parameter tensor in
/// [`Network::params`] order followed by one for the input.
pub fn network_errors(net: &Network, x: &Matrix, weights: &Matrix, eps: f64) -> Result<Vec<f64>> {
    Ok(network_gradients(net, x, weights, eps)?
        .iter()
        .map(|(a, n)| relative_error(a, n))
        .collect())
}

/// `(analytic, numerical)` gradient pairs in the order of [`network_errors`].
pub fn network_gradients(
    net: &Network,
    x: &Matrix,
    weights: &Matrix,
    eps: f64,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let objective = |n: &mut Network, input: &Matrix| -> f64 {
        let y = n.forward(input, Mode::Train).expect("forward");
        y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut work = net.clone();
    work.forward(x, Mode::Train)?;
    let (grads, gx) = work.backward(weights)?;

    let mut pairs = Vec::with_capacity(grads.len() + 1);
    for (t, analytic) in grads.iter().enumerate() {
        let base: Vec<f64> = net.params()[t].to_vec();
        let numeric = numeric_grad(
            |p| {
                let mut n = net.clone();
                n.params_mut()[t].copy_from_slice(p);
                objective(&mut n, x)
            },
            &base,
            eps,
        );
        pairs.push((analytic.to_vec(), numeric));
    }
    let numeric = numeric_grad(
        |p| {
            let input = Matrix::from_vec(x.rows(), x.cols(), p.to_vec()).expect("shape");
            objective(&mut net.clone(), &input)
        },
        x.data(),
        eps,
    );
    pairs.push((gx.data().to_vec(), numeric));
    Ok(pairs)
}

/// Relative error of a loss gradient with respect to its first argument.
pub fn loss_error(
    loss: impl Fn(&Matrix) -> Result<(f64, Matrix)>,
    at: &Matrix,
    eps: f64,
) -> Result<f64> {
    let (_, analytic) = loss(at)?;
    let numeric = numeric_grad(
        |p| {
            let m = Matrix::from_vec(at.rows(), at.cols(), p.to_vec()).expect("shape");
            loss(&m).expect("loss").0
        },
        at.data(),
        eps,
    );
    Ok(relative_error(analytic.data(), &numeric))
}
