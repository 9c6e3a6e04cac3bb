#![allow(dead_code)]

use besa::math::gradcheck::{loss_error, max_abs, network_gradients, relative_error};
use besa::math::loss::{
    bce_with_logits, cosine_loss, info_nce, l1_loss, l2_loss, nt_xent, softmax_cross_entropy,
};
use besa::math::{Activation, BatchNorm, Dense, Layer, Matrix, Mode, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Absolute bound for gradients that vanish by construction; central
/// differences at `EPS` leave round-off around 1e-10 there.
pub const ZERO_TOL: f64 = 1e-8;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Smallest |input| reaching any leaky relu in `net` on `x`.
fn kink_distance(net: &Network, x: &Matrix) -> f64 {
    let mut best = f64::INFINITY;
    for (i, layer) in net.layers().iter().enumerate() {
        if let Layer::Activation(_) = layer {
            let mut prefix = Network::new(net.layers()[..i].to_vec());
            let h = prefix.forward(x, Mode::Train).unwrap();
            for v in h.data() {
                best = best.min(v.abs());
            }
        }
    }
    best
}

/// Random dense/batchnorm/leakyrelu stack with at most 3 dense layers of at
/// most 16 units, plus an input batch that stays away from the kink.
pub fn random_net(rng: &mut ChaCha8Rng) -> (Network, Matrix) {
    loop {
        let depth = rng.random_range(1..=3);
        let mut widths = vec![rng.random_range(2..=8)];
        for _ in 0..depth {
            widths.push(rng.random_range(2..=16));
        }
        let mut layers = Vec::new();
        for d in 0..depth {
            layers.push(Layer::Dense(Dense::init(widths[d], widths[d + 1], rng)));
            if d + 1 < depth {
                let mut bn = BatchNorm::new(widths[d + 1]);
                bn.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
                bn.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
                layers.push(Layer::BatchNorm(bn));
                layers.push(Layer::Activation(Activation::leaky()));
            }
        }
        let net = Network::new(layers);
        let x = random_matrix(rng.random_range(3..=6), widths[0], rng);
        if kink_distance(&net, &x) > 1e-3 {
            return (net, x);
        }
    }
}

/// Worst error per named check with the bound it must stay under: relative
/// error against [`TOL`], or the largest absolute entry against [`ZERO_TOL`]
/// for a dense bias feeding a train-mode batchnorm, whose gradient is zero.
pub fn gradient_suite(seed: u64, trials: usize) -> Vec<(&'static str, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = |name: &'static str, e: f64, acc: &mut Vec<(&'static str, f64, f64)>| {
        let tol = if name.ends_with("(zero)") { ZERO_TOL } else { TOL };
        match acc.iter_mut().find(|(n, _, _)| *n == name) {
            Some((_, w, _)) => *w = w.max(e),
            None => acc.push((name, e, tol)),
        }
    };
    let mut out = Vec::new();
    for _ in 0..trials {
        let (net, x) = random_net(&mut rng);
        let out_dim = net.output_dim().unwrap();
        let w = random_matrix(x.rows(), out_dim, &mut rng);
        let pairs = network_gradients(&net, &x, &w, EPS).unwrap();
        let errors: Vec<f64> = pairs.iter().map(|(a, n)| relative_error(a, n)).collect();
        let layers = net.layers();
        let mut t = 0;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense(_) if matches!(layers.get(i + 1), Some(Layer::BatchNorm(_))) => {
                    worst("dense", errors[t], &mut out);
                    let (a, n) = &pairs[t + 1];
                    worst("dense bias into batchnorm (zero)", max_abs(a).max(max_abs(n)), &mut out);
                }
                Layer::Dense(_) => worst("dense", errors[t].max(errors[t + 1]), &mut out),
                Layer::BatchNorm(_) => worst("batchnorm", errors[t].max(errors[t + 1]), &mut out),
                Layer::Activation(_) => continue,
            }
            t += 2;
        }
        let has_act = net.layers().iter().any(|l| matches!(l, Layer::Activation(_)));
        let name = if has_act { "leakyrelu chain (input)" } else { "dense (input)" };
        worst(name, errors[t], &mut out);

        let d = rng.random_range(2..=8);
        let n = 2 * rng.random_range(2..=4);
        let p = random_matrix(n, d, &mut rng);
        let c = random_matrix(n, d, &mut rng);
        worst("cosine loss", loss_error(|m| cosine_loss(m, &c), &p, EPS).unwrap(), &mut out);
        worst("l2 loss", loss_error(|m| l2_loss(m, &c), &p, EPS).unwrap(), &mut out);
        // keep every coordinate away from the |·| kink
        let shifted = p.map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 });
        let c_sign = c.map(|v| v * 0.01);
        worst("l1 loss", loss_error(|m| l1_loss(m, &c_sign), &shifted, EPS).unwrap(), &mut out);
        worst("nt-xent", loss_error(|m| nt_xent(m, 0.5), &p, EPS).unwrap(), &mut out);
        worst("info-nce", loss_error(|m| info_nce(m, &c, 0.5), &p, EPS).unwrap(), &mut out);
        let logits = random_matrix(n, 1, &mut rng).map(|v| 3.0 * v);
        let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        worst("bce", loss_error(|m| bce_with_logits(m, &labels), &logits, EPS).unwrap(), &mut out);
        let classes: Vec<usize> = (0..n).map(|i| i % d).collect();
        worst(
            "softmax ce",
            loss_error(|m| softmax_cross_entropy(m, &classes), &p, EPS).unwrap(),
            &mut out,
        );
    }
    out
}
