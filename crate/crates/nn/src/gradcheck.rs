//! Finite-difference verification of backpropagation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Activation, LayerSpec, Loss, Network, NetworkSpec, Result, Targets};

/// `|a - b| / max(|a|, |b|, 1e-5)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Largest relative error between analytic and central-difference
/// gradients over every live weight and every bias of `net`. A masked weight
/// with a non-zero analytic gradient counts as an infinite error.
pub fn max_gradient_error(net: &Network<f64>, x: &Array2<f64>, t: &Targets, l2: f64, eps: f64) -> Result<f64> {
    let mut net = net.clone();
    let trace = net.forward(x.view())?;
    let g = net.backward(&trace, t, l2)?;
    let mut worst: f64 = 0.0;
    for p in 0..net.params.len() {
        let (rows, cols) = net.params[p].weight.dim();
        for i in 0..rows {
            for j in 0..cols {
                if net.params[p].mask[[i, j]] == 0.0 {
                    if g.weights[p][[i, j]] != 0.0 {
                        return Ok(f64::INFINITY);
                    }
                    continue;
                }
                let w0 = net.params[p].weight[[i, j]];
                net.params[p].weight[[i, j]] = w0 + eps;
                let up = net.loss(x.view(), t, l2)?;
                net.params[p].weight[[i, j]] = w0 - eps;
                let down = net.loss(x.view(), t, l2)?;
                net.params[p].weight[[i, j]] = w0;
                worst = worst.max(relative_error(g.weights[p][[i, j]], (up - down) / (2.0 * eps)));
            }
        }
        for j in 0..cols {
            let b0 = net.params[p].bias[j];
            net.params[p].bias[j] = b0 + eps;
            let up = net.loss(x.view(), t, l2)?;
            net.params[p].bias[j] = b0 - eps;
            let down = net.loss(x.view(), t, l2)?;
            net.params[p].bias[j] = b0;
            worst = worst.max(relative_error(g.biases[p][j], (up - down) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// A small random network with a batch of inputs and matching targets.
pub struct GradientCase {
    pub network: Network<f64>,
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

/// `count` random cases cycling through dense, conv + flatten and branched
/// topologies under both losses, with random weights and biases.
pub fn random_cases(seed: u64, count: usize) -> Result<Vec<GradientCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in 0..count {
        let cols = rng.random_range(4..8);
        let hidden = rng.random_range(3..7);
        let branched = k % 2 == 1;
        let conv = k % 3 != 0;
        let mut layers = Vec::new();
        let (input_dim, mut width) = if conv {
            let filters = rng.random_range(1..4);
            layers.push(LayerSpec::conv2d(2, cols, filters, (2, 3), Activation::Relu));
            layers.push(LayerSpec::Flatten);
            (2 * cols, (cols - 2) * filters)
        } else {
            (cols, cols)
        };
        layers.push(LayerSpec::dense(width, hidden, Activation::Relu));
        width = hidden;
        let loss = if branched {
            let heads = rng.random_range(2..4);
            let branches = (0..heads)
                .map(|_| {
                    let mid = rng.random_range(2..5);
                    let q = rng.random_range(2..5);
                    vec![
                        LayerSpec::dense(width, mid, Activation::Relu),
                        LayerSpec::dense(mid, q, Activation::Softmax),
                    ]
                })
                .collect();
            layers.push(LayerSpec::Branch { branches });
            Loss::Scce
        } else if k % 4 == 0 {
            layers.push(LayerSpec::dense(width, 3, Activation::Softmax));
            Loss::Scce
        } else {
            layers.push(LayerSpec::dense(width, 2, Activation::Linear));
            Loss::Mse
        };
        let spec = NetworkSpec {
            input_dim,
            layers,
            loss,
        };
        let widths = spec.head_widths()?;
        let mut network = Network::<f64>::init(spec, seed.wrapping_add(100 + k as u64))?;
        // Zero biases put dead-input samples exactly on a ReLU kink.
        for p in network.params.iter_mut() {
            p.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let batch = 5;
        let inputs = Array2::from_shape_fn((batch, input_dim), |_| rng.random_range(-1.0..1.0));
        let targets = match loss {
            Loss::Mse => Targets::Regression(Array2::from_shape_fn((batch, widths[0]), |_| rng.random_range(-1.0..1.0))),
            Loss::Scce => Targets::Classes(Array2::from_shape_fn((batch, widths.len()), |(_, m)| {
                rng.random_range(0..widths[m])
            })),
        };
        out.push(GradientCase {
            network,
            inputs,
            targets,
        });
    }
    Ok(out)
}
