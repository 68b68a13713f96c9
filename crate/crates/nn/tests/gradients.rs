//! Backpropagation checked against central finite differences.

use ndarray::Array2;
use phasepos_nn::gradcheck::{max_gradient_error, random_cases};
use phasepos_nn::{Activation, LayerSpec, Loss, Network, NetworkSpec, Targets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn regression(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Targets {
    Targets::Regression(random_input(rng, rows, cols))
}

#[test]
fn gradients_match_finite_differences_on_random_specs() {
    let cases = random_cases(2024, 10).unwrap();
    let losses: Vec<_> = cases.iter().map(|c| c.network.spec().loss).collect();
    assert!(losses.contains(&Loss::Mse) && losses.contains(&Loss::Scce));
    let has = |f: fn(&LayerSpec) -> bool| cases.iter().any(|c| c.network.spec().layers.iter().any(f));
    assert!(has(|l| matches!(l, LayerSpec::Conv2d { .. })));
    assert!(has(|l| matches!(l, LayerSpec::Flatten)));
    assert!(has(|l| matches!(l, LayerSpec::Branch { .. })));
    for (i, c) in cases.iter().enumerate() {
        let err = max_gradient_error(&c.network, &c.inputs, &c.targets, 1e-3, EPS).unwrap();
        assert!(err < TOL, "case {i}: relative error {err:e}");
    }
}

/// Independent check of the relative-error helper on a closed-form loss.
#[test]
fn single_linear_unit_gradient() {
    let spec = NetworkSpec {
        input_dim: 1,
        layers: vec![LayerSpec::dense(1, 1, Activation::Linear)],
        loss: Loss::Mse,
    };
    let mut net = Network::<f64>::zeros(spec).unwrap();
    net.params[0].weight[[0, 0]] = 0.5;
    let x = ndarray::array![[2.0]];
    let t = Targets::Regression(ndarray::array![[3.0]]);
    let trace = net.forward(x.view()).unwrap();
    let g = net.backward(&trace, &t, 0.0).unwrap();
    // loss (w x + b - y)^2 with w x - y = -2
    assert_eq!(g.weights[0][[0, 0]], 2.0 * -2.0 * 2.0);
    assert_eq!(g.biases[0][0], 2.0 * -2.0);
}

#[test]
fn three_layer_net_with_two_hundred_parameters() {
    let spec = NetworkSpec {
        input_dim: 6,
        layers: vec![
            LayerSpec::dense(6, 12, Activation::Relu),
            LayerSpec::dense(12, 8, Activation::Relu),
            LayerSpec::dense(8, 2, Activation::Linear),
        ],
        loss: Loss::Mse,
    };
    assert_eq!(spec.parameter_count().unwrap(), 6 * 12 + 12 + 12 * 8 + 8 + 8 * 2 + 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Network::<f64>::init(spec, 5).unwrap();
    let x = random_input(&mut rng, 8, 6);
    let t = regression(&mut rng, 8, 2);
    assert!(max_gradient_error(&net, &x, &t, 1e-5, EPS).unwrap() < TOL);
}

#[test]
fn masked_weights_get_zero_gradient() {
    let spec = NetworkSpec {
        input_dim: 4,
        layers: vec![
            LayerSpec::dense(4, 6, Activation::Relu),
            LayerSpec::dense(6, 2, Activation::Linear),
        ],
        loss: Loss::Mse,
    };
    let mut net = Network::<f64>::init(spec, 3).unwrap();
    phasepos_nn::apply_pruning(&mut net, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_input(&mut rng, 4, 4);
    let t = regression(&mut rng, 4, 2);
    // a non-zero gradient on a masked weight reports an infinite error
    assert!(max_gradient_error(&net, &x, &t, 1e-4, EPS).unwrap() < TOL);
}

#[test]
fn l2_component_is_linear_in_coefficient() {
    let spec = NetworkSpec {
        input_dim: 3,
        layers: vec![LayerSpec::dense(3, 2, Activation::Linear)],
        loss: Loss::Mse,
    };
    let net = Network::<f64>::init(spec, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_input(&mut rng, 4, 3);
    let t = regression(&mut rng, 4, 2);
    let trace = net.forward(x.view()).unwrap();
    let g0 = net.backward(&trace, &t, 0.0).unwrap();
    let g1 = net.backward(&trace, &t, 1e-3).unwrap();
    let g2 = net.backward(&trace, &t, 2e-3).unwrap();
    for ((a, b), c) in g0.weights[0].iter().zip(g1.weights[0].iter()).zip(g2.weights[0].iter()) {
        let r1 = b - a;
        let r2 = c - a;
        assert!((r2 - 2.0 * r1).abs() < 1e-15 + 1e-12 * r1.abs());
    }
}
