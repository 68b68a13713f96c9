//! Adam optimiser.

use ndarray::{Array, Array1, Array2, Dimension};
use serde::{Deserialize, Serialize};

use crate::{Gradients, Network, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m_weights: Vec<Array2<T>>,
    pub v_weights: Vec<Array2<T>>,
    pub m_biases: Vec<Array1<T>>,
    pub v_biases: Vec<Array1<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Self {
        let zw = || net.params.iter().map(|p| Array2::zeros(p.weight.dim())).collect();
        let zb = || net.params.iter().map(|p| Array1::zeros(p.bias.len())).collect();
        Adam {
            config,
            step: 0,
            m_weights: zw(),
            v_weights: zw(),
            m_biases: zb(),
            v_biases: zb(),
        }
    }

    /// One bias-corrected Adam update. Pruned weights stay at zero.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of_f64(c.beta1);
        let b2 = T::of_f64(c.beta2);
        let one = T::one();
        // lr * sqrt(1 - b2^t) / (1 - b1^t), with epsilon scaled to match the
        // textbook form lr * m_hat / (sqrt(v_hat) + eps).
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr_t = T::of_f64(c.learning_rate / bc1);
        let inv_sqrt_bc2 = T::of_f64(1.0 / bc2.sqrt());
        let eps = T::of_f64(c.epsilon);
        let k = Coefficients {
            b1,
            b2,
            one_minus_b1: one - b1,
            one_minus_b2: one - b2,
            lr_t,
            inv_sqrt_bc2,
            eps,
            tiny: T::min_positive_value().sqrt(),
        };
        for (i, p) in net.params.iter_mut().enumerate() {
            k.update(
                slice_mut(&mut p.weight),
                Some(slice(&p.mask)),
                slice_mut(&mut self.m_weights[i]),
                slice_mut(&mut self.v_weights[i]),
                slice(&grads.weights[i]),
            );
            k.update(
                slice_mut(&mut p.bias),
                None,
                slice_mut(&mut self.m_biases[i]),
                slice_mut(&mut self.v_biases[i]),
                slice(&grads.biases[i]),
            );
        }
    }
}

fn slice<T, D: Dimension>(a: &Array<T, D>) -> &[T] {
    a.as_slice().expect("parameters are stored in standard layout")
}

fn slice_mut<T, D: Dimension>(a: &mut Array<T, D>) -> &mut [T] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

struct Coefficients<T> {
    b1: T,
    b2: T,
    one_minus_b1: T,
    one_minus_b2: T,
    lr_t: T,
    inv_sqrt_bc2: T,
    eps: T,
    tiny: T,
}

impl<T: Scalar> Coefficients<T> {
    /// Updates one parameter block in place over flat slices.
    fn update(&self, w: &mut [T], mask: Option<&[T]>, m: &mut [T], v: &mut [T], g: &[T]) {
        let n = w.len();
        assert!(m.len() == n && v.len() == n && g.len() == n && mask.is_none_or(|k| k.len() == n));
        for j in 0..n {
            let gj = flush_below(g[j], self.tiny);
            let mj = flush(self.b1 * m[j] + self.one_minus_b1 * gj);
            let vj = flush(self.b2 * v[j] + self.one_minus_b2 * gj * gj);
            m[j] = mj;
            v[j] = vj;
            let mut wj = w[j] - self.lr_t * mj / (vj.sqrt() * self.inv_sqrt_bc2 + self.eps);
            if let Some(mask) = mask {
                wj = wj * mask[j];
            }
            w[j] = flush_below(wj, self.tiny);
        }
    }
}

/// Zeroes subnormal values.
#[inline]
fn flush<T: Scalar>(x: T) -> T {
    flush_below(x, T::min_positive_value())
}

/// Zeroes values smaller in magnitude than `tiny`. Gradients and parameters
/// use the square root of the smallest normal number, above which no product
/// of two values underflows.
#[inline]
fn flush_below<T: Scalar>(x: T, tiny: T) -> T {
    if x.abs() < tiny {
        T::zero()
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Activation, LayerSpec, Loss, NetworkSpec};

    fn single_weight() -> Network<f64> {
        let spec = NetworkSpec {
            input_dim: 1,
            layers: vec![LayerSpec::dense(1, 1, Activation::Linear)],
            loss: Loss::Mse,
        };
        let mut net = Network::zeros(spec).unwrap();
        net.params[0].weight[[0, 0]] = 0.3;
        net
    }

    fn grads(g: f64) -> Gradients<f64> {
        Gradients {
            weights: vec![Array2::from_elem((1, 1), g)],
            biases: vec![Array1::zeros(1)],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut net = single_weight();
        let mut adam = Adam::new(&net, AdamConfig::default());
        for _ in 0..50 {
            adam.step(&mut net, &grads(0.0));
        }
        assert_eq!(net.params[0].weight[[0, 0]], 0.3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = single_weight();
        let mut adam = Adam::new(&net, AdamConfig::with_learning_rate(1e-4));
        adam.step(&mut net, &grads(1.0));
        // m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
        let expected = 0.3 - 1e-4 / (1.0 + 1e-8);
        assert!((net.params[0].weight[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn pruned_weight_stays_zero() {
        let mut net = single_weight();
        net.params[0].weight[[0, 0]] = 0.0;
        net.params[0].mask[[0, 0]] = 0.0;
        let mut adam = Adam::new(&net, AdamConfig::with_learning_rate(1e-2));
        for i in 0..1000 {
            adam.step(&mut net, &grads(1.0 + i as f64));
            assert_eq!(net.params[0].weight[[0, 0]], 0.0);
        }
    }

    #[test]
    fn decaying_moments_never_go_subnormal() {
        let mut net = single_weight();
        let mut adam = Adam::new(&net, AdamConfig::default());
        adam.step(&mut net, &grads(1.0));
        for _ in 0..10_000 {
            adam.step(&mut net, &grads(0.0));
            for x in [adam.m_weights[0][[0, 0]], adam.v_weights[0][[0, 0]]] {
                assert!(x == 0.0 || x.is_normal(), "{x:e}");
            }
        }
        assert_eq!(adam.m_weights[0][[0, 0]], 0.0);
    }

    #[test]
    fn negligible_weights_snap_to_zero() {
        let mut net = single_weight();
        net.params[0].weight[[0, 0]] = 1e-200;
        net.params[0].bias[0] = -1e-160;
        let mut adam = Adam::new(&net, AdamConfig::default());
        adam.step(&mut net, &grads(0.0));
        assert_eq!(net.params[0].weight[[0, 0]], 0.0);
        assert_eq!(net.params[0].bias[0], 0.0);
    }
}
