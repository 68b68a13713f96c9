//! Parameter storage, forward pass and backpropagation.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::loss::{self, Targets};
use crate::spec::{ConvGeometry, Node, Plan};
use crate::{Activation, NetworkSpec, NnError, Result, Scalar};

/// Weights, biases and pruning mask of one dense or convolution layer.
///
/// Dense weights are `(inputs, outputs)`; convolution kernels are
/// `(kernel_rows * kernel_cols, filters)`. The mask holds `1` for live
/// weights and `0` for pruned ones; pruned weights are kept at exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub mask: Array2<T>,
}

impl<T: Scalar> ParamBlock<T> {
    fn zeros(rows: usize, cols: usize) -> Self {
        ParamBlock {
            weight: Array2::zeros((rows, cols)),
            bias: Array1::zeros(cols),
            mask: Array2::ones((rows, cols)),
        }
    }

    pub fn pruned_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == T::zero()).count()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned_count() as f64 / self.mask.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct Network<T = f64> {
    spec: NetworkSpec,
    plan: Plan,
    pub params: Vec<ParamBlock<T>>,
}

/// Activations retained by a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// `trunk[0]` is the input; `trunk[i + 1]` is the output of trunk layer `i`.
    pub trunk: Vec<Array2<T>>,
    /// Outputs of each branch layer, in order.
    pub branches: Vec<Vec<Array2<T>>>,
}

impl<T: Clone> Trace<T> {
    /// Head outputs: one matrix per branch, or the trunk output.
    pub fn outputs(&self) -> Vec<&Array2<T>> {
        if self.branches.is_empty() {
            vec![self.trunk.last().expect("trunk holds the input")]
        } else {
            self.branches
                .iter()
                .map(|b| b.last().expect("branches are non-empty"))
                .collect()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> Network<T> {
    /// All-zero parameters with full masks.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let plan = spec.compile()?;
        let params = plan
            .param_shapes
            .iter()
            .map(|&(r, c)| ParamBlock::zeros(r, c))
            .collect();
        Ok(Network { spec, plan, params })
    }

    /// Seeded initialisation: He-uniform for ReLU layers, Glorot-uniform for
    /// linear and softmax layers, zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<Node> = net
            .plan
            .trunk
            .iter()
            .chain(net.plan.branches.iter().flatten())
            .cloned()
            .collect();
        for node in nodes {
            let (param, fan_in, fan_out, act) = match node {
                Node::Dense {
                    param,
                    inputs,
                    outputs,
                    activation,
                    ..
                } => (param, inputs, outputs, activation),
                Node::Conv {
                    param,
                    geom,
                    activation,
                } => (param, geom.patch_len(), geom.patch_len() * geom.filters, activation),
                Node::Flatten => continue,
            };
            let limit = match act {
                Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            };
            for w in net.params[param].weight.iter_mut() {
                *w = T::of_f64(rng.random_range(-limit..limit));
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from a spec and stored parameter blocks.
    pub fn from_params(spec: NetworkSpec, params: Vec<ParamBlock<T>>) -> Result<Self> {
        let plan = spec.compile()?;
        if params.len() != plan.param_shapes.len() {
            return Err(NnError::Shape(format!(
                "expected {} parameter blocks, got {}",
                plan.param_shapes.len(),
                params.len()
            )));
        }
        for (p, &(r, c)) in params.iter().zip(&plan.param_shapes) {
            if p.weight.dim() != (r, c) || p.mask.dim() != (r, c) || p.bias.len() != c {
                return Err(NnError::Shape(format!("parameter block does not match {r}x{c}")));
            }
        }
        Ok(Network { spec, plan, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn head_widths(&self) -> &[usize] {
        &self.plan.head_widths
    }

    pub fn is_branched(&self) -> bool {
        self.plan.is_branched()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Converts to another element type (e.g. an `f32` training copy).
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |a: &Array2<T>| a.mapv(|v| U::of_f64(v.as_f64()));
        Network {
            spec: self.spec.clone(),
            plan: self.plan.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamBlock {
                    weight: conv(&p.weight),
                    bias: p.bias.mapv(|v| U::of_f64(v.as_f64())),
                    mask: conv(&p.mask),
                })
                .collect(),
        }
    }

    pub(crate) fn plan(&self) -> &Plan {
        &self.plan
    }

    /// Forward pass retaining every activation.
    pub fn forward(&self, input: ArrayView2<T>) -> Result<Trace<T>> {
        if input.ncols() != self.spec.input_dim {
            return Err(NnError::Shape(format!(
                "input has {} features, network expects {}",
                input.ncols(),
                self.spec.input_dim
            )));
        }
        let mut trunk = Vec::with_capacity(self.plan.trunk.len() + 1);
        trunk.push(input.to_owned());
        for node in &self.plan.trunk {
            let next = self.apply(node, trunk.last().expect("non-empty").view());
            trunk.push(next);
        }
        let shared = trunk.last().expect("non-empty");
        let branches = self
            .plan
            .branches
            .iter()
            .map(|nodes| {
                let mut outs: Vec<Array2<T>> = Vec::with_capacity(nodes.len());
                for node in nodes {
                    let x = outs.last().unwrap_or(shared).view();
                    let y = self.apply(node, x);
                    outs.push(y);
                }
                outs
            })
            .collect();
        Ok(Trace { trunk, branches })
    }

    /// Head outputs only.
    pub fn predict(&self, input: ArrayView2<T>) -> Result<Vec<Array2<T>>> {
        let trace = self.forward(input)?;
        Ok(trace.outputs().into_iter().cloned().collect())
    }

    fn apply(&self, node: &Node, x: ArrayView2<T>) -> Array2<T> {
        match *node {
            Node::Dense { param, activation, .. } => {
                let p = &self.params[param];
                let mut z = x.dot(&p.weight);
                z += &p.bias;
                activate(&mut z, activation);
                z
            }
            Node::Conv {
                param,
                geom,
                activation,
            } => {
                let p = &self.params[param];
                let patches = im2col(x, &geom);
                let mut z = patches.dot(&p.weight);
                z += &p.bias;
                activate(&mut z, activation);
                z.into_shape_with_order((x.nrows(), geom.output_len()))
                    .expect("contiguous conv output")
            }
            Node::Flatten => x.to_owned(),
        }
    }

    /// Data loss plus `l2 * sum(w^2)` over all weights.
    pub fn loss(&self, input: ArrayView2<T>, targets: &Targets, l2: f64) -> Result<f64> {
        let trace = self.forward(input)?;
        Ok(loss::data_loss(&trace.outputs(), targets, self.spec.loss)? + l2 * self.l2_penalty())
    }

    pub fn l2_penalty(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.weight.iter().map(|w| w.as_f64() * w.as_f64()).sum::<f64>())
            .sum()
    }

    /// Exact gradients of the data loss plus the L2 penalty. Pruned weights
    /// receive zero gradient.
    pub fn backward(&self, trace: &Trace<T>, targets: &Targets, l2: f64) -> Result<Gradients<T>> {
        let outputs = trace.outputs();
        let head_grads = loss::head_gradients(&outputs, targets, self.spec.loss)?;
        let mut grads = Gradients {
            weights: self.params.iter().map(|p| Array2::zeros(p.weight.dim())).collect(),
            biases: self.params.iter().map(|p| Array1::zeros(p.bias.len())).collect(),
        };
        let trunk_out = trace.trunk.last().expect("non-empty");
        let trunk_grad = if self.plan.is_branched() {
            let mut acc = Array2::<T>::zeros(trunk_out.dim());
            for ((nodes, outs), g) in self.plan.branches.iter().zip(&trace.branches).zip(head_grads) {
                let mut inputs: Vec<&Array2<T>> = Vec::with_capacity(nodes.len() + 1);
                inputs.push(trunk_out);
                inputs.extend(outs.iter());
                let d = self.backprop_chain(nodes, &inputs, g, true, true, &mut grads);
                acc += &d.expect("branch input gradient");
            }
            acc
        } else {
            head_grads.into_iter().next().expect("single head")
        };
        if !self.plan.trunk.is_empty() {
            let inputs: Vec<&Array2<T>> = trace.trunk.iter().collect();
            let preact = !self.plan.is_branched();
            self.backprop_chain(&self.plan.trunk, &inputs, trunk_grad, preact, false, &mut grads);
        }
        let two_l2 = T::of_f64(2.0 * l2);
        for (g, p) in grads.weights.iter_mut().zip(&self.params) {
            Zip::from(g).and(&p.weight).and(&p.mask).for_each(|g, &w, &m| {
                *g = (*g + two_l2 * w) * m;
            });
        }
        Ok(grads)
    }

    /// Backpropagates through `nodes`. `acts[i]` is the input of node `i` and
    /// `acts[i + 1]` its output. When `head_preact` is set, `grad` is already
    /// the gradient with respect to the last node's pre-activation (the fused
    /// softmax/cross-entropy and linear/MSE cases). Returns the gradient with
    /// respect to the chain input when `want_input_grad` is set.
    fn backprop_chain(
        &self,
        nodes: &[Node],
        acts: &[&Array2<T>],
        mut grad: Array2<T>,
        head_preact: bool,
        want_input_grad: bool,
        grads: &mut Gradients<T>,
    ) -> Option<Array2<T>> {
        for (i, node) in nodes.iter().enumerate().rev() {
            let x = acts[i];
            let y = acts[i + 1];
            let last = i + 1 == nodes.len();
            let need_input_grad = i > 0 || want_input_grad;
            match *node {
                Node::Dense { param, activation, .. } => {
                    if !(last && head_preact) {
                        activation_backward(&mut grad, y, activation);
                    }
                    let p = &self.params[param];
                    grads.weights[param] += &x.t().dot(&grad);
                    grads.biases[param] += &grad.sum_axis(Axis(0));
                    if !need_input_grad {
                        return None;
                    }
                    grad = grad.dot(&p.weight.t());
                }
                Node::Conv {
                    param,
                    geom,
                    activation,
                } => {
                    if !(last && head_preact) {
                        activation_backward(&mut grad, y, activation);
                    }
                    let p = &self.params[param];
                    let batch = x.nrows();
                    let dz = grad
                        .into_shape_with_order((batch * geom.positions(), geom.filters))
                        .expect("contiguous conv gradient");
                    let patches = im2col(x.view(), &geom);
                    grads.weights[param] += &patches.t().dot(&dz);
                    grads.biases[param] += &dz.sum_axis(Axis(0));
                    if !need_input_grad {
                        return None;
                    }
                    let dpatches = dz.dot(&p.weight.t());
                    grad = col2im(dpatches.view(), batch, &geom);
                }
                Node::Flatten => {}
            }
        }
        Some(grad)
    }
}

fn activate<T: Scalar>(z: &mut Array2<T>, activation: Activation) {
    match activation {
        Activation::Linear => {}
        Activation::Relu => z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Softmax => softmax_rows(z),
    }
}

/// Row-wise numerically stable softmax.
pub(crate) fn softmax_rows<T: Scalar>(z: &mut Array2<T>) {
    for mut row in z.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

fn activation_backward<T: Scalar>(grad: &mut Array2<T>, output: &Array2<T>, activation: Activation) {
    match activation {
        Activation::Linear => {}
        Activation::Relu => Zip::from(grad).and(output).for_each(|g, &y| {
            if y <= T::zero() {
                *g = T::zero();
            }
        }),
        Activation::Softmax => {
            // Jacobian-vector product of softmax: y * (g - <g, y>)
            for (mut g, y) in grad.rows_mut().into_iter().zip(output.rows()) {
                let dot = g.iter().zip(y.iter()).fold(T::zero(), |a, (&g, &y)| a + g * y);
                Zip::from(&mut g).and(&y).for_each(|g, &y| *g = y * (*g - dot));
            }
        }
    }
}

/// Gathers every kernel window into a row: `(batch * positions, patch_len)`.
fn im2col<T: Scalar>(x: ArrayView2<T>, g: &ConvGeometry) -> Array2<T> {
    let batch = x.nrows();
    let (orows, ocols) = (g.out_rows(), g.out_cols());
    let mut out = Array2::<T>::zeros((batch * g.positions(), g.patch_len()));
    for b in 0..batch {
        let row = x.row(b);
        for or in 0..orows {
            for oc in 0..ocols {
                let mut dst = out.row_mut(b * g.positions() + or * ocols + oc);
                for kr in 0..g.kernel_rows {
                    let src = (or + kr) * g.in_cols + oc;
                    for kc in 0..g.kernel_cols {
                        dst[kr * g.kernel_cols + kc] = row[src + kc];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds window gradients back onto the input.
fn col2im<T: Scalar>(cols: ArrayView2<T>, batch: usize, g: &ConvGeometry) -> Array2<T> {
    let (orows, ocols) = (g.out_rows(), g.out_cols());
    let mut out = Array2::<T>::zeros((batch, g.in_rows * g.in_cols));
    for b in 0..batch {
        let mut dst = out.row_mut(b);
        for or in 0..orows {
            for oc in 0..ocols {
                let src = cols.row(b * g.positions() + or * ocols + oc);
                for kr in 0..g.kernel_rows {
                    let base = (or + kr) * g.in_cols + oc;
                    for kc in 0..g.kernel_cols {
                        dst[base + kc] = dst[base + kc] + src[kr * g.kernel_cols + kc];
                    }
                }
            }
        }
    }
    out
}

/// Copies the selected rows of `a` into a new matrix.
pub(crate) fn gather_rows<T: Clone + num_traits::Zero>(a: &Array2<T>, rows: &[usize]) -> Array2<T> {
    let mut out = Array2::zeros((rows.len(), a.ncols()));
    for (dst, &r) in rows.iter().enumerate() {
        out.slice_mut(s![dst, ..]).assign(&a.row(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::LayerSpec;
    use crate::Loss;
    use ndarray::array;

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let mut z = Array2::<f64>::zeros((1, 5));
        softmax_rows(&mut z);
        for &p in z.iter() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = NetworkSpec {
            input_dim: 3,
            layers: vec![LayerSpec::dense(3, 3, Activation::Linear)],
            loss: Loss::Mse,
        };
        let mut net = Network::<f64>::zeros(spec).unwrap();
        net.params[0].weight = Array2::eye(3);
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        let y = net.predict(x.view()).unwrap();
        assert_eq!(y[0], x);
    }

    #[test]
    fn conv_output_has_valid_shape() {
        let spec = NetworkSpec {
            input_dim: 38,
            layers: vec![LayerSpec::conv2d(2, 19, 4, (2, 3), Activation::Relu), LayerSpec::Flatten],
            loss: Loss::Mse,
        };
        let net = Network::<f64>::init(spec, 1).unwrap();
        let x = Array2::from_shape_fn((3, 38), |(i, j)| (i * 38 + j) as f64 * 0.01);
        let y = net.predict(x.view()).unwrap();
        assert_eq!(y[0].dim(), (3, 17 * 4));
    }

    #[test]
    fn conv_matches_direct_window_sum() {
        let spec = NetworkSpec {
            input_dim: 10,
            layers: vec![LayerSpec::conv2d(2, 5, 2, (2, 3), Activation::Linear)],
            loss: Loss::Mse,
        };
        let mut net = Network::<f64>::init(spec, 3).unwrap();
        net.params[0].bias = array![0.5, -0.25];
        let x = Array2::from_shape_fn((1, 10), |(_, j)| (j as f64 * 0.7).sin());
        let y = net.predict(x.view()).unwrap().remove(0);
        for oc in 0..3 {
            for f in 0..2 {
                let mut acc = net.params[0].bias[f];
                for kr in 0..2 {
                    for kc in 0..3 {
                        acc += x[[0, kr * 5 + oc + kc]] * net.params[0].weight[[kr * 3 + kc, f]];
                    }
                }
                assert!((y[[0, oc * 2 + f]] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            in_rows: 3,
            in_cols: 6,
            kernel_rows: 2,
            kernel_cols: 3,
            filters: 1,
        };
        let x = Array2::from_shape_fn((2, 18), |(i, j)| ((i * 31 + j * 7) % 11) as f64 - 5.0);
        let c = Array2::from_shape_fn((2 * g.positions(), 6), |(i, j)| ((i * 13 + j * 3) % 7) as f64 - 3.0);
        let lhs: f64 = (&im2col(x.view(), &g) * &c).sum();
        let rhs: f64 = (&x * &col2im(c.view(), 2, &g)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn batch_prediction_matches_single_rows() {
        let spec = NetworkSpec {
            input_dim: 4,
            layers: vec![
                LayerSpec::dense(4, 16, Activation::Relu),
                LayerSpec::dense(16, 2, Activation::Linear),
            ],
            loss: Loss::Mse,
        };
        let net = Network::<f64>::init(spec, 9).unwrap();
        let x = Array2::from_shape_fn((7, 4), |(i, j)| ((i * 4 + j) as f64).cos());
        let batch = net.predict(x.view()).unwrap().remove(0);
        for i in 0..7 {
            let one = net.predict(x.slice(s![i..i + 1, ..])).unwrap().remove(0);
            for j in 0..2 {
                assert!((one[[0, j]] - batch[[i, j]]).abs() <= 1e-12 * (1.0 + batch[[i, j]].abs()));
            }
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let spec = NetworkSpec {
            input_dim: 4,
            layers: vec![LayerSpec::dense(4, 2, Activation::Linear)],
            loss: Loss::Mse,
        };
        let net = Network::<f64>::init(spec, 1).unwrap();
        let x = Array2::<f64>::zeros((2, 3));
        assert!(matches!(net.predict(x.view()), Err(NnError::Shape(_))));
    }
}
