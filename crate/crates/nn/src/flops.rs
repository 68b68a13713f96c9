//! Inference FLOP accounting.
//!
//! Each addition, subtraction or multiplication is one FLOP. Bias additions
//! and activations are excluded. Two conventions are reported per layer:
//!
//! * exact: a dense layer costs `n_o * (2 n_i - 1)`, a convolution costs
//!   `(2 k - 1)` per output element for a `k`-element kernel;
//! * approximate: a dense layer costs `2 n_i n_o`; convolutions are the same
//!   as exact.
//!
//! Closed-form model costs use the approximate convention over the layers
//! with [`FlopScope::Counted`], scaled by the keep fraction (1 - sparsity).

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::spec::{Node, Plan};
use crate::{FlopScope, Network, NetworkSpec, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    /// `trunk/<i>` or `branch/<b>/<i>`.
    pub path: String,
    pub kind: String,
    pub exact: u64,
    pub approx: u64,
    pub scope: FlopScope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub exact_total: u64,
    pub approx_total: u64,
    /// Approximate cost over the counted layers, unpruned.
    pub closed_form: u64,
    pub keep_fraction: f64,
    /// `keep_fraction * closed_form`, rounded to the nearest integer.
    pub scaled: u64,
}

fn node_flops(node: &Node, path: String) -> Option<LayerFlops> {
    match *node {
        Node::Dense {
            inputs,
            outputs,
            scope,
            ..
        } => {
            let (i, o) = (inputs as u64, outputs as u64);
            Some(LayerFlops {
                path,
                kind: "dense".into(),
                exact: o * (2 * i - 1),
                approx: 2 * i * o,
                scope,
            })
        }
        Node::Conv { geom, .. } => {
            let per = 2 * geom.patch_len() as u64 - 1;
            let total = per * geom.filters as u64 * geom.positions() as u64;
            Some(LayerFlops {
                path,
                kind: "conv2d".into(),
                exact: total,
                approx: total,
                scope: FlopScope::Counted,
            })
        }
        Node::Flatten => None,
    }
}

fn plan_flops(plan: &Plan) -> Vec<LayerFlops> {
    let mut out: Vec<LayerFlops> = plan
        .trunk
        .iter()
        .enumerate()
        .filter_map(|(i, n)| node_flops(n, format!("trunk/{i}")))
        .collect();
    for (b, nodes) in plan.branches.iter().enumerate() {
        out.extend(
            nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| node_flops(n, format!("branch/{b}/{i}"))),
        );
    }
    out
}

/// Per-layer tally and closed-form cost of `spec` at the given keep fraction.
pub fn flop_report(spec: &NetworkSpec, keep_fraction: f64) -> Result<FlopReport> {
    let plan = spec.compile()?;
    let layers = plan_flops(&plan);
    let closed_form = layers
        .iter()
        .filter(|l| l.scope == FlopScope::Counted)
        .map(|l| l.approx)
        .sum::<u64>();
    Ok(FlopReport {
        exact_total: layers.iter().map(|l| l.exact).sum(),
        approx_total: layers.iter().map(|l| l.approx).sum(),
        closed_form,
        keep_fraction,
        scaled: (keep_fraction * closed_form as f64).round() as u64,
        layers,
    })
}

/// Closed-form inference FLOPs of `spec` scaled by `keep_fraction`.
pub fn flop_count(spec: &NetworkSpec, keep_fraction: f64) -> Result<u64> {
    Ok(flop_report(spec, keep_fraction)?.scaled)
}

/// Operations tallied by an instrumented forward pass over one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTally {
    pub multiplies: u64,
    pub additions: u64,
    /// Operations that involve only live (unpruned) weights.
    pub sparse_multiplies: u64,
    pub sparse_additions: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.multiplies + self.additions
    }
    pub fn sparse_total(&self) -> u64 {
        self.sparse_multiplies + self.sparse_additions
    }
}

/// Dot product that tallies every operation: one multiply per term and one
/// addition per term after the first.
fn counted_dot<T: Scalar>(terms: impl Iterator<Item = (T, T, bool)>, tally: &mut FlopTally) -> T {
    let mut acc = T::zero();
    let mut first = true;
    let mut first_live = true;
    for (x, w, live) in terms {
        let prod = x * w;
        tally.multiplies += 1;
        if live {
            tally.sparse_multiplies += 1;
        }
        if first {
            acc = prod;
            first = false;
        } else {
            acc = acc + prod;
            tally.additions += 1;
        }
        if live {
            if first_live {
                first_live = false;
            } else {
                tally.sparse_additions += 1;
            }
        }
    }
    acc
}

impl<T: Scalar> Network<T> {
    /// Scalar-loop forward pass of one sample that counts every operation.
    ///
    /// Returns the head outputs (identical in value to [`Network::predict`]
    /// up to summation order) and the per-layer tallies in the order of
    /// [`FlopReport::layers`].
    pub fn forward_counted(&self, sample: ArrayView1<T>) -> Result<(Vec<Array1<T>>, Vec<(String, FlopTally)>)> {
        let x = sample.to_owned().insert_axis(ndarray::Axis(0));
        // shape check via the regular path
        self.forward(x.view())?;
        let plan = self.plan();
        let mut tallies = Vec::new();
        let mut cur = sample.to_owned();
        for (i, node) in plan.trunk.iter().enumerate() {
            let mut t = FlopTally::default();
            cur = self.counted_node(node, cur.view(), &mut t);
            if !matches!(node, Node::Flatten) {
                tallies.push((format!("trunk/{i}"), t));
            }
        }
        if plan.branches.is_empty() {
            return Ok((vec![cur], tallies));
        }
        let mut heads = Vec::new();
        for (b, nodes) in plan.branches.iter().enumerate() {
            let mut h = cur.clone();
            for (i, node) in nodes.iter().enumerate() {
                let mut t = FlopTally::default();
                h = self.counted_node(node, h.view(), &mut t);
                if !matches!(node, Node::Flatten) {
                    tallies.push((format!("branch/{b}/{i}"), t));
                }
            }
            heads.push(h);
        }
        Ok((heads, tallies))
    }

    fn counted_node(&self, node: &Node, x: ArrayView1<T>, tally: &mut FlopTally) -> Array1<T> {
        match *node {
            Node::Dense {
                param,
                outputs,
                activation,
                ..
            } => {
                let p = &self.params[param];
                let mut z = Array1::zeros(outputs);
                for o in 0..outputs {
                    let terms = x
                        .iter()
                        .enumerate()
                        .map(|(i, &xi)| (xi, p.weight[[i, o]], p.mask[[i, o]] != T::zero()));
                    z[o] = counted_dot(terms, tally) + p.bias[o];
                }
                finish(z, activation)
            }
            Node::Conv {
                param,
                geom,
                activation,
            } => {
                let p = &self.params[param];
                let mut z = Array1::zeros(geom.output_len());
                for or in 0..geom.out_rows() {
                    for oc in 0..geom.out_cols() {
                        for f in 0..geom.filters {
                            let terms = (0..geom.kernel_rows).flat_map(|kr| {
                                (0..geom.kernel_cols).map(move |kc| (kr, kc))
                            });
                            let terms = terms.map(|(kr, kc)| {
                                let k = kr * geom.kernel_cols + kc;
                                (
                                    x[(or + kr) * geom.in_cols + oc + kc],
                                    p.weight[[k, f]],
                                    p.mask[[k, f]] != T::zero(),
                                )
                            });
                            let pos = or * geom.out_cols() + oc;
                            z[pos * geom.filters + f] = counted_dot(terms, tally) + p.bias[f];
                        }
                    }
                }
                finish(z, activation)
            }
            Node::Flatten => x.to_owned(),
        }
    }
}

fn finish<T: Scalar>(z: Array1<T>, activation: crate::Activation) -> Array1<T> {
    let mut m = z.insert_axis(ndarray::Axis(0));
    match activation {
        crate::Activation::Linear => {}
        crate::Activation::Relu => m.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() }),
        crate::Activation::Softmax => crate::network::softmax_rows(&mut m),
    }
    m.remove_axis(ndarray::Axis(0))
}
