//! Network topology descriptors.

use serde::{Deserialize, Serialize};

use crate::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Softmax,
}

/// Whether a layer contributes to the closed-form FLOP figure of its model.
///
/// Exact tallies always include every layer; some published closed forms
/// leave out the input projection and the regression output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopScope {
    #[default]
    Counted,
    Neglected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
        #[serde(default)]
        flop_scope: FlopScope,
    },
    /// Valid (unpadded) convolution with stride 1 over a single-channel
    /// `(rows, cols)` input.
    Conv2d {
        in_rows: usize,
        in_cols: usize,
        filters: usize,
        kernel_rows: usize,
        kernel_cols: usize,
        activation: Activation,
    },
    Flatten,
    /// Parallel heads that all consume the output of the preceding layer.
    /// Must be the last layer of a network.
    Branch { branches: Vec<Vec<LayerSpec>> },
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
            flop_scope: FlopScope::Counted,
        }
    }

    pub fn conv2d(in_rows: usize, in_cols: usize, filters: usize, kernel: (usize, usize), activation: Activation) -> Self {
        LayerSpec::Conv2d {
            in_rows,
            in_cols,
            filters,
            kernel_rows: kernel.0,
            kernel_cols: kernel.1,
            activation,
        }
    }

    /// Marks a dense layer as excluded from the closed-form FLOP figure.
    pub fn neglected(self) -> Self {
        match self {
            LayerSpec::Dense {
                inputs,
                outputs,
                activation,
                ..
            } => LayerSpec::Dense {
                inputs,
                outputs,
                activation,
                flop_scope: FlopScope::Neglected,
            },
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    Scce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
}

/// Geometry of a convolution layer after validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_rows: usize,
    pub in_cols: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    pub filters: usize,
}

impl ConvGeometry {
    pub fn out_rows(&self) -> usize {
        self.in_rows - self.kernel_rows + 1
    }
    pub fn out_cols(&self) -> usize {
        self.in_cols - self.kernel_cols + 1
    }
    pub fn positions(&self) -> usize {
        self.out_rows() * self.out_cols()
    }
    pub fn patch_len(&self) -> usize {
        self.kernel_rows * self.kernel_cols
    }
    pub fn output_len(&self) -> usize {
        self.positions() * self.filters
    }
}

/// A validated layer, with the index of its parameter block when it has one.
#[derive(Clone, Debug)]
pub(crate) enum Node {
    Dense {
        param: usize,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        scope: FlopScope,
    },
    Conv {
        param: usize,
        geom: ConvGeometry,
        activation: Activation,
    },
    Flatten,
}

/// Validated execution plan: a trunk followed by zero or more heads.
/// A network without a `Branch` has its trunk output as its single head.
#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub trunk: Vec<Node>,
    pub branches: Vec<Vec<Node>>,
    /// Shapes `(rows, cols)` of every parameter block in canonical order.
    pub param_shapes: Vec<(usize, usize)>,
    pub head_widths: Vec<usize>,
}

impl Plan {
    pub fn is_branched(&self) -> bool {
        !self.branches.is_empty()
    }
}

impl NetworkSpec {
    /// Checks that layer shapes compose and the loss fits the output layers.
    pub fn validate(&self) -> Result<()> {
        self.compile().map(|_| ())
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .compile()?
            .param_shapes
            .iter()
            .map(|&(r, c)| r * c + c)
            .sum())
    }

    /// Output widths of the heads (one entry for a non-branched network).
    pub fn head_widths(&self) -> Result<Vec<usize>> {
        Ok(self.compile()?.head_widths)
    }

    pub(crate) fn compile(&self) -> Result<Plan> {
        if self.input_dim == 0 {
            return Err(NnError::Spec("input_dim must be positive".into()));
        }
        let mut shapes = Vec::new();
        let mut width = self.input_dim;
        let mut trunk = Vec::new();
        let mut branches = Vec::new();
        let mut last_activation = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Branch { branches: subs } = layer {
                if i + 1 != self.layers.len() {
                    return Err(NnError::Spec("branch must be the last layer".into()));
                }
                if subs.is_empty() {
                    return Err(NnError::Spec("branch needs at least one head".into()));
                }
                for (b, sub) in subs.iter().enumerate() {
                    let mut w = width;
                    let mut nodes = Vec::new();
                    let mut act = None;
                    for l in sub {
                        if matches!(l, LayerSpec::Branch { .. }) {
                            return Err(NnError::Spec("nested branches are not supported".into()));
                        }
                        let (node, out, a) = compile_layer(l, w, &mut shapes)?;
                        nodes.push(node);
                        w = out;
                        act = a.or(act);
                    }
                    if nodes.is_empty() {
                        return Err(NnError::Spec(format!("branch {b} is empty")));
                    }
                    self.check_head(act, &format!("branch {b}"))?;
                    branches.push((nodes, w));
                }
                continue;
            }
            if let Some(Activation::Softmax) = last_activation {
                return Err(NnError::Spec("softmax is only allowed on an output layer".into()));
            }
            let (node, out, act) = compile_layer(layer, width, &mut shapes)?;
            trunk.push(node);
            width = out;
            last_activation = act.or(last_activation);
        }
        let head_widths;
        let branch_nodes;
        if branches.is_empty() {
            self.check_head(last_activation, "output")?;
            head_widths = vec![width];
            branch_nodes = Vec::new();
        } else {
            if let Some(Activation::Softmax) = last_activation {
                return Err(NnError::Spec("softmax before a branch".into()));
            }
            head_widths = branches.iter().map(|(_, w)| *w).collect();
            branch_nodes = branches.into_iter().map(|(n, _)| n).collect();
        }
        Ok(Plan {
            trunk,
            branches: branch_nodes,
            param_shapes: shapes,
            head_widths,
        })
    }

    fn check_head(&self, act: Option<Activation>, name: &str) -> Result<()> {
        match (self.loss, act) {
            (Loss::Scce, Some(Activation::Softmax)) => Ok(()),
            (Loss::Scce, _) => Err(NnError::Spec(format!("{name} must end in softmax for SCCE"))),
            (Loss::Mse, Some(Activation::Softmax)) => {
                Err(NnError::Spec(format!("{name} ends in softmax but loss is MSE")))
            }
            (Loss::Mse, _) => Ok(()),
        }
    }
}

fn compile_layer(
    layer: &LayerSpec,
    width: usize,
    shapes: &mut Vec<(usize, usize)>,
) -> Result<(Node, usize, Option<Activation>)> {
    match *layer {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
            flop_scope,
        } => {
            if inputs != width {
                return Err(NnError::Spec(format!("dense expects {inputs} inputs, previous layer gives {width}")));
            }
            if outputs == 0 {
                return Err(NnError::Spec("dense layer with zero outputs".into()));
            }
            shapes.push((inputs, outputs));
            Ok((
                Node::Dense {
                    param: shapes.len() - 1,
                    inputs,
                    outputs,
                    activation,
                    scope: flop_scope,
                },
                outputs,
                Some(activation),
            ))
        }
        LayerSpec::Conv2d {
            in_rows,
            in_cols,
            filters,
            kernel_rows,
            kernel_cols,
            activation,
        } => {
            if in_rows * in_cols != width {
                return Err(NnError::Spec(format!(
                    "conv input {in_rows}x{in_cols} does not match width {width}"
                )));
            }
            if kernel_rows == 0 || kernel_cols == 0 || kernel_rows > in_rows || kernel_cols > in_cols || filters == 0 {
                return Err(NnError::Spec("conv kernel does not fit its input".into()));
            }
            if activation == Activation::Softmax {
                return Err(NnError::Spec("softmax on a conv layer".into()));
            }
            let geom = ConvGeometry {
                in_rows,
                in_cols,
                kernel_rows,
                kernel_cols,
                filters,
            };
            shapes.push((geom.patch_len(), filters));
            Ok((
                Node::Conv {
                    param: shapes.len() - 1,
                    geom,
                    activation,
                },
                geom.output_len(),
                Some(activation),
            ))
        }
        LayerSpec::Flatten => Ok((Node::Flatten, width, None)),
        LayerSpec::Branch { .. } => unreachable!("branches handled by caller"),
    }
}
