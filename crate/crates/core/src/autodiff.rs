//! Reverse-mode differentiation over a recorded tape of primitive ops.
//!
//! Nodes are appended in execution order, so the tape is already a
//! topological order and the backward sweep visits each record once, in
//! reverse. An op only saves the tensors its backward needs, and only when
//! one of its inputs takes part in differentiation; everything else can be
//! released as soon as the forward pass no longer needs it.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::{self, DropoutMask, Padding, PoolMode};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        saved_x: Option<Arc<Tensor<T>>>,
        saved_kernel: Option<Arc<Tensor<T>>>,
        stride: usize,
        padding: Padding,
    },
    Pool {
        x: Var,
        input_shape: Vec<usize>,
        window: usize,
        stride: usize,
        mode: PoolMode,
        padding: Padding,
        argmax: Option<Vec<usize>>,
    },
    BatchNorm {
        x: Var,
        beta: Var,
        moving_var: Arc<Tensor<T>>,
        eps: T,
    },
    Dense {
        x: Var,
        weights: Var,
        bias: Var,
        saved_x: Option<Arc<Tensor<T>>>,
        saved_weights: Option<Arc<Tensor<T>>>,
    },
    Relu {
        x: Var,
        output: Arc<Tensor<T>>,
    },
    Softmax {
        x: Var,
        output: Arc<Tensor<T>>,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Reshape {
        x: Var,
        input_shape: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Option<DropoutMask<T>>,
    },
    CrossEntropy {
        probs: Var,
        saved_probs: Arc<Tensor<T>>,
        onehot: Arc<Tensor<T>>,
    },
}

impl<T: Element> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool { .. } => "pool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dense { .. } => "dense",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "crossentropy",
        }
    }
}

struct Node<T: Element> {
    value: Option<Arc<Tensor<T>>>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<T>,
    param: Option<String>,
}

/// Recorded forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T: Element = f32> {
    by_node: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Var>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_node.get(var.0).and_then(Option::as_ref)
    }

    /// Gradients of named trainable parameters, keyed by weight name.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .into_iter()
            .filter_map(|(name, var)| self.by_node[var.0].take().map(|g| (name, g)))
            .collect()
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&grad),
        None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.push_arc(Arc::new(value), requires_grad, op)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, requires_grad: bool, op: Op<T>) -> Var {
        // Saved tensors are only useful to nodes that backward will visit.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape: value.shape().to_vec(),
            value: Some(value),
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant or differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A named parameter. Frozen parameters (`trainable == false`) never
    /// receive a gradient.
    pub fn param(&mut self, name: &str, value: Arc<Tensor<T>>, trainable: bool) -> Var {
        let var = self.push_arc(value, trainable, Op::Leaf);
        self.nodes[var.0].param = Some(name.to_string());
        var
    }

    pub fn value(&self, var: Var) -> Result<&Arc<Tensor<T>>> {
        self.nodes
            .get(var.0)
            .and_then(|n| n.value.as_ref())
            .ok_or_else(|| Error::Graph(format!("value of node {} is not available", var.0)))
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].shape
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Drop the forward value of `var`. Ops that need it for backward hold
    /// their own reference.
    pub fn release(&mut self, var: Var) {
        if let Some(node) = self.nodes.get_mut(var.0) {
            node.value = None;
        }
    }

    fn saved_if(&self, var: Var, needed: bool) -> Result<Option<Arc<Tensor<T>>>> {
        Ok(if needed { Some(self.value(var)?.clone()) } else { None })
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let out = ops::conv2d(self.value(x)?, self.value(kernel)?, stride, padding)?;
        let (gx, gk) = (self.requires_grad(x), self.requires_grad(kernel));
        let op = Op::Conv2d {
            x,
            kernel,
            saved_x: self.saved_if(x, gk)?,
            saved_kernel: self.saved_if(kernel, gx)?,
            stride,
            padding,
        };
        Ok(self.push(out, gx || gk, op))
    }

    pub fn pool2d(
        &mut self,
        x: Var,
        window: usize,
        stride: usize,
        mode: PoolMode,
        padding: Padding,
    ) -> Result<Var> {
        let res = ops::pool2d(self.value(x)?, window, stride, mode, padding)?;
        let rg = self.requires_grad(x);
        let op = Op::Pool {
            x,
            input_shape: self.shape(x).to_vec(),
            window,
            stride,
            mode,
            padding,
            argmax: if rg { res.argmax } else { None },
        };
        Ok(self.push(res.output, rg, op))
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        beta: Var,
        moving_mean: Var,
        moving_var: Var,
        eps: T,
    ) -> Result<Var> {
        let out = ops::batchnorm(
            self.value(x)?,
            self.value(beta)?,
            self.value(moving_mean)?,
            self.value(moving_var)?,
            eps,
        )?;
        let rg = self.requires_grad(x) || self.requires_grad(beta);
        let op = Op::BatchNorm {
            x,
            beta,
            moving_var: self.value(moving_var)?.clone(),
            eps,
        };
        Ok(self.push(out, rg, op))
    }

    pub fn dense(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(x)?, self.value(weights)?, self.value(bias)?)?;
        let gx = self.requires_grad(x);
        let gp = self.requires_grad(weights) || self.requires_grad(bias);
        let op = Op::Dense {
            x,
            weights,
            bias,
            saved_x: self.saved_if(x, gp)?,
            saved_weights: self.saved_if(weights, gx)?,
        };
        Ok(self.push(out, gx || gp, op))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = Arc::new(ops::relu(self.value(x)?));
        let op = Op::Relu {
            x,
            output: out.clone(),
        };
        Ok(self.push_arc(out, self.requires_grad(x), op))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = Arc::new(ops::softmax(self.value(x)?)?);
        let op = Op::Softmax {
            x,
            output: out.clone(),
        };
        Ok(self.push_arc(out, self.requires_grad(x), op))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts
            .iter()
            .map(|&p| self.value(p).map(|v| v.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let out = ops::concat_channels(&values)?;
        let widths = values.iter().map(|v| v.shape()[3]).collect();
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        let op = Op::Concat {
            parts: parts.to_vec(),
            widths,
        };
        Ok(self.push(out, rg, op))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let out = ops::flatten(self.value(x)?)?;
        let op = Op::Reshape {
            x,
            input_shape: self.shape(x).to_vec(),
        };
        Ok(self.push(out, self.requires_grad(x), op))
    }

    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let (out, mask) = ops::dropout(self.value(x)?, rate, training, rng)?;
        let op = Op::Dropout { x, mask };
        Ok(self.push(out, self.requires_grad(x), op))
    }

    /// Scalar categorical cross-entropy of `probs` against constant one-hot targets.
    pub fn crossentropy(&mut self, probs: Var, onehot: Tensor<T>) -> Result<Var> {
        let saved_probs = self.value(probs)?.clone();
        let loss = ops::categorical_crossentropy(&saved_probs, &onehot)?;
        let op = Op::CrossEntropy {
            probs,
            saved_probs,
            onehot: Arc::new(onehot),
        };
        Ok(self.push(Tensor::scalar(loss), self.requires_grad(probs), op))
    }

    /// Propagate d(loss)/d(node) from the scalar `loss` back to every node
    /// that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        let shape = &self.nodes[loss.0].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {shape:?}"),
            ));
        }
        self.backward_from(loss, Tensor::full(shape, T::one()))
    }

    /// Vector-Jacobian product: propagate `seed` (shaped like `output`) back
    /// through the tape.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward);
        }
        if seed.shape() != self.nodes[output.0].shape.as_slice() {
            return Err(Error::shape("backward", seed.shape(), &self.nodes[output.0].shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let missing = |what: &str| {
                Error::Graph(format!("{} node {idx} did not save {what}", node.op.kind()))
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    x,
                    kernel,
                    saved_x,
                    saved_kernel,
                    stride,
                    padding,
                } => {
                    let (nx, nk) = (needs(*x), needs(*kernel));
                    // Only the shapes matter for the operand that is not needed.
                    let xs = match saved_x {
                        Some(t) => t.clone(),
                        None => Arc::new(Tensor::zeros(&self.nodes[x.0].shape)),
                    };
                    let ks = match saved_kernel {
                        Some(t) => t.clone(),
                        None if nx => return Err(missing("kernel")),
                        None => Arc::new(Tensor::zeros(&self.nodes[kernel.0].shape)),
                    };
                    if nk && saved_x.is_none() {
                        return Err(missing("input"));
                    }
                    let (dx, dk) = ops::conv2d_backward(&xs, &ks, &g, *stride, *padding, nx, nk)?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx)?;
                    }
                    if let Some(dk) = dk {
                        accumulate(&mut grads[kernel.0], dk)?;
                    }
                }
                Op::Pool {
                    x,
                    input_shape,
                    window,
                    stride,
                    mode,
                    padding,
                    argmax,
                } => {
                    let dx = ops::pool2d_backward(
                        input_shape,
                        &g,
                        *window,
                        *stride,
                        *mode,
                        *padding,
                        argmax.as_deref(),
                    )?;
                    accumulate(&mut grads[x.0], dx)?;
                }
                Op::BatchNorm {
                    x,
                    beta,
                    moving_var,
                    eps,
                } => {
                    let (dx, db) =
                        ops::batchnorm_backward(&g, moving_var, *eps, needs(*x), needs(*beta))?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx)?;
                    }
                    if let Some(db) = db {
                        accumulate(&mut grads[beta.0], db)?;
                    }
                }
                Op::Dense {
                    x,
                    weights,
                    bias,
                    saved_x,
                    saved_weights,
                } => {
                    let nx = needs(*x);
                    let np = needs(*weights) || needs(*bias);
                    let xs = match saved_x {
                        Some(t) => t.clone(),
                        None if np => return Err(missing("input")),
                        None => Arc::new(Tensor::zeros(&self.nodes[x.0].shape)),
                    };
                    let ws = match saved_weights {
                        Some(t) => t.clone(),
                        None if nx => return Err(missing("weights")),
                        None => Arc::new(Tensor::zeros(&self.nodes[weights.0].shape)),
                    };
                    let (dx, dw, db) = ops::dense_backward(&xs, &ws, &g, nx, np)?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[x.0], dx)?;
                    }
                    if needs(*weights) {
                        accumulate(&mut grads[weights.0], dw.expect("weight gradient"))?;
                    }
                    if needs(*bias) {
                        accumulate(&mut grads[bias.0], db.expect("bias gradient"))?;
                    }
                }
                Op::Relu { x, output } => {
                    accumulate(&mut grads[x.0], ops::relu_backward(output, &g)?)?;
                }
                Op::Softmax { x, output } => {
                    accumulate(&mut grads[x.0], ops::softmax_backward(output, &g)?)?;
                }
                Op::Concat { parts, widths } => {
                    let pieces = ops::split_channels(&g, widths)?;
                    for (p, piece) in parts.iter().zip(pieces) {
                        if needs(*p) {
                            accumulate(&mut grads[p.0], piece)?;
                        }
                    }
                }
                Op::Reshape { x, input_shape } => {
                    accumulate(&mut grads[x.0], g.reshape(input_shape)?)?;
                }
                Op::Dropout { x, mask } => {
                    accumulate(&mut grads[x.0], ops::dropout_backward(&g, mask.as_ref())?)?;
                }
                Op::CrossEntropy {
                    probs,
                    saved_probs,
                    onehot,
                } => {
                    let scale = g.data()[0];
                    let dp = ops::categorical_crossentropy_backward(saved_probs, onehot, scale)?;
                    accumulate(&mut grads[probs.0], dp)?;
                }
            }
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad)
            .filter_map(|(i, n)| n.param.clone().map(|name| (name, Var(i))))
            .collect();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }
}
