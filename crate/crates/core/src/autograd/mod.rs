//! Reverse-mode differentiation over a recorded tape of tensor kernels.
//!
//! A [`Tape`] stores every forward value in execution order. [`Tape::backward`]
//! walks it in exact reverse and returns a [`GradMap`] holding the gradient of
//! every differentiable leaf. The tape is not consumed, so backward can be run
//! repeatedly with identical results.
//!
//! Each node also carries a scope path (`stage1.block0.catm.phi_q`) and a MAC
//! count under the counting convention of [`crate::accounting`], which makes
//! the tape the instrumentation source for structural audits and cost traces.

mod gradcheck;

pub use gradcheck::{finite_diff_grad, grad_check, grad_check_module, GradCheckEntry, GradCheckReport};

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{
    self, activation, activation_grad, avg_pool2d, avg_pool2d_backward, conv2d, conv2d_backward,
    conv2d_macs, global_avg_pool, matmul, reduce_to_shape, softmax, softmax_backward,
    transpose_last, Activation, BatchNormMode, BatchStats, BinaryOp, ConvSpec, Padding, Scalar,
    Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kernel kind of a recorded node, as reported by structural audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BatchNorm,
    Activation,
    GlobalAvgPool,
    AvgPool,
    Add,
    Sub,
    Mul,
    Scale,
    Matmul,
    Transpose,
    Softmax,
    Sum,
    Mean,
    Reshape,
    ToTokens,
    FromTokens,
    L2Normalize,
    CrossEntropy,
    Custom,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Activation => "activation",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::AvgPool => "avg_pool",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::ToTokens => "to_tokens",
            OpKind::FromTokens => "from_tokens",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Custom => "custom",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Forward and backward rule of a user-defined elementwise op.
#[derive(Clone, Copy)]
pub struct CustomRule<T> {
    pub name: &'static str,
    pub forward: fn(&Tensor<T>) -> Tensor<T>,
    /// `(x, dy) -> dx`
    pub backward: fn(&Tensor<T>, &Tensor<T>) -> Tensor<T>,
}

enum Op<T> {
    Leaf,
    Conv2d { spec: ConvSpec, bias: bool },
    BatchNorm { eps: T, mean: Vec<T>, var: Vec<T>, train: bool },
    Activation(Activation),
    GlobalAvgPool,
    AvgPool(usize),
    Binary(BinaryOp),
    Scale(T),
    Matmul,
    Transpose,
    Softmax(usize),
    Sum,
    Mean,
    Reshape,
    ToTokens { h: usize, w: usize },
    FromTokens,
    L2Normalize,
    CrossEntropy { targets: Vec<usize>, smoothing: T, probs: Tensor<T> },
    Custom(CustomRule<T>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Activation(_) => OpKind::Activation,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::AvgPool(_) => OpKind::AvgPool,
            Op::Binary(BinaryOp::Add) => OpKind::Add,
            Op::Binary(BinaryOp::Sub) => OpKind::Sub,
            Op::Binary(BinaryOp::Mul) => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Matmul => OpKind::Matmul,
            Op::Transpose => OpKind::Transpose,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Reshape => OpKind::Reshape,
            Op::ToTokens { .. } => OpKind::ToTokens,
            Op::FromTokens => OpKind::FromTokens,
            Op::L2Normalize => OpKind::L2Normalize,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Custom(_) => OpKind::Custom,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    scope: usize,
    label: Option<String>,
    requires_grad: bool,
    /// Derived only from a global-pool summary (no H*W-proportional work downstream).
    summary: bool,
    macs: u64,
}

/// Read-only view of one recorded node.
#[derive(Debug, Clone, Copy)]
pub struct NodeInfo<'a> {
    pub var: Var,
    pub kind: OpKind,
    pub scope: &'a str,
    /// Parameter name for named leaves, running-stat name for batch norms.
    pub label: Option<&'a str>,
    pub shape: &'a [usize],
    pub macs: u64,
    pub summary: bool,
}

/// Batch statistics captured by a train-mode batch norm, keyed by its parameter prefix.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub name: String,
    pub stats: BatchStats<T>,
}

/// Recorded computation graph of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scopes: Vec<String>,
    scope_stack: Vec<usize>,
    padding: Padding,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scopes: vec![String::new()],
            scope_stack: vec![0],
            padding: Padding::Zero,
            stat_updates: Vec::new(),
        }
    }

    /// A tape whose convolutions all use `padding` (circular mode is for tests).
    pub fn with_padding(padding: Padding) -> Self {
        Self {
            padding,
            ..Self::new()
        }
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Enters a nested scope; node scopes are dot-joined paths.
    pub fn push_scope(&mut self, name: &str) {
        let parent = &self.scopes[*self.scope_stack.last().unwrap()];
        let path = if parent.is_empty() {
            name.to_string()
        } else {
            format!("{parent}.{name}")
        };
        self.scopes.push(path);
        self.scope_stack.push(self.scopes.len() - 1);
    }

    pub fn pop_scope(&mut self) {
        if self.scope_stack.len() > 1 {
            self.scope_stack.pop();
        }
    }

    /// Runs `f` inside scope `name`, popping it on every exit path.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeInfo<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| NodeInfo {
            var: Var(i),
            kind: n.op.kind(),
            scope: &self.scopes[n.scope],
            label: n.label.as_deref(),
            shape: n.value.shape(),
            macs: n.macs,
            summary: n.summary,
        })
    }

    /// Smallest `|x|` over all ReLU inputs; finite-difference checks are unreliable near the kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Activation(Activation::Relu)))
            .flat_map(|n| self.nodes[n.inputs[0].0].value.data())
            .map(|v| v.as_f64().abs())
            .reduce(f64::min)
    }

    /// Batch statistics recorded by train-mode batch norms, in forward order.
    pub fn stat_updates(&self) -> &[StatUpdate<T>] {
        &self.stat_updates
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>, macs: u64) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // whether this op only consumes global-pool summaries
        let reads_summary = match &op {
            Op::Leaf | Op::Matmul | Op::CrossEntropy { .. } => false,
            Op::Binary(_) => {
                let mut acts = inputs
                    .iter()
                    .filter(|v| !self.is_named_leaf(**v))
                    .peekable();
                acts.peek().is_some() && acts.all(|v| self.nodes[v.0].summary)
            }
            _ => self.nodes[inputs[0].0].summary,
        };
        let summary = reads_summary || matches!(op, Op::GlobalAvgPool);
        let macs = if reads_summary { 0 } else { macs };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            scope: *self.scope_stack.last().unwrap(),
            label: None,
            requires_grad,
            summary,
            macs,
        });
        Var(self.nodes.len() - 1)
    }

    fn is_named_leaf(&self, v: Var) -> bool {
        let n = &self.nodes[v.0];
        matches!(n.op, Op::Leaf) && n.label.is_some()
    }

    fn leaf_node(&mut self, value: Tensor<T>, requires_grad: bool, label: Option<String>) -> Var {
        let v = self.push(Op::Leaf, vec![], value, 0);
        let node = &mut self.nodes[v.0];
        node.requires_grad = requires_grad;
        node.label = label;
        v
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf_node(value, false, None)
    }

    /// Unnamed differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.leaf_node(value, true, None)
    }

    /// Named differentiable leaf; `name` is the parameter path used by [`GradMap::by_name`].
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        self.leaf_node(value.clone(), true, Some(name.to_string()))
    }

    /// Named leaf that is read but never differentiated (running statistics, frozen weights).
    pub fn constant(&mut self, name: &str, value: &Tensor<T>) -> Var {
        self.leaf_node(value.clone(), false, Some(name.to_string()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let spec = if spec.padding != (0, 0) {
            spec.with_mode(self.padding)
        } else {
            spec
        };
        let value = conv2d(self.value(x), self.value(w), bias.map(|b| self.value(b)), &spec)?;
        let macs = conv2d_macs(self.shape(x), self.shape(w), &spec);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { spec, bias: bias.is_some() }, inputs, value, macs))
    }

    /// Batch norm over `[B, C, H, W]`.
    ///
    /// Train mode normalises with batch statistics and records them under
    /// `name` for a later running-stat update; eval mode uses the running stats.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        name: &str,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: BatchNormMode,
        eps: T,
    ) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config("batchnorm eps must be positive".into()));
        }
        let [_, c, _, _] = self.value(x).dims4("batchnorm2d")?;
        tensor::check_bn_params(c, &[self.value(gamma), self.value(beta), running_mean, running_var])?;
        let (mean, var, train) = match mode {
            BatchNormMode::Train => {
                let stats = BatchStats::compute(self.value(x))?;
                let out = (stats.mean.clone(), stats.var.clone(), true);
                self.stat_updates.push(StatUpdate {
                    name: name.to_string(),
                    stats,
                });
                out
            }
            BatchNormMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec(), false),
        };
        let value = tensor::bn_normalize(self.value(x), &mean, &var, self.value(gamma), self.value(beta), eps)?;
        let v = self.push(
            Op::BatchNorm { eps, mean, var, train },
            vec![x, gamma, beta],
            value,
            0,
        );
        self.nodes[v.0].label = Some(name.to_string());
        Ok(v)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = activation(self.value(x), kind);
        self.push(Op::Activation(kind), vec![x], value, 0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = global_avg_pool(self.value(x))?;
        let macs = self.value(x).numel() as u64;
        Ok(self.push(Op::GlobalAvgPool, vec![x], value, macs))
    }

    /// Stride-1 `k x k` average pool, padding excluded from averages.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let value = avg_pool2d(self.value(x), k)?;
        let macs = (value.numel() * k * k) as u64;
        Ok(self.push(Op::AvgPool(k), vec![x], value, macs))
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let value = tensor::elementwise(self.value(a), self.value(b), op)?;
        Ok(self.push(Op::Binary(op), vec![a, b], value, 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    /// Elementwise product; recorded as free.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// Product of `x` with a broadcast map (an attention gate); one MAC per output element.
    pub fn gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let value = tensor::mul(self.value(x), self.value(g))?;
        let macs = value.numel() as u64;
        Ok(self.push(Op::Binary(BinaryOp::Mul), vec![x, g], value, macs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).scale(s);
        self.push(Op::Scale(s), vec![x], value, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let k = *self.shape(a).last().unwrap() as u64;
        let macs = value.numel() as u64 * k;
        Ok(self.push(Op::Matmul, vec![a, b], value, macs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = transpose_last(self.value(x))?;
        Ok(self.push(Op::Transpose, vec![x], value, 0))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax(axis), vec![x], value, 0))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value, 0)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push(Op::Mean, vec![x], value, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value, 0))
    }

    /// `[B, C, H, W]` feature map to a `[B, H*W, C]` token sequence.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let [_, _, h, w] = self.value(x).dims4("to_tokens")?;
        let value = self.value(x).to_tokens()?;
        Ok(self.push(Op::ToTokens { h, w }, vec![x], value, 0))
    }

    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let value = self.value(x).from_tokens(h, w)?;
        Ok(self.push(Op::FromTokens, vec![x], value, 0))
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", "rank-0 input"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = l2_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(Op::L2Normalize, vec![x], value, 0))
    }

    /// Mean label-smoothed cross entropy of `[B, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: T) -> Result<Var> {
        let (b, k) = match self.shape(logits) {
            &[b, k] => (b, k),
            s => return Err(Error::shape("cross_entropy", format!("logits must be [B, K], got {s:?}"))),
        };
        if targets.len() != b || targets.iter().any(|&t| t >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {b} rows of {k} classes", targets.len()),
            ));
        }
        let probs = softmax(self.value(logits), 1)?;
        let off = smoothing / T::of(k as f64);
        let on = T::one() - smoothing + off;
        let mut total = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            let lp = &self.value(logits).data()[row * k..(row + 1) * k];
            let mx = lp.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = lp.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for (j, &v) in lp.iter().enumerate() {
                let q = if j == t { on } else { off };
                total -= q * (v - lse);
            }
        }
        let value = Tensor::scalar(total / T::of(b as f64));
        Ok(self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            vec![logits],
            value,
            0,
        ))
    }

    pub fn custom(&mut self, x: Var, rule: CustomRule<T>) -> Var {
        let value = (rule.forward)(self.value(x));
        self.push(Op::Custom(rule), vec![x], value, 0)
    }

    /// Gradients of the scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<GradMap<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Autograd(format!("node {} is not on this tape", loss.0)))?;
        if node.value.numel() != 1 {
            return Err(Error::Autograd(format!(
                "loss must be a scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(node.value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let input_grads = self.node_backward(node, &dy)?;
            for (&inp, g) in node.inputs.iter().zip(input_grads) {
                let (Some(g), true) = (g, self.nodes[inp.0].requires_grad) else {
                    continue;
                };
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *v;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        let mut map = GradMap {
            grads: HashMap::new(),
            names: HashMap::new(),
        };
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()));
                if let Some(name) = &n.label {
                    map.names.insert(name.clone(), Var(i));
                }
                map.grads.insert(Var(i), g);
            }
        }
        Ok(map)
    }

    fn node_backward(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { spec, bias } => {
                let (dx, dw, db) = conv2d_backward(input(0), input(1), dy, spec, *bias)?;
                let mut out = vec![Some(dx), Some(dw)];
                if *bias {
                    out.push(db);
                }
                out
            }
            Op::BatchNorm { eps, mean, var, train } => {
                bn_backward(input(0), input(1), dy, mean, var, *eps, *train)?
            }
            Op::Activation(kind) => vec![Some(activation_grad(input(0), &node.value, dy, *kind))],
            Op::GlobalAvgPool => {
                let x = input(0);
                let [_, _, h, w] = x.dims4("global_avg_pool")?;
                let inv = T::one() / T::of((h * w) as f64);
                let mut dx = Vec::with_capacity(x.numel());
                for &g in dy.data() {
                    dx.extend(std::iter::repeat_n(g * inv, h * w));
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::AvgPool(k) => vec![Some(avg_pool2d_backward(dy, *k)?)],
            Op::Binary(op) => {
                let (a, b) = (input(0), input(1));
                let (da, db) = match op {
                    BinaryOp::Add => (
                        wants(0).then(|| reduce_to_shape(dy, a.shape())).transpose()?,
                        wants(1).then(|| reduce_to_shape(dy, b.shape())).transpose()?,
                    ),
                    BinaryOp::Sub => (
                        wants(0).then(|| reduce_to_shape(dy, a.shape())).transpose()?,
                        wants(1)
                            .then(|| reduce_to_shape(&dy.scale(-T::one()), b.shape()))
                            .transpose()?,
                    ),
                    BinaryOp::Mul => (
                        wants(0)
                            .then(|| reduce_to_shape(&tensor::mul(dy, b)?, a.shape()))
                            .transpose()?,
                        wants(1)
                            .then(|| reduce_to_shape(&tensor::mul(dy, a)?, b.shape()))
                            .transpose()?,
                    ),
                };
                vec![da, db]
            }
            Op::Scale(s) => vec![Some(dy.scale(*s))],
            Op::Matmul => {
                let (a, b) = (input(0), input(1));
                let da = wants(0)
                    .then(|| reduce_to_shape(&matmul(dy, &transpose_last(b)?)?, a.shape()))
                    .transpose()?;
                let db = wants(1)
                    .then(|| reduce_to_shape(&matmul(&transpose_last(a)?, dy)?, b.shape()))
                    .transpose()?;
                vec![da, db]
            }
            Op::Transpose => vec![Some(transpose_last(dy)?)],
            Op::Softmax(axis) => vec![Some(softmax_backward(&node.value, dy, *axis))],
            Op::Sum => {
                let g = dy.data()[0];
                vec![Some(Tensor::full(input(0).shape().to_vec(), g))]
            }
            Op::Mean => {
                let x = input(0);
                let g = dy.data()[0] / T::of(x.numel() as f64);
                vec![Some(Tensor::full(x.shape().to_vec(), g))]
            }
            Op::Reshape => vec![Some(dy.reshape(input(0).shape())?)],
            Op::ToTokens { h, w } => vec![Some(dy.from_tokens(*h, *w)?)],
            Op::FromTokens => vec![Some(dy.to_tokens()?)],
            Op::L2Normalize => {
                let x = input(0);
                let d = *x.shape().last().unwrap();
                let mut dx = vec![T::zero(); x.numel()];
                for ((xr, (yr, gr)), out) in x
                    .data()
                    .chunks(d)
                    .zip(node.value.data().chunks(d).zip(dy.data().chunks(d)))
                    .zip(dx.chunks_mut(d))
                {
                    let n = l2_norm(xr);
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((o, &y), &g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = (g - y * dot) / n;
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Op::CrossEntropy {
                targets,
                smoothing,
                probs,
            } => {
                let k = probs.shape()[1];
                let b = targets.len();
                let off = *smoothing / T::of(k as f64);
                let on = T::one() - *smoothing + off;
                let scale = dy.data()[0] / T::of(b as f64);
                let mut g = probs.data().to_vec();
                for (row, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let q = if j == t { on } else { off };
                        g[row * k + j] = (g[row * k + j] - q) * scale;
                    }
                }
                vec![Some(Tensor::new(probs.shape().to_vec(), g)?)]
            }
            Op::Custom(rule) => vec![Some((rule.backward)(input(0), dy))],
        })
    }
}

fn l2_norm<T: Scalar>(row: &[T]) -> T {
    let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
    n.max(T::of(1e-12))
}

/// Batch-norm gradients for `[x, gamma, beta]`.
fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: T,
    train: bool,
) -> Result<Vec<Option<Tensor<T>>>> {
    let [b, c, h, w] = x.dims4("batchnorm2d")?;
    let plane = h * w;
    let n = T::of((b * plane) as f64);
    let (xd, gd) = (x.data(), dy.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ci in 0..c {
        let inv_std = T::one() / (var[ci] + eps).sqrt();
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for bi in 0..b {
            let s = (bi * c + ci) * plane;
            for j in s..s + plane {
                let xhat = (xd[j] - mean[ci]) * inv_std;
                sum_g += gd[j];
                sum_gx += gd[j] * xhat;
            }
        }
        dgamma[ci] = sum_gx;
        dbeta[ci] = sum_g;
        let g = gamma.data()[ci];
        for bi in 0..b {
            let s = (bi * c + ci) * plane;
            for j in s..s + plane {
                dx[j] = if train {
                    let xhat = (xd[j] - mean[ci]) * inv_std;
                    g * inv_std * (gd[j] - sum_g / n - xhat * sum_gx / n)
                } else {
                    g * inv_std * gd[j]
                };
            }
        }
    }
    Ok(vec![
        Some(Tensor::new(x.shape().to_vec(), dx)?),
        Some(Tensor::new([c], dgamma)?),
        Some(Tensor::new([c], dbeta)?),
    ])
}

/// Gradient of each differentiable leaf; entries for unreached leaves are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMap<T> {
    grads: HashMap<Var, Tensor<T>>,
    names: HashMap<String, Var>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.get(name).and_then(|v| self.grads.get(v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }
}
