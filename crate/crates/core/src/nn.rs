//! Parameter containers shared by the token mixers and the backbone.
//!
//! Every container implements [`Module`], which enumerates its tensors under
//! dot-joined names. Forward passes register parameters on the tape under the
//! same names, so gradients, optimizer state, checkpoints, and cost reports
//! all agree on one naming scheme.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::{BatchNormMode, ConvSpec, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable parameter.
    Weight,
    /// State updated outside the optimizer (batch-norm running statistics).
    Buffer,
}

pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind));

    /// Number of learnable elements.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, k| {
            if k == ParamKind::Weight {
                n += t.numel();
            }
        });
        n
    }

    /// All tensors with their names, in visiting order.
    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>, ParamKind)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t, k| out.push((n.to_string(), t.clone(), k)));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Truncated normal (cut at two standard deviations) with the given std.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
}

pub const INIT_STD: f64 = 0.02;

/// Convolution weights plus optional bias; the geometry is configuration, not state.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv<T> {
    pub fn new(cin: usize, cout: usize, spec: ConvSpec, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let (kh, kw) = spec.kernel;
        Self {
            weight: trunc_normal(&[cout, cin / spec.groups, kh, kw], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros([cout])),
            spec,
        }
    }

    /// `k x k` depthwise, stride 1, same padding.
    pub fn depthwise(c: usize, k: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self::new(c, c, ConvSpec::same(k, c), bias, rng)
    }

    /// Dense 1x1 (`groups = 1`).
    pub fn pointwise(cin: usize, cout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self::new(cin, cout, ConvSpec::same(1, 1), bias, rng)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.spec.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let w = tape.param(&join(name, "weight"), &self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(&join(name, "bias"), b));
        tape.conv2d(x, w, b, self.spec)
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Weight);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Weight);
        }
    }
}

/// Per-channel affine normalisation with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(c: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::ones([c]),
            beta: Tensor::zeros([c]),
            running_mean: Tensor::zeros([c]),
            running_var: Tensor::ones([c]),
            eps: T::of(eps),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, name: &str, x: Var, mode: BatchNormMode) -> Result<Var> {
        let g = tape.param(&join(name, "gamma"), &self.gamma);
        let b = tape.param(&join(name, "beta"), &self.beta);
        tape.batchnorm(name, x, g, b, &self.running_mean, &self.running_var, mode, self.eps)
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &self.gamma, ParamKind::Weight);
        f(&join(prefix, "beta"), &self.beta, ParamKind::Weight);
        f(&join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "gamma"), &mut self.gamma, ParamKind::Weight);
        f(&join(prefix, "beta"), &mut self.beta, ParamKind::Weight);
        f(&join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn<T> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn forward(&self, tape: &mut Tape<T>, name: &str, x: Var, mode: BatchNormMode, relu: bool) -> Result<Var> {
        let y = self.conv.forward(tape, &join(name, "conv"), x)?;
        let y = self.bn.forward(tape, &join(name, "bn"), y, mode)?;
        Ok(if relu { tape.relu(y) } else { y })
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Dense layer on `[..., in]` rows; the weight is stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(din: usize, dout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: trunc_normal(&[din, dout], INIT_STD, rng),
            bias: bias.then(|| Tensor::zeros([dout])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let w = tape.param(&join(name, "weight"), &self.weight);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(&join(name, "bias"), b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Weight);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Weight);
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f);
        }
    }
}

/// Casts every tensor of `src` into the matching slot of `dst` (same structure, other dtype).
pub fn copy_cast<A: Scalar, B: Scalar>(src: &impl Module<A>, dst: &mut impl Module<B>) {
    let tensors = src.named_tensors("");
    let mut it = tensors.into_iter();
    dst.visit_mut("", &mut |name, t, _| {
        let (n, s, _) = it.next().expect("same structure");
        debug_assert_eq!(n, name);
        *t = s.cast();
    });
}
