//! Baseline token mixers: full self-attention, separable attention, swift
//! (additive) attention, and the pooling mixer.
//!
//! Attention variants work on token sequences `[B, N, d]` and are single-head.
//! The pooling mixer works on feature maps `[B, C, H, W]`.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, Linear, Module, ParamKind};
use crate::tensor::{Scalar, Tensor};

fn check_tokens<T: Scalar>(tape: &Tape<T>, x: Var, d: usize, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [b, n, dx] if dx == d => Ok((b, n)),
        ref s => Err(Error::Shape {
            op,
            detail: format!("expected [B, N, {d}] tokens, got {s:?}"),
        }),
    }
}

/// `softmax(Q K^T / sqrt(d)) V`.
///
/// Projections carry no bias: a key bias shifts each row of logits by a
/// constant and would be a parameter with identically zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MsaParams<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
}

impl<T: Scalar> MsaParams<T> {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Linear::new(d, d, false, rng),
            wk: Linear::new(d, d, false, rng),
            wv: Linear::new(d, d, false, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.weight.shape()[0]
    }
}

impl<T: Scalar> Module<T> for MsaParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
    }
}

pub fn msa_forward<T: Scalar>(tape: &mut Tape<T>, name: &str, x: Var, p: &MsaParams<T>) -> Result<Var> {
    let d = p.dim();
    check_tokens(tape, x, d, "msa_forward")?;
    tape.scoped("msa", |tape| {
        let q = p.wq.forward(tape, &join(name, "wq"), x)?;
        let k = p.wk.forward(tape, &join(name, "wk"), x)?;
        let v = p.wv.forward(tape, &join(name, "wv"), x)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, T::of(1.0 / (d as f64).sqrt()));
        let attn = tape.softmax(logits, 2)?;
        tape.matmul(attn, v)
    })
}

/// Context scores over tokens, a single context vector, and a broadcast product with V.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableParams<T> {
    /// `d -> 1` scoring vector.
    pub wq_vec: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
}

impl<T: Scalar> SeparableParams<T> {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq_vec: Linear::new(d, 1, false, rng),
            wk: Linear::new(d, d, true, rng),
            wv: Linear::new(d, d, true, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wk.weight.shape()[0]
    }
}

impl<T: Scalar> Module<T> for SeparableParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.wq_vec.visit(&join(prefix, "wq_vec"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.wq_vec.visit_mut(&join(prefix, "wq_vec"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
    }
}

/// Intermediate values of separable attention.
#[derive(Debug, Clone, Copy)]
pub struct SeparableVars {
    /// `[B, N, 1]` scores, summing to one over tokens.
    pub scores: Var,
    /// `[B, 1, d]` context vector.
    pub context: Var,
    pub out: Var,
}

pub fn separable_attention_parts<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    p: &SeparableParams<T>,
) -> Result<SeparableVars> {
    check_tokens(tape, x, p.dim(), "separable_attention")?;
    tape.scoped("separable", |tape| {
        let logits = p.wq_vec.forward(tape, &join(name, "wq_vec"), x)?;
        let scores = tape.softmax(logits, 1)?;
        let k = p.wk.forward(tape, &join(name, "wk"), x)?;
        let v = p.wv.forward(tape, &join(name, "wv"), x)?;
        let st = tape.transpose(scores)?;
        let context = tape.matmul(st, k)?;
        let out = tape.gate(v, context)?;
        Ok(SeparableVars { scores, context, out })
    })
}

pub fn separable_attention<T: Scalar>(tape: &mut Tape<T>, name: &str, x: Var, p: &SeparableParams<T>) -> Result<Var> {
    Ok(separable_attention_parts(tape, name, x, p)?.out)
}

/// Additive attention with a pooled global query.
#[derive(Debug, Clone, PartialEq)]
pub struct SwiftParams<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    /// `d -> 1` token weighting.
    pub w_alpha: Linear<T>,
    /// Dense `d -> d` map applied to the query-key interaction.
    pub t: Linear<T>,
}

impl<T: Scalar> SwiftParams<T> {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Linear::new(d, d, true, rng),
            wk: Linear::new(d, d, true, rng),
            w_alpha: Linear::new(d, 1, false, rng),
            t: Linear::new(d, d, true, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.weight.shape()[0]
    }
}

impl<T: Scalar> Module<T> for SwiftParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.w_alpha.visit(&join(prefix, "w_alpha"), f);
        self.t.visit(&join(prefix, "t"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.w_alpha.visit_mut(&join(prefix, "w_alpha"), f);
        self.t.visit_mut(&join(prefix, "t"), f);
    }
}

/// Intermediate values of swift attention.
#[derive(Debug, Clone, Copy)]
pub struct SwiftVars {
    /// `[B, 1, d]` global query.
    pub global_query: Var,
    pub out: Var,
}

pub fn swift_attention_parts<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    p: &SwiftParams<T>,
) -> Result<SwiftVars> {
    let d = p.dim();
    check_tokens(tape, x, d, "swift_attention")?;
    tape.scoped("swift", |tape| {
        let q = p.wq.forward(tape, &join(name, "wq"), x)?;
        let k = p.wk.forward(tape, &join(name, "wk"), x)?;
        let alpha = p.w_alpha.forward(tape, &join(name, "w_alpha"), q)?;
        let alpha = tape.scale(alpha, T::of(1.0 / (d as f64).sqrt()));
        let at = tape.transpose(alpha)?;
        let global_query = tape.matmul(at, q)?;
        let gk = tape.gate(k, global_query)?;
        let mixed = p.t.forward(tape, &join(name, "t"), gk)?;
        let q_hat = tape.l2_normalize(q)?;
        let out = tape.add(mixed, q_hat)?;
        Ok(SwiftVars { global_query, out })
    })
}

pub fn swift_attention<T: Scalar>(tape: &mut Tape<T>, name: &str, x: Var, p: &SwiftParams<T>) -> Result<Var> {
    Ok(swift_attention_parts(tape, name, x, p)?.out)
}

/// `avgpool_k(x) - x` with stride 1 and padding excluded from the average.
pub fn pool_mixer<T: Scalar>(tape: &mut Tape<T>, x: Var, k: usize) -> Result<Var> {
    tape.scoped("pool", |tape| {
        let pooled = tape.avg_pool(x, k)?;
        tape.sub(pooled, x)
    })
}
