//! Convolutional additive token mixer.
//!
//! The mixer replaces the query-key product of self-attention by an additive
//! similarity of two context maps:
//!
//! ```text
//! Q, K, V = Wq x, Wk x, Wv x
//! O       = Gamma( Phi(Q) + Phi(K) ) * V
//! ```
//!
//! `Phi` stacks sigmoid-gated interactions:
//!
//! * spatial: `x * sigmoid(pw1(relu(bn(dw3(x)))))`, a `[B,1,H,W]` map shared by all channels;
//! * channel: `x * sigmoid(conv1x1(avgpool(x)))`, a `[B,C,1,1]` vector shared by all positions.
//!
//! `Gamma` is a depthwise 3x3 convolution. No matrix product and no softmax
//! appears anywhere in the mixer.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm, Conv, Module, ParamKind};
use crate::tensor::{BatchNormMode, ConvSpec, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interaction {
    Spatial,
    Channel,
}

/// How the Q/K/V projections (and the channel-interaction 1x1) mix channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// Per-channel scale and bias: one MAC per element.
    #[default]
    Depthwise1x1,
    /// Full `C x C` pointwise convolution.
    Dense1x1,
}

impl ProjectionKind {
    pub fn groups(self, c: usize) -> usize {
        match self {
            ProjectionKind::Depthwise1x1 => c,
            ProjectionKind::Dense1x1 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::Depthwise1x1 => "dw",
            ProjectionKind::Dense1x1 => "dense",
        }
    }
}

impl fmt::Display for ProjectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dw" | "depthwise" | "depthwise_1x1" => Ok(ProjectionKind::Depthwise1x1),
            "dense" | "dense_1x1" => Ok(ProjectionKind::Dense1x1),
            _ => Err(Error::Unknown {
                kind: "projection kind",
                name: s.to_string(),
            }),
        }
    }
}

/// Which interactions each context map applies, and in what order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub q_branch: Vec<Interaction>,
    pub k_branch: Vec<Interaction>,
    pub projection_kind: ProjectionKind,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        make_ablation(Ablation::Base)
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, branch) in [("q_branch", &self.q_branch), ("k_branch", &self.k_branch)] {
            if branch.len() > 2 || (branch.len() == 2 && branch[0] == branch[1]) {
                return Err(Error::Config(format!(
                    "{name} {branch:?} must be a duplicate-free subset of {{spatial, channel}}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_projection(mut self, kind: ProjectionKind) -> Self {
        self.projection_kind = kind;
        self
    }
}

/// Interaction arrangements compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Base,
    NoSpatial,
    NoChannel,
    SplitSc,
    SwappedFull,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Base,
        Ablation::NoSpatial,
        Ablation::NoChannel,
        Ablation::SplitSc,
        Ablation::SwappedFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::NoSpatial => "no_spatial",
            Ablation::NoChannel => "no_channel",
            Ablation::SplitSc => "split_sc",
            Ablation::SwappedFull => "swapped_full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "ablation",
                name: s.to_string(),
            })
    }
}

pub fn make_ablation(variant: Ablation) -> InteractionConfig {
    use Interaction::{Channel, Spatial};
    let (q, k) = match variant {
        Ablation::Base => (vec![Spatial, Channel], vec![Spatial, Channel]),
        Ablation::NoSpatial => (vec![Channel], vec![Channel]),
        Ablation::NoChannel => (vec![Spatial], vec![Spatial]),
        Ablation::SplitSc => (vec![Spatial], vec![Channel]),
        Ablation::SwappedFull => (vec![Spatial, Channel], vec![Channel, Spatial]),
    };
    InteractionConfig {
        q_branch: q,
        k_branch: k,
        projection_kind: ProjectionKind::Depthwise1x1,
    }
}

/// Depthwise 3x3 (no bias, BN follows), BN, ReLU, then a dense 1x1 reduction to one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialParams<T> {
    pub dw3: Conv<T>,
    pub bn: BatchNorm<T>,
    pub pw1: Conv<T>,
}

impl<T: Scalar> SpatialParams<T> {
    pub fn new(c: usize, eps: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            dw3: Conv::depthwise(c, 3, false, rng),
            bn: BatchNorm::new(c, eps),
            pw1: Conv::pointwise(c, 1, true, rng),
        }
    }
}

impl<T: Scalar> Module<T> for SpatialParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.dw3.visit(&join(prefix, "dw3"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.pw1.visit(&join(prefix, "pw1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.dw3.visit_mut(&join(prefix, "dw3"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.pw1.visit_mut(&join(prefix, "pw1"), f);
    }
}

/// 1x1 convolution applied to the pooled channel descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams<T> {
    pub conv: Conv<T>,
}

impl<T: Scalar> ChannelParams<T> {
    pub fn new(c: usize, kind: ProjectionKind, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv::new(c, c, ConvSpec::same(1, kind.groups(c)), true, rng),
        }
    }
}

impl<T: Scalar> Module<T> for ChannelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

/// Parameters of one context map; only the interactions it uses are present.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiParams<T> {
    pub spatial: Option<SpatialParams<T>>,
    pub channel: Option<ChannelParams<T>>,
}

impl<T: Scalar> PhiParams<T> {
    pub fn new(c: usize, order: &[Interaction], kind: ProjectionKind, eps: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self {
            spatial: None,
            channel: None,
        };
        for i in order {
            match i {
                Interaction::Spatial => p.spatial = Some(SpatialParams::new(c, eps, rng)),
                Interaction::Channel => p.channel = Some(ChannelParams::new(c, kind, rng)),
            }
        }
        p
    }
}

impl<T: Scalar> Module<T> for PhiParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.channel.visit(&join(prefix, "channel"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.channel.visit_mut(&join(prefix, "channel"), f);
    }
}

/// All learnable state of one mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct CatmParams<T> {
    pub wq: Conv<T>,
    pub wk: Conv<T>,
    pub wv: Conv<T>,
    pub phi_q: PhiParams<T>,
    pub phi_k: PhiParams<T>,
    /// Depthwise 3x3 integrating the summed context maps.
    pub gamma: Conv<T>,
}

impl<T: Scalar> CatmParams<T> {
    pub fn new(c: usize, cfg: &InteractionConfig, eps: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let kind = cfg.projection_kind;
        let proj = |rng: &mut ChaCha8Rng| Conv::new(c, c, ConvSpec::same(1, kind.groups(c)), true, rng);
        Ok(Self {
            wq: proj(rng),
            wk: proj(rng),
            wv: proj(rng),
            phi_q: PhiParams::new(c, &cfg.q_branch, kind, eps, rng),
            phi_k: PhiParams::new(c, &cfg.k_branch, kind, eps, rng),
            gamma: Conv::depthwise(c, 3, true, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.out_channels()
    }
}

impl<T: Scalar> Module<T> for CatmParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.phi_q.visit(&join(prefix, "phi_q"), f);
        self.phi_k.visit(&join(prefix, "phi_k"), f);
        self.gamma.visit(&join(prefix, "gamma"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.wq.visit_mut(&join(prefix, "wq"), f);
        self.wk.visit_mut(&join(prefix, "wk"), f);
        self.wv.visit_mut(&join(prefix, "wv"), f);
        self.phi_q.visit_mut(&join(prefix, "phi_q"), f);
        self.phi_k.visit_mut(&join(prefix, "phi_k"), f);
        self.gamma.visit_mut(&join(prefix, "gamma"), f);
    }
}

fn check_channels<T: Scalar>(tape: &Tape<T>, x: Var, c: usize, op: &'static str) -> Result<()> {
    let [_, cx, _, _] = tape.value(x).dims4(op)?;
    if cx != c {
        return Err(Error::Shape {
            op,
            detail: format!("input has {cx} channels, parameters expect {c}"),
        });
    }
    Ok(())
}

/// `x * sigmoid(pw1(relu(bn(dw3(x)))))` with a `[B,1,H,W]` gate.
pub fn spatial_interaction<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    p: &SpatialParams<T>,
    mode: BatchNormMode,
) -> Result<Var> {
    check_channels(tape, x, p.dw3.out_channels(), "spatial_interaction")?;
    tape.scoped("spatial", |tape| {
        let y = p.dw3.forward(tape, &join(name, "dw3"), x)?;
        let y = p.bn.forward(tape, &join(name, "bn"), y, mode)?;
        let y = tape.relu(y);
        let y = p.pw1.forward(tape, &join(name, "pw1"), y)?;
        let gate = tape.sigmoid(y);
        tape.gate(x, gate)
    })
}

/// `x * sigmoid(conv1x1(avgpool(x)))` with a `[B,C,1,1]` gate.
pub fn channel_interaction<T: Scalar>(tape: &mut Tape<T>, name: &str, x: Var, p: &ChannelParams<T>) -> Result<Var> {
    check_channels(tape, x, p.conv.out_channels(), "channel_interaction")?;
    tape.scoped("channel", |tape| {
        let pooled = tape.global_avg_pool(x)?;
        let y = p.conv.forward(tape, &join(name, "conv"), pooled)?;
        let gate = tape.sigmoid(y);
        tape.gate(x, gate)
    })
}

/// Applies the listed interactions in order; an empty list is the identity.
pub fn context_map_phi<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    p: &PhiParams<T>,
    order: &[Interaction],
    mode: BatchNormMode,
) -> Result<Var> {
    let mut y = x;
    for step in order {
        y = match step {
            Interaction::Spatial => {
                let sp = p.spatial.as_ref().ok_or_else(|| missing(name, "spatial"))?;
                spatial_interaction(tape, &join(name, "spatial"), y, sp, mode)?
            }
            Interaction::Channel => {
                let ch = p.channel.as_ref().ok_or_else(|| missing(name, "channel"))?;
                channel_interaction(tape, &join(name, "channel"), y, ch)?
            }
        };
    }
    Ok(y)
}

fn missing(name: &str, what: &str) -> Error {
    Error::Config(format!("`{name}` has no {what} interaction parameters"))
}

/// Full mixer: `gamma(phi_q(Q) + phi_k(K)) * V`.
pub fn catm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    p: &CatmParams<T>,
    cfg: &InteractionConfig,
    mode: BatchNormMode,
) -> Result<Var> {
    cfg.validate()?;
    check_channels(tape, x, p.channels(), "catm_forward")?;
    tape.scoped("catm", |tape| {
        let q = p.wq.forward(tape, &join(name, "wq"), x)?;
        let k = p.wk.forward(tape, &join(name, "wk"), x)?;
        let v = p.wv.forward(tape, &join(name, "wv"), x)?;
        let pq = tape.scoped("phi_q", |t| context_map_phi(t, &join(name, "phi_q"), q, &p.phi_q, &cfg.q_branch, mode))?;
        let pk = tape.scoped("phi_k", |t| context_map_phi(t, &join(name, "phi_k"), k, &p.phi_k, &cfg.k_branch, mode))?;
        let sim = tape.add(pq, pk)?;
        let ctx = p.gamma.forward(tape, &join(name, "gamma"), sim)?;
        tape.mul(ctx, v)
    })
}

/// Eval-mode mixer on a plain tensor.
pub fn catm_eval<T: Scalar>(x: &Tensor<T>, p: &CatmParams<T>, cfg: &InteractionConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = catm_forward(&mut tape, "catm", xv, p, cfg, BatchNormMode::Eval)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| r.random_range(-1.0..1.0))
    }

    fn zero_all(p: &mut impl Module<f64>) {
        p.visit_mut("", &mut |_, t, kind| {
            if kind == ParamKind::Weight {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }

    #[test]
    fn zero_weight_interactions_halve_the_input() {
        let mut r = rng(1);
        let x = random(&[2, 4, 5, 5], &mut r);
        let mut phi = PhiParams::<f64>::new(4, &[Interaction::Spatial, Interaction::Channel], ProjectionKind::Depthwise1x1, 1e-5, &mut r);
        zero_all(&mut phi);
        for (order, factor) in [
            (vec![Interaction::Spatial], 0.5),
            (vec![Interaction::Channel], 0.5),
            (vec![Interaction::Spatial, Interaction::Channel], 0.25),
            (vec![], 1.0),
        ] {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let y = context_map_phi(&mut tape, "phi", xv, &phi, &order, BatchNormMode::Eval).unwrap();
            assert_eq!(tape.value(y), &x.scale(factor), "{order:?}");
        }
    }

    #[test]
    fn constant_channels_scale_by_their_sigmoid() {
        let mut r = rng(2);
        let mut p = ChannelParams::<f64>::new(3, ProjectionKind::Depthwise1x1, &mut r);
        p.conv.weight = Tensor::ones([3, 1, 1, 1]);
        let vals = [-1.5, 0.25, 2.0];
        let x = Tensor::from_fn([1, 3, 4, 4], |i| vals[i / 16]);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = channel_interaction(&mut tape, "ch", xv, &p).unwrap();
        for (i, &out) in tape.value(y).data().iter().enumerate() {
            let v: f64 = vals[i / 16];
            assert!((out - v / (1.0 + (-v).exp())).abs() < 1e-15);
        }
    }

    #[test]
    fn single_step_phi_is_the_interaction() {
        let mut r = rng(3);
        let x = random(&[1, 6, 4, 4], &mut r);
        let phi = PhiParams::<f64>::new(6, &[Interaction::Spatial], ProjectionKind::Depthwise1x1, 1e-5, &mut r);
        let mut a = Tape::new();
        let xa = a.input(x.clone());
        let ya = context_map_phi(&mut a, "p", xa, &phi, &[Interaction::Spatial], BatchNormMode::Eval).unwrap();
        let mut b = Tape::new();
        let xb = b.input(x);
        let yb = spatial_interaction(&mut b, "p.spatial", xb, phi.spatial.as_ref().unwrap(), BatchNormMode::Eval).unwrap();
        assert_eq!(a.value(ya), b.value(yb));
    }

    #[test]
    fn zero_gamma_annihilates_output() {
        let mut r = rng(4);
        let mut p = CatmParams::<f64>::new(5, &InteractionConfig::default(), 1e-5, &mut r).unwrap();
        p.gamma.weight = Tensor::zeros([5, 1, 3, 3]);
        let y = catm_eval(&random(&[2, 5, 6, 6], &mut r), &p, &InteractionConfig::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projections_give_half_square() {
        let mut r = rng(5);
        let cfg = InteractionConfig::default();
        let mut p = CatmParams::<f64>::new(4, &cfg, 1e-5, &mut r).unwrap();
        zero_all(&mut p.phi_q);
        zero_all(&mut p.phi_k);
        for w in [&mut p.wq, &mut p.wk, &mut p.wv] {
            w.weight = Tensor::ones([4, 1, 1, 1]);
            w.bias = Some(Tensor::zeros([4]));
        }
        p.gamma.weight = Tensor::from_fn([4, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        p.gamma.bias = Some(Tensor::zeros([4]));
        let x = random(&[1, 4, 5, 5], &mut r);
        let y = catm_eval(&x, &p, &cfg).unwrap();
        let expect = x.map(|v| 0.5 * v * v);
        assert!(tensor::max_abs_diff(&y, &expect) < 1e-15);
    }

    #[test]
    fn ablations_match_table_rows() {
        use Interaction::*;
        assert_eq!(make_ablation(Ablation::Base).q_branch, [Spatial, Channel]);
        assert_eq!(make_ablation(Ablation::NoSpatial).k_branch, [Channel]);
        assert_eq!(make_ablation(Ablation::NoChannel).q_branch, [Spatial]);
        let split = make_ablation(Ablation::SplitSc);
        assert_eq!((split.q_branch, split.k_branch), (vec![Spatial], vec![Channel]));
        assert_eq!(make_ablation(Ablation::SwappedFull).k_branch, [Channel, Spatial]);
        assert!("w/o".parse::<Ablation>().is_err());
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }

    #[test]
    fn invalid_branch_rejected() {
        let cfg = InteractionConfig {
            q_branch: vec![Interaction::Spatial, Interaction::Spatial],
            ..InteractionConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(CatmParams::<f64>::new(4, &cfg, 1e-5, &mut rng(0)).is_err());
    }

    #[test]
    fn spatial_gate_broadcasts_over_channels() {
        let mut r = rng(6);
        let p = SpatialParams::<f64>::new(3, 1e-5, &mut r);
        let x = random(&[1, 3, 4, 4], &mut r);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        spatial_interaction(&mut tape, "s", xv, &p, BatchNormMode::Eval).unwrap();
        let gate = tape.nodes().find(|n| n.kind == crate::autograd::OpKind::Activation && n.shape[1] == 1).unwrap();
        assert_eq!(gate.shape, &[1, 1, 4, 4]);
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Straight nested-loop evaluation with `[c][h][w]` arrays, batch of one.
    struct Naive {
        c: usize,
        h: usize,
        w: usize,
    }

    impl Naive {
        fn at(&self, x: &[f64], c: usize, i: isize, j: isize) -> f64 {
            if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
                0.0
            } else {
                x[(c * self.h + i as usize) * self.w + j as usize]
            }
        }

        fn dw3(&self, x: &[f64], k: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for c in 0..self.c {
                for i in 0..self.h {
                    for j in 0..self.w {
                        let mut acc = bias.map_or(0.0, |b| b.data()[c]);
                        for di in 0..3 {
                            for dj in 0..3 {
                                acc += k.data()[c * 9 + di * 3 + dj]
                                    * self.at(x, c, i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            }
                        }
                        out[(c * self.h + i) * self.w + j] = acc;
                    }
                }
            }
            out
        }

        fn affine(&self, x: &[f64], conv: &Conv<f64>) -> Vec<f64> {
            let hw = self.h * self.w;
            (0..x.len())
                .map(|i| conv.weight.data()[i / hw] * x[i] + conv.bias.as_ref().unwrap().data()[i / hw])
                .collect()
        }

        fn spatial(&self, x: &[f64], p: &SpatialParams<f64>) -> Vec<f64> {
            let hw = self.h * self.w;
            let d = self.dw3(x, &p.dw3.weight, None);
            let bn = &p.bn;
            let r: Vec<f64> = (0..x.len())
                .map(|i| {
                    let c = i / hw;
                    let n = (d[i] - bn.running_mean.data()[c]) / (bn.running_var.data()[c] + bn.eps).sqrt();
                    (n * bn.gamma.data()[c] + bn.beta.data()[c]).max(0.0)
                })
                .collect();
            let mut out = x.to_vec();
            for s in 0..hw {
                let mut g = p.pw1.bias.as_ref().unwrap().data()[0];
                for c in 0..self.c {
                    g += p.pw1.weight.data()[c] * r[c * hw + s];
                }
                for c in 0..self.c {
                    out[c * hw + s] *= sig(g);
                }
            }
            out
        }

        fn channel(&self, x: &[f64], p: &ChannelParams<f64>) -> Vec<f64> {
            let hw = self.h * self.w;
            let mut out = x.to_vec();
            for c in 0..self.c {
                let m: f64 = x[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
                let z = p.conv.weight.data()[c] * m + p.conv.bias.as_ref().unwrap().data()[c];
                out[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v *= sig(z));
            }
            out
        }

        fn catm(&self, x: &[f64], p: &CatmParams<f64>) -> Vec<f64> {
            let q = self.affine(x, &p.wq);
            let k = self.affine(x, &p.wk);
            let v = self.affine(x, &p.wv);
            let pq = self.channel(&self.spatial(&q, p.phi_q.spatial.as_ref().unwrap()), p.phi_q.channel.as_ref().unwrap());
            let pk = self.channel(&self.spatial(&k, p.phi_k.spatial.as_ref().unwrap()), p.phi_k.channel.as_ref().unwrap());
            let sum: Vec<f64> = pq.iter().zip(&pk).map(|(a, b)| a + b).collect();
            let ctx = self.dw3(&sum, &p.gamma.weight, p.gamma.bias.as_ref());
            ctx.iter().zip(&v).map(|(a, b)| a * b).collect()
        }
    }

    /// Values of magnitude in `[0.5, 1.5)` with random sign (running variances stay positive).
    fn randomize(p: &mut impl Module<f64>, r: &mut ChaCha8Rng) {
        p.visit_mut("", &mut |name, t, _| {
            let positive = name.ends_with("running_var");
            t.data_mut().iter_mut().for_each(|v| {
                let m = r.random_range(0.5..1.5);
                *v = if positive || r.random_bool(0.5) { m } else { -m };
            });
        });
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut r = rng(7);
        let cfg = InteractionConfig::default();
        let mut p = CatmParams::<f64>::new(3, &cfg, 1e-5, &mut r).unwrap();
        randomize(&mut p, &mut r);
        let x = random(&[1, 3, 5, 4], &mut r);
        let y = catm_eval(&x, &p, &cfg).unwrap();
        let oracle = Naive { c: 3, h: 5, w: 4 }.catm(x.data(), &p);
        let oracle = Tensor::new([1, 3, 5, 4], oracle).unwrap();
        assert!(tensor::max_rel_diff(&y, &oracle, 1e-12) < 1e-12);
    }

    #[test]
    fn linear_in_value_projection() {
        let mut r = rng(8);
        let cfg = InteractionConfig::default();
        let mut p = CatmParams::<f64>::new(4, &cfg, 1e-5, &mut r).unwrap();
        randomize(&mut p, &mut r);
        let x = random(&[2, 4, 4, 4], &mut r);
        let base = catm_eval(&x, &p, &cfg).unwrap();
        for w in p.wv.weight.data_mut().iter_mut().chain(p.wv.bias.as_mut().unwrap().data_mut()) {
            *w *= 3.0;
        }
        let scaled = catm_eval(&x, &p, &cfg).unwrap();
        assert!(tensor::max_rel_diff(&scaled, &base.scale(3.0), 1e-9) < 1e-12);
    }

    #[test]
    fn circular_padding_commutes_with_shifts() {
        let mut r = rng(9);
        let cfg = InteractionConfig::default();
        let mut p = CatmParams::<f64>::new(4, &cfg, 1e-5, &mut r).unwrap();
        randomize(&mut p, &mut r);
        let x = random(&[1, 4, 6, 5], &mut r);
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::with_padding(crate::tensor::Padding::Circular);
            let xv = tape.input(x.clone());
            let y = catm_forward(&mut tape, "catm", xv, &p, &cfg, BatchNormMode::Eval).unwrap();
            tape.value(y).clone()
        };
        let shifted_then = run(&x.roll_spatial(2, -1).unwrap());
        let then_shifted = run(&x).roll_spatial(2, -1).unwrap();
        assert!(tensor::max_abs_diff(&shifted_then, &then_shifted) < 1e-12);
    }

    #[test]
    fn gates_stay_inside_unit_interval() {
        let mut r = rng(10);
        let cfg = InteractionConfig::default();
        let mut p = CatmParams::<f64>::new(4, &cfg, 1e-5, &mut r).unwrap();
        randomize(&mut p, &mut r);
        let mut tape = Tape::new();
        let xv = tape.input(random(&[2, 4, 4, 4], &mut r).scale(50.0));
        catm_forward(&mut tape, "catm", xv, &p, &cfg, BatchNormMode::Eval).unwrap();
        // the spatial gate is the only single-channel activation; channel scopes hold only the gate
        let gates: Vec<_> = tape
            .nodes()
            .filter(|n| n.kind == crate::autograd::OpKind::Activation)
            .filter(|n| n.scope.ends_with("channel") || n.shape[1] == 1)
            .collect();
        assert_eq!(gates.len(), 4);
        for g in gates {
            assert!(tape.value(g.var).data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn every_parameter_gradient_matches_finite_differences() {
        let mut r = rng(11);
        for ablation in Ablation::ALL {
            for kind in [ProjectionKind::Depthwise1x1, ProjectionKind::Dense1x1] {
                let cfg = make_ablation(ablation).with_projection(kind);
                let mut p = CatmParams::<f64>::new(3, &cfg, 1e-5, &mut r).unwrap();
                randomize(&mut p, &mut r);
                let x = random(&[2, 3, 4, 4], &mut r);
                let weights = random(&[2, 3, 4, 4], &mut r);
                let report = crate::autograd::grad_check_module(
                    &p,
                    |tape, p| {
                        let xv = tape.input(x.clone());
                        let y = catm_forward(tape, "", xv, p, &cfg, BatchNormMode::Eval)?;
                        let rv = tape.input(weights.clone());
                        let y = tape.mul(y, rv)?;
                        Ok(tape.sum(y))
                    },
                    |_| true,
                    0,
                    1e-4,
                    1e-5,
                )
                .unwrap();
                assert!(report.passed(), "{ablation} {kind:?}\n{report}\n{:?}", report.worst());
            }
        }
    }

    #[test]
    fn no_matmul_or_softmax_recorded() {
        let mut r = rng(12);
        let cfg = InteractionConfig::default();
        let p = CatmParams::<f64>::new(4, &cfg, 1e-5, &mut r).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(random(&[1, 4, 8, 8], &mut r));
        catm_forward(&mut tape, "catm", xv, &p, &cfg, BatchNormMode::Train).unwrap();
        use crate::autograd::OpKind;
        assert!(tape.nodes().all(|n| !matches!(n.kind, OpKind::Matmul | OpKind::Softmax)));
    }
}
