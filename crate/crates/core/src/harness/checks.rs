//! Finite-difference gradient checks of every differentiable building block.
//!
//! Shared by the `gradcheck` CLI command and the test suites. All checks run
//! in f64 with parameters drawn at magnitudes in `[0.5, 1.5)` (random sign),
//! conv and linear weights divided by the square root of their fan-in, so
//! no gradient element is tiny by construction and gates do not saturate.
//! Batch norm runs in eval mode. Blocks and backbones first set their running
//! statistics from one train-mode pass, which keeps activations at unit
//! scale, and inputs are resampled until no ReLU input lies within
//! [`RELU_MARGIN`] of the kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, grad_check_module, GradCheckReport, Tape, Var};
use crate::backbone::{
    cas_block, patch_embed, patch_embed_params, stem, BlockParams, MixerKind, StemParams, VariantConfig,
};
use crate::catm::{catm_forward, make_ablation, Ablation, CatmParams, ProjectionKind};
use crate::error::{Error, Result};
use crate::harness::train::apply_bn_updates;
use crate::mixers::{msa_forward, separable_attention, swift_attention, MsaParams, SeparableParams, SwiftParams};
use crate::nn::{join, BatchNorm, ConvBn, Linear, Module, ParamKind};
use crate::tensor::{BatchNormMode, ConvSpec, Tensor};

/// Central-difference step used by all checks.
pub const EPS: f64 = 1e-5;

/// Smallest allowed distance of a ReLU input from zero.
pub const RELU_MARGIN: f64 = 1e-3;

const MAX_RESAMPLES: usize = 500;

/// A named check result.
#[derive(Debug, Clone)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

/// Overwrites every tensor with values of magnitude in `[0.5, 1.5)` and random
/// sign, scaled by `1/sqrt(fan_in)` for conv and linear weights; running
/// variances stay positive.
pub fn randomize(p: &mut impl Module<f64>, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |name, t, _| {
        let positive = name.ends_with("running_var");
        let fan_in = match t.shape() {
            // conv [cout, cin/groups, kh, kw]
            [cout, ..] if t.shape().len() == 4 => t.numel() / cout,
            // linear [din, dout]
            [din, _] => *din,
            _ => 1,
        };
        let scale = 1.0 / (fan_in as f64).sqrt();
        t.data_mut().iter_mut().for_each(|v| {
            let m = rng.random_range(0.5..1.5) * scale;
            *v = if positive || rng.random_bool(0.5) { m } else { -m };
        });
    });
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element matters.
fn probe_loss(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.input(r.clone());
    let y = tape.mul(y, rv)?;
    Ok(tape.sum(y))
}

/// conv2d gradients (input, weight, bias) for dense, depthwise, strided and
/// pointwise geometries.
pub fn check_conv2d(seed: u64, tol: f64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = [
        ("dense3x3", 3, 4, ConvSpec::same(3, 1)),
        ("depthwise3x3", 4, 4, ConvSpec::same(3, 4)),
        ("strided3x3", 3, 2, ConvSpec::strided(3, 2, 1, 1)),
        ("pointwise", 4, 1, ConvSpec::same(1, 1)),
    ];
    let mut out = Vec::new();
    for (name, cin, cout, spec) in cases {
        let x = random(&[2, cin, 5, 6], &mut rng);
        let w = random(&[cout, cin / spec.groups, spec.kernel.0, spec.kernel.1], &mut rng);
        let b = random(&[cout], &mut rng);
        let (ho, wo) = ((5 + 2 * spec.padding.0 - spec.kernel.0) / spec.stride.0 + 1, (6 + 2 * spec.padding.1 - spec.kernel.1) / spec.stride.1 + 1);
        let r = random(&[2, cout, ho, wo], &mut rng);
        let params = vec![("x".to_string(), x), ("weight".to_string(), w), ("bias".to_string(), b)];
        let report = grad_check(
            &params,
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), spec)?;
                probe_loss(tape, y, &r)
            },
            EPS,
            tol,
        )?;
        out.push(NamedReport {
            name: format!("conv2d/{name}"),
            report,
        });
    }
    Ok(out)
}

/// Batch-norm gradients (input, gamma, beta) in the given mode.
pub fn check_batchnorm(seed: u64, tol: f64, mode: BatchNormMode) -> Result<NamedReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bn = BatchNorm::<f64>::new(3, 1e-5);
    randomize(&mut bn, &mut rng);
    let x = random(&[3, 3, 4, 4], &mut rng);
    let r = random(&[3, 3, 4, 4], &mut rng);
    let params = vec![
        ("x".to_string(), x),
        ("gamma".to_string(), bn.gamma.clone()),
        ("beta".to_string(), bn.beta.clone()),
    ];
    let report = grad_check(
        &params,
        |tape, v| {
            let y = tape.batchnorm("bn", v[0], v[1], v[2], &bn.running_mean, &bn.running_var, mode, 1e-5)?;
            probe_loss(tape, y, &r)
        },
        EPS,
        tol,
    )?;
    Ok(NamedReport {
        name: format!("batchnorm/{}", if mode == BatchNormMode::Eval { "eval" } else { "train" }),
        report,
    })
}

/// CATM parameter gradients for every ablation and projection kind.
pub fn check_catm(seed: u64, tol: f64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for ablation in Ablation::ALL {
        for kind in [ProjectionKind::Depthwise1x1, ProjectionKind::Dense1x1] {
            let cfg = make_ablation(ablation).with_projection(kind);
            let (p, x, r) = resample(&mut rng, |rng| {
                let mut p = CatmParams::<f64>::new(3, &cfg, 1e-5, rng)?;
                randomize(&mut p, rng);
                Ok((p, random(&[2, 3, 4, 4], rng), random(&[2, 3, 4, 4], rng)))
            }, |(p, x, _)| {
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                catm_forward(&mut tape, "", xv, p, &cfg, BatchNormMode::Eval)?;
                Ok(tape)
            })?;
            let report = grad_check_module(
                &p,
                |tape, p| {
                    let xv = tape.input(x.clone());
                    let y = catm_forward(tape, "", xv, p, &cfg, BatchNormMode::Eval)?;
                    probe_loss(tape, y, &r)
                },
                |_| true,
                0,
                EPS,
                tol,
            )?;
            out.push(NamedReport {
                name: format!("catm/{ablation}/{}", kind.name()),
                report,
            });
        }
    }
    Ok(out)
}

/// Parameter gradients of the three attention baselines.
pub fn check_attention_mixers(seed: u64, tol: f64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[2, 5, 4], &mut rng);
    let r = random(&[2, 5, 4], &mut rng);
    let mut msa = MsaParams::new(4, &mut rng);
    randomize(&mut msa, &mut rng);
    let mut sep = SeparableParams::new(4, &mut rng);
    randomize(&mut sep, &mut rng);
    let mut swift = SwiftParams::new(4, &mut rng);
    randomize(&mut swift, &mut rng);
    let msa_report = grad_check_module(
        &msa,
        |t, p| {
            let xv = t.input(x.clone());
            let y = msa_forward(t, "", xv, p)?;
            probe_loss(t, y, &r)
        },
        |_| true,
        0,
        EPS,
        tol,
    )?;
    let sep_report = grad_check_module(
        &sep,
        |t, p| {
            let xv = t.input(x.clone());
            let y = separable_attention(t, "", xv, p)?;
            probe_loss(t, y, &r)
        },
        |_| true,
        0,
        EPS,
        tol,
    )?;
    let swift_report = grad_check_module(
        &swift,
        |t, p| {
            let xv = t.input(x.clone());
            let y = swift_attention(t, "", xv, p)?;
            probe_loss(t, y, &r)
        },
        |_| true,
        0,
        EPS,
        tol,
    )?;
    Ok(vec![
        NamedReport {
            name: "mixer/msa".into(),
            report: msa_report,
        },
        NamedReport {
            name: "mixer/separable".into(),
            report: sep_report,
        },
        NamedReport {
            name: "mixer/swift".into(),
            report: swift_report,
        },
    ])
}

/// Draws with `draw` until the forward `run` keeps every ReLU input at least
/// [`RELU_MARGIN`] away from zero.
fn resample<S>(
    rng: &mut ChaCha8Rng,
    draw: impl Fn(&mut ChaCha8Rng) -> Result<S>,
    run: impl Fn(&S) -> Result<Tape<f64>>,
) -> Result<S> {
    for _ in 0..MAX_RESAMPLES {
        let s = draw(rng)?;
        let tape = run(&s)?;
        if tape.relu_margin().is_none_or(|m| m >= RELU_MARGIN) {
            return Ok(s);
        }
    }
    Err(Error::Autograd(format!(
        "no sample kept ReLU inputs {RELU_MARGIN:e} away from zero in {MAX_RESAMPLES} draws"
    )))
}

/// Sets every running statistic to the batch statistics of one train-mode
/// pass, so eval-mode batch norm sees unit-scale activations.
fn calibrate<M: Module<f64>>(m: &mut M, run: impl Fn(&mut Tape<f64>, &M) -> Result<()>) -> Result<()> {
    let mut tape = Tape::new();
    run(&mut tape, m)?;
    apply_bn_updates(m, tape.stat_updates(), 1.0);
    Ok(())
}

fn small_config(mixer: MixerKind) -> VariantConfig {
    VariantConfig {
        mixer,
        mlp_ratio: 2,
        ..VariantConfig::tiny(3)
    }
}

/// Parameter gradients of one CAS block.
pub fn check_block(seed: u64, tol: f64, mixer: MixerKind) -> Result<NamedReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_config(mixer);
    let shape = [2, 4, 4, 4];
    let (p, x, r) = resample(
        &mut rng,
        |rng| {
            let mut p = BlockParams::<f64>::new(4, &cfg, rng)?;
            randomize(&mut p, rng);
            let x = random(&shape, rng);
            calibrate(&mut p, |tape, p| {
                let xv = tape.input(x.clone());
                cas_block(tape, "", xv, p, &cfg, BatchNormMode::Train).map(|_| ())
            })?;
            Ok((p, x, random(&shape, rng)))
        },
        |(p, x, _)| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            cas_block(&mut tape, "", xv, p, &cfg, BatchNormMode::Eval)?;
            Ok(tape)
        },
    )?;
    // the pooling mixer computes pool(x) - x, which cancels any per-channel
    // shift, so the pre-norm shift has an identically zero gradient and only
    // finite-difference noise to compare; `block_gradients_that_must_vanish` covers it
    let skip = |name: &str| mixer == MixerKind::Pool && name == "norm1.beta";
    let report = grad_check_module(
        &p,
        |tape, p| {
            let xv = tape.input(x.clone());
            let y = cas_block(tape, "", xv, p, &cfg, BatchNormMode::Eval)?;
            probe_loss(tape, y, &r)
        },
        |name| !skip(name),
        0,
        EPS,
        tol,
    )?;
    Ok(NamedReport {
        name: format!("block/{}", mixer.name()),
        report,
    })
}

/// Stem, two CAS blocks with a patch embedding between them, and the
/// classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBackbone {
    pub stem: StemParams<f64>,
    pub block0: BlockParams<f64>,
    pub embed: ConvBn<f64>,
    pub block1: BlockParams<f64>,
    pub head_norm: BatchNorm<f64>,
    pub head: Linear<f64>,
    pub cfg: VariantConfig,
}

impl MiniBackbone {
    pub fn new(c: [usize; 2], classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cfg = small_config(MixerKind::Catm);
        Ok(Self {
            stem: StemParams::new(c[0], cfg.norm_eps, rng),
            block0: BlockParams::new(c[0], &cfg, rng)?,
            embed: patch_embed_params(c[0], c[1], cfg.norm_eps, rng),
            block1: BlockParams::new(c[1], &cfg, rng)?,
            head_norm: BatchNorm::new(c[1], cfg.norm_eps),
            head: Linear::new(c[1], classes, true, rng),
            cfg,
        })
    }

    pub fn forward(&self, tape: &mut Tape<f64>, img: Var, mode: BatchNormMode) -> Result<Var> {
        let x = stem(tape, "stem", img, &self.stem, mode)?;
        let x = cas_block(tape, "block0", x, &self.block0, &self.cfg, mode)?;
        let x = patch_embed(tape, "embed", x, &self.embed, mode)?;
        let x = cas_block(tape, "block1", x, &self.block1, &self.cfg, mode)?;
        let pooled = tape.global_avg_pool(x)?;
        let n = self.head_norm.forward(tape, "head.norm", pooled, mode)?;
        let [b, c, _, _] = tape.value(n).dims4("mini_backbone")?;
        let flat = tape.reshape(n, &[b, c])?;
        self.head.forward(tape, "head.fc", flat)
    }
}

impl Module<f64> for MiniBackbone {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<f64>, ParamKind)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.block0.visit(&join(prefix, "block0"), f);
        self.embed.visit(&join(prefix, "embed"), f);
        self.block1.visit(&join(prefix, "block1"), f);
        self.head_norm.visit(&join(prefix, "head.norm"), f);
        self.head.visit(&join(prefix, "head.fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f64>, ParamKind)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.block0.visit_mut(&join(prefix, "block0"), f);
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.block1.visit_mut(&join(prefix, "block1"), f);
        self.head_norm.visit_mut(&join(prefix, "head.norm"), f);
        self.head.visit_mut(&join(prefix, "head.fc"), f);
    }
}

/// Parameter gradients of a two-block backbone on 16×16 inputs.
///
/// `per_tensor` caps the number of elements probed per tensor (`0` = all).
pub fn check_mini_backbone(seed: u64, tol: f64, per_tensor: usize) -> Result<NamedReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, x, r) = resample(
        &mut rng,
        |rng| {
            let mut m = MiniBackbone::new([4, 6], 3, rng)?;
            randomize(&mut m, rng);
            // three images: statistics of two pooled values are degenerate
            let x = random(&[3, 3, 16, 16], rng);
            calibrate(&mut m, |tape, m| {
                let xv = tape.input(x.clone());
                m.forward(tape, xv, BatchNormMode::Train).map(|_| ())
            })?;
            Ok((m, x, random(&[3, 3], rng)))
        },
        |(m, x, _)| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            m.forward(&mut tape, xv, BatchNormMode::Eval)?;
            Ok(tape)
        },
    )?;
    let report = grad_check_module(
        &m,
        |tape, m| {
            let xv = tape.input(x.clone());
            let y = m.forward(tape, xv, BatchNormMode::Eval)?;
            probe_loss(tape, y, &r)
        },
        |_| true,
        per_tensor,
        EPS,
        tol,
    )?;
    Ok(NamedReport {
        name: "mini_backbone".into(),
        report,
    })
}
