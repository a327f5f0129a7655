//! Four-stage classifier built from CAS blocks.
//!
//! ```text
//! stem (two stride-2 3x3 convs)            H/4
//! stage 1: N1 blocks at C1
//! patch embed (3x3 stride 2)               H/8
//! stage 2: N2 blocks at C2
//! ...
//! stage 4: N4 blocks at C4                 H/32
//! global pool -> batch norm -> linear head
//! ```
//!
//! Each block is `x1 = x + I(x)`, `x2 = x1 + M(BN(x1))`, `out = x2 + MLP(BN(x2))`
//! where `I` is three depthwise 3x3 conv/BN/ReLU units and `M` the token mixer.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::catm::{catm_forward, Ablation, CatmParams, InteractionConfig, ProjectionKind};
use crate::error::{Error, Result};
use crate::mixers::{msa_forward, pool_mixer, separable_attention, swift_attention, MsaParams, SeparableParams, SwiftParams};
use crate::nn::{join, BatchNorm, Conv, ConvBn, Linear, Module, ParamKind};
use crate::tensor::{BatchNormMode, ConvSpec, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantName {
    XS,
    S,
    M,
    T,
    #[serde(rename = "custom")]
    Custom,
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariantName::XS => "XS",
            VariantName::S => "S",
            VariantName::M => "M",
            VariantName::T => "T",
            VariantName::Custom => "custom",
        })
    }
}

impl FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "XS" | "xs" => Ok(VariantName::XS),
            "S" | "s" => Ok(VariantName::S),
            "M" | "m" => Ok(VariantName::M),
            "T" | "t" => Ok(VariantName::T),
            "custom" => Ok(VariantName::Custom),
            _ => Err(Error::Unknown {
                kind: "variant",
                name: s.to_string(),
            }),
        }
    }
}

/// Token mixer used inside every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    #[default]
    Catm,
    Pool,
    Msa,
    Separable,
    Swift,
}

impl MixerKind {
    pub const ALL: [MixerKind; 5] = [
        MixerKind::Catm,
        MixerKind::Pool,
        MixerKind::Msa,
        MixerKind::Separable,
        MixerKind::Swift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Catm => "catm",
            MixerKind::Pool => "pool",
            MixerKind::Msa => "msa",
            MixerKind::Separable => "separable",
            MixerKind::Swift => "swift",
        }
    }
}

impl FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "mixer",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: VariantName,
    pub blocks: [usize; 4],
    pub channels: [usize; 4],
    pub mlp_ratio: usize,
    pub projection_kind: ProjectionKind,
    pub ablation: Ablation,
    pub mixer: MixerKind,
    /// Kernel of the pooling mixer.
    pub pool_size: usize,
    pub num_classes: usize,
    pub norm_eps: f64,
}

impl VariantConfig {
    fn with(name: VariantName, blocks: [usize; 4], channels: [usize; 4]) -> Self {
        Self {
            name,
            blocks,
            channels,
            mlp_ratio: 4,
            projection_kind: ProjectionKind::Depthwise1x1,
            ablation: Ablation::Base,
            mixer: MixerKind::Catm,
            pool_size: 3,
            num_classes: 1000,
            norm_eps: 1e-5,
        }
    }

    pub fn preset(name: VariantName) -> Result<Self> {
        Ok(match name {
            VariantName::XS => Self::with(name, [2, 2, 4, 2], [48, 56, 112, 220]),
            VariantName::S => Self::with(name, [3, 3, 6, 3], [48, 64, 128, 256]),
            VariantName::M => Self::with(name, [3, 3, 6, 3], [64, 96, 192, 384]),
            VariantName::T => Self::with(name, [3, 3, 6, 3], [96, 128, 256, 512]),
            VariantName::Custom => {
                return Err(Error::Config("custom variants need explicit blocks and channels".into()))
            }
        })
    }

    /// Small custom variant used for toy-scale training.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::with(VariantName::Custom, [1, 1, 2, 1], [16, 24, 48, 64])
        }
    }

    pub fn interaction_config(&self) -> InteractionConfig {
        crate::catm::make_ablation(self.ablation).with_projection(self.projection_kind)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.contains(&0) {
            return Err(Error::Config(format!("every stage needs at least one block, got {:?}", self.blocks)));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config(format!("channels must be positive, got {:?}", self.channels)));
        }
        if self.channels[0] < 2 {
            return Err(Error::Config("the first stage needs at least 2 channels for the stem".into()));
        }
        if self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(Error::Config("mlp_ratio and num_classes must be positive".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        if self.pool_size.is_multiple_of(2) {
            return Err(Error::Config(format!("pool_size must be odd, got {}", self.pool_size)));
        }
        Ok(())
    }
}

/// Optional replacements applied on top of a preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantOverrides {
    pub blocks: Option<[usize; 4]>,
    pub channels: Option<[usize; 4]>,
    pub mlp_ratio: Option<usize>,
    pub projection_kind: Option<ProjectionKind>,
    pub ablation: Option<Ablation>,
    pub mixer: Option<MixerKind>,
    pub num_classes: Option<usize>,
    pub norm_eps: Option<f64>,
}

impl VariantOverrides {
    pub fn apply(&self, mut cfg: VariantConfig) -> VariantConfig {
        if let Some(v) = self.blocks {
            cfg.blocks = v;
        }
        if let Some(v) = self.channels {
            cfg.channels = v;
        }
        if let Some(v) = self.mlp_ratio {
            cfg.mlp_ratio = v;
        }
        if let Some(v) = self.projection_kind {
            cfg.projection_kind = v;
        }
        if let Some(v) = self.ablation {
            cfg.ablation = v;
        }
        if let Some(v) = self.mixer {
            cfg.mixer = v;
        }
        if let Some(v) = self.num_classes {
            cfg.num_classes = v;
        }
        if let Some(v) = self.norm_eps {
            cfg.norm_eps = v;
        }
        cfg
    }
}

/// Parameters of the mixer slot of a block.
#[derive(Debug, Clone, PartialEq)]
pub enum MixerParams<T> {
    Catm(CatmParams<T>),
    /// The pooling mixer has no parameters.
    Pool,
    Msa(MsaParams<T>),
    Separable(SeparableParams<T>),
    Swift(SwiftParams<T>),
}

impl<T: Scalar> MixerParams<T> {
    pub fn new(c: usize, cfg: &VariantConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match cfg.mixer {
            MixerKind::Catm => MixerParams::Catm(CatmParams::new(c, &cfg.interaction_config(), cfg.norm_eps, rng)?),
            MixerKind::Pool => MixerParams::Pool,
            MixerKind::Msa => MixerParams::Msa(MsaParams::new(c, rng)),
            MixerKind::Separable => MixerParams::Separable(SeparableParams::new(c, rng)),
            MixerKind::Swift => MixerParams::Swift(SwiftParams::new(c, rng)),
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            MixerParams::Catm(_) => MixerKind::Catm,
            MixerParams::Pool => MixerKind::Pool,
            MixerParams::Msa(_) => MixerKind::Msa,
            MixerParams::Separable(_) => MixerKind::Separable,
            MixerParams::Swift(_) => MixerKind::Swift,
        }
    }
}

impl<T: Scalar> Module<T> for MixerParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        match self {
            MixerParams::Catm(p) => p.visit(prefix, f),
            MixerParams::Pool => {}
            MixerParams::Msa(p) => p.visit(prefix, f),
            MixerParams::Separable(p) => p.visit(prefix, f),
            MixerParams::Swift(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        match self {
            MixerParams::Catm(p) => p.visit_mut(prefix, f),
            MixerParams::Pool => {}
            MixerParams::Msa(p) => p.visit_mut(prefix, f),
            MixerParams::Separable(p) => p.visit_mut(prefix, f),
            MixerParams::Swift(p) => p.visit_mut(prefix, f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    /// Three depthwise 3x3 conv + BN units (ReLU applied in the forward pass).
    pub integration: [ConvBn<T>; 3],
    pub norm1: BatchNorm<T>,
    pub mixer: MixerParams<T>,
    pub norm2: BatchNorm<T>,
    pub fc1: Conv<T>,
    pub fc2: Conv<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn new(c: usize, cfg: &VariantConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let eps = cfg.norm_eps;
        let mut unit = || ConvBn {
            conv: Conv::depthwise(c, 3, false, rng),
            bn: BatchNorm::new(c, eps),
        };
        let integration = [unit(), unit(), unit()];
        Ok(Self {
            integration,
            norm1: BatchNorm::new(c, eps),
            mixer: MixerParams::new(c, cfg, rng)?,
            norm2: BatchNorm::new(c, eps),
            fc1: Conv::pointwise(c, c * cfg.mlp_ratio, true, rng),
            fc2: Conv::pointwise(c * cfg.mlp_ratio, c, true, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.norm1.gamma.numel()
    }
}

impl<T: Scalar> Module<T> for BlockParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        for (i, u) in self.integration.iter().enumerate() {
            u.visit(&join(prefix, &format!("integration.{i}")), f);
        }
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.mixer.visit(&join(prefix, "mixer"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        for (i, u) in self.integration.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("integration.{i}")), f);
        }
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.mixer.visit_mut(&join(prefix, "mixer"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemParams<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
}

impl<T: Scalar> StemParams<T> {
    pub fn new(c1: usize, eps: f64, rng: &mut ChaCha8Rng) -> Self {
        let spec = ConvSpec::strided(3, 2, 1, 1);
        Self {
            conv1: ConvBn {
                conv: Conv::new(3, c1 / 2, spec, false, rng),
                bn: BatchNorm::new(c1 / 2, eps),
            },
            conv2: ConvBn {
                conv: Conv::new(c1 / 2, c1, spec, false, rng),
                bn: BatchNorm::new(c1, eps),
            },
        }
    }
}

impl<T: Scalar> Module<T> for StemParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Dense 3x3 stride-2 convolution `C_i -> C_{i+1}` followed by BN.
pub fn patch_embed_params<T: Scalar>(cin: usize, cout: usize, eps: f64, rng: &mut ChaCha8Rng) -> ConvBn<T> {
    ConvBn {
        conv: Conv::new(cin, cout, ConvSpec::strided(3, 2, 1, 1), false, rng),
        bn: BatchNorm::new(cout, eps),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub stem: StemParams<T>,
    pub stages: Vec<Vec<BlockParams<T>>>,
    /// Patch embeddings in front of stages 2, 3 and 4.
    pub embeds: Vec<ConvBn<T>>,
    pub head_norm: BatchNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn new(cfg: &VariantConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let stem = StemParams::new(c[0], cfg.norm_eps, rng);
        let mut stages = Vec::with_capacity(4);
        let mut embeds = Vec::with_capacity(3);
        for i in 0..4 {
            if i > 0 {
                embeds.push(patch_embed_params(c[i - 1], c[i], cfg.norm_eps, rng));
            }
            let blocks = (0..cfg.blocks[i])
                .map(|_| BlockParams::new(c[i], cfg, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        Ok(Self {
            stem,
            stages,
            embeds,
            head_norm: BatchNorm::new(c[3], cfg.norm_eps),
            head: Linear::new(c[3], cfg.num_classes, true, rng),
        })
    }

    /// Checks that the parameter shapes are the ones `cfg` describes.
    pub fn check_against(&self, cfg: &VariantConfig) -> Result<()> {
        let mismatch = |what: String| Err(Error::Config(format!("parameters do not match config: {what}")));
        if self.stages.len() != 4 || self.embeds.len() != 3 {
            return mismatch(format!("{} stages, {} patch embeddings", self.stages.len(), self.embeds.len()));
        }
        if self.stem.conv2.conv.out_channels() != cfg.channels[0] {
            return mismatch("stem width".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.len() != cfg.blocks[i] {
                return mismatch(format!("stage {i} has {} blocks, expected {}", stage.len(), cfg.blocks[i]));
            }
            for (j, b) in stage.iter().enumerate() {
                if b.channels() != cfg.channels[i] || b.mixer.kind() != cfg.mixer {
                    return mismatch(format!("stage {i} block {j}"));
                }
            }
        }
        if self.head.weight.shape() != [cfg.channels[3], cfg.num_classes] {
            return mismatch(format!("head shape {:?}", self.head.weight.shape()));
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for BackboneParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor<T>, ParamKind)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                self.embeds[i - 1].visit(&join(prefix, &format!("embed{i}")), f);
            }
            for (j, b) in stage.iter().enumerate() {
                b.visit(&join(prefix, &format!("stage{i}.block{j}")), f);
            }
        }
        self.head_norm.visit(&join(prefix, "head.norm"), f);
        self.head.visit(&join(prefix, "head.fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>, ParamKind)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            if i > 0 {
                self.embeds[i - 1].visit_mut(&join(prefix, &format!("embed{i}")), f);
            }
            for (j, b) in stage.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("stage{i}.block{j}")), f);
            }
        }
        self.head_norm.visit_mut(&join(prefix, "head.norm"), f);
        self.head.visit_mut(&join(prefix, "head.fc"), f);
    }
}

/// Three `dw3 -> BN -> ReLU` units; the caller adds the residual.
pub fn integration_subnet<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    units: &[ConvBn<T>; 3],
    mode: BatchNormMode,
) -> Result<Var> {
    let c = units[0].conv.out_channels();
    let [_, cx, _, _] = tape.value(x).dims4("integration_subnet")?;
    if cx != c {
        return Err(Error::shape("integration_subnet", format!("input has {cx} channels, expected {c}")));
    }
    tape.scoped("integration", |tape| {
        let mut y = x;
        for (i, u) in units.iter().enumerate() {
            y = u.forward(tape, &join(name, &i.to_string()), y, mode, true)?;
        }
        Ok(y)
    })
}

fn mixer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    p: &MixerParams<T>,
    cfg: &VariantConfig,
    mode: BatchNormMode,
) -> Result<Var> {
    let [_, _, h, w] = tape.value(x).dims4("mixer")?;
    let tokens = |tape: &mut Tape<T>, f: &dyn Fn(&mut Tape<T>, Var) -> Result<Var>| -> Result<Var> {
        let t = tape.to_tokens(x)?;
        let y = f(tape, t)?;
        tape.from_tokens(y, h, w)
    };
    match p {
        MixerParams::Catm(p) => catm_forward(tape, name, x, p, &cfg.interaction_config(), mode),
        MixerParams::Pool => pool_mixer(tape, x, cfg.pool_size),
        MixerParams::Msa(p) => tokens(tape, &|t, v| msa_forward(t, name, v, p)),
        MixerParams::Separable(p) => tokens(tape, &|t, v| separable_attention(t, name, v, p)),
        MixerParams::Swift(p) => tokens(tape, &|t, v| swift_attention(t, name, v, p)),
    }
}

pub fn cas_block<T: Scalar>(
    tape: &mut Tape<T>,
    name: &str,
    x: Var,
    p: &BlockParams<T>,
    cfg: &VariantConfig,
    mode: BatchNormMode,
) -> Result<Var> {
    let i = integration_subnet(tape, &join(name, "integration"), x, &p.integration, mode)?;
    let x1 = tape.add(x, i)?;
    let n1 = p.norm1.forward(tape, &join(name, "norm1"), x1, mode)?;
    let m = mixer_forward(tape, &join(name, "mixer"), n1, &p.mixer, cfg, mode)?;
    let x2 = tape.add(x1, m)?;
    let mlp = tape.scoped("mlp", |tape| {
        let n2 = p.norm2.forward(tape, &join(name, "norm2"), x2, mode)?;
        let h = p.fc1.forward(tape, &join(name, "fc1"), n2)?;
        let h = tape.gelu(h);
        p.fc2.forward(tape, &join(name, "fc2"), h)
    })?;
    tape.add(x2, mlp)
}

pub fn stem<T: Scalar>(tape: &mut Tape<T>, name: &str, img: Var, p: &StemParams<T>, mode: BatchNormMode) -> Result<Var> {
    let [_, c, h, w] = tape.value(img).dims4("stem")?;
    if c != 3 || h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape("stem", format!("expected [B, 3, H, W] with H, W divisible by 4, got c={c} h={h} w={w}")));
    }
    tape.scoped("stem", |tape| {
        let y = p.conv1.forward(tape, &join(name, "conv1"), img, mode, true)?;
        p.conv2.forward(tape, &join(name, "conv2"), y, mode, true)
    })
}

pub fn patch_embed<T: Scalar>(tape: &mut Tape<T>, name: &str, x: Var, p: &ConvBn<T>, mode: BatchNormMode) -> Result<Var> {
    let [_, _, h, w] = tape.value(x).dims4("patch_embed")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("patch_embed", format!("extents {h}x{w} must be even")));
    }
    p.forward(tape, name, x, mode, false)
}

/// Stage outputs and logits of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    pub stages: [Var; 4],
    pub logits: Var,
}

pub fn backbone_forward_features<T: Scalar>(
    tape: &mut Tape<T>,
    img: Var,
    p: &BackboneParams<T>,
    cfg: &VariantConfig,
    mode: BatchNormMode,
) -> Result<BackboneOutput> {
    let [_, _, h, w] = tape.value(img).dims4("backbone_forward")?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape("backbone_forward", format!("input extents {h}x{w} must be divisible by 32")));
    }
    p.check_against(cfg)?;
    let mut x = stem(tape, "stem", img, &p.stem, mode)?;
    let mut stages = [x; 4];
    for (i, blocks) in p.stages.iter().enumerate() {
        if i > 0 {
            let name = format!("embed{i}");
            x = tape.scoped(&name, |t| patch_embed(t, &name, x, &p.embeds[i - 1], mode))?;
        }
        x = tape.scoped(&format!("stage{i}"), |tape| {
            let mut y = x;
            for (j, b) in blocks.iter().enumerate() {
                let name = format!("stage{i}.block{j}");
                y = tape.scoped(&format!("block{j}"), |t| cas_block(t, &name, y, b, cfg, mode))?;
            }
            Ok(y)
        })?;
        stages[i] = x;
    }
    let logits = tape.scoped("head", |tape| {
        let pooled = tape.global_avg_pool(x)?;
        let n = p.head_norm.forward(tape, "head.norm", pooled, mode)?;
        let b = tape.shape(n)[0];
        let flat = tape.reshape(n, &[b, cfg.channels[3]])?;
        p.head.forward(tape, "head.fc", flat)
    })?;
    Ok(BackboneOutput { stages, logits })
}

pub fn backbone_forward<T: Scalar>(
    tape: &mut Tape<T>,
    img: Var,
    p: &BackboneParams<T>,
    cfg: &VariantConfig,
    mode: BatchNormMode,
) -> Result<Var> {
    Ok(backbone_forward_features(tape, img, p, cfg, mode)?.logits)
}

/// Eval-mode logits for a batch of images.
pub fn predict<T: Scalar>(img: &Tensor<T>, p: &BackboneParams<T>, cfg: &VariantConfig) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.input(img.clone());
    let y = backbone_forward(&mut tape, x, p, cfg, BatchNormMode::Eval)?;
    Ok(tape.value(y).clone())
}

/// Config and freshly initialised parameters for a named variant.
///
/// `name` is one of `XS`, `S`, `M`, `T`, `tiny`, or `custom` (which needs
/// `blocks` and `channels` overrides).
pub fn build_variant<T: Scalar>(
    name: &str,
    overrides: &VariantOverrides,
    seed: u64,
) -> Result<(VariantConfig, BackboneParams<T>)> {
    let base = match name {
        "tiny" => VariantConfig::tiny(1000),
        _ => match name.parse::<VariantName>()? {
            VariantName::Custom => {
                let (Some(blocks), Some(channels)) = (overrides.blocks, overrides.channels) else {
                    return Err(Error::Config("custom variants need explicit blocks and channels".into()));
                };
                VariantConfig::with(VariantName::Custom, blocks, channels)
            }
            preset => VariantConfig::preset(preset)?,
        },
    };
    let cfg = overrides.apply(base);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = BackboneParams::new(&cfg, &mut rng)?;
    Ok((cfg, params))
}
