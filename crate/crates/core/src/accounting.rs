//! Parameter and multiply-accumulate counting.
//!
//! Counting convention (`MAC_CONVENTION`):
//!
//! * convolution: `Cout * H' * W' * (Cin / groups) * kh * kw`;
//! * matrix product `[.., M, K] x [.., K, N]`: `M * N * K`;
//! * gating product (feature map times a broadcast attention map): one per
//!   output element; plain elementwise products (such as the final `* V`),
//!   additions, normalisation, activations, softmax and scaling are free;
//! * global average pool: one per input element; `k x k` average pool: `k^2` per output element;
//! * work that only touches pooled `[B, C, 1, 1]` summaries is `O(C)` and dropped.
//!
//! Under it one context map costs `13HWC` and the whole mixer `38HWC`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autograd::{OpKind, Tape};
use crate::backbone::{BackboneParams, MixerKind, VariantConfig, VariantName};
use crate::catm::{Interaction, InteractionConfig, ProjectionKind};
use crate::nn::{Module, ParamKind};
use crate::tensor::Scalar;

pub const MAC_CONVENTION: &str = "macs-v1: conv/matmul MACs, 1 per gated element, pooled-summary work dropped";

/// Spatial interaction: depthwise 3x3 (9), `C -> 1` reduction (1), gate (1).
pub fn spatial_cost(h: usize, w: usize, c: usize) -> u64 {
    11 * (h * w * c) as u64
}

/// Channel interaction: pooling adds (1) and gate (1).
pub fn channel_cost(h: usize, w: usize, c: usize) -> u64 {
    2 * (h * w * c) as u64
}

pub fn interaction_cost(kind: Interaction, h: usize, w: usize, c: usize) -> u64 {
    match kind {
        Interaction::Spatial => spatial_cost(h, w, c),
        Interaction::Channel => channel_cost(h, w, c),
    }
}

/// Context map with both interactions: `13HWC`.
pub fn phi_cost(h: usize, w: usize, c: usize) -> u64 {
    spatial_cost(h, w, c) + channel_cost(h, w, c)
}

/// `Q, K, V` projections.
pub fn projection_cost(kind: ProjectionKind, h: usize, w: usize, c: usize) -> u64 {
    let per = match kind {
        ProjectionKind::Depthwise1x1 => 1,
        ProjectionKind::Dense1x1 => c as u64,
    };
    3 * per * (h * w * c) as u64
}

/// Full mixer with depthwise projections: `3HWC + 2 * 13HWC + 9HWC = 38HWC`.
pub fn catm_cost(h: usize, w: usize, c: usize) -> u64 {
    projection_cost(ProjectionKind::Depthwise1x1, h, w, c) + 2 * phi_cost(h, w, c) + 9 * (h * w * c) as u64
}

/// Mixer cost for any interaction arrangement and projection kind.
pub fn catm_cost_for(cfg: &InteractionConfig, h: usize, w: usize, c: usize) -> u64 {
    let branches: u64 = cfg
        .q_branch
        .iter()
        .chain(&cfg.k_branch)
        .map(|&i| interaction_cost(i, h, w, c))
        .sum();
    projection_cost(cfg.projection_kind, h, w, c) + branches + 9 * (h * w * c) as u64
}

/// `QK^T` and `AV` products of single-head attention over `n` tokens of width `d`: `2 n^2 d`.
pub fn msa_mixing_cost(n: usize, d: usize) -> u64 {
    2 * (n * n * d) as u64
}

/// Attention including its three bias-free projections: `3 n d^2 + 2 n^2 d`.
pub fn msa_cost(n: usize, d: usize) -> u64 {
    3 * (n * d * d) as u64 + msa_mixing_cost(n, d)
}

/// Scores `nd`, K/V projections `2nd^2`, context `nd`, broadcast product `nd`.
pub fn separable_cost(n: usize, d: usize) -> u64 {
    2 * (n * d * d) as u64 + 3 * (n * d) as u64
}

/// Q/K projections `2nd^2`, token weights `nd`, global query `nd`, gate `nd`, output map `nd^2`.
pub fn swift_cost(n: usize, d: usize) -> u64 {
    3 * (n * d * d) as u64 + 3 * (n * d) as u64
}

/// Average pool minus identity.
pub fn pool_cost(h: usize, w: usize, c: usize, k: usize) -> u64 {
    (k * k * h * w * c) as u64
}

/// Mixer cost inside a block of the given config.
pub fn mixer_cost(cfg: &VariantConfig, h: usize, w: usize, c: usize) -> u64 {
    let n = h * w;
    match cfg.mixer {
        MixerKind::Catm => catm_cost_for(&cfg.interaction_config(), h, w, c),
        MixerKind::Pool => pool_cost(h, w, c, cfg.pool_size),
        MixerKind::Msa => msa_cost(n, c),
        MixerKind::Separable => separable_cost(n, c),
        MixerKind::Swift => swift_cost(n, c),
    }
}

fn conv_macs(cin: usize, cout: usize, groups: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    (cout * h_out * w_out * (cin / groups) * k * k) as u64
}

/// Learnable elements of one mixer.
pub fn mixer_params(cfg: &VariantConfig, c: usize) -> usize {
    let bn = 2 * c;
    match cfg.mixer {
        MixerKind::Catm => {
            let ic = cfg.interaction_config();
            let proj = match ic.projection_kind {
                ProjectionKind::Depthwise1x1 => c + c,
                ProjectionKind::Dense1x1 => c * c + c,
            };
            let spatial = 9 * c + bn + c + 1;
            let channel = proj;
            let branch = |b: &[Interaction]| -> usize {
                b.iter()
                    .map(|i| match i {
                        Interaction::Spatial => spatial,
                        Interaction::Channel => channel,
                    })
                    .sum()
            };
            3 * proj + branch(&ic.q_branch) + branch(&ic.k_branch) + 9 * c + c
        }
        MixerKind::Pool => 0,
        MixerKind::Msa => 3 * c * c,
        MixerKind::Separable => c + 2 * (c * c + c),
        MixerKind::Swift => 3 * (c * c + c) + c,
    }
}

/// One row of a cost report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    /// Analytic learnable-element count.
    pub params: usize,
    /// Learnable elements actually present under this layer's name prefix.
    pub instantiated: usize,
    pub macs: u64,
}

/// Published parameter (M) and flop (M) figures for a preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedFigures {
    pub params_m: f64,
    pub flops_m: f64,
}

pub fn published(name: VariantName) -> Option<PublishedFigures> {
    let (params_m, flops_m) = match name {
        VariantName::XS => (3.20, 560.0),
        VariantName::S => (5.76, 932.0),
        VariantName::M => (12.42, 1887.0),
        VariantName::T => (21.76, 3597.0),
        VariantName::Custom => return None,
    };
    Some(PublishedFigures { params_m, flops_m })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub variant: VariantName,
    pub input: (usize, usize),
    pub params_total: usize,
    /// Element count of the instantiated model's learnable tensors.
    pub instantiated_total: usize,
    pub macs_total: u64,
    pub per_layer: Vec<LayerCost>,
    pub convention: &'static str,
    pub published: Option<PublishedFigures>,
}

impl CostReport {
    /// Analytic and instantiated counts agree, in total and per layer.
    pub fn params_verified(&self) -> bool {
        self.params_total == self.instantiated_total && self.per_layer.iter().all(|l| l.params == l.instantiated)
    }

    /// Relative deviation of analytic params from the published figure.
    pub fn params_deviation(&self) -> Option<f64> {
        self.published.map(|p| self.params_total as f64 / (p.params_m * 1e6) - 1.0)
    }

    pub fn macs_deviation(&self) -> Option<f64> {
        self.published.map(|p| self.macs_total as f64 / (p.flops_m * 1e6) - 1.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs\n");
        for l in &self.per_layer {
            let _ = writeln!(s, "{},{},{}", l.name, l.params, l.macs);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant {} @ {}x{}  ({})", self.variant, self.input.0, self.input.1, self.convention);
        let _ = writeln!(s, "{:<36} {:>12} {:>14}", "layer", "params", "macs");
        for l in &self.per_layer {
            let flag = if l.params == l.instantiated { "" } else { "  (instantiated differs)" };
            let _ = writeln!(s, "{:<36} {:>12} {:>14}{flag}", l.name, l.params, l.macs);
        }
        let _ = writeln!(s, "{:<36} {:>12} {:>14}", "total", self.params_total, self.macs_total);
        let _ = writeln!(s, "instantiated params {}", self.instantiated_total);
        if let (Some(p), Some(dp), Some(dm)) = (self.published, self.params_deviation(), self.macs_deviation()) {
            let _ = writeln!(
                s,
                "published: params {:.2}M (ours {:.3}M, {:+.1}%), flops {:.0}M (ours {:.1}M MACs, {:+.1}%)",
                p.params_m,
                self.params_total as f64 / 1e6,
                dp * 100.0,
                p.flops_m,
                self.macs_total as f64 / 1e6,
                dm * 100.0
            );
        }
        s
    }
}

fn instantiated<T: Scalar>(params: &BackboneParams<T>) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    params.visit("", &mut |name, t, kind| {
        if kind == ParamKind::Weight {
            *out.entry(name.to_string()).or_insert(0) += t.numel();
        }
    });
    out
}

fn under(map: &BTreeMap<String, usize>, prefix: &str) -> usize {
    let dotted = format!("{prefix}.");
    map.iter().filter(|(k, _)| k.starts_with(&dotted)).map(|(_, v)| v).sum()
}

/// Analytic per-layer cost of a backbone at input `h x w` (batch of one).
///
/// Block rows are split into integration, mixer (with its pre-norm) and MLP
/// (with its pre-norm). `params` is only used to count instantiated elements.
pub fn model_cost<T: Scalar>(params: &BackboneParams<T>, cfg: &VariantConfig, h: usize, w: usize) -> CostReport {
    let inst = instantiated(params);
    let c = cfg.channels;
    let mut rows: Vec<(String, usize, usize, u64)> = Vec::new();
    let mut push = |name: String, analytic: usize, inst_count: usize, macs: u64| rows.push((name, analytic, inst_count, macs));

    let half = c[0] / 2;
    let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
    push(
        "stem".into(),
        27 * half + 2 * half + 9 * half * c[0] + 2 * c[0],
        under(&inst, "stem"),
        conv_macs(3, half, 1, 3, h2, w2) + conv_macs(half, c[0], 1, 3, h4, w4),
    );
    let (mut hh, mut ww) = (h4, w4);
    for i in 0..4 {
        let ci = c[i];
        if i > 0 {
            hh /= 2;
            ww /= 2;
            push(
                format!("embed{i}"),
                9 * c[i - 1] * ci + 2 * ci,
                under(&inst, &format!("embed{i}")),
                conv_macs(c[i - 1], ci, 1, 3, hh, ww),
            );
        }
        let hw = (hh * ww) as u64;
        for j in 0..cfg.blocks[i] {
            let p = format!("stage{i}.block{j}");
            push(
                format!("{p}.integration"),
                3 * (9 * ci + 2 * ci),
                under(&inst, &format!("{p}.integration")),
                3 * 9 * hw * ci as u64,
            );
            push(
                format!("{p}.mixer"),
                2 * ci + mixer_params(cfg, ci),
                under(&inst, &format!("{p}.norm1")) + under(&inst, &format!("{p}.mixer")),
                mixer_cost(cfg, hh, ww, ci),
            );
            let hidden = ci * cfg.mlp_ratio;
            push(
                format!("{p}.mlp"),
                2 * ci + 2 * ci * hidden + hidden + ci,
                under(&inst, &format!("{p}.norm2")) + under(&inst, &format!("{p}.fc1")) + under(&inst, &format!("{p}.fc2")),
                2 * hw * (ci * hidden) as u64,
            );
        }
    }
    push(
        "head".into(),
        2 * c[3] + c[3] * cfg.num_classes + cfg.num_classes,
        under(&inst, "head"),
        (hh * ww * c[3]) as u64 + (c[3] * cfg.num_classes) as u64,
    );

    let per_layer: Vec<LayerCost> = rows
        .into_iter()
        .map(|(name, params, instantiated, macs)| LayerCost {
            name,
            params,
            instantiated,
            macs,
        })
        .collect();
    CostReport {
        variant: cfg.name,
        input: (h, w),
        params_total: per_layer.iter().map(|l| l.params).sum(),
        instantiated_total: params.num_params(),
        macs_total: per_layer.iter().map(|l| l.macs).sum(),
        per_layer,
        convention: MAC_CONVENTION,
        published: published(cfg.name),
    }
}

/// Kernel counts of a recorded tape and the CATM structural check.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TapeAudit {
    pub counts: BTreeMap<OpKind, usize>,
    /// Nodes recorded inside a `catm` scope.
    pub catm_nodes: usize,
    pub catm_matmul: usize,
    pub catm_softmax: usize,
    /// Scopes containing a matrix product.
    pub matmul_scopes: Vec<String>,
    pub total_macs: u64,
}

impl TapeAudit {
    pub fn count(&self, kind: OpKind) -> usize {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    /// No matrix product and no softmax inside any CATM sub-graph.
    pub fn catm_is_matmul_free(&self) -> bool {
        self.catm_matmul == 0 && self.catm_softmax == 0
    }
}

fn in_scope(path: &str, segment: &str) -> bool {
    path.split('.').any(|s| s == segment)
}

pub fn audit_tape<T: Scalar>(tape: &Tape<T>) -> TapeAudit {
    let mut a = TapeAudit::default();
    for n in tape.nodes() {
        *a.counts.entry(n.kind).or_insert(0) += 1;
        a.total_macs += n.macs;
        let catm = in_scope(n.scope, "catm");
        if catm {
            a.catm_nodes += 1;
        }
        match n.kind {
            OpKind::Matmul => {
                if catm {
                    a.catm_matmul += 1;
                }
                if !a.matmul_scopes.iter().any(|s| s == n.scope) {
                    a.matmul_scopes.push(n.scope.to_string());
                }
            }
            OpKind::Softmax if catm => a.catm_softmax += 1,
            _ => {}
        }
    }
    a
}

/// Sum of recorded MACs of nodes whose scope path contains `segment`.
pub fn scope_macs<T: Scalar>(tape: &Tape<T>, segment: &str) -> u64 {
    tape.nodes().filter(|n| in_scope(n.scope, segment)).map(|n| n.macs).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{backbone_forward, build_variant, VariantOverrides};
    use crate::catm::{catm_forward, context_map_phi, make_ablation, Ablation, CatmParams, PhiParams};
    use crate::tensor::{BatchNormMode, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_forms() {
        assert_eq!(phi_cost(7, 7, 220), 140_140);
        assert_eq!(phi_cost(1, 1, 1), 13);
        assert_eq!(catm_cost(14, 14, 112), 834_176);
        assert_eq!(catm_cost(28, 14, 112), 2 * catm_cost(14, 14, 112));
        let dense = InteractionConfig::default().with_projection(ProjectionKind::Dense1x1);
        assert_eq!(catm_cost_for(&dense, 5, 6, 7), (2 * 13 + 9 + 3 * 7) * 5 * 6 * 7);
        assert_eq!(catm_cost_for(&InteractionConfig::default(), 5, 6, 7), catm_cost(5, 6, 7));
        assert_eq!(msa_mixing_cost(2 * 49, 32), 4 * msa_mixing_cost(49, 32));
    }

    #[test]
    fn tape_macs_match_closed_forms() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (h, w, c) = (r.random_range(1..9), r.random_range(1..9), r.random_range(1..9));
            let x = Tensor::<f64>::zeros([1, c, h, w]);
            let both = [Interaction::Spatial, Interaction::Channel];
            let phi = PhiParams::new(c, &both, ProjectionKind::Depthwise1x1, 1e-5, &mut r);
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            context_map_phi(&mut tape, "phi", xv, &phi, &both, BatchNormMode::Eval).unwrap();
            assert_eq!(audit_tape(&tape).total_macs, phi_cost(h, w, c));
            for ab in Ablation::ALL {
                for kind in [ProjectionKind::Depthwise1x1, ProjectionKind::Dense1x1] {
                    let cfg = make_ablation(ab).with_projection(kind);
                    let p = CatmParams::new(c, &cfg, 1e-5, &mut r).unwrap();
                    let mut tape = Tape::new();
                    let xv = tape.input(x.clone());
                    catm_forward(&mut tape, "catm", xv, &p, &cfg, BatchNormMode::Train).unwrap();
                    assert_eq!(audit_tape(&tape).total_macs, catm_cost_for(&cfg, h, w, c), "{ab} {kind:?}");
                }
            }
        }
    }

    #[test]
    fn model_cost_matches_instantiation_and_tape() {
        for mixer in MixerKind::ALL {
            for kind in [ProjectionKind::Depthwise1x1, ProjectionKind::Dense1x1] {
                let ov = VariantOverrides {
                    mixer: Some(mixer),
                    projection_kind: Some(kind),
                    num_classes: Some(10),
                    ..Default::default()
                };
                let (cfg, p) = build_variant::<f32>("tiny", &ov, 3).unwrap();
                let report = model_cost(&p, &cfg, 64, 64);
                assert!(report.params_verified(), "{}", report.to_text());
                let mut tape = Tape::new();
                let x = tape.input(Tensor::zeros([1, 3, 64, 64]));
                backbone_forward(&mut tape, x, &p, &cfg, BatchNormMode::Eval).unwrap();
                assert_eq!(audit_tape(&tape).total_macs, report.macs_total, "{mixer:?} {kind:?}");
            }
        }
    }

    #[test]
    fn larger_variants_cost_more() {
        let cost = |name: &str| {
            let (cfg, p) = build_variant::<f32>(name, &VariantOverrides::default(), 0).unwrap();
            model_cost(&p, &cfg, 224, 224)
        };
        let (m, t) = (cost("M"), cost("T"));
        assert!(t.params_total > m.params_total);
        assert!(t.macs_total > m.macs_total);
        assert!(m.to_csv().starts_with("layer,params,macs\nstem,"));
        assert!(m.to_text().contains("published"));
    }

    #[test]
    fn audit_separates_catm_from_attention() {
        let (cfg, p) = build_variant::<f32>("tiny", &VariantOverrides::default(), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros([1, 3, 32, 32]));
        backbone_forward(&mut tape, x, &p, &cfg, BatchNormMode::Eval).unwrap();
        let a = audit_tape(&tape);
        assert!(a.catm_nodes > 0 && a.catm_is_matmul_free());
        assert_eq!(a.matmul_scopes, ["head"]);
        assert_eq!(a.count(OpKind::Softmax), 0);
    }
}
