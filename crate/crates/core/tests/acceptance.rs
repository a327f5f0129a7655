//! Acceptance suite: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use casvit::accounting::{audit_tape, catm_cost, catm_cost_for, model_cost, phi_cost};
use casvit::autograd::Tape;
use casvit::backbone::{backbone_forward, build_variant, cas_block, BlockParams, MixerKind, VariantConfig, VariantOverrides};
use casvit::catm::{
    catm_forward, channel_interaction, context_map_phi, make_ablation, spatial_interaction, Ablation, CatmParams,
    ChannelParams, Interaction, InteractionConfig, PhiParams, ProjectionKind, SpatialParams,
};
use casvit::harness::checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, read_header};
use casvit::harness::checks::{self, NamedReport};
use casvit::harness::{
    catm_scaling, evaluate, generate_shapes_dataset, load_checkpoint, msa_kernel_scaling, save_checkpoint, train,
    TrainConfig,
};
use casvit::mixers::{msa_forward, separable_attention, swift_attention, MsaParams, SeparableParams, SwiftParams};
use casvit::tensor::{BatchNormMode, Padding};
use casvit::{FormatCode, Tensor};
use common::{mixed_err, per_image, per_sequence, random, randomize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: pass flag and a one-line summary.
struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run(id: u8, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = start.elapsed();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let in_time = elapsed <= budget;
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    let time_note = if in_time { String::new() } else { format!(" [over budget {:?}]", budget) };
    println!(
        "criterion {id} {title}: {verdict} ({detail}; {:.1}s){time_note}",
        elapsed.as_secs_f64()
    );
    pass && in_time
}

fn minutes(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn c1_complexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut formula_ok = true;
    for _ in 0..50 {
        let (h, w, c) = (rng.random_range(1..300), rng.random_range(1..300), rng.random_range(1..1024));
        let hwc = (h * w * c) as u64;
        formula_ok &= phi_cost(h, w, c) == 13 * hwc && catm_cost(h, w, c) == 38 * hwc;
    }
    // instrumented counts: Φ and CATM on their own, then whole models
    let mut tape_ok = true;
    for _ in 0..10 {
        let (h, w, c) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..7));
        let cfg = InteractionConfig::default();
        let p = CatmParams::<f64>::new(c, &cfg, 1e-5, &mut rng).unwrap();
        let x = random(&[1, c, h, w], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        context_map_phi(&mut tape, "phi", xv, &p.phi_q, &cfg.q_branch, BatchNormMode::Eval).unwrap();
        tape_ok &= audit_tape(&tape).total_macs == phi_cost(h, w, c);
        for ablation in Ablation::ALL {
            for kind in [ProjectionKind::Depthwise1x1, ProjectionKind::Dense1x1] {
                let cfg = make_ablation(ablation).with_projection(kind);
                let p = CatmParams::<f64>::new(c, &cfg, 1e-5, &mut rng).unwrap();
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                catm_forward(&mut tape, "catm", xv, &p, &cfg, BatchNormMode::Eval).unwrap();
                tape_ok &= audit_tape(&tape).total_macs == catm_cost_for(&cfg, h, w, c);
            }
        }
    }
    for mixer in MixerKind::ALL {
        for kind in [ProjectionKind::Depthwise1x1, ProjectionKind::Dense1x1] {
            let ov = VariantOverrides {
                mixer: Some(mixer),
                projection_kind: Some(kind),
                ..Default::default()
            };
            let (cfg, p) = build_variant::<f32>("tiny", &ov, 0).unwrap();
            let mut tape = Tape::new();
            let xv = tape.input(Tensor::zeros([1, 3, 64, 64]));
            backbone_forward(&mut tape, xv, &p, &cfg, BatchNormMode::Eval).unwrap();
            tape_ok &= audit_tape(&tape).total_macs == model_cost(&p, &cfg, 64, 64).macs_total;
        }
    }
    outcome(
        formula_ok && tape_ok,
        format!("closed forms on 50 triples: {formula_ok}; tape counts equal analytic counts: {tape_ok}"),
    )
}

fn c2_table() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for v in ["XS", "S", "M", "T"] {
        let ov = VariantOverrides {
            projection_kind: Some(ProjectionKind::Dense1x1),
            ..Default::default()
        };
        let (cfg, p) = build_variant::<f32>(v, &ov, 0).unwrap();
        let r = model_cost(&p, &cfg, 224, 224);
        let dev = r.params_deviation().unwrap();
        let within = dev.abs() <= 0.15;
        pass &= within && r.params_verified();
        parts.push(format!(
            "{v} {:.3}M ({:+.1}%{}) {:.0}M MACs, instantiated {}",
            r.params_total as f64 / 1e6,
            100.0 * dev,
            if within { "" } else { " outside ±15%" },
            r.macs_total as f64 / 1e6,
            if r.params_verified() { "equal" } else { "DIFFERS" }
        ));
    }
    outcome(pass, parts.join("; "))
}

fn summarize(reports: &[NamedReport]) -> (bool, f64, Vec<String>) {
    let worst = reports.iter().map(|r| r.report.max_error()).fold(0.0, f64::max);
    let failed: Vec<String> = reports.iter().filter(|r| !r.report.passed()).map(|r| r.name.clone()).collect();
    (failed.is_empty(), worst, failed)
}

fn c3_gradients() -> Outcome {
    let mut tight = checks::check_conv2d(11, 1e-5).unwrap();
    tight.push(checks::check_batchnorm(12, 1e-5, BatchNormMode::Eval).unwrap());
    tight.extend(checks::check_catm(13, 1e-5).unwrap());
    tight.extend(checks::check_attention_mixers(14, 1e-5).unwrap());
    let loose = vec![
        checks::check_block(15, 1e-4, MixerKind::Catm).unwrap(),
        checks::check_mini_backbone(16, 1e-4, 0).unwrap(),
    ];
    let (ok1, w1, f1) = summarize(&tight);
    let (ok2, w2, f2) = summarize(&loose);
    let mut failed = f1;
    failed.extend(f2);
    outcome(
        ok1 && ok2,
        format!(
            "{} primitive/mixer checks max rel err {w1:.2e} (tol 1e-5); block + mini-backbone max {w2:.2e} (tol 1e-4){}",
            tight.len(),
            if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
        ),
    )
}

fn c4_structure() -> Outcome {
    let mut pass = true;
    let mut nodes = 0;
    for v in ["XS", "S", "M", "T"] {
        for ablation in Ablation::ALL {
            for kind in [ProjectionKind::Depthwise1x1, ProjectionKind::Dense1x1] {
                let ov = VariantOverrides {
                    ablation: Some(ablation),
                    projection_kind: Some(kind),
                    ..Default::default()
                };
                let (cfg, p) = build_variant::<f32>(v, &ov, 0).unwrap();
                let mut tape = Tape::new();
                let xv = tape.input(Tensor::zeros([1, 3, 32, 32]));
                backbone_forward(&mut tape, xv, &p, &cfg, BatchNormMode::Eval).unwrap();
                let a = audit_tape(&tape);
                pass &= a.catm_nodes > 0 && a.catm_is_matmul_free();
                nodes += a.catm_nodes;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let msa = MsaParams::<f64>::new(8, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.input(random(&[1, 6, 8], &mut rng));
    msa_forward(&mut tape, "msa", xv, &msa).unwrap();
    let a = audit_tape(&tape);
    use casvit::autograd::OpKind;
    let msa_ok = a.count(OpKind::Matmul) >= 1 && a.count(OpKind::Softmax) >= 1;
    outcome(
        pass && msa_ok,
        format!(
            "{nodes} CATM nodes over 4 variants x 5 configs x 2 projections contain no matmul/softmax: {pass}; MSA has {} matmul, {} softmax",
            a.count(OpKind::Matmul),
            a.count(OpKind::Softmax)
        ),
    )
}

fn c5_shift() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (c, h, w) = (rng.random_range(2..6), rng.random_range(3..9), rng.random_range(3..9));
        let (dy, dx) = (rng.random_range(-4i32..5) as isize, rng.random_range(-4i32..5) as isize);
        let x = random(&[2, c, h, w], &mut rng);
        let cfg = InteractionConfig::default();
        let mut p = CatmParams::<f64>::new(c, &cfg, 1e-5, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let vcfg = VariantConfig::tiny(4);
        let mut b = BlockParams::<f64>::new(c, &vcfg, &mut rng).unwrap();
        randomize(&mut b, &mut rng);
        let catm = |x: &Tensor<f64>| {
            let mut t = Tape::with_padding(Padding::Circular);
            let xv = t.input(x.clone());
            let y = catm_forward(&mut t, "catm", xv, &p, &cfg, BatchNormMode::Eval).unwrap();
            t.value(y).clone()
        };
        let block = |x: &Tensor<f64>| {
            let mut t = Tape::with_padding(Padding::Circular);
            let xv = t.input(x.clone());
            let y = cas_block(&mut t, "b", xv, &b, &vcfg, BatchNormMode::Eval).unwrap();
            t.value(y).clone()
        };
        let shifted = x.roll_spatial(dy, dx).unwrap();
        for f in [&catm as &dyn Fn(&Tensor<f64>) -> Tensor<f64>, &block] {
            let a = f(&shifted);
            let b = f(&x).roll_spatial(dy, dx).unwrap();
            worst = worst.max(mixed_err(a.data(), b.data()));
        }
    }
    outcome(worst <= 1e-10, format!("max deviation {worst:.2e} over 10 CATM + 10 block instances (tol 1e-10)"))
}

fn c6_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0f64; 6];
    let instances = 20;
    for i in 0..instances {
        let (c, h, w) = (rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..7));
        let x = random(&[2, c, h, w], &mut rng);
        let kind = if i % 2 == 0 { ProjectionKind::Depthwise1x1 } else { ProjectionKind::Dense1x1 };
        let cfg = make_ablation(Ablation::ALL[i % Ablation::ALL.len()]).with_projection(kind);
        let mut p = CatmParams::<f64>::new(c, &cfg, 1e-5, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = catm_forward(&mut t, "catm", xv, &p, &cfg, BatchNormMode::Eval).unwrap();
        worst[0] = worst[0].max(mixed_err(t.value(y).data(), &per_image(&x, |g, img| g.catm(img, &p, &cfg))));

        let mut sp = SpatialParams::<f64>::new(c, 1e-5, &mut rng);
        randomize(&mut sp, &mut rng);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = spatial_interaction(&mut t, "s", xv, &sp, BatchNormMode::Eval).unwrap();
        worst[1] = worst[1].max(mixed_err(t.value(y).data(), &per_image(&x, |g, img| g.spatial(img, &sp))));

        let mut ch = ChannelParams::<f64>::new(c, kind, &mut rng);
        randomize(&mut ch, &mut rng);
        let mut t = Tape::new();
        let xv = t.input(x.clone());
        let y = channel_interaction(&mut t, "c", xv, &ch).unwrap();
        worst[2] = worst[2].max(mixed_err(t.value(y).data(), &per_image(&x, |g, img| g.channel(img, &ch, kind))));

        let (n, d) = (rng.random_range(1..9), rng.random_range(1..7));
        let tokens = random(&[2, n, d], &mut rng);
        let mut msa = MsaParams::<f64>::new(d, &mut rng);
        randomize(&mut msa, &mut rng);
        let mut sep = SeparableParams::<f64>::new(d, &mut rng);
        randomize(&mut sep, &mut rng);
        let mut sw = SwiftParams::<f64>::new(d, &mut rng);
        randomize(&mut sw, &mut rng);
        let mut t = Tape::new();
        let xv = t.input(tokens.clone());
        let y = msa_forward(&mut t, "m", xv, &msa).unwrap();
        worst[3] = worst[3].max(mixed_err(t.value(y).data(), &per_sequence(&tokens, |s, n, d| common::msa(s, n, d, &msa))));
        let y = separable_attention(&mut t, "s", xv, &sep).unwrap();
        worst[4] = worst[4].max(mixed_err(t.value(y).data(), &per_sequence(&tokens, |s, n, d| common::separable(s, n, d, &sep))));
        let y = swift_attention(&mut t, "w", xv, &sw).unwrap();
        worst[5] = worst[5].max(mixed_err(t.value(y).data(), &per_sequence(&tokens, |s, n, d| common::swift(s, n, d, &sw))));
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        max <= 1e-10,
        format!(
            "{instances} instances each; max deviation catm {:.1e}, spatial {:.1e}, channel {:.1e}, msa {:.1e}, separable {:.1e}, swift {:.1e} (tol 1e-10)",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    )
}

const TRAIN_EPOCHS: usize = 6;

fn c7_learnability() -> Outcome {
    let data = generate_shapes_dataset(4000, 32, 4, 2024).unwrap();
    let (tr, va) = data.split(3200);
    let tc = TrainConfig {
        epochs: TRAIN_EPOCHS,
        batch_size: 64,
        base_lr: 2e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = |ablation: Ablation, tc: &TrainConfig, tr, va| {
        let ov = VariantOverrides {
            num_classes: Some(4),
            ablation: Some(ablation),
            ..Default::default()
        };
        let (cfg, mut p) = build_variant::<f32>("tiny", &ov, tc.seed).unwrap();
        let hist = train(&mut p, &cfg, tc, tr, Some(va)).unwrap();
        let last = hist.last().and_then(|m| m.val).map_or(0.0, |v| v.accuracy);
        (hist, last)
    };
    // determinism on a short run
    let (small_tr, rest) = tr.split(256);
    let (small_va, _) = rest.split(64);
    let short = TrainConfig {
        epochs: 1,
        ..tc.clone()
    };
    let (h1, _) = run(Ablation::Base, &short, &small_tr, &small_va);
    let (h2, _) = run(Ablation::Base, &short, &small_tr, &small_va);
    let deterministic = h1 == h2;
    let (_, base) = run(Ablation::Base, &tc, &tr, &va);
    let (_, no_spatial) = run(Ablation::NoSpatial, &tc, &tr, &va);
    let (_, no_channel) = run(Ablation::NoChannel, &tc, &tr, &va);
    outcome(
        deterministic && base >= 0.95 && no_spatial >= 0.90 && no_channel >= 0.90,
        format!(
            "{TRAIN_EPOCHS} epochs on 3200/800: base {base:.4} (>= 0.95), no_spatial {no_spatial:.4}, no_channel {no_channel:.4} (>= 0.90); deterministic {deterministic}"
        ),
    )
}

fn c8_scaling() -> Outcome {
    let mut catm = Vec::new();
    let mut msa = Vec::new();
    for _ in 0..3 {
        catm.push(catm_scaling(32, 8, 16, 21).unwrap().ratio);
        msa.push(msa_kernel_scaling(32, 128, 11).unwrap().ratio);
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(|a, b| a.total_cmp(b));
        v[1]
    };
    let (c, m) = (med(&mut catm), med(&mut msa));
    outcome(
        (3.0..=6.0).contains(&c) && (12.0..=20.0).contains(&m),
        format!("128 -> 512 tokens at width 32: CATM x{c:.2} (in [3, 6]), attention kernel x{m:.2} (in [12, 20])"),
    )
}

fn c9_persistence() -> Outcome {
    let ov = VariantOverrides {
        num_classes: Some(4),
        ..Default::default()
    };
    let (cfg, mut p) = build_variant::<f32>("tiny", &ov, 9).unwrap();
    // non-trivial running statistics
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    use casvit::nn::{Module, ParamKind};
    p.visit_mut("", &mut |_, t, k| {
        if k == ParamKind::Buffer {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.casv");
    save_checkpoint(&p, &cfg, &path).unwrap();
    let (cfg2, p2) = load_checkpoint::<f32>(&path).unwrap();
    let bits = |m: &casvit::backbone::BackboneParams<f32>| {
        m.named_tensors("")
            .into_iter()
            .flat_map(|(_, t, _)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    let exact = cfg2 == cfg && bits(&p) == bits(&p2);
    let data = generate_shapes_dataset(64, 32, 4, 3).unwrap();
    let same_eval = evaluate(&p, &cfg, &data, 16).unwrap() == evaluate(&p2, &cfg2, &data, 16).unwrap();

    let bytes = checkpoint_to_bytes(&p, &cfg).unwrap();
    let code = |b: &[u8]| checkpoint_from_bytes::<f32>(b).err().and_then(|e| e.format_code());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut version = bytes.clone();
    version[4] = 9;
    let (_, entries) = read_header(&bytes).unwrap();
    let json_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let first = &entries[0];
    let second = &entries[1];
    let pos = 10 + json_len + 4 + (4 + first.name.len() + 2 + 4 * first.shape.len() + 8)
        + 4 + second.name.len() + 2 + 4 * second.shape.len();
    let mut overlap = bytes.clone();
    overlap[pos..pos + 8].copy_from_slice(&first.offset.to_le_bytes());
    let codes = [
        code(&magic),
        code(&version),
        code(&bytes[..bytes.len() - 1]),
        code(&bytes[..20]),
        code(&overlap),
    ];
    let expected = [
        Some(FormatCode::BadMagic),
        Some(FormatCode::UnsupportedVersion),
        Some(FormatCode::Truncated),
        Some(FormatCode::Truncated),
        Some(FormatCode::OverlappingOffsets),
    ];
    let codes_ok = codes == expected;
    outcome(
        exact && same_eval && codes_ok,
        format!("bit-exact {exact}; evaluate preserved {same_eval}; rejection codes {:?}", codes.map(|c| c.map(|c| c.code()))),
    )
}

#[test]
fn acceptance_criteria() {
    let results = [
        run(1, "complexity formulas", minutes(1), c1_complexity),
        run(2, "configuration table cross-check", minutes(1), c2_table),
        run(3, "gradient correctness", minutes(10), c3_gradients),
        run(4, "matmul- and softmax-free mixer", minutes(1), c4_structure),
        run(5, "shift equivariance", minutes(1), c5_shift),
        run(6, "oracle equivalence", minutes(5), c6_oracles),
        run(7, "learnability", minutes(30), c7_learnability),
        run(8, "linear token scaling", minutes(5), c8_scaling),
        run(9, "persistence", minutes(1), c9_persistence),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    assert!(results.iter().all(|&p| p), "failing criteria: {:?}", results
        .iter()
        .enumerate()
        .filter(|(_, &p)| !p)
        .map(|(i, _)| i + 1)
        .collect::<Vec<_>>());
}

#[test]
fn interaction_order_is_respected_by_oracle() {
    // sanity check of the oracle itself: swapping the order changes the result
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let order = [Interaction::Spatial, Interaction::Channel];
    let mut p = PhiParams::<f64>::new(3, &order, ProjectionKind::Depthwise1x1, 1e-5, &mut rng);
    randomize(&mut p, &mut rng);
    let x = random(&[1, 3, 4, 4], &mut rng);
    let a = per_image(&x, |g, img| g.phi(img, &p, &order, ProjectionKind::Depthwise1x1));
    let b = per_image(&x, |g, img| g.phi(img, &p, &[Interaction::Channel, Interaction::Spatial], ProjectionKind::Depthwise1x1));
    assert!(mixed_err(&a, &b) > 1e-6);
}
