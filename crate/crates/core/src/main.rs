use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use casvit::accounting::model_cost;
use casvit::backbone::{build_variant, MixerKind, VariantOverrides};
use casvit::catm::{Ablation, ProjectionKind};
use casvit::harness::checks::{self, NamedReport};
use casvit::harness::{
    bench_throughput, catm_scaling, evaluate, generate_shapes_dataset, load_checkpoint, msa_kernel_scaling,
    save_checkpoint, train, Dataset, TrainConfig,
};
use casvit::nn::Module;
use casvit::tensor::BatchNormMode;
use casvit::{Error, Result};

#[derive(Parser)]
#[command(name = "casvit", version, about = "Convolutional additive token mixer and CAS-ViT backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Proj {
    Dw,
    Dense,
}

impl From<Proj> for ProjectionKind {
    fn from(p: Proj) -> Self {
        match p {
            Proj::Dw => ProjectionKind::Depthwise1x1,
            Proj::Dense => ProjectionKind::Dense1x1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckModule {
    Catm,
    Block,
    Backbone,
    Conv,
    Batchnorm,
    Mixers,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Instantiate a variant and print its configuration and parameter count.
    Build {
        /// xs, s, m, t or tiny.
        #[arg(long)]
        variant: String,
        #[arg(long, value_enum, default_value = "dw")]
        proj: Proj,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Analytic parameters and MACs, compared with the published figures.
    Flops {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value = "224x224", value_parser = parse_size)]
        size: (usize, usize),
        /// Projection mode; the published figures correspond to dense.
        #[arg(long, value_enum, default_value = "dense")]
        proj: Proj,
        /// Also write the per-layer table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient check.
    Gradcheck {
        #[arg(long, value_enum, default_value = "catm")]
        module: CheckModule,
        /// Relative-error tolerance; defaults to 1e-5 (1e-4 for block and backbone).
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the synthetic shapes dataset.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a variant on a dataset file and save a checkpoint.
    Train {
        #[arg(long, default_value = "tiny")]
        variant: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0.05)]
        weight_decay: f64,
        /// Fraction of the data held out for validation.
        #[arg(long, default_value_t = 0.2)]
        val_frac: f64,
        #[arg(long, value_enum, default_value = "dw")]
        proj: Proj,
        #[arg(long, default_value = "base")]
        config: String,
        #[arg(long, default_value = "catm")]
        mixer: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        batch: usize,
    },
    /// Single-threaded inference throughput.
    Bench {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value = "224x224", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long, default_value_t = 5)]
        iters: usize,
        /// Also measure CATM and attention-kernel cost when the resolution doubles.
        #[arg(long)]
        scaling: bool,
    },
    /// Build a mixer or interaction ablation and compare its cost with the base model.
    Ablate {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value = "catm")]
        mixer: String,
        #[arg(long, default_value = "base")]
        config: String,
        #[arg(long, value_enum, default_value = "dense")]
        proj: Proj,
        #[arg(long, default_value = "224x224", value_parser = parse_size)]
        size: (usize, usize),
    },
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h.trim().parse().map_err(|e| format!("bad height in `{s}`: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("bad width in `{s}`: {e}"))?;
    Ok((h, w))
}

fn default_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var("CASVIT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("CASVIT_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

fn variant_key(v: &str) -> String {
    if v.eq_ignore_ascii_case("tiny") {
        "tiny".into()
    } else {
        v.to_ascii_uppercase()
    }
}

fn print_reports(reports: &[NamedReport]) -> bool {
    let mut ok = true;
    let mut worst = 0.0f64;
    for r in reports {
        println!("== {}", r.name);
        println!("{}", r.report);
        ok &= r.report.passed();
        worst = worst.max(r.report.max_error());
    }
    println!("max rel err {worst:.3e}: {}", if ok { "pass" } else { "FAIL" });
    ok
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build {
            variant,
            proj,
            classes,
            seed,
        } => {
            let ov = VariantOverrides {
                projection_kind: Some(proj.into()),
                num_classes: Some(classes),
                ..Default::default()
            };
            let (cfg, p) = build_variant::<f32>(&variant_key(&variant), &ov, default_seed(seed)?)?;
            println!("{}", serde_json::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?);
            println!("learnable parameters: {}", p.num_params());
        }
        Command::Flops { variant, size, proj, csv } => {
            let ov = VariantOverrides {
                projection_kind: Some(proj.into()),
                ..Default::default()
            };
            let (cfg, p) = build_variant::<f32>(&variant_key(&variant), &ov, 0)?;
            let report = model_cost(&p, &cfg, size.0, size.1);
            print!("{}", report.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv())?;
                println!("wrote {}", path.display());
            }
        }
        Command::Gradcheck { module, tol, seed } => {
            let seed = default_seed(seed)?;
            let tol5 = tol.unwrap_or(1e-5);
            let tol4 = tol.unwrap_or(1e-4);
            let mut reports = Vec::new();
            let all = matches!(module, CheckModule::All);
            if all || matches!(module, CheckModule::Conv) {
                reports.extend(checks::check_conv2d(seed, tol5)?);
            }
            if all || matches!(module, CheckModule::Batchnorm) {
                reports.push(checks::check_batchnorm(seed, tol5, BatchNormMode::Eval)?);
                reports.push(checks::check_batchnorm(seed, tol5, BatchNormMode::Train)?);
            }
            if all || matches!(module, CheckModule::Catm) {
                reports.extend(checks::check_catm(seed, tol5)?);
            }
            if all || matches!(module, CheckModule::Mixers) {
                reports.extend(checks::check_attention_mixers(seed, tol5)?);
            }
            if all || matches!(module, CheckModule::Block) {
                reports.push(checks::check_block(seed, tol4, MixerKind::Catm)?);
            }
            if all || matches!(module, CheckModule::Backbone) {
                reports.push(checks::check_mini_backbone(seed, tol4, 0)?);
            }
            if !print_reports(&reports) {
                return Err(Error::Autograd("gradient check failed".into()));
            }
        }
        Command::GenData {
            n,
            size,
            classes,
            seed,
            out,
        } => {
            let d = generate_shapes_dataset(n, size, classes, default_seed(seed)?)?;
            d.save(&out)?;
            println!("wrote {} images ({}x{}) to {}; class histogram {:?}", d.len(), size, size, out.display(), d.histogram());
        }
        Command::Train {
            variant,
            data,
            epochs,
            lr,
            batch,
            weight_decay,
            val_frac,
            proj,
            config,
            mixer,
            seed,
            out,
        } => {
            let seed = default_seed(seed)?;
            let d = Dataset::load(&data)?;
            if !(0.0..1.0).contains(&val_frac) {
                return Err(Error::Config(format!("val_frac must be in [0, 1), got {val_frac}")));
            }
            let n_train = d.len() - (d.len() as f64 * val_frac).round() as usize;
            let (tr, va) = d.split(n_train);
            let ov = VariantOverrides {
                projection_kind: Some(proj.into()),
                ablation: Some(config.parse::<Ablation>()?),
                mixer: Some(mixer.parse::<MixerKind>()?),
                num_classes: Some(d.num_classes),
                ..Default::default()
            };
            let (cfg, mut p) = build_variant::<f32>(&variant_key(&variant), &ov, seed)?;
            let tc = TrainConfig {
                epochs,
                batch_size: batch,
                base_lr: lr,
                weight_decay,
                seed,
                ..TrainConfig::default()
            };
            let val = (!va.is_empty()).then_some(&va);
            let history = train(&mut p, &cfg, &tc, &tr, val)?;
            for m in &history {
                let v = m.val.map(|v| format!("  val acc {:.4}  val loss {:.4}", v.accuracy, v.loss)).unwrap_or_default();
                println!(
                    "epoch {:>3}  loss {:.4}  train acc {:.4}{v}",
                    m.epoch, m.train_loss, m.train_accuracy
                );
            }
            save_checkpoint(&p, &cfg, &out)?;
            println!("saved {}", out.display());
        }
        Command::Eval { ckpt, data, batch } => {
            let (cfg, p) = load_checkpoint::<f32>(&ckpt)?;
            let d = Dataset::load(&data)?;
            let m = evaluate(&p, &cfg, &d, batch)?;
            println!("accuracy {:.4}  loss {:.4}  ({} samples)", m.accuracy, m.loss, d.len());
        }
        Command::Bench {
            variant,
            size,
            batch,
            warmup,
            iters,
            scaling,
        } => {
            let (cfg, p) = build_variant::<f32>(&variant_key(&variant), &VariantOverrides::default(), 0)?;
            let r = bench_throughput(&p, &cfg, size, batch, warmup, iters)?;
            print!("{}", r.to_text());
            if scaling {
                let c = catm_scaling(32, 8, 16, 21)?;
                let m = msa_kernel_scaling(32, 128, 11)?;
                println!(
                    "CATM {} -> {} tokens: x{:.2}; attention kernel {} -> {} tokens: x{:.2}",
                    c.tokens.0, c.tokens.1, c.ratio, m.tokens.0, m.tokens.1, m.ratio
                );
            }
        }
        Command::Ablate {
            variant,
            mixer,
            config,
            proj,
            size,
        } => {
            let key = variant_key(&variant);
            let base_ov = VariantOverrides {
                projection_kind: Some(proj.into()),
                ..Default::default()
            };
            let ov = VariantOverrides {
                ablation: Some(config.parse::<Ablation>()?),
                mixer: Some(mixer.parse::<MixerKind>()?),
                ..base_ov.clone()
            };
            let (bcfg, bp) = build_variant::<f32>(&key, &base_ov, 0)?;
            let (cfg, p) = build_variant::<f32>(&key, &ov, 0)?;
            let base = model_cost(&bp, &bcfg, size.0, size.1);
            let abl = model_cost(&p, &cfg, size.0, size.1);
            println!(
                "{} mixer={} config={} proj={}",
                cfg.name,
                cfg.mixer.name(),
                cfg.ablation,
                cfg.projection_kind
            );
            println!(
                "params {:.3}M ({:+.3}M vs base)  MACs {:.1}M ({:+.1}M vs base)",
                abl.params_total as f64 / 1e6,
                (abl.params_total as f64 - base.params_total as f64) / 1e6,
                abl.macs_total as f64 / 1e6,
                (abl.macs_total as f64 - base.macs_total as f64) / 1e6
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::Format { code, .. } => code.code(),
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
