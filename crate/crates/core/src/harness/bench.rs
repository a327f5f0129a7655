//! CPU throughput microbenchmark and token-scaling measurements.
//!
//! Every measurement runs inside a one-thread pool so numbers are stable and
//! comparable across machines with different core counts.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::accounting::model_cost;
use crate::autograd::{Tape, Var};
use crate::backbone::{cas_block, patch_embed, stem, BackboneParams, VariantConfig};
use crate::catm::{catm_forward, CatmParams, InteractionConfig};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Scalar, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct StageTime {
    pub name: String,
    /// Median seconds per batch.
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub variant: String,
    pub input: (usize, usize),
    pub batch: usize,
    /// Median seconds per batch.
    pub median_seconds: f64,
    pub images_per_sec: f64,
    /// Analytic MACs per image.
    pub macs_per_image: u64,
    pub macs_per_sec: f64,
    pub per_stage: Vec<StageTime>,
    pub runs: Vec<f64>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} @ {}x{}, batch {}: {:.1} images/s (median {:.2} ms/batch), {:.2} GMAC/s\n",
            self.variant,
            self.input.0,
            self.input.1,
            self.batch,
            self.images_per_sec,
            self.median_seconds * 1e3,
            self.macs_per_sec / 1e9
        );
        for st in &self.per_stage {
            let share = 100.0 * st.seconds / self.median_seconds.max(f64::MIN_POSITIVE);
            s.push_str(&format!("  {:<8} {:>9.3} ms  {:>5.1}%\n", st.name, st.seconds * 1e3, share));
        }
        s
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs `f` on a single worker thread.
pub fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn random_input<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crate::nn::uniform::<T>(&shape, 1.0, &mut rng).map(|v| v.abs())
}

/// Eval-mode forward with each section timed: `stem`, `stage{i}` (including
/// its patch embedding), `head`.
fn timed_forward<T: Scalar>(img: &Tensor<T>, p: &BackboneParams<T>, cfg: &VariantConfig) -> Result<Vec<f64>> {
    let mode = BatchNormMode::Eval;
    let mut tape = Tape::new();
    let mut times = Vec::with_capacity(6);
    let t0 = Instant::now();
    let x = tape.input(img.clone());
    let mut x = stem(&mut tape, "stem", x, &p.stem, mode)?;
    times.push(t0.elapsed().as_secs_f64());
    for (i, blocks) in p.stages.iter().enumerate() {
        let t = Instant::now();
        if i > 0 {
            x = patch_embed(&mut tape, &format!("embed{i}"), x, &p.embeds[i - 1], mode)?;
        }
        for (j, b) in blocks.iter().enumerate() {
            x = cas_block(&mut tape, &format!("stage{i}.block{j}"), x, b, cfg, mode)?;
        }
        times.push(t.elapsed().as_secs_f64());
    }
    let t = Instant::now();
    let pooled = tape.global_avg_pool(x)?;
    let n = p.head_norm.forward(&mut tape, "head.norm", pooled, mode)?;
    let b = tape.shape(n)[0];
    let flat = tape.reshape(n, &[b, cfg.channels[3]])?;
    let _logits: Var = p.head.forward(&mut tape, "head.fc", flat)?;
    times.push(t.elapsed().as_secs_f64());
    Ok(times)
}

/// Median eval-mode throughput over `measure_iters` timed batches.
pub fn bench_throughput<T: Scalar>(
    params: &BackboneParams<T>,
    cfg: &VariantConfig,
    (h, w): (usize, usize),
    batch: usize,
    warmup_iters: usize,
    measure_iters: usize,
) -> Result<BenchReport> {
    if batch == 0 || measure_iters == 0 {
        return Err(Error::Config("batch and measure_iters must be positive".into()));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape("bench_throughput", format!("input extents {h}x{w} must be divisible by 32")));
    }
    params.check_against(cfg)?;
    let img = random_input::<T>([batch, 3, h, w], 0);
    let samples = single_threaded(|| -> Result<Vec<Vec<f64>>> {
        for _ in 0..warmup_iters {
            timed_forward(&img, params, cfg)?;
        }
        (0..measure_iters).map(|_| timed_forward(&img, params, cfg)).collect()
    })??;
    let runs: Vec<f64> = samples.iter().map(|s| s.iter().sum()).collect();
    let med = median(&runs);
    let names = ["stem", "stage0", "stage1", "stage2", "stage3", "head"];
    let per_stage = names
        .iter()
        .enumerate()
        .map(|(i, n)| StageTime {
            name: n.to_string(),
            seconds: median(&samples.iter().map(|s| s[i]).collect::<Vec<_>>()),
        })
        .collect();
    let macs = model_cost(params, cfg, h, w).macs_total;
    let images_per_sec = batch as f64 / med;
    Ok(BenchReport {
        variant: cfg.name.to_string(),
        input: (h, w),
        batch,
        median_seconds: med,
        images_per_sec,
        macs_per_image: macs,
        macs_per_sec: macs as f64 * images_per_sec,
        per_stage,
        runs,
    })
}

/// Median seconds of `f` over `reps` runs after one warmup call.
fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut ts = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        ts.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&ts))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScalingReport {
    pub tokens: (usize, usize),
    pub seconds: (f64, f64),
    pub ratio: f64,
}

/// Eval-mode CATM time at `h×w` and at `2h×2w`, channel width `c`.
pub fn catm_scaling(c: usize, h: usize, w: usize, reps: usize) -> Result<ScalingReport> {
    let cfg = InteractionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = CatmParams::<f32>::new(c, &cfg, 1e-5, &mut rng)?;
    let run = |hh: usize, ww: usize| {
        let x = random_input::<f32>([1, c, hh, ww], 2);
        time_median(reps, || {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            catm_forward(&mut tape, "catm", xv, &p, &cfg, BatchNormMode::Eval).map(|_| ())
        })
    };
    let (t1, t2) = single_threaded(|| Ok::<_, Error>((run(h, w)?, run(2 * h, 2 * w)?)))??;
    Ok(ScalingReport {
        tokens: (h * w, 4 * h * w),
        seconds: (t1, t2),
        ratio: t2 / t1,
    })
}

/// Time of the attention kernel `softmax(QKᵀ/√d)·V` at `n` and `4n` tokens.
pub fn msa_kernel_scaling(d: usize, n: usize, reps: usize) -> Result<ScalingReport> {
    let run = |n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Tensor<f32> = crate::nn::trunc_normal(&[1, n, d], 1.0, &mut rng);
        let k: Tensor<f32> = crate::nn::trunc_normal(&[1, n, d], 1.0, &mut rng);
        let v: Tensor<f32> = crate::nn::trunc_normal(&[1, n, d], 1.0, &mut rng);
        time_median(reps, || {
            let mut tape = Tape::new();
            let (q, k, v) = (tape.input(q.clone()), tape.input(k.clone()), tape.input(v.clone()));
            let kt = tape.transpose(k)?;
            let logits = tape.matmul(q, kt)?;
            let logits = tape.scale(logits, 1.0 / (d as f32).sqrt());
            let attn = tape.softmax(logits, 2)?;
            tape.matmul(attn, v).map(|_| ())
        })
    };
    let (t1, t2) = single_threaded(|| Ok::<_, Error>((run(n)?, run(4 * n)?)))??;
    Ok(ScalingReport {
        tokens: (n, 4 * n),
        seconds: (t1, t2),
        ratio: t2 / t1,
    })
}
