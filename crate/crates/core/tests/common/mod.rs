//! Loop-level reference implementations and helpers shared by the integration tests.
//!
//! The oracles read parameters straight out of the public parameter structs
//! and evaluate every formula with explicit index arithmetic on flat slices,
//! batch of one, so they share no code with the tape kernels.

#![allow(dead_code)]

use casvit::catm::{CatmParams, ChannelParams, Interaction, InteractionConfig, PhiParams, ProjectionKind, SpatialParams};
use casvit::mixers::{MsaParams, SeparableParams, SwiftParams};
use casvit::nn::{Conv, Linear, Module};
use casvit::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values of magnitude in `[0.5, 1.5)` with random sign; running variances positive.
pub fn randomize(p: &mut impl Module<f64>, rng: &mut ChaCha8Rng) {
    p.visit_mut("", &mut |name, t, _| {
        let positive = name.ends_with("running_var");
        t.data_mut().iter_mut().for_each(|v| {
            let m = rng.random_range(0.5..1.5);
            *v = if positive || rng.random_bool(0.5) { m } else { -m };
        });
    });
}

/// `max |a - b| / max(|b|, 1)`: relative for large values, absolute near zero.
pub fn mixed_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Feature map of one image, `[c][h][w]` row-major.
pub struct Grid {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.h + i) * self.w + j
    }

    fn get(&self, x: &[f64], c: usize, i: isize, j: isize) -> f64 {
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            0.0
        } else {
            x[self.idx(c, i as usize, j as usize)]
        }
    }

    /// Depthwise 3×3, zero padding 1.
    fn depthwise3(&self, x: &[f64], conv: &Conv<f64>) -> Vec<f64> {
        let k = conv.weight.data();
        let mut out = vec![0.0; x.len()];
        for c in 0..self.c {
            for i in 0..self.h {
                for j in 0..self.w {
                    let mut s = conv.bias.as_ref().map_or(0.0, |b| b.data()[c]);
                    for a in 0..3 {
                        for b in 0..3 {
                            s += k[c * 9 + a * 3 + b] * self.get(x, c, i as isize + a as isize - 1, j as isize + b as isize - 1);
                        }
                    }
                    out[self.idx(c, i, j)] = s;
                }
            }
        }
        out
    }

    /// 1×1 convolution with `groups` equal to 1 (dense) or `C` (depthwise).
    fn pointwise(&self, x: &[f64], conv: &Conv<f64>, kind: ProjectionKind) -> Vec<f64> {
        let w = conv.weight.data();
        let hw = self.h * self.w;
        let mut out = vec![0.0; x.len()];
        for o in 0..self.c {
            let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[o]);
            for s in 0..hw {
                out[o * hw + s] = b + match kind {
                    ProjectionKind::Depthwise1x1 => w[o] * x[o * hw + s],
                    ProjectionKind::Dense1x1 => (0..self.c).map(|c| w[o * self.c + c] * x[c * hw + s]).sum::<f64>(),
                };
            }
        }
        out
    }

    pub fn spatial(&self, x: &[f64], p: &SpatialParams<f64>) -> Vec<f64> {
        let hw = self.h * self.w;
        let d = self.depthwise3(x, &p.dw3);
        let bn = &p.bn;
        let mut out = x.to_vec();
        for s in 0..hw {
            let mut logit = p.pw1.bias.as_ref().map_or(0.0, |b| b.data()[0]);
            for c in 0..self.c {
                let z = (d[c * hw + s] - bn.running_mean.data()[c]) / (bn.running_var.data()[c] + bn.eps).sqrt()
                    * bn.gamma.data()[c]
                    + bn.beta.data()[c];
                logit += p.pw1.weight.data()[c] * z.max(0.0);
            }
            let g = sigmoid(logit);
            for c in 0..self.c {
                out[c * hw + s] *= g;
            }
        }
        out
    }

    pub fn channel(&self, x: &[f64], p: &ChannelParams<f64>, kind: ProjectionKind) -> Vec<f64> {
        let hw = self.h * self.w;
        let means: Vec<f64> = (0..self.c).map(|c| x[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let w = p.conv.weight.data();
        let mut out = x.to_vec();
        for o in 0..self.c {
            let b = p.conv.bias.as_ref().map_or(0.0, |b| b.data()[o]);
            let z = b + match kind {
                ProjectionKind::Depthwise1x1 => w[o] * means[o],
                ProjectionKind::Dense1x1 => (0..self.c).map(|c| w[o * self.c + c] * means[c]).sum::<f64>(),
            };
            let g = sigmoid(z);
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v *= g);
        }
        out
    }

    pub fn phi(&self, x: &[f64], p: &PhiParams<f64>, order: &[Interaction], kind: ProjectionKind) -> Vec<f64> {
        let mut y = x.to_vec();
        for step in order {
            y = match step {
                Interaction::Spatial => self.spatial(&y, p.spatial.as_ref().unwrap()),
                Interaction::Channel => self.channel(&y, p.channel.as_ref().unwrap(), kind),
            };
        }
        y
    }

    pub fn catm(&self, x: &[f64], p: &CatmParams<f64>, cfg: &InteractionConfig) -> Vec<f64> {
        let kind = cfg.projection_kind;
        let q = self.pointwise(x, &p.wq, kind);
        let k = self.pointwise(x, &p.wk, kind);
        let v = self.pointwise(x, &p.wv, kind);
        let pq = self.phi(&q, &p.phi_q, &cfg.q_branch, kind);
        let pk = self.phi(&k, &p.phi_k, &cfg.k_branch, kind);
        let sum: Vec<f64> = pq.iter().zip(&pk).map(|(a, b)| a + b).collect();
        let ctx = self.depthwise3(&sum, &p.gamma);
        ctx.iter().zip(&v).map(|(a, b)| a * b).collect()
    }
}

/// Applies `f` to every image of a `[B, C, H, W]` tensor.
pub fn per_image(x: &Tensor<f64>, f: impl Fn(&Grid, &[f64]) -> Vec<f64>) -> Vec<f64> {
    let s = x.shape();
    let g = Grid { c: s[1], h: s[2], w: s[3] };
    let n = s[1] * s[2] * s[3];
    x.data().chunks(n).flat_map(|img| f(&g, img)).collect()
}

/// Applies `f` to every `[N, d]` token matrix of a `[B, N, d]` tensor.
pub fn per_sequence(x: &Tensor<f64>, f: impl Fn(&[f64], usize, usize) -> Vec<f64>) -> Vec<f64> {
    let (n, d) = (x.shape()[1], x.shape()[2]);
    x.data().chunks(n * d).flat_map(|s| f(s, n, d)).collect()
}

fn dense(x: &[f64], n: usize, l: &Linear<f64>) -> Vec<f64> {
    let (din, dout) = (l.weight.shape()[0], l.weight.shape()[1]);
    let w = l.weight.data();
    let mut out = vec![0.0; n * dout];
    for t in 0..n {
        for o in 0..dout {
            let mut s = l.bias.as_ref().map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                s += x[t * din + i] * w[i * dout + o];
            }
            out[t * dout + o] = s;
        }
    }
    out
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn msa(x: &[f64], n: usize, d: usize, p: &MsaParams<f64>) -> Vec<f64> {
    let (q, k, v) = (dense(x, n, &p.wq), dense(x, n, &p.wk), dense(x, n, &p.wv));
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row: Vec<f64> = (0..n)
            .map(|j| scale * (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>())
            .collect();
        let a = softmax(&row);
        for (j, aj) in a.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += aj * v[j * d + c];
            }
        }
    }
    out
}

pub fn separable(x: &[f64], n: usize, d: usize, p: &SeparableParams<f64>) -> Vec<f64> {
    let scores = softmax(&dense(x, n, &p.wq_vec));
    let (k, v) = (dense(x, n, &p.wk), dense(x, n, &p.wv));
    let ctx: Vec<f64> = (0..d).map(|c| (0..n).map(|i| scores[i] * k[i * d + c]).sum()).collect();
    (0..n * d).map(|i| ctx[i % d] * v[i]).collect()
}

pub fn swift(x: &[f64], n: usize, d: usize, p: &SwiftParams<f64>) -> Vec<f64> {
    let (q, k) = (dense(x, n, &p.wq), dense(x, n, &p.wk));
    let alpha: Vec<f64> = dense(&q, n, &p.w_alpha).into_iter().map(|a| a / (d as f64).sqrt()).collect();
    let g: Vec<f64> = (0..d).map(|c| (0..n).map(|i| alpha[i] * q[i * d + c]).sum()).collect();
    let gated: Vec<f64> = (0..n * d).map(|i| g[i % d] * k[i]).collect();
    let t = dense(&gated, n, &p.t);
    let mut out = t;
    for i in 0..n {
        let norm = (0..d).map(|c| q[i * d + c].powi(2)).sum::<f64>().sqrt();
        for c in 0..d {
            out[i * d + c] += q[i * d + c] / norm;
        }
    }
    out
}
