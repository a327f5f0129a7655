use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BatchNormMode {
    Train,
    #[default]
    Eval,
}

/// Per-channel statistics of a `[B, C, H, W]` batch over `(B, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance (divides by the element count).
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

impl<T: Scalar> BatchStats<T> {
    pub fn compute(x: &Tensor<T>) -> Result<Self> {
        let [b, c, h, w] = x.dims4("batchnorm2d")?;
        let plane = h * w;
        let count = b * plane;
        let inv = T::one() / T::of(count as f64);
        let d = x.data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                let start = (bi * c + ci) * plane;
                s += d[start..start + plane].iter().copied().sum::<T>();
            }
            let m = s * inv;
            let mut v = T::zero();
            for bi in 0..b {
                let start = (bi * c + ci) * plane;
                for &t in &d[start..start + plane] {
                    v += (t - m) * (t - m);
                }
            }
            mean[ci] = m;
            var[ci] = v * inv;
        }
        Ok(Self { mean, var, count })
    }

    /// Moves running statistics toward this batch; the variance uses the unbiased estimate.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let n = self.count as f64;
        let unbias = if self.count > 1 { T::of(n / (n - 1.0)) } else { T::one() };
        for ci in 0..self.mean.len() {
            running_mean[ci] = (T::one() - momentum) * running_mean[ci] + momentum * self.mean[ci];
            running_var[ci] = (T::one() - momentum) * running_var[ci] + momentum * self.var[ci] * unbias;
        }
    }
}

pub(crate) fn check_params<T: Scalar>(c: usize, params: &[&Tensor<T>]) -> Result<()> {
    for p in params {
        if p.shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("parameter {:?} does not match {c} channels", p.shape()),
            ));
        }
    }
    Ok(())
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta`, per channel.
pub(crate) fn normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4("batchnorm2d")?;
    let plane = h * w;
    let mut out = x.data().to_vec();
    for ci in 0..c {
        let scale = gamma.data()[ci] / (var[ci] + eps).sqrt();
        let shift = beta.data()[ci] - mean[ci] * scale;
        for bi in 0..b {
            let start = (bi * c + ci) * plane;
            for v in &mut out[start..start + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::new([b, c, h, w], out)
}

/// Batch normalisation of a `[B, C, H, W]` map.
///
/// Train mode normalises by the batch statistics and moves the running
/// statistics by `momentum`; eval mode normalises by the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: BatchNormMode,
    momentum: T,
    eps: T,
) -> Result<Tensor<T>> {
    if eps <= T::zero() {
        return Err(Error::Config("batchnorm eps must be positive".into()));
    }
    let [_, c, _, _] = x.dims4("batchnorm2d")?;
    check_params(c, &[gamma, beta, running_mean, running_var])?;
    match mode {
        BatchNormMode::Train => {
            let stats = BatchStats::compute(x)?;
            let y = normalize(x, &stats.mean, &stats.var, gamma, beta, eps)?;
            stats.update_running(running_mean.data_mut(), running_var.data_mut(), momentum);
            Ok(y)
        }
        BatchNormMode::Eval => normalize(x, running_mean.data(), running_var.data(), gamma, beta, eps),
    }
}
