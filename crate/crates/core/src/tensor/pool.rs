use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Mean over each `H x W` plane, giving `[B, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4("global_avg_pool")?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial plane"));
    }
    let inv = T::one() / T::of(plane as f64);
    let out = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new([b, c, 1, 1], out)
}

/// Window `[lo, hi)` of a stride-1 pool centred on `i`.
#[inline]
fn window(i: usize, k: usize, len: usize) -> (usize, usize) {
    let r = k / 2;
    (i.saturating_sub(r), (i + r + 1).min(len))
}

/// Stride-1 average pool with a `k x k` window and `k/2` padding.
///
/// Padded positions are excluded from each average, so a constant map stays constant.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.dims4("avg_pool2d")?;
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("pool size {k} must be odd")));
    }
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for (src, dst) in d.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for i in 0..h {
            let (i0, i1) = window(i, k, h);
            for j in 0..w {
                let (j0, j1) = window(j, k, w);
                let mut s = T::zero();
                for a in i0..i1 {
                    for b in j0..j1 {
                        s += src[a * w + b];
                    }
                }
                dst[i * w + j] = s / T::of(((i1 - i0) * (j1 - j0)) as f64);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn avg_pool2d_backward<T: Scalar>(dy: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = dy.dims4("avg_pool2d")?;
    let g = dy.data();
    let mut dx = vec![T::zero(); g.len()];
    for (src, dst) in g.chunks(h * w).zip(dx.chunks_mut(h * w)) {
        for i in 0..h {
            let (i0, i1) = window(i, k, h);
            for j in 0..w {
                let (j0, j1) = window(j, k, w);
                let share = src[i * w + j] / T::of(((i1 - i0) * (j1 - j0)) as f64);
                for a in i0..i1 {
                    for b in j0..j1 {
                        dst[a * w + b] += share;
                    }
                }
            }
        }
    }
    Tensor::new(dy.shape().to_vec(), dx)
}
