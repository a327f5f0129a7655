use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// How out-of-range input positions are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    /// Wrap around the spatial axes. Only meant for shift-equivariance tests.
    Circular,
}

/// Geometry of a 2-D cross-correlation.
///
/// Each output extent is `floor((in + 2*pad - kernel) / stride) + 1`.
/// `groups == in_channels` makes the convolution depthwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub mode: Padding,
}

impl ConvSpec {
    /// Stride-1, "same" padded square kernel.
    pub fn same(k: usize, groups: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            groups,
            mode: Padding::Zero,
        }
    }

    pub fn strided(k: usize, stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: (stride, stride),
            padding: (pad, pad),
            groups,
            mode: Padding::Zero,
        }
    }

    pub fn with_mode(mut self, mode: Padding) -> Self {
        self.mode = mode;
        self
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_extent(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
        (input + 2 * p).checked_sub(k).map(|span| span / s + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            Self::out_extent(h, self.kernel.0, self.stride.0, self.padding.0)?,
            Self::out_extent(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<(usize, Geometry)> {
    let [b, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, cin_g, kh, kw] = w.dims4("conv2d")?;
    if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::Config(format!(
            "conv2d groups {} must divide in-channels {cin} and out-channels {cout}",
            spec.groups
        )));
    }
    if spec.stride.0 == 0 || spec.stride.1 == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    if cin_g != cin / spec.groups || (kh, kw) != spec.kernel {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {:?} inconsistent with {cin} input channels, {} groups, kernel {:?}",
                w.shape(),
                spec.groups,
                spec.kernel
            ),
        ));
    }
    let (ho, wo) = spec.output_hw(h, wd).ok_or_else(|| {
        Error::shape(
            "conv2d",
            format!("kernel {:?} larger than padded input {h}x{wd}", spec.kernel),
        )
    })?;
    if spec.mode == Padding::Circular && (spec.padding.0 > h || spec.padding.1 > wd) {
        return Err(Error::Config("circular padding wider than the input".into()));
    }
    Ok((
        b,
        Geometry {
            cin,
            h,
            w: wd,
            cout,
            ho,
            wo,
            cin_g,
            cout_g: cout / spec.groups,
            spec: *spec,
        },
    ))
}

impl Geometry {
    /// Input row for output row `o` and kernel tap `k`, or `None` if it reads padding.
    #[inline]
    fn src(&self, o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let i = (o * stride + k) as isize - pad as isize;
        match self.spec.mode {
            Padding::Zero => (0..len as isize).contains(&i).then_some(i as usize),
            Padding::Circular => Some(i.rem_euclid(len as isize) as usize),
        }
    }

    /// Output columns `[lo, hi)` whose input column lies inside the image (zero padding).
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let (s, p, w) = (self.spec.stride.1, self.spec.padding.1, self.w);
        let lo = if p > kj { (p - kj).div_ceil(s) } else { 0 };
        let hi = if w + p > kj {
            ((w - 1 + p - kj) / s + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Calls `f(out_index, in_index)` for every output/input pixel pair touched by tap (ki, kj).
    #[inline]
    fn for_each_tap(&self, ki: usize, kj: usize, mut f: impl FnMut(usize, usize)) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        for oh in 0..self.ho {
            let Some(ih) = self.src(oh, ki, sh, ph, self.h) else {
                continue;
            };
            match self.spec.mode {
                Padding::Zero => {
                    let (lo, hi) = self.valid_cols(kj);
                    for ow in lo..hi {
                        let iw = ow * sw + kj - pw;
                        f(oh * self.wo + ow, ih * self.w + iw);
                    }
                }
                Padding::Circular => {
                    for ow in 0..self.wo {
                        let iw = self.src(ow, kj, sw, pw, self.w).unwrap();
                        f(oh * self.wo + ow, ih * self.w + iw);
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation (no kernel flip).
///
/// `x` is `[B, Cin, H, W]`, `w` is `[Cout, Cin/groups, kh, kw]`, `bias` is `[Cout]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (b, g) = geometry(x, w, spec)?;
    if let Some(bias) = bias {
        if bias.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {} out-channels", bias.shape(), g.cout),
            ));
        }
    }
    let (kh, kw) = spec.kernel;
    let in_sample = g.cin * g.h * g.w;
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); b * g.cout * plane];
    let xs = x.data();
    let ws = w.data();
    out.par_chunks_mut(g.cout * plane)
        .enumerate()
        .for_each(|(bi, out_s)| {
            let x_s = &xs[bi * in_sample..(bi + 1) * in_sample];
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let o = &mut out_s[oc * plane..(oc + 1) * plane];
                if let Some(bias) = bias {
                    o.fill(bias.data()[oc]);
                }
                for icg in 0..g.cin_g {
                    let ic = grp * g.cin_g + icg;
                    let xp = &x_s[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = ws[((oc * g.cin_g + icg) * kh + ki) * kw + kj];
                            g.for_each_tap(ki, kj, |oi, ii| o[oi] += wv * xp[ii]);
                        }
                    }
                }
            }
        });
    Tensor::new([b, g.cout, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight, and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    spec: &ConvSpec,
    with_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (b, g) = geometry(x, w, spec)?;
    if dy.shape() != [b, g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient {:?} does not match output", dy.shape()),
        ));
    }
    let (kh, kw) = spec.kernel;
    let in_sample = g.cin * g.h * g.w;
    let plane = g.ho * g.wo;
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    let mut dx = vec![T::zero(); xs.len()];
    dx.par_chunks_mut(in_sample)
        .enumerate()
        .for_each(|(bi, dx_s)| {
            let dy_s = &dys[bi * g.cout * plane..(bi + 1) * g.cout * plane];
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let d = &dy_s[oc * plane..(oc + 1) * plane];
                for icg in 0..g.cin_g {
                    let ic = grp * g.cin_g + icg;
                    let dxp = &mut dx_s[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wv = ws[((oc * g.cin_g + icg) * kh + ki) * kw + kj];
                            g.for_each_tap(ki, kj, |oi, ii| dxp[ii] += wv * d[oi]);
                        }
                    }
                }
            }
        });

    // per-sample partials, then a fixed-order sum over the batch
    let partials: Vec<Vec<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let x_s = &xs[bi * in_sample..(bi + 1) * in_sample];
            let dy_s = &dys[bi * g.cout * plane..(bi + 1) * g.cout * plane];
            let mut dw = vec![T::zero(); ws.len()];
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let d = &dy_s[oc * plane..(oc + 1) * plane];
                for icg in 0..g.cin_g {
                    let ic = grp * g.cin_g + icg;
                    let xp = &x_s[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let mut acc = T::zero();
                            g.for_each_tap(ki, kj, |oi, ii| acc += d[oi] * xp[ii]);
                            dw[((oc * g.cin_g + icg) * kh + ki) * kw + kj] = acc;
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = vec![T::zero(); ws.len()];
    for p in &partials {
        for (a, v) in dw.iter_mut().zip(p) {
            *a += *v;
        }
    }

    let db = with_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for bi in 0..b {
            for (oc, acc) in db.iter_mut().enumerate() {
                let start = (bi * g.cout + oc) * plane;
                *acc += dys[start..start + plane].iter().copied().sum::<T>();
            }
        }
        Tensor::new([g.cout], db).expect("bias gradient shape")
    });

    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        db,
    ))
}

/// Multiply-accumulates of one convolution: `B*Cout*H'*W'*(Cin/groups)*kh*kw`.
pub fn conv2d_macs(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> u64 {
    let (b, h, w) = (x_shape[0], x_shape[2], x_shape[3]);
    let (cout, cin_g) = (w_shape[0], w_shape[1]);
    let (ho, wo) = spec.output_hw(h, w).unwrap_or((0, 0));
    (b * cout * ho * wo * cin_g * spec.kernel.0 * spec.kernel.1) as u64
}
