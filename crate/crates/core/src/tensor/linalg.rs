use super::{broadcast_shape, Scalar, Tensor};
use crate::error::{Error, Result};

fn split_matrix(shape: &[usize], op: &'static str) -> Result<(Vec<usize>, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need at least rank 2, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].to_vec(), shape[r - 2], shape[r - 1]))
}

/// Flat batch offsets of `lead` (possibly broadcast) for each batch index of `out_lead`.
fn batch_offsets(lead: &[usize], out_lead: &[usize], matrix: usize) -> Vec<usize> {
    let total: usize = out_lead.iter().product();
    let offset = out_lead.len() - lead.len();
    (0..total)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = vec![0; out_lead.len()];
            for ax in (0..out_lead.len()).rev() {
                idx[ax] = rem % out_lead[ax];
                rem /= out_lead[ax];
            }
            let mut src = 0;
            for (ax, &e) in lead.iter().enumerate() {
                src = src * e + if e == 1 { 0 } else { idx[ax + offset] };
            }
            src * matrix
        })
        .collect()
}

/// Batched matrix product `[..., M, K] x [..., K, P] -> [..., M, P]`.
///
/// Leading extents broadcast like elementwise ops.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (la, m, k) = split_matrix(a.shape(), "matmul")?;
    let (lb, k2, p) = split_matrix(b.shape(), "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let lead = broadcast_shape(&la, &lb)
        .map_err(|_| Error::shape("matmul", format!("batch extents {la:?} and {lb:?} do not broadcast")))?;
    let oa = batch_offsets(&la, &lead, m * k);
    let ob = batch_offsets(&lb, &lead, k * p);
    let mut out = vec![T::zero(); oa.len() * m * p];
    let (ad, bd) = (a.data(), b.data());
    for (bi, (&sa, &sb)) in oa.iter().zip(&ob).enumerate() {
        let o = &mut out[bi * m * p..(bi + 1) * m * p];
        for i in 0..m {
            let row = &mut o[i * p..(i + 1) * p];
            for kk in 0..k {
                let av = ad[sa + i * k + kk];
                let brow = &bd[sb + kk * p..sb + (kk + 1) * p];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r += av * bv;
                }
            }
        }
    }
    let mut shape = lead;
    shape.extend([m, p]);
    Tensor::new(shape, out)
}

/// Swaps the two trailing axes.
pub fn transpose_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (lead, m, n) = split_matrix(x.shape(), "transpose")?;
    let batches: usize = lead.iter().product();
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for bi in 0..batches {
        let base = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = lead;
    shape.extend([n, m]);
    Tensor::new(shape, out)
}

/// (outer, axis extent, inner) decomposition around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Max-subtracted exponential normalisation along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, n, inner) = around(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..n {
                mx = mx.max(d[at(j)]);
            }
            let mut s = T::zero();
            for j in 0..n {
                let e = (d[at(j)] - mx).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                out[at(j)] /= s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `y * (dy - sum(dy * y))` along `axis`, given the softmax output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = around(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot += yd[at(j)] * gd[at(j)];
            }
            for j in 0..n {
                out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("softmax gradient shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_hand_product() {
        let a = Tensor::<f64>::from_fn([3, 3], |i| i as f64 * 1.5 - 2.0);
        let eye = Tensor::<f64>::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &a).unwrap(), a);
        let a = Tensor::<f64>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new([2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f64>::from_fn([7, 5], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn([5, 9], |_| rng.random_range(-1.0..1.0));
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..9 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.data()[i * 5 + k] * b.data()[k * 9 + j];
                }
                assert!((c.data()[i * 9 + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn leading_extents_broadcast() {
        let a = Tensor::<f64>::from_fn([2, 3, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn([4, 2], |i| (i % 3) as f64);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        let second = matmul(&a.slice_batch(1, 2).unwrap(), &b).unwrap();
        assert_eq!(&c.data()[6..], second.data());
        assert!(matmul(&a, &Tensor::<f64>::zeros([3, 2])).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let u = softmax(&Tensor::<f64>::full([1, 4], 3.3), 1).unwrap();
        assert_eq!(u.data(), &[0.25; 4]);
        let s = softmax(&Tensor::<f64>::new([2], vec![0.0, 3f64.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn transpose_twice_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 3, 5], |i| i as f64);
        let t = transpose_last(&x).unwrap();
        assert_eq!(t.shape(), &[2, 5, 3]);
        assert_eq!(t.data()[1], 5.0);
        assert_eq!(transpose_last(&t).unwrap(), x);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(vals in proptest::collection::vec(-300.0f64..300.0, 1..40), axis in 0usize..2) {
            let n = vals.len();
            let x = Tensor::new([1, n], vals).unwrap();
            let x = if axis == 0 { x.reshape([n, 1]).unwrap() } else { x };
            let y = softmax(&x, axis).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
            prop_assert!((y.sum() - 1.0).abs() <= 1e-6);
        }
    }
}
