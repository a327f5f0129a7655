use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Exact Gaussian-CDF form `x * Phi(x)`.
    Gelu,
}

pub fn erf<T: Scalar>(x: T) -> T {
    x.erf()
}

#[inline]
fn sigmoid<T: Scalar>(t: T) -> T {
    // split by sign so exp never overflows
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn gelu<T: Scalar>(t: T) -> T {
    let half = T::of(0.5);
    half * t * (T::one() + (t * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Scalar>(t: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (t * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * t * t).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + t * pdf
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|t| if t > T::zero() { t } else { T::zero() }),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Gelu => x.map(gelu),
    }
}

/// `dy * f'(x)`; relu uses subgradient 0 at exactly 0.
pub fn activation_grad<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = match kind {
        Activation::Relu => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&t, &g)| if t > T::zero() { g } else { T::zero() })
            .collect(),
        Activation::Sigmoid => y
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
        Activation::Gelu => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&t, &g)| g * gelu_grad(t))
            .collect(),
    };
    Tensor::new(x.shape().to_vec(), data).expect("activation gradient shape")
}
