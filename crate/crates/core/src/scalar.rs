//! Scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real floating-point scalar (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Error function via the Chebyshev-fitted complementary error function
/// `erfc(z) ~ t*exp(-z^2 + P(t))`, `t = 1/(1 + z/2)`.
///
/// Fractional error is below 1.2e-7 everywhere on the real line.
pub fn erf<T: Real>(x: T) -> T {
    const COEFFS: [f64; 10] = [
        -1.265_512_23,
        1.000_023_68,
        0.374_091_96,
        0.096_784_18,
        -0.186_288_06,
        0.278_868_07,
        -1.135_203_98,
        1.488_515_87,
        -0.822_152_23,
        0.170_872_77,
    ];
    let z = x.abs();
    let t = T::one() / (T::one() + T::c(0.5) * z);
    let mut poly = T::c(COEFFS[9]);
    for &c in COEFFS[..9].iter().rev() {
        poly = T::c(c) + t * poly;
    }
    let erfc = t * (-z * z + poly).exp();
    if x >= T::zero() {
        T::one() - erfc
    } else {
        erfc - T::one()
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` computed as `log1p(exp(-|x|)) + max(x, 0)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    (-x.abs()).exp().ln_1p() + x.max(T::zero())
}

/// Exact-erf GeLU: `x * Phi(x)`.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

#[inline]
pub(crate) fn normal_cdf<T: Real>(x: T) -> T {
    T::c(0.5) * (T::one() + erf(x * T::c(std::f64::consts::FRAC_1_SQRT_2)))
}

#[inline]
pub(crate) fn normal_pdf<T: Real>(x: T) -> T {
    T::c(0.398_942_280_401_432_7) * (T::c(-0.5) * x * x).exp()
}

/// Derivative of [`gelu`].
#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    normal_cdf(x) + x * normal_pdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // values from standard tables
        let table = [
            (0.0, 0.0),
            (0.1, 0.112_462_916_018_284_9),
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (2.0, 0.995_322_265_018_952_7),
            (3.5, 0.999_999_256_901_627_7),
        ];
        for (x, want) in table {
            assert!((erf(x) - want).abs() < 1.2e-7, "erf({x})");
            assert!((erf(-x) + want).abs() < 1.2e-7, "erf(-{x})");
        }
    }

    #[test]
    fn activations_closed_forms() {
        assert_eq!(sigmoid(0.0_f64), 0.5);
        assert!((softplus(0.0_f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0_f64) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0_f64) >= 0.0);
        assert!(sigmoid(-800.0_f64).is_finite());
        assert_eq!(gelu(0.0_f64), 0.0);
    }

    #[test]
    fn works_in_single_precision() {
        assert!((erf(1.0_f32) - 0.842_700_8).abs() < 1e-6);
        assert_eq!(sigmoid(0.0_f32), 0.5);
    }
}
