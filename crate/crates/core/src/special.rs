//! Normal-distribution tail probabilities.
//!
//! The kernel is a Chebyshev-fitted complementary error function with
//! fractional error below 1.2e-7 everywhere, which is far tighter than any
//! tolerance used by the hypothesis tests in this crate. Evaluation happens
//! in `f64` regardless of the caller's scalar type.

use crate::num::Scalar;

/// Complementary error function, |relative error| < 1.2e-7.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = 1.000_023_68
        + t * (0.374_091_96
            + t * (0.096_784_18
                + t * (-0.186_288_06
                    + t * (0.278_868_07
                        + t * (-1.135_203_98
                            + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))));
    let tau = t * (-z * z - 1.265_512_23 + t * poly).exp();
    if x >= 0.0 {
        tau
    } else {
        2.0 - tau
    }
}

/// Standard normal survival function `P(Z > z)`.
pub fn normal_sf<F: Scalar>(z: F) -> F {
    F::of((0.5 * erfc(z.as_f64() / std::f64::consts::SQRT_2)).clamp(0.0, 1.0))
}

/// Standard normal CDF `P(Z <= z)`.
pub fn normal_cdf<F: Scalar>(z: F) -> F {
    F::of((1.0 - 0.5 * erfc(z.as_f64() / std::f64::consts::SQRT_2)).clamp(0.0, 1.0))
}

/// Two-sided normal p-value `P(|Z| > |z|)`.
pub fn two_sided_p<F: Scalar>(z: F) -> F {
    F::of(erfc(z.as_f64().abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0))
}
