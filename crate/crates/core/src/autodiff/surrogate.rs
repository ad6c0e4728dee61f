use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Slope of the arctan surrogate used in place of the Heaviside derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateConfig<T> {
    pub alpha: T,
}

impl<T: Scalar> SurrogateConfig<T> {
    pub fn new(alpha: T) -> Result<Self> {
        if !(alpha > T::zero()) || !alpha.is_finite() {
            return Err(Error::config("surrogate_alpha", format!("must be positive and finite, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

impl<T: Scalar> Default for SurrogateConfig<T> {
    fn default() -> Self {
        Self { alpha: T::of(2.0) }
    }
}

/// Derivative of `atan(π·alpha·x/2)/π + 1/2` with respect to `x`:
/// `alpha / (2·(1 + (π·alpha·x/2)²))`, where `x` is the preactivation
/// measured from the threshold.
pub fn arctan_surrogate_grad<T: Scalar>(x: T, alpha: T) -> T {
    let two = T::one() + T::one();
    let u = T::PI() * alpha * x / two;
    alpha / (two * (T::one() + u * u))
}
