//! Scalar abstraction so every kernel runs in f32 (shipped configs) or f64
//! (finite-difference gradient checks).

use std::fmt;

pub trait Scalar:
    num_traits::Float + std::iter::Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Lifts an f64 constant into the active scalar type.
#[inline]
pub fn c<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 constant representable in scalar type")
}

/// Widens any scalar back to f64 (exact for f32 and f64).
#[inline]
pub fn f<T: Scalar>(x: T) -> f64 {
    num_traits::ToPrimitive::to_f64(&x).expect("scalar convertible to f64")
}
