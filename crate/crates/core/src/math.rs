//! Scalar functions routed through `libm` so results do not depend on the
//! platform's libc.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

/// Euclidean norm, summed in index order.
pub fn norm(v: &[f64]) -> f64 {
    sqrt(v.iter().fold(0.0, |acc, x| acc + x * x))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}
