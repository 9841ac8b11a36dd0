use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type the numeric kernels are generic over.
///
/// Implemented for `f32` and `f64` only. The per-type constants exist because
/// a distribution over a few thousand entries accumulates rounding on the
/// order of the type's epsilon times the entry count; a shared tolerance
/// would be either too loose for f64 or unsatisfiable for f32.
pub trait Scalar:
    Float
    + FromPrimitive
    + Sum
    + Debug
    + Display
    + FromStr
    + Default
    + Send
    + Sync
    + 'static
{
    /// Allowed deviation of a probability vector's sum from 1.
    fn prob_sum_tol() -> Self;
}

impl Scalar for f64 {
    fn prob_sum_tol() -> f64 {
        1e-9
    }
}

impl Scalar for f32 {
    fn prob_sum_tol() -> f32 {
        1e-4
    }
}

/// Casts an f64 constant into S. Only used with values that are exactly
/// representable in f32 as well (small integers, halves, tenths close enough
/// for tolerances), so the two instantiations stay consistent.
pub(crate) fn lit<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("constant representable in scalar type")
}

/// Numerically stable logistic function.
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}
