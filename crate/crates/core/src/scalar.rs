use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used by the metric, scoring, and statistics code.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Serialize + DeserializeOwned + 'static
{
    /// Lossy conversion from a count.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable as float")
    }

    /// Lossy conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable as float")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `num / den`, or `None` when the denominator is zero.
pub fn ratio<F: Scalar>(num: usize, den: usize) -> Option<F> {
    if den == 0 {
        None
    } else {
        Some(F::from_count(num) / F::from_count(den))
    }
}

/// Arithmetic mean of the present values, `None` if there are none.
pub fn mean_of<F: Scalar>(values: impl IntoIterator<Item = F>) -> Option<F> {
    let mut sum = F::zero();
    let mut n = 0usize;
    for v in values {
        sum = sum + v;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / F::from_count(n))
    }
}
