use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the numerical core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for literals and hyperparameters.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 converts to every supported scalar")
    }

    fn of_usize(value: usize) -> Self {
        Self::from_usize(value).expect("usize converts to every supported scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance for checks that are exact in `f64` up to a few roundings.
    fn tight_tolerance() -> Self {
        Self::of(1e-12).max(Self::epsilon() * Self::of(64.0))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sum in index order. All reductions in the crate go through here or an
/// equivalent explicit loop so results are bitwise reproducible.
pub fn ordered_sum<T: Scalar>(values: &[T]) -> T {
    let mut acc = T::zero();
    for &v in values {
        acc = acc + v;
    }
    acc
}
