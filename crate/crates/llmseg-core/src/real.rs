//! Scalar abstraction for the numeric pipeline.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar the pipeline computes with. Implemented for `f32`
/// and `f64`; everything downstream (similarity maps, CRF marginals, metric
/// accumulation) is generic over it.
pub trait Real:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal. Parameters and tolerances are
    /// written as `f64` throughout and narrowed here when `Self = f32`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal converts to any Real")
    }

    /// Widening conversion used when a value leaves the generic world
    /// (reports, serialized artifacts).
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn of_round_trips_literals() {
        assert_eq!(<f64 as Real>::of(0.25), 0.25);
        assert_eq!(<f32 as Real>::of(0.25), 0.25f32);
        assert_eq!(<f32 as Real>::of(1e-3).to_f64(), f64::from(1e-3f32));
    }

    fn sum_generic<T: Real>(vals: &[T]) -> T {
        vals.iter().copied().sum()
    }

    #[test]
    fn generic_sum_works_for_both_widths() {
        assert_eq!(sum_generic(&[1.0f32, 2.0, 3.0]), 6.0);
        assert_eq!(sum_generic(&[1.0f64, 2.0, 3.0]), 6.0);
    }
}
