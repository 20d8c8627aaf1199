//! Scalar abstraction for the numeric core.
//!
//! The math modules (models, embeddings, clustering, aggregation, data
//! generation) are generic over [`Scalar`] so the same code runs at `f32`
//! or `f64`. The simulation pipeline and the wire format pin `f64` through
//! the aliases at the crate root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from config-space `f64` values (seeds, rates, draws).
    fn from_real(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 is representable")
    }

    /// Widening (`f32`) or identity (`f64`) conversion back to `f64`.
    fn to_real(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_both_widths() {
        assert_eq!(f64::from_real(0.25), 0.25);
        assert_eq!(f32::from_real(0.25), 0.25f32);
        assert_eq!(0.25f32.to_real(), 0.25);
        assert_eq!((-1.5f64).to_real(), -1.5);
    }
}
