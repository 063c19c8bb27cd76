use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type for all tensor math. Implemented for `f32` and `f64`.
///
/// Randomness is always sampled in `f64` and converted through `from_f64`,
/// so the two precisions see identical draw sequences for the same seed.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self {
        num_traits::cast(x).expect("finite f64 must convert to a Real scalar")
    }

    fn as_f64(self) -> f64 {
        num_traits::cast(self).expect("Real scalar must convert to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_f64() {
        let x = f32::from_f64(0.25);
        assert_eq!(x, 0.25f32);
        assert_eq!(x.as_f64(), 0.25f64);
        assert_eq!(f64::from_f64(1e-12), 1e-12);
    }

    #[test]
    fn nan_and_infinity_survive_conversion() {
        assert!(f32::from_f64(f64::NAN).is_nan());
        assert!(f64::from_f64(f64::INFINITY).is_infinite());
    }
}
