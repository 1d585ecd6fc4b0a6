//! Scalar abstraction for the numeric layers.
//!
//! Everything below the counting pipeline (jets, dense linear algebra, orbit
//! integration, eigenframes) is generic over [`Real`] so the same code runs
//! over `f32` and `f64`. The crate root fixes `f64` aliases for the shipped
//! tool; the certified tolerances of the counting layers assume `f64`.

use num_traits::{Float, FloatConst, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Shorthand for embedding an `f64` literal.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
