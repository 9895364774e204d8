use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type for tensors.
///
/// Training runs in `f32`; finite-difference gradient checks run the same
/// graph in `f64`. Precision is chosen once per run by picking the type
/// parameter, never per tensor.
pub trait Real:
    Float + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Short tag stored in checkpoints and logs.
    const PRECISION: Precision;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" | "single" => Some(Precision::Single),
            "f64" | "double" => Some(Precision::Double),
            _ => None,
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
