//! Element types and the scalar abstraction the kernels are written against.

use std::fmt::{self, Debug};

use half::bf16;
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

/// Declared element precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    BF16,
}

impl DType {
    pub const ALL: [DType; 3] = [DType::F32, DType::F64, DType::BF16];

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::BF16 => 2,
        }
    }

    /// Code used by the DLJT header.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::BF16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::BF16),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::BF16 => "bf16",
        }
    }

    pub fn from_name(name: &str) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.name() == name)
    }

    /// Rounds `x` to the nearest value representable in this dtype
    /// (ties to even) and widens it back.
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            DType::F32 => f32::narrow(x).widen(),
            DType::F64 => x,
            DType::BF16 => bf16::narrow(x).widen(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Floating-point element type usable by the kernels: `f64` for the
/// reference interpreter, `f32` and `bf16` for reduced-precision execution.
pub trait Scalar: Float + FromPrimitive + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    /// Round-to-nearest-even conversion from `f64`.
    fn narrow(x: f64) -> Self;

    /// Exact widening to `f64`.
    fn widen(self) -> f64;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn narrow(x: f64) -> Self {
        x
    }

    fn widen(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn narrow(x: f64) -> Self {
        x as f32
    }

    fn widen(self) -> f64 {
        self as f64
    }
}

impl Scalar for bf16 {
    const DTYPE: DType = DType::BF16;

    fn narrow(x: f64) -> Self {
        bf16::from_f64(x)
    }

    fn widen(self) -> f64 {
        self.to_f64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_match_codes() {
        assert_eq!(DType::F32.byte_width(), 4);
        assert_eq!(DType::F64.byte_width(), 8);
        assert_eq!(DType::BF16.byte_width(), 2);
        for d in DType::ALL {
            assert_eq!(DType::from_code(d.code()), Some(d));
            assert_eq!(DType::from_name(d.name()), Some(d));
        }
        assert_eq!(DType::from_code(3), None);
    }

    #[test]
    fn quantize_is_idempotent() {
        for d in DType::ALL {
            for x in [0.1, -0.7, 1.0 / 3.0, 1e-30, 123456.789] {
                let q = d.quantize(x);
                assert_eq!(d.quantize(q).to_bits(), q.to_bits());
            }
        }
    }
}
