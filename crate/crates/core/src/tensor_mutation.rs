//! The thirteen tensor mutation rules: copy, zero padding, height/width
//! transpose, random cropping and dtype conversion.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::DType;
use crate::tensor::{Shape, Tensor, TensorError};

/// Inclusive range of the number of zeros appended by the padding rules.
pub const PAD_RANGE: (usize, usize) = (1, 4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorMutationRule {
    /// Width copy.
    WDC,
    HDC,
    CDC,
    BDC,
    /// Width zero padding.
    WDP,
    HDP,
    CDP,
    BDP,
    /// Height/width transpose.
    HWDT,
    /// Random crop.
    RC,
    /// Cast to f32.
    FT,
    /// Cast to f64.
    DT,
    /// Cast to bf16.
    BFT,
}

impl TensorMutationRule {
    pub const ALL: [TensorMutationRule; 13] = [
        TensorMutationRule::WDC,
        TensorMutationRule::HDC,
        TensorMutationRule::CDC,
        TensorMutationRule::BDC,
        TensorMutationRule::WDP,
        TensorMutationRule::HDP,
        TensorMutationRule::CDP,
        TensorMutationRule::BDP,
        TensorMutationRule::HWDT,
        TensorMutationRule::RC,
        TensorMutationRule::FT,
        TensorMutationRule::DT,
        TensorMutationRule::BFT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorMutationRule::WDC => "WDC",
            TensorMutationRule::HDC => "HDC",
            TensorMutationRule::CDC => "CDC",
            TensorMutationRule::BDC => "BDC",
            TensorMutationRule::WDP => "WDP",
            TensorMutationRule::HDP => "HDP",
            TensorMutationRule::CDP => "CDP",
            TensorMutationRule::BDP => "BDP",
            TensorMutationRule::HWDT => "HWDT",
            TensorMutationRule::RC => "RC",
            TensorMutationRule::FT => "FT",
            TensorMutationRule::DT => "DT",
            TensorMutationRule::BFT => "BFT",
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> TensorMutationRule {
        TensorMutationRule::ALL[rng.gen_range(0..TensorMutationRule::ALL.len())]
    }
}

impl fmt::Display for TensorMutationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// NCHW axis index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    N = 0,
    C = 1,
    H = 2,
    W = 3,
}

fn with_extent(shape: Shape, axis: Axis, extent: usize) -> Result<Shape, TensorError> {
    let mut dims = shape.dims();
    dims[axis as usize] = extent;
    Shape::from_dims(dims)
}

/// Concatenates `t` with a copy of itself along `axis`.
pub fn concat_self(t: &Tensor, axis: Axis) -> Result<Tensor, TensorError> {
    let a = axis as usize;
    let old = t.shape().dims()[a];
    let shape = with_extent(t.shape(), axis, old * 2)?;
    Ok(t.remap(shape, |mut i| {
        i[a] %= old;
        Some(i)
    }))
}

/// Appends `k` zeros at the high-index side of `axis`.
pub fn pad_high(t: &Tensor, axis: Axis, k: usize) -> Result<Tensor, TensorError> {
    let a = axis as usize;
    let old = t.shape().dims()[a];
    let shape = with_extent(t.shape(), axis, old + k)?;
    Ok(t.remap(shape, |i| (i[a] < old).then_some(i)))
}

/// Per-(n, c) matrix transpose of the H and W axes.
pub fn transpose_hw(t: &Tensor) -> Tensor {
    let s = t.shape();
    let shape = Shape::new(s.n, s.c, s.w, s.h).expect("same element count");
    t.remap(shape, |[n, c, h, w]| Some([n, c, w, h]))
}

/// Extracts the sub-block starting at `offsets` with the given `extents`.
pub fn crop(t: &Tensor, extents: [usize; 4], offsets: [usize; 4]) -> Result<Tensor, TensorError> {
    let dims = t.shape().dims();
    for a in 0..4 {
        assert!(
            extents[a] >= 1 && offsets[a] + extents[a] <= dims[a],
            "crop window out of range on axis {a}"
        );
    }
    let shape = Shape::from_dims(extents)?;
    Ok(t.remap(shape, |mut i| {
        for a in 0..4 {
            i[a] += offsets[a];
        }
        Some(i)
    }))
}

/// Samples crop extents uniformly in `[1, extent]` and offsets uniformly in
/// the remaining slack, per axis.
pub fn sample_crop<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> ([usize; 4], [usize; 4]) {
    let dims = shape.dims();
    let mut extents = [0; 4];
    let mut offsets = [0; 4];
    for a in 0..4 {
        extents[a] = rng.gen_range(1..=dims[a]);
        offsets[a] = rng.gen_range(0..=dims[a] - extents[a]);
    }
    (extents, offsets)
}

/// Applies `rule` to `t`. Rules 1–10 keep the dtype, rules 11–13 keep the shape.
pub fn mutate_tensor<R: Rng + ?Sized>(t: &Tensor, rule: TensorMutationRule, rng: &mut R) -> Result<Tensor, TensorError> {
    use TensorMutationRule::*;
    match rule {
        WDC => concat_self(t, Axis::W),
        HDC => concat_self(t, Axis::H),
        CDC => concat_self(t, Axis::C),
        BDC => concat_self(t, Axis::N),
        WDP | HDP | CDP | BDP => {
            let axis = match rule {
                WDP => Axis::W,
                HDP => Axis::H,
                CDP => Axis::C,
                _ => Axis::N,
            };
            let k = rng.gen_range(PAD_RANGE.0..=PAD_RANGE.1);
            pad_high(t, axis, k)
        }
        HWDT => Ok(transpose_hw(t)),
        RC => {
            let (extents, offsets) = sample_crop(t.shape(), rng);
            crop(t, extents, offsets)
        }
        FT => Ok(t.cast(DType::F32)),
        DT => Ok(t.cast(DType::F64)),
        BFT => Ok(t.cast(DType::BF16)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::random_seed_tensor;
    use half::bf16;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2x2() -> Tensor {
        Tensor::from_f64(Shape::new(1, 1, 2, 2).unwrap(), DType::F32, &[1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn width_copy_example() {
        let out = concat_self(&t2x2(), Axis::W).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 1, 2, 4).unwrap());
        assert_eq!(out.to_f64_vec(), vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn hw_transpose_example() {
        let t = Tensor::from_f64(Shape::new(1, 1, 2, 3).unwrap(), DType::F64, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let tt = transpose_hw(&t);
        assert_eq!(tt.shape(), Shape::new(1, 1, 3, 2).unwrap());
        assert_eq!(tt.to_f64_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(transpose_hw(&tt).bit_eq(&t));
    }

    #[test]
    fn crop_example() {
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let t = Tensor::from_f64(Shape::new(1, 1, 4, 4).unwrap(), DType::F32, &vals).unwrap();
        let c = crop(&t, [1, 1, 2, 2], [0, 0, 1, 1]).unwrap();
        assert_eq!(c.to_f64_vec(), vec![5.0, 6.0, 9.0, 10.0]);
    }

    #[test]
    fn bft_rounds_to_nearest_even() {
        let t = Tensor::from_f64(Shape::new(1, 1, 1, 1).unwrap(), DType::F64, &[0.1]).unwrap();
        let b = mutate_tensor(&t, TensorMutationRule::BFT, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.dtype(), DType::BF16);
        // 0.1 = 0x3FB999999999999A; the upper bf16 bits are 0x3DCC with a
        // remainder above half an ulp, so the result rounds up to 0x3DCD.
        match b.data() {
            crate::tensor::TensorData::BF16(v) => assert_eq!(v[0].to_bits(), 0x3DCD),
            _ => unreachable!(),
        }
        assert_eq!(b.get_f64(0), bf16::from_bits(0x3DCD).to_f64());
    }

    #[test]
    fn padding_bounds_and_too_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let out = mutate_tensor(&t2x2(), TensorMutationRule::HDP, &mut rng).unwrap();
            let h = out.shape().h;
            assert!((3..=6).contains(&h));
        }
        let big = Tensor::zeros(Shape::new(1, 1, 4096, 4096).unwrap(), DType::BF16);
        assert!(matches!(
            mutate_tensor(&big, TensorMutationRule::WDC, &mut rng),
            Err(TensorError::ShapeTooLarge { .. })
        ));
    }

    #[test]
    fn cast_rules_keep_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_seed_tensor(Shape::new(2, 2, 3, 3).unwrap(), DType::F64, &mut rng).unwrap();
        for (rule, dt) in [
            (TensorMutationRule::FT, DType::F32),
            (TensorMutationRule::DT, DType::F64),
            (TensorMutationRule::BFT, DType::BF16),
        ] {
            let out = mutate_tensor(&t, rule, &mut rng).unwrap();
            assert_eq!(out.dtype(), dt);
            assert_eq!(out.shape(), t.shape());
        }
    }
}
