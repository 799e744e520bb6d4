use graphfuzz_core::tensor::{random_seed_tensor, MAX_ELEMENTS};
use graphfuzz_core::tensor_mutation::{crop, mutate_tensor, TensorMutationRule, PAD_RANGE};
use graphfuzz_core::{DType, Shape, Tensor, TensorData};
use half::bf16;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).unwrap()
}

fn dtype_strategy() -> impl Strategy<Value = DType> {
    prop_oneof![Just(DType::F32), Just(DType::F64), Just(DType::BF16)]
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..4, 1usize..6, 1usize..6, dtype_strategy(), any::<u64>())
        .prop_map(|(n, c, h, w, d, seed)| random_seed_tensor(shape(n, c, h, w), d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

fn rule_strategy() -> impl Strategy<Value = TensorMutationRule> {
    (0..TensorMutationRule::ALL.len()).prop_map(|i| TensorMutationRule::ALL[i])
}

fn axis_of(rule: TensorMutationRule) -> Option<usize> {
    use TensorMutationRule::*;
    match rule {
        BDC | BDP => Some(0),
        CDC | CDP => Some(1),
        HDC | HDP => Some(2),
        WDC | WDP => Some(3),
        _ => None,
    }
}

fn nonzero_multiset(t: &Tensor) -> Vec<u64> {
    let mut v: Vec<u64> = t.to_f64_vec().into_iter().filter(|x| *x != 0.0).map(f64::to_bits).collect();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn every_rule_keeps_extents_positive_and_one_of_shape_or_dtype(t in tensor_strategy(), rule in rule_strategy(), seed in any::<u64>()) {
        let out = mutate_tensor(&t, rule, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(out.shape().dims().iter().all(|&d| d >= 1));
        use TensorMutationRule::*;
        match rule {
            FT | DT | BFT => prop_assert_eq!(out.shape(), t.shape()),
            _ => prop_assert_eq!(out.dtype(), t.dtype()),
        }
    }

    #[test]
    fn copy_rules_double_the_element_count(t in tensor_strategy(), rule in prop_oneof![
        Just(TensorMutationRule::WDC), Just(TensorMutationRule::HDC), Just(TensorMutationRule::CDC), Just(TensorMutationRule::BDC)
    ]) {
        let out = mutate_tensor(&t, rule, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        prop_assert_eq!(out.len(), 2 * t.len());
        let a = axis_of(rule).unwrap();
        for i in 0..4 {
            let want = if i == a { 2 * t.shape().dims()[i] } else { t.shape().dims()[i] };
            prop_assert_eq!(out.shape().dims()[i], want);
        }
    }

    #[test]
    fn padding_rules_keep_nonzeros_and_append_zeros(t in tensor_strategy(), rule in prop_oneof![
        Just(TensorMutationRule::WDP), Just(TensorMutationRule::HDP), Just(TensorMutationRule::CDP), Just(TensorMutationRule::BDP)
    ], seed in any::<u64>()) {
        let out = mutate_tensor(&t, rule, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = axis_of(rule).unwrap();
        let k = out.shape().dims()[a] - t.shape().dims()[a];
        prop_assert!((PAD_RANGE.0..=PAD_RANGE.1).contains(&k));
        prop_assert_eq!(nonzero_multiset(&out), nonzero_multiset(&t));
        let zeros = out.to_f64_vec().iter().filter(|x| **x == 0.0).count() - t.to_f64_vec().iter().filter(|x| **x == 0.0).count();
        prop_assert_eq!(zeros, out.len() - t.len());
    }

    #[test]
    fn casting_twice_equals_casting_once(t in tensor_strategy(), d in dtype_strategy()) {
        let once = t.cast(d);
        prop_assert!(once.cast(d).bit_eq(&once));
        prop_assert!(t.cast(t.dtype()).bit_eq(&t));
    }

    #[test]
    fn bf16_conversion_matches_neighbour_oracle(x in -3.3e38f64..3.3e38) {
        check_bf16(x);
    }

    #[test]
    fn bf16_conversion_of_small_values(m in -1.0f64..1.0, e in -140i32..10) {
        check_bf16(m * 2f64.powi(e));
    }
}

/// Nearest bf16 to a finite `x` with ties to an even mantissa, found by
/// binary search over the ordered positive bit patterns.
fn bf16_oracle(x: f64) -> u16 {
    let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
    let a = x.abs();
    let value = |bits: u16| f32::from_bits((bits as u32) << 16) as f64;
    // Largest finite pattern is 0x7F7F.
    if a >= value(0x7F7F) {
        let max = value(0x7F7F);
        let half_ulp = (value(0x7F7F) - value(0x7F7E)) / 2.0;
        return sign | if a - max >= half_ulp { 0x7F80 } else { 0x7F7F };
    }
    let (mut lo, mut hi) = (0u16, 0x7F7F);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if value(mid) <= a {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if value(hi) <= a {
        lo = hi;
    }
    if value(lo) == a {
        return sign | lo;
    }
    let up = lo + 1;
    let (below, above) = (a - value(lo), value(up) - a);
    let pick = if below < above {
        lo
    } else if above < below {
        up
    } else if lo % 2 == 0 {
        lo
    } else {
        up
    };
    sign | pick
}

fn check_bf16(x: f64) {
    let t = Tensor::from_f64(shape(1, 1, 1, 1), DType::F64, &[x]).unwrap();
    let b = mutate_tensor(&t, TensorMutationRule::BFT, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let TensorData::BF16(v) = b.data() else {
        panic!("BFT did not produce bf16");
    };
    let got = v[0].to_bits();
    let want = bf16_oracle(x);
    let same_zero = got & 0x7FFF == 0 && want & 0x7FFF == 0;
    assert!(got == want || same_zero, "{x:e}: got {got:#06x}, oracle {want:#06x}");
}

#[test]
fn bf16_known_values() {
    check_bf16(0.1);
    assert_eq!(bf16_oracle(0.1), 0x3DCD);
    // 1 + 2^-8 lies exactly between 1 and 1 + 2^-7; the even neighbour is 1.
    assert_eq!(bf16_oracle(1.0 + 2f64.powi(-8)), 0x3F80);
    check_bf16(1.0 + 2f64.powi(-8));
    // 1 + 3·2^-8 lies between 1 + 2^-7 (odd) and 1 + 2^-6 (even).
    assert_eq!(bf16_oracle(1.0 + 3.0 * 2f64.powi(-8)), 0x3F82);
    check_bf16(1.0 + 3.0 * 2f64.powi(-8));
    check_bf16(-2.5e-41);
    check_bf16(3.4e38);
    assert_eq!(bf16::from_bits(bf16_oracle(-1.0)).to_f64(), -1.0);
}

#[test]
fn crop_example_takes_the_sub_block() {
    let t = Tensor::from_f64(shape(1, 1, 4, 4), DType::F32, &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
    let out = crop(&t, [1, 1, 2, 2], [0, 0, 1, 1]).unwrap();
    assert_eq!(out.to_f64_vec(), vec![5.0, 6.0, 9.0, 10.0]);
}

#[test]
fn copy_past_the_element_bound_is_rejected() {
    let t = Tensor::zeros(shape(1, 1, 1, MAX_ELEMENTS), DType::BF16);
    let r = mutate_tensor(&t, TensorMutationRule::WDC, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(r.is_err());
}
