//! Property tests for the quantizer and bit-level view.

use bfa_core::quant::{
    bit_grad, bit_is_set, dequantize, dequantize_code, flip_bit, flip_delta, quantize_layer,
    QuantizedTensor,
};
use bfa_core::rng::CounterRng;
use bfa_core::tensor::Tensor;
use proptest::prelude::*;

fn weight_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..64)
}

proptest! {
    // |w - dequant(quant(w))| <= scale/2 for every in-range weight.
    #[test]
    fn round_trip_error_is_at_most_half_a_step(w in weight_vec()) {
        let t = Tensor::from_values(&[w.len()], w.clone()).unwrap();
        let q = quantize_layer(&t);
        let d = dequantize(&q);
        for (orig, deq) in w.iter().zip(d.values()) {
            prop_assert!((orig - deq).abs() <= q.scale / 2.0 + 1e-12,
                "w {orig} deq {deq} scale {}", q.scale);
        }
    }

    // Requantizing a quantized layer is the identity on codes and scale.
    #[test]
    fn quantization_is_idempotent(w in weight_vec()) {
        let q1 = quantize_layer(&Tensor::from_values(&[w.len()], w).unwrap());
        let q2 = quantize_layer(&dequantize(&q1));
        prop_assert_eq!(&q1.codes, &q2.codes);
        prop_assert_eq!(q1.scale, q2.scale);
    }

    // Freshly quantized codes stay inside [-127, 127].
    #[test]
    fn fresh_codes_stay_in_symmetric_range(w in weight_vec()) {
        let q = quantize_layer(&Tensor::from_values(&[w.len()], w).unwrap());
        prop_assert!(q.codes.iter().all(|&c| (-127..=127).contains(&(c as i16))));
    }

    // For a fixed scale, code order is value order.
    #[test]
    fn code_order_is_value_order(a in -128i16..=127, b in -128i16..=127, scale in 1e-6f64..1.0) {
        let (a, b) = (a as i8, b as i8);
        if a < b {
            prop_assert!(dequantize_code(scale, a) < dequantize_code(scale, b));
        }
    }
}

#[test]
fn flip_is_an_involution_for_1000_random_addresses() {
    let mut rng = CounterRng::new(99, 0);
    for _ in 0..1000 {
        let n = 1 + rng.below(40) as usize;
        let codes: Vec<i8> = (0..n).map(|_| rng.next_u64() as u8 as i8).collect();
        let mut q = QuantizedTensor {
            codes: codes.clone(),
            scale: 0.01 + rng.uniform(),
            shape: vec![n],
        };
        let index = rng.below(n as u64) as usize;
        let bit = rng.below(8) as u8;
        flip_bit(&mut q, index, bit).unwrap();
        flip_bit(&mut q, index, bit).unwrap();
        assert_eq!(q.codes, codes);
    }
}

// Exhaustive 256 x 8: the bit derivative equals the dequantized difference,
// and the bit gradient has the matching sign convention.
#[test]
fn exhaustive_bit_derivative_check() {
    let scale = 0.00731;
    for code in i8::MIN..=i8::MAX {
        for bit in 0u8..8 {
            let mut q = QuantizedTensor { codes: vec![code], scale, shape: vec![1] };
            flip_bit(&mut q, 0, bit).unwrap();
            let actual = dequantize_code(scale, q.codes[0]) - dequantize_code(scale, code);
            let predicted = flip_delta(scale, code, bit);
            assert!((predicted - actual).abs() < 1e-15, "code {code} bit {bit}");
            // ∇b L with unit weight gradient is the 0->1 value delta,
            // regardless of the stored bit.
            let g = bit_grad(1.0, scale, bit);
            let set_delta = if bit_is_set(code, bit) { -actual } else { actual };
            assert!((g - set_delta).abs() < 1e-15, "code {code} bit {bit}");
        }
    }
}
