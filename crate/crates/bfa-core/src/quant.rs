//! Symmetric per-layer 8-bit weight quantization and the bit-level view
//! used by the attack.
//!
//! A layer's weights map to signed two's-complement bytes through a single
//! positive scale, `max|W_l| / 127`:
//!
//! ```text
//! code  = round(clamp(w, -max|W_l|, +max|W_l|) / scale)   // half away from zero
//! value = scale * code
//! ```
//!
//! Freshly quantized codes lie in [-127, 127]; attack flips manipulate raw
//! bits, so a post-flip code of -128 is legitimate. The scale is frozen at
//! quantization time — flips never rescale a layer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<i8>,
    pub scale: f64,
    pub shape: Vec<usize>,
}

/// Location of one attackable bit: a weighted layer, a flat weight index
/// within it, and a bit position (7 = two's-complement sign bit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct BitAddress {
    pub layer: usize,
    pub index: usize,
    pub bit: u8,
}

impl std::fmt::Display for BitAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer {} weight {} bit {}", self.layer, self.index, self.bit)
    }
}

/// Quantizes one layer. An all-zero layer gets scale 0 and all-zero codes.
pub fn quantize_layer(weights: &Tensor) -> QuantizedTensor {
    let max_abs = weights.max_abs();
    if max_abs == 0.0 {
        return QuantizedTensor {
            codes: vec![0; weights.len()],
            scale: 0.0,
            shape: weights.shape().to_vec(),
        };
    }
    let scale = max_abs / 127.0;
    let codes = weights
        .values()
        .iter()
        .map(|&w| (w.clamp(-max_abs, max_abs) / scale).round() as i8)
        .collect();
    QuantizedTensor {
        codes,
        scale,
        shape: weights.shape().to_vec(),
    }
}

/// Elementwise `scale * code`.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let values = q.codes.iter().map(|&c| q.scale * c as f64).collect();
    Tensor::from_values(&q.shape, values).expect("codes match shape")
}

#[inline]
pub fn dequantize_code(scale: f64, code: i8) -> f64 {
    scale * code as f64
}

/// Toggles one bit of one code. Involution: applying twice restores `q`.
pub fn flip_bit(q: &mut QuantizedTensor, index: usize, bit: u8) -> Result<()> {
    if index >= q.codes.len() || bit > 7 {
        return Err(Error::AddressOutOfRange(format!(
            "weight {index} bit {bit} in layer of {} codes",
            q.codes.len()
        )));
    }
    q.codes[index] = (q.codes[index] as u8 ^ (1u8 << bit)) as i8;
    Ok(())
}

#[inline]
pub fn bit_is_set(code: i8, bit: u8) -> bool {
    (code as u8 >> bit) & 1 == 1
}

/// Signed change in dequantized value when bit `k` goes 0 -> 1:
/// `scale * 2^k` for k < 7, `-scale * 2^7` for the sign bit.
#[inline]
pub fn bit_set_delta(scale: f64, bit: u8) -> f64 {
    debug_assert!(bit <= 7);
    if bit == 7 {
        -scale * 128.0
    } else {
        scale * (1u32 << bit) as f64
    }
}

/// Signed change in dequantized value caused by flipping bit `k` from its
/// current state, i.e. `dequant(flip(code, k)) - dequant(code)`.
#[inline]
pub fn flip_delta(scale: f64, code: i8, bit: u8) -> f64 {
    let d = bit_set_delta(scale, bit);
    if bit_is_set(code, bit) {
        -d
    } else {
        d
    }
}

/// Loss gradient with respect to the bit variable, `∇b L = ∇w L · ∂w/∂b`,
/// with the bit treated as a continuous 0/1 coordinate of the weight value.
/// Independent of the currently stored bit; the flip rule decides from its
/// sign whether the ascent direction actually changes the bit.
#[inline]
pub fn bit_grad(weight_grad: f64, scale: f64, bit: u8) -> f64 {
    weight_grad * bit_set_delta(scale, bit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(vals: &[f64]) -> Tensor {
        Tensor::from_values(&[vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn zero_layer_gets_zero_scale() {
        let q = quantize_layer(&tensor(&[0.0, 0.0, 0.0]));
        assert_eq!(q.scale, 0.0);
        assert!(q.codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn appendix_formula_example() {
        // max|W| = 1.27 -> scale 0.01; 0.506 -> 51 (value 0.51); -1.27 -> -127.
        let q = quantize_layer(&tensor(&[0.506, -1.27]));
        assert!((q.scale - 0.01).abs() < 1e-15);
        assert_eq!(q.codes, vec![51, -127]);
        let d = dequantize(&q);
        assert!((d.values()[0] - 0.51).abs() < 1e-12);
        assert!((d.values()[1] + 1.27).abs() < 1e-12);
    }

    #[test]
    fn max_weight_maps_to_127() {
        let q = quantize_layer(&tensor(&[0.3, -0.9, 0.2]));
        assert_eq!(q.codes[1], -127);
        let q = quantize_layer(&tensor(&[0.9, -0.3]));
        assert_eq!(q.codes[0], 127);
    }

    #[test]
    fn dequantize_post_attack_code() {
        assert_eq!(dequantize_code(0.01, -128), -1.28);
        assert_eq!(dequantize_code(0.5, 0), 0.0);
    }

    #[test]
    fn flip_examples() {
        let mut q = QuantizedTensor {
            codes: vec![0b0000_0000u8 as i8],
            scale: 1.0,
            shape: vec![1],
        };
        flip_bit(&mut q, 0, 0).unwrap();
        assert_eq!(q.codes[0], 0b0000_0001);
        let mut q = QuantizedTensor {
            codes: vec![127],
            scale: 1.0,
            shape: vec![1],
        };
        flip_bit(&mut q, 0, 7).unwrap();
        assert_eq!(q.codes[0], -1);
        assert!(flip_bit(&mut q, 1, 0).is_err());
        assert!(flip_bit(&mut q, 0, 8).is_err());
    }

    #[test]
    fn bit_set_delta_examples() {
        assert!((bit_set_delta(0.01, 0) - 0.01).abs() < 1e-18);
        assert!((bit_set_delta(0.01, 7) + 1.28).abs() < 1e-18);
        assert!((bit_set_delta(0.01, 6) - 0.64).abs() < 1e-18);
    }

    #[test]
    fn flip_delta_matches_dequantize_difference_exhaustively() {
        let scale = 0.013;
        for code in i8::MIN..=i8::MAX {
            for bit in 0u8..8 {
                let mut q = QuantizedTensor {
                    codes: vec![code],
                    scale,
                    shape: vec![1],
                };
                let before = dequantize_code(scale, code);
                flip_bit(&mut q, 0, bit).unwrap();
                let after = dequantize_code(scale, q.codes[0]);
                let want = after - before;
                let got = flip_delta(scale, code, bit);
                assert!(
                    (got - want).abs() < 1e-15,
                    "code {code} bit {bit}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn quantization_idempotent() {
        let w = tensor(&[0.4, -1.2, 0.77, 0.0, 1.2]);
        let q1 = quantize_layer(&w);
        let q2 = quantize_layer(&dequantize(&q1));
        assert_eq!(q1.codes, q2.codes);
        assert_eq!(q1.scale, q2.scale);
    }

    #[test]
    fn code_order_preserves_value_order() {
        let scale = 0.02;
        for a in (-128i16..=126).step_by(7) {
            let (a, b) = (a as i8, (a + 1) as i8);
            assert!(dequantize_code(scale, a) < dequantize_code(scale, b));
        }
    }
}
