//! Software FP8 E4M3FN codec and scaled fake quantization.
//!
//! Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits. There are no
//! infinities; `0x7F` and `0xFF` are NaN, so the largest finite magnitude is
//! `0x7E = 1.75 · 2⁸ = 448`. Exponent field 0 encodes subnormals
//! `m/8 · 2⁻⁶`, the smallest being `2⁻⁹`.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const FP8_MAX: f32 = 448.0;
pub const FP8_MIN: f32 = -448.0;
/// Lower bound applied to every scale.
pub const SCALE_EPS: f32 = 1e-8;

const NAN_CODE: u8 = 0x7F;
const MAX_CODE: u8 = 0x7E;
const SIGN: u8 = 0x80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fp8Code(pub u8);

impl Fp8Code {
    pub fn is_nan(self) -> bool {
        self.0 & !SIGN == NAN_CODE
    }

    pub fn to_f32(self) -> f32 {
        decode(self)
    }
}

fn table() -> &'static [f32; 256] {
    static TABLE: OnceLock<[f32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0f32; 256];
        for (b, slot) in t.iter_mut().enumerate() {
            *slot = decode_bits(b as u8);
        }
        t
    })
}

fn decode_bits(b: u8) -> f32 {
    let sign = if b & SIGN != 0 { -1.0 } else { 1.0 };
    let exp = ((b >> 3) & 0x0F) as i32;
    let man = (b & 0x07) as f32;
    if b & !SIGN == NAN_CODE {
        return f32::NAN;
    }
    if exp == 0 {
        sign * man / 8.0 * 2f32.powi(-6)
    } else {
        sign * (1.0 + man / 8.0) * 2f32.powi(exp - 7)
    }
}

pub fn decode(c: Fp8Code) -> f32 {
    table()[c.0 as usize]
}

/// Round-to-nearest-even onto the E4M3FN grid. NaN maps to a NaN code;
/// magnitudes at or beyond 448 (including infinities) saturate to ±448.
pub fn encode(x: f32) -> Fp8Code {
    let sign = if x.is_sign_negative() { SIGN } else { 0 };
    if x.is_nan() {
        return Fp8Code(sign | NAN_CODE);
    }
    let a = x.abs();
    if a >= FP8_MAX {
        return Fp8Code(sign | MAX_CODE);
    }
    // Subnormal range: a multiple of 2⁻⁹. Rounding up to 8 lands exactly on
    // the smallest normal, whose code is also 8.
    if a < 2f32.powi(-6) {
        let m = (a * 512.0).round_ties_even() as u8;
        return Fp8Code(sign | m);
    }
    let bits = a.to_bits();
    let mut exp = ((bits >> 23) & 0xFF) as i32 - 127;
    let frac = bits & 0x7F_FFFF;
    // Keep the top 3 of 23 mantissa bits, ties to even.
    const DROP: u32 = 20;
    let half = 1u32 << (DROP - 1);
    let rest = frac & ((1 << DROP) - 1);
    let mut man = frac >> DROP;
    if rest > half || (rest == half && man & 1 == 1) {
        man += 1;
    }
    if man == 8 {
        man = 0;
        exp += 1;
    }
    let e = (exp + 7) as u8;
    let code = (e << 3) | man as u8;
    // a < 448 cannot round past 0x7E (the midpoint to the NaN slot is 464)
    Fp8Code(sign | code.min(MAX_CODE))
}

/// Which dimension owns a scale. Both reduce over the last dim of a matrix;
/// for weights the rows are output channels, for activations they are tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantAxis {
    PerOutputRow,
    PerToken,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<Fp8Code>,
    scales: Vec<f32>,
    axis: QuantAxis,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn from_parts(
        codes: Vec<Fp8Code>,
        scales: Vec<f32>,
        axis: QuantAxis,
        shape: Vec<usize>,
    ) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let rows = if shape.len() < 2 { 1 } else { numel / shape.last().copied().unwrap_or(1).max(1) };
        if codes.len() != numel || scales.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "quantized tensor {shape:?} needs {numel} codes and {rows} scales, got {} and {}",
                codes.len(),
                scales.len()
            )));
        }
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("scales must be positive and finite".into()));
        }
        Ok(QuantizedTensor {
            codes,
            scales,
            axis,
            shape,
        })
    }

    pub fn codes(&self) -> &[Fp8Code] {
        &self.codes
    }

    pub fn code_bytes(&self) -> Vec<u8> {
        self.codes.iter().map(|c| c.0).collect()
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn axis(&self) -> QuantAxis {
        self.axis
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Storage cost: one byte per code plus one f32 per scale.
    pub fn nbytes(&self) -> usize {
        self.codes.len() + 4 * self.scales.len()
    }

    pub fn dequantize(&self) -> Tensor {
        let cols = self.codes.len() / self.scales.len().max(1);
        let data = self
            .codes
            .chunks(cols.max(1))
            .zip(&self.scales)
            .flat_map(|(row, &s)| row.iter().map(move |&c| decode(c) * s))
            .collect();
        Tensor::from_parts(self.shape.clone(), data)
    }
}

/// Per-slice scale: `max(max|slice| / 448, ε)`.
pub fn slice_scale(slice: &[f32]) -> f32 {
    let amax = slice.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    (amax / FP8_MAX).max(SCALE_EPS)
}

/// Dynamic scaled quantization with one scale per row of the matrix view.
pub fn quantize_scaled(x: &Tensor, axis: QuantAxis) -> Result<QuantizedTensor> {
    if !x.all_finite() {
        return Err(Error::NonFinite { op: "quantize_scaled" });
    }
    let cols = x.cols().max(1);
    let mut codes = Vec::with_capacity(x.numel());
    let mut scales = Vec::with_capacity(x.rows());
    for row in x.data().chunks(cols) {
        let s = slice_scale(row);
        scales.push(s);
        codes.extend(row.iter().map(|&v| encode((v / s).clamp(FP8_MIN, FP8_MAX))));
    }
    QuantizedTensor::from_parts(codes, scales, axis, x.shape().to_vec())
}

/// `dequantize(quantize_scaled(x))`.
pub fn fake_quant(x: &Tensor, axis: QuantAxis) -> Result<Tensor> {
    Ok(quantize_scaled(x, axis)?.dequantize())
}

/// Fake quantization with a straight-through gradient: the forward value is
/// the dequantized tensor, the backward pass is the identity.
pub fn fake_quant_ste(tape: &mut Tape, x: Var, axis: QuantAxis) -> Result<Var> {
    let q = fake_quant(tape.value(x)?, axis)?;
    tape.straight_through(x, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode(1.0), Fp8Code(0x38));
        assert_eq!(encode(448.0), Fp8Code(0x7E));
        assert_eq!(encode(0.0), Fp8Code(0x00));
        assert_eq!(encode(-0.0), Fp8Code(0x80));
        assert!(encode(f32::NAN).is_nan());
        assert_eq!(encode(1e9), Fp8Code(0x7E));
        assert_eq!(encode(f32::NEG_INFINITY), Fp8Code(0xFE));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(Fp8Code(0x38)), 1.0);
        assert_eq!(decode(Fp8Code(0x01)), 0.001_953_125);
        assert!(decode(Fp8Code(0x7F)).is_nan());
        assert!(decode(Fp8Code(0xFF)).is_nan());
        assert_eq!(decode(Fp8Code(0x7E)), 448.0);
        assert_eq!(decode(Fp8Code(0x08)), 2f32.powi(-6));
    }

    #[test]
    fn ties_round_to_even() {
        // between 1.0 (m=0) and 1.125 (m=1): the tie goes to the even mantissa
        assert_eq!(encode(1.0625), Fp8Code(0x38));
        // between 1.125 (m=1) and 1.25 (m=2)
        assert_eq!(encode(1.1875), Fp8Code(0x3A));
        // subnormal tie: 1.5 · 2⁻⁹ → 2 · 2⁻⁹
        assert_eq!(encode(1.5 * 2f32.powi(-9)), Fp8Code(0x02));
        // 0.5 · 2⁻⁹ → 0
        assert_eq!(encode(0.5 * 2f32.powi(-9)), Fp8Code(0x00));
        // largest subnormal rounds up into the first normal
        assert_eq!(encode(7.5 * 2f32.powi(-9)), Fp8Code(0x08));
    }

    #[test]
    fn zero_row_quantizes_to_zero() {
        let x = Tensor::zeros(&[2, 3]);
        let q = quantize_scaled(&x, QuantAxis::PerToken).unwrap();
        assert!(q.codes().iter().all(|&c| c == Fp8Code(0)));
        assert_eq!(q.scales(), &[SCALE_EPS, SCALE_EPS]);
        assert!(q.dequantize().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn row_at_fp8_max_has_unit_scale() {
        let x = Tensor::new(vec![1, 1], vec![448.0]).unwrap();
        let q = quantize_scaled(&x, QuantAxis::PerOutputRow).unwrap();
        assert_eq!(q.scales(), &[1.0]);
        assert_eq!(q.codes(), &[Fp8Code(0x7E)]);
        assert_eq!(q.dequantize().data(), &[448.0]);
    }

    #[test]
    fn quantize_rejects_non_finite() {
        let x = Tensor::new(vec![1, 2], vec![1.0, f32::INFINITY]).unwrap();
        assert!(quantize_scaled(&x, QuantAxis::PerToken).is_err());
    }

    #[test]
    fn on_grid_values_pass_through_unchanged() {
        // row max 448 gives scale 1, so grid values are reproduced exactly
        let row = [448.0, 1.0, -0.5, 2f32.powi(-9), 3.25, -96.0];
        let x = Tensor::new(vec![1, 6], row.to_vec()).unwrap();
        assert!(fake_quant(&x, QuantAxis::PerToken).unwrap().bit_eq(&x));
    }

    #[test]
    fn ste_gradient_is_identity() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::new(vec![2, 3], vec![0.1, -2.3, 7.7, 100.0, 0.0, -0.003]).unwrap());
        let y = fake_quant_ste(&mut tape, x, QuantAxis::PerToken).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    proptest! {
        #[test]
        fn power_of_two_rescaling_is_exact(
            row in prop::collection::vec(-50.0f32..50.0, 1..16),
            shift in -8i32..8,
        ) {
            let c = 2f32.powi(shift);
            let x = Tensor::new(vec![1, row.len()], row.clone()).unwrap();
            let y = Tensor::new(vec![1, row.len()], row.iter().map(|v| v * c).collect()).unwrap();
            let qx = quantize_scaled(&x, QuantAxis::PerToken).unwrap();
            let qy = quantize_scaled(&y, QuantAxis::PerToken).unwrap();
            // the ε floor breaks equivariance for all-zero rows
            prop_assume!(qx.scales()[0] > SCALE_EPS && qy.scales()[0] > SCALE_EPS);
            prop_assert_eq!(qx.codes(), qy.codes());
            prop_assert_eq!(qx.scales()[0] * c, qy.scales()[0]);
        }

        #[test]
        fn general_rescaling_moves_codes_by_at_most_one_step(
            row in prop::collection::vec(-50.0f32..50.0, 1..16),
            c in 0.01f32..100.0,
        ) {
            let x = Tensor::new(vec![1, row.len()], row.clone()).unwrap();
            let y = Tensor::new(vec![1, row.len()], row.iter().map(|v| v * c).collect()).unwrap();
            let qx = quantize_scaled(&x, QuantAxis::PerToken).unwrap();
            let qy = quantize_scaled(&y, QuantAxis::PerToken).unwrap();
            prop_assume!(qx.scales()[0] > SCALE_EPS && qy.scales()[0] > SCALE_EPS);
            let rel = (qy.scales()[0] / (qx.scales()[0] * c) - 1.0).abs();
            prop_assert!(rel < 1e-5);
            for (a, b) in qx.codes().iter().zip(qy.codes()) {
                let (a, b) = (a.0 as i16, b.0 as i16);
                // same sign half, neighbouring magnitudes
                prop_assert!((a & 0x80) == (b & 0x80) || (a & 0x7F) + (b & 0x7F) <= 1);
                prop_assert!(((a & 0x7F) - (b & 0x7F)).abs() <= 1);
            }
        }

        #[test]
        fn finite_input_never_yields_nan(row in prop::collection::vec(-1e30f32..1e30, 1..32)) {
            let x = Tensor::new(vec![1, row.len()], row).unwrap();
            let dq = fake_quant(&x, QuantAxis::PerOutputRow).unwrap();
            prop_assert!(dq.all_finite());
        }
    }
}
