//! Global min/max int8 quantization and integer dot products.
//!
//! One affine map is shared by every item row and by queries:
//! `q = clamp(round_half_even((x - min) * scale) - 128, -128, 127)` with
//! `scale = 255 / (max - min)`. Scores are exact `i32` sums.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("cannot quantize an empty matrix")]
    Empty,
    #[error("degenerate value range: min == max == {0}")]
    DegenerateRange(f32),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub global_min: f32,
    pub global_max: f32,
    pub scale: f32,
}

impl QuantParams {
    pub fn from_range(global_min: f32, global_max: f32) -> Result<Self, QuantError> {
        if !global_min.is_finite() || !global_max.is_finite() {
            return Err(QuantError::NonFinite);
        }
        if global_min >= global_max {
            return Err(QuantError::DegenerateRange(global_min));
        }
        let scale = 255.0f32 / (global_max - global_min);
        if !scale.is_finite() || scale <= 0.0 {
            return Err(QuantError::DegenerateRange(global_min));
        }
        Ok(Self {
            global_min,
            global_max,
            scale,
        })
    }

    /// Half of one quantization step in input units.
    pub fn half_step(&self) -> f64 {
        0.5 / self.scale as f64
    }

    /// Code of `0.0`. Scores subtract it from query codes so that the
    /// affine offset of the item codes does not depend on the item.
    pub fn zero_code(&self) -> i8 {
        quantize_value(0.0, self)
    }

    #[inline]
    pub fn dequantize(&self, q: i8) -> f32 {
        ((q as f64 + 128.0) / self.scale as f64 + self.global_min as f64) as f32
    }
}

pub fn compute_quant_params(values: &[f32]) -> Result<QuantParams, QuantError> {
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &x in values {
        if !x.is_finite() {
            return Err(QuantError::NonFinite);
        }
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if values.is_empty() {
        return Err(QuantError::Empty);
    }
    QuantParams::from_range(lo, hi)
}

#[inline]
pub fn quantize_value(x: f32, p: &QuantParams) -> i8 {
    let r = ((x as f64 - p.global_min as f64) * p.scale as f64).round_ties_even();
    (r - 128.0).clamp(-128.0, 127.0) as i8
}

pub fn quantize_vector(v: &[f32], p: &QuantParams) -> Vec<i8> {
    v.iter().map(|&x| quantize_value(x, p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMatrix {
    data: Vec<i8>,
    rows: usize,
    dim: usize,
    params: QuantParams,
    row_sums: Vec<i32>,
}

impl QuantizedMatrix {
    pub fn quantize(m: &Matrix, params: QuantParams) -> Self {
        let data = m.as_slice().iter().map(|&x| quantize_value(x, &params)).collect();
        Self::from_raw(data, m.rows(), m.cols(), params)
    }

    pub fn from_raw(data: Vec<i8>, rows: usize, dim: usize, params: QuantParams) -> Self {
        assert_eq!(data.len(), rows * dim);
        let row_sums = if dim == 0 {
            vec![0; rows]
        } else {
            data.chunks_exact(dim).map(|r| r.iter().map(|&x| x as i32).sum()).collect()
        };
        Self {
            data,
            rows,
            dim,
            params,
            row_sums,
        }
    }

    #[inline]
    pub fn row_sum(&self, i: usize) -> i32 {
        self.row_sums[i]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[i8] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.data
    }
}

/// Exact integer dot product. No overflow for `len <= 65536`.
pub fn int8_dot(a: &[i8], b: &[i8]) -> Result<i32, QuantError> {
    if a.len() != b.len() {
        return Err(QuantError::LengthMismatch(a.len(), b.len()));
    }
    Ok(dot_i8(a, b))
}

/// Search score of an item row against query codes `q`:
/// `sum_k row[k] * (q[k] - q0)`, computed as `dot(q, row) - q0 * row_sum`.
/// With `x ~ (row - c) / scale` for a constant `c`, the score is
/// `scale^2 * x.y` plus a term that depends only on the query.
#[inline]
pub fn centered_dot(q: &[i8], q0: i8, row: &[i8], row_sum: i32) -> i32 {
    dot_i8(q, row) - q0 as i32 * row_sum
}

/// Unchecked kernel behind [`int8_dot`]: four-lane i32 accumulation.
#[inline]
pub fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0i32; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] as i32 * y[l] as i32;
        }
    }
    let mut s = acc.iter().sum::<i32>();
    for (x, y) in ra.iter().zip(rb) {
        s += *x as i32 * *y as i32;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_for_unit_range() {
        let p = compute_quant_params(&[-1.0, 0.25, 1.0]).unwrap();
        assert_eq!(p, QuantParams { global_min: -1.0, global_max: 1.0, scale: 127.5 });
    }

    #[test]
    fn constant_matrix_is_degenerate() {
        assert_eq!(compute_quant_params(&[0.5; 8]), Err(QuantError::DegenerateRange(0.5)));
        assert_eq!(compute_quant_params(&[]), Err(QuantError::Empty));
    }

    #[test]
    fn params_match_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m: Vec<f32> = (0..1600).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let p = compute_quant_params(&m).unwrap();
        let mut lo = m[0];
        let mut hi = m[0];
        for &x in &m {
            if x < lo { lo = x; }
            if x > hi { hi = x; }
        }
        assert_eq!((p.global_min, p.global_max), (lo, hi));
    }

    #[test]
    fn endpoints_and_midpoint() {
        let p = QuantParams::from_range(-1.0, 1.0).unwrap();
        assert_eq!(quantize_value(-1.0, &p), -128);
        assert_eq!(quantize_value(1.0, &p), 127);
        assert_eq!(quantize_value(0.0, &p), 0);
        assert_eq!(quantize_value(-7.0, &p), -128);
        assert_eq!(quantize_value(7.0, &p), 127);
    }

    #[test]
    fn dot_examples() {
        assert_eq!(int8_dot(&[127; 4], &[127; 4]).unwrap(), 64516);
        assert_eq!(int8_dot(&[0; 9], &[-5; 9]).unwrap(), 0);
        assert_eq!(int8_dot(&[1; 3], &[1; 4]), Err(QuantError::LengthMismatch(3, 4)));
        // worst case magnitude at the supported length
        let a = vec![-128i8; 65536];
        assert_eq!(int8_dot(&a, &a).unwrap(), 1 << 30);
    }

    #[test]
    fn dot_matches_wide_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a: Vec<i8> = (0..128).map(|_| rng.gen()).collect();
            let b: Vec<i8> = (0..128).map(|_| rng.gen()).collect();
            let wide: i128 = a.iter().zip(&b).map(|(x, y)| *x as i128 * *y as i128).sum();
            assert_eq!(int8_dot(&a, &b).unwrap() as i128, wide);
        }
    }

    proptest! {
        #[test]
        fn dequantization_within_half_step(lo in -10.0f32..0.0, width in 0.01f32..20.0, t in 0.0f64..=1.0) {
            let p = QuantParams::from_range(lo, lo + width).unwrap();
            let x = (lo as f64 + t * width as f64) as f32;
            let err = (p.dequantize(quantize_value(x, &p)) as f64 - x as f64).abs();
            prop_assert!(err <= p.half_step() + 1e-6 * width as f64);
        }

        #[test]
        fn dot_symmetric_and_bilinear(a in proptest::collection::vec(-50i8..50, 16),
                                      b in proptest::collection::vec(-50i8..50, 16),
                                      c in proptest::collection::vec(-50i8..50, 16)) {
            prop_assert_eq!(dot_i8(&a, &b), dot_i8(&b, &a));
            let bc: Vec<i8> = b.iter().zip(&c).map(|(x, y)| x + y).collect();
            prop_assert_eq!(dot_i8(&a, &bc), dot_i8(&a, &b) + dot_i8(&a, &c));
        }

        #[test]
        fn centered_dot_matches_definition(q in proptest::collection::vec(any::<i8>(), 0..40),
                                           q0 in any::<i8>(),
                                           seed in any::<u64>()) {
            let row: Vec<i8> = q.iter().enumerate().map(|(i, _)| (seed.rotate_left(i as u32 * 7) as u8) as i8).collect();
            let sum: i32 = row.iter().map(|&x| x as i32).sum();
            let want: i64 = q.iter().zip(&row).map(|(&a, &b)| b as i64 * (a as i64 - q0 as i64)).sum();
            prop_assert_eq!(centered_dot(&q, q0, &row, sum) as i64, want);
        }
    }
}
