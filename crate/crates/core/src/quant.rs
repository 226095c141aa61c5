//! Group-quantized weight storage and matched matrix-vector kernels.
//!
//! Quantization is symmetric per (row, group): each group of `group_size`
//! consecutive entries within a row shares one f32 scale chosen as
//! `max|w| / (2^(bits-1) - 1)`, and codes are `round(w / scale)` with halves
//! rounded away from zero, clamped to the symmetric range. The most negative
//! code (e.g. -8 at 4 bits) is never produced. Per-channel W8 quantization is
//! the `group_size == cols` special case.
//!
//! Reduction order is pinned everywhere: kernels accumulate sequentially over
//! columns within a row, and `qgemv` multiplies out each dequantized element
//! exactly as `dequantize` would, so `qgemv(q, x)` is bit-identical to
//! `gemv(&dequantize(q), x)`.

use crate::{Error, Result};

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[must_use]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[must_use]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Symmetric group-quantized matrix.
///
/// `codes` is packed per row: at 4 bits two codes per byte (even column in
/// the low nibble, odd column in the high nibble, rows padded to a whole
/// byte); at 8 bits one two's-complement byte per code. `scales` holds one
/// f32 per (row, group), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    /// True when the stored weights were Hadamard-rotated before quantization;
    /// callers must feed Hadamard-rotated activations to [`qgemv`].
    pub rotated: bool,
    pub scales: Vec<f32>,
    pub codes: Vec<u8>,
}

impl QuantizedMatrix {
    /// Packed bytes occupied by one row.
    fn row_stride(&self) -> usize {
        match self.bits {
            4 => self.cols.div_ceil(2),
            _ => self.cols,
        }
    }

    /// Decodes the signed integer code at (r, c).
    #[inline(always)]
    pub fn code(&self, r: usize, c: usize) -> i8 {
        debug_assert!(r < self.rows && c < self.cols);
        match self.bits {
            4 => {
                let byte = self.codes[r * self.row_stride() + c / 2];
                let nibble = (byte >> (4 * (c & 1))) & 0xF;
                // sign-extend the 4-bit two's-complement nibble
                ((nibble << 4) as i8) >> 4
            }
            _ => self.codes[r * self.cols + c] as i8,
        }
    }

    #[inline(always)]
    pub fn scale(&self, r: usize, c: usize) -> f32 {
        let groups = self.cols / self.group_size;
        self.scales[r * groups + c / self.group_size]
    }
}

fn quant_range(bits: u8) -> Result<i32> {
    match bits {
        4 | 8 => Ok((1i32 << (bits - 1)) - 1),
        _ => Err(Error::config(format!("unsupported bit width {bits}; expected 4 or 8"))),
    }
}

/// Quantizes `m` with one symmetric scale per (row, group).
///
/// The code decision is `round(w * qmax / amax)` evaluated in f64, half away
/// from zero, so exact ties (like 0.5 against a scale of 1/7) land away from
/// zero. Reconstruction multiplies by the stored f32 scale `amax / qmax`,
/// which differs from the decision quotient by at most one f32 rounding, so
/// the per-element error is bounded by `scale * (0.5 + qmax * 2^-24)`.
pub fn quantize_group(m: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedMatrix> {
    let qmax = quant_range(bits)?;
    if group_size == 0 || !m.cols.is_multiple_of(group_size) {
        return Err(Error::config(format!(
            "group size {group_size} does not divide column count {}",
            m.cols
        )));
    }
    if m.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("cannot quantize non-finite weight".to_string()));
    }

    let groups = m.cols / group_size;
    let mut scales = Vec::with_capacity(m.rows * groups);
    let row_stride = if bits == 4 { m.cols.div_ceil(2) } else { m.cols };
    let mut codes = vec![0u8; m.rows * row_stride];

    for r in 0..m.rows {
        let row = m.row(r);
        for g in 0..groups {
            let slice = &row[g * group_size..(g + 1) * group_size];
            let amax = slice.iter().fold(0.0f32, |acc, v| acc.max(v.abs()));
            let scale = amax / qmax as f32;
            scales.push(scale);
            if scale == 0.0 {
                continue; // all-zero group keeps code 0
            }
            for (i, &w) in slice.iter().enumerate() {
                let c = g * group_size + i;
                let q = (w as f64 * qmax as f64 / amax as f64).round(); // half away from zero
                let q = (q as i32).clamp(-qmax, qmax);
                match bits {
                    4 => {
                        let nibble = (q as u8) & 0xF;
                        codes[r * row_stride + c / 2] |= nibble << (4 * (c & 1));
                    }
                    _ => codes[r * row_stride + c] = q as i8 as u8,
                }
            }
        }
    }

    Ok(QuantizedMatrix {
        rows: m.rows,
        cols: m.cols,
        bits,
        group_size,
        rotated: false,
        scales,
        codes,
    })
}

/// Reconstructs the dense matrix: entry = code * scale.
pub fn dequantize(q: &QuantizedMatrix) -> Matrix {
    Matrix::from_fn(q.rows, q.cols, |r, c| q.code(r, c) as f32 * q.scale(r, c))
}

fn require_power_of_two(n: usize) -> Result<()> {
    if !n.is_power_of_two() {
        return Err(Error::config(format!(
            "Hadamard rotation requires a power-of-two dimension, got {n}"
        )));
    }
    Ok(())
}

/// In-place fast Walsh-Hadamard butterflies (unnormalized).
fn fwht(xs: &mut [f32]) {
    let n = xs.len();
    let mut h = 1;
    while h < n {
        let mut i = 0;
        while i < n {
            for j in i..i + h {
                let a = xs[j];
                let b = xs[j + h];
                xs[j] = a + b;
                xs[j + h] = a - b;
            }
            i += 2 * h;
        }
        h *= 2;
    }
}

/// Applies the orthonormal Walsh-Hadamard transform to a vector: `H x` with
/// `H = H_sylvester / sqrt(n)`. `H` is symmetric and involutive, so the same
/// call also computes `H^T x` and inverts itself.
pub fn hadamard_rotate_vec(x: &[f32]) -> Result<Vec<f32>> {
    require_power_of_two(x.len())?;
    let mut out = x.to_vec();
    fwht(&mut out);
    let norm = 1.0 / (x.len() as f32).sqrt();
    for v in &mut out {
        *v *= norm;
    }
    Ok(out)
}

/// Rotates each row of `m` by the orthonormal Hadamard transform, i.e.
/// returns `m * H^T`. Rotating weights this way and activations with
/// [`hadamard_rotate_vec`] preserves every product: `(m H^T)(H x) = m x`.
pub fn hadamard_rotate(m: &Matrix) -> Result<Matrix> {
    require_power_of_two(m.cols)?;
    let norm = 1.0 / (m.cols as f32).sqrt();
    let mut data = m.data.clone();
    for r in 0..m.rows {
        let row = &mut data[r * m.cols..(r + 1) * m.cols];
        fwht(row);
        for v in row.iter_mut() {
            *v *= norm;
        }
    }
    Ok(Matrix { rows: m.rows, cols: m.cols, data })
}

/// Dense matrix-vector product with sequential per-row accumulation.
pub fn gemv(m: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != m.cols {
        return Err(Error::input(format!(
            "gemv length mismatch: matrix has {} columns, vector has {}",
            m.cols,
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let row = m.row(r);
        let mut acc = 0.0f32;
        for c in 0..m.cols {
            acc += row[c] * x[c];
        }
        out.push(acc);
    }
    Ok(out)
}

/// Quantized matrix-vector product.
///
/// Dequantizes on the fly with the same expression and accumulation order as
/// `gemv(&dequantize(q), x)`, so the two paths agree bit for bit. When
/// `q.rotated` is set, `x` must already be Hadamard-transformed.
#[allow(clippy::needless_range_loop)] // the index form mirrors dequantize + gemv exactly
pub fn qgemv(q: &QuantizedMatrix, x: &[f32]) -> Result<Vec<f32>> {
    if x.len() != q.cols {
        return Err(Error::input(format!(
            "qgemv length mismatch: matrix has {} columns, vector has {}",
            q.cols,
            x.len()
        )));
    }
    let groups = q.cols / q.group_size;
    let mut out = Vec::with_capacity(q.rows);
    for r in 0..q.rows {
        let mut acc = 0.0f32;
        for g in 0..groups {
            let scale = q.scales[r * groups + g];
            for c in g * q.group_size..(g + 1) * q.group_size {
                acc += (q.code(r, c) as f32 * scale) * x[c];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| (rng.normal() * scale) as f32)
    }

    // ---- worked example, frozen from the scalar reference ----------------
    //
    // Row [1.0, -1.0, 0.5, 0.25] at 4 bits, one group of 4:
    //   scale = max|w| / 7 = 1/7
    //   codes = round([7, -7, 3.5, 1.75]) = [7, -7, 4, 2]  (half away from 0)

    #[test]
    fn four_bit_worked_example() {
        let m = Matrix::from_vec(1, 4, vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let q = quantize_group(&m, 4, 4).unwrap();
        assert_eq!(q.scales, vec![1.0 / 7.0]);
        assert_eq!((0..4).map(|c| q.code(0, c)).collect::<Vec<_>>(), vec![7, -7, 4, 2]);
        // packed layout: low nibble = even column. 7 -> 0x7, -7 -> 0x9,
        // 4 -> 0x4, 2 -> 0x2, giving bytes [0x97, 0x24].
        assert_eq!(q.codes, vec![0x97, 0x24]);
        let dq = dequantize(&q);
        assert_eq!(dq.get(0, 0), 1.0);
        assert_eq!(dq.get(0, 1), -1.0);
        assert!((dq.get(0, 2) - 4.0 / 7.0).abs() < 1e-7);
        assert!((dq.get(0, 3) - 2.0 / 7.0).abs() < 1e-7);
    }

    #[test]
    fn eight_bit_per_channel_uses_full_range() {
        // group_size == cols is the per-channel W8 configuration
        let m = Matrix::from_vec(2, 3, vec![2.0, -1.0, 0.5, -4.0, 0.0, 1.0]).unwrap();
        let q = quantize_group(&m, 8, 3).unwrap();
        assert_eq!(q.scales.len(), 2);
        assert_eq!(q.code(0, 0), 127);
        assert_eq!(q.code(1, 0), -127);
        let dq = dequantize(&q);
        assert_eq!(dq.get(0, 0), 2.0);
        assert_eq!(dq.get(1, 0), -4.0);
    }

    #[test]
    fn all_zero_group_has_zero_scale_and_codes() {
        let m = Matrix::zeros(2, 8);
        let q = quantize_group(&m, 4, 4).unwrap();
        assert!(q.scales.iter().all(|&s| s == 0.0));
        assert!(q.codes.iter().all(|&b| b == 0));
        assert_eq!(dequantize(&q).data(), Matrix::zeros(2, 8).data());
    }

    #[test]
    fn rejects_bad_configurations() {
        let m = Matrix::zeros(2, 6);
        assert!(matches!(quantize_group(&m, 4, 4), Err(Error::Config(_))));
        assert!(matches!(quantize_group(&m, 3, 2), Err(Error::Config(_))));
        assert!(matches!(quantize_group(&m, 4, 0), Err(Error::Config(_))));
        let bad = Matrix::from_vec(1, 2, vec![f32::NAN, 0.0]).unwrap();
        assert!(matches!(quantize_group(&bad, 4, 2), Err(Error::Input(_))));
        assert!(matches!(hadamard_rotate(&Matrix::zeros(2, 6)), Err(Error::Config(_))));
        assert!(gemv(&Matrix::zeros(2, 4), &[0.0; 3]).is_err());
    }

    #[test]
    fn qgemv_is_bit_identical_to_dequantized_gemv() {
        let mut rng = SplitMix64::new(99);
        for bits in [4u8, 8u8] {
            for &(rows, cols, group) in &[(5usize, 16usize, 4usize), (3, 32, 32), (7, 8, 2)] {
                let m = random_matrix(&mut rng, rows, cols, 0.7);
                let q = quantize_group(&m, bits, group).unwrap();
                let x: Vec<f32> = (0..cols).map(|_| rng.normal() as f32).collect();
                let fast = qgemv(&q, &x).unwrap();
                let reference = gemv(&dequantize(&q), &x).unwrap();
                assert_eq!(fast, reference, "bits={bits} rows={rows} cols={cols}");
            }
        }
    }

    #[test]
    fn rotation_round_trips_and_preserves_products() {
        let mut rng = SplitMix64::new(3);
        let m = random_matrix(&mut rng, 6, 32, 1.0);
        let rotated = hadamard_rotate(&m).unwrap();
        let back = hadamard_rotate(&rotated).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1e-5, "round trip drifted: {a} vs {b}");
        }

        let x: Vec<f32> = (0..32).map(|_| rng.normal() as f32).collect();
        let xr = hadamard_rotate_vec(&x).unwrap();
        let direct = gemv(&m, &x).unwrap();
        let via_rotation = gemv(&rotated, &xr).unwrap();
        for (a, b) in direct.iter().zip(&via_rotation) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn rotated_quantization_tracks_the_unrotated_product() {
        // The rotated path must approximate the same linear map; with smooth
        // inputs rotation spreads outliers, so the error stays comparable.
        let mut rng = SplitMix64::new(17);
        let m = random_matrix(&mut rng, 8, 64, 0.5);
        let q = {
            let mut q = quantize_group(&hadamard_rotate(&m).unwrap(), 4, 16).unwrap();
            q.rotated = true;
            q
        };
        let x: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
        let exact = gemv(&m, &x).unwrap();
        let approx = qgemv(&q, &hadamard_rotate_vec(&x).unwrap()).unwrap();
        let scale: f32 = exact.iter().map(|v| v.abs()).fold(0.0, f32::max).max(1.0);
        for (a, b) in exact.iter().zip(&approx) {
            assert!((a - b).abs() < 0.2 * scale, "{a} vs {b}");
        }
    }

    proptest! {
        // Reconstruction bound, checked in f64: half a scale from rounding,
        // plus one f32 rounding of the scale amplified by the code.
        #[test]
        fn reconstruction_error_is_within_half_scale(
            seed in 0u64..1000,
            bits in prop::sample::select(vec![4u8, 8u8]),
            group in prop::sample::select(vec![2usize, 4, 8]),
        ) {
            let mut rng = SplitMix64::new(seed);
            let m = random_matrix(&mut rng, 4, 16, 1.5);
            let q = quantize_group(&m, bits, group).unwrap();
            for r in 0..4 {
                for c in 0..16 {
                    let scale = q.scale(r, c) as f64;
                    let bound = scale * (0.5 + 127.0 * 2f64.powi(-24));
                    let err = (m.get(r, c) as f64 - q.code(r, c) as f64 * scale).abs();
                    prop_assert!(err <= bound, "err {err} scale {scale}");
                }
            }
        }

        #[test]
        fn codes_stay_in_symmetric_range(seed in 0u64..500) {
            let mut rng = SplitMix64::new(seed);
            let m = random_matrix(&mut rng, 3, 8, 2.0);
            let q = quantize_group(&m, 4, 4).unwrap();
            for r in 0..3 {
                for c in 0..8 {
                    let code = q.code(r, c);
                    prop_assert!((-7..=7).contains(&code), "code {code} out of range");
                }
            }
        }
    }
}
