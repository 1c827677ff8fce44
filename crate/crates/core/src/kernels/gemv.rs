//! Binary GEMV by byte lookup tables.
//!
//! Activations stay in floating point. For every group of eight input
//! columns a 256-entry table holds the signed sum `Σ ±x` for each possible
//! byte of sign bits, so one row costs one table lookup per byte of packed
//! weights instead of eight multiply-adds.

use std::ops::{Add, AddAssign, Mul, Sub};

use super::packed::PackedBitMatrix;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub trait Real:
    Copy + Default + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

#[inline]
fn group_inputs<T: Real>(x: &[T], g: usize) -> [T; 8] {
    let mut xs = [T::default(); 8];
    let base = g * 8;
    for (k, v) in xs.iter_mut().enumerate() {
        if let Some(&xv) = x.get(base + k) {
            *v = xv;
        }
    }
    xs
}

/// Table of signed sums: entry `256·g + b` is `Σ_k (bit k of b ? +x : -x)`
/// over the eight columns of group `g`. Columns past `x.len()` count as zero,
/// so padding bits never contribute.
pub fn build_signed_lut<T: Real>(x: &[T], groups: usize, lut: &mut Vec<T>) {
    lut.clear();
    lut.resize(groups * 256, T::default());
    for g in 0..groups {
        let xs = group_inputs(x, g);
        let table = &mut lut[g * 256..(g + 1) * 256];
        let mut neg = T::default();
        for &v in &xs {
            neg = neg - v;
        }
        table[0] = neg;
        for b in 1..256usize {
            let k = b.trailing_zeros() as usize;
            let twice = xs[k] + xs[k];
            table[b] = table[b & (b - 1)] + twice;
        }
    }
}

/// Sums `lut[256·g + byte_g]` over the bytes of one packed row.
#[inline]
pub fn lut_row_dot<T: Real>(words: &[u64], lut: &[T]) -> T {
    let mut acc = [T::default(); 4];
    for (w, &word) in words.iter().enumerate() {
        let bytes = word.to_le_bytes();
        let base = w * 8 * 256;
        acc[0] += lut[base + bytes[0] as usize];
        acc[1] += lut[base + 256 + bytes[1] as usize];
        acc[2] += lut[base + 512 + bytes[2] as usize];
        acc[3] += lut[base + 768 + bytes[3] as usize];
        acc[0] += lut[base + 1024 + bytes[4] as usize];
        acc[1] += lut[base + 1280 + bytes[5] as usize];
        acc[2] += lut[base + 1536 + bytes[6] as usize];
        acc[3] += lut[base + 1792 + bytes[7] as usize];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Reusable table storage so repeated GEMVs do not reallocate.
#[derive(Debug, Default, Clone)]
pub struct LutScratch<T> {
    pub(crate) signed: Vec<T>,
}

/// `y = B·x` into a caller-provided buffer.
pub fn binary_gemv_into<T: Real>(
    b: &PackedBitMatrix,
    x: &[T],
    scratch: &mut LutScratch<T>,
    y: &mut [T],
) -> Result<()> {
    if x.len() != b.cols() || y.len() != b.rows() {
        return Err(Error::shape(format!(
            "binary gemv of {}x{} with x[{}] into y[{}]",
            b.rows(),
            b.cols(),
            x.len(),
            y.len()
        )));
    }
    build_signed_lut(x, b.words_per_row() * 8, &mut scratch.signed);
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = lut_row_dot(b.row_words(i), &scratch.signed);
    }
    Ok(())
}

/// `y[i] = Σ_j s_ij · x_j` for a packed sign matrix, in single precision.
pub fn binary_gemv(b: &PackedBitMatrix, x: &[f32]) -> Result<Vec<f32>> {
    let mut y = vec![0.0; b.rows()];
    binary_gemv_into(b, x, &mut LutScratch::default(), &mut y)?;
    Ok(y)
}

/// `X · Bᵀ` for a `k × m` activation matrix, one packed GEMV per row, in
/// double precision.
pub fn binary_gemm(b: &PackedBitMatrix, x: &Matrix) -> Result<Matrix> {
    if x.cols() != b.cols() {
        return Err(Error::shape(format!(
            "binary gemm of {}x{} activations with {}x{} signs",
            x.rows(),
            x.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), b.rows());
    let mut scratch = LutScratch::<f64>::default();
    for t in 0..x.rows() {
        binary_gemv_into(b, x.row(t), &mut scratch, out.row_mut(t))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{matmul_nt, RngSeed};
    use rand::Rng;

    fn random_signs(n: usize, m: usize, seed: u64) -> Matrix {
        let mut rng = RngSeed(seed).rng();
        let mut s = Matrix::zeros(n, m);
        for v in s.data_mut() {
            *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        s
    }

    fn dense_gemv(s: &Matrix, x: &[f64]) -> Vec<f64> {
        s.row_iter()
            .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    #[test]
    fn all_positive_row_sums_inputs() {
        let b = PackedBitMatrix::pack(&Matrix::filled(2, 5, 1.0)).unwrap();
        let y = binary_gemv(&b, &[1.0, 2.0, 3.0, 4.0, 5.5]).unwrap();
        assert_eq!(y, vec![15.5, 15.5]);
    }

    #[test]
    fn alternating_signs_cancel() {
        let b = PackedBitMatrix::pack(&Matrix::from_rows(&[[1.0, -1.0, 1.0, -1.0]]).unwrap())
            .unwrap();
        assert_eq!(binary_gemv(&b, &[1.0; 4]).unwrap(), vec![0.0]);
    }

    #[test]
    fn length_mismatch() {
        let b = PackedBitMatrix::zeros(2, 3);
        assert!(matches!(binary_gemv(&b, &[1.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn padding_columns_match_dense() {
        let s = random_signs(5, 70, 1);
        let b = PackedBitMatrix::pack(&s).unwrap();
        let mut rng = RngSeed(2).rng();
        let x: Vec<f64> = (0..70).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let want = dense_gemv(&s, &x);
        let got = binary_gemv(&b, &xf).unwrap();
        let scale: f64 = x.iter().map(|v| v.abs()).sum();
        for (g, w) in got.iter().zip(&want) {
            assert!((*g as f64 - w).abs() <= 1e-5 * scale);
        }
    }

    #[test]
    fn gemm_matches_dense_in_double() {
        let s = random_signs(9, 130, 4);
        let b = PackedBitMatrix::pack(&s).unwrap();
        let mut rng = RngSeed(5).rng();
        let x = Matrix::random_normal(3, 130, 1.0, &mut rng);
        let got = binary_gemm(&b, &x).unwrap();
        let want = matmul_nt(&x, &s).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-10 * want.max_abs().max(1.0));
    }
}
