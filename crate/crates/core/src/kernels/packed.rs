use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Row-major bit matrix packed into 64-bit words.
///
/// Each row occupies `⌈cols / 64⌉` words. Bit `j` of word `w` in a row holds
/// column `64·w + j` (little-endian bit order). A set bit means `+1` when the
/// matrix stores signs, or membership when it stores a mask. Padding bits at
/// the end of each row are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PackedBitMatrix {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
}

#[inline]
pub fn words_per_row(cols: usize) -> usize {
    cols.div_ceil(64)
}

impl PackedBitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PackedBitMatrix {
            rows,
            cols,
            words: vec![0; rows * words_per_row(cols)],
        }
    }

    /// Packs a matrix whose entries are exactly `-1` or `+1`.
    pub fn pack(signs: &Matrix) -> Result<Self> {
        let mut out = Self::zeros(signs.rows(), signs.cols());
        for i in 0..signs.rows() {
            for (j, &v) in signs.row(i).iter().enumerate() {
                if v == 1.0 {
                    out.set(i, j, true);
                } else if v != -1.0 {
                    return Err(Error::Value(format!(
                        "entry ({i}, {j}) = {v} is not a sign"
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Packs `Sign(w)` elementwise, with `Sign(0) = +1`.
    pub fn sign_of(w: &Matrix) -> Self {
        Self::from_fn(w.rows(), w.cols(), |i, j| w.get(i, j) >= 0.0)
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let wpr = words_per_row(cols);
        let mut words = vec![0u64; rows * wpr];
        for i in 0..rows {
            for j in 0..cols {
                if f(i, j) {
                    words[i * wpr + j / 64] |= 1 << (j % 64);
                }
            }
        }
        PackedBitMatrix { rows, cols, words }
    }

    /// Adopts a raw word array, validating its length and zero padding.
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<Self> {
        let wpr = words_per_row(cols);
        if words.len() != rows * wpr {
            return Err(Error::shape(format!(
                "{rows}x{cols} bit matrix needs {} words, got {}",
                rows * wpr,
                words.len()
            )));
        }
        let tail = cols % 64;
        if tail != 0 {
            let pad_mask = !((1u64 << tail) - 1);
            for i in 0..rows {
                if words[i * wpr + wpr - 1] & pad_mask != 0 {
                    return Err(Error::Value(format!("row {i} has non-zero padding bits")));
                }
            }
        }
        Ok(PackedBitMatrix { rows, cols, words })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn words_per_row(&self) -> usize {
        words_per_row(self.cols)
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[i * wpr..(i + 1) * wpr]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        let wpr = self.words_per_row();
        (self.words[i * wpr + j / 64] >> (j % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, bit: bool) {
        let wpr = self.words_per_row();
        let w = &mut self.words[i * wpr + j / 64];
        if bit {
            *w |= 1 << (j % 64);
        } else {
            *w &= !(1 << (j % 64));
        }
    }

    /// `+1.0` for a set bit, `-1.0` otherwise.
    #[inline]
    pub fn sign(&self, i: usize, j: usize) -> f64 {
        if self.get(i, j) {
            1.0
        } else {
            -1.0
        }
    }

    /// Dense ±1 matrix.
    pub fn unpack(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let row = out.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = if self.get(i, j) { 1.0 } else { -1.0 };
            }
        }
        out
    }

    /// Dense 0/1 matrix, for masks.
    pub fn to_indicator(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.get(i, j) {
                    out.set(i, j, 1.0);
                }
            }
        }
        out
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Coordinates of set bits in row-major order.
    pub fn ones(&self) -> Vec<(usize, usize)> {
        let wpr = self.words_per_row();
        let mut out = Vec::with_capacity(self.count_ones());
        for i in 0..self.rows {
            for (w, &word) in self.words[i * wpr..(i + 1) * wpr].iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let b = bits.trailing_zeros() as usize;
                    out.push((i, w * 64 + b));
                    bits &= bits - 1;
                }
            }
        }
        out
    }

    pub fn and(&self, other: &PackedBitMatrix) -> Result<PackedBitMatrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape("bitwise and of differently shaped bit matrices"));
        }
        Ok(PackedBitMatrix {
            rows: self.rows,
            cols: self.cols,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        })
    }
}
