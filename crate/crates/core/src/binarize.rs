//! Static binarization schemes: absolute-mean, dual-dimension scaling,
//! partial (salient weights kept at 8 bits) and residual/split.
//!
//! All four produce a packed sign plane plus per-row or per-column scales.
//! Signs are taken of the row-centered weights where the scheme centers, and
//! the row offset is kept so the reconstruction `offset + α·sign` is the
//! L2-optimal single-scale fit of each row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{binary_gemm, PackedBitMatrix};
use crate::numcore::{matmul_nt, sign, Matrix};

/// Anything that behaves as a `n × m` linear map backed by binary weights.
pub trait BinaryLayer {
    fn out_features(&self) -> usize;
    fn in_features(&self) -> usize;

    /// Dense `n × m` matrix the layer represents.
    fn dense_reconstruction(&self) -> Matrix;

    /// `x · Wᵀ` for `x: k × m`.
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.in_features())?;
        matmul_nt(x, &self.dense_reconstruction())
    }
}

pub(crate) fn check_input(x: &Matrix, m: usize) -> Result<()> {
    if x.cols() != m {
        return Err(Error::shape(format!(
            "input has {} features, layer expects {m}",
            x.cols()
        )));
    }
    Ok(())
}

fn check_nonempty(w: &Matrix) -> Result<()> {
    if w.rows() == 0 || w.cols() == 0 {
        return Err(Error::shape(format!(
            "cannot binarize an empty {}x{} matrix",
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// Forward pass of any static scheme.
pub fn static_forward(layer: &impl BinaryLayer, x: &Matrix) -> Result<Matrix> {
    layer.forward(x)
}

/// Squared Frobenius distance between a layer and the weights it approximates.
pub fn reconstruction_error(layer: &impl BinaryLayer, w: &Matrix) -> f64 {
    layer
        .dense_reconstruction()
        .sub(w)
        .map(|d| d.sum_sq())
        .unwrap_or(f64::INFINITY)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticBinaryLayer {
    pub signs: PackedBitMatrix,
    pub alpha: Vec<f64>,
    pub offset: Vec<f64>,
}

impl BinaryLayer for StaticBinaryLayer {
    fn out_features(&self) -> usize {
        self.signs.rows()
    }

    fn in_features(&self) -> usize {
        self.signs.cols()
    }

    fn dense_reconstruction(&self) -> Matrix {
        let mut out = self.signs.unpack();
        for i in 0..out.rows() {
            let (a, mu) = (self.alpha[i], self.offset[i]);
            out.row_mut(i).iter_mut().for_each(|s| *s = mu + a * *s);
        }
        out
    }
}

/// Absolute-mean binarization of each row around its mean.
pub fn binarize_absmean(w: &Matrix) -> Result<StaticBinaryLayer> {
    check_nonempty(w)?;
    let (n, m) = w.shape();
    let mut signs = PackedBitMatrix::zeros(n, m);
    let mut alpha = Vec::with_capacity(n);
    let mut offset = Vec::with_capacity(n);
    for i in 0..n {
        let row = w.row(i);
        let mu = row.iter().sum::<f64>() / m as f64;
        let mut abs_sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let d = v - mu;
            signs.set(i, j, d >= 0.0);
            abs_sum += d.abs();
        }
        alpha.push(abs_sum / m as f64);
        offset.push(mu);
    }
    Ok(StaticBinaryLayer {
        signs,
        alpha,
        offset,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualScaleBinaryLayer {
    pub signs: PackedBitMatrix,
    pub s_in: Vec<f64>,
    pub s_out: Vec<f64>,
}

impl BinaryLayer for DualScaleBinaryLayer {
    fn out_features(&self) -> usize {
        self.signs.rows()
    }

    fn in_features(&self) -> usize {
        self.signs.cols()
    }

    fn dense_reconstruction(&self) -> Matrix {
        let mut out = self.signs.unpack();
        for i in 0..out.rows() {
            let so = self.s_out[i];
            for (s, si) in out.row_mut(i).iter_mut().zip(&self.s_in) {
                *s *= so * si;
            }
        }
        out
    }

    /// Factored form `((X ⊙ s_in) · Bᵀ) ⊙ s_out`; no dense weight is built.
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_input(x, self.in_features())?;
        let z = x.scale_cols(&self.s_in)?;
        binary_gemm(&self.signs, &z)?.scale_cols(&self.s_out)
    }
}

/// Rank-1 alternating least squares on `|w|`; returns `(s_in, s_out)` and the
/// objective `‖|w| − s_out·s_inᵀ‖²_F` after each sweep.
pub(crate) fn als_rank1(abs_w: &Matrix, iters: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, m) = abs_w.shape();
    let mut s_in = vec![1.0; m];
    let mut s_out = vec![0.0; n];
    let mut objectives = Vec::with_capacity(iters);
    for _ in 0..iters {
        let denom: f64 = s_in.iter().map(|v| v * v).sum();
        for (i, so) in s_out.iter_mut().enumerate() {
            let num: f64 = abs_w.row(i).iter().zip(&s_in).map(|(a, b)| a * b).sum();
            *so = if denom > 0.0 { num / denom } else { 0.0 };
        }
        let denom: f64 = s_out.iter().map(|v| v * v).sum();
        let mut num = vec![0.0; m];
        for (i, &so) in s_out.iter().enumerate() {
            for (acc, a) in num.iter_mut().zip(abs_w.row(i)) {
                *acc += a * so;
            }
        }
        for (si, nu) in s_in.iter_mut().zip(num) {
            *si = if denom > 0.0 { nu / denom } else { 0.0 };
        }
        objectives.push(rank1_objective(abs_w, &s_in, &s_out));
    }
    (s_in, s_out, objectives)
}

pub(crate) fn rank1_objective(abs_w: &Matrix, s_in: &[f64], s_out: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &so) in s_out.iter().enumerate() {
        for (a, si) in abs_w.row(i).iter().zip(s_in) {
            let d = a - so * si;
            total += d * d;
        }
    }
    total
}

/// Dual-dimension scaling: `signs = Sign(w)`, and `(s_in, s_out)` the rank-1
/// least-squares fit of `|w|` after `iters` alternating sweeps.
pub fn fit_dual_scales(w: &Matrix, iters: usize) -> Result<DualScaleBinaryLayer> {
    fit_dual_scales_traced(w, iters).map(|(layer, _)| layer)
}

/// As [`fit_dual_scales`], also returning the objective after every sweep.
pub fn fit_dual_scales_traced(w: &Matrix, iters: usize) -> Result<(DualScaleBinaryLayer, Vec<f64>)> {
    check_nonempty(w)?;
    if iters == 0 {
        return Err(Error::param("fit_dual_scales needs at least one sweep"));
    }
    let abs_w = w.map(f64::abs);
    let (s_in, s_out, objectives) = als_rank1(&abs_w, iters);
    Ok((
        DualScaleBinaryLayer {
            signs: PackedBitMatrix::sign_of(w),
            s_in,
            s_out,
        },
        objectives,
    ))
}

/// Partial binarization: the largest-magnitude fraction of weights is kept on
/// a per-row 8-bit affine grid, the rest is binarized around the mean of the
/// non-salient entries of its row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialBinaryLayer {
    pub signs: PackedBitMatrix,
    pub alpha: Vec<f64>,
    pub offset: Vec<f64>,
    pub salient_mask: PackedBitMatrix,
    /// 8-bit codes of salient entries in row-major order of `salient_mask`.
    pub salient_codes: Vec<u8>,
    pub salient_scale: Vec<f64>,
    pub salient_zero: Vec<f64>,
    pub salient_ratio: f64,
}

impl PartialBinaryLayer {
    pub fn salient_coordinates(&self) -> Vec<(usize, usize)> {
        self.salient_mask.ones()
    }

    pub fn salient_values(&self) -> Vec<f64> {
        self.salient_coordinates()
            .iter()
            .zip(&self.salient_codes)
            .map(|(&(i, _), &c)| self.salient_zero[i] + c as f64 * self.salient_scale[i])
            .collect()
    }
}

impl BinaryLayer for PartialBinaryLayer {
    fn out_features(&self) -> usize {
        self.signs.rows()
    }

    fn in_features(&self) -> usize {
        self.signs.cols()
    }

    fn dense_reconstruction(&self) -> Matrix {
        let mut out = self.signs.unpack();
        for i in 0..out.rows() {
            let (a, mu) = (self.alpha[i], self.offset[i]);
            out.row_mut(i).iter_mut().for_each(|s| *s = mu + a * *s);
        }
        for ((i, j), v) in self.salient_coordinates().into_iter().zip(self.salient_values()) {
            out.set(i, j, v);
        }
        out
    }
}

/// Flat indices of the `k` largest magnitudes; ties go to the lower index.
fn top_magnitudes(w: &Matrix, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.data().len()).collect();
    let data = w.data();
    let by_magnitude = |a: &usize, b: &usize| {
        data[*b]
            .abs()
            .total_cmp(&data[*a].abs())
            .then_with(|| a.cmp(b))
    };
    if k > 0 && k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_magnitude);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn partial_binarize(w: &Matrix, salient_ratio: f64) -> Result<PartialBinaryLayer> {
    check_nonempty(w)?;
    if !(0.0..1.0).contains(&salient_ratio) {
        return Err(Error::param(format!(
            "salient ratio {salient_ratio} outside [0, 1)"
        )));
    }
    let (n, m) = w.shape();
    let k = (salient_ratio * (n * m) as f64).round() as usize;
    let mut salient_mask = PackedBitMatrix::zeros(n, m);
    for flat in top_magnitudes(w, k) {
        salient_mask.set(flat / m, flat % m, true);
    }

    let mut signs = PackedBitMatrix::zeros(n, m);
    let mut alpha = vec![0.0; n];
    let mut offset = vec![0.0; n];
    let mut salient_scale = vec![0.0; n];
    let mut salient_zero = vec![0.0; n];
    let mut salient_codes = Vec::with_capacity(k);
    for i in 0..n {
        let row = w.row(i);
        let (mut sum, mut count) = (0.0, 0usize);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (j, &v) in row.iter().enumerate() {
            if salient_mask.get(i, j) {
                lo = lo.min(v);
                hi = hi.max(v);
            } else {
                sum += v;
                count += 1;
            }
        }
        let mu = if count > 0 { sum / count as f64 } else { 0.0 };
        let mut abs_sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let d = v - mu;
            signs.set(i, j, d >= 0.0);
            if !salient_mask.get(i, j) {
                abs_sum += d.abs();
            }
        }
        offset[i] = mu;
        alpha[i] = if count > 0 { abs_sum / count as f64 } else { 0.0 };

        if lo.is_finite() {
            let scale = (hi - lo) / 255.0;
            salient_zero[i] = lo;
            salient_scale[i] = scale;
            for (j, &v) in row.iter().enumerate() {
                if salient_mask.get(i, j) {
                    let code = if scale > 0.0 {
                        ((v - lo) / scale).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    };
                    salient_codes.push(code);
                }
            }
        }
    }
    Ok(PartialBinaryLayer {
        signs,
        alpha,
        offset,
        salient_mask,
        salient_codes,
        salient_scale,
        salient_zero,
        salient_ratio,
    })
}

/// Average storage bits per weight when a fraction `ratio` of weights is kept
/// at `salient_bits` and the rest at one bit (index overhead excluded).
pub fn partial_average_bits(ratio: f64, salient_bits: f64) -> f64 {
    (1.0 - ratio) + ratio * salient_bits
}

/// Residual binarization: each row splits into a concentrated group (close
/// to the mean) and a sparse group (far from it), each with its own scale.
/// Sparse entries carry a second sign bit binarizing what the first pass
/// left over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBinaryLayer {
    pub signs: PackedBitMatrix,
    /// Set bit = sparse group; these are also the salient entries.
    pub group_mask: PackedBitMatrix,
    pub offset: Vec<f64>,
    pub alpha_concentrated: Vec<f64>,
    pub alpha_sparse: Vec<f64>,
    /// Bits only at `group_mask` positions; zero elsewhere.
    pub residual_signs: PackedBitMatrix,
    pub residual_alpha: Vec<f64>,
}

impl ResidualBinaryLayer {
    pub fn salient_coordinates(&self) -> Vec<(usize, usize)> {
        self.group_mask.ones()
    }
}

impl BinaryLayer for ResidualBinaryLayer {
    fn out_features(&self) -> usize {
        self.signs.rows()
    }

    fn in_features(&self) -> usize {
        self.signs.cols()
    }

    fn dense_reconstruction(&self) -> Matrix {
        let (n, m) = (self.signs.rows(), self.signs.cols());
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                let s = self.signs.sign(i, j);
                let v = if self.group_mask.get(i, j) {
                    self.offset[i]
                        + self.alpha_sparse[i] * s
                        + self.residual_alpha[i] * self.residual_signs.sign(i, j)
                } else {
                    self.offset[i] + self.alpha_concentrated[i] * s
                };
                out.set(i, j, v);
            }
        }
        out
    }
}

/// Chooses how many of the largest `|d|` values (sorted ascending in `a`)
/// form the sparse group, minimizing two-group squared error. Ties in value
/// never straddle the split. Ties in error keep the smaller sparse group.
fn best_split(a_sorted: &[f64]) -> usize {
    let m = a_sorted.len();
    let mut prefix = vec![0.0; m + 1];
    let mut prefix_sq = vec![0.0; m + 1];
    for (t, &v) in a_sorted.iter().enumerate() {
        prefix[t + 1] = prefix[t] + v;
        prefix_sq[t + 1] = prefix_sq[t] + v * v;
    }
    let sse = |lo: usize, hi: usize| -> f64 {
        let cnt = (hi - lo) as f64;
        if cnt == 0.0 {
            return 0.0;
        }
        let s = prefix[hi] - prefix[lo];
        let sq = prefix_sq[hi] - prefix_sq[lo];
        (sq - s * s / cnt).max(0.0)
    };
    let mut best_p = m;
    let mut best = sse(0, m);
    for p in (1..m).rev() {
        if a_sorted[p - 1] == a_sorted[p] {
            continue;
        }
        let e = sse(0, p) + sse(p, m);
        if e < best {
            best = e;
            best_p = p;
        }
    }
    best_p
}

pub fn residual_binarize(w: &Matrix) -> Result<ResidualBinaryLayer> {
    check_nonempty(w)?;
    let (n, m) = w.shape();
    let mut signs = PackedBitMatrix::zeros(n, m);
    let mut group_mask = PackedBitMatrix::zeros(n, m);
    let mut residual_signs = PackedBitMatrix::zeros(n, m);
    let mut offset = vec![0.0; n];
    let mut alpha_concentrated = vec![0.0; n];
    let mut alpha_sparse = vec![0.0; n];
    let mut residual_alpha = vec![0.0; n];

    for i in 0..n {
        let row = w.row(i);
        let mu = row.iter().sum::<f64>() / m as f64;
        let d: Vec<f64> = row.iter().map(|v| v - mu).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()).then(a.cmp(&b)));
        let a_sorted: Vec<f64> = order.iter().map(|&j| d[j].abs()).collect();

        let mut p = best_split(&a_sorted);
        let absmean = a_sorted.iter().sum::<f64>() / m as f64;
        let split_error = |p: usize| -> (f64, f64, f64) {
            let mean = |s: &[f64]| {
                if s.is_empty() {
                    0.0
                } else {
                    s.iter().sum::<f64>() / s.len() as f64
                }
            };
            let (ac, asp) = (mean(&a_sorted[..p]), mean(&a_sorted[p..]));
            let err = a_sorted[..p].iter().map(|v| (v - ac).powi(2)).sum::<f64>()
                + a_sorted[p..].iter().map(|v| (v - asp).powi(2)).sum::<f64>();
            (ac, asp, err)
        };
        let (mut ac, mut asp, err) = split_error(p);
        let single: f64 = a_sorted.iter().map(|v| (v - absmean).powi(2)).sum();
        if err > single {
            p = m;
            (ac, asp) = (absmean, 0.0);
        }

        offset[i] = mu;
        alpha_concentrated[i] = ac;
        alpha_sparse[i] = asp;
        for (j, &dj) in d.iter().enumerate() {
            signs.set(i, j, dj >= 0.0);
        }
        let sparse = &order[p..];
        let mut residuals = Vec::with_capacity(sparse.len());
        for &j in sparse {
            group_mask.set(i, j, true);
            let r = d[j] - asp * sign(d[j]);
            residual_signs.set(i, j, r >= 0.0);
            residuals.push(r.abs());
        }
        residual_alpha[i] = if residuals.is_empty() {
            0.0
        } else {
            residuals.iter().sum::<f64>() / residuals.len() as f64
        };
    }
    Ok(ResidualBinaryLayer {
        signs,
        group_mask,
        offset,
        alpha_concentrated,
        alpha_sparse,
        residual_signs,
        residual_alpha,
    })
}
