//! Single-precision batch-1 kernels for every scheme compared in the latency
//! benchmark. All binary kernels run on the byte-LUT GEMV in [`super::gemv`].

use super::gemv::{build_signed_lut, lut_row_dot, LutScratch};
use super::packed::PackedBitMatrix;
use crate::binarize::{DualScaleBinaryLayer, PartialBinaryLayer, ResidualBinaryLayer};
use crate::error::{Error, Result};
use crate::mos::MoSLinear;

fn check_io(n: usize, m: usize, x: &[f32], y: &[f32]) -> Result<()> {
    if x.len() != m || y.len() != n {
        return Err(Error::shape(format!(
            "{n}x{m} kernel called with x[{}] and y[{}]",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Row-major dense `n × m` GEMV.
#[derive(Debug, Clone)]
pub struct DenseGemvKernel {
    n: usize,
    m: usize,
    weights: Vec<f32>,
}

impl DenseGemvKernel {
    pub fn new(n: usize, m: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != n * m {
            return Err(Error::shape("dense kernel weight length"));
        }
        Ok(DenseGemvKernel { n, m, weights })
    }

    pub fn gemv_into(&mut self, x: &[f32], y: &mut [f32]) -> Result<()> {
        check_io(self.n, self.m, x, y)?;
        for (yi, row) in y.iter_mut().zip(self.weights.chunks_exact(self.m)) {
            let mut acc = [0f32; 8];
            let mut rc = row.chunks_exact(8);
            let mut xc = x.chunks_exact(8);
            for (r8, x8) in (&mut rc).zip(&mut xc) {
                for k in 0..8 {
                    acc[k] += r8[k] * x8[k];
                }
            }
            let mut tail = 0f32;
            for (a, b) in rc.remainder().iter().zip(xc.remainder()) {
                tail += a * b;
            }
            *yi = ((acc[0] + acc[1]) + (acc[2] + acc[3]))
                + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
                + tail;
        }
        Ok(())
    }
}

/// `y = [(x ⊙ s_in) · Bᵀ] ⊙ s_out` with static scales.
#[derive(Debug, Clone)]
pub struct StaticScaleGemvKernel {
    signs: PackedBitMatrix,
    s_in: Vec<f32>,
    s_out: Vec<f32>,
    z: Vec<f32>,
    scratch: LutScratch<f32>,
}

impl StaticScaleGemvKernel {
    pub fn new(signs: PackedBitMatrix, s_in: Vec<f32>, s_out: Vec<f32>) -> Result<Self> {
        if s_in.len() != signs.cols() || s_out.len() != signs.rows() {
            return Err(Error::shape("static scale lengths do not match signs"));
        }
        Ok(StaticScaleGemvKernel {
            z: vec![0.0; signs.cols()],
            signs,
            s_in,
            s_out,
            scratch: LutScratch::default(),
        })
    }

    pub fn from_dual(layer: &DualScaleBinaryLayer) -> Self {
        Self::new(layer.signs.clone(), to_f32(&layer.s_in), to_f32(&layer.s_out))
            .expect("dual layer shapes are consistent")
    }

    pub fn gemv_into(&mut self, x: &[f32], y: &mut [f32]) -> Result<()> {
        check_io(self.signs.rows(), self.signs.cols(), x, y)?;
        for ((z, &xj), &s) in self.z.iter_mut().zip(x).zip(&self.s_in) {
            *z = xj * s;
        }
        build_signed_lut(&self.z, self.signs.words_per_row() * 8, &mut self.scratch.signed);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = super::gemv::lut_row_dot(self.signs.row_words(i), &self.scratch.signed)
                * self.s_out[i];
        }
        Ok(())
    }
}

/// Router, expert mixing, pre-scale, binary GEMV and post-scale in one pass.
#[derive(Debug, Clone)]
pub struct MosGemvKernel {
    signs: PackedBitMatrix,
    experts: usize,
    /// `m × e`, row-major
    router: Vec<f32>,
    /// `e × m`
    s_in: Vec<f32>,
    /// `e × n`
    s_out: Vec<f32>,
    gates: Vec<f32>,
    z: Vec<f32>,
    scratch: LutScratch<f32>,
}

impl MosGemvKernel {
    pub fn new(layer: &MoSLinear) -> Self {
        MosGemvKernel {
            signs: layer.signs.clone(),
            experts: layer.num_experts(),
            router: to_f32(layer.router_w.data()),
            s_in: to_f32(layer.s_in_experts.data()),
            s_out: to_f32(layer.s_out_experts.data()),
            gates: vec![0.0; layer.num_experts()],
            z: vec![0.0; layer.in_features()],
            scratch: LutScratch::default(),
        }
    }

    /// Gating scores of the last call.
    pub fn last_gates(&self) -> &[f32] {
        &self.gates
    }

    pub fn gemv_into(&mut self, x: &[f32], y: &mut [f32]) -> Result<()> {
        let (n, m, e) = (self.signs.rows(), self.signs.cols(), self.experts);
        check_io(n, m, x, y)?;

        let g = &mut self.gates;
        g.iter_mut().for_each(|v| *v = 0.0);
        for (&xj, wr) in x.iter().zip(self.router.chunks_exact(e)) {
            for (gk, &w) in g.iter_mut().zip(wr) {
                *gk += xj * w;
            }
        }
        let max = g.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0f32;
        for v in g.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        g.iter_mut().for_each(|v| *v /= total);

        self.z.iter_mut().for_each(|v| *v = 0.0);
        for (&gk, expert) in g.iter().zip(self.s_in.chunks_exact(m)) {
            for (z, &s) in self.z.iter_mut().zip(expert) {
                *z += gk * s;
            }
        }
        for (z, &xj) in self.z.iter_mut().zip(x) {
            *z = xj * *z;
        }

        build_signed_lut(&self.z, self.signs.words_per_row() * 8, &mut self.scratch.signed);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s_out = 0f32;
            for (k, &gk) in g.iter().enumerate() {
                s_out += gk * self.s_out[k * n + i];
            }
            *yi = super::gemv::lut_row_dot(self.signs.row_words(i), &self.scratch.signed) * s_out;
        }
        Ok(())
    }
}

/// Fused mixture-of-scales GEMV for a single token.
pub fn fused_mos_gemv(x: &[f32], layer: &MoSLinear) -> Result<Vec<f32>> {
    let mut y = vec![0.0; layer.out_features()];
    MosGemvKernel::new(layer).gemv_into(x, &mut y)?;
    Ok(y)
}

/// Binary GEMV plus a sparse scatter of 8-bit salient corrections.
#[derive(Debug, Clone)]
pub struct PartialGemvKernel {
    signs: PackedBitMatrix,
    alpha: Vec<f32>,
    offset: Vec<f32>,
    rows: Vec<u32>,
    cols: Vec<u32>,
    codes: Vec<u8>,
    /// `−(offset + α·sign)` at each salient coordinate.
    base: Vec<f32>,
    scale: Vec<f32>,
    zero: Vec<f32>,
    scratch: LutScratch<f32>,
}

impl PartialGemvKernel {
    pub fn from_layer(layer: &PartialBinaryLayer) -> Self {
        let coords = layer.salient_coordinates();
        let base = coords
            .iter()
            .map(|&(i, j)| -(layer.offset[i] + layer.alpha[i] * layer.signs.sign(i, j)) as f32)
            .collect();
        PartialGemvKernel {
            signs: layer.signs.clone(),
            alpha: to_f32(&layer.alpha),
            offset: to_f32(&layer.offset),
            rows: coords.iter().map(|c| c.0 as u32).collect(),
            cols: coords.iter().map(|c| c.1 as u32).collect(),
            codes: layer.salient_codes.clone(),
            base,
            scale: to_f32(&layer.salient_scale),
            zero: to_f32(&layer.salient_zero),
            scratch: LutScratch::default(),
        }
    }

    pub fn gemv_into(&mut self, x: &[f32], y: &mut [f32]) -> Result<()> {
        check_io(self.signs.rows(), self.signs.cols(), x, y)?;
        let total: f32 = x.iter().sum();
        build_signed_lut(x, self.signs.words_per_row() * 8, &mut self.scratch.signed);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.alpha[i] * super::gemv::lut_row_dot(self.signs.row_words(i), &self.scratch.signed)
                + self.offset[i] * total;
        }
        for t in 0..self.codes.len() {
            let (r, c) = (self.rows[t] as usize, self.cols[t] as usize);
            let v = self.zero[r] + self.codes[t] as f32 * self.scale[r] + self.base[t];
            y[r] += v * x[c];
        }
        Ok(())
    }
}

/// Two binary planes plus a group mask: base signs with per-group scales and
/// a residual sign plane on the sparse group.
///
/// The base plane goes through the signed table. The sparse group is
/// expanded once into per-row column lists whose top two bits carry the base
/// and residual signs, so the hot loop is a branch-free gather.
#[derive(Debug, Clone)]
pub struct ResidualGemvKernel {
    signs: PackedBitMatrix,
    row_start: Vec<usize>,
    entries: Vec<u32>,
    offset: Vec<f32>,
    alpha_c: Vec<f32>,
    alpha_s: Vec<f32>,
    rho: Vec<f32>,
    scratch: LutScratch<f32>,
}

const BASE_BIT: u32 = 1 << 31;
const RESID_BIT: u32 = 1 << 30;

impl ResidualGemvKernel {
    fn new(
        signs: PackedBitMatrix,
        group_mask: &PackedBitMatrix,
        residual_signs: &PackedBitMatrix,
        offset: Vec<f32>,
        alpha_c: Vec<f32>,
        alpha_s: Vec<f32>,
        rho: Vec<f32>,
    ) -> Self {
        assert!(signs.cols() < RESID_BIT as usize, "column index collides with sign bits");
        let mut row_start = Vec::with_capacity(signs.rows() + 1);
        let mut entries = Vec::new();
        row_start.push(0);
        for i in 0..signs.rows() {
            let (s, m, r) = (signs.row_words(i), group_mask.row_words(i), residual_signs.row_words(i));
            for w in 0..m.len() {
                let mut bits = m[w];
                while bits != 0 {
                    let k = bits.trailing_zeros();
                    let mut e = (w * 64) as u32 + k;
                    if (s[w] >> k) & 1 == 1 {
                        e |= BASE_BIT;
                    }
                    if (r[w] >> k) & 1 == 1 {
                        e |= RESID_BIT;
                    }
                    entries.push(e);
                    bits &= bits - 1;
                }
            }
            row_start.push(entries.len());
        }
        ResidualGemvKernel {
            signs,
            row_start,
            entries,
            offset,
            alpha_c,
            alpha_s,
            rho,
            scratch: LutScratch::default(),
        }
    }

    pub fn from_layer(layer: &ResidualBinaryLayer) -> Self {
        Self::new(
            layer.signs.clone(),
            &layer.group_mask,
            &layer.residual_signs,
            to_f32(&layer.offset),
            to_f32(&layer.alpha_concentrated),
            to_f32(&layer.alpha_sparse),
            to_f32(&layer.residual_alpha),
        )
    }

    pub fn gemv_into(&mut self, x: &[f32], y: &mut [f32]) -> Result<()> {
        check_io(self.signs.rows(), self.signs.cols(), x, y)?;
        let total: f32 = x.iter().sum();
        build_signed_lut(x, self.signs.words_per_row() * 8, &mut self.scratch.signed);
        for (i, yi) in y.iter_mut().enumerate() {
            let all = lut_row_dot(self.signs.row_words(i), &self.scratch.signed);
            let (mut sparse, mut resid) = (0f32, 0f32);
            for &e in &self.entries[self.row_start[i]..self.row_start[i + 1]] {
                let xk = x[(e & (RESID_BIT - 1)) as usize].to_bits();
                // clear sign bit flips x
                sparse += f32::from_bits(xk ^ (!e & BASE_BIT));
                resid += f32::from_bits(xk ^ ((!e & RESID_BIT) << 1));
            }
            *yi = self.offset[i] * total
                + self.alpha_c[i] * (all - sparse)
                + self.alpha_s[i] * sparse
                + self.rho[i] * resid;
        }
        Ok(())
    }
}

/// Random instances at benchmark scale, built without a dense weight matrix.
pub(crate) mod synthetic {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub fn signs(n: usize, m: usize, rng: &mut ChaCha8Rng) -> PackedBitMatrix {
        let wpr = m.div_ceil(64);
        let tail = m % 64;
        let mut words = Vec::with_capacity(n * wpr);
        for _ in 0..n {
            for w in 0..wpr {
                let mut word: u64 = rng.random();
                if w == wpr - 1 && tail != 0 {
                    word &= (1u64 << tail) - 1;
                }
                words.push(word);
            }
        }
        PackedBitMatrix::from_words(n, m, words).expect("consistent word count")
    }

    pub fn mask(n: usize, m: usize, density: f64, rng: &mut ChaCha8Rng) -> PackedBitMatrix {
        let mut out = PackedBitMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                if rng.random::<f64>() < density {
                    out.set(i, j, true);
                }
            }
        }
        out
    }

    fn positive(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..len).map(|_| rng.random_range(0.5f32..1.5)).collect()
    }

    pub fn dense(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DenseGemvKernel {
        let w = (0..n * m).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        DenseGemvKernel::new(n, m, w).expect("consistent shape")
    }

    pub fn static_scale(n: usize, m: usize, rng: &mut ChaCha8Rng) -> StaticScaleGemvKernel {
        let s = signs(n, m, rng);
        StaticScaleGemvKernel::new(s, positive(m, rng), positive(n, rng)).expect("consistent shape")
    }

    pub fn mos(n: usize, m: usize, e: usize, rng: &mut ChaCha8Rng) -> MosGemvKernel {
        MosGemvKernel {
            signs: signs(n, m, rng),
            experts: e,
            router: (0..m * e).map(|_| rng.random_range(-0.05f32..0.05)).collect(),
            s_in: positive(e * m, rng),
            s_out: positive(e * n, rng),
            gates: vec![0.0; e],
            z: vec![0.0; m],
            scratch: LutScratch::default(),
        }
    }

    pub fn partial(n: usize, m: usize, ratio: f64, rng: &mut ChaCha8Rng) -> PartialGemvKernel {
        let s = signs(n, m, rng);
        let coords = mask(n, m, ratio, rng).ones();
        let count = coords.len();
        PartialGemvKernel {
            signs: s,
            alpha: positive(n, rng),
            offset: (0..n).map(|_| rng.random_range(-0.01f32..0.01)).collect(),
            rows: coords.iter().map(|c| c.0 as u32).collect(),
            cols: coords.iter().map(|c| c.1 as u32).collect(),
            codes: (0..count).map(|_| rng.random()).collect(),
            base: (0..count).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            scale: positive(n, rng),
            zero: (0..n).map(|_| rng.random_range(-2.0f32..-1.0)).collect(),
            scratch: LutScratch::default(),
        }
    }

    pub fn residual(n: usize, m: usize, ratio: f64, rng: &mut ChaCha8Rng) -> ResidualGemvKernel {
        let s = signs(n, m, rng);
        let group_mask = mask(n, m, ratio, rng);
        let residual_signs = signs(n, m, rng);
        let offset = (0..n).map(|_| rng.random_range(-0.01f32..0.01)).collect();
        let (alpha_c, alpha_s, rho) = (positive(n, rng), positive(n, rng), positive(n, rng));
        ResidualGemvKernel::new(s, &group_mask, &residual_signs, offset, alpha_c, alpha_s, rho)
    }
}
