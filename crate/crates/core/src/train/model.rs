//! Toy decoder-only language model with hand-written reverse mode.
//!
//! Blocks are pre-norm: RMSNorm, causal multi-head attention, RMSNorm,
//! SwiGLU feed-forward, each wrapped in a residual connection. The seven
//! projections of every block follow the configured [`Scheme`]; embeddings,
//! norms and the LM head stay in full precision.
//!
//! Binarized projections keep latent full-precision weights and re-binarize
//! on every forward pass. Gradients reach the latent weights through the
//! identity straight-through estimator.

use rand_distr::{Distribution, Normal};

use super::config::{Scheme, ToyDecoderConfig};
use crate::binarize::{
    binarize_absmean, fit_dual_scales, partial_binarize, residual_binarize, BinaryLayer,
    PartialBinaryLayer, ResidualBinaryLayer, StaticBinaryLayer,
};
use crate::error::{Error, Result};
use crate::mos::{init_from_pretrained, INIT_ALS_SWEEPS};
use crate::numcore::{matmul, matmul_nt, matmul_tn, sign, softmax_in_place, softmax_rows, Matrix, RngSeed};

const NORM_EPS: f64 = 1e-5;

pub const Q: usize = 0;
pub const K: usize = 1;
pub const V: usize = 2;
pub const O: usize = 3;
pub const GATE: usize = 4;
pub const UP: usize = 5;
pub const DOWN: usize = 6;
pub const PROJECTION_NAMES: [&str; 7] = ["q", "k", "v", "o", "gate", "up", "down"];

/// Deployed weights of a static scheme, restored from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenWeights {
    Static(StaticBinaryLayer),
    Partial(PartialBinaryLayer),
    Residual(ResidualBinaryLayer),
}

impl FrozenWeights {
    pub fn dense_reconstruction(&self) -> Matrix {
        match self {
            FrozenWeights::Static(l) => l.dense_reconstruction(),
            FrozenWeights::Partial(l) => l.dense_reconstruction(),
            FrozenWeights::Residual(l) => l.dense_reconstruction(),
        }
    }
}

/// One `n × m` projection.
///
/// `s_in`/`s_out` hold one row per expert (a single row for the dual
/// scheme); `router` is `m × e` and only present for the mixture scheme.
#[derive(Debug, Clone)]
pub struct Linear {
    pub scheme: Scheme,
    pub weight: Matrix,
    pub s_in: Option<Matrix>,
    pub s_out: Option<Matrix>,
    pub router: Option<Matrix>,
    pub salient_ratio: f64,
    frozen: Option<FrozenWeights>,
}

enum LinearCache {
    Dense {
        x: Matrix,
        w: Matrix,
    },
    Scaled {
        x: Matrix,
        signs: Matrix,
        xs: Matrix,
        z: Matrix,
        s_in_hat: Matrix,
        s_out_hat: Matrix,
        gates: Option<Matrix>,
    },
}

fn broadcast_row(row: &[f64], k: usize) -> Matrix {
    let mut data = Vec::with_capacity(k * row.len());
    for _ in 0..k {
        data.extend_from_slice(row);
    }
    Matrix::new(k, row.len(), data).expect("sized by construction")
}

impl Linear {
    pub fn float(weight: Matrix) -> Self {
        Linear {
            scheme: Scheme::Float,
            weight,
            s_in: None,
            s_out: None,
            router: None,
            salient_ratio: 0.0,
            frozen: None,
        }
    }

    /// Converts full-precision weights to `scheme`. Dual scales start at the
    /// ALS fit of `|W|`; mixture experts start at that fit with a small
    /// per-entry jitter and a zero router.
    pub fn from_float(weight: &Matrix, scheme: Scheme, experts: usize, salient_ratio: f64, seed: RngSeed) -> Result<Self> {
        let mut lin = Linear {
            scheme,
            weight: weight.clone(),
            s_in: None,
            s_out: None,
            router: None,
            salient_ratio,
            frozen: None,
        };
        match scheme {
            Scheme::Float | Scheme::Static | Scheme::Partial | Scheme::Residual => {}
            Scheme::Dual => {
                let d = fit_dual_scales(weight, INIT_ALS_SWEEPS)?;
                lin.s_in = Some(Matrix::row_vector(&d.s_in));
                lin.s_out = Some(Matrix::row_vector(&d.s_out));
            }
            Scheme::Mos => {
                let layer = init_from_pretrained(weight, experts, seed)?;
                lin.s_in = Some(layer.s_in_experts);
                lin.s_out = Some(layer.s_out_experts);
                lin.router = Some(layer.router_w);
            }
        }
        Ok(lin)
    }

    /// Scaled-sign projection from stored parts; `weight` only matters
    /// through its signs.
    pub fn from_parts(
        scheme: Scheme,
        weight: Matrix,
        s_in: Option<Matrix>,
        s_out: Option<Matrix>,
        router: Option<Matrix>,
    ) -> Self {
        Linear {
            scheme,
            weight,
            s_in,
            s_out,
            router,
            salient_ratio: 0.0,
            frozen: None,
        }
    }

    /// A static-scheme projection fixed to deployed weights.
    pub fn from_frozen(frozen: FrozenWeights, salient_ratio: f64) -> Self {
        let scheme = match frozen {
            FrozenWeights::Static(_) => Scheme::Static,
            FrozenWeights::Partial(_) => Scheme::Partial,
            FrozenWeights::Residual(_) => Scheme::Residual,
        };
        Linear {
            scheme,
            weight: frozen.dense_reconstruction(),
            s_in: None,
            s_out: None,
            router: None,
            salient_ratio,
            frozen: Some(frozen),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn experts(&self) -> usize {
        self.router.as_ref().map_or(1, Matrix::cols)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Deployed form of a static scheme: the frozen weights, or a fresh
    /// binarization of the latent weights.
    pub fn static_weights(&self) -> Result<Option<FrozenWeights>> {
        if let Some(f) = &self.frozen {
            return Ok(Some(f.clone()));
        }
        Ok(match self.scheme {
            Scheme::Static => Some(FrozenWeights::Static(binarize_absmean(&self.weight)?)),
            Scheme::Partial => Some(FrozenWeights::Partial(partial_binarize(&self.weight, self.salient_ratio)?)),
            Scheme::Residual => Some(FrozenWeights::Residual(residual_binarize(&self.weight)?)),
            _ => None,
        })
    }

    fn dense_weight(&self) -> Result<Matrix> {
        if let Some(f) = &self.frozen {
            return Ok(f.dense_reconstruction());
        }
        match self.static_weights()? {
            Some(f) => Ok(f.dense_reconstruction()),
            None => Ok(self.weight.clone()),
        }
    }

    /// Dense weight the projection applies when every expert receives the
    /// same gate, i.e. `diag(mean s_out)·Sign(W)·diag(mean s_in)` for the
    /// scaled schemes. For the static schemes it is the deployed weight.
    pub fn reconstruction(&self) -> Result<Matrix> {
        match (&self.s_in, &self.s_out) {
            (Some(s_in), Some(s_out)) => {
                let mean = |s: &Matrix| -> Vec<f64> { s.col_sums().into_iter().map(|v| v / s.rows() as f64).collect() };
                let (a, b) = (mean(s_in), mean(s_out));
                let mut w = self.weight.map(sign).scale_cols(&a)?;
                for (i, &so) in b.iter().enumerate() {
                    for v in w.row_mut(i) {
                        *v *= so;
                    }
                }
                Ok(w)
            }
            _ => self.dense_weight(),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("weight", &self.weight)];
        if let Some(s) = &self.s_in {
            out.push(("s_in", s));
        }
        if let Some(s) = &self.s_out {
            out.push(("s_out", s));
        }
        if let Some(r) = &self.router {
            out.push(("router", r));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.weight];
        if let Some(s) = &mut self.s_in {
            out.push(s);
        }
        if let Some(s) = &mut self.s_out {
            out.push(s);
        }
        if let Some(r) = &mut self.router {
            out.push(r);
        }
        out
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, LinearCache)> {
        if x.cols() != self.in_features() {
            return Err(Error::shape(format!(
                "projection expects {} features, got {}",
                self.in_features(),
                x.cols()
            )));
        }
        match (&self.s_in, &self.s_out) {
            (Some(s_in), Some(s_out)) => {
                let k = x.rows();
                let signs = self.weight.map(sign);
                let (gates, s_in_hat, s_out_hat) = match &self.router {
                    Some(r) => {
                        let g = softmax_rows(&matmul(x, r)?);
                        let si = matmul(&g, s_in)?;
                        let so = matmul(&g, s_out)?;
                        (Some(g), si, so)
                    }
                    None => (None, broadcast_row(s_in.row(0), k), broadcast_row(s_out.row(0), k)),
                };
                let xs = x.hadamard(&s_in_hat)?;
                let z = matmul_nt(&xs, &signs)?;
                let y = z.hadamard(&s_out_hat)?;
                Ok((
                    y,
                    LinearCache::Scaled {
                        x: x.clone(),
                        signs,
                        xs,
                        z,
                        s_in_hat,
                        s_out_hat,
                        gates,
                    },
                ))
            }
            _ => {
                let w = self.dense_weight()?;
                let y = matmul_nt(x, &w)?;
                Ok((y, LinearCache::Dense { x: x.clone(), w }))
            }
        }
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    fn backward(&self, cache: &LinearCache, dy: &Matrix, grad: &mut Linear) -> Result<Matrix> {
        match cache {
            LinearCache::Dense { x, w } => {
                grad.weight.add_assign(&matmul_tn(dy, x)?)?;
                matmul(dy, w)
            }
            LinearCache::Scaled {
                x,
                signs,
                xs,
                z,
                s_in_hat,
                s_out_hat,
                gates,
            } => {
                let d_s_out_hat = dy.hadamard(z)?;
                let dz = dy.hadamard(s_out_hat)?;
                let dxs = matmul(&dz, signs)?;
                grad.weight.add_assign(&matmul_tn(&dz, xs)?)?;
                let d_s_in_hat = dxs.hadamard(x)?;
                let mut dx = dxs.hadamard(s_in_hat)?;
                let (gs_in, gs_out) = match (&mut grad.s_in, &mut grad.s_out) {
                    (Some(a), Some(b)) => (a, b),
                    _ => return Err(Error::shape("gradient buffer lacks scale tensors")),
                };
                match gates {
                    Some(g) => {
                        let s_in = self.s_in.as_ref().expect("scaled cache implies scales");
                        let s_out = self.s_out.as_ref().expect("scaled cache implies scales");
                        let router = self.router.as_ref().expect("gates imply a router");
                        gs_in.add_assign(&matmul_tn(g, &d_s_in_hat)?)?;
                        gs_out.add_assign(&matmul_tn(g, &d_s_out_hat)?)?;
                        let mut dg = matmul_nt(&d_s_out_hat, s_out)?;
                        dg.add_assign(&matmul_nt(&d_s_in_hat, s_in)?)?;
                        let mut dlogits = dg;
                        for t in 0..dlogits.rows() {
                            let gr = g.row(t);
                            let row = dlogits.row_mut(t);
                            let dot: f64 = gr.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                            for (d, &gv) in row.iter_mut().zip(gr) {
                                *d = gv * (*d - dot);
                            }
                        }
                        let gr = grad.router.as_mut().ok_or_else(|| Error::shape("gradient buffer lacks a router"))?;
                        gr.add_assign(&matmul_tn(x, &dlogits)?)?;
                        dx.add_assign(&matmul_nt(&dlogits, router)?)?;
                    }
                    None => {
                        let si = d_s_in_hat.col_sums();
                        let so = d_s_out_hat.col_sums();
                        for (a, b) in gs_in.data_mut().iter_mut().zip(si) {
                            *a += b;
                        }
                        for (a, b) in gs_out.data_mut().iter_mut().zip(so) {
                            *a += b;
                        }
                    }
                }
                Ok(dx)
            }
        }
    }
}

struct NormCache {
    xhat: Matrix,
    inv_rms: Vec<f64>,
}

fn rms_norm(x: &Matrix, g: &Matrix) -> (Matrix, NormCache) {
    let h = x.cols();
    let mut xhat = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    let mut y = Matrix::zeros(x.rows(), h);
    for r in 0..x.rows() {
        let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / h as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        inv_rms.push(inv);
        let xr = xhat.row_mut(r);
        for v in xr.iter_mut() {
            *v *= inv;
        }
        for ((yv, &xv), &gv) in y.row_mut(r).iter_mut().zip(xhat.row(r)).zip(g.row(0)) {
            *yv = xv * gv;
        }
    }
    (y, NormCache { xhat, inv_rms })
}

fn rms_norm_backward(cache: &NormCache, g: &Matrix, dy: &Matrix, dg: &mut Matrix) -> Matrix {
    let h = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), h);
    let gr = g.row(0);
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut dot = 0.0;
        for j in 0..h {
            dot += dyr[j] * gr[j] * xh[j];
        }
        dot /= h as f64;
        let inv = cache.inv_rms[r];
        let dgr = dg.row_mut(0);
        for j in 0..h {
            dgr[j] += dyr[j] * xh[j];
        }
        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = inv * (dyr[j] * gr[j] - xh[j] * dot);
        }
    }
    dx
}

/// Causal attention over `batch` sequences of length `t`; returns the head
/// outputs and the attention probabilities per (sequence, head).
fn attention(q: &Matrix, k: &Matrix, v: &Matrix, batch: usize, t: usize, heads: usize) -> (Matrix, Vec<Matrix>) {
    let h = q.cols();
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), h);
    let mut probs = Vec::with_capacity(batch * heads);
    let mut scores = vec![0.0; t];
    for b in 0..batch {
        for hd in 0..heads {
            let off = hd * d;
            let mut p = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = &q.row(b * t + i)[off..off + d];
                for (j, s) in scores[..=i].iter_mut().enumerate() {
                    let kj = &k.row(b * t + j)[off..off + d];
                    *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores[..=i]);
                p.row_mut(i)[..=i].copy_from_slice(&scores[..=i]);
                let orow = &mut out.row_mut(b * t + i)[off..off + d];
                for (j, &pij) in scores[..=i].iter().enumerate() {
                    let vj = &v.row(b * t + j)[off..off + d];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dout: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
    batch: usize,
    t: usize,
    heads: usize,
) -> (Matrix, Matrix, Matrix) {
    let h = q.cols();
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), h);
    let mut dk = Matrix::zeros(q.rows(), h);
    let mut dv = Matrix::zeros(q.rows(), h);
    let mut dp = vec![0.0; t];
    for b in 0..batch {
        for hd in 0..heads {
            let off = hd * d;
            let p = &probs[b * heads + hd];
            for i in 0..t {
                let doi = &dout.row(b * t + i)[off..off + d];
                let pi = &p.row(i)[..=i];
                let mut dot = 0.0;
                for j in 0..=i {
                    let vj = &v.row(b * t + j)[off..off + d];
                    dp[j] = doi.iter().zip(vj).map(|(a, c)| a * c).sum();
                    dot += pi[j] * dp[j];
                }
                for j in 0..=i {
                    let ds = pi[j] * (dp[j] - dot) * scale;
                    let pij = pi[j];
                    let (qi, kj) = (b * t + i, b * t + j);
                    for c in 0..d {
                        let kjc = k.get(kj, off + c);
                        let qic = q.get(qi, off + c);
                        dq.row_mut(qi)[off + c] += ds * kjc;
                        dk.row_mut(kj)[off + c] += ds * qic;
                        dv.row_mut(kj)[off + c] += pij * doi[c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

fn silu(a: f64) -> f64 {
    a / (1.0 + (-a).exp())
}

fn silu_grad(a: f64) -> f64 {
    let s = 1.0 / (1.0 + (-a).exp());
    s * (1.0 + a * (1.0 - s))
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn_norm: Matrix,
    pub mlp_norm: Matrix,
    pub proj: [Linear; 7],
}

struct BlockCache {
    n1: NormCache,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    n2: NormCache,
    a: Matrix,
    u: Matrix,
    lin: Vec<LinearCache>,
}

impl Block {
    fn forward(&self, x: &Matrix, batch: usize, t: usize, heads: usize) -> Result<(Matrix, BlockCache)> {
        let mut lin = Vec::with_capacity(7);
        let (n1_out, n1) = rms_norm(x, &self.attn_norm);
        let (q, cq) = self.proj[Q].forward(&n1_out)?;
        let (k, ck) = self.proj[K].forward(&n1_out)?;
        let (v, cv) = self.proj[V].forward(&n1_out)?;
        let (att, probs) = attention(&q, &k, &v, batch, t, heads);
        let (o, co) = self.proj[O].forward(&att)?;
        let h1 = x.add(&o)?;
        let (n2_out, n2) = rms_norm(&h1, &self.mlp_norm);
        let (a, cg) = self.proj[GATE].forward(&n2_out)?;
        let (u, cu) = self.proj[UP].forward(&n2_out)?;
        let act = a.zip_with(&u, |av, uv| silu(av) * uv)?;
        let (dn, cd) = self.proj[DOWN].forward(&act)?;
        let out = h1.add(&dn)?;
        lin.extend([cq, ck, cv, co, cg, cu, cd]);
        Ok((
            out,
            BlockCache {
                n1,
                q,
                k,
                v,
                probs,
                n2,
                a,
                u,
                lin,
            },
        ))
    }

    fn backward(&self, c: &BlockCache, dout: &Matrix, g: &mut Block, batch: usize, t: usize, heads: usize) -> Result<Matrix> {
        let dact = self.proj[DOWN].backward(&c.lin[DOWN], dout, &mut g.proj[DOWN])?;
        let mut da = dact.clone();
        let mut du = dact;
        for ((dav, duv), (&a, &u)) in da
            .data_mut()
            .iter_mut()
            .zip(du.data_mut().iter_mut())
            .zip(c.a.data().iter().zip(c.u.data()))
        {
            let d = *dav;
            *dav = d * u * silu_grad(a);
            *duv = d * silu(a);
        }
        let mut dn2 = self.proj[GATE].backward(&c.lin[GATE], &da, &mut g.proj[GATE])?;
        dn2.add_assign(&self.proj[UP].backward(&c.lin[UP], &du, &mut g.proj[UP])?)?;
        let mut dh1 = dout.clone();
        dh1.add_assign(&rms_norm_backward(&c.n2, &self.mlp_norm, &dn2, &mut g.mlp_norm))?;
        let datt = self.proj[O].backward(&c.lin[O], &dh1, &mut g.proj[O])?;
        let (dq, dk, dv) = attention_backward(&datt, &c.q, &c.k, &c.v, &c.probs, batch, t, heads);
        let mut dn1 = self.proj[Q].backward(&c.lin[Q], &dq, &mut g.proj[Q])?;
        dn1.add_assign(&self.proj[K].backward(&c.lin[K], &dk, &mut g.proj[K])?)?;
        dn1.add_assign(&self.proj[V].backward(&c.lin[V], &dv, &mut g.proj[V])?)?;
        let mut dx = dh1;
        dx.add_assign(&rms_norm_backward(&c.n1, &self.attn_norm, &dn1, &mut g.attn_norm))?;
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct ToyDecoder {
    pub config: ToyDecoderConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Matrix,
    pub lm_head: Matrix,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    tokens: Vec<u8>,
    batch: usize,
    t: usize,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    final_hidden: Matrix,
}

impl ForwardCache {
    /// Per-token gates of projection `index` (block-major), if it routes.
    pub fn gates(&self, index: usize) -> Option<&Matrix> {
        let c = self.blocks.get(index / 7)?;
        match &c.lin[index % 7] {
            LinearCache::Scaled { gates, .. } => gates.as_ref(),
            LinearCache::Dense { .. } => None,
        }
    }

    /// Token-adaptive `(ŝ_in, ŝ_out)` of projection `index`.
    pub fn adaptive_scales(&self, index: usize) -> Option<(&Matrix, &Matrix)> {
        let c = self.blocks.get(index / 7)?;
        match &c.lin[index % 7] {
            LinearCache::Scaled {
                s_in_hat, s_out_hat, ..
            } => Some((s_in_hat, s_out_hat)),
            LinearCache::Dense { .. } => None,
        }
    }
}

pub struct ForwardOutput {
    /// `(batch·t) × vocab`, sequence-major.
    pub logits: Matrix,
    /// Output of every block, `(batch·t) × hidden`.
    pub hiddens: Vec<Matrix>,
    pub cache: ForwardCache,
}

impl ToyDecoder {
    /// Random full-precision initialization, converted to the configured
    /// scheme.
    pub fn new(config: &ToyDecoderConfig, seed: RngSeed) -> Result<Self> {
        config.validate()?;
        let mut rng = seed.rng();
        let (h, f, l) = (config.hidden, config.ffn, config.layers);
        let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
        let mut sample = |rows: usize, cols: usize, std: f64| {
            let dist = normal(std);
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Matrix::new(rows, cols, data).expect("sized by construction")
        };
        let tok_emb = sample(config.vocab, h, 0.1);
        let pos_emb = sample(config.seq_len, h, 0.1);
        let mut blocks = Vec::with_capacity(l);
        let resid = 1.0 / (2.0 * l as f64).sqrt();
        for _ in 0..l {
            let std_h = 1.0 / (h as f64).sqrt();
            let std_f = 1.0 / (f as f64).sqrt();
            let proj = [
                Linear::float(sample(h, h, std_h)),
                Linear::float(sample(h, h, std_h)),
                Linear::float(sample(h, h, std_h)),
                Linear::float(sample(h, h, std_h * resid)),
                Linear::float(sample(f, h, std_h)),
                Linear::float(sample(f, h, std_h)),
                Linear::float(sample(h, f, std_f * resid)),
            ];
            blocks.push(Block {
                attn_norm: Matrix::filled(1, h, 1.0),
                mlp_norm: Matrix::filled(1, h, 1.0),
                proj,
            });
        }
        let lm_head = sample(config.vocab, h, 0.02);
        let float = ToyDecoder {
            config: config.with_scheme(Scheme::Float, config.experts),
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Matrix::filled(1, h, 1.0),
            lm_head,
        };
        if config.scheme == Scheme::Float {
            let mut m = float;
            m.config = config.clone();
            return Ok(m);
        }
        float.to_student(config.scheme, config.experts, seed.derive(0x5eed))
    }

    /// Student with the same architecture whose projections are converted
    /// from this model's full-precision weights.
    pub fn to_student(&self, scheme: Scheme, experts: usize, seed: RngSeed) -> Result<Self> {
        let config = self.config.with_scheme(scheme, experts);
        config.validate()?;
        let mut student = self.clone();
        student.config = config;
        for (b, block) in student.blocks.iter_mut().enumerate() {
            for (p, lin) in block.proj.iter_mut().enumerate() {
                if lin.scheme != Scheme::Float || lin.is_frozen() {
                    return Err(Error::Config(
                        "students can only be initialized from a full-precision teacher".into(),
                    ));
                }
                let layer_seed = seed.derive((b * 7 + p) as u64);
                *lin = Linear::from_float(&lin.weight, scheme, experts, self.config.salient_ratio, layer_seed)?;
            }
        }
        Ok(student)
    }

    pub fn num_projections(&self) -> usize {
        self.blocks.len() * 7
    }

    pub fn projection(&self, index: usize) -> Option<&Linear> {
        self.blocks.get(index / 7).map(|b| &b.proj[index % 7])
    }

    pub fn projection_name(index: usize) -> String {
        format!("blocks.{}.{}", index / 7, PROJECTION_NAMES[index % 7])
    }

    /// Resolves `"blocks.<l>.<name>"` or a plain block-major index.
    pub fn projection_index(&self, id: &str) -> Result<usize> {
        let idx = if let Ok(i) = id.parse::<usize>() {
            i
        } else {
            (0..self.num_projections())
                .find(|&i| Self::projection_name(i) == id)
                .ok_or_else(|| Error::param(format!("no projection named '{id}'")))?
        };
        if idx >= self.num_projections() {
            return Err(Error::param(format!(
                "projection {idx} out of range ({} projections)",
                self.num_projections()
            )));
        }
        Ok(idx)
    }

    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.attn_norm"), &b.attn_norm));
            for (p, lin) in b.proj.iter().enumerate() {
                if p == GATE {
                    out.push((format!("blocks.{l}.mlp_norm"), &b.mlp_norm));
                }
                for (name, m) in lin.params() {
                    out.push((format!("blocks.{l}.{}.{name}", PROJECTION_NAMES[p]), m));
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Mutable parameters in the order of [`ToyDecoder::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.attn_norm);
            let (first, rest) = b.proj.split_at_mut(GATE);
            for lin in first {
                out.extend(lin.params_mut());
            }
            out.push(&mut b.mlp_norm);
            for lin in rest {
                out.extend(lin.params_mut());
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Same structure with every parameter zeroed, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    pub fn forward(&self, seqs: &[&[u8]]) -> Result<ForwardOutput> {
        let batch = seqs.len();
        let t = seqs.first().map_or(0, |s| s.len());
        if batch == 0 || t == 0 {
            return Err(Error::param("forward needs at least one non-empty sequence"));
        }
        if seqs.iter().any(|s| s.len() != t) {
            return Err(Error::shape("sequences in a batch must share one length"));
        }
        if t > self.config.seq_len {
            return Err(Error::shape(format!(
                "sequence length {t} exceeds the model's {}",
                self.config.seq_len
            )));
        }
        let h = self.config.hidden;
        let mut tokens = Vec::with_capacity(batch * t);
        let mut x = Matrix::zeros(batch * t, h);
        for (b, s) in seqs.iter().enumerate() {
            for (i, &tok) in s.iter().enumerate() {
                if tok as usize >= self.config.vocab {
                    return Err(Error::Value(format!("token {tok} outside the vocabulary")));
                }
                tokens.push(tok);
                let row = x.row_mut(b * t + i);
                for ((r, e), p) in row.iter_mut().zip(self.tok_emb.row(tok as usize)).zip(self.pos_emb.row(i)) {
                    *r = e + p;
                }
            }
        }
        let mut hiddens = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = block.forward(&x, batch, t, self.config.heads)?;
            hiddens.push(out.clone());
            caches.push(cache);
            x = out;
        }
        let (nf, final_norm) = rms_norm(&x, &self.final_norm);
        let logits = matmul_nt(&nf, &self.lm_head)?;
        Ok(ForwardOutput {
            logits,
            hiddens,
            cache: ForwardCache {
                tokens,
                batch,
                t,
                blocks: caches,
                final_norm,
                final_hidden: nf,
            },
        })
    }

    /// Gradients of a loss given `∂L/∂logits` and optional `∂L/∂H_l` for
    /// every block output.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix, dhiddens: Option<&[Matrix]>) -> Result<ToyDecoder> {
        if let Some(dh) = dhiddens {
            if dh.len() != self.blocks.len() {
                return Err(Error::shape(format!(
                    "{} hidden gradients for {} blocks",
                    dh.len(),
                    self.blocks.len()
                )));
            }
        }
        let mut g = self.zeros_like();
        let (batch, t) = (cache.batch, cache.t);
        g.lm_head.add_assign(&matmul_tn(dlogits, &cache.final_hidden)?)?;
        let dnf = matmul(dlogits, &self.lm_head)?;
        let mut dx = rms_norm_backward(&cache.final_norm, &self.final_norm, &dnf, &mut g.final_norm);
        for l in (0..self.blocks.len()).rev() {
            if let Some(dh) = dhiddens {
                dx.add_assign(&dh[l])?;
            }
            dx = self.blocks[l].backward(&cache.blocks[l], &dx, &mut g.blocks[l], batch, t, self.config.heads)?;
        }
        for (r, &tok) in cache.tokens.iter().enumerate() {
            let i = r % t;
            let src = dx.row(r);
            for (d, s) in g.tok_emb.row_mut(tok as usize).iter_mut().zip(src) {
                *d += s;
            }
            for (d, s) in g.pos_emb.row_mut(i).iter_mut().zip(src) {
                *d += s;
            }
        }
        Ok(g)
    }
}
