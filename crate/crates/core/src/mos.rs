//! Mixture-of-scales binary linear layer.
//!
//! One packed sign plane is shared by `e` scaling experts per dimension. A
//! bias-free linear router turns each token into softmax gating scores, the
//! scores mix the experts into token-specific input and output scales, and
//! the layer computes `[(X ⊙ Ŝ_in) · Bᵀ] ⊙ Ŝ_out`.

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::binarize::{check_input, fit_dual_scales, DualScaleBinaryLayer};
use crate::error::{Error, Result};
use crate::kernels::{binary_gemm, PackedBitMatrix};
use crate::numcore::{matmul, softmax_rows, Matrix, RngSeed};

pub const DEFAULT_EXPERTS: usize = 4;

/// Multiplicative jitter applied to every expert entry at initialization.
pub const DEFAULT_INIT_JITTER: f64 = 0.01;

/// ALS sweeps used to fit the expert scales at initialization.
pub const INIT_ALS_SWEEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoSLinear {
    pub signs: PackedBitMatrix,
    /// `e × m`
    pub s_in_experts: Matrix,
    /// `e × n`
    pub s_out_experts: Matrix,
    /// `m × e`
    pub router_w: Matrix,
}

impl MoSLinear {
    pub fn new(
        signs: PackedBitMatrix,
        s_in_experts: Matrix,
        s_out_experts: Matrix,
        router_w: Matrix,
    ) -> Result<Self> {
        let (n, m) = (signs.rows(), signs.cols());
        let e = s_in_experts.rows();
        if e == 0 {
            return Err(Error::param("a mixture-of-scales layer needs at least one expert"));
        }
        if s_in_experts.cols() != m
            || s_out_experts.shape() != (e, n)
            || router_w.shape() != (m, e)
        {
            return Err(Error::shape(format!(
                "inconsistent MoS shapes: signs {n}x{m}, s_in {:?}, s_out {:?}, router {:?}",
                s_in_experts.shape(),
                s_out_experts.shape(),
                router_w.shape()
            )));
        }
        Ok(MoSLinear {
            signs,
            s_in_experts,
            s_out_experts,
            router_w,
        })
    }

    /// Wraps a dual-scale layer as a single-expert MoS layer.
    pub fn from_dual(layer: &DualScaleBinaryLayer) -> Self {
        let m = layer.signs.cols();
        MoSLinear {
            signs: layer.signs.clone(),
            s_in_experts: Matrix::row_vector(&layer.s_in),
            s_out_experts: Matrix::row_vector(&layer.s_out),
            router_w: Matrix::zeros(m, 1),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.s_in_experts.rows()
    }

    pub fn in_features(&self) -> usize {
        self.signs.cols()
    }

    pub fn out_features(&self) -> usize {
        self.signs.rows()
    }

    /// Extra real-valued parameters over a dual-scale layer of the same
    /// shape: `(e − 1)·(m + n)` expert entries plus `m·e` router weights.
    pub fn parameter_overhead_vs_dual(&self) -> usize {
        let (n, m, e) = (self.out_features(), self.in_features(), self.num_experts());
        (e - 1) * (m + n) + m * e
    }

    pub fn gate(&self, x: &Matrix) -> Result<GatingScores> {
        router_gate(x, &self.router_w)
    }

    pub fn adaptive_scales(&self, x: &Matrix) -> Result<(GatingScores, AdaptiveScales)> {
        let g = self.gate(x)?;
        let s = mix_scales(&g, &self.s_in_experts, &self.s_out_experts)?;
        Ok((g, s))
    }
}

/// Per-token softmax weights over experts; `k × e`, rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingScores(pub Matrix);

impl GatingScores {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Token-adaptive scales, `k × m` and `k × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveScales {
    pub s_in_hat: Matrix,
    pub s_out_hat: Matrix,
}

pub fn router_gate(x: &Matrix, router_w: &Matrix) -> Result<GatingScores> {
    Ok(GatingScores(softmax_rows(&matmul(x, router_w)?)))
}

pub fn mix_scales(
    g: &GatingScores,
    s_in_experts: &Matrix,
    s_out_experts: &Matrix,
) -> Result<AdaptiveScales> {
    let e = g.0.cols();
    if s_in_experts.rows() != e || s_out_experts.rows() != e {
        return Err(Error::shape(format!(
            "{e} gating columns for {} input and {} output experts",
            s_in_experts.rows(),
            s_out_experts.rows()
        )));
    }
    Ok(AdaptiveScales {
        s_in_hat: matmul(&g.0, s_in_experts)?,
        s_out_hat: matmul(&g.0, s_out_experts)?,
    })
}

/// Forward pass through the packed sign plane; no dense weight is built.
pub fn mos_forward(x: &Matrix, layer: &MoSLinear) -> Result<Matrix> {
    check_input(x, layer.in_features())?;
    let (_, scales) = layer.adaptive_scales(x)?;
    let z = x.hadamard(&scales.s_in_hat)?;
    binary_gemm(&layer.signs, &z)?.hadamard(&scales.s_out_hat)
}

/// Initializes from full-precision weights with the default 1% jitter.
pub fn init_from_pretrained(w_fp: &Matrix, e: usize, seed: RngSeed) -> Result<MoSLinear> {
    init_from_pretrained_with_jitter(w_fp, e, seed, DEFAULT_INIT_JITTER)
}

/// `signs = Sign(w)`; every expert starts at the dual-scale ALS fit times
/// `(1 + ε)`, `ε ~ U(−jitter, jitter)` per entry; the router starts at zero so
/// gating is uniform.
pub fn init_from_pretrained_with_jitter(
    w_fp: &Matrix,
    e: usize,
    seed: RngSeed,
    jitter: f64,
) -> Result<MoSLinear> {
    if e == 0 {
        return Err(Error::param("a mixture-of-scales layer needs at least one expert"));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::param(format!("jitter {jitter} outside [0, 1)")));
    }
    let dual = fit_dual_scales(w_fp, INIT_ALS_SWEEPS)?;
    let (n, m) = w_fp.shape();
    let mut s_in_experts = Matrix::zeros(e, m);
    let mut s_out_experts = Matrix::zeros(e, n);
    for k in 0..e {
        s_in_experts.row_mut(k).copy_from_slice(&dual.s_in);
        s_out_experts.row_mut(k).copy_from_slice(&dual.s_out);
    }
    if jitter > 0.0 {
        let mut rng = seed.rng();
        let eps = Uniform::new(-jitter, jitter).expect("non-empty jitter range");
        for v in s_in_experts.data_mut().iter_mut().chain(s_out_experts.data_mut()) {
            *v *= 1.0 + eps.sample(&mut rng);
        }
    }
    MoSLinear::new(dual.signs, s_in_experts, s_out_experts, Matrix::zeros(m, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binarize::static_forward;
    use crate::numcore::matmul_nt;
    use proptest::prelude::*;

    fn m(r: &[&[f64]]) -> Matrix {
        Matrix::from_rows(r).unwrap()
    }

    /// Builds the full scaled weight per token and multiplies densely.
    fn per_token_dense(x: &Matrix, layer: &MoSLinear) -> Matrix {
        let (_, s) = layer.adaptive_scales(x).unwrap();
        let b = layer.signs.unpack();
        let mut out = Matrix::zeros(x.rows(), layer.out_features());
        for t in 0..x.rows() {
            let mut wt = b.clone();
            for i in 0..wt.rows() {
                let so = s.s_out_hat.get(t, i);
                for j in 0..wt.cols() {
                    let v = wt.get(i, j) * so * s.s_in_hat.get(t, j);
                    wt.set(i, j, v);
                }
            }
            let y = matmul_nt(&Matrix::row_vector(x.row(t)), &wt).unwrap();
            out.row_mut(t).copy_from_slice(y.row(0));
        }
        out
    }

    fn hand_layer() -> MoSLinear {
        MoSLinear::new(
            PackedBitMatrix::pack(&m(&[&[1.0]])).unwrap(),
            m(&[&[2.0], &[4.0]]),
            m(&[&[1.0], &[3.0]]),
            Matrix::zeros(1, 2),
        )
        .unwrap()
    }

    #[test]
    fn zero_router_is_uniform() {
        let mut rng = RngSeed(1).rng();
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng);
        let g = router_gate(&x, &Matrix::zeros(3, 4)).unwrap();
        assert!(g.0.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_expert_gate_is_one() {
        let mut rng = RngSeed(2).rng();
        let x = Matrix::random_normal(4, 3, 1.0, &mut rng);
        let w = Matrix::random_normal(3, 1, 1.0, &mut rng);
        let g = router_gate(&x, &w).unwrap();
        assert!(g.0.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hand_softmax_gate() {
        let g = router_gate(&m(&[&[1.0, 0.0]]), &m(&[&[2f64.ln(), 0.0], &[7.0, 7.0]])).unwrap();
        assert!((g.0.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.0.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gate_shape_mismatch() {
        assert!(matches!(
            router_gate(&Matrix::zeros(1, 3), &Matrix::zeros(2, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn one_hot_gate_selects_expert() {
        let s_in = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]);
        let s_out = m(&[&[9.0], &[10.0], &[11.0], &[12.0]]);
        let g = GatingScores(m(&[&[1.0, 0.0, 0.0, 0.0], &[0.25, 0.25, 0.25, 0.25]]));
        let s = mix_scales(&g, &s_in, &s_out).unwrap();
        assert_eq!(s.s_in_hat.row(0), &[1.0, 2.0]);
        assert_eq!(s.s_out_hat.row(0), &[9.0]);
        assert_eq!(s.s_in_hat.row(1), &[4.0, 5.0]);
        assert_eq!(s.s_out_hat.row(1), &[10.5]);
    }

    #[test]
    fn hand_convex_combination() {
        let g = GatingScores(m(&[&[0.25, 0.75]]));
        let s = mix_scales(&g, &m(&[&[2.0, 1.0], &[6.0, 1.0]]), &m(&[&[0.0], &[0.0]])).unwrap();
        assert_eq!(s.s_in_hat.row(0), &[5.0, 1.0]);
        assert!(mix_scales(&g, &Matrix::zeros(3, 2), &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn hand_forward() {
        let y = mos_forward(&m(&[&[1.0]]), &hand_layer()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn zero_input_zero_output_uniform_gate() {
        let mut rng = RngSeed(3).rng();
        let w = Matrix::random_normal(5, 7, 1.0, &mut rng);
        let mut layer = init_from_pretrained(&w, 4, RngSeed(0)).unwrap();
        layer.router_w = Matrix::random_normal(7, 4, 1.0, &mut rng);
        let x = Matrix::zeros(3, 7);
        assert!(mos_forward(&x, &layer).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(layer.gate(&x).unwrap().0.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_expert_matches_dual_layer() {
        let mut rng = RngSeed(4).rng();
        let w = Matrix::random_normal(6, 9, 1.0, &mut rng);
        let dual = fit_dual_scales(&w, INIT_ALS_SWEEPS).unwrap();
        let x = Matrix::random_normal(4, 9, 1.0, &mut rng);
        let want = static_forward(&dual, &x).unwrap();
        let wrapped = mos_forward(&x, &MoSLinear::from_dual(&dual)).unwrap();
        assert!(wrapped.max_abs_diff(&want) <= 1e-10);
        let init = init_from_pretrained_with_jitter(&w, 1, RngSeed(0), 0.0).unwrap();
        assert!(mos_forward(&x, &init).unwrap().max_abs_diff(&want) <= 1e-10);
    }

    #[test]
    fn step_zero_is_close_to_dual_forward() {
        let mut rng = RngSeed(5).rng();
        let w = Matrix::random_normal(16, 24, 1.0, &mut rng);
        let dual = fit_dual_scales(&w, INIT_ALS_SWEEPS).unwrap();
        let layer = init_from_pretrained(&w, 4, RngSeed(9)).unwrap();
        let x = Matrix::random_normal(8, 24, 1.0, &mut rng);
        let want = static_forward(&dual, &x).unwrap();
        let got = mos_forward(&x, &layer).unwrap();
        let rel = got.sub(&want).unwrap().sum_sq().sqrt() / want.sum_sq().sqrt();
        assert!(rel < 0.02, "relative deviation {rel}");
    }

    #[test]
    fn seeds_change_experts_not_signs() {
        let mut rng = RngSeed(6).rng();
        let w = Matrix::random_normal(4, 5, 1.0, &mut rng);
        let a = init_from_pretrained(&w, 4, RngSeed(1)).unwrap();
        let b = init_from_pretrained(&w, 4, RngSeed(2)).unwrap();
        assert_eq!(a.signs, b.signs);
        assert_ne!(a.s_in_experts, b.s_in_experts);
        assert_eq!(a, init_from_pretrained(&w, 4, RngSeed(1)).unwrap());
        assert!(init_from_pretrained(&w, 0, RngSeed(1)).is_err());
    }

    #[test]
    fn overhead_matches_4096_example() {
        let layer = MoSLinear::new(
            PackedBitMatrix::zeros(4096, 4096),
            Matrix::zeros(4, 4096),
            Matrix::zeros(4, 4096),
            Matrix::zeros(4096, 4),
        )
        .unwrap();
        assert_eq!(layer.parameter_overhead_vs_dual(), 4096 * 10);
    }

    fn random_layer(n: usize, m_: usize, e: usize, seed: u64) -> MoSLinear {
        let mut rng = RngSeed(seed).rng();
        let w = Matrix::random_normal(n, m_, 1.0, &mut rng);
        let mut l = init_from_pretrained(&w, e, RngSeed(seed)).unwrap();
        l.router_w = Matrix::random_normal(m_, e, 1.0, &mut rng);
        l.s_in_experts = Matrix::random_uniform(e, m_, 0.1, 2.0, &mut rng);
        l.s_out_experts = Matrix::random_uniform(e, n, 0.1, 2.0, &mut rng);
        l
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gates_are_distributions(k in 1usize..6, m_ in 1usize..9, e in 1usize..6, seed in any::<u64>()) {
            let mut rng = RngSeed(seed).rng();
            let x = Matrix::random_normal(k, m_, 3.0, &mut rng);
            let w = Matrix::random_normal(m_, e, 3.0, &mut rng);
            let g = router_gate(&x, &w).unwrap();
            for r in g.0.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }

        #[test]
        fn mixed_scales_are_convex(n in 1usize..6, m_ in 1usize..9, e in 1usize..6, seed in any::<u64>()) {
            let layer = random_layer(n, m_, e, seed);
            let mut rng = RngSeed(seed ^ 1).rng();
            let x = Matrix::random_normal(5, m_, 1.0, &mut rng);
            let (_, s) = layer.adaptive_scales(&x).unwrap();
            for (hat, experts) in [(&s.s_in_hat, &layer.s_in_experts), (&s.s_out_hat, &layer.s_out_experts)] {
                for t in 0..hat.rows() {
                    for j in 0..hat.cols() {
                        let col: Vec<f64> = (0..experts.rows()).map(|k| experts.get(k, j)).collect();
                        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let v = hat.get(t, j);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn factored_forward_matches_per_token_dense(n in 1usize..10, m_ in 1usize..80, e in 1usize..5, seed in any::<u64>()) {
            let layer = random_layer(n, m_, e, seed);
            let mut rng = RngSeed(seed ^ 2).rng();
            let x = Matrix::random_normal(3, m_, 1.0, &mut rng);
            let got = mos_forward(&x, &layer).unwrap();
            let want = per_token_dense(&x, &layer);
            prop_assert!(got.max_abs_diff(&want) <= 1e-10 * want.max_abs().max(1.0));
        }
    }
}
