//! Browser demo: scheme comparison, gating explorer and footprint calculator.
//!
//! Each operation is a plain function returning a serializable report; the
//! `wasm_bindgen` exports wrap them and hand JSON strings to the page.

use binarymos::binarize::{
    binarize_absmean, fit_dual_scales, partial_binarize, reconstruction_error, residual_binarize, BinaryLayer,
};
use binarymos::memmodel::{bits_per_weight, compression_table, FootprintRow, MethodSpec, ModelSpec, SparseIndex};
use binarymos::mos::init_from_pretrained;
use binarymos::numcore::{Matrix, RngSeed};
use binarymos::Result;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Columns of the first weight row returned for plotting.
const PROFILE_COLS: usize = 48;
const GATING_DIM: usize = 32;
const SCALE_CHANNELS: usize = 4;

#[derive(Debug, Clone, Serialize)]
pub struct SchemeRow {
    pub scheme: &'static str,
    pub rel_error: f64,
    pub bits_per_weight: f64,
    /// First `PROFILE_COLS` entries of row 0 of the reconstruction.
    pub profile: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemeReport {
    pub original: Vec<f64>,
    pub rows: Vec<SchemeRow>,
}

/// Gaussian weights with a fraction of entries inflated eightfold, the
/// heavy-tailed shape salient-weight schemes are built for.
pub fn synthetic_weights(n: usize, m: usize, outlier_fraction: f64, seed: u64) -> Matrix {
    let seed = RngSeed(seed);
    let mut w = Matrix::random_normal(n, m, 1.0 / (m as f64).sqrt(), &mut seed.rng());
    let picks = Matrix::random_uniform(n, m, 0.0, 1.0, &mut seed.derive(1).rng());
    for (v, p) in w.data_mut().iter_mut().zip(picks.data()) {
        if *p < outlier_fraction {
            *v *= 8.0;
        }
    }
    w
}

fn scheme_row(scheme: &'static str, layer: &impl BinaryLayer, w: &Matrix, bits: f64) -> SchemeRow {
    let recon = layer.dense_reconstruction();
    SchemeRow {
        scheme,
        rel_error: (reconstruction_error(layer, w) / w.sum_sq()).sqrt(),
        bits_per_weight: bits,
        profile: recon.row(0).iter().take(PROFILE_COLS).copied().collect(),
    }
}

/// Relative reconstruction error of the four static binarizations.
pub fn compare_schemes(n: usize, m: usize, outlier_fraction: f64, salient_ratio: f64, seed: u64) -> Result<SchemeReport> {
    if !(0.0..=1.0).contains(&outlier_fraction) {
        return Err(binarymos::Error::Value(format!("outlier fraction {outlier_fraction} outside [0, 1]")));
    }
    let w = synthetic_weights(n, m, outlier_fraction, seed);
    let (nn, mm) = (n as u64, m as u64);
    let pbllm = MethodSpec::Pbllm {
        salient_ratio,
        salient_bits: 8,
        index: SparseIndex::Bitmap,
    };
    let billm = MethodSpec::Billm {
        salient_ratio,
        group_mask_bits: 1,
    };
    // signs plus a 16-bit scale and offset per row
    let absmean_bits = 1.0 + 32.0 / m as f64;
    let partial = partial_binarize(&w, salient_ratio)?;
    Ok(SchemeReport {
        original: w.row(0).iter().take(PROFILE_COLS).copied().collect(),
        rows: vec![
            scheme_row("absmean", &binarize_absmean(&w)?, &w, absmean_bits),
            scheme_row("dual scales", &fit_dual_scales(&w, 10)?, &w, bits_per_weight(nn, mm, &MethodSpec::Onebit)?),
            scheme_row("partial (8-bit salient)", &partial, &w, bits_per_weight(nn, mm, &pbllm)?),
            scheme_row("residual", &residual_binarize(&w)?, &w, bits_per_weight(nn, mm, &billm)?),
        ],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GatingReport {
    pub tokens: Vec<String>,
    /// `tokens × experts`
    pub gates: Vec<Vec<f64>>,
    /// First `SCALE_CHANNELS` channels of the mixed input scale per token.
    pub s_in_hat: Vec<Vec<f64>>,
    /// Variance across tokens of each reported channel.
    pub channel_variance: Vec<f64>,
}

/// Fixed pseudo-embedding of a byte.
fn embed(byte: u8, seed: RngSeed) -> Vec<f64> {
    Matrix::random_normal(1, GATING_DIM, 1.0, &mut seed.derive(0x100 + byte as u64).rng()).into_data()
}

/// Routes every byte of `text` through a mixture-of-scales layer whose router
/// weights are drawn with standard deviation `router_scale`.
pub fn explore_gating(text: &str, experts: usize, router_scale: f64, seed: u64) -> Result<GatingReport> {
    if text.is_empty() {
        return Err(binarymos::Error::Value("type some text to route".into()));
    }
    let seed = RngSeed(seed);
    let w = Matrix::random_normal(GATING_DIM, GATING_DIM, 0.2, &mut seed.rng());
    let mut layer = init_from_pretrained(&w, experts, seed.derive(1))?;
    layer.router_w = Matrix::random_normal(GATING_DIM, experts, router_scale, &mut seed.derive(2).rng());
    let bytes = text.as_bytes();
    let mut x = Vec::with_capacity(bytes.len() * GATING_DIM);
    for &b in bytes {
        x.extend(embed(b, seed));
    }
    let x = Matrix::new(bytes.len(), GATING_DIM, x)?;
    let (g, scales) = layer.adaptive_scales(&x)?;
    let s_in_hat: Vec<Vec<f64>> = scales
        .s_in_hat
        .row_iter()
        .map(|r| r[..SCALE_CHANNELS].to_vec())
        .collect();
    let k = s_in_hat.len() as f64;
    let channel_variance = (0..SCALE_CHANNELS)
        .map(|c| {
            let mean = s_in_hat.iter().map(|r| r[c]).sum::<f64>() / k;
            s_in_hat.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / k
        })
        .collect();
    Ok(GatingReport {
        tokens: bytes.iter().map(|&b| (b as char).escape_default().to_string()).collect(),
        gates: g.matrix().row_iter().map(<[f64]>::to_vec).collect(),
        s_in_hat,
        channel_variance,
    })
}

/// Footprint of a LLaMA-shaped model under the five compared methods.
pub fn footprint(
    hidden: u64,
    ffn: u64,
    blocks: u64,
    vocab: u64,
    experts: u32,
    salient_ratio: f64,
) -> Result<Vec<FootprintRow>> {
    let model = ModelSpec::llama("custom", hidden, ffn, blocks, vocab, hidden * hidden);
    let methods = vec![
        MethodSpec::Float16,
        MethodSpec::Pbllm {
            salient_ratio,
            salient_bits: 8,
            index: SparseIndex::Bitmap,
        },
        MethodSpec::Billm {
            salient_ratio,
            group_mask_bits: 1,
        },
        MethodSpec::Onebit,
        MethodSpec::binarymos(experts),
    ];
    Ok(compression_table(&[model], &methods)?.rows)
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = compareSchemes)]
pub fn compare_schemes_js(
    n: usize,
    m: usize,
    outlier_fraction: f64,
    salient_ratio: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(compare_schemes(n, m, outlier_fraction, salient_ratio, seed as u64))
}

#[wasm_bindgen(js_name = exploreGating)]
pub fn explore_gating_js(text: &str, experts: usize, router_scale: f64, seed: u32) -> std::result::Result<String, JsError> {
    to_js(explore_gating(text, experts, router_scale, seed as u64))
}

#[wasm_bindgen(js_name = footprint)]
pub fn footprint_js(
    hidden: u32,
    ffn: u32,
    blocks: u32,
    vocab: u32,
    experts: u32,
    salient_ratio: f64,
) -> std::result::Result<String, JsError> {
    to_js(footprint(
        hidden as u64,
        ffn as u64,
        blocks as u64,
        vocab as u64,
        experts,
        salient_ratio,
    ))
}
