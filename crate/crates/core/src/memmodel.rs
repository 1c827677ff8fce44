//! Deployment-size accounting for float16 and binarized models.
//!
//! Binarized layers are costed from the storage of each scheme: packed sign
//! planes, masks, sparse entries, and 16-bit scales and router weights.
//! Embeddings, the LM head and other full-precision parameters stay at 16
//! bits for every method.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per gigabyte in all reports (decimal).
pub const BYTES_PER_GB: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    /// Output features.
    pub n: u64,
    /// Input features.
    pub m: u64,
    #[serde(default = "one")]
    pub count: u64,
}

fn one() -> u64 {
    1
}

impl LayerShape {
    pub fn new(name: &str, n: u64, m: u64, count: u64) -> Self {
        LayerShape {
            name: name.to_string(),
            n,
            m,
            count,
        }
    }

    pub fn params(&self) -> u64 {
        self.n * self.m * self.count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Linear layers subject to binarization.
    #[serde(default)]
    pub layers: Vec<LayerShape>,
    /// Layers kept at 16 bits (embedding, LM head, norms).
    #[serde(default)]
    pub excluded: Vec<LayerShape>,
    /// Any further 16-bit parameters not itemized above.
    #[serde(default)]
    pub other_fp16_params: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config(format!("model '{}' has no binarizable layers", self.name)));
        }
        for l in self.layers.iter() {
            if l.n == 0 || l.m == 0 {
                return Err(Error::Config(format!(
                    "model '{}': layer '{}' has a zero dimension",
                    self.name, l.name
                )));
            }
        }
        Ok(())
    }

    pub fn binarized_params(&self) -> u64 {
        self.layers.iter().map(LayerShape::params).sum()
    }

    pub fn fp16_params(&self) -> u64 {
        self.excluded.iter().map(LayerShape::params).sum::<u64>() + self.other_fp16_params
    }

    pub fn total_params(&self) -> u64 {
        self.binarized_params() + self.fp16_params()
    }

    /// LLaMA-style decoder: seven projections per block, untied embedding and
    /// LM head, two norms per block plus a final norm.
    pub fn llama(name: &str, hidden: u64, ffn: u64, blocks: u64, vocab: u64, other_fp16_params: u64) -> Self {
        ModelSpec {
            name: name.to_string(),
            layers: vec![
                LayerShape::new("q_proj", hidden, hidden, blocks),
                LayerShape::new("k_proj", hidden, hidden, blocks),
                LayerShape::new("v_proj", hidden, hidden, blocks),
                LayerShape::new("o_proj", hidden, hidden, blocks),
                LayerShape::new("gate_proj", ffn, hidden, blocks),
                LayerShape::new("up_proj", ffn, hidden, blocks),
                LayerShape::new("down_proj", hidden, ffn, blocks),
            ],
            excluded: vec![
                LayerShape::new("embed_tokens", vocab, hidden, 1),
                LayerShape::new("lm_head", vocab, hidden, 1),
                LayerShape::new("norms", hidden, 1, 2 * blocks + 1),
            ],
            other_fp16_params,
        }
    }

    /// 7B configuration. `other_fp16_params` is calibrated to one
    /// `hidden × hidden` block so the float16 total lands on 13.51 GB.
    pub fn llama_7b() -> Self {
        Self::llama("LLaMA-7B", 4096, 11008, 32, 32000, 4096 * 4096)
    }

    /// 13B configuration, calibrated the same way as [`ModelSpec::llama_7b`].
    pub fn llama_13b() -> Self {
        Self::llama("LLaMA-13B", 5120, 13824, 40, 32000, 5120 * 5120)
    }
}

/// How the coordinates of sparse salient weights are stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum SparseIndex {
    /// Not counted.
    None,
    /// One bit per weight marking salient positions.
    #[default]
    Bitmap,
    /// An explicit coordinate of `bits` bits per salient entry.
    Coordinate { bits: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MethodSpec {
    Float16,
    Pbllm {
        #[serde(default = "default_salient_ratio")]
        salient_ratio: f64,
        #[serde(default = "default_salient_bits")]
        salient_bits: u32,
        #[serde(default)]
        index: SparseIndex,
    },
    Billm {
        #[serde(default = "default_salient_ratio")]
        salient_ratio: f64,
        #[serde(default = "default_group_mask_bits")]
        group_mask_bits: u32,
    },
    Onebit,
    Binarymos {
        #[serde(default = "default_experts")]
        experts: u32,
    },
}

fn default_salient_ratio() -> f64 {
    0.1
}

fn default_salient_bits() -> u32 {
    8
}

fn default_group_mask_bits() -> u32 {
    1
}

fn default_experts() -> u32 {
    crate::mos::DEFAULT_EXPERTS as u32
}

impl MethodSpec {
    pub fn pbllm() -> Self {
        MethodSpec::Pbllm {
            salient_ratio: default_salient_ratio(),
            salient_bits: default_salient_bits(),
            index: SparseIndex::Bitmap,
        }
    }

    pub fn billm() -> Self {
        MethodSpec::Billm {
            salient_ratio: default_salient_ratio(),
            group_mask_bits: default_group_mask_bits(),
        }
    }

    pub fn binarymos(experts: u32) -> Self {
        MethodSpec::Binarymos { experts }
    }

    /// The five methods of the comparison table, in column order.
    pub fn table_methods() -> Vec<MethodSpec> {
        vec![
            MethodSpec::Float16,
            MethodSpec::pbllm(),
            MethodSpec::billm(),
            MethodSpec::Onebit,
            MethodSpec::binarymos(4),
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            MethodSpec::Float16 => "float16",
            MethodSpec::Pbllm { .. } => "pbllm",
            MethodSpec::Billm { .. } => "billm",
            MethodSpec::Onebit => "onebit",
            MethodSpec::Binarymos { .. } => "binarymos",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ratio_ok = |r: f64| (0.0..1.0).contains(&r);
        match *self {
            MethodSpec::Pbllm {
                salient_ratio,
                salient_bits,
                index,
            } => {
                if !ratio_ok(salient_ratio) {
                    return Err(Error::param(format!("pbllm salient ratio {salient_ratio} outside [0, 1)")));
                }
                if salient_bits == 0 || matches!(index, SparseIndex::Coordinate { bits: 0 }) {
                    return Err(Error::param("pbllm bit widths must be at least 1"));
                }
            }
            MethodSpec::Billm {
                salient_ratio,
                group_mask_bits,
            } => {
                if !ratio_ok(salient_ratio) {
                    return Err(Error::param(format!("billm salient ratio {salient_ratio} outside [0, 1)")));
                }
                if group_mask_bits == 0 {
                    return Err(Error::param("billm group mask needs at least 1 bit"));
                }
            }
            MethodSpec::Binarymos { experts } => {
                if experts == 0 {
                    return Err(Error::param("binarymos needs at least one expert"));
                }
            }
            MethodSpec::Float16 | MethodSpec::Onebit => {}
        }
        Ok(())
    }
}

/// Extra real parameters of a mixture-of-scales layer over a dual-scale one.
pub fn mos_extra_params(n: u64, m: u64, experts: u64) -> u64 {
    (experts - 1) * (n + m) + m * experts
}

/// Storage bytes of one `n × m` layer under `method`.
pub fn layer_bytes(n: u64, m: u64, method: &MethodSpec) -> Result<f64> {
    if n == 0 || m == 0 {
        return Err(Error::param("layer dimensions must be positive"));
    }
    method.validate()?;
    let (nf, mf) = (n as f64, m as f64);
    let weights = nf * mf;
    let sign_plane = weights / 8.0;
    let bytes = match *method {
        MethodSpec::Float16 => 2.0 * weights,
        MethodSpec::Onebit => sign_plane + 2.0 * (nf + mf),
        MethodSpec::Binarymos { experts } => {
            let e = experts as f64;
            sign_plane + 2.0 * (e * (nf + mf) + mf * e)
        }
        MethodSpec::Pbllm {
            salient_ratio: r,
            salient_bits,
            index,
        } => {
            let index_bytes = match index {
                SparseIndex::None => 0.0,
                SparseIndex::Bitmap => sign_plane,
                SparseIndex::Coordinate { bits } => r * weights * bits as f64 / 8.0,
            };
            // per row: binary scale, offset, salient scale, salient zero point
            (1.0 - r) * sign_plane + r * weights * salient_bits as f64 / 8.0 + index_bytes + 2.0 * 4.0 * nf
        }
        MethodSpec::Billm {
            salient_ratio: r,
            group_mask_bits,
        } => {
            // per row: offset and three group scales
            sign_plane + sign_plane * group_mask_bits as f64 + r * sign_plane + 2.0 * 4.0 * nf
        }
    };
    Ok(bytes)
}

/// Average bits per binarized weight, excluding 16-bit layers.
pub fn bits_per_weight(n: u64, m: u64, method: &MethodSpec) -> Result<f64> {
    Ok(layer_bytes(n, m, method)? * 8.0 / (n * m) as f64)
}

pub fn model_bytes(model: &ModelSpec, method: &MethodSpec) -> Result<f64> {
    model.validate()?;
    let mut total = 0.0;
    for l in &model.layers {
        total += l.count as f64 * layer_bytes(l.n, l.m, method)?;
    }
    Ok(total + 2.0 * model.fp16_params() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FootprintRow {
    pub model: String,
    pub method: String,
    pub bytes: f64,
    pub gigabytes: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionTable {
    pub rows: Vec<FootprintRow>,
}

pub const FOOTPRINT_CSV_HEADER: &str = "model,method,bytes,gigabytes,ratio";

impl CompressionTable {
    pub fn get(&self, model: &str, method: &str) -> Option<&FootprintRow> {
        self.rows.iter().find(|r| r.model == model && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(FOOTPRINT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.0},{:.4},{:.4}", r.model, r.method, r.bytes, r.gigabytes, r.ratio);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mw = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<mw$}  {:<10}  {:>10}  {:>8}\n", "model", "method", "size", "ratio");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<mw$}  {:<10}  {:>7.2} GB  {:>7.2}x",
                r.model, r.method, r.gigabytes, r.ratio
            );
        }
        out
    }
}

/// Bytes and compression ratio over float16 for every (model, method) pair.
pub fn compression_table(models: &[ModelSpec], methods: &[MethodSpec]) -> Result<CompressionTable> {
    if models.is_empty() || methods.is_empty() {
        return Err(Error::param("compression table needs at least one model and one method"));
    }
    let mut rows = Vec::with_capacity(models.len() * methods.len());
    for model in models {
        let fp16 = model_bytes(model, &MethodSpec::Float16)?;
        for method in methods {
            let bytes = model_bytes(model, method)?;
            rows.push(FootprintRow {
                model: model.name.clone(),
                method: method.label().to_string(),
                bytes,
                gigabytes: bytes / BYTES_PER_GB,
                ratio: fp16 / bytes,
            });
        }
    }
    Ok(CompressionTable { rows })
}

/// Key-value footprint configuration: `[[model]]` and `[[method]]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintConfig {
    #[serde(default, rename = "model")]
    pub models: Vec<ModelSpec>,
    #[serde(default, rename = "method")]
    pub methods: Vec<MethodSpec>,
}

impl FootprintConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: FootprintConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("footprint config: {e}")))?;
        if cfg.models.is_empty() {
            return Err(Error::Config("footprint config lists no [[model]]".into()));
        }
        if cfg.methods.is_empty() {
            return Err(Error::Config("footprint config lists no [[method]]".into()));
        }
        for m in &cfg.models {
            m.validate()?;
        }
        for m in &cfg.methods {
            m.validate()?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("footprint config serializes")
    }

    pub fn table(&self) -> Result<CompressionTable> {
        compression_table(&self.models, &self.methods)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gb(model: &ModelSpec, method: &MethodSpec) -> f64 {
        model_bytes(model, method).unwrap() / BYTES_PER_GB
    }

    #[test]
    fn float16_single_weight() {
        assert_eq!(layer_bytes(1, 1, &MethodSpec::Float16).unwrap(), 2.0);
    }

    #[test]
    fn overhead_at_4096() {
        let extra = mos_extra_params(4096, 4096, 4);
        assert_eq!(extra, 40_960);
        let pct = 100.0 * extra as f64 / (4096.0 * 4096.0);
        assert!((pct - 0.244).abs() < 1e-3);
        let bytes_diff = layer_bytes(4096, 4096, &MethodSpec::binarymos(4)).unwrap()
            - layer_bytes(4096, 4096, &MethodSpec::Onebit).unwrap();
        assert_eq!(bytes_diff, 2.0 * 40_960.0);
    }

    #[test]
    fn pbllm_average_bits_without_index() {
        let m = MethodSpec::Pbllm {
            salient_ratio: 0.1,
            salient_bits: 8,
            index: SparseIndex::None,
        };
        let n = 1 << 20;
        let bits = bits_per_weight(n, n, &m).unwrap();
        assert!((bits - 1.7).abs() < 1e-4, "{bits}");
    }

    #[test]
    fn calibrated_totals_track_published_sizes() {
        let (m7, m13) = (ModelSpec::llama_7b(), ModelSpec::llama_13b());
        let within = |got: f64, want: f64, tol: f64| (got - want).abs() / want <= tol;
        assert!(within(gb(&m7, &MethodSpec::Float16), 13.51, 0.02));
        assert!(within(gb(&m13, &MethodSpec::Float16), 26.20, 0.02));
        assert!(within(gb(&m7, &MethodSpec::Onebit), 1.37, 0.02));
        assert!(within(gb(&m13, &MethodSpec::Onebit), 2.29, 0.02));
        assert!(within(gb(&m7, &MethodSpec::binarymos(4)), 1.40, 0.02));
        assert!(within(gb(&m13, &MethodSpec::binarymos(4)), 2.33, 0.02));
        assert!(within(gb(&m7, &MethodSpec::pbllm()), 2.78, 0.10));
        assert!(within(gb(&m13, &MethodSpec::pbllm()), 5.02, 0.10));
        assert!(within(gb(&m7, &MethodSpec::billm()), 2.28, 0.10));
        assert!(within(gb(&m13, &MethodSpec::billm()), 4.06, 0.10));
    }

    #[test]
    fn ratios_and_ordering() {
        let t = compression_table(
            &[ModelSpec::llama_7b(), ModelSpec::llama_13b()],
            &MethodSpec::table_methods(),
        )
        .unwrap();
        for model in ["LLaMA-7B", "LLaMA-13B"] {
            let r = |m: &str| t.get(model, m).unwrap().ratio;
            assert_eq!(r("float16"), 1.0);
            assert!(r("onebit") >= r("binarymos"));
            assert!(r("binarymos") >= r("billm"));
            assert!(r("billm") >= r("pbllm"));
            let fp16 = t.get(model, "float16").unwrap().bytes;
            let mos = t.get(model, "binarymos").unwrap();
            assert_eq!(mos.ratio, fp16 / mos.bytes);
        }
        let mos = |m: &str| t.get(m, "binarymos").unwrap().ratio;
        assert!(mos("LLaMA-13B") > mos("LLaMA-7B"));
        assert!((mos("LLaMA-7B") - 9.65).abs() <= 0.2);
        assert!((mos("LLaMA-13B") - 11.24).abs() <= 0.2);
    }

    #[test]
    fn monotone_in_experts_and_salient_ratio() {
        let mut prev = 0.0;
        for e in 1..10 {
            let b = layer_bytes(512, 256, &MethodSpec::binarymos(e)).unwrap();
            assert!(b > prev);
            prev = b;
        }
        let mut prev = 0.0;
        for r in [0.0, 0.05, 0.1, 0.2, 0.5] {
            let m = MethodSpec::Pbllm {
                salient_ratio: r,
                salient_bits: 8,
                index: SparseIndex::Bitmap,
            };
            let b = layer_bytes(512, 256, &m).unwrap();
            assert!(b > prev);
            prev = b;
        }
    }

    #[test]
    fn invalid_methods_are_rejected() {
        let bad = [
            MethodSpec::Binarymos { experts: 0 },
            MethodSpec::Pbllm {
                salient_ratio: 1.0,
                salient_bits: 8,
                index: SparseIndex::Bitmap,
            },
            MethodSpec::Pbllm {
                salient_ratio: 0.1,
                salient_bits: 0,
                index: SparseIndex::Bitmap,
            },
            MethodSpec::Billm {
                salient_ratio: -0.1,
                group_mask_bits: 1,
            },
        ];
        for m in bad {
            assert!(matches!(layer_bytes(8, 8, &m), Err(Error::Parameter(_))), "{m:?}");
        }
        assert!(compression_table(&[ModelSpec::llama_7b()], &[]).is_err());
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = FootprintConfig {
            models: vec![ModelSpec::llama_7b()],
            methods: MethodSpec::table_methods(),
        };
        let parsed = FootprintConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(parsed, cfg);
        let no_methods = "[[model]]\nname = \"x\"\n[[model.layers]]\nname = \"a\"\nn = 2\nm = 2\n";
        assert!(matches!(FootprintConfig::parse(no_methods), Err(Error::Config(_))));
        let coord = "[[model]]\nname = \"x\"\n[[model.layers]]\nname = \"a\"\nn = 2\nm = 2\n\
                     [[method]]\nkind = \"pbllm\"\nindex = { type = \"coordinate\", bits = 32 }\n";
        let parsed = FootprintConfig::parse(coord).unwrap();
        assert_eq!(
            parsed.methods[0],
            MethodSpec::Pbllm {
                salient_ratio: 0.1,
                salient_bits: 8,
                index: SparseIndex::Coordinate { bits: 32 }
            }
        );
    }
}
