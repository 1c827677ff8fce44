//! On-disk model checkpoints: a JSON manifest plus one raw payload file.
//!
//! Layout of a checkpoint directory:
//!
//! * `manifest.json`: format tag, version, scheme, expert count, seed, the
//!   full model config, its SHA-256, and a tensor table. Each entry gives
//!   `name`, `dtype`, `shape`, `offset` and `nbytes` into the payload.
//! * `tensors.bin`: tensors back to back in table order, no padding.
//!
//! Dtypes:
//!
//! * `f32`: little-endian IEEE single precision, row-major.
//! * `u8`: raw bytes.
//! * `packed_bits`: shape `[rows, cols]`, stored as `rows · ⌈cols/64⌉`
//!   little-endian `u64` words; bit `j % 64` of word `j / 64` is column `j`,
//!   set for `+1`, padding bits zero.
//!
//! Binarized projections are stored in deployed form (signs, scales,
//! masks), so loading reproduces the inference model exactly and a
//! save-load-save cycle is byte-identical.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binarize::{PartialBinaryLayer, ResidualBinaryLayer, StaticBinaryLayer};
use crate::error::{Error, Result};
use crate::kernels::PackedBitMatrix;
use crate::numcore::Matrix;
use crate::train::{Block, FrozenWeights, Linear, Scheme, ToyDecoder, ToyDecoderConfig, PROJECTION_NAMES};

pub const CHECKPOINT_FORMAT: &str = "binarymos-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    U8,
    PackedBits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

impl TensorEntry {
    /// Payload size implied by dtype and shape.
    pub fn expected_bytes(&self) -> Result<u64> {
        let elems: usize = self.shape.iter().product();
        Ok(match self.dtype {
            DType::F32 => 4 * elems as u64,
            DType::U8 => elems as u64,
            DType::PackedBits => {
                if self.shape.len() != 2 {
                    return Err(Error::Checkpoint(format!(
                        "packed tensor '{}' must be two-dimensional",
                        self.name
                    )));
                }
                8 * (self.shape[0] * crate::kernels::words_per_row(self.shape[1])) as u64
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub scheme: Scheme,
    pub experts: usize,
    pub seed: u64,
    pub config: ToyDecoderConfig,
    pub config_sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub payload: Vec<u8>,
}

pub fn config_hash(config: &ToyDecoderConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Default)]
struct Writer {
    tensors: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, dtype: DType, shape: Vec<usize>, bytes: impl IntoIterator<Item = u8>) {
        let offset = self.payload.len() as u64;
        self.payload.extend(bytes);
        self.tensors.push(TensorEntry {
            name,
            dtype,
            shape,
            offset,
            nbytes: self.payload.len() as u64 - offset,
        });
    }

    fn f32(&mut self, name: String, shape: Vec<usize>, values: &[f64]) {
        let bytes = values.iter().flat_map(|&v| (v as f32).to_le_bytes());
        self.push(name, DType::F32, shape, bytes);
    }

    fn matrix(&mut self, name: String, m: &Matrix) {
        self.f32(name, vec![m.rows(), m.cols()], m.data());
    }

    fn vector(&mut self, name: String, v: &[f64]) {
        self.f32(name, vec![v.len()], v);
    }

    fn bits(&mut self, name: String, b: &PackedBitMatrix) {
        let bytes = b.words().iter().flat_map(|w| w.to_le_bytes());
        self.push(name, DType::PackedBits, vec![b.rows(), b.cols()], bytes);
    }

    fn bytes(&mut self, name: String, v: &[u8]) {
        self.push(name, DType::U8, vec![v.len()], v.iter().copied());
    }
}

struct Reader<'a> {
    payload: &'a [u8],
    entries: HashMap<&'a str, &'a TensorEntry>,
    used: usize,
}

impl<'a> Reader<'a> {
    fn entry(&mut self, name: &str, dtype: DType) -> Result<&'a TensorEntry> {
        let e = *self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if e.dtype != dtype {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dtype {:?}, expected {dtype:?}",
                e.dtype
            )));
        }
        self.used += 1;
        Ok(e)
    }

    fn raw(&self, e: &TensorEntry) -> &'a [u8] {
        &self.payload[e.offset as usize..(e.offset + e.nbytes) as usize]
    }

    fn check_shape(e: &TensorEntry, shape: &[usize]) -> Result<()> {
        if e.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, expected {shape:?}",
                e.name, e.shape
            )));
        }
        Ok(())
    }

    fn f32(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let e = self.entry(name, DType::F32)?;
        Self::check_shape(e, shape)?;
        Ok(self
            .raw(e)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let data = self.f32(name, &[rows, cols])?;
        Matrix::new(rows, cols, data)
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        self.f32(name, &[len])
    }

    fn bits(&mut self, name: &str, rows: usize, cols: usize) -> Result<PackedBitMatrix> {
        let e = self.entry(name, DType::PackedBits)?;
        Self::check_shape(e, &[rows, cols])?;
        let words = self
            .raw(e)
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("eight-byte chunk")))
            .collect();
        PackedBitMatrix::from_words(rows, cols, words)
            .map_err(|err| Error::Checkpoint(format!("tensor '{name}': {err}")))
    }

    fn bytes(&mut self, name: &str) -> Result<Vec<u8>> {
        let e = self.entry(name, DType::U8)?;
        Ok(self.raw(e).to_vec())
    }
}

fn write_linear(w: &mut Writer, prefix: &str, lin: &Linear) -> Result<()> {
    let name = |s: &str| format!("{prefix}.{s}");
    match lin.scheme {
        Scheme::Float => w.matrix(name("weight"), &lin.weight),
        Scheme::Dual | Scheme::Mos => {
            w.bits(name("signs"), &PackedBitMatrix::sign_of(&lin.weight));
            let (s_in, s_out) = match (&lin.s_in, &lin.s_out) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Checkpoint(format!("'{prefix}' lacks its scale tensors"))),
            };
            w.matrix(name("s_in"), s_in);
            w.matrix(name("s_out"), s_out);
            if lin.scheme == Scheme::Mos {
                let r = lin
                    .router
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint(format!("'{prefix}' lacks its router")))?;
                w.matrix(name("router"), r);
            }
        }
        Scheme::Static | Scheme::Partial | Scheme::Residual => match lin.static_weights()? {
            Some(FrozenWeights::Static(l)) => {
                w.bits(name("signs"), &l.signs);
                w.vector(name("alpha"), &l.alpha);
                w.vector(name("offset"), &l.offset);
            }
            Some(FrozenWeights::Partial(l)) => {
                w.bits(name("signs"), &l.signs);
                w.vector(name("alpha"), &l.alpha);
                w.vector(name("offset"), &l.offset);
                w.bits(name("salient_mask"), &l.salient_mask);
                w.bytes(name("salient_codes"), &l.salient_codes);
                w.vector(name("salient_scale"), &l.salient_scale);
                w.vector(name("salient_zero"), &l.salient_zero);
            }
            Some(FrozenWeights::Residual(l)) => {
                w.bits(name("signs"), &l.signs);
                w.bits(name("group_mask"), &l.group_mask);
                w.vector(name("offset"), &l.offset);
                w.vector(name("alpha_concentrated"), &l.alpha_concentrated);
                w.vector(name("alpha_sparse"), &l.alpha_sparse);
                w.bits(name("residual_signs"), &l.residual_signs);
                w.vector(name("residual_alpha"), &l.residual_alpha);
            }
            None => unreachable!("static schemes always have deployed weights"),
        },
    }
    Ok(())
}

fn read_linear(r: &mut Reader, prefix: &str, config: &ToyDecoderConfig, n: usize, m: usize) -> Result<Linear> {
    let name = |s: &str| format!("{prefix}.{s}");
    let ratio = config.salient_ratio;
    Ok(match config.scheme {
        Scheme::Float => Linear::float(r.matrix(&name("weight"), n, m)?),
        Scheme::Dual | Scheme::Mos => {
            let e = if config.scheme == Scheme::Mos { config.experts } else { 1 };
            let signs = r.bits(&name("signs"), n, m)?.unpack();
            let s_in = r.matrix(&name("s_in"), e, m)?;
            let s_out = r.matrix(&name("s_out"), e, n)?;
            let router = if config.scheme == Scheme::Mos {
                Some(r.matrix(&name("router"), m, e)?)
            } else {
                None
            };
            Linear::from_parts(config.scheme, signs, Some(s_in), Some(s_out), router)
        }
        Scheme::Static => Linear::from_frozen(
            FrozenWeights::Static(StaticBinaryLayer {
                signs: r.bits(&name("signs"), n, m)?,
                alpha: r.vector(&name("alpha"), n)?,
                offset: r.vector(&name("offset"), n)?,
            }),
            ratio,
        ),
        Scheme::Partial => {
            let signs = r.bits(&name("signs"), n, m)?;
            let alpha = r.vector(&name("alpha"), n)?;
            let offset = r.vector(&name("offset"), n)?;
            let salient_mask = r.bits(&name("salient_mask"), n, m)?;
            let salient_codes = r.bytes(&name("salient_codes"))?;
            if salient_codes.len() != salient_mask.count_ones() {
                return Err(Error::Checkpoint(format!(
                    "'{prefix}' has {} salient codes for {} salient positions",
                    salient_codes.len(),
                    salient_mask.count_ones()
                )));
            }
            Linear::from_frozen(
                FrozenWeights::Partial(PartialBinaryLayer {
                    signs,
                    alpha,
                    offset,
                    salient_mask,
                    salient_codes,
                    salient_scale: r.vector(&name("salient_scale"), n)?,
                    salient_zero: r.vector(&name("salient_zero"), n)?,
                    salient_ratio: ratio,
                }),
                ratio,
            )
        }
        Scheme::Residual => Linear::from_frozen(
            FrozenWeights::Residual(ResidualBinaryLayer {
                signs: r.bits(&name("signs"), n, m)?,
                group_mask: r.bits(&name("group_mask"), n, m)?,
                offset: r.vector(&name("offset"), n)?,
                alpha_concentrated: r.vector(&name("alpha_concentrated"), n)?,
                alpha_sparse: r.vector(&name("alpha_sparse"), n)?,
                residual_signs: r.bits(&name("residual_signs"), n, m)?,
                residual_alpha: r.vector(&name("residual_alpha"), n)?,
            }),
            ratio,
        ),
    })
}

impl Checkpoint {
    /// Deployed form of `model`: reals rounded to single precision, signs
    /// packed, static schemes binarized.
    pub fn from_model(model: &ToyDecoder, seed: u64) -> Result<Self> {
        let config = &model.config;
        let mut w = Writer::default();
        w.matrix("tok_emb".into(), &model.tok_emb);
        w.matrix("pos_emb".into(), &model.pos_emb);
        for (l, b) in model.blocks.iter().enumerate() {
            w.matrix(format!("blocks.{l}.attn_norm"), &b.attn_norm);
            w.matrix(format!("blocks.{l}.mlp_norm"), &b.mlp_norm);
            for (p, lin) in b.proj.iter().enumerate() {
                if lin.scheme != config.scheme {
                    return Err(Error::Checkpoint(format!(
                        "projection blocks.{l}.{} is {}, model is {}",
                        PROJECTION_NAMES[p], lin.scheme, config.scheme
                    )));
                }
                write_linear(&mut w, &format!("blocks.{l}.{}", PROJECTION_NAMES[p]), lin)?;
            }
        }
        w.matrix("final_norm".into(), &model.final_norm);
        w.matrix("lm_head".into(), &model.lm_head);
        let payload_sha256 = hex::encode(Sha256::digest(&w.payload));
        Ok(Checkpoint {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                scheme: config.scheme,
                experts: config.experts,
                seed,
                config: config.clone(),
                config_sha256: config_hash(config),
                payload_bytes: w.payload.len() as u64,
                payload_sha256,
                tensors: w.tensors,
            },
            payload: w.payload,
        })
    }

    /// Checks tags, hashes and that the tensor table tiles the payload.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag '{}'", m.format)));
        }
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", m.version)));
        }
        m.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if m.scheme != m.config.scheme || m.experts != m.config.experts {
            return Err(Error::Checkpoint("manifest header disagrees with its config".into()));
        }
        if config_hash(&m.config) != m.config_sha256 {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        if self.payload.len() as u64 != m.payload_bytes {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, manifest declares {}",
                self.payload.len(),
                m.payload_bytes
            )));
        }
        if hex::encode(Sha256::digest(&self.payload)) != m.payload_sha256 {
            return Err(Error::Checkpoint("payload checksum mismatch".into()));
        }
        let mut cursor = 0u64;
        for t in &m.tensors {
            if t.offset != cursor || t.nbytes != t.expected_bytes()? {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' at offset {} with {} bytes does not match its shape {:?}",
                    t.name, t.offset, t.nbytes, t.shape
                )));
            }
            cursor += t.nbytes;
        }
        if cursor != m.payload_bytes {
            return Err(Error::Checkpoint("tensor table does not cover the payload".into()));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<ToyDecoder> {
        self.validate()?;
        let config = &self.manifest.config;
        let mut entries = HashMap::new();
        for t in &self.manifest.tensors {
            if entries.insert(t.name.as_str(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor '{}'", t.name)));
            }
        }
        let mut r = Reader {
            payload: &self.payload,
            entries,
            used: 0,
        };
        let h = config.hidden;
        let tok_emb = r.matrix("tok_emb", config.vocab, h)?;
        let pos_emb = r.matrix("pos_emb", config.seq_len, h)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let attn_norm = r.matrix(&format!("blocks.{l}.attn_norm"), 1, h)?;
            let mlp_norm = r.matrix(&format!("blocks.{l}.mlp_norm"), 1, h)?;
            let shapes = config.block_projections();
            let mut proj = Vec::with_capacity(7);
            for (name, n, m) in shapes {
                proj.push(read_linear(&mut r, &format!("blocks.{l}.{name}"), config, n, m)?);
            }
            blocks.push(Block {
                attn_norm,
                mlp_norm,
                proj: proj.try_into().expect("seven projections"),
            });
        }
        let final_norm = r.matrix("final_norm", 1, h)?;
        let lm_head = r.matrix("lm_head", config.vocab, h)?;
        if r.used != self.manifest.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} unexpected tensors",
                self.manifest.tensors.len() - r.used
            )));
        }
        Ok(ToyDecoder {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn manifest_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mp = dir.join(MANIFEST_FILE);
        std::fs::write(&mp, self.manifest_json()).map_err(|e| Error::io(&mp, e))?;
        let pp = dir.join(PAYLOAD_FILE);
        std::fs::write(&pp, &self.payload).map_err(|e| Error::io(&pp, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        let pp = dir.join(PAYLOAD_FILE);
        let payload = std::fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
        let ck = Checkpoint { manifest, payload };
        ck.validate()?;
        Ok(ck)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorEntry> {
        self.manifest.tensors.iter().find(|t| t.name == name)
    }

    /// Values of an `f32` tensor widened to `f64`.
    pub fn f32_values(&self, name: &str) -> Result<Vec<f64>> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
        if t.dtype != DType::F32 {
            return Err(Error::Checkpoint(format!("tensor '{name}' is not f32")));
        }
        let raw = &self.payload[t.offset as usize..(t.offset + t.nbytes) as usize];
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

/// Deployed model: what loading the checkpoint of `model` yields.
pub fn deploy(model: &ToyDecoder) -> Result<ToyDecoder> {
    Checkpoint::from_model(model, 0)?.to_model()
}

pub fn save_model(model: &ToyDecoder, seed: u64, dir: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::from_model(model, seed)?;
    ck.save(dir)?;
    Ok(ck)
}

pub fn load_model(dir: &Path) -> Result<ToyDecoder> {
    Checkpoint::load(dir)?.to_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngSeed;

    fn tiny(scheme: Scheme) -> ToyDecoderConfig {
        ToyDecoderConfig {
            vocab: 256,
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn: 70,
            seq_len: 5,
            scheme,
            experts: 3,
            salient_ratio: 0.1,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for scheme in Scheme::ALL {
            let model = ToyDecoder::new(&tiny(scheme), RngSeed(4)).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let (a, b) = (dir.path().join("a"), dir.path().join("b"));
            save_model(&model, 7, &a).unwrap();
            let loaded = load_model(&a).unwrap();
            save_model(&loaded, 7, &b).unwrap();
            for f in [MANIFEST_FILE, PAYLOAD_FILE] {
                assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{scheme} {f}");
            }
        }
    }

    #[test]
    fn deployed_model_matches_after_reload() {
        for scheme in Scheme::ALL {
            let model = ToyDecoder::new(&tiny(scheme), RngSeed(5)).unwrap();
            let deployed = deploy(&model).unwrap();
            let again = deploy(&deployed).unwrap();
            let text: &[u8] = b"hello";
            let a = deployed.forward(&[text]).unwrap().logits;
            let b = again.forward(&[text]).unwrap().logits;
            assert_eq!(a, b, "{scheme}");
            let latent = model.forward(&[text]).unwrap().logits;
            assert!(a.max_abs_diff(&latent) < 1e-4, "{scheme}");
        }
    }

    #[test]
    fn packed_sizes_follow_the_word_layout() {
        let model = ToyDecoder::new(&tiny(Scheme::Mos), RngSeed(6)).unwrap();
        let ck = Checkpoint::from_model(&model, 0).unwrap();
        let down = ck.tensor("blocks.0.down.signs").unwrap();
        assert_eq!(down.shape, vec![8, 70]);
        assert_eq!(down.nbytes, 8 * 2 * 8);
        let up = ck.tensor("blocks.0.up.router").unwrap();
        assert_eq!(up.shape, vec![8, 3]);
        assert_eq!(up.nbytes, 8 * 3 * 4);
    }

    #[test]
    fn corruption_is_detected() {
        let model = ToyDecoder::new(&tiny(Scheme::Dual), RngSeed(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_model(&model, 0, dir.path()).unwrap();
        let payload = dir.path().join(PAYLOAD_FILE);
        let bytes = std::fs::read(&payload).unwrap();

        std::fs::write(&payload, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checkpoint(_))));

        let mut flipped = bytes.clone();
        flipped[10] ^= 1;
        std::fs::write(&payload, &flipped).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checkpoint(_))));

        std::fs::write(&payload, &bytes).unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "{not json").unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Checkpoint(_))));

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(empty.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn tampered_config_fails_hash() {
        let model = ToyDecoder::new(&tiny(Scheme::Float), RngSeed(9)).unwrap();
        let mut ck = Checkpoint::from_model(&model, 0).unwrap();
        ck.manifest.config.seq_len = 6;
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
    }
}
