//! Distillation run configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use binarymos::corpus::{load_text, synthetic_text, Corpus, TextStyle};
use binarymos::numcore::RngSeed;
use binarymos::train::{DistillConfig, ToyDecoderConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ToyDecoderConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub teacher: TeacherSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    /// Existing teacher checkpoint, relative to the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Pre-training schedule when the teacher is trained in-run.
    #[serde(default = "teacher_defaults")]
    pub train: DistillConfig,
}

fn teacher_defaults() -> DistillConfig {
    DistillConfig {
        peak_lr: 1e-3,
        ..DistillConfig::default()
    }
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            path: None,
            train: teacher_defaults(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction: f64,
    pub corpus: Vec<CorpusEntry>,
}

fn default_valid_fraction() -> f64 {
    binarymos::corpus::DEFAULT_VALID_FRACTION
}

/// Either a text file or generated text of a given style and length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<String>,
    #[serde(default)]
    pub bytes: Option<usize>,
    /// Seed of the generated text, independent of the training seed.
    #[serde(default)]
    pub text_seed: u64,
    pub weight: f64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.model.validate()?;
        cfg.distill.validate()?;
        cfg.teacher.train.validate()?;
        if cfg.data.corpus.is_empty() {
            bail!("config lists no [[data.corpus]] entries");
        }
        Ok(cfg)
    }

    /// Loads or generates every corpus; relative paths resolve against `base`.
    pub fn corpora(&self, base: &Path) -> Result<(Vec<Corpus>, Vec<f64>)> {
        let mut corpora = Vec::new();
        let mut weights = Vec::new();
        for (i, entry) in self.data.corpus.iter().enumerate() {
            let corpus = match (&entry.path, &entry.synthetic) {
                (Some(p), None) => {
                    let full = base.join(p);
                    load_text(&full).with_context(|| format!("corpus {i}"))?
                }
                (None, Some(style)) => {
                    let style: TextStyle = style.parse()?;
                    let len = entry.bytes.context("synthetic corpus needs `bytes`")?;
                    Corpus::from_bytes(
                        format!("{}-{i}", style_name(style)),
                        synthetic_text(style, len, RngSeed(entry.text_seed)),
                    )
                }
                _ => bail!("corpus {i} needs exactly one of `path` or `synthetic`"),
            };
            if corpus.is_empty() {
                bail!("corpus {i} ('{}') is empty", corpus.name());
            }
            corpora.push(corpus.with_valid_fraction(self.data.valid_fraction)?);
            weights.push(entry.weight);
        }
        Ok((corpora, weights))
    }
}

fn style_name(style: TextStyle) -> &'static str {
    match style {
        TextStyle::Encyclopedic => "encyclopedic",
        TextStyle::Web => "web",
    }
}
