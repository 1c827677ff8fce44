use serde::{Deserialize, Serialize};

use crate::corpus::VOCAB_SIZE;
use crate::error::{Error, Result};

/// How each projection inside the decoder blocks stores its weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Full-precision weights.
    Float,
    /// Absolute-mean binarization with a per-row scale.
    Static,
    /// Signs with learnable input and output scale vectors.
    Dual,
    /// Salient weights kept at 8 bits, the rest binarized.
    Partial,
    /// Split binarization with a residual plane on the salient group.
    Residual,
    /// Mixture of scaling experts selected per token by a router.
    Mos,
}

impl Scheme {
    pub const ALL: [Scheme; 6] = [
        Scheme::Float,
        Scheme::Static,
        Scheme::Dual,
        Scheme::Partial,
        Scheme::Residual,
        Scheme::Mos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Float => "float",
            Scheme::Static => "static",
            Scheme::Dual => "dual",
            Scheme::Partial => "partial",
            Scheme::Residual => "residual",
            Scheme::Mos => "mos",
        }
    }

    pub fn is_binary(self) -> bool {
        self != Scheme::Float
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::param(format!("unknown layer scheme '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDecoderConfig {
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub seq_len: usize,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_experts")]
    pub experts: usize,
    /// Salient fraction for the partial and residual schemes.
    #[serde(default = "default_salient_ratio")]
    pub salient_ratio: f64,
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

fn default_scheme() -> Scheme {
    Scheme::Float
}

fn default_experts() -> usize {
    crate::mos::DEFAULT_EXPERTS
}

fn default_salient_ratio() -> f64 {
    0.1
}

impl Default for ToyDecoderConfig {
    /// About 140k parameters: two blocks of width 64.
    fn default() -> Self {
        ToyDecoderConfig {
            vocab: VOCAB_SIZE,
            hidden: 64,
            layers: 2,
            heads: 4,
            ffn: 172,
            seq_len: 64,
            scheme: Scheme::Float,
            experts: crate::mos::DEFAULT_EXPERTS,
            salient_ratio: 0.1,
        }
    }
}

impl ToyDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("seq_len", self.seq_len),
            ("experts", self.experts),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab {} cannot hold byte tokens (needs {VOCAB_SIZE})",
                self.vocab
            )));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.salient_ratio) {
            return Err(Error::Config(format!("salient ratio {} outside [0, 1)", self.salient_ratio)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Same architecture with a different projection scheme.
    pub fn with_scheme(&self, scheme: Scheme, experts: usize) -> Self {
        ToyDecoderConfig {
            scheme,
            experts,
            ..self.clone()
        }
    }

    /// `(name, n, m)` of the seven projections of one block.
    pub fn block_projections(&self) -> [(&'static str, usize, usize); 7] {
        let (h, f) = (self.hidden, self.ffn);
        [
            ("q", h, h),
            ("k", h, h),
            ("v", h, h),
            ("o", h, h),
            ("gate", f, h),
            ("up", f, h),
            ("down", h, f),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_lambda")]
    pub lambda_l2l: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub peak_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the default of one pass over the training tokens.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

fn default_lambda() -> f64 {
    10.0
}

fn default_epochs() -> usize {
    3
}

fn default_lr() -> f64 {
    3e-4
}

fn default_warmup() -> f64 {
    0.03
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn default_batch() -> usize {
    8
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda_l2l: default_lambda(),
            epochs: default_epochs(),
            peak_lr: default_lr(),
            warmup_fraction: default_warmup(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: 0.0,
            eps: default_eps(),
            batch_size: default_batch(),
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lambda_l2l,
            self.peak_lr,
            self.warmup_fraction,
            self.beta1,
            self.beta2,
            self.weight_decay,
            self.eps,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("training hyperparameters must be finite".into()));
        }
        if self.lambda_l2l < 0.0 || self.peak_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lambda, learning rate and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        if self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("batch size and steps per epoch must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distill_defaults() {
        let c = DistillConfig::default();
        assert_eq!(c.lambda_l2l, 10.0);
        assert_eq!((c.beta1, c.beta2, c.weight_decay), (0.9, 0.999, 0.0));
        assert_eq!(c.warmup_fraction, 0.03);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.eps, 1e-8);
        let parsed: DistillConfig = toml::from_str("").unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn decoder_validation() {
        assert!(ToyDecoderConfig::default().validate().is_ok());
        let bad_heads = ToyDecoderConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
        let zero = ToyDecoderConfig {
            layers: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("ternary".parse::<Scheme>().is_err());
    }
}
