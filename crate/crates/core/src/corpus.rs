//! Byte-level corpora, train/validation splits and the mixed-corpus sampler.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::RngSeed;

/// Byte-level vocabulary; no special tokens.
pub const VOCAB_SIZE: usize = 256;

pub const DEFAULT_VALID_FRACTION: f64 = 0.1;

/// A token stream split into a training prefix and a validation suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    name: String,
    tokens: Vec<u8>,
    train_end: usize,
}

impl Corpus {
    /// Whole stream as training data.
    pub fn from_bytes(name: impl Into<String>, bytes: Vec<u8>) -> Self {
        let train_end = bytes.len();
        Corpus {
            name: name.into(),
            tokens: bytes,
            train_end,
        }
    }

    /// Places the last `⌊fraction·len⌋` tokens in validation.
    pub fn with_valid_fraction(mut self, fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::param(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let valid = (fraction * self.tokens.len() as f64).floor() as usize;
        self.train_end = self.tokens.len() - valid;
        Ok(self)
    }

    pub fn with_split(mut self, train_end: usize) -> Result<Self> {
        if train_end > self.tokens.len() {
            return Err(Error::param(format!(
                "split at {train_end} past the end of a {}-token corpus",
                self.tokens.len()
            )));
        }
        self.train_end = train_end;
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn train_end(&self) -> usize {
        self.train_end
    }

    pub fn train(&self) -> &[u8] {
        &self.tokens[..self.train_end]
    }

    pub fn valid(&self) -> &[u8] {
        &self.tokens[self.train_end..]
    }
}

/// Reads a file as raw bytes, one token per byte.
pub fn load_text(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Corpus::from_bytes(name, bytes))
}

pub fn tokenize(text: &str) -> Vec<u8> {
    text.as_bytes().to_vec()
}

pub fn detokenize(tokens: &[u8]) -> Vec<u8> {
    tokens.to_vec()
}

/// `batch_size` windows of `seq_len + 1` tokens each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub seq_len: usize,
    pub windows: Vec<Vec<u8>>,
    /// Index of the corpus each window came from.
    pub sources: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn inputs(&self, row: usize) -> &[u8] {
        &self.windows[row][..self.seq_len]
    }

    pub fn targets(&self, row: usize) -> &[u8] {
        &self.windows[row][1..]
    }
}

/// Endless batch iterator drawing each window from the training split of
/// corpus `i` with probability `weights[i]`.
#[derive(Debug, Clone)]
pub struct MixedSampler {
    streams: Vec<Vec<u8>>,
    cumulative: Vec<f64>,
    seq_len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn mixed_sampler(
    corpora: &[Corpus],
    weights: &[f64],
    seq_len: usize,
    batch_size: usize,
    seed: RngSeed,
) -> Result<MixedSampler> {
    if corpora.is_empty() {
        return Err(Error::param("sampler needs at least one corpus"));
    }
    if corpora.len() != weights.len() {
        return Err(Error::param(format!(
            "{} corpora but {} mixing weights",
            corpora.len(),
            weights.len()
        )));
    }
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::param("sequence length and batch size must be positive"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::param(format!("mixing weights {weights:?} must be finite and non-negative")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("mixing weights sum to {total}, not 1")));
    }
    for (c, &w) in corpora.iter().zip(weights) {
        if w > 0.0 && c.train().len() < seq_len + 1 {
            return Err(Error::param(format!(
                "corpus '{}' has {} training tokens, fewer than one window of {}",
                c.name(),
                c.train().len(),
                seq_len + 1
            )));
        }
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cumulative.push(acc);
    }
    Ok(MixedSampler {
        streams: corpora.iter().map(|c| c.train().to_vec()).collect(),
        cumulative,
        seq_len,
        batch_size,
        rng: seed.rng(),
    })
}

impl MixedSampler {
    fn pick_source(&mut self) -> usize {
        let total = self.cumulative[self.cumulative.len() - 1];
        let u = self.rng.random::<f64>() * total;
        let mut last_positive = 0;
        for (i, &c) in self.cumulative.iter().enumerate() {
            let lo = if i == 0 { 0.0 } else { self.cumulative[i - 1] };
            if c > lo {
                last_positive = i;
                if u < c {
                    return i;
                }
            }
        }
        last_positive
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut windows = Vec::with_capacity(self.batch_size);
        let mut sources = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let src = self.pick_source();
            let stream = &self.streams[src];
            let start = self.rng.random_range(0..=stream.len() - (self.seq_len + 1));
            windows.push(stream[start..start + self.seq_len + 1].to_vec());
            sources.push(src);
        }
        Batch {
            seq_len: self.seq_len,
            windows,
            sources,
        }
    }
}

impl Iterator for MixedSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Register of the generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextStyle {
    /// Declarative encyclopedia-like sentences.
    Encyclopedic,
    /// Informal web-forum chatter.
    Web,
}

impl std::str::FromStr for TextStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encyclopedic" | "wiki" => Ok(TextStyle::Encyclopedic),
            "web" => Ok(TextStyle::Web),
            other => Err(Error::Config(format!("unknown text style '{other}'"))),
        }
    }
}

const PLACES: &[&str] = &[
    "Aldermoor", "the river Tessel", "Karvath", "the northern valley", "Lindqvist Bay", "Orrin",
    "the old harbour", "Maelford", "the eastern plateau", "Quorra",
];
const THINGS: &[&str] = &[
    "the cathedral", "a stone bridge", "the railway", "the university", "a copper mine",
    "the observatory", "the parliament", "a textile mill", "the lighthouse", "the library",
];
const PEOPLE: &[&str] = &[
    "the architect Helena Voss", "King Aldric II", "the engineer Tomas Brell", "a guild of masons",
    "the poet Ines Marlow", "the merchant council", "Bishop Corwen", "the surveyor Adaeze Obi",
];
const VERBS_PAST: &[&str] = &[
    "built", "restored", "founded", "expanded", "destroyed", "described", "financed", "designed",
];
const YEARS: &[&str] = &["1204", "1387", "1512", "1648", "1721", "1803", "1876", "1911", "1958"];
const ADJ: &[&str] = &[
    "largest", "oldest", "most visited", "best preserved", "least known", "tallest",
];

const WEB_OPEN: &[&str] = &[
    "honestly", "ok so", "lol", "tbh", "update:", "quick question,", "not gonna lie", "fwiw",
];
const WEB_SUBJ: &[&str] = &[
    "my laptop", "the new update", "this recipe", "our cat", "the bus", "my sister", "the game",
    "this thread", "the wifi",
];
const WEB_PRED: &[&str] = &[
    "keeps crashing", "is way better than i expected", "broke again", "made my whole week",
    "needs a patch asap", "is kinda overrated", "works fine now", "took forever",
];
const WEB_CLOSE: &[&str] = &[
    "anyone else?", "thanks in advance!", "10/10 would recommend", "send help", "just saying.",
    "edit: typo", "smh", ":)",
];

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap_or("")
}

fn encyclopedic_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!(
            "In {}, {} {} {} near {}.",
            pick(rng, YEARS),
            pick(rng, PEOPLE),
            pick(rng, VERBS_PAST),
            pick(rng, THINGS),
            pick(rng, PLACES)
        ),
        1 => format!(
            "{} is the {} building in {}.",
            capitalize(pick(rng, THINGS)),
            pick(rng, ADJ),
            pick(rng, PLACES)
        ),
        2 => format!(
            "{} was {} by {} in {}.",
            capitalize(pick(rng, THINGS)),
            pick(rng, VERBS_PAST),
            pick(rng, PEOPLE),
            pick(rng, YEARS)
        ),
        _ => format!(
            "The population of {} grew after {} {} {}.",
            pick(rng, PLACES),
            pick(rng, PEOPLE),
            pick(rng, VERBS_PAST),
            pick(rng, THINGS)
        ),
    }
}

fn web_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3) {
        0 => format!(
            "{} {} {} {}",
            pick(rng, WEB_OPEN),
            pick(rng, WEB_SUBJ),
            pick(rng, WEB_PRED),
            pick(rng, WEB_CLOSE)
        ),
        1 => format!("{} {}, {}", pick(rng, WEB_SUBJ), pick(rng, WEB_PRED), pick(rng, WEB_CLOSE)),
        _ => format!(
            "{} {} {} and {} {}",
            pick(rng, WEB_OPEN),
            pick(rng, WEB_SUBJ),
            pick(rng, WEB_PRED),
            pick(rng, WEB_SUBJ),
            pick(rng, WEB_PRED)
        ),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Deterministic text from a small template grammar, exactly `len` bytes.
pub fn synthetic_text(style: TextStyle, len: usize, seed: RngSeed) -> Vec<u8> {
    let mut rng = seed.rng();
    let mut out = String::with_capacity(len + 128);
    while out.len() < len {
        let sentence = match style {
            TextStyle::Encyclopedic => encyclopedic_sentence(&mut rng),
            TextStyle::Web => web_sentence(&mut rng),
        };
        out.push_str(&sentence);
        let sep = match style {
            TextStyle::Encyclopedic if rng.random_range(0..5) == 0 => "\n\n",
            TextStyle::Encyclopedic => " ",
            TextStyle::Web => "\n",
        };
        out.push_str(sep);
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(len);
    bytes
}

/// Generated corpus with the default validation split.
pub fn synthetic_corpus(style: TextStyle, len: usize, seed: RngSeed) -> Corpus {
    let name = match style {
        TextStyle::Encyclopedic => "encyclopedic",
        TextStyle::Web => "web",
    };
    Corpus::from_bytes(name, synthetic_text(style, len, seed))
        .with_valid_fraction(DEFAULT_VALID_FRACTION)
        .expect("default fraction is in range")
}
