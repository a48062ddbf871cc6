//! Tokenization and the convolutional text encoder.
//!
//! Word mode lowercases, splits on whitespace and truncates to 256 tokens.
//! Byte mode maps each byte `b` to id `b + 2` (ids 0 and 1 are PAD and OOV)
//! and pads or truncates to exactly 1000 ids.
//!
//! The encoder embeds ids, runs one valid 1-d convolution per window size,
//! applies ReLU, max-pools over time and concatenates the pooled filters.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const OOV: usize = 1;
pub const MAX_WORD_TOKENS: usize = 256;
pub const BYTE_SEQ_LEN: usize = 1000;
const BYTE_OFFSET: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMode {
    Word,
    Byte,
}

impl FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "byte" => Ok(TokenMode::Byte),
            _ => Err(Error::Invalid(format!("unknown token mode `{s}` (expected word or byte)"))),
        }
    }
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenMode::Word => "word",
            TokenMode::Byte => "byte",
        })
    }
}

/// Token to id map. Id 0 is `<pad>`, id 1 is `<oov>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert("<pad>");
        v.insert("<oov>");
        v
    }

    /// The fixed 258-entry vocabulary used in byte mode.
    pub fn bytes() -> Self {
        let mut v = Self::new();
        for b in 0..=255u8 {
            v.insert(&format!("<0x{b:02x}>"));
        }
        v
    }

    /// Word vocabulary from a corpus: tokens seen at least `min_count`
    /// times, most frequent first (ties broken lexicographically).
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in word_tokens(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut v = Self::new();
        for (tok, _) in entries {
            if max_size.is_some_and(|m| v.len() >= m) {
                break;
            }
            v.insert(&tok);
        }
        v
    }

    /// Add a token if absent; returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stable 64-bit FNV-1a hash of the token list, stored in manifests.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for tok in &self.tokens {
            for &b in tok.as_bytes().iter().chain(b"\n") {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < 2 || tokens[PAD] != "<pad>" || tokens[OOV] != "<oov>" {
            return Err(Error::Invalid("vocabulary must start with <pad> and <oov>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Parse {
                    path: "vocabulary".into(),
                    line: i + 1,
                    message: format!("duplicate token `{t}`"),
                });
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// A tokenized document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mode: TokenMode,
    /// Set when the input was empty and the sequence is a lone PAD.
    pub empty_input: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, mode: TokenMode, vocab: &Vocab) -> TokenSeq {
    match mode {
        TokenMode::Word => {
            let ids: Vec<usize> = word_tokens(text).take(MAX_WORD_TOKENS).map(|t| vocab.id(&t)).collect();
            if ids.is_empty() {
                return TokenSeq {
                    ids: vec![PAD],
                    mode,
                    empty_input: true,
                };
            }
            TokenSeq {
                ids,
                mode,
                empty_input: false,
            }
        }
        TokenMode::Byte => tokenize_bytes(text.as_bytes()),
    }
}

pub fn tokenize_bytes(bytes: &[u8]) -> TokenSeq {
    let mut ids: Vec<usize> = bytes.iter().take(BYTE_SEQ_LEN).map(|&b| b as usize + BYTE_OFFSET).collect();
    let empty_input = ids.is_empty();
    ids.resize(BYTE_SEQ_LEN, PAD);
    TokenSeq {
        ids,
        mode: TokenMode::Byte,
        empty_input,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub windows: Vec<usize>,
    pub filters: usize,
}

impl EncoderConfig {
    /// 300-d embeddings and 128 filters for each of the windows 3, 4, 5.
    pub fn standard(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 300,
            windows: vec![3, 4, 5],
            filters: 128,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.filters * self.windows.len()
    }

    pub fn max_window(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.filters == 0 || self.windows.is_empty() {
            return Err(Error::Invalid(format!("degenerate encoder configuration {self:?}")));
        }
        if self.windows.contains(&0) {
            return Err(Error::Invalid("convolution windows must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of one encoder inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    /// (weights `[window * E, F]`, bias `[F]`, window) per filter bank.
    pub convs: Vec<(ParamId, ParamId, usize)>,
}

fn uniform_tensor<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Result<Tensor> {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

impl EncoderParams {
    /// Register fresh parameters under `prefix`. Embeddings are uniform in
    /// (-0.05, 0.05) with the PAD row zeroed; filters use He-uniform bounds.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut table = uniform_tensor(vec![config.vocab_size, config.embed_dim], 0.05, rng)?;
        table.data_mut()[..config.embed_dim].fill(0.0);
        let embedding = store.add(format!("{prefix}.embedding"), table)?;
        let mut convs = Vec::with_capacity(config.windows.len());
        for &w in &config.windows {
            let fan_in = w * config.embed_dim;
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights = uniform_tensor(vec![fan_in, config.filters], bound, rng)?;
            let wid = store.add(format!("{prefix}.conv{w}.weight"), weights)?;
            let bid = store.add(format!("{prefix}.conv{w}.bias"), Tensor::zeros(&[config.filters]))?;
            convs.push((wid, bid, w));
        }
        Ok(Self {
            config,
            embedding,
            convs,
        })
    }

    /// Look up previously registered parameters (e.g. after loading a
    /// checkpoint).
    pub fn locate(store: &ParamStore, prefix: &str, config: EncoderConfig) -> Result<Self> {
        let find = |name: String| store.id(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")));
        let embedding = find(format!("{prefix}.embedding"))?;
        let convs = config
            .windows
            .iter()
            .map(|&w| Ok((find(format!("{prefix}.conv{w}.weight"))?, find(format!("{prefix}.conv{w}.bias"))?, w)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            embedding,
            convs,
        })
    }

    /// Encode a sequence to an `output_dim()` vector. Trailing PAD is
    /// dropped first; sequences shorter than the widest window are
    /// left-padded. Dropout, when given as `(rate, rng)`, is applied to the
    /// pooled vector.
    pub fn encode(&self, tape: &mut Tape, seq: &TokenSeq, dropout: Option<(f64, &mut dyn RngCore)>) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::Invalid("cannot encode an empty token sequence".into()));
        }
        let end = seq.ids.iter().rposition(|&id| id != PAD).map_or(1, |p| p + 1);
        let mut ids = seq.ids[..end].to_vec();
        let width = self.config.max_window();
        if ids.len() < width {
            let mut padded = vec![PAD; width - ids.len()];
            padded.extend(ids);
            ids = padded;
        }
        let table = tape.param(self.embedding);
        let x = tape.embedding(table, &ids, Some(PAD))?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for &(w, b, window) in &self.convs {
            let (wv, bv) = (tape.param(w), tape.param(b));
            let c = tape.conv1d(x, wv, bv, window)?;
            let r = tape.relu(c)?;
            pooled.push(tape.max_pool_time(r)?);
        }
        let h = tape.concat(&pooled)?;
        match dropout {
            Some((rate, rng)) if rate > 0.0 => tape.dropout(h, rate, rng),
            _ => Ok(h),
        }
    }
}
