//! Character corpora: ingestion, frequency-ordered vocabularies, and
//! contiguous-stream batching for truncated backpropagation.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymbolMode {
    #[default]
    Bytes,
    Chars,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.9,
            valid: 0.05,
            test: 0.05,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Corpus(format!(
                "split fractions must be in [0, 1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

/// Symbols ordered by descending training frequency; ids are positions.
/// One extra id, [`Vocabulary::unknown_id`], catches unseen symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<u32>,
    index: HashMap<u32, usize>,
}

impl Vocabulary {
    pub fn from_symbols(symbols: Vec<u32>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Vocabulary { symbols, index }
    }

    /// Builds from a symbol stream; ties in frequency go to the smaller code point.
    pub fn build(stream: &[u32]) -> Self {
        let mut freq: HashMap<u32, usize> = HashMap::new();
        for &s in stream {
            *freq.entry(s).or_default() += 1;
        }
        let mut symbols: Vec<(u32, usize)> = freq.into_iter().collect();
        symbols.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self::from_symbols(symbols.into_iter().map(|(s, _)| s).collect())
    }

    /// Number of known symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn unknown_id(&self) -> usize {
        self.symbols.len()
    }

    /// Output classes including the unknown id.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    pub fn encode(&self, symbol: u32) -> usize {
        self.index.get(&symbol).copied().unwrap_or(self.unknown_id())
    }
}

#[derive(Clone, Debug)]
pub struct CharCorpus {
    pub vocab: Vocabulary,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn symbols_of(raw: &[u8], mode: SymbolMode) -> Result<Vec<u32>> {
    match mode {
        SymbolMode::Bytes => Ok(raw.iter().map(|&b| b as u32).collect()),
        SymbolMode::Chars => std::str::from_utf8(raw)
            .map(|s| s.chars().map(|c| c as u32).collect())
            .map_err(|e| Error::Corpus(format!("corpus is not valid UTF-8: {e}"))),
    }
}

impl CharCorpus {
    pub fn ingest(path: &Path, mode: SymbolMode, fractions: SplitFractions) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&raw, mode, fractions)
    }

    /// Splits contiguously in order: train, valid, test. Split sizes are
    /// rounded; test takes the remainder.
    pub fn from_bytes(raw: &[u8], mode: SymbolMode, fractions: SplitFractions) -> Result<Self> {
        fractions.validate()?;
        let stream = symbols_of(raw, mode)?;
        if stream.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        let n = stream.len();
        let n_train = ((n as f64 * fractions.train).round() as usize).min(n);
        let n_valid = ((n as f64 * fractions.valid).round() as usize).min(n - n_train);
        let vocab = Vocabulary::build(&stream[..n_train]);
        let encode = |s: &[u32]| s.iter().map(|&c| vocab.encode(c)).collect::<Vec<_>>();
        Ok(CharCorpus {
            train: encode(&stream[..n_train]),
            valid: encode(&stream[n_train..n_train + n_valid]),
            test: encode(&stream[n_train + n_valid..]),
            vocab,
        })
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Text of Zipf-distributed pseudo-words, used for tests and the embedding study.
pub fn zipf_text<R: Rng>(rng: &mut R, words: usize, vocab_words: usize, exponent: f64) -> String {
    let alphabet: Vec<char> = ('a'..='z').chain('A'..='Z').chain('0'..='9').collect();
    let lexicon: Vec<String> = (0..vocab_words)
        .map(|_| {
            let len = rng.gen_range(2..=7);
            (0..len).map(|_| alphabet[zipf_index(rng, alphabet.len(), exponent)]).collect()
        })
        .collect();
    let mut out = String::new();
    for i in 0..words {
        let w = zipf_index(rng, vocab_words, exponent);
        out.push_str(&lexicon[w]);
        out.push(if i % 13 == 12 { '\n' } else { ' ' });
    }
    out
}

fn zipf_index<R: Rng>(rng: &mut R, n: usize, exponent: f64) -> usize {
    let total: f64 = (1..=n).map(|k| (k as f64).powf(-exponent)).sum();
    let mut x = rng.gen::<f64>() * total;
    for k in 0..n {
        let w = ((k + 1) as f64).powf(-exponent);
        if x < w {
            return k;
        }
        x -= w;
    }
    n - 1
}

/// One training batch, time-major: entry `t·B + b` is step `t` of stream `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub unroll: usize,
    /// Set on the first batch of an epoch; recurrent state should restart.
    pub epoch_start: bool,
}

/// Cuts a stream into `batch_size` contiguous lanes and walks them in
/// windows of `unroll` steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batcher {
    pub batch_size: usize,
    pub unroll: usize,
    /// Window index within the current epoch.
    pub cursor: usize,
    pub epoch: u64,
}

impl Batcher {
    pub fn new(batch_size: usize, unroll: usize) -> Result<Self> {
        if batch_size == 0 || unroll == 0 {
            return Err(Error::Config("batch size and unroll length must be positive".into()));
        }
        Ok(Batcher {
            batch_size,
            unroll,
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn windows_per_epoch(&self, stream_len: usize) -> usize {
        (stream_len.saturating_sub(1) / self.batch_size) / self.unroll
    }

    pub fn next_batch(&mut self, stream: &[usize]) -> Result<Batch> {
        let windows = self.windows_per_epoch(stream.len());
        if windows == 0 {
            return Err(Error::Corpus(format!(
                "training split of {} symbols is too short for batch {} x unroll {}",
                stream.len(),
                self.batch_size,
                self.unroll
            )));
        }
        if self.cursor >= windows {
            self.cursor = 0;
            self.epoch += 1;
        }
        let lane = (stream.len() - 1) / self.batch_size;
        let (b, t) = (self.batch_size, self.unroll);
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for step in 0..t {
            for s in 0..b {
                let pos = s * lane + self.cursor * t + step;
                inputs.push(stream[pos]);
                targets.push(stream[pos + 1]);
            }
        }
        let epoch_start = self.cursor == 0;
        self.cursor += 1;
        Ok(Batch {
            inputs,
            targets,
            batch_size: b,
            unroll: t,
            epoch_start,
        })
    }
}
