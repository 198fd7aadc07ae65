//! Parallel corpora, vocabularies with a minimum-frequency cutoff,
//! synthetic tasks and length-bucketed batching.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use thiserror::Error;

use crate::autodiff::SeededRng;
use crate::transformer::{ModelError, PaddedIds};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("source file has {src} lines but target file has {tgt}")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid synthetic task: {0}")]
    Synth(String),
    #[error("malformed vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Token/id bijection. Ids 0..3 are `<pad>`, `<unk>`, `<s>`, `</s>`; the
/// rest are sorted by descending frequency, then lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

impl Vocabulary {
    /// Tokens occurring fewer than `min_freq` times are left out and map to
    /// `<unk>`.
    pub fn build<'a, I, S>(sentences: I, min_freq: usize) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for s in sentences {
            any = true;
            for t in s.as_ref() {
                if !SPECIALS.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        if !any {
            return Err(DataError::EmptyCorpus);
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Ok(Self::from_tokens(tokens, min_freq))
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    /// Token ids followed by `</s>`.
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).chain([EOS]).collect()
    }

    /// Tokens up to the first `</s>`, skipping `<pad>` and `<s>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// `min_freq` on the first line, then one non-reserved token per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.min_freq);
        for t in &self.tokens[SPECIALS.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines();
        let min_freq = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| DataError::Vocab("missing min_freq header".into()))?;
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(lines.map(str::to_string))
            .collect();
        let v = Self::from_tokens(tokens, min_freq);
        if v.index.len() != v.tokens.len() {
            return Err(DataError::Vocab("duplicate token".into()));
        }
        Ok(v)
    }
}

/// Encoded sentence pair. `src` ends in `</s>` (length `J`); `tgt` is
/// `<s> y_1 .. y_n </s>`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedPair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl TokenizedPair {
    pub fn src_len(&self) -> usize {
        self.src.len()
    }

    /// Decoder steps: target words plus `</s>`.
    pub fn tgt_steps(&self) -> usize {
        self.tgt.len() - 1
    }

    pub fn tgt_words(&self) -> &[usize] {
        &self.tgt[1..self.tgt.len() - 1]
    }
}

/// Whitespace-tokenized parallel text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelText {
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

impl ParallelText {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn read(src_path: &Path, tgt_path: &Path) -> Result<Self, DataError> {
        let src: Vec<Vec<String>> = read(src_path)?.lines().map(tokenize).collect();
        let tgt: Vec<Vec<String>> = read(tgt_path)?.lines().map(tokenize).collect();
        if src.len() != tgt.len() {
            return Err(DataError::LineCountMismatch {
                src: src.len(),
                tgt: tgt.len(),
            });
        }
        Ok(Self { src, tgt })
    }

    pub fn write(&self, src_path: &Path, tgt_path: &Path) -> Result<(), DataError> {
        let join = |side: &[Vec<String>]| side.iter().map(|s| s.join(" ") + "\n").collect::<String>();
        for (path, side) in [(src_path, &self.src), (tgt_path, &self.tgt)] {
            fs::write(path, join(side)).map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.src.len().saturating_sub(n);
        let tail = Self {
            src: self.src.split_off(at),
            tgt: self.tgt.split_off(at),
        };
        (self, tail)
    }
}

/// Encoded corpus with its vocabularies.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub pairs: Vec<TokenizedPair>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    /// Pairs dropped for exceeding the positional limit.
    pub filtered: usize,
}

impl Corpus {
    /// Builds vocabularies from `text` and encodes it.
    pub fn build(text: &ParallelText, min_freq: usize, max_positions: usize) -> Result<Self, DataError> {
        if text.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let src_vocab = Vocabulary::build(&text.src, min_freq)?;
        let tgt_vocab = Vocabulary::build(&text.tgt, min_freq)?;
        Self::encode(text, src_vocab, tgt_vocab, max_positions)
    }

    /// Encodes `text` with existing vocabularies. Pairs whose source
    /// (with `</s>`) or target (with `<s>` and `</s>`) exceed
    /// `max_positions`, or whose source is empty, are dropped and counted.
    pub fn encode(
        text: &ParallelText,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        max_positions: usize,
    ) -> Result<Self, DataError> {
        let mut pairs = Vec::with_capacity(text.len());
        let mut filtered = 0;
        for (s, t) in text.src.iter().zip(&text.tgt) {
            let src = src_vocab.encode(s);
            let tgt: Vec<usize> = [BOS].into_iter().chain(tgt_vocab.encode(t)).collect();
            if s.is_empty() || src.len() > max_positions || tgt.len() > max_positions {
                filtered += 1;
                continue;
            }
            pairs.push(TokenizedPair { src, tgt });
        }
        if filtered > 0 {
            warn!("{filtered} pairs dropped (empty or longer than {max_positions} positions)");
        }
        Ok(Self {
            pairs,
            src_vocab,
            tgt_vocab,
            filtered,
        })
    }
}

pub fn load_parallel_corpus(
    src_path: &Path,
    tgt_path: &Path,
    min_freq: usize,
    max_positions: usize,
) -> Result<Corpus, DataError> {
    Corpus::build(&ParallelText::read(src_path, tgt_path)?, min_freq, max_positions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Copy,
    Reverse,
    /// Target token `w(i)` becomes `w((i + offset) mod vocab_size)`.
    Shift(usize),
}

impl std::str::FromStr for SynthKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "shift" => Ok(Self::Shift(1)),
            other => match other.strip_prefix("shift:").map(str::parse) {
                Some(Ok(k)) => Ok(Self::Shift(k)),
                _ => Err(DataError::Synth(format!("unknown task {other:?}"))),
            },
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Deterministic synthetic corpus of `n` pairs over tokens `w0..w{vocab_size-1}`
/// with source lengths drawn uniformly from `min_len..=max_len`.
pub fn synth_task(
    kind: SynthKind,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    n: usize,
    seed: u64,
) -> Result<ParallelText, DataError> {
    if vocab_size < 2 {
        return Err(DataError::Synth("vocab_size must be at least 2".into()));
    }
    if min_len == 0 || min_len > max_len {
        return Err(DataError::Synth(format!(
            "degenerate length range {min_len}..={max_len}"
        )));
    }
    let mut rng = SeededRng::derive(seed, 0x5157);
    let mut text = ParallelText::default();
    for _ in 0..n {
        let len = rng.int_inclusive(min_len, max_len);
        let ids: Vec<usize> = (0..len).map(|_| rng.int_inclusive(0, vocab_size - 1)).collect();
        let tgt: Vec<usize> = match kind {
            SynthKind::Copy => ids.clone(),
            SynthKind::Reverse => ids.iter().rev().copied().collect(),
            SynthKind::Shift(k) => ids.iter().map(|&i| (i + k) % vocab_size).collect(),
        };
        text.src.push(ids.into_iter().map(word).collect());
        text.tgt.push(tgt.into_iter().map(word).collect());
    }
    Ok(text)
}

/// Padded training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub src: PaddedIds,
    /// `<s> y_1 .. y_n`, padded.
    pub tgt_in: PaddedIds,
    /// `y_1 .. y_n </s>` per row of `tgt_in`, `None` at padding.
    pub targets: Vec<Option<usize>>,
    /// Indices of the pairs in the originating slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(pairs: &[TokenizedPair], indices: &[usize]) -> Result<Self, DataError> {
        let srcs: Vec<Vec<usize>> = indices.iter().map(|&i| pairs[i].src.clone()).collect();
        let tins: Vec<Vec<usize>> = indices
            .iter()
            .map(|&i| pairs[i].tgt[..pairs[i].tgt.len() - 1].to_vec())
            .collect();
        let src = PaddedIds::new(&srcs)?;
        let tgt_in = PaddedIds::new(&tins)?;
        let mut targets = Vec::with_capacity(tgt_in.batch * tgt_in.width);
        for &i in indices {
            let out = &pairs[i].tgt[1..];
            targets.extend(out.iter().map(|&t| Some(t)));
            targets.extend(std::iter::repeat_n(None, tgt_in.width - out.len()));
        }
        Ok(Self {
            src,
            tgt_in,
            targets,
            indices: indices.to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.src.batch
    }

    /// `J` per element.
    pub fn src_lens(&self) -> &[usize] {
        &self.src.lengths
    }

    /// Decoder steps per element.
    pub fn tgt_steps(&self) -> &[usize] {
        &self.tgt_in.lengths
    }

    /// Non-padding target tokens.
    pub fn n_tokens(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Length-bucketed batch index lists. Pairs are shuffled, stably sorted by
/// source length and cut so that `batch_len · longest_sequence` stays within
/// `token_budget`; the batch order is then shuffled. The result depends only
/// on `(pairs, token_budget, seed, epoch)`.
pub fn batch_indices(pairs: &[TokenizedPair], token_budget: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = SeededRng::derive(seed, 0xBA7C_0000 ^ epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    order.sort_by_key(|&i| pairs[i].src_len());
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = pairs[i].src_len().max(pairs[i].tgt.len());
        let new_longest = longest.max(len);
        if !cur.is_empty() && new_longest * (cur.len() + 1) > token_budget {
            batches.push(std::mem::take(&mut cur));
            longest = len;
        } else {
            longest = new_longest;
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    rng.shuffle(&mut batches);
    batches
}
