//! Tokenization, vocabulary, padded minibatches and word-swap tweaks.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{indexed_rng, Stream};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<eos>"];

/// Attempts at drawing a swap that changes the sentence before giving up.
pub const SWAP_ATTEMPTS: usize = 10;

/// Lowercases, splits on whitespace and detaches ASCII punctuation.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in line.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

/// Reads a UTF-8 file with one sentence per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sentences: Vec<Vec<String>> = text
        .lines()
        .map(tokenize)
        .filter(|s| !s.is_empty())
        .collect();
    if sentences.is_empty() {
        return Err(Error::Data(format!("{} contains no sentences", path.display())));
    }
    Ok(sentences)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Tokens seen at least `min_count` times, ordered by descending frequency
    /// and then lexicographically, after the reserved entries.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if sentences.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()))
    }

    fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True when only the reserved entries are present.
    pub fn is_degenerate(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Appends EOS, truncates to `t_max` keeping the terminal EOS, and pads.
    /// Returns the padded row and its true length (EOS included).
    pub fn encode<S: AsRef<str>>(&self, sentence: &[S], t_max: usize) -> Result<(Vec<usize>, usize)> {
        if t_max < 2 {
            return Err(Error::Config(format!("t_max must be at least 2, got {t_max}")));
        }
        let words = sentence.len().min(t_max - 1);
        let mut row: Vec<usize> = sentence[..words].iter().map(|t| self.id(t.as_ref())).collect();
        row.push(EOS);
        let len = row.len();
        row.resize(t_max, PAD);
        Ok((row, len))
    }

    /// Tokens up to (not including) the first EOS; PAD is skipped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    /// Parses `token<TAB>id` lines; ids must run 0, 1, 2, … with the
    /// reserved tokens first.
    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (token, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("vocabulary line {}: missing tab", lineno + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("vocabulary line {}: bad id `{id}`", lineno + 1)))?;
            if id != lineno {
                return Err(Error::Data(format!(
                    "vocabulary line {}: expected id {lineno}, found {id}",
                    lineno + 1
                )));
            }
            if lineno < RESERVED.len() {
                if token != RESERVED[lineno] {
                    return Err(Error::Data(format!(
                        "vocabulary id {lineno} must be `{}`",
                        RESERVED[lineno]
                    )));
                }
            } else {
                words.push(token.to_string());
            }
        }
        if text.lines().count() < RESERVED.len() {
            return Err(Error::Data("vocabulary lacks reserved tokens".into()));
        }
        Self::from_tokens(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}

/// A corpus encoded to padded id rows of a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub t_max: usize,
    pub rows: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl EncodedCorpus {
    pub fn encode<S: AsRef<str>>(sentences: &[Vec<S>], vocab: &Vocabulary, t_max: usize) -> Result<Self> {
        let mut rows = Vec::with_capacity(sentences.len());
        let mut lengths = Vec::with_capacity(sentences.len());
        for s in sentences {
            let (row, len) = vocab.encode(s, t_max)?;
            rows.push(row);
            lengths.push(len);
        }
        Ok(EncodedCorpus { t_max, rows, lengths })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        EncodedCorpus {
            t_max: self.t_max,
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            lengths: indices.iter().map(|&i| self.lengths[i]).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> SentenceBatch {
        let mut ids = Vec::with_capacity(indices.len() * self.t_max);
        for &i in indices {
            ids.extend_from_slice(&self.rows[i]);
        }
        SentenceBatch {
            ids,
            lengths: indices.iter().map(|&i| self.lengths[i]).collect(),
            t_max: self.t_max,
        }
    }

    /// One line per sentence: space-separated ids through the EOS.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (row, &len) in self.rows.iter().zip(&self.lengths) {
            let line: Vec<String> = row[..len].iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str, t_max: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut lengths = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut row = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::Data(format!("encoded line {}: bad id `{t}`", lineno + 1)))
                })
                .collect::<Result<Vec<usize>>>()?;
            if row.is_empty() || row.len() > t_max || row.last() != Some(&EOS) {
                return Err(Error::Data(format!(
                    "encoded line {}: expected 1..={t_max} ids ending in EOS",
                    lineno + 1
                )));
            }
            lengths.push(row.len());
            row.resize(t_max, PAD);
            rows.push(row);
        }
        Ok(EncodedCorpus { t_max, rows, lengths })
    }

    /// Sentence order for one epoch, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut indexed_rng(seed, Stream::Shuffle, epoch));
        order
    }

    /// Shuffled minibatches covering every sentence once; the last batch may
    /// be short.
    pub fn minibatches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Minibatches<'_>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(Minibatches {
            corpus: self,
            order: self.epoch_order(seed, epoch),
            batch_size,
            cursor: 0,
        })
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size.max(1))
    }
}

pub struct Minibatches<'a> {
    corpus: &'a EncodedCorpus,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for Minibatches<'_> {
    type Item = SentenceBatch;

    fn next(&mut self) -> Option<SentenceBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.corpus.batch(&self.order[self.cursor..end]);
        self.cursor = end;
        Some(batch)
    }
}

/// `B × T_max` padded id matrix with true lengths (EOS included).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub t_max: usize,
}

impl SentenceBatch {
    pub fn from_rows(rows: &[Vec<usize>], lengths: &[usize]) -> Result<Self> {
        let t_max = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != t_max) || rows.len() != lengths.len() {
            return Err(Error::shape("ragged sentence batch"));
        }
        Ok(SentenceBatch {
            ids: rows.concat(),
            lengths: lengths.to_vec(),
            t_max,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.t_max..(i + 1) * self.t_max]
    }

    /// Checks the padding and EOS invariants.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.size() {
            let (row, len) = (self.row(i), self.lengths[i]);
            if len == 0 || len > self.t_max || row[len - 1] != EOS || row[len..].iter().any(|&t| t != PAD) {
                return Err(Error::Data(format!("malformed batch row {i}")));
            }
        }
        Ok(())
    }
}

/// Exchanges word positions `i` and `j` of a row whose true length is `len`.
/// Returns `None` unless both positions lie in the word region (before EOS).
pub fn swap_positions(row: &[usize], len: usize, i: usize, j: usize) -> Option<Vec<usize>> {
    let words = len.checked_sub(1)?;
    if i == j || i >= words || j >= words {
        return None;
    }
    let mut out = row.to_vec();
    out.swap(i, j);
    Some(out)
}

/// Swaps two distinct word positions drawn uniformly, redrawing when the
/// swapped tokens are identical. `None` means the sentence has fewer than two
/// words or no changing swap was found within [`SWAP_ATTEMPTS`].
pub fn permute_swap<R: Rng + ?Sized>(row: &[usize], len: usize, rng: &mut R) -> Option<Vec<usize>> {
    let words = len.checked_sub(1)?;
    if words < 2 {
        return None;
    }
    for _ in 0..SWAP_ATTEMPTS {
        let picked = rand::seq::index::sample(rng, words, 2);
        let (i, j) = (picked.index(0), picked.index(1));
        if row[i] != row[j] {
            return swap_positions(row, len, i, j);
        }
    }
    None
}

const DETERMINERS: [&str; 2] = ["the", "a"];
const ADJECTIVES: [&str; 10] = ["red", "small", "old", "quiet", "bright", "cold", "heavy", "young", "green", "loud"];
const NOUNS: [&str; 14] = [
    "cat", "dog", "bird", "river", "tree", "house", "child", "car", "boat", "stone", "farmer", "horse", "lamp", "road",
];
const VERBS: [&str; 12] = [
    "sees", "likes", "follows", "finds", "carries", "watches", "pulls", "hears", "meets", "paints", "holds", "crosses",
];
const ADVERBS: [&str; 7] = ["slowly", "often", "again", "today", "gladly", "early", "there"];

/// Sentences from a small fixed grammar over 47 words, for smoke tests and
/// demos. Lengths run from 5 to 8 tokens.
pub fn toy_grammar(n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = indexed_rng(seed, Stream::Generate, 0);
    let mut pick = |words: &[&str]| words[rng.gen_range(0..words.len())].to_string();
    (0..n)
        .map(|i| match i % 3 {
            0 => vec![
                pick(&DETERMINERS),
                pick(&ADJECTIVES),
                pick(&NOUNS),
                pick(&VERBS),
                pick(&DETERMINERS),
                pick(&NOUNS),
                ".".to_string(),
            ],
            1 => vec![pick(&DETERMINERS), pick(&NOUNS), pick(&VERBS), pick(&ADVERBS), ".".to_string()],
            _ => vec![
                pick(&DETERMINERS),
                pick(&ADJECTIVES),
                pick(&NOUNS),
                "and".to_string(),
                pick(&DETERMINERS),
                pick(&NOUNS),
                pick(&VERBS),
                ".".to_string(),
            ],
        })
        .collect()
}
