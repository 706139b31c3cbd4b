//! Tokenization, vocabulary, pretrained embeddings and fixed-length encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{QbmError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Range of the uniform initialisation for tokens missing from an
/// embedding file.
pub const OOV_INIT_RANGE: f32 = 0.25;

fn is_ideographic(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF     // hiragana, katakana
        | 0x3400..=0x4DBF   // CJK extension A
        | 0x4E00..=0x9FFF   // CJK unified
        | 0xAC00..=0xD7AF   // hangul syllables
        | 0xF900..=0xFAFF   // compatibility ideographs
        | 0x20000..=0x2FA1F)
}

/// Lowercases, splits on whitespace, and emits every punctuation or symbol
/// character and every ideographic character as a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_ideographic(ch) || !ch.is_alphanumeric() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Dense token ids. Id 0 is padding and id 1 the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Counts tokens over `corpus` and assigns ids to those seen at least
    /// `min_count` times, by descending frequency and then alphabetically.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Rebuilds a vocabulary from its non-special tokens in id order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        let ids = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// All tokens in id order, including the two special ones.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// A V×D embedding matrix whose padding row is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor<f32>,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Uniform values in ±0.25 for every row, padding row zeroed.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x656d_6265_6464);
        let mut data: Vec<f32> = (0..vocab_size * dim)
            .map(|_| rng.gen_range(-OOV_INIT_RANGE..=OOV_INIT_RANGE))
            .collect();
        data[PAD * dim..(PAD + 1) * dim].fill(0.0);
        EmbeddingTable {
            matrix: Tensor::new(vec![vocab_size, dim], data).expect("consistent shape"),
            trainable: true,
        }
    }

    /// Reads `token v1 … vD` lines. Vocabulary tokens found in the file take
    /// the file vector; the rest keep their seeded random initialisation.
    /// A leading `count dim` header line is skipped.
    pub fn load(path: &Path, vocab: &Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| QbmError::io(path, e))?;
        let mut table = Self::random(vocab.len(), dim, seed);
        let shown = path.display().to_string();
        let mut file_dim: Option<usize> = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if lineno == 1 && fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok()) {
                continue;
            }
            let n = fields.len() - 1;
            match file_dim {
                None => {
                    if n != dim {
                        return Err(QbmError::Config(format!(
                            "embedding file {shown} has dimension {n}, configured dimension is {dim}"
                        )));
                    }
                    file_dim = Some(n);
                }
                Some(d) if d != n => {
                    return Err(QbmError::parse(
                        &shown,
                        lineno,
                        format!("expected {d} numbers, found {n}"),
                    ));
                }
                Some(_) => {}
            }
            let token = fields[0];
            let Some(&id) = vocab.ids.get(token) else { continue };
            let mut row = Vec::with_capacity(dim);
            for f in &fields[1..] {
                let v: f32 = f
                    .parse()
                    .map_err(|_| QbmError::parse(&shown, lineno, format!("not a number: {f:?}")))?;
                row.push(v);
            }
            if id != PAD {
                table.matrix.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&row);
            }
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[f32] {
        let d = self.dim();
        &self.matrix.data()[id * d..(id + 1) * d]
    }
}

/// Fixed-length token ids with a validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub true_length: usize,
}

impl EncodedText {
    /// True when no position is valid; model entry points reject these.
    pub fn is_empty(&self) -> bool {
        self.true_length == 0
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Keeps the first `max_len` tokens and pads the rest.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> EncodedText {
    let n = tokens.len().min(max_len);
    let mut ids = vec![PAD; max_len];
    let mut mask = vec![false; max_len];
    for (i, t) in tokens.iter().take(n).enumerate() {
        ids[i] = vocab.id(t.as_ref());
        mask[i] = true;
    }
    EncodedText {
        ids,
        mask,
        true_length: n,
    }
}

pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> EncodedText {
    encode_tokens(&tokenize(text), vocab, max_len)
}
