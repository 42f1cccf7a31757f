//! Word-level vocabulary, fixed-length tokenization and MLM masking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{DreamError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const MASK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<cls>", "<mask>"];
pub const DEFAULT_MAX_LEN: usize = 256;
pub const DEFAULT_MIN_FREQ: usize = 2;

/// Immutable token ↔ id mapping with ids 0..3 reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocab {
    /// Keeps every token seen at least `min_freq` times, ordered by
    /// frequency (descending) then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(DreamError::input("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in words(text.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self::from_tokens(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(kept.into_iter().map(|(w, _)| w))
                .collect(),
        ))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(r) {
                return Err(DreamError::Parse {
                    line: i + 1,
                    msg: format!("expected reserved token {r}"),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(DreamError::Parse {
                    line: i + 1,
                    msg: "empty token".into(),
                });
            }
            if let Some(prev) = seen.insert(t.as_str(), i) {
                return Err(DreamError::Parse {
                    line: i + 1,
                    msg: format!("duplicate of line {}", prev + 1),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Joins the non-special tokens of a sequence with single spaces.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.ids[..seq.true_len]
            .iter()
            .filter(|&&id| id != CLS && id != PAD)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Exactly `max_len` ids; position 0 is CLS, positions from `true_len` on
/// are PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub true_len: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn active_ids(&self) -> &[usize] {
        &self.ids[..self.true_len]
    }
}

/// Head-keep truncation: the first `max_len − 1` words survive.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(1);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(words(text).take(max_len - 1).map(|w| vocab.id(&w)));
    let true_len = ids.len();
    ids.resize(max_len, PAD);
    TokenSequence { ids, true_len }
}

/// Replaces each eligible position (non-reserved id) with MASK
/// independently with probability `rate`. Returns the masked sequence and
/// `(position, original id)` targets in position order.
pub fn mask_tokens<R: Rng + ?Sized>(
    seq: &TokenSequence,
    rate: f64,
    rng: &mut R,
) -> Result<(TokenSequence, Vec<(usize, usize)>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(DreamError::input(format!("mask rate {rate} outside [0, 1]")));
    }
    let mut masked = seq.clone();
    let mut targets = Vec::new();
    for pos in 0..seq.true_len {
        let id = seq.ids[pos];
        if id < RESERVED.len() {
            continue;
        }
        if rng.random::<f64>() < rate {
            masked.ids[pos] = MASK;
            targets.push((pos, id));
        }
    }
    Ok((masked, targets))
}
