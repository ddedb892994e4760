//! Vocabulary and token sequences.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const MASK: TokenId = 4;
/// Id of `[SPAN_1]`; span k (1-based) has id `SPAN_BASE + k - 1`.
pub const SPAN_BASE: TokenId = 5;

const FIXED_SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]"];

pub const DEFAULT_NUM_SPANS: usize = 128;

fn span_token(k: usize) -> String {
    format!("[SPAN_{k}]")
}

/// A sequence of vocabulary ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl FromIterator<TokenId> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        TokenSeq(iter.into_iter().collect())
    }
}

/// Ordered token list with the special symbols in fixed leading positions:
/// `[PAD] [UNK] [BOS] [EOS] [MASK] [SPAN_1] .. [SPAN_K]`, then ordinary words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    num_spans: usize,
}

impl Vocab {
    /// Builds a vocabulary with `num_spans` span-ID tokens followed by `words`
    /// (duplicates and words colliding with specials are dropped).
    pub fn new<I, S>(num_spans: usize, words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend((1..=num_spans).map(span_token));
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len() as TokenId);
                tokens.push(w.to_string());
            }
        }
        Vocab {
            tokens,
            index,
            num_spans,
        }
    }

    /// Builds a vocabulary from raw texts, words ordered by descending
    /// frequency and then lexicographically.
    pub fn from_texts<'a, I>(num_spans: usize, texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in normalize_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::new(num_spans, words.into_iter().map(|(w, _)| w))
    }

    /// Parses the one-token-per-line format; line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, expected) in FIXED_SPECIALS.iter().enumerate() {
            match lines.get(i) {
                Some(line) if line == expected => {}
                Some(line) => {
                    return Err(Error::InvalidVocab(format!(
                        "line {i}: expected {expected}, found {line}"
                    )))
                }
                None => {
                    return Err(Error::InvalidVocab(format!(
                        "missing special token {expected}"
                    )))
                }
            }
        }
        let mut num_spans = 0;
        while lines
            .get(FIXED_SPECIALS.len() + num_spans)
            .is_some_and(|l| *l == span_token(num_spans + 1))
        {
            num_spans += 1;
        }
        let words = &lines[FIXED_SPECIALS.len() + num_spans..];
        let vocab = Vocab::new(num_spans, words.iter().copied());
        if vocab.len() != lines.len() {
            return Err(Error::InvalidVocab(
                "duplicate or misplaced special tokens".into(),
            ));
        }
        Ok(vocab)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_spans(&self) -> usize {
        self.num_spans
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `[SPAN_k]` for 1-based `k`.
    pub fn span_id(&self, k: usize) -> Option<TokenId> {
        (k >= 1 && k <= self.num_spans).then(|| SPAN_BASE + (k - 1) as TokenId)
    }

    /// 1-based span number if `id` is a span-ID token.
    pub fn span_index(&self, id: TokenId) -> Option<usize> {
        let k = id.checked_sub(SPAN_BASE)? as usize;
        (k < self.num_spans).then_some(k + 1)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < FIXED_SPECIALS.len() + self.num_spans
    }

    /// Whitespace tokenization with lowercasing; unknown words map to `[UNK]`.
    pub fn tokenize(&self, text: &str) -> TokenSeq {
        normalize_words(text)
            .map(|w| self.id(&w).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks every id is in range.
    pub fn check(&self, seq: &[TokenId]) -> Result<()> {
        match seq.iter().find(|&&id| id as usize >= self.len()) {
            Some(id) => Err(Error::InvalidVocab(format!(
                "id {id} out of range for vocabulary of {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Vocab({} tokens, {} spans)", self.len(), self.num_spans)
    }
}

fn normalize_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}
