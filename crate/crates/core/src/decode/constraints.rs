//! Repetition constraints applied while decoding and a post-hoc scanner.

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConstraints {
    pub no_repeat_trigram: bool,
    pub no_consecutive_unigram: bool,
    pub no_consecutive_bigram: bool,
}

impl Default for DecodeConstraints {
    fn default() -> Self {
        DecodeConstraints {
            no_repeat_trigram: true,
            no_consecutive_unigram: true,
            no_consecutive_bigram: true,
        }
    }
}

impl DecodeConstraints {
    pub fn none() -> Self {
        DecodeConstraints {
            no_repeat_trigram: false,
            no_consecutive_unigram: false,
            no_consecutive_bigram: false,
        }
    }

    pub fn any(&self) -> bool {
        self.no_repeat_trigram || self.no_consecutive_unigram || self.no_consecutive_bigram
    }

    /// Tokens that may not follow `history`. Small and unsorted; may contain duplicates.
    pub fn banned(&self, history: &[TokenId]) -> Vec<TokenId> {
        let n = history.len();
        let mut out = Vec::new();
        if self.no_consecutive_unigram && n >= 1 {
            out.push(history[n - 1]);
        }
        // appending y after ... a b a gives "a b a y"; y = b repeats the bigram
        if self.no_consecutive_bigram && n >= 3 && history[n - 1] == history[n - 3] {
            out.push(history[n - 2]);
        }
        if self.no_repeat_trigram && n >= 2 {
            let (a, b) = (history[n - 2], history[n - 1]);
            for w in history.windows(3) {
                if w[0] == a && w[1] == b {
                    out.push(w[2]);
                }
            }
        }
        out
    }

    pub fn allows(&self, history: &[TokenId], next: TokenId) -> bool {
        !self.banned(history).contains(&next)
    }
}

/// Counts of constraint violations found in a finished sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Violations {
    pub repeated_trigrams: usize,
    pub consecutive_unigrams: usize,
    pub consecutive_bigrams: usize,
}

impl Violations {
    pub fn total(&self) -> usize {
        self.repeated_trigrams + self.consecutive_unigrams + self.consecutive_bigrams
    }
}

/// Independent re-count of repetitions, used to audit decoder output.
pub fn scan(tokens: &[TokenId]) -> Violations {
    let mut v = Violations::default();
    for i in 0..tokens.len() {
        if i + 1 < tokens.len() && tokens[i] == tokens[i + 1] {
            v.consecutive_unigrams += 1;
        }
        if i + 3 < tokens.len() && tokens[i..i + 2] == tokens[i + 2..i + 4] {
            v.consecutive_bigrams += 1;
        }
        if i + 2 < tokens.len() {
            let tri = &tokens[i..i + 3];
            if (0..i).any(|k| &tokens[k..k + 3] == tri) {
                v.repeated_trigrams += 1;
            }
        }
    }
    v
}
