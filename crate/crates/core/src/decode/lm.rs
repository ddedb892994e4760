//! Add-k smoothed n-gram language model with backoff for unseen contexts.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub const DEFAULT_ORDER: usize = 5;
pub const DEFAULT_ADD_K: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct NgramLm {
    order: usize,
    vocab_size: usize,
    k: f64,
    /// Counts of every n-gram with `1 <= n <= order`.
    counts: HashMap<Vec<TokenId>, u64>,
    /// How often each context is followed by some token.
    context_totals: HashMap<Vec<TokenId>, u64>,
    unigram_total: u64,
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// `P(token | context)`; only the last `order - 1` context tokens matter.
    /// A context never seen in training backs off by dropping its oldest token.
    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let keep = context.len().min(self.order - 1);
        let mut ctx = &context[context.len() - keep..];
        let v = self.vocab_size as f64;
        loop {
            if ctx.is_empty() {
                if self.unigram_total == 0 {
                    return 1.0 / v;
                }
                let c = self.counts.get(&vec![token]).copied().unwrap_or(0) as f64;
                return (c + self.k) / (self.unigram_total as f64 + self.k * v);
            }
            if let Some(&total) = self.context_totals.get(ctx) {
                let mut gram = ctx.to_vec();
                gram.push(token);
                let c = self.counts.get(&gram).copied().unwrap_or(0) as f64;
                return (c + self.k) / (total as f64 + self.k * v);
            }
            ctx = &ctx[1..];
        }
    }

    pub fn log_prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        self.prob(context, token).ln()
    }

    /// Sum of token log-probabilities, each conditioned on its prefix.
    pub fn score(&self, tokens: &[TokenId]) -> f64 {
        (0..tokens.len())
            .map(|i| self.log_prob(&tokens[..i], tokens[i]))
            .sum()
    }

    /// Per-token perplexity over a corpus.
    pub fn perplexity(&self, corpus: &[Vec<TokenId>]) -> f64 {
        let (mut lp, mut n) = (0.0, 0usize);
        for s in corpus {
            lp += self.score(s);
            n += s.len();
        }
        (-lp / n.max(1) as f64).exp()
    }
}

/// Counts all n-grams up to `order` within each sentence.
pub fn train_ngram_lm(
    corpus: &[Vec<TokenId>],
    order: usize,
    vocab_size: usize,
    k: f64,
) -> Result<NgramLm> {
    if corpus.is_empty() {
        return Err(Error::Config("n-gram corpus is empty".into()));
    }
    if order == 0 || vocab_size == 0 || !(k > 0.0) {
        return Err(Error::Config(format!(
            "n-gram order ({order}), vocabulary ({vocab_size}) and k ({k}) must be positive"
        )));
    }
    let mut counts = HashMap::new();
    let mut context_totals = HashMap::new();
    let mut unigram_total = 0;
    for s in corpus {
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::InvalidVocab(format!(
                "token {bad} outside LM vocabulary of {vocab_size}"
            )));
        }
        unigram_total += s.len() as u64;
        for i in 0..s.len() {
            for n in 1..=order.min(i + 1) {
                let gram = &s[i + 1 - n..=i];
                *counts.entry(gram.to_vec()).or_insert(0) += 1;
                if n > 1 {
                    *context_totals.entry(gram[..n - 1].to_vec()).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(NgramLm {
        order,
        vocab_size,
        k,
        counts,
        context_totals,
        unigram_total,
    })
}
