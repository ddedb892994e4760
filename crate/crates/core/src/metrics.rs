//! Corpus BLEU, Distinct-n, exact match and position-bucketed token accuracy.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU (0-100) with one reference per hypothesis, no smoothing.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Config("BLEU needs at least one hypothesis".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            expected: refs.len(),
            actual: hyps.len(),
        });
    }
    if max_n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Unique n-grams over total n-grams across all hypotheses; 0 when there are none.
pub fn distinct_n<T: Eq + Hash>(hyps: &[Vec<T>], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        if h.len() >= n {
            for w in h.windows(n) {
                seen.insert(w);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Fraction of hypotheses equal to their reference.
pub fn exact_match<T: Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() || hyps.is_empty() {
        return Err(Error::LengthMismatch {
            expected: refs.len(),
            actual: hyps.len(),
        });
    }
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hyps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccBucket {
    /// Interval `(lo, hi]` over relative position.
    pub lo: f64,
    pub hi: f64,
    /// `None` when no token fell into the bucket.
    pub value: Option<f64>,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccProfile {
    pub buckets: Vec<AccBucket>,
}

/// `k` equal-width intervals covering `(0, 1)`.
pub fn equal_buckets(k: usize) -> Vec<(f64, f64)> {
    (0..k)
        .map(|i| (i as f64 / k as f64, (i + 1) as f64 / k as f64))
        .collect()
}

fn check_partition(edges: &[(f64, f64)]) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(format!("buckets must partition (0, 1): {m}")));
    let (Some(first), Some(last)) = (edges.first(), edges.last()) else {
        return bad("no buckets");
    };
    if first.0 != 0.0 || last.1 != 1.0 {
        return bad("must start at 0 and end at 1");
    }
    if edges.iter().any(|(lo, hi)| !(lo < hi)) {
        return bad("empty interval");
    }
    if edges.windows(2).any(|w| w[0].1 != w[1].0) {
        return bad("intervals are not contiguous");
    }
    Ok(())
}

/// Token `j` (1-based) of a hypothesis of length `n` sits at `j / (n + 1)` and
/// counts as correct when it occurs anywhere in the reference.
pub fn acc_profile<T: Eq + Hash>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    buckets: &[(f64, f64)],
) -> Result<AccProfile> {
    check_partition(buckets)?;
    if hyps.len() != refs.len() {
        return Err(Error::LengthMismatch {
            expected: refs.len(),
            actual: hyps.len(),
        });
    }
    let mut correct = vec![0usize; buckets.len()];
    let mut total = vec![0usize; buckets.len()];
    for (h, r) in hyps.iter().zip(refs) {
        let members: HashSet<&T> = r.iter().collect();
        for (j, tok) in h.iter().enumerate() {
            let pos = (j + 1) as f64 / (h.len() + 1) as f64;
            let b = buckets
                .iter()
                .position(|&(lo, hi)| pos > lo && pos <= hi)
                .expect("partition covers (0, 1)");
            total[b] += 1;
            if members.contains(tok) {
                correct[b] += 1;
            }
        }
    }
    Ok(AccProfile {
        buckets: buckets
            .iter()
            .enumerate()
            .map(|(b, &(lo, hi))| AccBucket {
                lo,
                hi,
                value: (total[b] > 0).then(|| correct[b] as f64 / total[b] as f64),
                tokens: total[b],
            })
            .collect(),
    })
}

/// `profile - (l2r + r2l) / 2`, bucket by bucket.
pub fn delta_acc(profile: &AccProfile, l2r: &AccProfile, r2l: &AccProfile) -> Result<AccProfile> {
    let same = |a: &AccProfile, b: &AccProfile| {
        a.buckets.len() == b.buckets.len()
            && a.buckets
                .iter()
                .zip(&b.buckets)
                .all(|(x, y)| x.lo == y.lo && x.hi == y.hi)
    };
    if !same(profile, l2r) || !same(profile, r2l) {
        return Err(Error::Config("profiles use different bucket partitions".into()));
    }
    Ok(AccProfile {
        buckets: profile
            .buckets
            .iter()
            .zip(&l2r.buckets)
            .zip(&r2l.buckets)
            .map(|((p, l), r)| AccBucket {
                lo: p.lo,
                hi: p.hi,
                value: match (p.value, l.value, r.value) {
                    (Some(p), Some(l), Some(r)) => Some(p - (l + r) / 2.0),
                    _ => None,
                },
                tokens: p.tokens,
            })
            .collect(),
    })
}

impl AccProfile {
    /// Tab-separated `lo hi value tokens` rows with a header; empty buckets print `nan`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("lo\thi\tvalue\ttokens\n");
        for b in &self.buckets {
            let v = b.value.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
            s.push_str(&format!("{}\t{}\t{v}\t{}\n", b.lo, b.hi, b.tokens));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut buckets = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let parse_err = |field: &str| Error::Parse {
                field: format!("line {} {field}", i + 1),
                message: format!("cannot parse {line:?}"),
            };
            if f.len() != 4 {
                return Err(parse_err("columns"));
            }
            let num = |k: usize, name: &str| f[k].parse::<f64>().map_err(|_| parse_err(name));
            let value = num(2, "value")?;
            buckets.push(AccBucket {
                lo: num(0, "lo")?,
                hi: num(1, "hi")?,
                value: (!value.is_nan()).then_some(value),
                tokens: f[3].parse().map_err(|_| parse_err("tokens"))?,
            });
        }
        let edges: Vec<(f64, f64)> = buckets.iter().map(|b| (b.lo, b.hi)).collect();
        check_partition(&edges)?;
        Ok(AccProfile { buckets })
    }
}
