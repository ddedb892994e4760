use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{is_final, lookahead_decode, token_orders, DecodeConstraints, Decoded, NgramLm};
use crate::dag::DagParams;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub lm_weight: f64,
    /// Final hypotheses are ranked by `score / len^len_norm`.
    pub len_norm: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 200,
            lm_weight: 0.1,
            len_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Hyp {
    vertices: Vec<usize>,
    tokens: Vec<TokenId>,
    dag_score: f64,
    lm_score: f64,
    score: f64,
}

impl Hyp {
    fn into_decoded(self, relaxed: bool) -> Decoded {
        Decoded {
            tokens: TokenSeq(self.tokens),
            vertices: self.vertices,
            dag_score: self.dag_score,
            lm_score: self.lm_score,
            relaxed,
        }
    }
}

/// Two hypotheses with equal keys have identical futures: same vertex, same
/// LM state and the same banned sets from here on.
#[derive(Hash, PartialEq, Eq)]
struct MergeKey {
    vertex: usize,
    suffix: Vec<TokenId>,
    trigrams: Vec<[TokenId; 3]>,
}

struct Candidate {
    score: f64,
    parent: usize,
    vertex: usize,
    token: TokenId,
}

/// Beam search over (vertex, token) expansions with optional LM fusion.
///
/// Hypotheses sharing a [`MergeKey`] are merged keeping the higher score, so
/// with `lm_weight = 0`, `len_norm = 0` and a beam at least as wide as the
/// number of distinct keys the result is the best constrained path.
///
/// The lookahead path is also entered as a finished hypothesis (unless it had
/// to relax the constraints), so pruning never leaves the result below it.
pub fn beam_search(
    dag: &DagParams,
    lm: Option<&NgramLm>,
    cfg: &BeamConfig,
    constraints: &DecodeConstraints,
) -> Result<Decoded> {
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let lm = lm.filter(|_| cfg.lm_weight != 0.0);
    if let Some(lm) = lm {
        if lm.vocab_size() < dag.vocab_size() {
            return Err(Error::Config(format!(
                "LM vocabulary ({}) is smaller than the DAG's ({})",
                lm.vocab_size(),
                dag.vocab_size()
            )));
        }
    }
    let suffix_len = lm.map_or(0, |m| m.order() - 1).max(3);
    let orders = token_orders(dag);
    let lm_lp = |h: &[TokenId], y: TokenId| lm.map_or(0.0, |m| m.log_prob(h, y));

    let key_of = |parent: Option<&Hyp>, vertex: usize, token: TokenId| {
        let mut toks: Vec<TokenId> = parent.map_or_else(Vec::new, |h| h.tokens.clone());
        toks.push(token);
        let trigrams = if constraints.no_repeat_trigram {
            toks.windows(3)
                .map(|w| [w[0], w[1], w[2]])
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        } else {
            Vec::new()
        };
        let start = toks.len().saturating_sub(suffix_len);
        MergeKey {
            vertex,
            suffix: toks[start..].to_vec(),
            trigrams,
        }
    };

    let select = |mut cands: Vec<Candidate>, parents: &[Hyp]| -> Vec<Hyp> {
        cands.sort_unstable_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.parent.cmp(&b.parent))
                .then(a.vertex.cmp(&b.vertex))
                .then(a.token.cmp(&b.token))
        });
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(cfg.beam_size);
        for c in cands {
            if out.len() == cfg.beam_size || c.score == f64::NEG_INFINITY {
                break;
            }
            let parent = parents.get(c.parent);
            if !seen.insert(key_of(parent, c.vertex, c.token)) {
                continue;
            }
            let hyp = match parent {
                None => Hyp {
                    vertices: vec![c.vertex],
                    tokens: vec![c.token],
                    dag_score: dag.emit(c.vertex, c.token),
                    lm_score: lm_lp(&[], c.token),
                    score: c.score,
                },
                Some(p) => {
                    let i = *p.vertices.last().unwrap();
                    let mut h = p.clone();
                    h.lm_score += lm_lp(&p.tokens, c.token);
                    h.dag_score += dag.trans(i, c.vertex) + dag.emit(c.vertex, c.token);
                    h.vertices.push(c.vertex);
                    h.tokens.push(c.token);
                    h.score = c.score;
                    h
                }
            };
            out.push(hyp);
        }
        out
    };

    let first: Vec<Candidate> = (0..dag.vocab_size() as TokenId)
        .map(|y| Candidate {
            score: dag.emit(0, y) + cfg.lm_weight * lm_lp(&[], y),
            parent: usize::MAX,
            vertex: 0,
            token: y,
        })
        .collect();
    let mut finished = Vec::new();
    let mut active = Vec::new();
    for h in select(first, &[]) {
        if is_final(dag, 0, h.tokens[0]) {
            finished.push(h);
        } else {
            active.push(h);
        }
    }
    let mut last_partial: Option<Hyp> = active.first().cloned();

    while !active.is_empty() {
        let mut cands = Vec::new();
        for (p, h) in active.iter().enumerate() {
            let i = *h.vertices.last().unwrap();
            let banned = constraints.banned(&h.tokens);
            for j in i + 1..dag.len() {
                let tr = dag.trans(i, j);
                if tr == f64::NEG_INFINITY {
                    continue;
                }
                let allowed = orders[j].iter().copied().filter(|t| !banned.contains(t));
                // without an LM, only the beam_size best tokens of a vertex can survive
                let allowed: Box<dyn Iterator<Item = TokenId>> = if lm.is_some() {
                    Box::new(allowed)
                } else {
                    Box::new(allowed.take(cfg.beam_size))
                };
                for y in allowed {
                    cands.push(Candidate {
                        score: h.score + tr + dag.emit(j, y) + cfg.lm_weight * lm_lp(&h.tokens, y),
                        parent: p,
                        vertex: j,
                        token: y,
                    });
                }
            }
        }
        let next = select(cands, &active);
        active = Vec::with_capacity(next.len());
        for h in next {
            if is_final(dag, *h.vertices.last().unwrap(), *h.tokens.last().unwrap()) {
                finished.push(h);
            } else {
                active.push(h);
            }
        }
        if let Some(h) = active.first() {
            last_partial = Some(h.clone());
        }
    }

    let la = lookahead_decode(dag, constraints);
    if !la.relaxed {
        let mut lm_score = 0.0;
        for k in 0..la.tokens.len() {
            lm_score += lm_lp(&la.tokens[..k], la.tokens[k]);
        }
        finished.push(Hyp {
            score: la.dag_score + cfg.lm_weight * lm_score,
            vertices: la.vertices,
            tokens: la.tokens.0,
            dag_score: la.dag_score,
            lm_score,
        });
    }

    let norm = |h: &Hyp| h.score / (h.tokens.len() as f64).powf(cfg.len_norm);
    let mut best: Option<&Hyp> = None;
    for h in &finished {
        if best.map_or(true, |b| norm(h) > norm(b)) {
            best = Some(h);
        }
    }
    match best {
        Some(h) => Ok(h.clone().into_decoded(false)),
        None => last_partial
            .map(|h| h.into_decoded(true))
            .ok_or_else(|| Error::Config("beam search produced no hypothesis".into())),
    }
}
