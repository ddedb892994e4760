//! Path search over a DAG: lookahead, greedy, beam search with an n-gram LM
//! and nucleus sampling, all under the repetition constraints.

mod beam;
pub mod constraints;
pub mod lm;
mod nucleus;

use serde::{Deserialize, Serialize};

pub use beam::{beam_search, BeamConfig};
pub use constraints::{scan, DecodeConstraints, Violations};
pub use lm::{train_ngram_lm, NgramLm};
pub use nucleus::nucleus_sample;

use crate::dag::DagParams;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::vocab::{TokenId, TokenSeq, EOS};

/// A decoded path.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: TokenSeq,
    pub vertices: Vec<usize>,
    pub dag_score: f64,
    pub lm_score: f64,
    /// Set when the constraints had to be relaxed or no hypothesis completed.
    pub relaxed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Lookahead,
    Greedy,
    Beam,
    Nucleus,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lookahead" => Ok(Algorithm::Lookahead),
            "greedy" => Ok(Algorithm::Greedy),
            "beam" => Ok(Algorithm::Beam),
            "nucleus" => Ok(Algorithm::Nucleus),
            other => Err(Error::Config(format!(
                "unknown decoding algorithm {other:?} (lookahead|greedy|beam|nucleus)"
            ))),
        }
    }
}

/// Everything needed to pick and run one decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub algorithm: Algorithm,
    pub beam: BeamConfig,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
    pub constraints: DecodeConstraints,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            algorithm: Algorithm::Lookahead,
            beam: BeamConfig::default(),
            top_p: 0.9,
            temperature: 1.0,
            seed: 0,
            constraints: DecodeConstraints::default(),
        }
    }
}

impl DecoderConfig {
    /// Runs the configured algorithm. `index` keys the sampling stream so
    /// results do not depend on processing order.
    pub fn decode(&self, dag: &DagParams, lm: Option<&NgramLm>, index: usize) -> Result<Decoded> {
        match self.algorithm {
            Algorithm::Lookahead => Ok(lookahead_decode(dag, &self.constraints)),
            Algorithm::Greedy => Ok(greedy_decode(dag, &self.constraints)),
            Algorithm::Beam => beam_search(dag, lm, &self.beam, &self.constraints),
            Algorithm::Nucleus => {
                let mut r = crate::rng::derived(self.seed, index as u64);
                nucleus_sample(dag, self.top_p, self.temperature, &self.constraints, &mut r)
            }
        }
    }

    /// Decodes every DAG; item `i` uses index `i`, so the policy does not change outputs.
    pub fn decode_batch(&self, dags: &[DagParams], lm: Option<&NgramLm>, exec: Exec) -> Result<Vec<Decoded>> {
        exec.map(dags, |i, dag| self.decode(dag, lm, i)).into_iter().collect()
    }
}

/// Sum of emission and transition log-probabilities along a path.
pub fn score_path(dag: &DagParams, vertices: &[usize], tokens: &[TokenId]) -> Result<f64> {
    if vertices.is_empty() || vertices.len() != tokens.len() {
        return Err(Error::InvalidPath(format!(
            "{} vertices for {} tokens",
            vertices.len(),
            tokens.len()
        )));
    }
    if let Some(w) = vertices.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::InvalidPath(format!(
            "vertices must increase, found {} then {}",
            w[0], w[1]
        )));
    }
    if let Some(&v) = vertices.iter().find(|&&v| v >= dag.len()) {
        return Err(Error::InvalidPath(format!("vertex {v} outside DAG of {}", dag.len())));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= dag.vocab_size()) {
        return Err(Error::InvalidPath(format!("token {t} outside vocabulary")));
    }
    let mut s: f64 = vertices.iter().zip(tokens).map(|(&v, &t)| dag.emit(v, t)).sum();
    for w in vertices.windows(2) {
        s += dag.trans(w[0], w[1]);
    }
    Ok(s)
}

/// Tokens of every vertex ordered by emission score, best first; ties by id.
pub(crate) fn token_orders(dag: &DagParams) -> Vec<Vec<TokenId>> {
    (0..dag.len())
        .map(|v| {
            let row = dag.emit_row(v);
            let mut ids: Vec<TokenId> = (0..dag.vocab_size() as TokenId).collect();
            ids.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
            ids
        })
        .collect()
}

pub(crate) fn best_allowed(order: &[TokenId], banned: &[TokenId]) -> Option<TokenId> {
    order.iter().copied().find(|t| !banned.contains(t))
}

/// Ends a path: the last vertex, or an emitted `[EOS]`.
pub(crate) fn is_final(dag: &DagParams, vertex: usize, token: TokenId) -> bool {
    vertex + 1 == dag.len() || token == EOS
}

struct PathBuilder<'a> {
    dag: &'a DagParams,
    tokens: Vec<TokenId>,
    vertices: Vec<usize>,
    score: f64,
    relaxed: bool,
}

impl<'a> PathBuilder<'a> {
    fn start(dag: &'a DagParams, orders: &[Vec<TokenId>]) -> Self {
        let t = orders[0][0];
        PathBuilder {
            dag,
            tokens: vec![t],
            vertices: vec![0],
            score: dag.emit(0, t),
            relaxed: false,
        }
    }

    fn push(&mut self, j: usize, y: TokenId) {
        let i = *self.vertices.last().expect("path is never empty");
        self.score += self.dag.trans(i, j) + self.dag.emit(j, y);
        self.vertices.push(j);
        self.tokens.push(y);
    }

    fn done(&self) -> bool {
        let (&v, &t) = (self.vertices.last().unwrap(), self.tokens.last().unwrap());
        is_final(self.dag, v, t)
    }

    fn finish(self) -> Decoded {
        Decoded {
            tokens: TokenSeq(self.tokens),
            vertices: self.vertices,
            dag_score: self.score,
            lm_score: 0.0,
            relaxed: self.relaxed,
        }
    }
}

/// Best `(j, y)` successor of vertex `i` by joint score; ties go to the smaller
/// vertex, then to the token earlier in `orders`.
fn best_pair(
    dag: &DagParams,
    orders: &[Vec<TokenId>],
    i: usize,
    banned: &[TokenId],
) -> Option<(usize, TokenId)> {
    let mut best: Option<(f64, usize, TokenId)> = None;
    for j in i + 1..dag.len() {
        let tr = dag.trans(i, j);
        if tr == f64::NEG_INFINITY {
            continue;
        }
        let Some(y) = best_allowed(&orders[j], banned) else { continue };
        let s = tr + dag.emit(j, y);
        if best.map_or(true, |(b, _, _)| s > b) {
            best = Some((s, j, y));
        }
    }
    best.map(|(_, j, y)| (j, y))
}

/// Repeatedly takes the jointly best (next vertex, token) pair.
pub fn lookahead_decode(dag: &DagParams, constraints: &DecodeConstraints) -> Decoded {
    let orders = token_orders(dag);
    let mut path = PathBuilder::start(dag, &orders);
    while !path.done() {
        let i = *path.vertices.last().unwrap();
        let banned = constraints.banned(&path.tokens);
        let (j, y) = match best_pair(dag, &orders, i, &banned) {
            Some(p) => p,
            None => {
                path.relaxed = true;
                best_pair(dag, &orders, i, &[]).expect("every non-final vertex has a successor")
            }
        };
        path.push(j, y);
    }
    path.finish()
}

/// Picks the most likely transition first, then the best allowed token there.
pub fn greedy_decode(dag: &DagParams, constraints: &DecodeConstraints) -> Decoded {
    let orders = token_orders(dag);
    let mut path = PathBuilder::start(dag, &orders);
    while !path.done() {
        let i = *path.vertices.last().unwrap();
        let mut succ: Vec<usize> = (i + 1..dag.len())
            .filter(|&j| dag.trans(i, j) > f64::NEG_INFINITY)
            .collect();
        succ.sort_by(|&a, &b| dag.trans(i, b).total_cmp(&dag.trans(i, a)).then(a.cmp(&b)));
        let banned = constraints.banned(&path.tokens);
        let pick = succ
            .iter()
            .find_map(|&j| best_allowed(&orders[j], &banned).map(|y| (j, y)));
        let (j, y) = pick.unwrap_or_else(|| {
            path.relaxed = true;
            (succ[0], orders[succ[0]][0])
        });
        path.push(j, y);
    }
    path.finish()
}
