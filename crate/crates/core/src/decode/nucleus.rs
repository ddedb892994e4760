use rand::Rng as _;

use super::{is_final, lookahead_decode, DecodeConstraints, Decoded};
use crate::dag::DagParams;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::{TokenId, TokenSeq};

/// Draws one candidate from the top-p nucleus of `cands` (log scores).
/// Candidates must already be in (score desc, vertex asc, token asc) order.
fn draw(cands: &[(f64, usize, TokenId)], p: f64, temperature: f64, rng: &mut Rng) -> (usize, TokenId) {
    let max = cands[0].0 / temperature;
    let weights: Vec<f64> = cands.iter().map(|c| (c.0 / temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut keep = weights.len();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w / total;
        if acc >= p {
            keep = k + 1;
            break;
        }
    }
    let mass: f64 = weights[..keep].iter().sum();
    let mut u = rng.gen::<f64>() * mass;
    for k in 0..keep {
        u -= weights[k];
        if u < 0.0 {
            return (cands[k].1, cands[k].2);
        }
    }
    (cands[keep - 1].1, cands[keep - 1].2)
}

fn sort_candidates(c: &mut [(f64, usize, TokenId)]) {
    c.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
}

/// Samples a path one (vertex, token) pair at a time from the temperature-scaled
/// joint distribution truncated to its top-p nucleus. `temperature = 0` is
/// [`lookahead_decode`].
pub fn nucleus_sample(
    dag: &DagParams,
    p: f64,
    temperature: f64,
    constraints: &DecodeConstraints,
    rng: &mut Rng,
) -> Result<Decoded> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("top_p must lie in (0, 1], got {p}")));
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be non-negative, got {temperature}")));
    }
    if temperature == 0.0 {
        return Ok(lookahead_decode(dag, constraints));
    }
    let mut first: Vec<(f64, usize, TokenId)> = (0..dag.vocab_size() as TokenId)
        .map(|y| (dag.emit(0, y), 0, y))
        .filter(|c| c.0 > f64::NEG_INFINITY)
        .collect();
    sort_candidates(&mut first);
    let (_, t0) = draw(&first, p, temperature, rng);
    let mut vertices = vec![0];
    let mut tokens = vec![t0];
    let mut score = dag.emit(0, t0);
    let mut relaxed = false;
    while !is_final(dag, *vertices.last().unwrap(), *tokens.last().unwrap()) {
        let i = *vertices.last().unwrap();
        let banned = constraints.banned(&tokens);
        let gather = |banned: &[TokenId]| {
            let mut c = Vec::new();
            for j in i + 1..dag.len() {
                let tr = dag.trans(i, j);
                if tr == f64::NEG_INFINITY {
                    continue;
                }
                for y in 0..dag.vocab_size() as TokenId {
                    let s = tr + dag.emit(j, y);
                    if s > f64::NEG_INFINITY && !banned.contains(&y) {
                        c.push((s, j, y));
                    }
                }
            }
            c
        };
        let mut cands = gather(&banned);
        if cands.is_empty() {
            relaxed = true;
            cands = gather(&[]);
        }
        sort_candidates(&mut cands);
        let (j, y) = draw(&cands, p, temperature, rng);
        score += dag.trans(i, j) + dag.emit(j, y);
        vertices.push(j);
        tokens.push(y);
    }
    Ok(Decoded {
        tokens: TokenSeq(tokens),
        vertices,
        dag_score: score,
        lm_score: 0.0,
        relaxed,
    })
}
