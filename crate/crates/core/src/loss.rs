//! Alignment-marginalising DAG loss and its relatives.
//!
//! A target `y` of length `N` is aligned to a strictly increasing vertex path
//! that starts at vertex `0` and ends at vertex `L - 1`. The marginal
//! likelihood sums, over all such paths, the product of emission and
//! transition probabilities along the path. Everything is computed in
//! natural-log space in `f64`.

use serde::{Deserialize, Serialize};

use crate::dag::{log_add, DagParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::vocab::{TokenId, PAD};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Upper bound on the number of paths `brute_force_marginal` will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Forward lattice of the alignment DP.
#[derive(Clone, Debug)]
pub struct AlignmentResult {
    pub log_marginal: f64,
    /// `alpha[i * L + j]`: log-probability of emitting `y[..=i]` on a path
    /// from vertex 0 that currently sits on vertex `j`.
    pub alpha: Vec<f64>,
    pub target_len: usize,
    pub dag_len: usize,
}

impl AlignmentResult {
    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        self.alpha[i * self.dag_len + j]
    }
}

/// Gradient of a loss with respect to the raw DAG entries, same layouts as
/// [`DagParams::emit_logp`] and [`DagParams::trans_logp`].
#[derive(Clone, Debug, PartialEq)]
pub struct DagGrad {
    pub emit: Vec<f64>,
    pub trans: Vec<f64>,
}

impl DagGrad {
    pub fn zeros(dag: &DagParams) -> Self {
        DagGrad {
            emit: vec![0.0; dag.len() * dag.vocab_size()],
            trans: vec![0.0; dag.len() * dag.len()],
        }
    }
}

fn check_target(dag: &DagParams, target: &[TokenId]) -> Result<()> {
    let (n, l) = (target.len(), dag.len());
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    // A single token cannot both start at vertex 0 and end at vertex L - 1.
    if n > l || (n == 1 && l > 1) {
        return Err(Error::InfeasibleAlignment {
            target: n,
            vertices: l,
        });
    }
    if let Some(&y) = target.iter().find(|&&y| y as usize >= dag.vocab_size()) {
        return Err(Error::InvalidVocab(format!(
            "target token {y} outside DAG vocabulary of {}",
            dag.vocab_size()
        )));
    }
    Ok(())
}

/// Forward DP: `alpha[0][0] = emit[0][y_0]`,
/// `alpha[i][j] = emit[j][y_i] + logsumexp_{k<j}(alpha[i-1][k] + trans[k][j])`.
pub fn dat_forward(dag: &DagParams, target: &[TokenId]) -> Result<AlignmentResult> {
    check_target(dag, target)?;
    let (n, l) = (target.len(), dag.len());
    let mut alpha = vec![NEG_INF; n * l];
    alpha[0] = dag.emit(0, target[0]);
    for i in 1..n {
        let (prev, cur) = alpha.split_at_mut(i * l);
        let prev = &prev[(i - 1) * l..];
        let cur = &mut cur[..l];
        let y = target[i];
        // Vertex j needs at least i predecessors on the path.
        for j in i..l {
            let mut acc = NEG_INF;
            for k in (i - 1)..j {
                let a = prev[k];
                if a != NEG_INF {
                    acc = log_add(acc, a + dag.trans(k, j));
                }
            }
            cur[j] = if acc == NEG_INF {
                NEG_INF
            } else {
                acc + dag.emit(j, y)
            };
        }
    }
    Ok(AlignmentResult {
        log_marginal: alpha[(n - 1) * l + l - 1],
        alpha,
        target_len: n,
        dag_len: l,
    })
}

/// Backward lattice: `beta[i][j]` is the log-probability of completing
/// `y[i+1..]` from vertex `j` through to vertex `L - 1`.
fn dat_backward(dag: &DagParams, target: &[TokenId]) -> Vec<f64> {
    let (n, l) = (target.len(), dag.len());
    let mut beta = vec![NEG_INF; n * l];
    beta[(n - 1) * l + l - 1] = 0.0;
    for i in (0..n - 1).rev() {
        let (cur, next) = beta.split_at_mut((i + 1) * l);
        let cur = &mut cur[i * l..];
        let next = &next[..l];
        let y = target[i + 1];
        for k in 0..l {
            let mut acc = NEG_INF;
            for j in k + 1..l {
                let b = next[j];
                if b != NEG_INF {
                    acc = log_add(acc, dag.trans(k, j) + dag.emit(j, y) + b);
                }
            }
            cur[k] = acc;
        }
    }
    beta
}

/// Loss `-log_marginal` and its gradient with respect to every emission and
/// transition entry, treated as free variables.
pub fn dat_loss_grad(dag: &DagParams, target: &[TokenId]) -> Result<(f64, DagGrad)> {
    let fwd = dat_forward(dag, target)?;
    let log_z = fwd.log_marginal;
    if log_z == NEG_INF {
        return Err(Error::InfeasibleAlignment {
            target: target.len(),
            vertices: dag.len(),
        });
    }
    let beta = dat_backward(dag, target);
    let (n, l, v) = (target.len(), dag.len(), dag.vocab_size());
    let mut grad = DagGrad::zeros(dag);
    for (i, &y) in target.iter().enumerate() {
        for j in 0..l {
            let a = fwd.alpha[i * l + j];
            let b = beta[i * l + j];
            if a == NEG_INF || b == NEG_INF {
                continue;
            }
            grad.emit[j * v + y as usize] -= (a + b - log_z).exp();
            if i == 0 {
                continue;
            }
            let tail = dag.emit(j, y) + b - log_z;
            for k in (i - 1)..j {
                let ap = fwd.alpha[(i - 1) * l + k];
                if ap != NEG_INF {
                    grad.trans[k * l + j] -= (ap + dag.trans(k, j) + tail).exp();
                }
            }
        }
    }
    debug_assert_eq!(grad.emit.len(), l * v);
    let _ = n;
    Ok((-log_z, grad))
}

/// One target fragment `target[tgt_start..tgt_end]` aligned to the decoder
/// segment `dec_start..dec_end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct Fragment {
    pub tgt_start: usize,
    pub tgt_end: usize,
    pub dec_start: usize,
    pub dec_end: usize,
}

impl From<[usize; 4]> for Fragment {
    fn from([tgt_start, tgt_end, dec_start, dec_end]: [usize; 4]) -> Self {
        Fragment {
            tgt_start,
            tgt_end,
            dec_start,
            dec_end,
        }
    }
}

impl From<Fragment> for [usize; 4] {
    fn from(f: Fragment) -> Self {
        [f.tgt_start, f.tgt_end, f.dec_start, f.dec_end]
    }
}

impl Fragment {
    pub fn target_len(&self) -> usize {
        self.tgt_end.saturating_sub(self.tgt_start)
    }

    pub fn segment_len(&self) -> usize {
        self.dec_end.saturating_sub(self.dec_start)
    }
}

/// Ordered, disjoint fragments.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FragmentSpec {
    pub pairs: Vec<Fragment>,
}

impl FragmentSpec {
    pub fn new(pairs: Vec<Fragment>) -> Self {
        FragmentSpec { pairs }
    }

    /// Checks ordering, disjointness, bounds and length feasibility.
    pub fn validate(&self, target_len: usize, dag_len: usize) -> Result<()> {
        let mut prev: Option<&Fragment> = None;
        for (index, f) in self.pairs.iter().enumerate() {
            let bad = |reason: String| Error::InfeasibleFragment { index, reason };
            if f.tgt_start >= f.tgt_end || f.tgt_end > target_len {
                return Err(bad(format!(
                    "target range {}..{} invalid for length {target_len}",
                    f.tgt_start, f.tgt_end
                )));
            }
            if f.dec_start >= f.dec_end || f.dec_end > dag_len {
                return Err(bad(format!(
                    "decoder range {}..{} invalid for {dag_len} vertices",
                    f.dec_start, f.dec_end
                )));
            }
            if f.segment_len() < f.target_len() {
                return Err(bad(format!(
                    "segment of {} vertices is shorter than its {} target tokens",
                    f.segment_len(),
                    f.target_len()
                )));
            }
            if f.target_len() == 1 && f.segment_len() > 1 {
                return Err(bad(
                    "a single-token fragment needs a single-vertex segment".into(),
                ));
            }
            if let Some(p) = prev {
                if f.tgt_start < p.tgt_end || f.dec_start < p.dec_end {
                    return Err(bad("fragments overlap or are out of order".into()));
                }
            }
            prev = Some(f);
        }
        Ok(())
    }
}

/// Sum over fragments of the DAG loss on each renormalized segment.
pub fn fragment_loss(dag: &DagParams, target: &[TokenId], frags: &FragmentSpec) -> Result<f64> {
    frags.validate(target.len(), dag.len())?;
    let mut total = 0.0;
    for (index, f) in frags.pairs.iter().enumerate() {
        let sub = dag.slice(f.dec_start, f.dec_end)?;
        let fwd = dat_forward(&sub, &target[f.tgt_start..f.tgt_end]).map_err(|e| {
            Error::InfeasibleFragment {
                index,
                reason: e.to_string(),
            }
        })?;
        total -= fwd.log_marginal;
    }
    Ok(total)
}

/// [`fragment_loss`] with its gradient with respect to the full DAG,
/// including the per-segment renormalization of transition rows.
pub fn fragment_loss_grad(
    dag: &DagParams,
    target: &[TokenId],
    frags: &FragmentSpec,
) -> Result<(f64, DagGrad)> {
    frags.validate(target.len(), dag.len())?;
    let (l, v) = (dag.len(), dag.vocab_size());
    let mut grad = DagGrad::zeros(dag);
    let mut total = 0.0;
    for (index, f) in frags.pairs.iter().enumerate() {
        let sub = dag.slice(f.dec_start, f.dec_end)?;
        let (loss, g) = dat_loss_grad(&sub, &target[f.tgt_start..f.tgt_end]).map_err(|e| {
            Error::InfeasibleFragment {
                index,
                reason: e.to_string(),
            }
        })?;
        total += loss;
        let s = f.dec_start;
        let m = sub.len();
        grad.emit[s * v..(s + m) * v]
            .iter_mut()
            .zip(&g.emit)
            .for_each(|(a, b)| *a += b);
        // Sliced row = raw row - logsumexp(raw row within the segment).
        for i in 0..m.saturating_sub(1) {
            let row_g = &g.trans[i * m..(i + 1) * m];
            let total_g: f64 = row_g[i + 1..].iter().sum();
            for j in i + 1..m {
                let p = sub.trans(i, j).exp();
                grad.trans[(s + i) * l + s + j] += row_g[j] - p * total_g;
            }
        }
    }
    Ok((total, grad))
}

/// Most probable path: the forward recursion with `max` in place of
/// `logsumexp`. Ties go to the smaller predecessor vertex.
pub fn viterbi_align(dag: &DagParams, target: &[TokenId]) -> Result<(Vec<usize>, f64)> {
    viterbi_align_pinned(dag, target, &[])
}

/// [`viterbi_align`] where `pins[i] = Some(v)` forces target `i` onto vertex `v`.
/// `pins` may be shorter than the target; missing entries are unpinned.
pub fn viterbi_align_pinned(
    dag: &DagParams,
    target: &[TokenId],
    pins: &[Option<usize>],
) -> Result<(Vec<usize>, f64)> {
    check_target(dag, target)?;
    let (n, l) = (target.len(), dag.len());
    let allowed = |i: usize, j: usize| match pins.get(i).copied().flatten() {
        Some(p) => p == j,
        None => true,
    };
    let mut delta = vec![NEG_INF; n * l];
    let mut back = vec![usize::MAX; n * l];
    if allowed(0, 0) {
        delta[0] = dag.emit(0, target[0]);
    }
    for i in 1..n {
        let y = target[i];
        for j in i..l {
            if !allowed(i, j) {
                continue;
            }
            let mut best = NEG_INF;
            let mut arg = usize::MAX;
            for k in (i - 1)..j {
                let d = delta[(i - 1) * l + k];
                if d == NEG_INF {
                    continue;
                }
                let s = d + dag.trans(k, j);
                if s > best {
                    best = s;
                    arg = k;
                }
            }
            if arg != usize::MAX {
                delta[i * l + j] = best + dag.emit(j, y);
                back[i * l + j] = arg;
            }
        }
    }
    let score = delta[(n - 1) * l + l - 1];
    if score == NEG_INF {
        return Err(Error::InfeasibleAlignment {
            target: n,
            vertices: l,
        });
    }
    let mut path = vec![0; n];
    path[n - 1] = l - 1;
    for i in (1..n).rev() {
        path[i - 1] = back[i * l + path[i]];
    }
    Ok((path, score))
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Test oracle: log-sum over every path, enumerated explicitly.
pub fn brute_force_marginal(dag: &DagParams, target: &[TokenId]) -> Result<f64> {
    check_target(dag, target)?;
    let (n, l) = (target.len(), dag.len());
    if n == 1 {
        return Ok(dag.emit(0, target[0]));
    }
    let count = binomial(l - 2, n - 2);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooManyPaths {
            count,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut total = NEG_INF;
    // Interior vertices are a sorted (n-2)-subset of 1..l-1.
    let mut interior: Vec<usize> = (1..n - 1).collect();
    loop {
        let mut path = Vec::with_capacity(n);
        path.push(0);
        path.extend_from_slice(&interior);
        path.push(l - 1);
        let mut s = 0.0;
        for (i, &v) in path.iter().enumerate() {
            s += dag.emit(v, target[i]);
            if i > 0 {
                s += dag.trans(path[i - 1], v);
            }
        }
        total = log_add(total, s);
        // Next combination in lexicographic order.
        let k = interior.len();
        let mut idx = k;
        while idx > 0 && interior[idx - 1] == l - 1 - (k - idx + 1) {
            idx -= 1;
        }
        if idx == 0 {
            break;
        }
        interior[idx - 1] += 1;
        for t in idx..k {
            interior[t] = interior[t - 1] + 1;
        }
    }
    Ok(total)
}

/// Token-level cross-entropy with the `i`-th token read off vertex `i`.
pub fn ce_loss(dag: &DagParams, target: &[TokenId]) -> Result<f64> {
    if target.len() != dag.len() {
        return Err(Error::LengthMismatch {
            expected: dag.len(),
            actual: target.len(),
        });
    }
    Ok(-target
        .iter()
        .enumerate()
        .map(|(i, &y)| dag.emit(i, y))
        .sum::<f64>())
}

/// [`ce_loss`] with its gradient; transitions get zero gradient.
pub fn ce_loss_grad(dag: &DagParams, target: &[TokenId]) -> Result<(f64, DagGrad)> {
    let loss = ce_loss(dag, target)?;
    let mut grad = DagGrad::zeros(dag);
    let v = dag.vocab_size();
    for (i, &y) in target.iter().enumerate() {
        grad.emit[i * v + y as usize] = -1.0;
    }
    Ok((loss, grad))
}

/// Standard CTC negative log-likelihood over the DAG's emissions only,
/// with `[PAD]` as the blank label.
pub fn ctc_loss(dag: &DagParams, target: &[TokenId]) -> Result<f64> {
    ctc_log_likelihood(dag, target).map(|ll| -ll)
}

fn ctc_log_likelihood(dag: &DagParams, target: &[TokenId]) -> Result<f64> {
    let (n, t_len) = (target.len(), dag.len());
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len < n + repeats {
        return Err(Error::InfeasibleAlignment {
            target: n,
            vertices: t_len,
        });
    }
    let blank = PAD;
    // Extended label sequence: blank, y1, blank, y2, ..., yN, blank.
    let ext: Vec<TokenId> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&y| [y, blank]))
        .collect();
    let s = ext.len();
    let mut alpha = vec![NEG_INF; s];
    alpha[0] = dag.emit(0, ext[0]);
    alpha[1] = dag.emit(0, ext[1]);
    for t in 1..t_len {
        let mut next = vec![NEG_INF; s];
        for (u, &label) in ext.iter().enumerate() {
            let mut acc = alpha[u];
            if u >= 1 {
                acc = log_add(acc, alpha[u - 1]);
            }
            if u >= 2 && label != blank && label != ext[u - 2] {
                acc = log_add(acc, alpha[u - 2]);
            }
            if acc != NEG_INF {
                next[u] = acc + dag.emit(t, label);
            }
        }
        alpha = next;
    }
    Ok(log_add(alpha[s - 1], alpha[s - 2]))
}

/// Mean DAG loss over a batch of `(dag, target)` pairs.
pub fn batch_dat_loss(batch: &[(DagParams, Vec<TokenId>)], exec: Exec) -> Result<f64> {
    let losses = exec.map(batch, |_, (dag, y)| dat_forward(dag, y).map(|r| -r.log_marginal));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::logsumexp;
    use crate::rng;
    use rand::Rng as _;

    const NI: f64 = f64::NEG_INFINITY;

    fn rand_dag(l: usize, v: usize, seed: u64) -> DagParams {
        DagParams::random(l, v, 3.0, &mut rng::seeded(seed))
    }

    fn rand_target(n: usize, v: usize, seed: u64) -> Vec<TokenId> {
        let mut r = rng::derived(seed, 99);
        (0..n).map(|_| r.gen_range(0..v as TokenId)).collect()
    }

    /// Independent oracle: recursive enumeration of every strictly increasing
    /// path from vertex 0 to vertex L-1 (different code path from the library
    /// brute force, which walks combinations iteratively).
    fn all_paths(l: usize, n: usize) -> Vec<Vec<usize>> {
        fn rec(cur: &mut Vec<usize>, l: usize, n: usize, out: &mut Vec<Vec<usize>>) {
            let last = *cur.last().unwrap();
            if cur.len() == n {
                if last == l - 1 {
                    out.push(cur.clone());
                }
                return;
            }
            for next in last + 1..l {
                cur.push(next);
                rec(cur, l, n, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(&mut vec![0], l, n, &mut out);
        out
    }

    fn path_score(dag: &DagParams, path: &[usize], y: &[TokenId]) -> f64 {
        path.iter().zip(y).map(|(&v, &t)| dag.emit(v, t)).sum::<f64>()
            + path.windows(2).map(|w| dag.trans(w[0], w[1])).sum::<f64>()
    }

    #[test]
    fn single_and_unique_paths() {
        let dag = rand_dag(1, 4, 1);
        let r = dat_forward(&dag, &[2]).unwrap();
        assert_eq!(r.log_marginal, dag.emit(0, 2));

        let dag = rand_dag(2, 4, 2);
        let r = dat_forward(&dag, &[1, 3]).unwrap();
        let expect = dag.emit(0, 1) + dag.trans(0, 1) + dag.emit(1, 3);
        assert!((r.log_marginal - expect).abs() < 1e-12);
        assert_eq!(r.log_marginal, r.alpha(1, 1));
    }

    #[test]
    fn two_paths_for_n3_l4() {
        let dag = rand_dag(4, 5, 3);
        let y = [0, 4, 2];
        let expect = log_add(
            path_score(&dag, &[0, 1, 3], &y),
            path_score(&dag, &[0, 2, 3], &y),
        );
        let got = dat_forward(&dag, &y).unwrap().log_marginal;
        assert!((got - expect).abs() < 1e-9);
        assert!((brute_force_marginal(&dag, &y).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let dag = rand_dag(3, 4, 4);
        assert!(matches!(dat_forward(&dag, &[]), Err(Error::EmptyTarget)));
        assert!(matches!(
            dat_forward(&dag, &[0, 1, 2, 3]),
            Err(Error::InfeasibleAlignment { target: 4, vertices: 3 })
        ));
        assert!(matches!(
            dat_forward(&dag, &[1]),
            Err(Error::InfeasibleAlignment { .. })
        ));
    }

    #[test]
    fn forward_matches_recursive_enumeration_grid() {
        for l in 1..=10 {
            for n in 1..=l {
                if n == 1 && l > 1 {
                    continue;
                }
                let seed = (l * 100 + n) as u64;
                let dag = rand_dag(l, 5, seed);
                let y = rand_target(n, 5, seed);
                let oracle = logsumexp(all_paths(l, n).iter().map(|p| path_score(&dag, p, &y)));
                let dp = dat_forward(&dag, &y).unwrap().log_marginal;
                let bf = brute_force_marginal(&dag, &y).unwrap();
                assert!((dp - oracle).abs() <= 1e-9, "L={l} N={n}: {dp} vs {oracle}");
                assert!((bf - oracle).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        let dag = rand_dag(40, 2, 5);
        let y = vec![0; 20];
        assert!(matches!(
            brute_force_marginal(&dag, &y),
            Err(Error::TooManyPaths { .. })
        ));
    }

    fn numeric_grad(dag: &DagParams, f: impl Fn(&DagParams) -> f64, h: f64) -> DagGrad {
        let (l, v) = (dag.len(), dag.vocab_size());
        let mut g = DagGrad::zeros(dag);
        for idx in 0..l * v {
            let mut p = dag.emit_logp().to_vec();
            let mut m = dag.emit_logp().to_vec();
            p[idx] += h;
            m[idx] -= h;
            let dp = DagParams::new_unchecked(l, v, p, dag.trans_logp().to_vec()).unwrap();
            let dm = DagParams::new_unchecked(l, v, m, dag.trans_logp().to_vec()).unwrap();
            g.emit[idx] = (f(&dp) - f(&dm)) / (2.0 * h);
        }
        for idx in 0..l * l {
            if dag.trans_logp()[idx] == NI {
                continue;
            }
            let mut p = dag.trans_logp().to_vec();
            let mut m = dag.trans_logp().to_vec();
            p[idx] += h;
            m[idx] -= h;
            let dp = DagParams::new_unchecked(l, v, dag.emit_logp().to_vec(), p).unwrap();
            let dm = DagParams::new_unchecked(l, v, dag.emit_logp().to_vec(), m).unwrap();
            g.trans[idx] = (f(&dp) - f(&dm)) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_trivial_cases() {
        let dag = rand_dag(1, 3, 6);
        let (loss, g) = dat_loss_grad(&dag, &[1]).unwrap();
        assert_eq!(loss, -dag.emit(0, 1));
        assert_eq!(g.emit, vec![0.0, -1.0, 0.0]);

        let dag = rand_dag(2, 3, 7);
        let (_, g) = dat_loss_grad(&dag, &[2, 0]).unwrap();
        let mut want_emit = vec![0.0; 6];
        want_emit[2] = -1.0;
        want_emit[3] = -1.0;
        assert_eq!(g.emit, want_emit);
        assert_eq!(g.trans, vec![0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dag = rand_dag(5, 4, 8);
        let y = [3, 0, 2];
        let (_, g) = dat_loss_grad(&dag, &y).unwrap();
        let f = |d: &DagParams| -dat_forward(d, &y).unwrap().log_marginal;
        let num = numeric_grad(&dag, f, 1e-5);
        assert!(max_rel_err(&g.emit, &num.emit) <= 1e-4);
        assert!(max_rel_err(&g.trans, &num.trans) <= 1e-4);
    }

    #[test]
    fn fragment_loss_examples() {
        let dag = rand_dag(7, 4, 9);
        let y = [1, 2, 3, 0];
        let full = FragmentSpec::new(vec![[0, 4, 0, 7].into()]);
        let whole = -dat_forward(&dag, &y).unwrap().log_marginal;
        assert_eq!(fragment_loss(&dag, &y, &full).unwrap(), whole);

        // Segment lengths (6, 4), target lengths (4, 2).
        let dag = rand_dag(10, 4, 10);
        let y = [0, 1, 2, 3, 1, 0];
        let frags = FragmentSpec::new(vec![[0, 4, 0, 6].into(), [4, 6, 6, 10].into()]);
        let s1 = dag.slice(0, 6).unwrap();
        let s2 = dag.slice(6, 10).unwrap();
        let oracle = -brute_force_marginal(&s1, &y[..4]).unwrap()
            - brute_force_marginal(&s2, &y[4..]).unwrap();
        assert!((fragment_loss(&dag, &y, &frags).unwrap() - oracle).abs() <= 1e-9);
    }

    #[test]
    fn fragment_loss_on_block_diagonal_dag_is_additive() {
        let a = rand_dag(4, 3, 11);
        let b = rand_dag(3, 3, 12);
        let l = 7;
        let mut emit = a.emit_logp().to_vec();
        emit.extend_from_slice(b.emit_logp());
        let mut trans = vec![NI; l * l];
        for i in 0..4 {
            for j in i + 1..4 {
                trans[i * l + j] = a.trans(i, j);
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                trans[(i + 4) * l + j + 4] = b.trans(i, j);
            }
        }
        // Bridge 3 -> 4 so the joined DAG is valid; slicing removes it.
        trans[3 * l + 4] = 0.0;
        let dag = DagParams::new(l, 3, emit, trans).unwrap();
        let y = [0, 1, 2, 2, 1];
        let frags = FragmentSpec::new(vec![[0, 3, 0, 4].into(), [3, 5, 4, 7].into()]);
        let want = -dat_forward(&a, &y[..3]).unwrap().log_marginal
            - dat_forward(&b, &y[3..]).unwrap().log_marginal;
        assert!((fragment_loss(&dag, &y, &frags).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn fragment_errors_name_the_fragment() {
        let dag = rand_dag(8, 3, 13);
        let y = [0, 1, 2, 0];
        let frags = FragmentSpec::new(vec![[0, 2, 0, 2].into(), [2, 4, 2, 3].into()]);
        match fragment_loss(&dag, &y, &frags) {
            Err(Error::InfeasibleFragment { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        let overlap = FragmentSpec::new(vec![[0, 2, 0, 4].into(), [1, 3, 4, 8].into()]);
        assert!(fragment_loss(&dag, &y, &overlap).is_err());
    }

    #[test]
    fn fragment_gradient_matches_finite_differences() {
        let dag = rand_dag(9, 3, 14);
        let y = [0, 1, 2, 1, 0];
        let frags = FragmentSpec::new(vec![[0, 3, 0, 5].into(), [3, 5, 6, 9].into()]);
        let (_, g) = fragment_loss_grad(&dag, &y, &frags).unwrap();
        let num = numeric_grad(&dag, |d| fragment_loss(d, &y, &frags).unwrap(), 1e-5);
        assert!(max_rel_err(&g.emit, &num.emit) <= 1e-4);
        assert!(max_rel_err(&g.trans, &num.trans) <= 1e-4);
    }

    #[test]
    fn viterbi_forced_and_dominant() {
        let dag = rand_dag(4, 3, 15);
        let (path, _) = viterbi_align(&dag, &[0, 1, 2, 0]).unwrap();
        assert_eq!(path, vec![0, 1, 2, 3]);

        let u = (1.0f64 / 3.0).ln();
        let emit = vec![vec![u; 3]; 4];
        let trans = vec![
            vec![NI, (0.9f64).ln(), (0.05f64).ln(), (0.05f64).ln()],
            vec![NI, NI, (0.5f64).ln(), (0.5f64).ln()],
            vec![NI, NI, NI, 0.0],
            vec![NI; 4],
        ];
        let dag = DagParams::from_rows(&emit, &trans).unwrap();
        let (path, _) = viterbi_align(&dag, &[0, 1, 2]).unwrap();
        assert_eq!(path, vec![0, 1, 3]);
    }

    #[test]
    fn viterbi_matches_exhaustive_max() {
        for seed in 0..20 {
            let dag = rand_dag(8, 4, 100 + seed);
            let y = rand_target(4, 4, seed);
            let paths = all_paths(8, 4);
            assert_eq!(paths.len(), 15); // C(6, 2)
            let best = paths
                .iter()
                .map(|p| (path_score(&dag, p, &y), p.clone()))
                .fold((NI, vec![]), |a, b| if b.0 > a.0 { b } else { a });
            let (path, score) = viterbi_align(&dag, &y).unwrap();
            assert_eq!(path, best.1);
            assert!((score - best.0).abs() < 1e-12);
            assert!(score <= dat_forward(&dag, &y).unwrap().log_marginal);
        }
    }

    #[test]
    fn viterbi_respects_pins() {
        let dag = rand_dag(8, 4, 16);
        let (path, _) = viterbi_align_pinned(&dag, &[0, 1, 2, 3], &[None, Some(4)]).unwrap();
        assert_eq!(path[1], 4);
        assert!(viterbi_align_pinned(&dag, &[0, 1, 2], &[Some(1)]).is_err());
    }

    #[test]
    fn ce_examples() {
        let dag = rand_dag(1, 4, 17);
        assert_eq!(ce_loss(&dag, &[2]).unwrap(), -dag.emit(0, 2));
        let u = (0.25f64).ln();
        let trans = vec![vec![NI, 0.0, NI], vec![NI, NI, 0.0], vec![NI; 3]];
        let dag = DagParams::from_rows(&vec![vec![u; 4]; 3], &trans).unwrap();
        assert!((ce_loss(&dag, &[0, 1, 3]).unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
        let dag = rand_dag(5, 6, 18);
        let y = [5, 0, 3, 3, 1];
        let want: f64 = -(dag.emit(0, 5) + dag.emit(1, 0) + dag.emit(2, 3) + dag.emit(3, 3) + dag.emit(4, 1));
        assert!((ce_loss(&dag, &y).unwrap() - want).abs() < 1e-12);
        assert!(matches!(ce_loss(&dag, &y[..3]), Err(Error::LengthMismatch { .. })));
    }

    /// Oracle: enumerate every frame labelling, collapse repeats then drop blanks.
    fn ctc_brute(dag: &DagParams, target: &[TokenId]) -> f64 {
        let (t, v) = (dag.len(), dag.vocab_size());
        let mut total = NI;
        for code in 0..v.pow(t as u32) {
            let mut c = code;
            let labels: Vec<TokenId> = (0..t)
                .map(|_| {
                    let x = (c % v) as TokenId;
                    c /= v;
                    x
                })
                .collect();
            let mut collapsed = Vec::new();
            for (i, &x) in labels.iter().enumerate() {
                if (i == 0 || labels[i - 1] != x) && x != PAD {
                    collapsed.push(x);
                }
            }
            if collapsed == target {
                let s: f64 = labels.iter().enumerate().map(|(i, &x)| dag.emit(i, x)).sum();
                total = log_add(total, s);
            }
        }
        total
    }

    #[test]
    fn ctc_examples() {
        let dag = rand_dag(1, 3, 19);
        assert!((ctc_loss(&dag, &[2]).unwrap() + dag.emit(0, 2)).abs() < 1e-12);
        let dag = rand_dag(2, 3, 20);
        let want = logsumexp([
            dag.emit(0, 2) + dag.emit(1, PAD),
            dag.emit(0, PAD) + dag.emit(1, 2),
            dag.emit(0, 2) + dag.emit(1, 2),
        ]);
        assert!((-ctc_loss(&dag, &[2]).unwrap() - want).abs() < 1e-12);
        for seed in 0..10 {
            let dag = rand_dag(5, 4, 200 + seed);
            let y = [1 + (seed % 3) as TokenId, 3];
            assert!((-ctc_loss(&dag, &y).unwrap() - ctc_brute(&dag, &y)).abs() < 1e-9);
        }
        let dag = rand_dag(2, 3, 21);
        assert!(ctc_loss(&dag, &[1, 1]).is_err());
    }
}
