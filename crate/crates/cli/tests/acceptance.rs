//! Acceptance suite. Prints one PASS/FAIL line per criterion, then exits
//! nonzero if any criterion outside `EXPECTED_RED` failed.
//!
//! Every oracle here is written from scratch in this file rather than calling
//! the library's own brute-force helpers.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;

use dagnat_core::dag::DagParams;
use dagnat_core::decode::{beam_search, lookahead_decode, nucleus_sample, BeamConfig, DecodeConstraints};
use dagnat_core::dsti::{prepare_documents, reconstruct, Stage1Config, Stage2Config};
use dagnat_core::loss::{ctc_loss, dat_forward, dat_loss_grad, viterbi_align};
use dagnat_core::metrics::{acc_profile, corpus_bleu, distinct_n, equal_buckets};
use dagnat_core::model::checkpoint;
use dagnat_core::model::train::{loss_and_grad, wrap_target, Batch, Pair};
use dagnat_core::model::{TinyModel, TinyModelConfig, TrainConfig};
use dagnat_core::pipeline::{benchmark, Mode, PipelineConfig, SyntheticWorkload};
use dagnat_core::vocab::{TokenId, EOS};
use dagnat_core::{rng, Exec, TokenSeq, Vocab};

/// Criteria known to fail, with the reason recorded in the project notes.
/// A pass here is reported but does not change the exit code.
const EXPECTED_RED: &[u32] = &[6];

const NEG: f64 = f64::NEG_INFINITY;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- oracles

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(NEG, f64::max);
    if m == NEG {
        return NEG;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every strictly increasing vertex sequence of length `n` from 0 to `l - 1`.
fn vertex_paths(l: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut stack = vec![vec![0usize]];
    while let Some(p) = stack.pop() {
        let last = *p.last().unwrap();
        if p.len() == n {
            if last == l - 1 {
                out.push(p);
            }
            continue;
        }
        for next in last + 1..l {
            let mut q = p.clone();
            q.push(next);
            stack.push(q);
        }
    }
    out
}

fn path_logp(dag: &DagParams, path: &[usize], y: &[TokenId]) -> f64 {
    let mut s = 0.0;
    for (k, (&v, &t)) in path.iter().zip(y).enumerate() {
        s += dag.emit(v, t);
        if k > 0 {
            s += dag.trans(path[k - 1], v);
        }
    }
    s
}

fn marginal_oracle(dag: &DagParams, y: &[TokenId]) -> f64 {
    let scores: Vec<f64> = vertex_paths(dag.len(), y.len())
        .iter()
        .map(|p| path_logp(dag, p, y))
        .collect();
    lse(&scores)
}

/// Sum over all frame labellings that collapse (merge repeats, drop blank 0) to `y`.
fn ctc_oracle(dag: &DagParams, y: &[TokenId]) -> f64 {
    let (t, v) = (dag.len(), dag.vocab_size());
    let mut scores = Vec::new();
    for code in 0..v.pow(t as u32) {
        let labels: Vec<TokenId> = (0..t).map(|i| ((code / v.pow(i as u32)) % v) as TokenId).collect();
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &x in &labels {
            if Some(x) != prev && x != 0 {
                collapsed.push(x);
            }
            prev = Some(x);
        }
        if collapsed == y {
            scores.push(labels.iter().enumerate().map(|(i, &x)| dag.emit(i, x)).sum());
        }
    }
    lse(&scores)
}

/// Best unconstrained decoder path and the number of complete paths. A path
/// starts at vertex 0 and ends at the last vertex or at the first `[EOS]`.
fn exhaustive_best(dag: &DagParams) -> (f64, Vec<TokenId>, usize) {
    let (l, v) = (dag.len(), dag.vocab_size());
    let eos = EOS as usize;
    let best_non_eos = |j: usize| {
        (0..v)
            .filter(|&t| t != eos)
            .max_by(|&a, &b| dag.emit(j, a as TokenId).total_cmp(&dag.emit(j, b as TokenId)))
    };
    let mut best = (NEG, Vec::new());
    let mut count = 0usize;
    for mask in 0..(1usize << l.saturating_sub(1)) {
        // vertices 0 and then those whose bit (j - 1) is set
        let verts: Vec<usize> = std::iter::once(0)
            .chain((1..l).filter(|j| mask >> (j - 1) & 1 == 1))
            .collect();
        let k = verts.len();
        let end = verts[k - 1];
        let mut s: f64 = verts.windows(2).map(|w| dag.trans(w[0], w[1])).sum();
        let mut toks = Vec::new();
        let mut ok = true;
        for &j in &verts[..k - 1] {
            match best_non_eos(j) {
                Some(t) => {
                    s += dag.emit(j, t as TokenId);
                    toks.push(t as TokenId);
                }
                None => ok = false,
            }
        }
        let last = if end == l - 1 {
            (0..v).max_by(|&a, &b| dag.emit(end, a as TokenId).total_cmp(&dag.emit(end, b as TokenId)))
        } else {
            (eos < v).then_some(eos)
        };
        let Some(t) = last else { continue };
        s += dag.emit(end, t as TokenId);
        toks.push(t as TokenId);
        let per_final = if end == l - 1 { v } else { 1 };
        let per_inner = if eos < v { v - 1 } else { v };
        count += per_inner.pow((k - 1) as u32) * per_final;
        if ok && s > best.0 {
            best = (s, toks);
        }
    }
    (best.0, best.1, count)
}

/// Repeated trigrams plus consecutive unigram and bigram repeats, recounted
/// by brute force.
fn violations<T: Eq + Hash + Clone>(t: &[T]) -> usize {
    let mut seen = HashSet::new();
    let mut rep = 0;
    for w in t.windows(3) {
        if !seen.insert(w.to_vec()) {
            rep += 1;
        }
    }
    let uni = t.windows(2).filter(|w| w[0] == w[1]).count();
    let bi = t.windows(4).filter(|w| w[0] == w[2] && w[1] == w[3]).count();
    rep + uni + bi
}

fn probs_dag(emit: &[Vec<f64>], trans: &[Vec<f64>]) -> DagParams {
    let ln = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect() };
    DagParams::from_rows(&ln(emit), &ln(trans)).unwrap()
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------- criteria

fn c1_dp_vs_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng::seeded(101);
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    let mut infeasible = 0;
    for _ in 0..500 {
        let l = r.gen_range(1..=10);
        let n = r.gen_range(1..=l);
        let v = r.gen_range(2..=8);
        let dag = DagParams::random(l, v, 3.0, &mut r);
        let y: Vec<TokenId> = (0..n).map(|_| r.gen_range(0..v as TokenId)).collect();
        let oracle = marginal_oracle(&dag, &y);
        match dat_forward(&dag, &y) {
            Ok(res) => worst = worst.max((res.log_marginal - oracle).abs()),
            Err(_) if oracle == NEG => infeasible += 1,
            Err(_) => bad += 1,
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-9 && bad == 0 && secs < 10.0,
        format!("max |dp - oracle| = {worst:.2e} over 500 DAGs ({infeasible} pathless targets rejected), {secs:.2}s"),
    )
}

fn c2_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng::seeded(202);
    let h = 1e-5;
    // loss DP alone
    let mut dp_worst: f64 = 0.0;
    let mut dp_coords = 0;
    while dp_coords < 150 {
        let l = r.gen_range(3..=7);
        let v = r.gen_range(2..=5);
        let n = r.gen_range(2..=l);
        let dag = DagParams::random(l, v, 2.0, &mut r);
        let y: Vec<TokenId> = (0..n).map(|_| r.gen_range(0..v as TokenId)).collect();
        let (_, g) = dat_loss_grad(&dag, &y).unwrap();
        for _ in 0..10 {
            let emit_side = r.gen_bool(0.5);
            let (mut ep, mut em) = (dag.emit_logp().to_vec(), dag.emit_logp().to_vec());
            let (mut tp, mut tm) = (dag.trans_logp().to_vec(), dag.trans_logp().to_vec());
            let analytic = if emit_side {
                let k = r.gen_range(0..l * v);
                ep[k] += h;
                em[k] -= h;
                g.emit[k]
            } else {
                let i = r.gen_range(0..l - 1);
                let j = r.gen_range(i + 1..l);
                tp[i * l + j] += h;
                tm[i * l + j] -= h;
                g.trans[i * l + j]
            };
            let f = |e: Vec<f64>, t: Vec<f64>| -marginal_oracle(&DagParams::new_unchecked(l, v, e, t).unwrap(), &y);
            let numeric = (f(ep, tp) - f(em, tm)) / (2.0 * h);
            dp_worst = dp_worst.max(rel(analytic, numeric, 1e-6));
            dp_coords += 1;
        }
    }
    // through the toy network, fine-tuning with the DAT loss and length head
    let cfg_m = TinyModelConfig {
        vocab_size: 14,
        enc_layers: 1,
        dec_layers: 2,
        hidden: 8,
        heads: 2,
        ffn: 12,
        max_len: 32,
        len_classes: 12,
    };
    let model = TinyModel::new(cfg_m, 7).unwrap();
    let pairs: Vec<Pair> = (0..2)
        .map(|_| {
            let x: TokenSeq = (0..r.gen_range(3..6)).map(|_| r.gen_range(5..14)).collect();
            let y: TokenSeq = (0..r.gen_range(2..5)).map(|_| r.gen_range(5..14)).collect();
            (x, y)
        })
        .collect();
    let tcfg = TrainConfig {
        glancing_ratio: 0.0,
        lambda: 2.0,
        ..TrainConfig::default()
    };
    let f = |m: &TinyModel| loss_and_grad(m, &tcfg, 0.0, 0, Batch::Finetune(&pairs), Exec::Sequential).unwrap();
    let (_, grads) = f(&model);
    let mut net_worst: f64 = 0.0;
    let mut net_coords = 0;
    while net_coords < 120 {
        let id = r.gen_range(0..model.params.len());
        let k = r.gen_range(0..model.params.get(id).len());
        let mut plus = model.clone();
        plus.params.get_mut(id).data[k] += h;
        let mut minus = model.clone();
        minus.params.get_mut(id).data[k] -= h;
        let numeric = (f(&plus).0 - f(&minus).0) / (2.0 * h);
        net_worst = net_worst.max(rel(grads[id].data[k], numeric, 1e-6));
        net_coords += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        dp_worst <= 1e-4 && net_worst <= 1e-3 && secs < 60.0,
        format!(
            "loss DP: max rel err {dp_worst:.2e} on {dp_coords} coords; network: {net_worst:.2e} on {net_coords} coords; {secs:.1}s"
        ),
    )
}

fn c3_viterbi_bound() -> Outcome {
    let mut r = rng::seeded(303);
    let (mut checked, mut unique, mut bad) = (0, 0, 0);
    for _ in 0..500 {
        let l = r.gen_range(1..=10);
        let n = r.gen_range(1..=l);
        let v = r.gen_range(2..=8);
        let dag = DagParams::random(l, v, 3.0, &mut r);
        let y: Vec<TokenId> = (0..n).map(|_| r.gen_range(0..v as TokenId)).collect();
        let (Ok((_, vit)), Ok(fwd)) = (viterbi_align(&dag, &y), dat_forward(&dag, &y)) else { continue };
        checked += 1;
        if vit > fwd.log_marginal {
            bad += 1;
        }
        if vertex_paths(l, n).len() == 1 {
            unique += 1;
            if vit != fwd.log_marginal {
                bad += 1;
            }
        }
    }
    outcome(
        bad == 0 && unique > 0,
        format!("{checked} cases, {unique} with a unique path, {bad} violations"),
    )
}

fn c4_ctc() -> Outcome {
    let mut r = rng::seeded(404);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut bad = 0;
    for _ in 0..400 {
        let l = r.gen_range(1..=6);
        let v = r.gen_range(2..=4);
        let n = r.gen_range(1..=3.min(l));
        let dag = DagParams::random(l, v, 2.0, &mut r);
        let y: Vec<TokenId> = (0..n).map(|_| r.gen_range(1..v as TokenId)).collect();
        let oracle = ctc_oracle(&dag, &y);
        match ctc_loss(&dag, &y) {
            Ok(loss) => {
                worst = worst.max((-loss - oracle).abs());
                cases += 1;
            }
            Err(_) if oracle == NEG => {}
            Err(_) => bad += 1,
        }
    }
    outcome(worst <= 1e-9 && bad == 0, format!("max |ctc - oracle| = {worst:.2e} over {cases} cases"))
}

fn c5_dsti() -> Outcome {
    let words: Vec<String> = (0..1000).map(|i| format!("t{i}")).collect();
    let vocab = Vocab::new(128, &words);
    let mut r = rng::seeded(505);
    let docs: Vec<TokenSeq> = (0..10_000)
        .map(|_| {
            let n = r.gen_range(40..160);
            (0..n).map(|_| vocab.id(&words[r.gen_range(0..1000)]).unwrap()).collect()
        })
        .collect();
    let (s1, s2) = (Stage1Config::default(), Stage2Config::default());
    let (triples, stats) = prepare_documents(&docs, &s1, &s2, &vocab, 5, None, Exec::default()).unwrap();
    let (mut masked, mut total, mut lam) = (0usize, 0usize, 0.0);
    let (mut remask_bad, mut recon_bad, mut frag_bad) = (0, 0, 0);
    for t in &triples {
        let doc = &docs[t.doc];
        total += doc.len();
        let assignable = t.y.iter().filter(|&&id| vocab.span_index(id).is_none()).count();
        masked += assignable;
        lam += t.lambda;
        let hidden: usize = t.fragments.pairs.iter().map(|f| f.tgt_end - f.tgt_start).sum();
        // ceil(0.9 * a) in integers
        if hidden != (9 * assignable).div_ceil(10) {
            remask_bad += 1;
        }
        if reconstruct(&t.x, &t.y, &vocab).map_or(true, |p| p != *doc) {
            recon_bad += 1;
        }
        if t.fragments.validate(t.y.len(), t.z.len()).is_err() {
            frag_bad += 1;
        }
    }
    let ratio = masked as f64 / total as f64;
    let lam_mean = lam / triples.len() as f64;
    let mid = (s2.lambda_min + s2.lambda_max) / 2.0;
    outcome(
        triples.len() == 10_000
            && (ratio - 0.15).abs() <= 0.01
            && ((lam_mean - mid) / mid).abs() <= 0.01
            && remask_bad + recon_bad + frag_bad == 0
            && stats.kept == triples.len(),
        format!(
            "{} docs, mask ratio {ratio:.4}, lambda mean {lam_mean:.4} (mid {mid}), re-mask mismatches {remask_bad}, reconstruction failures {recon_bad}, infeasible fragments {frag_bad}",
            triples.len()
        ),
    )
}

fn run(bin: &Path, args: &[&str]) {
    let out = Command::new(bin).args(args).output().expect("run dagnat");
    if !out.status.success() {
        panic!("dagnat {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
}

fn read(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(str::to_string).collect()
}

/// Decoded outputs from criteria 6 and 7, for the constraint scan.
#[derive(Default)]
struct Collected {
    words: Vec<Vec<String>>,
    ids: Vec<Vec<TokenId>>,
}

fn c6_toy(bin: &Path, work: &Path, collected: &mut Collected) -> Outcome {
    let t0 = Instant::now();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy-multimodal.toml");
    let config = config.to_str().unwrap();
    let data = work.join("data");
    let d = data.to_str().unwrap();
    run(bin, &["synth", "--task", "multimodal-lexical", "--size", "1000", "--heldout", "200", "--seed", "11", "--out-dir", d]);
    let src = data.join("heldout.src");
    let refs: Vec<Vec<String>> = read(&data.join("heldout.refs"))
        .iter()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    let mut scores = HashMap::new();
    let mut len_acc = 0.0;
    for loss in ["dat", "ce"] {
        let out = work.join(loss);
        let o = out.to_str().unwrap();
        let (train_src, train_tgt) = (data.join("train.src"), data.join("train.tgt"));
        run(bin, &[
            "finetune", "--config", config, "--seed", "1", "--loss", loss,
            "--src", train_src.to_str().unwrap(), "--tgt", train_tgt.to_str().unwrap(), "--out-dir", o,
        ]);
        let ckpt = out.join("model.ckpt");
        run(bin, &[
            "decode", "--config", config, "--checkpoint", ckpt.to_str().unwrap(),
            "--input", src.to_str().unwrap(), "--out-dir", o,
        ]);
        let hyps = read(&out.join("hyps.txt"));
        let hits = hyps.iter().zip(&refs).filter(|(h, r)| r.contains(h)).count();
        scores.insert(loss, hits);
        collected.words.extend(hyps.iter().map(|h| h.split_whitespace().map(str::to_string).collect()));
        if loss == "dat" {
            // length head: predicted wrapped length vs the true one
            let (model, extra) = checkpoint::load(&ckpt).unwrap();
            let tokens: Vec<String> = serde_json::from_value(extra["vocab"].clone()).unwrap();
            let vocab = Vocab::parse(&tokens.join("\n")).unwrap();
            let right = read(&src)
                .iter()
                .zip(&refs)
                .filter(|(s, r)| {
                    let n = wrap_target(&vocab.tokenize(&r[0])).len();
                    model.predict_length(&vocab.tokenize(s), 1.0).unwrap() == n
                })
                .count();
            len_acc = right as f64 / refs.len() as f64;
        }
    }
    let (dat, ce) = (scores["dat"], scores["ce"]);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        dat as f64 >= 0.9 * refs.len() as f64 && ce < dat,
        format!(
            "DAT verbatim {dat}/{n}, CE ablation {ce}/{n} (needs CE < DAT), DAT length accuracy {len_acc:.3}, {secs:.0}s",
            n = refs.len()
        ),
    )
}

fn c7_decoders(collected: &mut Collected) -> Outcome {
    let mut r = rng::seeded(707);
    let plain = |beam_size| BeamConfig {
        beam_size,
        lm_weight: 0.0,
        len_norm: 0.0,
    };
    let c = DecodeConstraints::default();
    let mut below = 0;
    let mut relaxed = 0;
    for _ in 0..1000 {
        let l = r.gen_range(2..=16);
        let v = r.gen_range(4..=10);
        let dag = DagParams::random(l, v, 3.0, &mut r);
        let la = lookahead_decode(&dag, &c);
        let b = beam_search(&dag, None, &plain(8), &c).unwrap();
        // a relaxed lookahead path breaks the constraints beam search keeps
        if la.relaxed {
            relaxed += 1;
        } else if b.dag_score < la.dag_score - 1e-12 {
            below += 1;
        }
        collected.ids.push(la.tokens.0);
        collected.ids.push(b.tokens.0);
    }
    let mut mismatches = 0;
    let mut max_paths = 0;
    for _ in 0..300 {
        let l = r.gen_range(1..=8);
        let v = r.gen_range(2..=4);
        let dag = DagParams::random(l, v, 3.0, &mut r);
        let (best, toks, count) = exhaustive_best(&dag);
        max_paths = max_paths.max(count);
        let b = beam_search(&dag, None, &plain(count.max(1)), &DecodeConstraints::none()).unwrap();
        if (b.dag_score - best).abs() > 1e-9 || b.tokens.0 != toks {
            mismatches += 1;
        }
    }
    outcome(
        below == 0 && mismatches == 0,
        format!(
            "beam 8 below lookahead on {below}/1000 DAGs ({relaxed} with relaxed lookahead not compared); beam = path count vs exhaustive best: {mismatches}/300 mismatches (up to {max_paths} paths)"
        ),
    )
}

fn c8_constraints(collected: &Collected) -> Outcome {
    let w: usize = collected.words.iter().map(|t| violations(t)).sum();
    let i: usize = collected.ids.iter().map(|t| violations(t)).sum();
    outcome(
        w + i == 0,
        format!(
            "{} toy outputs and {} decoder outputs, {} violations",
            collected.words.len(),
            collected.ids.len(),
            w + i
        ),
    )
}

fn c9_nucleus() -> Outcome {
    let mut r = rng::seeded(909);
    let c = DecodeConstraints::default();
    let mut differ = 0;
    for _ in 0..100 {
        let dag = DagParams::random(r.gen_range(1..12), 6, 2.0, &mut r);
        if nucleus_sample(&dag, 0.9, 0.0, &c, &mut r).unwrap() != lookahead_decode(&dag, &c) {
            differ += 1;
        }
    }
    // tokens 5 6 7 with probability 0.7, 5 8 7 with 0.3
    let mut emit = vec![vec![0.0; 9]; 4];
    emit[0][5] = 1.0;
    emit[1][6] = 1.0;
    emit[2][8] = 1.0;
    emit[3][7] = 1.0;
    let trans = vec![
        vec![0.0, 0.7, 0.3, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
        vec![0.0, 0.0, 0.0, 1.0],
        vec![0.0; 4],
    ];
    let dag = probs_dag(&emit, &trans);
    let n = 10_000;
    let mut draws = rng::seeded(910);
    let first = (0..n)
        .filter(|_| nucleus_sample(&dag, 1.0, 1.0, &c, &mut draws).unwrap().tokens.0 == [5, 6, 7])
        .count();
    let f = first as f64 / n as f64;
    outcome(
        differ == 0 && (f - 0.7).abs() <= 0.02,
        format!("temperature 0 differs from lookahead on {differ}/100; path frequencies ({f:.4}, {:.4})", 1.0 - f),
    )
}

fn c10_pipeline() -> Outcome {
    let t0 = Instant::now();
    let w = SyntheticWorkload::default();
    let cfg = |mode, batch_size| PipelineConfig {
        batch_size,
        b_workers: 1,
        mode,
        queue_capacity: 2,
    };
    let (a, va) = w.run(&cfg(Mode::Vanilla, 8)).unwrap();
    let (b, ov) = w.run(&cfg(Mode::Overlapped, 8)).unwrap();
    let calibrated = ov.throughput / va.throughput;
    let mut same = a == b;
    for workers in [2, 4] {
        let c = PipelineConfig {
            b_workers: workers,
            ..cfg(Mode::Overlapped, 8)
        };
        same &= w.run(&c).unwrap().0 == a;
    }
    let sweep = SyntheticWorkload {
        num_batches: 24,
        ..w
    };
    let sizes = [1, 2, 4, 8];
    let report = benchmark(&sweep, &sizes, &[Mode::Vanilla, Mode::Overlapped], 1, 2, 3).unwrap();
    let speedups: Vec<f64> = sizes.iter().map(|&s| report.speedup(s).unwrap()).collect();
    let grows = speedups.windows(2).all(|p| p[1] > p[0]);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        same && calibrated >= 1.6 && grows && secs < 120.0,
        format!(
            "outputs identical: {same}; A=B=10ms speedup {calibrated:.3}; speedup by batch 1/2/4/8: {}; {secs:.0}s",
            speedups.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join("/")
        ),
    )
}

fn distinct_oracle(hyps: &[Vec<String>], n: usize) -> f64 {
    let mut set = HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        for i in 0..(h.len() + 1).saturating_sub(n) {
            set.insert(h[i..i + n].join("\u{1}"));
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        set.len() as f64 / total as f64
    }
}

/// Per bucket (correct, total) with bucket index `ceil(j * k / (n + 1)) - 1`.
fn acc_oracle(hyps: &[Vec<String>], refs: &[Vec<String>], k: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(0, 0); k];
    for (h, r) in hyps.iter().zip(refs) {
        let n1 = h.len() + 1;
        for (j0, tok) in h.iter().enumerate() {
            let b = ((j0 + 1) * k).div_ceil(n1) - 1;
            out[b].1 += 1;
            if r.contains(tok) {
                out[b].0 += 1;
            }
        }
    }
    out
}

fn c11_metrics() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let rows = read(&dir.join("bleu20.tsv"));
    let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let (hyps, refs): (Vec<Vec<String>>, Vec<Vec<String>>) = rows
        .iter()
        .map(|l| {
            let (h, r) = l.split_once('\t').unwrap();
            (split(h), split(r))
        })
        .unzip();
    let expected: f64 = read(&dir.join("bleu20.expected"))
        .iter()
        .find(|l| !l.starts_with('#'))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    let bleu = corpus_bleu(&hyps, &refs, 4).unwrap();
    // random token lists as a second corpus for the recounts
    let mut r = rng::seeded(1111);
    let rand_seqs = |r: &mut rng::Rng| -> Vec<Vec<String>> {
        (0..300)
            .map(|_| (0..r.gen_range(0..12)).map(|_| format!("{}", r.gen_range(0..6))).collect())
            .collect()
    };
    let (rh, rr) = (rand_seqs(&mut r), rand_seqs(&mut r));
    let mut distinct_ok = true;
    let mut acc_ok = true;
    for (h, rf) in [(&hyps, &refs), (&rh, &rr)] {
        for n in 1..=4 {
            distinct_ok &= distinct_n(h, n) == distinct_oracle(h, n);
        }
        for k in [1, 3, 7, 10] {
            let prof = acc_profile(h, rf, &equal_buckets(k)).unwrap();
            for (bucket, (c, t)) in prof.buckets.iter().zip(acc_oracle(h, rf, k)) {
                let want = (t > 0).then(|| c as f64 / t as f64);
                acc_ok &= bucket.tokens == t && bucket.value == want;
            }
        }
    }
    outcome(
        (bleu - expected).abs() <= 0.1 && distinct_ok && acc_ok,
        format!("BLEU {bleu:.4} vs reference scorer {expected:.4}; distinct-n exact: {distinct_ok}; acc_profile exact: {acc_ok}"),
    )
}

fn main() {
    let bin = PathBuf::from(env!("CARGO_BIN_EXE_dagnat"));
    let work = tempfile::tempdir().unwrap();
    let mut collected = Collected::default();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id:>2} {name}: {}", o.detail);
        results.push((id, name, o));
    };
    record(1, "dp vs oracle", c1_dp_vs_oracle());
    record(2, "gradient check", c2_gradients());
    record(3, "viterbi bound", c3_viterbi_bound());
    record(4, "ctc oracle", c4_ctc());
    record(5, "dsti invariants", c5_dsti());
    record(6, "toy learning", c6_toy(&bin, work.path(), &mut collected));
    record(7, "decoder ordering", c7_decoders(&mut collected));
    record(8, "constraint compliance", c8_constraints(&collected));
    record(9, "nucleus fidelity", c9_nucleus());
    record(10, "overlapped pipeline", c10_pipeline());
    record(11, "metrics cross-check", c11_metrics());

    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("{passed}/{} criteria pass", results.len());
    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(id, _, o)| !o.pass && !EXPECTED_RED.contains(id))
        .map(|r| r.0)
        .collect();
    for (id, _, o) in &results {
        if o.pass && EXPECTED_RED.contains(id) {
            println!("note: criterion {id} passed although it is listed as expected red");
        }
        if !o.pass && EXPECTED_RED.contains(id) {
            println!("note: criterion {id} is a known failure");
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
