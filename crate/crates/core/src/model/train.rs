//! Adam training over pre-training triples or fine-tuning pairs.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::net::{dag_from_tape, TinyModel};
use super::tape::{Tape, Var};
use super::tensor::Matrix;
use crate::dag::DagParams;
use crate::dsti::{round_half_up, DstiTriple};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::{ce_loss_grad, dat_loss_grad, fragment_loss_grad, viterbi_align, DagGrad};
use crate::rng;
use crate::vocab::{TokenId, TokenSeq, BOS, EOS, MASK};

/// Loss used in fine-tuning. `Ce` is the token-level ablation: one vertex per
/// target token, no transitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dat,
    Ce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dat" => Ok(LossKind::Dat),
            "ce" => Ok(LossKind::Ce),
            other => Err(Error::Config(format!("unknown loss {other:?} (dat|ce)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warm-up length in steps; 0 disables it.
    pub warmup: u64,
    /// Step at which a linear decay after warm-up reaches zero; 0 keeps the rate constant.
    pub total_steps: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub glancing_ratio: f64,
    /// Up-sampling ratio of the decoder input during fine-tuning.
    pub lambda: f64,
    /// Weight of the length-classification loss.
    pub length_weight: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 0,
            total_steps: 0,
            clip_norm: 1.0,
            glancing_ratio: 0.3,
            lambda: 4.0,
            length_weight: 0.1,
            loss: LossKind::Dat,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.glancing_ratio) {
            return Err(Error::Config(format!(
                "glancing_ratio must lie in [0, 1], got {}",
                self.glancing_ratio
            )));
        }
        if !(self.lambda >= 1.0) {
            return Err(Error::Config(format!("lambda must be at least 1, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Optimizer state carried between steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub glancing_ratio: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl TrainState {
    pub fn new(model: &TinyModel, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            glancing_ratio: cfg.glancing_ratio,
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
        }
    }

    /// Learning rate used at the next step.
    pub fn lr(&self, cfg: &TrainConfig) -> f64 {
        let step = self.step + 1;
        if step <= cfg.warmup {
            return cfg.lr * step as f64 / cfg.warmup as f64;
        }
        if cfg.total_steps > cfg.warmup {
            let left = cfg.total_steps.saturating_sub(step) as f64;
            return cfg.lr * left / (cfg.total_steps - cfg.warmup) as f64;
        }
        cfg.lr
    }
}

/// A fine-tuning example: source and raw target (without BOS/EOS).
pub type Pair = (TokenSeq, TokenSeq);

#[derive(Clone, Copy, Debug)]
pub enum Batch<'a> {
    Pretrain(&'a [DstiTriple]),
    Finetune(&'a [Pair]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Pretrain(b) => b.len(),
            Batch::Finetune(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub max_grad: f64,
    pub grad_norm: f64,
}

/// Fine-tuning targets carry explicit boundary tokens so every target has at
/// least two tokens and the path endpoints are fixed.
pub fn wrap_target(y: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(y.len() + 2);
    out.push(BOS);
    out.extend_from_slice(y);
    out.push(EOS);
    out
}

/// Inverse of [`wrap_target`] on decoded output: drops one leading BOS and
/// everything from the first EOS on.
pub fn unwrap_output(y: &[TokenId]) -> Vec<TokenId> {
    let body = y.strip_prefix(&[BOS]).unwrap_or(y);
    body.iter().take_while(|&&t| t != EOS).copied().collect()
}

/// Decoder length used for a wrapped target of `n` tokens.
pub fn upsampled_len(n: usize, lambda: f64) -> usize {
    round_half_up(lambda * n as f64).max(n)
}

/// Inference DAG for source `x`: predicted wrapped length, upsampled by
/// `lambda` for DAT models. CE models get chain transitions.
pub fn predict_dag(model: &TinyModel, x: &[TokenId], lambda: f64, loss: LossKind) -> Result<DagParams> {
    let n = model.predict_length(x, 1.0)?.max(2);
    let l = match loss {
        LossKind::Dat => upsampled_len(n, lambda),
        LossKind::Ce => n,
    }
    .min(model.config.max_len);
    let (dag, _) = model.forward(x, &vec![MASK; l])?;
    Ok(match loss {
        LossKind::Dat => dag,
        LossKind::Ce => dag.with_chain_transitions(),
    })
}

/// Seeds the tape with DAG-level gradients.
fn dag_seeds(fwd_emit: Var, fwd_trans: Var, dag: &DagParams, g: DagGrad, scale: f64) -> Vec<(Var, Matrix)> {
    let (l, v) = (dag.len(), dag.vocab_size());
    let mut emit = Matrix::from_vec(l, v, g.emit);
    let mut trans = Matrix::from_vec(l, l, g.trans);
    emit.scale(scale);
    trans.scale(scale);
    vec![(fwd_emit, emit), (fwd_trans, trans)]
}

/// Cross-entropy over length classes `1..`; returns the loss and the logit gradient.
fn length_ce(logits: &[f64], n: usize) -> Result<(f64, Vec<f64>)> {
    if n == 0 || n >= logits.len() {
        return Err(Error::LengthOverflow {
            len: n,
            max: logits.len().saturating_sub(1),
        });
    }
    let max = logits[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits[1..].iter().map(|v| (v - max).exp()).sum();
    let lse = max + z.ln();
    let mut grad = vec![0.0; logits.len()];
    for c in 1..logits.len() {
        grad[c] = (logits[c] - lse).exp();
    }
    grad[n] -= 1.0;
    Ok((lse - logits[n], grad))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Decoder input of the second glancing pass: target tokens revealed at the
/// vertices they were aligned to. Returns the input and the reveal count.
pub fn glance(
    dag: &DagParams,
    target: &[TokenId],
    positions: &[usize],
    ratio: f64,
    rng: &mut rng::Rng,
) -> (Vec<TokenId>, usize) {
    let mut z = vec![MASK; dag.len()];
    let wrong = target
        .iter()
        .zip(positions)
        .filter(|(&y, &a)| argmax(dag.emit_row(a)) != y as usize)
        .count();
    let reveal = ((ratio * wrong as f64) - 1e-9).ceil().max(0.0) as usize;
    let reveal = reveal.min(target.len());
    for i in sample(rng, target.len(), reveal).into_iter() {
        z[positions[i]] = target[i];
    }
    (z, reveal)
}

/// Loss and parameter gradients of one fine-tuning pair.
fn finetune_sample(
    model: &TinyModel,
    cfg: &TrainConfig,
    ratio: f64,
    pair: &Pair,
    rng: &mut rng::Rng,
) -> Result<(f64, Vec<Matrix>)> {
    let (x, y) = pair;
    let target = wrap_target(y);
    let n = target.len();
    let l = match cfg.loss {
        LossKind::Dat => upsampled_len(n, cfg.lambda),
        LossKind::Ce => n,
    };
    let mut z = vec![MASK; l];
    if ratio > 0.0 {
        let mut t = Tape::new(&model.params);
        let fwd = model.forward_on(&mut t, x, &z)?;
        let dag = dag_from_tape(&t, &fwd)?;
        let positions: Vec<usize> = match cfg.loss {
            LossKind::Dat => viterbi_align(&dag, &target)?.0,
            LossKind::Ce => (0..n).collect(),
        };
        z = glance(&dag, &target, &positions, ratio, rng).0;
    }
    let mut t = Tape::new(&model.params);
    let fwd = model.forward_on(&mut t, x, &z)?;
    let dag = dag_from_tape(&t, &fwd)?;
    let (loss, g) = match cfg.loss {
        LossKind::Dat => dat_loss_grad(&dag, &target)?,
        LossKind::Ce => ce_loss_grad(&dag, &target)?,
    };
    let (len_loss, len_grad) = length_ce(&t.value(fwd.len_logits).data, n)?;
    let mut seeds = dag_seeds(fwd.emit, fwd.trans, &dag, g, 1.0);
    let mut lg = Matrix::from_vec(1, len_grad.len(), len_grad);
    lg.scale(cfg.length_weight);
    seeds.push((fwd.len_logits, lg));
    Ok((loss + cfg.length_weight * len_loss, t.backward(seeds)))
}

fn pretrain_sample(model: &TinyModel, triple: &DstiTriple) -> Result<(f64, Vec<Matrix>)> {
    let mut t = Tape::new(&model.params);
    let fwd = model.forward_on(&mut t, &triple.x, &triple.z)?;
    let dag = dag_from_tape(&t, &fwd)?;
    let (loss, g) = fragment_loss_grad(&dag, &triple.y, &triple.fragments)?;
    let seeds = dag_seeds(fwd.emit, fwd.trans, &dag, g, 1.0);
    Ok((loss, t.backward(seeds)))
}

/// Mean batch loss and its gradient, without touching the parameters.
///
/// Glancing draws come from a stream keyed by `(cfg.seed, step, sample index)`,
/// so the result does not depend on the execution policy.
pub fn loss_and_grad(
    model: &TinyModel,
    cfg: &TrainConfig,
    glancing_ratio: f64,
    step: u64,
    batch: Batch<'_>,
    exec: Exec,
) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let per_sample = |i: usize| -> Result<(f64, Vec<Matrix>)> {
        match batch {
            Batch::Pretrain(b) => pretrain_sample(model, &b[i]),
            Batch::Finetune(b) => {
                let mut r = rng::derived(cfg.seed, (step << 24) ^ i as u64);
                finetune_sample(model, cfg, glancing_ratio, &b[i], &mut r)
            }
        }
    };
    let results = exec.map_range(batch.len(), per_sample);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = model.params.zeros_like();
    for r in results {
        let (loss, g) = r?;
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    grads.iter_mut().for_each(|g| g.scale(scale));
    Ok((total * scale, grads))
}

/// One Adam step on the mean batch loss.
pub fn train_step(
    model: &mut TinyModel,
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: Batch<'_>,
    exec: Exec,
) -> Result<StepReport> {
    let (loss, mut grads) = loss_and_grad(model, cfg, state.glancing_ratio, state.step, batch, exec)?;
    let max_grad = grads.iter().map(Matrix::max_abs).fold(0.0, f64::max);
    let norm = grads
        .iter()
        .flat_map(|g| &g.data)
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if !loss.is_finite() || !norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: state.step as usize,
            loss,
            max_grad,
        });
    }
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        let s = cfg.clip_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    let lr = state.lr(cfg);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter().enumerate() {
        let p = model.params.get_mut(id);
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        for k in 0..g.data.len() {
            let gk = g.data[k];
            m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * gk;
            v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m.data[k] / c1;
            let vh = v.data[k] / c2;
            p.data[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(StepReport {
        loss,
        max_grad,
        grad_norm: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TinyModelConfig;
    use rand::Rng as _;

    fn config(vocab: usize) -> TinyModelConfig {
        TinyModelConfig {
            vocab_size: vocab,
            enc_layers: 1,
            dec_layers: 1,
            hidden: 16,
            heads: 2,
            ffn: 32,
            max_len: 64,
            len_classes: 16,
        }
    }

    fn copy_pairs(n: usize, seed: u64) -> Vec<Pair> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                let len = r.gen_range(2..5);
                let s: Vec<TokenId> = (0..len).map(|_| r.gen_range(5..12)).collect();
                (TokenSeq(s.clone()), TokenSeq(s))
            })
            .collect()
    }

    #[test]
    fn schedule() {
        let model = TinyModel::new(config(12), 1).unwrap();
        let cfg = TrainConfig {
            lr: 1.0,
            warmup: 4,
            total_steps: 12,
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(&model, &cfg);
        let mut rates = Vec::new();
        for step in 0..13 {
            s.step = step;
            rates.push(s.lr(&cfg));
        }
        assert_eq!(&rates[..5], &[0.25, 0.5, 0.75, 1.0, 0.875]);
        assert!(rates[3..12].windows(2).all(|w| w[1] < w[0]));
        assert_eq!(rates[11], 0.0);
        assert_eq!(rates[12], 0.0);
    }

    #[test]
    fn wrap_and_unwrap() {
        assert_eq!(wrap_target(&[7, 8]), vec![BOS, 7, 8, EOS]);
        assert_eq!(unwrap_output(&[BOS, 7, 8, EOS]), vec![7, 8]);
        assert_eq!(unwrap_output(&[7, EOS, 9]), vec![7]);
    }

    #[test]
    fn length_ce_gradient_sums_to_zero() {
        let (loss, g) = length_ce(&[9.0, 0.5, 1.0, -0.3], 2).unwrap();
        assert!(loss > 0.0);
        assert_eq!(g[0], 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(length_ce(&[0.0; 4], 4).is_err());
    }

    #[test]
    fn zero_glancing_is_one_pass() {
        let model = TinyModel::new(config(12), 3).unwrap();
        let pairs = copy_pairs(3, 1);
        let cfg = TrainConfig {
            glancing_ratio: 0.0,
            ..TrainConfig::default()
        };
        let (loss, _) = loss_and_grad(&model, &cfg, 0.0, 0, Batch::Finetune(&pairs), Exec::Sequential).unwrap();
        let mut direct = 0.0;
        for (x, y) in &pairs {
            let target = wrap_target(y);
            let z = vec![MASK; upsampled_len(target.len(), cfg.lambda)];
            let (dag, logits) = model.forward(x, &z).unwrap();
            direct += dat_loss_grad(&dag, &target).unwrap().0
                + cfg.length_weight * length_ce(&logits, target.len()).unwrap().0;
        }
        assert!((loss - direct / 3.0).abs() < 1e-12);
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let model = TinyModel::new(config(12), 3).unwrap();
        let pairs = copy_pairs(5, 2);
        let mut rev = pairs.clone();
        rev.reverse();
        let cfg = TrainConfig {
            glancing_ratio: 0.0,
            ..TrainConfig::default()
        };
        let a = loss_and_grad(&model, &cfg, 0.0, 0, Batch::Finetune(&pairs), Exec::Sequential).unwrap();
        let b = loss_and_grad(&model, &cfg, 0.0, 0, Batch::Finetune(&rev), Exec::Sequential).unwrap();
        assert!((a.0 - b.0).abs() < 1e-10);
    }

    #[test]
    fn exec_policies_agree() {
        let model = TinyModel::new(config(12), 4).unwrap();
        let pairs = copy_pairs(4, 3);
        let cfg = TrainConfig::default();
        let a = loss_and_grad(&model, &cfg, 0.5, 7, Batch::Finetune(&pairs), Exec::Sequential).unwrap();
        let b = loss_and_grad(&model, &cfg, 0.5, 7, Batch::Finetune(&pairs), Exec::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = TinyModel::new(config(12), 5).unwrap();
        let pairs = copy_pairs(1, 4);
        for loss in [LossKind::Dat, LossKind::Ce] {
            let cfg = TrainConfig {
                glancing_ratio: 0.0,
                loss,
                ..TrainConfig::default()
            };
            let f = |m: &TinyModel| {
                loss_and_grad(m, &cfg, 0.0, 0, Batch::Finetune(&pairs), Exec::Sequential)
                    .unwrap()
                    .0
            };
            let (_, grads) =
                loss_and_grad(&model, &cfg, 0.0, 0, Batch::Finetune(&pairs), Exec::Sequential).unwrap();
            let mut r = rng::seeded(9);
            let mut checked = 0;
            while checked < 10 {
                let id = r.gen_range(0..model.params.len());
                let k = r.gen_range(0..model.params.get(id).len());
                let analytic = grads[id].data[k];
                let h = 1e-5;
                let mut plus = model.clone();
                plus.params.get_mut(id).data[k] += h;
                let mut minus = model.clone();
                minus.params.get_mut(id).data[k] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    rel < 1e-3,
                    "{loss:?} {}[{k}]: analytic {analytic} numeric {numeric}",
                    model.params.name(id)
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn copy_task_loss_halves() {
        let mut model = TinyModel::new(config(12), 6).unwrap();
        let pairs = copy_pairs(50, 5);
        let cfg = TrainConfig {
            lr: 3e-3,
            lambda: 2.0,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&model, &cfg);
        let mut losses = Vec::new();
        for step in 0..200 {
            let start = (step * 10) % 50;
            let batch = &pairs[start..start + 10];
            losses.push(train_step(&mut model, &mut state, &cfg, Batch::Finetune(batch), Exec::Sequential).unwrap().loss);
        }
        let first: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let last: f64 = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(last < 0.5 * first, "loss went from {first} to {last}");
        assert_eq!(state.step, 200);
    }

    #[test]
    fn pretrain_step_on_triples() {
        use crate::dsti::{prepare_documents, Stage1Config, Stage2Config};
        use crate::vocab::Vocab;
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::new(8, words);
        let mut r = rng::seeded(1);
        let docs: Vec<TokenSeq> = (0..4)
            .map(|_| (0..20).map(|_| vocab.id(&format!("w{}", r.gen_range(0..10))).unwrap()).collect())
            .collect();
        let s1 = Stage1Config {
            mask_ratio: 0.3,
            num_spans: 2,
            ..Stage1Config::default()
        };
        let s2 = Stage2Config {
            lambda_min: 2.0,
            lambda_max: 3.0,
            ..Stage2Config::default()
        };
        let (triples, _) = prepare_documents(&docs, &s1, &s2, &vocab, 0, None, Exec::Sequential).unwrap();
        let mut mc = config(vocab.len());
        mc.max_len = 128;
        let mut model = TinyModel::new(mc, 2).unwrap();
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(&model, &cfg);
        let first = train_step(&mut model, &mut state, &cfg, Batch::Pretrain(&triples), Exec::Sequential).unwrap();
        assert!(first.loss.is_finite() && first.loss > 0.0);
        for _ in 0..20 {
            train_step(&mut model, &mut state, &cfg, Batch::Pretrain(&triples), Exec::Sequential).unwrap();
        }
        let (after, _) = loss_and_grad(&model, &cfg, 0.0, 0, Batch::Pretrain(&triples), Exec::Sequential).unwrap();
        assert!(after < first.loss);
    }
}
