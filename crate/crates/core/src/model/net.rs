//! The tiny encoder-decoder that maps `(x, z)` to a DAG and a length distribution.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tape::{ParamStore, Tape, Var};
use super::tensor::Matrix;
use crate::dag::DagParams;
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::TokenId;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyModelConfig {
    pub vocab_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Length classes `0..len_classes`; class `n` means a target of `n` tokens.
    pub len_classes: usize,
}

impl TinyModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        TinyModelConfig {
            vocab_size,
            enc_layers: 2,
            dec_layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 128,
            max_len: 256,
            len_classes: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_len == 0 || self.len_classes < 2 || self.ffn == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        Ok(())
    }
}

struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

struct NormIds {
    gain: usize,
    bias: usize,
}

struct EncLayer {
    norm1: NormIds,
    attn: AttnIds,
    norm2: NormIds,
    ffn: FfnIds,
}

struct DecLayer {
    norm1: NormIds,
    self_attn: AttnIds,
    norm2: NormIds,
    cross_attn: AttnIds,
    norm3: NormIds,
    ffn: FfnIds,
}

struct Layout {
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    enc_norm: NormIds,
    dec_norm: NormIds,
    emit_w: usize,
    emit_b: usize,
    trans_q_w: usize,
    trans_q_b: usize,
    trans_k_w: usize,
    trans_k_b: usize,
    len_w: usize,
    len_b: usize,
}

/// Parameters plus the index layout used by the forward pass.
pub struct TinyModel {
    pub config: TinyModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Clone for TinyModel {
    fn clone(&self) -> Self {
        TinyModel::from_params(self.config.clone(), self.params.clone())
            .expect("a valid model clones into a valid model")
    }
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    pub emit: Var,
    pub trans: Var,
    pub len_logits: Var,
}

fn uniform(rows: usize, cols: usize, bound: f64, r: &mut rng::Rng) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| r.gen_range(-bound..=bound)).collect(),
    )
}

/// Parameter names and shapes in creation order.
fn parameter_shapes(cfg: &TinyModelConfig) -> Vec<(String, usize, usize)> {
    let (h, f) = (cfg.hidden, cfg.ffn);
    let mut out = vec![
        ("tok_emb".to_string(), cfg.vocab_size, h),
        ("enc_pos".to_string(), cfg.max_len, h),
        ("dec_pos".to_string(), cfg.max_len, h),
    ];
    let norm = |out: &mut Vec<(String, usize, usize)>, p: &str| {
        out.push((format!("{p}.gain"), 1, h));
        out.push((format!("{p}.bias"), 1, h));
    };
    let attn = |out: &mut Vec<(String, usize, usize)>, p: &str| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.w{m}"), h, h));
            out.push((format!("{p}.b{m}"), 1, h));
        }
    };
    let ffn = |out: &mut Vec<(String, usize, usize)>, p: &str| {
        out.push((format!("{p}.w1"), h, f));
        out.push((format!("{p}.b1"), 1, f));
        out.push((format!("{p}.w2"), f, h));
        out.push((format!("{p}.b2"), 1, h));
    };
    for l in 0..cfg.enc_layers {
        norm(&mut out, &format!("enc{l}.norm1"));
        attn(&mut out, &format!("enc{l}.attn"));
        norm(&mut out, &format!("enc{l}.norm2"));
        ffn(&mut out, &format!("enc{l}.ffn"));
    }
    for l in 0..cfg.dec_layers {
        norm(&mut out, &format!("dec{l}.norm1"));
        attn(&mut out, &format!("dec{l}.self"));
        norm(&mut out, &format!("dec{l}.norm2"));
        attn(&mut out, &format!("dec{l}.cross"));
        norm(&mut out, &format!("dec{l}.norm3"));
        ffn(&mut out, &format!("dec{l}.ffn"));
    }
    norm(&mut out, "enc_norm");
    norm(&mut out, "dec_norm");
    out.push(("emit.w".into(), h, cfg.vocab_size));
    out.push(("emit.b".into(), 1, cfg.vocab_size));
    out.push(("trans.wq".into(), h, h));
    out.push(("trans.bq".into(), 1, h));
    out.push(("trans.wk".into(), h, h));
    out.push(("trans.bk".into(), 1, h));
    out.push(("len.w".into(), h, cfg.len_classes));
    out.push(("len.b".into(), 1, cfg.len_classes));
    out
}

impl Layout {
    fn resolve(params: &ParamStore, cfg: &TinyModelConfig) -> Result<Layout> {
        let id = |name: String| {
            params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let norm = |p: &str| -> Result<NormIds> {
            Ok(NormIds {
                gain: id(format!("{p}.gain"))?,
                bias: id(format!("{p}.bias"))?,
            })
        };
        let attn = |p: &str| -> Result<AttnIds> {
            Ok(AttnIds {
                wq: id(format!("{p}.wq"))?,
                bq: id(format!("{p}.bq"))?,
                wk: id(format!("{p}.wk"))?,
                bk: id(format!("{p}.bk"))?,
                wv: id(format!("{p}.wv"))?,
                bv: id(format!("{p}.bv"))?,
                wo: id(format!("{p}.wo"))?,
                bo: id(format!("{p}.bo"))?,
            })
        };
        let ffn = |p: &str| -> Result<FfnIds> {
            Ok(FfnIds {
                w1: id(format!("{p}.w1"))?,
                b1: id(format!("{p}.b1"))?,
                w2: id(format!("{p}.w2"))?,
                b2: id(format!("{p}.b2"))?,
            })
        };
        let enc = (0..cfg.enc_layers)
            .map(|l| {
                Ok(EncLayer {
                    norm1: norm(&format!("enc{l}.norm1"))?,
                    attn: attn(&format!("enc{l}.attn"))?,
                    norm2: norm(&format!("enc{l}.norm2"))?,
                    ffn: ffn(&format!("enc{l}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        let dec = (0..cfg.dec_layers)
            .map(|l| {
                Ok(DecLayer {
                    norm1: norm(&format!("dec{l}.norm1"))?,
                    self_attn: attn(&format!("dec{l}.self"))?,
                    norm2: norm(&format!("dec{l}.norm2"))?,
                    cross_attn: attn(&format!("dec{l}.cross"))?,
                    norm3: norm(&format!("dec{l}.norm3"))?,
                    ffn: ffn(&format!("dec{l}.ffn"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Layout {
            tok_emb: id("tok_emb".into())?,
            enc_pos: id("enc_pos".into())?,
            dec_pos: id("dec_pos".into())?,
            enc,
            dec,
            enc_norm: norm("enc_norm")?,
            dec_norm: norm("dec_norm")?,
            emit_w: id("emit.w".into())?,
            emit_b: id("emit.b".into())?,
            trans_q_w: id("trans.wq".into())?,
            trans_q_b: id("trans.bq".into())?,
            trans_k_w: id("trans.wk".into())?,
            trans_k_b: id("trans.bk".into())?,
            len_w: id("len.w".into())?,
            len_b: id("len.b".into())?,
        })
    }
}

impl TinyModel {
    /// Freshly initialized model; weights are uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// embeddings in `±0.1`, norms at identity and biases at zero.
    pub fn new(config: TinyModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        for (name, rows, cols) in parameter_shapes(&config) {
            let m = if name.ends_with(".gain") {
                Matrix::filled(rows, cols, 1.0)
            } else if rows == 1 {
                Matrix::zeros(rows, cols)
            } else if name.ends_with("emb") || name.ends_with("pos") {
                uniform(rows, cols, 0.1, &mut r)
            } else {
                uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), &mut r)
            };
            params.insert(name, m);
        }
        TinyModel::from_params(config, params)
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(config: TinyModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes = parameter_shapes(&config);
        if shapes.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, rows, cols) in &shapes {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let m = params.get(id);
            if (m.rows, m.cols) != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {}x{}, expected {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
        }
        let layout = Layout::resolve(&params, &config)?;
        Ok(TinyModel {
            config,
            params,
            layout,
        })
    }

    fn attention_block(&self, t: &mut Tape, xq: Var, xkv: Var, ids: &AttnIds) -> Var {
        let q = t.linear(xq, ids.wq, ids.bq);
        let k = t.linear(xkv, ids.wk, ids.bk);
        let v = t.linear(xkv, ids.wv, ids.bv);
        let o = t.attention(q, k, v, self.config.heads);
        t.linear(o, ids.wo, ids.bo)
    }

    fn ffn_block(&self, t: &mut Tape, x: Var, ids: &FfnIds) -> Var {
        let h = t.linear(x, ids.w1, ids.b1);
        let h = t.gelu(h);
        t.linear(h, ids.w2, ids.b2)
    }

    fn check_lengths(&self, x: &[TokenId], z: &[TokenId]) -> Result<()> {
        let max = self.config.max_len;
        for len in [x.len(), z.len()] {
            if len > max {
                return Err(Error::LengthOverflow { len, max });
            }
        }
        if x.is_empty() || z.is_empty() {
            return Err(Error::Config("model inputs must be non-empty".into()));
        }
        if let Some(&bad) = x.iter().chain(z).find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidVocab(format!(
                "token {bad} outside model vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `t`.
    pub fn forward_on(&self, t: &mut Tape, x: &[TokenId], z: &[TokenId]) -> Result<ForwardVars> {
        self.check_lengths(x, z)?;
        let ly = &self.layout;
        let positions = |n: usize| (0..n as u32).collect::<Vec<_>>();

        let tok = t.gather(ly.tok_emb, x);
        let pos = t.gather(ly.enc_pos, &positions(x.len()));
        let mut h = t.add(tok, pos);
        for layer in &ly.enc {
            let n = t.layer_norm(h, layer.norm1.gain, layer.norm1.bias);
            let a = self.attention_block(t, n, n, &layer.attn);
            h = t.add(h, a);
            let n = t.layer_norm(h, layer.norm2.gain, layer.norm2.bias);
            let f = self.ffn_block(t, n, &layer.ffn);
            h = t.add(h, f);
        }
        let enc = t.layer_norm(h, ly.enc_norm.gain, ly.enc_norm.bias);

        let tok = t.gather(ly.tok_emb, z);
        let pos = t.gather(ly.dec_pos, &positions(z.len()));
        let mut g = t.add(tok, pos);
        for layer in &ly.dec {
            let n = t.layer_norm(g, layer.norm1.gain, layer.norm1.bias);
            let a = self.attention_block(t, n, n, &layer.self_attn);
            g = t.add(g, a);
            let n = t.layer_norm(g, layer.norm2.gain, layer.norm2.bias);
            let c = self.attention_block(t, n, enc, &layer.cross_attn);
            g = t.add(g, c);
            let n = t.layer_norm(g, layer.norm3.gain, layer.norm3.bias);
            let f = self.ffn_block(t, n, &layer.ffn);
            g = t.add(g, f);
        }
        let dec = t.layer_norm(g, ly.dec_norm.gain, ly.dec_norm.bias);

        let logits = t.linear(dec, ly.emit_w, ly.emit_b);
        let emit = t.log_softmax(logits, false);

        let q = t.linear(dec, ly.trans_q_w, ly.trans_q_b);
        let k = t.linear(dec, ly.trans_k_w, ly.trans_k_b);
        let scores = t.matmul_bt(q, k);
        let scores = t.scale(scores, 1.0 / (self.config.hidden as f64).sqrt());
        let trans = t.log_softmax(scores, true);

        let pooled = t.mean_rows(enc);
        let len_logits = t.linear(pooled, ly.len_w, ly.len_b);
        Ok(ForwardVars {
            emit,
            trans,
            len_logits,
        })
    }

    /// DAG for decoder input `z` and unnormalized length logits.
    pub fn forward(&self, x: &[TokenId], z: &[TokenId]) -> Result<(DagParams, Vec<f64>)> {
        let mut t = Tape::new(&self.params);
        let vars = self.forward_on(&mut t, x, z)?;
        let dag = dag_from_tape(&t, &vars)?;
        Ok((dag, t.value(vars.len_logits).data.clone()))
    }

    /// `round(lambda_hat * argmax length)`, clipped to `[1, max_len]`.
    pub fn predict_length(&self, x: &[TokenId], lambda_hat: f64) -> Result<usize> {
        if !(lambda_hat > 0.0) {
            return Err(Error::Config(format!("lambda_hat must be positive, got {lambda_hat}")));
        }
        let mut t = Tape::new(&self.params);
        let vars = self.forward_on(&mut t, x, &[crate::vocab::MASK])?;
        let logits = &t.value(vars.len_logits).data;
        Ok(length_from_logits(logits, lambda_hat, self.config.max_len))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Most likely length class (ignoring class 0) scaled by `lambda_hat` and clipped.
pub fn length_from_logits(logits: &[f64], lambda_hat: f64, max_len: usize) -> usize {
    let best = argmax_length(logits);
    let scaled = crate::dsti::round_half_up(lambda_hat * best as f64);
    scaled.clamp(1, max_len)
}

/// Argmax over classes `1..`; ties go to the shorter length.
pub fn argmax_length(logits: &[f64]) -> usize {
    let mut best = 1;
    for (c, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = c;
        }
    }
    best
}

pub(crate) fn dag_from_tape(t: &Tape, vars: &ForwardVars) -> Result<DagParams> {
    let emit = t.value(vars.emit);
    let trans = t.value(vars.trans);
    DagParams::new_unchecked(emit.rows, emit.cols, emit.data.clone(), trans.data.clone())
}
