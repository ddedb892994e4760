//! Per-sample DAG: emission and transition log-probabilities over `L` vertices.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Tolerance used when checking that a row is log-normalized.
pub const NORM_TOL: f64 = 1e-6;

/// Serialized stand-in for `-inf`; anything at or below it loads as `-inf`.
pub const NEG_INF_SENTINEL: f64 = -1e30;

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))`.
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Emission log-probabilities `(L, V)` and strictly upper-triangular
/// transition log-probabilities `(L, L)`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DagParams {
    len: usize,
    vocab: usize,
    emit: Vec<f64>,
    trans: Vec<f64>,
}

impl DagParams {
    /// Builds and validates a DAG.
    pub fn new(len: usize, vocab: usize, emit: Vec<f64>, trans: Vec<f64>) -> Result<Self> {
        let dag = DagParams::new_unchecked(len, vocab, emit, trans)?;
        dag.validate()?;
        Ok(dag)
    }

    /// Builds a DAG checking only shapes. Used by code that constructs rows
    /// by masked log-softmax and by tests of the validator itself.
    pub fn new_unchecked(len: usize, vocab: usize, emit: Vec<f64>, trans: Vec<f64>) -> Result<Self> {
        if len == 0 || vocab == 0 {
            return Err(Error::InvalidDag(format!(
                "empty DAG (L={len}, |V|={vocab})"
            )));
        }
        if emit.len() != len * vocab {
            return Err(Error::InvalidDag(format!(
                "emit_logp has {} entries, expected {}x{}",
                emit.len(),
                len,
                vocab
            )));
        }
        if trans.len() != len * len {
            return Err(Error::InvalidDag(format!(
                "trans_logp has {} entries, expected {}x{}",
                trans.len(),
                len,
                len
            )));
        }
        Ok(DagParams {
            len,
            vocab,
            emit,
            trans,
        })
    }

    /// Builds from nested rows.
    pub fn from_rows(emit: &[Vec<f64>], trans: &[Vec<f64>]) -> Result<Self> {
        let len = emit.len();
        let vocab = emit.first().map_or(0, Vec::len);
        if emit.iter().any(|r| r.len() != vocab) {
            return Err(Error::InvalidDag("ragged emit_logp rows".into()));
        }
        if trans.len() != len || trans.iter().any(|r| r.len() != len) {
            return Err(Error::InvalidDag("trans_logp must be L x L".into()));
        }
        DagParams::new(len, vocab, emit.concat(), trans.concat())
    }

    /// Checks the three structural invariants: normalized emission rows,
    /// `-inf` on and below the diagonal, normalized transition rows except the last.
    pub fn validate(&self) -> Result<()> {
        for j in 0..self.len {
            let row = self.emit_row(j);
            if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                return Err(Error::InvalidDag(format!("emit_logp row {j} has NaN/+inf")));
            }
            let lse = logsumexp(row.iter().copied());
            if (lse.abs()).is_nan() || lse.abs() > NORM_TOL {
                return Err(Error::InvalidDag(format!(
                    "emit_logp row {j} is not normalized (logsumexp = {lse})"
                )));
            }
        }
        for i in 0..self.len {
            let row = self.trans_row(i);
            if row.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
                return Err(Error::InvalidDag(format!("trans_logp row {i} has NaN/+inf")));
            }
            if let Some(j) = (0..=i).find(|&j| row[j] != f64::NEG_INFINITY) {
                return Err(Error::InvalidDag(format!(
                    "trans_logp[{i}][{j}] must be -inf (paths only move forward)"
                )));
            }
            if i + 1 < self.len {
                let lse = logsumexp(row[i + 1..].iter().copied());
                if lse.is_nan() || lse.abs() > NORM_TOL {
                    return Err(Error::InvalidDag(format!(
                        "trans_logp row {i} is not normalized (logsumexp = {lse})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    #[inline]
    pub fn emit(&self, vertex: usize, token: u32) -> f64 {
        self.emit[vertex * self.vocab + token as usize]
    }

    #[inline]
    pub fn trans(&self, from: usize, to: usize) -> f64 {
        self.trans[from * self.len + to]
    }

    pub fn emit_row(&self, vertex: usize) -> &[f64] {
        &self.emit[vertex * self.vocab..(vertex + 1) * self.vocab]
    }

    pub fn trans_row(&self, from: usize) -> &[f64] {
        &self.trans[from * self.len..(from + 1) * self.len]
    }

    pub fn emit_logp(&self) -> &[f64] {
        &self.emit
    }

    pub fn trans_logp(&self) -> &[f64] {
        &self.trans
    }

    /// Sub-DAG on vertices `start..end`; transitions leaving the segment are
    /// dropped and each remaining row is renormalized in log space.
    pub fn slice(&self, start: usize, end: usize) -> Result<DagParams> {
        if start >= end || end > self.len {
            return Err(Error::InvalidDag(format!(
                "bad slice {start}..{end} of a DAG with {} vertices",
                self.len
            )));
        }
        let n = end - start;
        let emit = self.emit[start * self.vocab..end * self.vocab].to_vec();
        let mut trans = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            let src = &self.trans_row(start + i)[start..end];
            let lse = logsumexp(src[i + 1..].iter().copied());
            for j in i + 1..n {
                trans[i * n + j] = src[j] - lse;
            }
        }
        DagParams::new_unchecked(n, self.vocab, emit, trans)
    }

    /// Same emissions with the forced chain `i -> i + 1`. Used to decode
    /// models trained with a token-level loss, whose transitions are ignored.
    pub fn with_chain_transitions(&self) -> DagParams {
        let mut trans = vec![f64::NEG_INFINITY; self.len * self.len];
        for i in 0..self.len.saturating_sub(1) {
            trans[i * self.len + i + 1] = 0.0;
        }
        DagParams {
            len: self.len,
            vocab: self.vocab,
            emit: self.emit.clone(),
            trans,
        }
    }

    /// Random normalized DAG with logits drawn from `N(0, scale)`-like uniform noise.
    pub fn random(len: usize, vocab: usize, scale: f64, rng: &mut Rng) -> DagParams {
        let mut emit = vec![0.0; len * vocab];
        for row in emit.chunks_mut(vocab) {
            for x in row.iter_mut() {
                *x = rng.gen_range(-scale..=scale);
            }
            let lse = logsumexp(row.iter().copied());
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let mut trans = vec![f64::NEG_INFINITY; len * len];
        for i in 0..len.saturating_sub(1) {
            let row = &mut trans[i * len..(i + 1) * len];
            for x in row[i + 1..].iter_mut() {
                *x = rng.gen_range(-scale..=scale);
            }
            let lse = logsumexp(row[i + 1..].iter().copied());
            row[i + 1..].iter_mut().for_each(|x| *x -= lse);
        }
        DagParams {
            len,
            vocab,
            emit,
            trans,
        }
    }

    pub fn to_record(&self) -> DagRecord {
        let enc = |x: f64| if x <= NEG_INF_SENTINEL { NEG_INF_SENTINEL } else { x };
        DagRecord {
            len: self.len,
            emit_logp: self
                .emit
                .chunks(self.vocab)
                .map(|r| r.iter().copied().map(enc).collect())
                .collect(),
            trans_logp: self
                .trans
                .chunks(self.len)
                .map(|r| r.iter().copied().map(enc).collect())
                .collect(),
        }
    }

    pub fn from_record(rec: &DagRecord) -> Result<DagParams> {
        if rec.emit_logp.len() != rec.len {
            return Err(Error::Parse {
                field: "emit_logp".into(),
                message: format!("{} rows, but L = {}", rec.emit_logp.len(), rec.len),
            });
        }
        if rec.trans_logp.len() != rec.len {
            return Err(Error::Parse {
                field: "trans_logp".into(),
                message: format!("{} rows, but L = {}", rec.trans_logp.len(), rec.len),
            });
        }
        let vocab = rec.emit_logp.first().map_or(0, Vec::len);
        if let Some(i) = rec.emit_logp.iter().position(|r| r.len() != vocab) {
            return Err(Error::Parse {
                field: "emit_logp".into(),
                message: format!("row {i} has a different width"),
            });
        }
        if let Some(i) = rec.trans_logp.iter().position(|r| r.len() != rec.len) {
            return Err(Error::Parse {
                field: "trans_logp".into(),
                message: format!("row {i} does not have L = {} entries", rec.len),
            });
        }
        let dec = |x: &f64| if *x <= NEG_INF_SENTINEL { f64::NEG_INFINITY } else { *x };
        let emit = rec.emit_logp.iter().flatten().map(dec).collect();
        let trans = rec.trans_logp.iter().flatten().map(dec).collect();
        DagParams::new(rec.len, vocab, emit, trans)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("DAG record serializes")
    }

    pub fn from_json(line: &str) -> Result<DagParams> {
        let de = &mut serde_json::Deserializer::from_str(line);
        let rec: DagRecord = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = match path.split(['.', '[']).next() {
                Some(f) if !f.is_empty() && f != "?" => f.to_string(),
                _ => missing_field(e.inner()).unwrap_or_else(|| "<record>".into()),
            };
            Error::Parse {
                field,
                message: e.into_inner().to_string(),
            }
        })?;
        DagParams::from_record(&rec)
    }
}

fn missing_field(e: &serde_json::Error) -> Option<String> {
    let msg = e.to_string();
    ["emit_logp", "trans_logp", "L"]
        .into_iter()
        .find(|f| msg.contains(&format!("`{f}`")))
        .map(str::to_string)
}

/// On-disk form of a DAG: `{"L": int, "emit_logp": [[..]], "trans_logp": [[..]]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DagRecord {
    #[serde(rename = "L")]
    pub len: usize,
    pub emit_logp: Vec<Vec<f64>>,
    pub trans_logp: Vec<Vec<f64>>,
}

/// Reads a JSONL file with one DAG per line.
pub fn load_dags(path: impl AsRef<Path>) -> Result<Vec<DagParams>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(DagParams::from_json(&line)?);
    }
    Ok(out)
}

pub fn save_dags(path: impl AsRef<Path>, dags: &[DagParams]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for dag in dags {
        writeln!(file, "{}", dag.to_json()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
