//! Double-source text infilling: turn a passage into an (encoder input,
//! decoder input, target) triple.
//!
//! Stage 1 masks spans of the passage; the encoder input keeps the unmasked
//! text with one `[SPAN_k]` token per span, and the target lists the spans
//! delimited by their span IDs. Stage 2 up-samples the target by a ratio
//! `lambda`, assigns every target token a decoder position, and re-masks most
//! of them. The hidden runs of the target become fragments for the loss.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dag::DagParams;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::loss::{viterbi_align_pinned, Fragment, FragmentSpec};
use crate::rng::{self, Rng};
use crate::vocab::{TokenId, TokenSeq, Vocab, MASK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// `num_spans` equal-length spans.
    Span,
    /// i.i.d. token masking; adjacent masks coalesce into one span.
    Token,
    /// A single contiguous span.
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignStrategy {
    /// Most probable path of a DAG predicted from a fully masked decoder input.
    MaxProb,
    /// Constant spacing.
    Uniform,
    /// Sorted uniform sample of positions.
    Random,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" => Ok(MaskStrategy::Span),
            "token" => Ok(MaskStrategy::Token),
            "sequence" => Ok(MaskStrategy::Sequence),
            other => Err(Error::Config(format!("unknown stage-1 strategy `{other}`"))),
        }
    }
}

impl std::str::FromStr for AssignStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maxprob" => Ok(AssignStrategy::MaxProb),
            "uniform" => Ok(AssignStrategy::Uniform),
            "random" => Ok(AssignStrategy::Random),
            other => Err(Error::Config(format!("unknown assignment strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub mask_ratio: f64,
    pub num_spans: usize,
    pub strategy: MaskStrategy,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            mask_ratio: 0.15,
            num_spans: 6,
            strategy: MaskStrategy::Span,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must be in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.num_spans == 0 {
            return Err(Error::Config("num_spans must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_spans(&self) -> usize {
        match self.strategy {
            MaskStrategy::Sequence => 1,
            _ => self.num_spans,
        }
    }

    /// Shortest passage that can host the configured spans.
    pub fn min_passage_len(&self) -> usize {
        if self.strategy == MaskStrategy::Token {
            return 1;
        }
        (1..100_000)
            .find(|&m| self.span_layout(m).is_some())
            .unwrap_or(usize::MAX)
    }

    /// `(span lengths, unmasked count)` for a passage of `m` tokens, or `None`
    /// if the spans cannot be placed non-adjacently.
    fn span_layout(&self, m: usize) -> Option<(Vec<usize>, usize)> {
        let k = self.effective_spans();
        let total = round_half_up(self.mask_ratio * m as f64).min(m);
        if total < k {
            return None;
        }
        let unmasked = m - total;
        if unmasked + 1 < k {
            return None;
        }
        let (base, rem) = (total / k, total % k);
        let lens = (0..k).map(|i| base + usize::from(i < rem)).collect();
        Some((lens, unmasked))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub remask_ratio: f64,
    pub assign: AssignStrategy,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lambda_min: 4.0,
            lambda_max: 8.0,
            remask_ratio: 0.9,
            assign: AssignStrategy::Uniform,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_min >= 1.0 && self.lambda_min <= self.lambda_max) {
            return Err(Error::Config(format!(
                "need 1 <= lambda_min <= lambda_max, got [{}, {}]",
                self.lambda_min, self.lambda_max
            )));
        }
        if !(0.0..=1.0).contains(&self.remask_ratio) {
            return Err(Error::Config(format!(
                "remask_ratio must be in [0, 1], got {}",
                self.remask_ratio
            )));
        }
        Ok(())
    }

    pub fn sample_lambda(&self, rng: &mut Rng) -> f64 {
        if self.lambda_min == self.lambda_max {
            self.lambda_min
        } else {
            rng.gen_range(self.lambda_min..=self.lambda_max)
        }
    }
}

/// `round` with ties going up, for non-negative inputs.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Number of hidden tokens when re-masking `assignable` tokens.
pub fn hidden_count(remask_ratio: f64, assignable: usize) -> usize {
    // The epsilon keeps products such as 0.9 * 10 from rounding up to 10.
    ((remask_ratio * assignable as f64 - 1e-9).ceil().max(0.0) as usize).min(assignable)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage1Output {
    pub x: TokenSeq,
    pub y: TokenSeq,
    pub span_lengths: Vec<usize>,
}

/// Span masking of one passage.
pub fn stage1_mask(
    passage: &[TokenId],
    cfg: &Stage1Config,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<Stage1Output> {
    cfg.validate()?;
    let m = passage.len();
    let spans: Vec<(usize, usize)> = match cfg.strategy {
        MaskStrategy::Span | MaskStrategy::Sequence => {
            let (lens, unmasked) = cfg.span_layout(m).ok_or(Error::PassageTooShort {
                actual: m,
                required: cfg.min_passage_len(),
            })?;
            // Span i starts after b_i unmasked tokens; distinct b_i keep spans apart.
            let mut before: Vec<usize> = index::sample(rng, unmasked + 1, lens.len()).into_vec();
            before.sort_unstable();
            let mut masked_so_far = 0;
            before
                .iter()
                .zip(&lens)
                .map(|(&b, &len)| {
                    let start = b + masked_so_far;
                    masked_so_far += len;
                    (start, len)
                })
                .collect()
        }
        MaskStrategy::Token => {
            if m == 0 {
                return Err(Error::PassageTooShort {
                    actual: 0,
                    required: 1,
                });
            }
            let mut masked: Vec<bool> = (0..m).map(|_| rng.gen_bool(cfg.mask_ratio)).collect();
            if !masked.iter().any(|&b| b) {
                masked[rng.gen_range(0..m)] = true;
            }
            let mut spans = Vec::new();
            let mut i = 0;
            while i < m {
                if masked[i] {
                    let start = i;
                    while i < m && masked[i] {
                        i += 1;
                    }
                    spans.push((start, i - start));
                } else {
                    i += 1;
                }
            }
            spans
        }
    };
    if spans.len() > vocab.num_spans() {
        return Err(Error::Config(format!(
            "{} spans needed but the vocabulary has only {} span IDs",
            spans.len(),
            vocab.num_spans()
        )));
    }
    let mut x = Vec::with_capacity(m);
    let mut y = Vec::new();
    let mut cursor = 0;
    for (k, &(start, len)) in spans.iter().enumerate() {
        let id = vocab.span_id(k + 1).expect("span count checked above");
        x.extend_from_slice(&passage[cursor..start]);
        x.push(id);
        y.push(id);
        y.extend_from_slice(&passage[start..start + len]);
        cursor = start + len;
    }
    x.extend_from_slice(&passage[cursor..]);
    Ok(Stage1Output {
        x: x.into(),
        y: y.into(),
        span_lengths: spans.iter().map(|s| s.1).collect(),
    })
}

/// Splices the spans of `y` back into `x` at their span-ID positions.
pub fn reconstruct(x: &[TokenId], y: &[TokenId], vocab: &Vocab) -> Result<TokenSeq> {
    let mut spans: Vec<Option<&[TokenId]>> = vec![None; vocab.num_spans() + 1];
    let mut i = 0;
    while i < y.len() {
        let k = vocab.span_index(y[i]).ok_or_else(|| Error::Parse {
            field: "y".into(),
            message: format!("expected a span ID at position {i}"),
        })?;
        let start = i + 1;
        i = start;
        while i < y.len() && vocab.span_index(y[i]).is_none() {
            i += 1;
        }
        spans[k] = Some(&y[start..i]);
    }
    let mut out = Vec::new();
    for &t in x {
        match vocab.span_index(t) {
            Some(k) => out.extend_from_slice(spans[k].ok_or_else(|| Error::Parse {
                field: "y".into(),
                message: format!("span {k} missing from target"),
            })?),
            None => out.push(t),
        }
    }
    Ok(out.into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Output {
    pub z: TokenSeq,
    pub assignment: Vec<usize>,
    pub fragments: FragmentSpec,
    pub lambda: f64,
    pub hidden: Vec<bool>,
}

/// Decoder input of length `round(lambda * N)` holding only the span IDs of `y`.
pub fn masked_scaffold(y: &[TokenId], lambda: f64, vocab: &Vocab) -> TokenSeq {
    let len = round_half_up(lambda * y.len() as f64);
    let mut z = vec![MASK; len];
    for (i, &t) in y.iter().enumerate() {
        if vocab.span_index(t).is_some() {
            z[round_half_up(lambda * i as f64)] = t;
        }
    }
    z.into()
}

/// Up-sampling, assignment and re-masking of a target.
///
/// With a DAG, its length fixes the decoder length and `lambda = L / N`;
/// otherwise `lambda` is drawn from the configured range.
pub fn stage2_build(
    y: &[TokenId],
    dag: Option<&DagParams>,
    cfg: &Stage2Config,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<Stage2Output> {
    cfg.validate()?;
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyTarget);
    }
    let lambda = match dag {
        Some(d) => d.len() as f64 / n as f64,
        None => cfg.sample_lambda(rng),
    };
    let len = round_half_up(lambda * n as f64);
    if len < n {
        return Err(Error::InfeasibleAlignment {
            target: n,
            vertices: len,
        });
    }
    let is_span: Vec<bool> = y.iter().map(|&t| vocab.span_index(t).is_some()).collect();
    let pinned = |i: usize| round_half_up(lambda * i as f64);

    let assignment: Vec<usize> = match cfg.assign {
        AssignStrategy::Uniform => (0..n).map(pinned).collect(),
        AssignStrategy::Random => {
            let mut a = vec![0; n];
            let mut i = 0;
            while i < n {
                if is_span[i] {
                    a[i] = pinned(i);
                    i += 1;
                    continue;
                }
                // A run of ordinary tokens between two pinned positions.
                let start = i;
                while i < n && !is_span[i] {
                    i += 1;
                }
                let lo = if start == 0 { 0 } else { a[start - 1] + 1 };
                let hi = if i < n { pinned(i) } else { len };
                let count = i - start;
                let mut pos = index::sample(rng, hi - lo, count).into_vec();
                pos.sort_unstable();
                for (slot, p) in a[start..i].iter_mut().zip(pos) {
                    *slot = lo + p;
                }
            }
            a
        }
        AssignStrategy::MaxProb => {
            let dag = dag.ok_or_else(|| {
                Error::MissingInput("maxprob assignment needs a predicted DAG".into())
            })?;
            let pins: Vec<Option<usize>> = (0..n).map(|i| is_span[i].then(|| pinned(i))).collect();
            viterbi_align_pinned(dag, y, &pins)?.0
        }
    };

    let assignable: Vec<usize> = (0..n).filter(|&i| !is_span[i]).collect();
    let hide = hidden_count(cfg.remask_ratio, assignable.len());
    let mut hidden = vec![false; n];
    for k in index::sample(rng, assignable.len(), hide) {
        hidden[assignable[k]] = true;
    }

    let mut z = vec![MASK; len];
    for i in 0..n {
        if !hidden[i] {
            z[assignment[i]] = y[i];
        }
    }
    let fragments = extract_fragments(&hidden, &assignment);
    Ok(Stage2Output {
        z: z.into(),
        assignment,
        fragments,
        lambda,
        hidden,
    })
}

/// Maximal runs of hidden target indices; each run is paired with the decoder
/// vertices from its first to its last assigned position.
pub fn extract_fragments(hidden: &[bool], assignment: &[usize]) -> FragmentSpec {
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < hidden.len() {
        if !hidden[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < hidden.len() && hidden[i] {
            i += 1;
        }
        pairs.push(Fragment {
            tgt_start: start,
            tgt_end: i,
            dec_start: assignment[start],
            dec_end: assignment[i - 1] + 1,
        });
    }
    FragmentSpec::new(pairs)
}

/// One pre-training example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DstiTriple {
    pub doc: usize,
    pub x: TokenSeq,
    pub z: TokenSeq,
    pub y: TokenSeq,
    #[serde(rename = "assign")]
    pub assignment: Vec<usize>,
    #[serde(rename = "frags")]
    pub fragments: FragmentSpec,
    pub lambda: f64,
}

impl DstiTriple {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("triple serializes")
    }

    pub fn from_json(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse {
            field: "triple".into(),
            message: e.to_string(),
        })
    }
}

/// Predicts a DAG for `(x, scaffold)`; used by maxprob assignment.
pub type DagProvider<'a> = dyn Fn(&[TokenId], &[TokenId]) -> Result<DagParams> + Sync + 'a;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub kept: usize,
    pub skipped_short: usize,
    pub passage_tokens: usize,
    pub masked_tokens: usize,
    pub hidden_tokens: usize,
    pub assignable_tokens: usize,
    /// Counts of lambda in unit-width bins starting at `floor(lambda_min)`.
    pub lambda_histogram: Vec<usize>,
    pub lambda_sum: f64,
}

impl CorpusStats {
    pub fn mask_ratio(&self) -> f64 {
        if self.passage_tokens == 0 {
            0.0
        } else {
            self.masked_tokens as f64 / self.passage_tokens as f64
        }
    }

    pub fn lambda_mean(&self) -> f64 {
        if self.kept == 0 {
            0.0
        } else {
            self.lambda_sum / self.kept as f64
        }
    }
}

/// Stage 1 then stage 2 on every document. Document `d` uses the generator
/// stream `d` of `seed`, so output is independent of scheduling.
pub fn prepare_documents(
    docs: &[TokenSeq],
    stage1: &Stage1Config,
    stage2: &Stage2Config,
    vocab: &Vocab,
    seed: u64,
    provider: Option<&DagProvider<'_>>,
    exec: Exec,
) -> Result<(Vec<DstiTriple>, CorpusStats)> {
    stage1.validate()?;
    stage2.validate()?;
    let min_len = stage1.min_passage_len();
    let results = exec.map(docs, |d, passage| -> Result<Option<DstiTriple>> {
        if passage.len() < min_len {
            return Ok(None);
        }
        let mut rng = rng::derived(seed, d as u64);
        let s1 = stage1_mask(passage, stage1, vocab, &mut rng)?;
        let s2 = match (stage2.assign, provider) {
            (AssignStrategy::MaxProb, Some(provider)) => {
                let lambda = stage2.sample_lambda(&mut rng);
                let len = round_half_up(lambda * s1.y.len() as f64);
                let scaffold = masked_scaffold(&s1.y, len as f64 / s1.y.len() as f64, vocab);
                let dag = provider(&s1.x, &scaffold)?;
                stage2_build(&s1.y, Some(&dag), stage2, vocab, &mut rng)?
            }
            _ => stage2_build(&s1.y, None, stage2, vocab, &mut rng)?,
        };
        Ok(Some(DstiTriple {
            doc: d,
            x: s1.x,
            z: s2.z,
            y: s1.y,
            assignment: s2.assignment,
            fragments: s2.fragments,
            lambda: s2.lambda,
        }))
    });

    let bins = (stage2.lambda_max.floor() - stage2.lambda_min.floor()) as usize + 1;
    let mut stats = CorpusStats {
        documents: docs.len(),
        lambda_histogram: vec![0; bins],
        ..CorpusStats::default()
    };
    let mut triples = Vec::new();
    for (d, r) in results.into_iter().enumerate() {
        match r? {
            None => stats.skipped_short += 1,
            Some(t) => {
                stats.kept += 1;
                stats.passage_tokens += docs[d].len();
                stats.masked_tokens += t.y.iter().filter(|&&id| vocab.span_index(id).is_none()).count();
                let assignable = t.y.iter().filter(|&&id| vocab.span_index(id).is_none()).count();
                stats.assignable_tokens += assignable;
                stats.hidden_tokens += t.fragments.pairs.iter().map(Fragment::target_len).sum::<usize>();
                stats.lambda_sum += t.lambda;
                let bin = ((t.lambda.floor() - stage2.lambda_min.floor()) as usize).min(bins - 1);
                stats.lambda_histogram[bin] += 1;
                triples.push(t);
            }
        }
    }
    Ok((triples, stats))
}

/// Reads a corpus (one document per line) and prepares every document.
pub fn prepare_corpus(
    corpus_path: impl AsRef<Path>,
    vocab: &Vocab,
    stage1: &Stage1Config,
    stage2: &Stage2Config,
    seed: u64,
    provider: Option<&DagProvider<'_>>,
    exec: Exec,
) -> Result<(Vec<DstiTriple>, CorpusStats)> {
    let path = corpus_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let docs: Vec<TokenSeq> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.tokenize(l))
        .collect();
    prepare_documents(&docs, stage1, stage2, vocab, seed, provider, exec)
}

pub fn write_triples(path: impl AsRef<Path>, triples: &[DstiTriple]) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for t in triples {
        writeln!(out, "{}", t.to_json()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_triples(path: impl AsRef<Path>) -> Result<Vec<DstiTriple>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(DstiTriple::from_json)
        .collect()
}
