//! Two-stage decoding executor. Stage A turns a batch of inputs into per-sample
//! intermediate results (DAG prediction); stage B turns each batch of those
//! into outputs (path search). In overlapped mode stage A runs ahead of a pool
//! of stage-B workers through a bounded queue.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded};
use serde::{Deserialize, Serialize};

use crate::dag::DagParams;
use crate::decode::{DecoderConfig, NgramLm};
use crate::error::{Error, Result};
use crate::model::train::{predict_dag, unwrap_output};
use crate::model::{LossKind, TinyModel};
use crate::rng;
use crate::vocab::TokenSeq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    Overlapped,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Overlapped => "overlapped",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "overlapped" => Ok(Mode::Overlapped),
            other => Err(Error::Config(format!("unknown mode {other:?} (vanilla|overlapped)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub batch_size: usize,
    pub b_workers: usize,
    pub mode: Mode,
    pub queue_capacity: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            batch_size: 8,
            b_workers: 1,
            mode: Mode::Overlapped,
            queue_capacity: 2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.b_workers == 0 || self.queue_capacity == 0 {
            return Err(Error::Config(format!(
                "batch_size ({}), b_workers ({}) and queue_capacity ({}) must be at least 1",
                self.batch_size, self.b_workers, self.queue_capacity
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    /// Per sample: from the start of its batch's stage A to the end of its stage B.
    pub latency_ms: Vec<f64>,
    pub wall_ms: f64,
    pub throughput: f64,
    pub a_busy: f64,
    pub b_busy: f64,
    /// Largest number of batches observed waiting in the queue.
    pub max_queue: usize,
}

impl PipelineStats {
    pub fn mean_latency_ms(&self) -> f64 {
        self.latency_ms.iter().sum::<f64>() / self.latency_ms.len().max(1) as f64
    }
}

/// Stage A: one intermediate per input of the batch.
pub type StageA<'a, I> = dyn Fn(&[TokenSeq]) -> Result<Vec<I>> + Sync + 'a;
/// Stage B: a batch of intermediates (with the global index of the first) to outputs.
pub type StageB<'a, I, O> = dyn Fn(usize, &[I]) -> Result<Vec<O>> + Sync + 'a;

struct Finished<O> {
    batch: usize,
    outputs: Result<Vec<O>>,
    end: Instant,
}

/// Runs both stages over `inputs` and returns outputs in input order.
pub fn run_stages<I: Send, O: Send>(
    inputs: &[TokenSeq],
    stage_a: &StageA<'_, I>,
    stage_b: &StageB<'_, I, O>,
    cfg: &PipelineConfig,
) -> Result<(Vec<O>, PipelineStats)> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::MissingInput("pipeline needs at least one input".into()));
    }
    let batches: Vec<&[TokenSeq]> = inputs.chunks(cfg.batch_size).collect();
    let t0 = Instant::now();
    let mut a_busy = Duration::ZERO;
    let b_busy = Mutex::new(Duration::ZERO);
    let mut starts = vec![t0; batches.len()];
    let mut results: Vec<Option<(Vec<O>, Instant)>> = (0..batches.len()).map(|_| None).collect();
    let mut max_queue = 0;

    match cfg.mode {
        Mode::Vanilla => {
            for (k, batch) in batches.iter().enumerate() {
                starts[k] = Instant::now();
                let mid = stage_a(batch)?;
                let ta = Instant::now();
                a_busy += ta - starts[k];
                let out = stage_b(k * cfg.batch_size, &mid)?;
                let tb = Instant::now();
                *b_busy.lock().unwrap() += tb - ta;
                results[k] = Some((out, tb));
            }
        }
        Mode::Overlapped => {
            let (work_tx, work_rx) = bounded::<(usize, Vec<I>)>(cfg.queue_capacity);
            let (done_tx, done_rx) = unbounded::<Finished<O>>();
            let cancel = AtomicBool::new(false);
            let peak = AtomicUsize::new(0);
            let first_error: Mutex<Option<Error>> = Mutex::new(None);
            let record_error = |e: Error| {
                cancel.store(true, Ordering::SeqCst);
                first_error.lock().unwrap().get_or_insert(e);
            };
            thread::scope(|s| {
                for _ in 0..cfg.b_workers {
                    let (rx, tx) = (work_rx.clone(), done_tx.clone());
                    let (cancel, b_busy) = (&cancel, &b_busy);
                    s.spawn(move || {
                        for (k, mid) in rx.iter() {
                            if cancel.load(Ordering::SeqCst) {
                                continue;
                            }
                            let tb0 = Instant::now();
                            let outputs = stage_b(k * cfg.batch_size, &mid);
                            let end = Instant::now();
                            *b_busy.lock().unwrap() += end - tb0;
                            let _ = tx.send(Finished {
                                batch: k,
                                outputs,
                                end,
                            });
                        }
                    });
                }
                drop(work_rx);
                drop(done_tx);
                for (k, batch) in batches.iter().enumerate() {
                    if cancel.load(Ordering::SeqCst) {
                        break;
                    }
                    starts[k] = Instant::now();
                    match stage_a(batch) {
                        Ok(mid) => {
                            a_busy += starts[k].elapsed();
                            if work_tx.send((k, mid)).is_err() {
                                break;
                            }
                            peak.fetch_max(work_tx.len(), Ordering::SeqCst);
                        }
                        Err(e) => {
                            record_error(e);
                            break;
                        }
                    }
                    // collect whatever is already done so errors stop stage A early
                    while let Ok(f) = done_rx.try_recv() {
                        match f.outputs {
                            Ok(o) => results[f.batch] = Some((o, f.end)),
                            Err(e) => record_error(e),
                        }
                    }
                }
                drop(work_tx);
                for f in done_rx.iter() {
                    match f.outputs {
                        Ok(o) => results[f.batch] = Some((o, f.end)),
                        Err(e) => record_error(e),
                    }
                }
            });
            if let Some(e) = first_error.into_inner().unwrap() {
                return Err(e);
            }
            max_queue = peak.into_inner();
        }
    }

    let wall = t0.elapsed();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut latency_ms = Vec::with_capacity(inputs.len());
    for (k, r) in results.into_iter().enumerate() {
        let (out, end) = r.ok_or_else(|| Error::Worker(format!("batch {k} produced no output")))?;
        if out.len() != batches[k].len() {
            return Err(Error::Worker(format!(
                "batch {k} returned {} outputs for {} inputs",
                out.len(),
                batches[k].len()
            )));
        }
        let ms = (end - starts[k]).as_secs_f64() * 1e3;
        latency_ms.extend(std::iter::repeat(ms).take(out.len()));
        outputs.extend(out);
    }
    let wall_s = wall.as_secs_f64();
    let b_total = b_busy.into_inner().unwrap().as_secs_f64();
    let workers = if cfg.mode == Mode::Vanilla { 1 } else { cfg.b_workers };
    Ok((
        outputs,
        PipelineStats {
            latency_ms,
            wall_ms: wall_s * 1e3,
            throughput: inputs.len() as f64 / wall_s,
            a_busy: a_busy.as_secs_f64() / wall_s,
            b_busy: b_total / (wall_s * workers as f64),
            max_queue,
        },
    ))
}

/// Model inference: stage A predicts a DAG per input, stage B searches it.
pub fn run_pipeline(
    inputs: &[TokenSeq],
    model: &TinyModel,
    lambda: f64,
    loss: LossKind,
    decoder: &DecoderConfig,
    lm: Option<&NgramLm>,
    cfg: &PipelineConfig,
) -> Result<(Vec<TokenSeq>, PipelineStats)> {
    let stage_a = |batch: &[TokenSeq]| -> Result<Vec<DagParams>> {
        batch.iter().map(|x| predict_dag(model, x, lambda, loss)).collect()
    };
    let stage_b = |first: usize, dags: &[DagParams]| -> Result<Vec<TokenSeq>> {
        dags.iter()
            .enumerate()
            .map(|(k, dag)| {
                let d = decoder.decode(dag, lm, first + k)?;
                Ok(TokenSeq(unwrap_output(&d.tokens)))
            })
            .collect()
    };
    run_stages(inputs, &stage_a, &stage_b, cfg)
}

/// Sleep-based stand-in for model and search costs. Stage A costs
/// `a_fixed_ms + a_per_sample_ms * batch`, stage B `b_per_sample_ms * batch`.
/// Both stages still do real work: A draws a small random DAG per sample and
/// B decodes it, so outputs can be compared across modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorkload {
    pub a_fixed_ms: f64,
    pub a_per_sample_ms: f64,
    pub b_per_sample_ms: f64,
    pub num_batches: usize,
    pub seed: u64,
}

impl Default for SyntheticWorkload {
    fn default() -> Self {
        SyntheticWorkload {
            a_fixed_ms: 10.0,
            a_per_sample_ms: 0.0,
            b_per_sample_ms: 1.25,
            num_batches: 64,
            seed: 0,
        }
    }
}

/// Sleeps until `start + ms`, so the stage's own work counts toward its budget.
fn pad_to(start: Instant, ms: f64) {
    let target = start + Duration::from_secs_f64(ms / 1e3);
    let now = Instant::now();
    if target > now {
        thread::sleep(target - now);
    }
}

impl SyntheticWorkload {
    /// Inputs are just ids; `inputs[i]` is `[i]`.
    pub fn inputs(&self, batch_size: usize) -> Vec<TokenSeq> {
        (0..self.num_batches * batch_size)
            .map(|i| TokenSeq(vec![i as u32]))
            .collect()
    }

    pub fn run(&self, cfg: &PipelineConfig) -> Result<(Vec<TokenSeq>, PipelineStats)> {
        let decoder = DecoderConfig::default();
        let stage_a = |batch: &[TokenSeq]| -> Result<Vec<DagParams>> {
            let t = Instant::now();
            let dags = batch
                .iter()
                .map(|x| {
                    let mut r = rng::derived(self.seed, x[0] as u64);
                    DagParams::random(8, 8, 2.0, &mut r)
                })
                .collect();
            pad_to(t, self.a_fixed_ms + self.a_per_sample_ms * batch.len() as f64);
            Ok(dags)
        };
        let stage_b = |first: usize, dags: &[DagParams]| -> Result<Vec<TokenSeq>> {
            let t = Instant::now();
            let out = dags
                .iter()
                .enumerate()
                .map(|(k, d)| decoder.decode(d, None, first + k).map(|d| d.tokens))
                .collect();
            pad_to(t, self.b_per_sample_ms * dags.len() as f64);
            out
        };
        run_stages(&self.inputs(cfg.batch_size), &stage_a, &stage_b, cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub batch_size: usize,
    pub workers: usize,
    pub throughput_min: f64,
    pub throughput_median: f64,
    pub throughput_max: f64,
    pub latency_median_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Throughput of every (mode, batch size) cell over `reps` repetitions.
/// Fails if any repetition's outputs differ from the first run of its batch size.
pub fn benchmark(
    workload: &SyntheticWorkload,
    batch_sizes: &[usize],
    modes: &[Mode],
    workers: usize,
    queue_capacity: usize,
    reps: usize,
) -> Result<BenchReport> {
    if reps == 0 || batch_sizes.is_empty() || modes.is_empty() {
        return Err(Error::Config("benchmark needs repetitions, batch sizes and modes".into()));
    }
    let mut rows = Vec::new();
    for &bs in batch_sizes {
        let mut reference: Option<Vec<TokenSeq>> = None;
        for &mode in modes {
            let cfg = PipelineConfig {
                batch_size: bs,
                b_workers: workers,
                mode,
                queue_capacity,
            };
            let mut tp = Vec::with_capacity(reps);
            let mut lat = Vec::with_capacity(reps);
            for _ in 0..reps {
                let (out, stats) = workload.run(&cfg)?;
                match &reference {
                    None => reference = Some(out),
                    Some(r) if *r != out => {
                        return Err(Error::Worker(format!(
                            "{} outputs differ at batch size {bs}",
                            mode.name()
                        )))
                    }
                    Some(_) => {}
                }
                tp.push(stats.throughput);
                lat.push(median(&mut stats.latency_ms.clone()));
            }
            rows.push(BenchRow {
                mode,
                batch_size: bs,
                workers,
                throughput_min: tp.iter().cloned().fold(f64::INFINITY, f64::min),
                throughput_median: median(&mut tp.clone()),
                throughput_max: tp.iter().cloned().fold(0.0, f64::max),
                latency_median_ms: median(&mut lat),
            });
        }
    }
    Ok(BenchReport { rows })
}

impl BenchReport {
    /// Median overlapped throughput over median vanilla throughput.
    pub fn speedup(&self, batch_size: usize) -> Option<f64> {
        let get = |m: Mode| {
            self.rows
                .iter()
                .find(|r| r.mode == m && r.batch_size == batch_size)
                .map(|r| r.throughput_median)
        };
        Some(get(Mode::Overlapped)? / get(Mode::Vanilla)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "mode\tbatch_size\tworkers\tthroughput_min\tthroughput_median\tthroughput_max\tlatency_median_ms\tspeedup\n",
        );
        for r in &self.rows {
            let speedup = match r.mode {
                Mode::Overlapped => self
                    .speedup(r.batch_size)
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.3}")),
                Mode::Vanilla => "-".to_string(),
            };
            s.push_str(&format!(
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.3}\t{speedup}\n",
                r.mode.name(),
                r.batch_size,
                r.workers,
                r.throughput_min,
                r.throughput_median,
                r.throughput_max,
                r.latency_median_ms
            ));
        }
        s
    }

    /// One row per batch size with both modes side by side, for plotting.
    pub fn to_csv(&self) -> String {
        let mut sizes: Vec<usize> = self.rows.iter().map(|r| r.batch_size).collect();
        sizes.dedup();
        let mut s = String::from("batch_size,vanilla_throughput,overlapped_throughput,speedup\n");
        for bs in sizes {
            let get = |m: Mode| {
                self.rows
                    .iter()
                    .find(|r| r.mode == m && r.batch_size == bs)
                    .map_or_else(String::new, |r| format!("{:.3}", r.throughput_median))
            };
            let sp = self.speedup(bs).map_or_else(String::new, |v| format!("{v:.4}"));
            s.push_str(&format!("{bs},{},{},{sp}\n", get(Mode::Vanilla), get(Mode::Overlapped)));
        }
        s
    }
}
