//! Run configuration: a flat TOML file of `key = value` lines. Every key is
//! optional; unknown keys are an error. Command-line flags override the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dagnat_core::decode::{Algorithm, BeamConfig, DecodeConstraints, DecoderConfig};
use dagnat_core::dsti::{AssignStrategy, MaskStrategy, Stage1Config, Stage2Config};
use dagnat_core::model::{LossKind, TinyModelConfig, TrainConfig};
use dagnat_core::pipeline::{Mode, PipelineConfig, SyntheticWorkload};
use dagnat_core::Exec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// "parallel" or "sequential" for batch loops.
    pub exec: String,

    // model
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub len_classes: usize,

    // training
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    /// Decay the learning rate linearly to zero over the whole run.
    pub decay: bool,
    pub clip_norm: f64,
    pub glancing_ratio: f64,
    pub lambda: f64,
    pub length_weight: f64,

    // pre-training data
    pub mask_ratio: f64,
    pub num_spans: usize,
    pub mask_strategy: MaskStrategy,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub remask_ratio: f64,
    pub assign: AssignStrategy,

    // decoding
    pub algo: Algorithm,
    pub beam_size: usize,
    pub lm_order: usize,
    pub lm_add_k: f64,
    pub lm_weight: f64,
    pub len_norm: f64,
    pub top_p: f64,
    pub temperature: f64,
    pub constraints: bool,
    /// Up-sampling ratio at inference; 0 uses the value the checkpoint was trained with.
    pub decode_lambda: f64,

    // pipeline
    pub pipe_batch_size: usize,
    pub b_workers: usize,
    pub mode: Mode,
    pub queue_capacity: usize,

    // benchmark
    pub bench_batch_sizes: Vec<usize>,
    pub bench_reps: usize,
    pub bench_batches: usize,
    pub a_fixed_ms: f64,
    pub a_per_sample_ms: f64,
    pub b_per_sample_ms: f64,

    // evaluation
    pub bleu_order: usize,
    pub distinct_orders: Vec<usize>,
    pub acc_buckets: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = TinyModelConfig::new(0);
        let train = TrainConfig::default();
        let s1 = Stage1Config::default();
        let s2 = Stage2Config::default();
        let dec = DecoderConfig::default();
        let pipe = PipelineConfig::default();
        let work = SyntheticWorkload::default();
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            exec: "parallel".into(),
            enc_layers: model.enc_layers,
            dec_layers: model.dec_layers,
            hidden: model.hidden,
            heads: model.heads,
            ffn: model.ffn,
            max_len: model.max_len,
            len_classes: model.len_classes,
            loss: train.loss,
            epochs: 10,
            batch_size: 16,
            lr: train.lr,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            warmup: train.warmup,
            decay: false,
            clip_norm: train.clip_norm,
            glancing_ratio: train.glancing_ratio,
            lambda: train.lambda,
            length_weight: train.length_weight,
            mask_ratio: s1.mask_ratio,
            num_spans: s1.num_spans,
            mask_strategy: s1.strategy,
            lambda_min: s2.lambda_min,
            lambda_max: s2.lambda_max,
            remask_ratio: s2.remask_ratio,
            assign: s2.assign,
            algo: dec.algorithm,
            beam_size: dec.beam.beam_size,
            lm_order: dagnat_core::decode::lm::DEFAULT_ORDER,
            lm_add_k: dagnat_core::decode::lm::DEFAULT_ADD_K,
            lm_weight: dec.beam.lm_weight,
            len_norm: dec.beam.len_norm,
            top_p: dec.top_p,
            temperature: dec.temperature,
            constraints: true,
            decode_lambda: 0.0,
            pipe_batch_size: pipe.batch_size,
            b_workers: pipe.b_workers,
            mode: pipe.mode,
            queue_capacity: pipe.queue_capacity,
            bench_batch_sizes: vec![1, 2, 4, 8],
            bench_reps: 3,
            bench_batches: work.num_batches,
            a_fixed_ms: work.a_fixed_ms,
            a_per_sample_ms: work.a_per_sample_ms,
            b_per_sample_ms: work.b_per_sample_ms,
            bleu_order: 4,
            distinct_orders: vec![1, 2],
            acc_buckets: 10,
        }
    }
}

/// Parses `key=value` with the value read as a TOML literal, falling back to
/// a bare string (so `--set algo=beam` works without quotes).
pub fn parse_assignment(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .with_context(|| format!("expected key=value, got {s:?}"))?;
    let k = k.trim().to_string();
    let v = v.trim();
    let value = toml::from_str::<toml::Table>(&format!("x = {v}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k, value))
}

impl RunConfig {
    /// File (if any), then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str::<toml::Table>(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
            bail!("config must be flat, but {k:?} is a table");
        }
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        cfg.exec()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn exec(&self) -> Result<Exec> {
        match self.exec.as_str() {
            "sequential" => Ok(Exec::Sequential),
            "parallel" => Ok(Exec::default()),
            other => bail!("exec must be parallel or sequential, got {other:?}"),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> TinyModelConfig {
        TinyModelConfig {
            vocab_size,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            max_len: self.max_len,
            len_classes: self.len_classes,
        }
    }

    pub fn train_config(&self, steps_per_epoch: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            warmup: self.warmup,
            total_steps: if self.decay {
                (self.epochs * steps_per_epoch) as u64
            } else {
                0
            },
            clip_norm: self.clip_norm,
            glancing_ratio: self.glancing_ratio,
            lambda: self.lambda,
            length_weight: self.length_weight,
            loss: self.loss,
            seed: self.seed,
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            mask_ratio: self.mask_ratio,
            num_spans: self.num_spans,
            strategy: self.mask_strategy,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            remask_ratio: self.remask_ratio,
            assign: self.assign,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            algorithm: self.algo,
            beam: BeamConfig {
                beam_size: self.beam_size,
                lm_weight: self.lm_weight,
                len_norm: self.len_norm,
            },
            top_p: self.top_p,
            temperature: self.temperature,
            seed: self.seed,
            constraints: if self.constraints {
                DecodeConstraints::default()
            } else {
                DecodeConstraints::none()
            },
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            batch_size: self.pipe_batch_size,
            b_workers: self.b_workers,
            mode: self.mode,
            queue_capacity: self.queue_capacity,
        }
    }

    pub fn workload(&self) -> SyntheticWorkload {
        SyntheticWorkload {
            a_fixed_ms: self.a_fixed_ms,
            a_per_sample_ms: self.a_per_sample_ms,
            b_per_sample_ms: self.b_per_sample_ms,
            num_batches: self.bench_batches,
            seed: self.seed,
        }
    }
}
