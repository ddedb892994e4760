mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{parse_assignment, RunConfig};
use dagnat_core::synth::Task;

#[derive(Parser)]
#[command(name = "dagnat", version, about = "DAG-based non-autoregressive generation toolkit")]
struct Cli {
    /// Flat TOML file of settings; see README for the keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides any config key, e.g. `--set hidden=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    glancing_ratio: Option<f64>,
}

#[derive(Args, Default)]
struct DecodeFlags {
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    lm_order: Option<usize>,
    #[arg(long)]
    lm_weight: Option<f64>,
    #[arg(long)]
    len_norm: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    no_constraints: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired task.
    Synth {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        size: usize,
        /// Extra pairs with unseen sources, written as heldout.*.
        #[arg(long, default_value_t = 0)]
        heldout: usize,
        #[arg(long, default_value = "train")]
        prefix: String,
    },
    /// Build pre-training triples from a corpus (one document per line).
    Prepare {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Model used for max-probability fragment assignment.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-train on prepared triples.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Fine-tune on paired text files.
    Finetune {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Decode inputs with a checkpoint, or decode pre-computed DAGs.
    Decode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines DAG file, decoded without a model.
        #[arg(long)]
        dags: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Vocabulary for DAG files; outputs are token ids without one.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Target-side text for the n-gram LM used by beam search.
        #[arg(long)]
        lm_data: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Vanilla vs overlapped throughput on the synthetic workload.
    Benchmark,
    /// Score hypotheses against references (tab-separated alternatives allowed).
    Eval {
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Baseline accuracy profiles for delta_acc.
        #[arg(long, requires = "r2l")]
        l2r: Option<PathBuf>,
        #[arg(long, requires = "l2r")]
        r2l: Option<PathBuf>,
    },
}

fn push<T: Into<toml::Value>>(out: &mut Vec<(String, toml::Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), v.into()));
    }
}

fn train_overrides(f: &TrainFlags, out: &mut Vec<(String, toml::Value)>) {
    push(out, "loss", f.loss.clone());
    push(out, "epochs", f.epochs.map(|v| v as i64));
    push(out, "batch_size", f.batch_size.map(|v| v as i64));
    push(out, "lr", f.lr);
    push(out, "lambda", f.lambda);
    push(out, "glancing_ratio", f.glancing_ratio);
}

fn decode_overrides(f: &DecodeFlags, out: &mut Vec<(String, toml::Value)>) {
    push(out, "algo", f.algo.clone());
    push(out, "beam_size", f.beam_size.map(|v| v as i64));
    push(out, "lm_order", f.lm_order.map(|v| v as i64));
    push(out, "lm_weight", f.lm_weight);
    push(out, "len_norm", f.len_norm);
    push(out, "top_p", f.top_p);
    push(out, "temperature", f.temperature);
    if f.no_constraints {
        push(out, "constraints", Some(false));
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = Vec::new();
    for s in &cli.set {
        overrides.push(parse_assignment(s)?);
    }
    match &cli.command {
        Command::Pretrain { train, .. } | Command::Finetune { train, .. } => train_overrides(train, &mut overrides),
        Command::Decode { decode, .. } => decode_overrides(decode, &mut overrides),
        _ => {}
    }
    push(&mut overrides, "seed", cli.seed.map(|s| s as i64));
    push(&mut overrides, "out_dir", cli.out_dir.as_ref().map(|p| p.display().to_string()));
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;

    match &cli.command {
        Command::Synth {
            task,
            size,
            heldout,
            prefix,
        } => commands::synth(&cfg, *task, *size, *heldout, prefix),
        Command::Prepare {
            corpus,
            vocab,
            checkpoint,
        } => commands::prepare(&cfg, corpus, vocab.as_deref(), checkpoint.as_deref()),
        Command::Pretrain { data, vocab, init, .. } => commands::pretrain(&cfg, data, vocab, init.as_deref()),
        Command::Finetune { src, tgt, init, .. } => commands::finetune(&cfg, src, tgt, init.as_deref()),
        Command::Decode {
            checkpoint,
            dags,
            input,
            vocab,
            lm_data,
            ..
        } => commands::decode(
            &cfg,
            &commands::DecodeArgs {
                checkpoint: checkpoint.as_deref(),
                dags: dags.as_deref(),
                input: input.as_deref(),
                vocab: vocab.as_deref(),
                lm_data: lm_data.as_deref(),
            },
        ),
        Command::Benchmark => commands::bench(&cfg),
        Command::Eval { hyps, refs, l2r, r2l } => commands::eval(&cfg, hyps, refs, l2r.as_deref(), r2l.as_deref()),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
