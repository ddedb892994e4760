use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use serde_json::{json, Map, Value};

use dagnat_core::dag::{load_dags, DagParams};
use dagnat_core::decode::{train_ngram_lm, NgramLm};
use dagnat_core::dsti::{prepare_corpus, read_triples, write_triples, DagProvider};
use dagnat_core::metrics::{acc_profile, corpus_bleu, delta_acc, distinct_n, equal_buckets, AccProfile};
use dagnat_core::model::checkpoint;
use dagnat_core::model::train::{train_step, unwrap_output, wrap_target, Batch, Pair};
use dagnat_core::model::{LossKind, TinyModel, TrainState};
use dagnat_core::pipeline::{benchmark, run_pipeline, Mode};
use dagnat_core::synth::{self, Task};
use dagnat_core::{rng, TokenSeq, Vocab};

use crate::config::RunConfig;
use crate::manifest::Manifest;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(synth::read_lines(path)?)
}

fn out_path(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(cfg.out_dir.join(name))
}

fn write_text(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn finish(mut manifest: Manifest, cfg: &RunConfig, outputs: Vec<PathBuf>) -> Result<()> {
    manifest.outputs = outputs;
    fs::create_dir_all(&cfg.out_dir)?;
    // the effective config, reusable as --config for a rerun
    let cp = cfg.out_dir.join(format!("{}.config.toml", manifest.command));
    fs::write(&cp, cfg.to_toml())?;
    let path = manifest.write(&cfg.out_dir)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// Training settings and vocabulary stored alongside the weights.
fn checkpoint_extra(cfg: &RunConfig, vocab: &Vocab, stage: &str) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("stage".into(), json!(stage));
    m.insert("vocab".into(), json!(vocab.tokens()));
    m.insert("loss".into(), json!(cfg.loss));
    m.insert("lambda".into(), json!(cfg.lambda));
    m.insert("run_config".into(), serde_json::to_value(cfg).expect("config serializes"));
    m
}

struct Loaded {
    model: TinyModel,
    vocab: Vocab,
    loss: LossKind,
    lambda: f64,
}

fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let (model, extra) = checkpoint::load(path)?;
    let tokens: Vec<String> = serde_json::from_value(extra.get("vocab").cloned().unwrap_or(Value::Null))
        .context("checkpoint has no vocabulary")?;
    let vocab = Vocab::parse(&tokens.join("\n"))?;
    if vocab.len() != model.config.vocab_size {
        bail!("checkpoint vocabulary has {} tokens, model expects {}", vocab.len(), model.config.vocab_size);
    }
    let loss = serde_json::from_value(extra.get("loss").cloned().unwrap_or(json!("dat")))?;
    let lambda = extra.get("lambda").and_then(Value::as_f64).unwrap_or(1.0);
    Ok(Loaded {
        model,
        vocab,
        loss,
        lambda,
    })
}

pub fn synth(cfg: &RunConfig, task: Task, size: usize, heldout: usize, prefix: &str) -> Result<()> {
    let manifest = Manifest::new("synth", cfg, &[])?;
    // Held-out sources never appear in training; for the multimodal task each
    // source comes with both renderings, so draw enough pairs for both splits.
    let mut pool = synth::generate(task, size + 2 * heldout, cfg.seed);
    let mut test: Vec<synth::SynthPair> = Vec::new();
    let mut test_sources = std::collections::HashSet::new();
    for p in &pool {
        if test.len() == heldout {
            break;
        }
        if test_sources.insert(p.source.clone()) {
            test.push(p.clone());
        }
    }
    pool.retain(|p| !test_sources.contains(&p.source));
    if pool.len() < size {
        bail!("could only generate {} training pairs", pool.len());
    }
    pool.truncate(size);
    let dir = cfg.out_dir.clone();
    let mut outputs = Vec::new();
    let files = synth::write_pairs(&dir, prefix, &pool)?;
    outputs.extend([files.source, files.target, files.references]);
    if heldout > 0 {
        let files = synth::write_pairs(&dir, "heldout", &test)?;
        outputs.extend([files.source, files.target, files.references]);
    }
    finish(manifest, cfg, outputs)
}

pub fn prepare(cfg: &RunConfig, corpus: &Path, vocab_path: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let mut inputs = vec![corpus];
    inputs.extend(vocab_path);
    inputs.extend(ckpt);
    let manifest = Manifest::new("prepare", cfg, &inputs)?;
    let loaded = ckpt.map(load_checkpoint).transpose()?;
    let vocab = match (vocab_path, &loaded) {
        (Some(p), _) => Vocab::load(p)?,
        (None, Some(l)) => l.vocab.clone(),
        (None, None) => {
            let lines = read_lines(corpus)?;
            Vocab::from_texts(cfg.num_spans, lines.iter().map(String::as_str))
        }
    };
    let provider = loaded
        .as_ref()
        .map(|l| move |x: &[u32], z: &[u32]| l.model.forward(x, z).map(|(dag, _)| dag));
    let provider_ref: Option<&DagProvider<'_>> = provider.as_ref().map(|p| p as &DagProvider<'_>);
    if cfg.assign == dagnat_core::dsti::AssignStrategy::MaxProb && provider_ref.is_none() {
        bail!("assign = \"maxprob\" needs --checkpoint");
    }
    let (triples, stats) = prepare_corpus(
        corpus,
        &vocab,
        &cfg.stage1(),
        &cfg.stage2(),
        cfg.seed,
        provider_ref,
        cfg.exec()?,
    )?;
    let (t, v, s) = (out_path(cfg, "triples.jsonl")?, out_path(cfg, "vocab.txt")?, out_path(cfg, "prepare_stats.json")?);
    write_triples(&t, &triples)?;
    vocab.save(&v)?;
    let summary = json!({
        "documents": stats.documents,
        "kept": stats.kept,
        "skipped_short": stats.skipped_short,
        "mask_ratio": stats.mask_ratio(),
        "lambda_mean": stats.lambda_mean(),
        "lambda_histogram": stats.lambda_histogram,
    });
    fs::write(&s, serde_json::to_string_pretty(&summary)? + "\n")?;
    eprintln!("prepared {} of {} documents", stats.kept, stats.documents);
    finish(manifest, cfg, vec![t, v, s])
}

/// Runs `epochs` shuffled passes of `train_step`, logging one line per epoch.
fn train_loop<T: Clone>(
    cfg: &RunConfig,
    model: &mut TinyModel,
    items: &[T],
    to_batch: impl Fn(&[T]) -> Batch<'_>,
) -> Result<Vec<String>> {
    if items.is_empty() {
        bail!("no training examples");
    }
    if cfg.batch_size == 0 {
        bail!("batch_size must be at least 1");
    }
    let steps_per_epoch = items.len().div_ceil(cfg.batch_size);
    let tcfg = cfg.train_config(steps_per_epoch);
    tcfg.validate()?;
    let exec = cfg.exec()?;
    let mut state = TrainState::new(model, &tcfg);
    let mut log = vec!["epoch\tsteps\tmean_loss\tlr".to_string()];
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::derived(cfg.seed, (1 << 40) | epoch as u64));
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<T> = chunk.iter().map(|&i| items[i].clone()).collect();
            total += train_step(model, &mut state, &tcfg, to_batch(&batch), exec)?.loss;
            steps += 1;
        }
        let line = format!(
            "{}\t{}\t{:.6}\t{:.3e}",
            epoch + 1,
            state.step,
            total / steps as f64,
            state.lr(&tcfg)
        );
        eprintln!("{line}\t{:.1}s", start.elapsed().as_secs_f64());
        log.push(line);
    }
    Ok(log)
}

pub fn pretrain(cfg: &RunConfig, data: &Path, vocab_path: &Path, init: Option<&Path>) -> Result<()> {
    let mut inputs = vec![data, vocab_path];
    inputs.extend(init);
    let manifest = Manifest::new("pretrain", cfg, &inputs)?;
    let vocab = Vocab::load(vocab_path)?;
    let triples = read_triples(data)?;
    for t in &triples {
        vocab.check(&t.x)?;
        vocab.check(&t.y)?;
    }
    let mut model = match init {
        Some(p) => load_checkpoint(p)?.model,
        None => TinyModel::new(cfg.model_config(vocab.len()), cfg.seed)?,
    };
    let log = train_loop(cfg, &mut model, &triples, |b| Batch::Pretrain(b))?;
    let (ck, lg) = (out_path(cfg, "pretrain.ckpt")?, out_path(cfg, "pretrain_log.tsv")?);
    checkpoint::save(&ck, &model, &checkpoint_extra(cfg, &vocab, "pretrain"))?;
    write_text(&lg, log)?;
    finish(manifest, cfg, vec![ck, lg])
}

pub fn finetune(cfg: &RunConfig, src: &Path, tgt: &Path, init: Option<&Path>) -> Result<()> {
    let mut inputs = vec![src, tgt];
    inputs.extend(init);
    let manifest = Manifest::new("finetune", cfg, &inputs)?;
    let (sources, targets) = (read_lines(src)?, read_lines(tgt)?);
    if sources.len() != targets.len() {
        bail!("{} sources but {} targets", sources.len(), targets.len());
    }
    let (mut model, vocab) = match init {
        Some(p) => {
            let l = load_checkpoint(p)?;
            (l.model, l.vocab)
        }
        None => {
            let vocab = Vocab::from_texts(cfg.num_spans, sources.iter().chain(&targets).map(String::as_str));
            (TinyModel::new(cfg.model_config(vocab.len()), cfg.seed)?, vocab)
        }
    };
    let pairs: Vec<Pair> = sources
        .iter()
        .zip(&targets)
        .map(|(s, t)| (vocab.tokenize(s), vocab.tokenize(t)))
        .collect();
    let log = train_loop(cfg, &mut model, &pairs, |b| Batch::Finetune(b))?;
    let (ck, lg) = (out_path(cfg, "model.ckpt")?, out_path(cfg, "finetune_log.tsv")?);
    checkpoint::save(&ck, &model, &checkpoint_extra(cfg, &vocab, "finetune"))?;
    write_text(&lg, log)?;
    finish(manifest, cfg, vec![ck, lg])
}

/// A sequence file: words through `vocab` when there is one, else token ids.
fn read_sequences(path: &Path, vocab: Option<&Vocab>) -> Result<Vec<TokenSeq>> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, line)| match vocab {
            Some(v) => Ok(v.tokenize(line)),
            None => line
                .split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<Result<Vec<_>, _>>()
                .map(TokenSeq)
                .with_context(|| format!("{}:{}: expected token ids", path.display(), i + 1)),
        })
        .collect()
}

fn train_lm(cfg: &RunConfig, path: &Path, vocab: Option<&Vocab>, vocab_size: usize) -> Result<NgramLm> {
    let corpus: Vec<Vec<u32>> = read_sequences(path, vocab)?.iter().map(|s| wrap_target(s)).collect();
    Ok(train_ngram_lm(&corpus, cfg.lm_order, vocab_size, cfg.lm_add_k)?)
}

pub struct DecodeArgs<'a> {
    pub checkpoint: Option<&'a Path>,
    pub dags: Option<&'a Path>,
    pub input: Option<&'a Path>,
    pub vocab: Option<&'a Path>,
    pub lm_data: Option<&'a Path>,
}

pub fn decode(cfg: &RunConfig, args: &DecodeArgs<'_>) -> Result<()> {
    let inputs: Vec<&Path> = [args.checkpoint, args.dags, args.input, args.vocab, args.lm_data]
        .into_iter()
        .flatten()
        .collect();
    let manifest = Manifest::new("decode", cfg, &inputs)?;
    let decoder = cfg.decoder();
    let hyp_path = out_path(cfg, "hyps.txt")?;
    let mut outputs = vec![hyp_path.clone()];
    match (args.checkpoint, args.dags) {
        (Some(ck), None) => {
            let input = args.input.context("decoding from a checkpoint needs --input")?;
            let l = load_checkpoint(ck)?;
            let xs = read_sequences(input, Some(&l.vocab))?;
            let lm = args
                .lm_data
                .map(|p| train_lm(cfg, p, Some(&l.vocab), l.vocab.len()))
                .transpose()?;
            let lambda = if cfg.decode_lambda > 0.0 { cfg.decode_lambda } else { l.lambda };
            let (ys, stats) = run_pipeline(&xs, &l.model, lambda, l.loss, &decoder, lm.as_ref(), &cfg.pipeline())?;
            write_text(&hyp_path, ys.iter().map(|y| l.vocab.detokenize(y)))?;
            let sp = out_path(cfg, "decode_stats.json")?;
            let summary = json!({
                "sentences": ys.len(),
                "throughput": stats.throughput,
                "mean_latency_ms": stats.mean_latency_ms(),
                "a_busy": stats.a_busy,
                "b_busy": stats.b_busy,
                "max_queue": stats.max_queue,
            });
            fs::write(&sp, serde_json::to_string_pretty(&summary)? + "\n")?;
            outputs.push(sp);
        }
        (None, Some(dag_file)) => {
            let dags: Vec<DagParams> = load_dags(dag_file)?;
            let vocab = args.vocab.map(Vocab::load).transpose()?;
            let vsize = dags.first().map_or(0, DagParams::vocab_size);
            let lm = args
                .lm_data
                .map(|p| train_lm(cfg, p, vocab.as_ref(), vsize))
                .transpose()?;
            let out = decoder.decode_batch(&dags, lm.as_ref(), cfg.exec()?)?;
            write_text(
                &hyp_path,
                out.iter().map(|d| match &vocab {
                    Some(v) => v.detokenize(&unwrap_output(&d.tokens)),
                    None => d.tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
                }),
            )?;
        }
        _ => bail!("pass exactly one of --checkpoint or --dags"),
    }
    finish(manifest, cfg, outputs)
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest::new("benchmark", cfg, &[])?;
    let report = benchmark(
        &cfg.workload(),
        &cfg.bench_batch_sizes,
        &[Mode::Vanilla, Mode::Overlapped],
        cfg.b_workers,
        cfg.queue_capacity,
        cfg.bench_reps,
    )?;
    let (tsv, csv) = (out_path(cfg, "benchmark.tsv")?, out_path(cfg, "benchmark.csv")?);
    fs::write(&tsv, report.to_tsv())?;
    fs::write(&csv, report.to_csv())?;
    print!("{}", report.to_tsv());
    finish(manifest, cfg, vec![tsv, csv])
}

fn words(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

pub fn eval(cfg: &RunConfig, hyps_path: &Path, refs_path: &Path, l2r: Option<&Path>, r2l: Option<&Path>) -> Result<()> {
    let mut inputs = vec![hyps_path, refs_path];
    inputs.extend(l2r);
    inputs.extend(r2l);
    let manifest = Manifest::new("eval", cfg, &inputs)?;
    let hyps: Vec<Vec<String>> = read_lines(hyps_path)?.iter().map(|l| words(l)).collect();
    let ref_lines = read_lines(refs_path)?;
    if hyps.len() != ref_lines.len() {
        bail!("{} hypotheses but {} references", hyps.len(), ref_lines.len());
    }
    // A reference line may list several valid outputs separated by tabs; each
    // hypothesis is scored against the one it matches, else the first.
    let refs: Vec<Vec<String>> = hyps
        .iter()
        .zip(&ref_lines)
        .map(|(h, line)| {
            let alts: Vec<Vec<String>> = line.split('\t').map(words).collect();
            alts.iter().find(|r| *r == h).unwrap_or(&alts[0]).clone()
        })
        .collect();
    let mut rows = vec![("bleu".to_string(), corpus_bleu(&hyps, &refs, cfg.bleu_order)?)];
    rows.push((
        "exact_match".into(),
        dagnat_core::metrics::exact_match(&hyps, &refs)?,
    ));
    for &n in &cfg.distinct_orders {
        rows.push((format!("distinct_{n}"), distinct_n(&hyps, n)));
    }
    let profile = acc_profile(&hyps, &refs, &equal_buckets(cfg.acc_buckets))?;
    let (mt, at) = (out_path(cfg, "metrics.tsv")?, out_path(cfg, "acc_profile.tsv")?);
    let table: Vec<String> = std::iter::once("metric\tvalue".to_string())
        .chain(rows.iter().map(|(k, v)| format!("{k}\t{v:.4}")))
        .collect();
    for line in &table {
        println!("{line}");
    }
    write_text(&mt, table)?;
    fs::write(&at, profile.to_tsv())?;
    let mut outputs = vec![mt, at];
    if let (Some(a), Some(b)) = (l2r, r2l) {
        let read = |p: &Path| -> Result<AccProfile> { Ok(AccProfile::from_tsv(&fs::read_to_string(p)?)?) };
        let delta = delta_acc(&profile, &read(a)?, &read(b)?)?;
        let dp = out_path(cfg, "delta_acc.tsv")?;
        fs::write(&dp, delta.to_tsv())?;
        outputs.push(dp);
    }
    finish(manifest, cfg, outputs)
}
