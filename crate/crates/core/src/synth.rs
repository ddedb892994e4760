//! Synthetic paired-text tasks: copy, reverse, and a two-rendering task where
//! one source word has two equally valid translations.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Copy,
    Reverse,
    MultimodalLexical,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "multimodal-lexical" => Ok(Task::MultimodalLexical),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (copy|reverse|multimodal-lexical)"
            ))),
        }
    }
}

pub const COPY_VOCAB: usize = 20;
pub const MIN_LEN: usize = 3;
pub const MAX_LEN: usize = 8;

/// Word that triggers the two-way choice, and its two renderings.
pub const TRIGGER: &str = "big";
pub const RENDERINGS: [[&str; 2]; 2] = [["very", "large"], ["quite", "huge"]];
pub const CONTENT_WORDS: usize = 16;
pub const MULTIMODAL_MAX_CONTENT: usize = 5;

/// One generated example. `targets[0]` is the training target; every entry
/// is a valid output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthPair {
    pub source: Vec<String>,
    pub targets: Vec<Vec<String>>,
}

fn word(i: usize) -> String {
    format!("w{i}")
}

/// Words drawn without replacement, so outputs never repeat a token.
fn distinct_words(r: &mut rng::Rng, pool: usize, len: usize) -> Vec<String> {
    let mut ids: Vec<usize> = (0..pool).collect();
    ids.shuffle(r);
    ids[..len].iter().map(|&i| word(i)).collect()
}

/// `size` pairs of `task`. The multimodal task lists every source twice, once
/// with each rendering as the training target, so both modes are in the data.
/// Sources never repeat otherwise.
pub fn generate(task: Task, size: usize, seed: u64) -> Vec<SynthPair> {
    let mut r = rng::seeded(seed);
    if task == Task::MultimodalLexical {
        let mut seen = std::collections::HashSet::new();
        let mut pairs = Vec::with_capacity(size + 1);
        while pairs.len() < size {
            let p = multimodal(&mut r);
            if !seen.insert(p.source.clone()) {
                continue;
            }
            let mut flipped = p.clone();
            flipped.targets.reverse();
            pairs.push(p);
            pairs.push(flipped);
        }
        pairs.shuffle(&mut r);
        pairs.truncate(size);
        return pairs;
    }
    (0..size)
        .map(|_| {
            let len = r.gen_range(MIN_LEN..=MAX_LEN);
            let source: Vec<String> = (0..len).map(|_| word(r.gen_range(0..COPY_VOCAB))).collect();
            let mut target = source.clone();
            if task == Task::Reverse {
                target.reverse();
            }
            SynthPair {
                source,
                targets: vec![target],
            }
        })
        .collect()
}

fn multimodal(r: &mut rng::Rng) -> SynthPair {
    let len = r.gen_range(2..=MULTIMODAL_MAX_CONTENT);
    let mut source = distinct_words(r, CONTENT_WORDS, len);
    let at = r.gen_range(0..=len);
    source.insert(at, TRIGGER.to_string());
    let render = |k: usize| -> Vec<String> {
        let mut t = source[..at].to_vec();
        t.extend(RENDERINGS[k].iter().map(|w| w.to_string()));
        t.extend_from_slice(&source[at + 1..]);
        t
    };
    SynthPair {
        targets: vec![render(0), render(1)],
        source,
    }
}

/// Output files of [`write_pairs`].
#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Every valid target of a line, tab-separated.
    pub references: PathBuf,
}

pub fn write_pairs(dir: &Path, prefix: &str, pairs: &[SynthPair]) -> Result<SynthFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SynthFiles {
        source: dir.join(format!("{prefix}.src")),
        target: dir.join(format!("{prefix}.tgt")),
        references: dir.join(format!("{prefix}.refs")),
    };
    let write = |path: &Path, lines: &mut dyn Iterator<Item = String>| -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for line in lines {
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    };
    write(&files.source, &mut pairs.iter().map(|p| p.source.join(" ")))?;
    write(&files.target, &mut pairs.iter().map(|p| p.targets[0].join(" ")))?;
    write(
        &files.references,
        &mut pairs.iter().map(|p| {
            p.targets
                .iter()
                .map(|t| t.join(" "))
                .collect::<Vec<_>>()
                .join("\t")
        }),
    )?;
    Ok(files)
}

/// Reads a file of one sequence per line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}
