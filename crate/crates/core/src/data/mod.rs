//! Task datasets: TSV ingestion, seeded 8:1:1 splits, subsampling and the
//! synthetic stand-in corpora.

pub mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{gen_synthetic, SynthKind, E12_LABELS, E2_LABELS, E6_LABELS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationExample {
    pub utterance: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationExample {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Generation,
    Classification,
}

/// Examples of one kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Examples {
    Generation(Vec<GenerationExample>),
    Classification(Vec<ClassificationExample>),
}

impl Examples {
    pub fn kind(&self) -> TaskKind {
        match self {
            Examples::Generation(_) => TaskKind::Generation,
            Examples::Classification(_) => TaskKind::Classification,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Examples::Generation(v) => v.len(),
            Examples::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_generation(&self) -> Option<&[GenerationExample]> {
        match self {
            Examples::Generation(v) => Some(v),
            Examples::Classification(_) => None,
        }
    }

    pub fn as_classification(&self) -> Option<&[ClassificationExample]> {
        match self {
            Examples::Classification(v) => Some(v),
            Examples::Generation(_) => None,
        }
    }

    /// The examples at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Examples::Generation(v) => Examples::Generation(idx.iter().map(|&i| v[i].clone()).collect()),
            Examples::Classification(v) => Examples::Classification(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    /// Tab-separated text, one example per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        match self {
            Examples::Generation(v) => v.iter().for_each(|e| {
                let _ = writeln!(out, "{}\t{}", e.utterance, e.response);
            }),
            Examples::Classification(v) => v.iter().for_each(|e| {
                let _ = writeln!(out, "{}\t{}", e.text, e.label);
            }),
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(f) = self
            .fields()
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .find(|f| f.contains(['\t', '\n', '\r']))
        {
            return Err(Error::Data(format!("field {f:?} cannot be stored as TSV")));
        }
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    fn fields(&self) -> Vec<(&str, &str)> {
        match self {
            Examples::Generation(v) => v.iter().map(|e| (e.utterance.as_str(), e.response.as_str())).collect(),
            Examples::Classification(v) => v.iter().map(|e| (e.text.as_str(), e.label.as_str())).collect(),
        }
    }
}

/// Parses TSV text. `labels` is required for classification data and every
/// label must belong to it. Blank lines are skipped.
pub fn parse_tsv(text: &str, origin: &str, kind: TaskKind, labels: &[String]) -> Result<Examples> {
    let err = |line: usize, message: String| Error::DataLine {
        path: origin.to_string(),
        line,
        message,
    };
    let mut gen = Vec::new();
    let mut cls = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (a, b) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => return Err(err(line_no, "expected exactly two tab-separated fields".into())),
        };
        match kind {
            TaskKind::Generation => {
                if a.trim().is_empty() {
                    return Err(err(line_no, "empty utterance".into()));
                }
                if b.trim().is_empty() {
                    return Err(err(line_no, "empty response".into()));
                }
                gen.push(GenerationExample {
                    utterance: a.to_string(),
                    response: b.to_string(),
                });
            }
            TaskKind::Classification => {
                if a.trim().is_empty() {
                    return Err(err(line_no, "empty text".into()));
                }
                if !labels.iter().any(|l| l == b) {
                    return Err(err(
                        line_no,
                        format!("unknown label {b:?}; expected one of [{}]", labels.join(", ")),
                    ));
                }
                cls.push(ClassificationExample {
                    text: a.to_string(),
                    label: b.to_string(),
                });
            }
        }
    }
    Ok(match kind {
        TaskKind::Generation => Examples::Generation(gen),
        TaskKind::Classification => Examples::Classification(cls),
    })
}

pub fn load_tsv(path: impl AsRef<Path>, kind: TaskKind, labels: &[String]) -> Result<Examples> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, &path.display().to_string(), kind, labels)
}

/// Sizes of an 8:1:1 split: floor for train, the remainder halved, any odd
/// leftover going to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let rest = n - train;
    let valid = rest / 2;
    (train, valid, rest - valid)
}

/// Seeded shuffle, then an 8:1:1 partition.
pub fn split_811<T>(mut examples: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if examples.len() < 10 {
        return Err(Error::Data(format!(
            "splitting needs at least 10 examples, got {}",
            examples.len()
        )));
    }
    let (train, valid, _) = split_sizes(examples.len());
    examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = examples.split_off(train);
    let mut valid_part = rest;
    let test = valid_part.split_off(valid);
    Ok((examples, valid_part, test))
}

/// Uniform sample without replacement of `round(fraction·n)` items, kept
/// in their original order.
pub fn subsample<T>(examples: Vec<T>, fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let n = examples.len();
    let k = (fraction * n as f64).round() as usize;
    if k == n {
        return Ok(examples);
    }
    let mut keep = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
    keep.sort_unstable();
    let mut keep = keep.into_iter().peekable();
    Ok(examples
        .into_iter()
        .enumerate()
        .filter_map(|(i, e)| {
            if keep.peek() == Some(&i) {
                keep.next();
                Some(e)
            } else {
                None
            }
        })
        .collect())
}

/// When subsampling happens relative to splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsampleStage {
    /// Before splitting: the whole corpus shrinks.
    #[default]
    Total,
    /// After splitting: only the training split shrinks.
    Train,
}

/// Where a task's examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    /// One file, split 8:1:1 with `split_seed`.
    Single { data: PathBuf, split_seed: u64 },
    /// Pre-split files.
    Split {
        train: PathBuf,
        valid: PathBuf,
        test: PathBuf,
    },
}

/// One trainable task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    /// Ordered label set; empty for generation.
    pub labels: Vec<String>,
    /// Loss weight λ in [0, 1]; generation is fixed at 1.
    pub weight: f64,
    pub source: DataSource,
    pub subsample_fraction: f64,
    pub subsample_stage: SubsampleStage,
    pub subsample_seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("task `{}`: {m}", self.name)));
        if self.name.is_empty() {
            return Err(Error::Config("task with an empty name".into()));
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return fail(format!("weight {} outside [0, 1]", self.weight));
        }
        match self.kind {
            TaskKind::Generation => {
                if self.weight != 1.0 {
                    return fail("the generation weight is fixed at 1".into());
                }
                if !self.labels.is_empty() {
                    return fail("generation tasks take no labels".into());
                }
            }
            TaskKind::Classification => {
                if self.labels.len() < 2 {
                    return fail("classification needs at least two labels".into());
                }
                for (i, l) in self.labels.iter().enumerate() {
                    if self.labels[..i].contains(l) {
                        return fail(format!("duplicate label {l:?}"));
                    }
                    if l.is_empty() || l.contains(['\t', '\n']) {
                        return fail(format!("invalid label {l:?}"));
                    }
                }
            }
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return fail(format!("subsample fraction {} outside (0, 1]", self.subsample_fraction));
        }
        Ok(())
    }
}

/// Train/valid/test examples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Examples,
    pub valid: Examples,
    pub test: Examples,
}

/// Loads, splits and subsamples a task according to its spec.
pub fn load_task(spec: &TaskSpec) -> Result<TaskData> {
    spec.validate()?;
    let frac = spec.subsample_fraction;
    let (train, valid, test) = match &spec.source {
        DataSource::Single { data, split_seed } => {
            let mut all = load_tsv(data, spec.kind, &spec.labels)?;
            if spec.subsample_stage == SubsampleStage::Total {
                all = subsample_examples(all, frac, spec.subsample_seed)?;
            }
            split_examples(all, *split_seed)?
        }
        DataSource::Split { train, valid, test } => {
            let load = |p: &PathBuf| load_tsv(p, spec.kind, &spec.labels);
            let (mut tr, mut va, mut te) = (load(train)?, load(valid)?, load(test)?);
            if spec.subsample_stage == SubsampleStage::Total {
                tr = subsample_examples(tr, frac, spec.subsample_seed)?;
                va = subsample_examples(va, frac, spec.subsample_seed.wrapping_add(1))?;
                te = subsample_examples(te, frac, spec.subsample_seed.wrapping_add(2))?;
            }
            (tr, va, te)
        }
    };
    let train = if spec.subsample_stage == SubsampleStage::Train {
        subsample_examples(train, frac, spec.subsample_seed)?
    } else {
        train
    };
    for (split, ex) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if ex.is_empty() {
            return Err(Error::Data(format!("task `{}` has an empty {split} split", spec.name)));
        }
    }
    Ok(TaskData { train, valid, test })
}

pub fn subsample_examples(ex: Examples, fraction: f64, seed: u64) -> Result<Examples> {
    let keep = subsample((0..ex.len()).collect(), fraction, seed)?;
    Ok(ex.select(&keep))
}

pub fn split_examples(ex: Examples, seed: u64) -> Result<(Examples, Examples, Examples)> {
    let (tr, va, te) = split_811((0..ex.len()).collect(), seed)?;
    Ok((ex.select(&tr), ex.select(&va), ex.select(&te)))
}
