//! Declarative run manifest (TOML): model, training, decoding, output, the
//! tasks, and the variants of an experiment matrix.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataSource, SubsampleStage, TaskKind, TaskSpec};
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::model::{ClsHeadSpec, ModelConfig};
use crate::text::DEFAULT_MAX_LEN;
use crate::trainer::TrainConfig;

/// Architecture settings; the vocabulary size and heads come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        Self {
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_enc_layers: d.n_enc_layers,
            n_dec_layers: d.n_dec_layers,
            d_ff: d.d_ff,
            max_len: d.max_len,
            dropout: d.dropout,
        }
    }
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize, cls_heads: Vec<ClsHeadSpec>) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
            cls_heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    /// Tokens seen fewer times in the training splits map to UNK.
    pub min_count: usize,
}

impl Default for TextSection {
    fn default() -> Self {
        Self { min_count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "runs".into() }
    }
}

/// One `[[task]]` entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default = "one")]
    pub subsample: f64,
    #[serde(default)]
    pub subsample_stage: SubsampleStage,
    #[serde(default)]
    pub subsample_seed: u64,
}

fn one() -> f64 {
    1.0
}

/// One `[[variant]]`: a task subset with optional weight overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantEntry {
    pub name: String,
    /// Task names; empty means every task.
    #[serde(default)]
    pub tasks: Vec<String>,
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub text: TextSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: BeamConfig,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(rename = "task", default)]
    pub tasks: Vec<TaskEntry>,
    #[serde(rename = "variant", default)]
    pub variants: Vec<VariantEntry>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A variant with its weights resolved against the task list.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    /// Trained task names with their λ, in manifest order.
    pub weights: Vec<(String, f64)>,
}

impl RunManifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut m: RunManifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.base_dir = base_dir.into();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    /// The resolved settings as TOML, defaults filled in.
    pub fn echo(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with every path made absolute, so its echo works from anywhere.
    pub fn with_absolute_paths(&self) -> Self {
        let mut m = self.clone();
        for t in &mut m.tasks {
            for p in [&mut t.data, &mut t.train, &mut t.valid, &mut t.test]
                .into_iter()
                .flatten()
            {
                *p = self.resolve(p);
            }
        }
        m.output.dir = self.output_dir();
        m
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decode.validate()?;
        if self.model.max_len > DEFAULT_MAX_LEN {
            return Err(Error::Config(format!(
                "model.max_len {} exceeds {DEFAULT_MAX_LEN}",
                self.model.max_len
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("the manifest lists no [[task]]".into()));
        }
        let generation = self.tasks.iter().filter(|t| t.kind == TaskKind::Generation).count();
        if generation != 1 {
            return Err(Error::Config(format!(
                "exactly one generation task is required, found {generation}"
            )));
        }
        for spec in self.task_specs()? {
            spec.validate()?;
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("task `{}` declared twice", t.name)));
            }
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].iter().any(|o| o.name == v.name) {
                return Err(Error::Config(format!("variant `{}` declared twice", v.name)));
            }
            self.resolve_variant(v)?;
        }
        Ok(())
    }

    /// Task specs with paths resolved; fails on missing files.
    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        self.tasks.iter().map(|t| self.task_spec(t)).collect()
    }

    fn task_spec(&self, t: &TaskEntry) -> Result<TaskSpec> {
        let exists = |p: &Path| -> Result<PathBuf> {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::Config(format!(
                    "task `{}`: data file {} does not exist",
                    t.name,
                    full.display()
                )));
            }
            Ok(full)
        };
        let source = match (&t.data, &t.train, &t.valid, &t.test) {
            (Some(d), None, None, None) => DataSource::Single {
                data: exists(d)?,
                split_seed: t.split_seed,
            },
            (None, Some(tr), Some(va), Some(te)) => DataSource::Split {
                train: exists(tr)?,
                valid: exists(va)?,
                test: exists(te)?,
            },
            _ => {
                return Err(Error::Config(format!(
                    "task `{}` needs either `data` or all of `train`, `valid`, `test`",
                    t.name
                )))
            }
        };
        Ok(TaskSpec {
            name: t.name.clone(),
            kind: t.kind,
            labels: t.labels.clone(),
            weight: t.weight,
            source,
            subsample_fraction: t.subsample,
            subsample_stage: t.subsample_stage,
            subsample_seed: t.subsample_seed,
        })
    }

    /// Classification heads for every classification task, in manifest order.
    pub fn cls_heads(&self) -> Vec<ClsHeadSpec> {
        self.tasks
            .iter()
            .filter(|t| t.kind == TaskKind::Classification)
            .map(|t| ClsHeadSpec::new(&t.name, t.labels.len()))
            .collect()
    }

    pub fn resolve_variant(&self, v: &VariantEntry) -> Result<Variant> {
        let fail = |m: String| Err(Error::Config(format!("variant `{}`: {m}", v.name)));
        for name in v.tasks.iter().chain(v.weights.keys()) {
            if !self.tasks.iter().any(|t| t.name == *name) {
                return fail(format!("unknown task `{name}`"));
            }
        }
        for name in v.weights.keys() {
            if !v.tasks.is_empty() && !v.tasks.contains(name) {
                return fail(format!("weight given for `{name}`, which the variant does not train"));
            }
        }
        let mut weights = Vec::new();
        for t in &self.tasks {
            if !v.tasks.is_empty() && !v.tasks.contains(&t.name) {
                continue;
            }
            let w = v.weights.get(&t.name).copied().unwrap_or(t.weight);
            if !(0.0..=1.0).contains(&w) {
                return fail(format!("weight {w} for `{}` outside [0, 1]", t.name));
            }
            if t.kind == TaskKind::Generation && w != 1.0 {
                return fail("the generation weight is fixed at 1".into());
            }
            weights.push((t.name.clone(), w));
        }
        if !weights.iter().any(|(n, _)| {
            self.tasks
                .iter()
                .any(|t| t.name == *n && t.kind == TaskKind::Generation)
        }) {
            return fail("every variant must train the generation task".into());
        }
        Ok(Variant {
            name: v.name.clone(),
            weights,
        })
    }

    /// The default variant: every task at its declared weight.
    pub fn full_variant(&self) -> Variant {
        Variant {
            name: "all".into(),
            weights: self.tasks.iter().map(|t| (t.name.clone(), t.weight)).collect(),
        }
    }
}
