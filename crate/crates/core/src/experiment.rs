//! End-to-end runs: load the manifest's data once, then train and evaluate
//! each variant on the shared vocabulary, initialization and test splits.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_task, Examples, TaskData, TaskKind, TaskSpec};
use crate::decoding::generate;
use crate::error::{Error, Result};
use crate::manifest::{RunManifest, Variant};
use crate::metrics::{classification_scores, generation_scores, ClassificationScores, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::numerics::Graph;
use crate::text::{pad_batch, Vocab};
use crate::trainer::{argmax, checkpoint_sink, encode_examples, train, LossReport, TrainTask};

/// Data shared by every variant of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub specs: Vec<TaskSpec>,
    pub data: Vec<TaskData>,
    pub vocab: Vocab,
    pub model_config: ModelConfig,
}

/// Loads and splits every task and builds the vocabulary from the training
/// splits.
pub fn prepare(m: &RunManifest) -> Result<Prepared> {
    let specs = m.task_specs()?;
    let data = specs.iter().map(load_task).collect::<Result<Vec<_>>>()?;
    let mut corpus: Vec<&str> = Vec::new();
    for d in &data {
        match &d.train {
            Examples::Generation(v) => v
                .iter()
                .for_each(|e| corpus.extend([e.utterance.as_str(), e.response.as_str()])),
            Examples::Classification(v) => corpus.extend(v.iter().map(|e| e.text.as_str())),
        }
    }
    let vocab = Vocab::build(corpus, m.text.min_count)?;
    let model_config = m.model.config(vocab.len(), m.cls_heads());
    model_config.validate()?;
    Ok(Prepared {
        specs,
        data,
        vocab,
        model_config,
    })
}

impl Prepared {
    fn generation_index(&self) -> usize {
        self.specs
            .iter()
            .position(|s| s.kind == TaskKind::Generation)
            .expect("validated manifest has a generation task")
    }

    /// Encoded train/valid splits of the variant's tasks with its weights.
    pub fn train_tasks(&self, variant: &Variant) -> Result<Vec<TrainTask>> {
        let max_len = self.model_config.max_len;
        variant
            .weights
            .iter()
            .map(|(name, w)| {
                let i = self
                    .specs
                    .iter()
                    .position(|s| s.name == *name)
                    .ok_or_else(|| Error::Config(format!("unknown task `{name}`")))?;
                let labels = &self.specs[i].labels;
                Ok(TrainTask {
                    name: name.clone(),
                    weight: *w,
                    train: encode_examples(&self.data[i].train, &self.vocab, max_len, labels)?,
                    valid: encode_examples(&self.data[i].valid, &self.vocab, max_len, labels)?,
                })
            })
            .collect()
    }
}

/// Predicted label indices for `texts` under `task`'s head.
pub fn classify(model: &Model, vocab: &Vocab, task: &str, texts: &[&str], batch_size: usize) -> Result<Vec<usize>> {
    let max_len = model.config().max_len;
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(batch_size.max(1)) {
        let seqs = chunk
            .iter()
            .map(|t| vocab.encode(t, max_len))
            .collect::<Result<Vec<_>>>()?;
        let enc = pad_batch(&seqs)?;
        let mut g = Graph::new(model.params());
        let logits = model.forward_classification(&mut g, &enc, task, None)?;
        let c = g.shape(logits)[1];
        out.extend(g.value(logits).chunks(c).map(argmax));
    }
    Ok(out)
}

/// Test-split metrics for the generation task and every classification head.
/// Also returns the generated responses.
pub fn evaluate(m: &RunManifest, p: &Prepared, model: &Model) -> Result<(MetricsReport, Vec<String>)> {
    let gen = p.data[p.generation_index()]
        .test
        .as_generation()
        .expect("generation split");
    let hyps = gen
        .iter()
        .map(|e| generate(model, &p.vocab, &e.utterance, &m.decode))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<String> = gen.iter().map(|e| e.response.clone()).collect();
    let mut report = MetricsReport {
        generation: Some(generation_scores(&hyps, &refs)?),
        classification: Vec::new(),
    };
    for (spec, data) in p.specs.iter().zip(&p.data) {
        let Some(test) = data.test.as_classification() else {
            continue;
        };
        let texts: Vec<&str> = test.iter().map(|e| e.text.as_str()).collect();
        let pred = classify(model, &p.vocab, &spec.name, &texts, m.train.batch_size)?;
        let pred: Vec<&str> = pred.iter().map(|&i| spec.labels[i].as_str()).collect();
        let gold: Vec<&str> = test.iter().map(|e| e.label.as_str()).collect();
        let labels: Vec<&str> = spec.labels.iter().map(String::as_str).collect();
        let (accuracy, macro_f1) = classification_scores(&pred, &gold, &labels)?;
        report.classification.push(ClassificationScores {
            task: spec.name.clone(),
            accuracy,
            macro_f1,
            n_examples: test.len(),
        });
    }
    Ok((report, hyps))
}

/// Outcome of one trained and evaluated variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub weights: Vec<(String, f64)>,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))
}

/// Trains one variant from the shared initialization, writing checkpoints,
/// the step log, per-epoch losses, responses and metrics into `dir`.
pub fn run_variant(
    m: &RunManifest,
    p: &Prepared,
    variant: &Variant,
    dir: &Path,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<(VariantResult, Model, LossReport)> {
    let sink = checkpoint_sink(dir, &p.vocab)?;
    let tasks = p.train_tasks(variant)?;
    let mut model = Model::init(p.model_config.clone(), m.train.seed)?;
    let log_path = dir.join("train.log");
    let mut log_file = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut io_error = None;
    let mut log = |line: &str| {
        if let Err(e) = writeln!(log_file, "{line}") {
            io_error.get_or_insert(e);
        }
        if line.contains(" valid ") {
            progress(&format!("[{}] {line}", variant.name));
        }
    };
    let outcome = train(&mut model, &tasks, &m.train, Some(&sink), &mut log)?;
    if let Some(e) = io_error {
        return Err(Error::io(&log_path, e));
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    write_file(&dir.join("epochs.json"), to_json(&outcome.report.epochs)?)?;
    let (metrics, hyps) = evaluate(m, p, &outcome.best)?;
    let mut text = String::new();
    hyps.iter().for_each(|h| {
        let _ = writeln!(text, "{h}");
    });
    write_file(&dir.join("hypotheses.txt"), text)?;
    write_file(&dir.join("metrics.json"), to_json(&metrics)?)?;
    let result = VariantResult {
        name: variant.name.clone(),
        weights: variant.weights.clone(),
        best_epoch: outcome.report.best_epoch.unwrap_or(0),
        metrics,
    };
    Ok((result, outcome.best, outcome.report))
}

/// Consolidated results of an experiment matrix.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<VariantResult>,
    /// Name of the variant that failed, if the matrix was aborted.
    pub failed: Option<String>,
}

impl MatrixReport {
    /// Tab-separated table: generation metrics then accuracy / F1 per head.
    pub fn to_table(&self) -> String {
        let mut out = String::from("variant\tweights\tBLEU\tdist-1\tdist-2\tavg_len\ttoken_acc");
        let heads: Vec<String> = self
            .rows
            .first()
            .map(|r| r.metrics.classification.iter().map(|c| c.task.clone()).collect())
            .unwrap_or_default();
        for h in &heads {
            let _ = write!(out, "\t{h}_acc\t{h}_F1");
        }
        out.push('\n');
        for r in &self.rows {
            let weights: Vec<String> = r.weights.iter().map(|(n, w)| format!("{n}={w}")).collect();
            let _ = write!(out, "{}\t{}", r.name, weights.join(","));
            if let Some(g) = &r.metrics.generation {
                let _ = write!(
                    out,
                    "\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.4}",
                    g.bleu,
                    100.0 * g.distinct1,
                    100.0 * g.distinct2,
                    g.avg_len,
                    g.token_accuracy
                );
            }
            for c in &r.metrics.classification {
                let _ = write!(out, "\t{:.4}\t{:.4}", c.accuracy, c.macro_f1);
            }
            out.push('\n');
        }
        out
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("matrix.json"), to_json(self)?)?;
        write_file(&dir.join("matrix.tsv"), self.to_table())
    }
}

/// Directory name for a variant's outputs.
pub fn variant_dir(root: &Path, name: &str) -> PathBuf {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    root.join(safe)
}

/// Writes the manifest echo that makes a run reproducible.
pub fn write_echo(m: &RunManifest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = format!(
        "# mtdial {} resolved manifest\n{}",
        env!("CARGO_PKG_VERSION"),
        m.with_absolute_paths().echo()?
    );
    write_file(&dir.join("manifest.resolved.toml"), text)
}

/// Trains and evaluates every variant, up to `threads` at a time. The
/// consolidated report is rewritten after each variant, so a failure keeps
/// the finished rows.
pub fn run_matrix(m: &RunManifest, threads: usize, progress: &(dyn Fn(&str) + Sync)) -> Result<MatrixReport> {
    if m.variants.is_empty() {
        return Err(Error::Config("the matrix needs at least one [[variant]]".into()));
    }
    let variants = m
        .variants
        .iter()
        .map(|v| m.resolve_variant(v))
        .collect::<Result<Vec<_>>>()?;
    let root = m.output_dir();
    write_echo(m, &root)?;
    let p = prepare(m)?;
    let mut report = MatrixReport::default();
    for wave in variants.chunks(threads.max(1)) {
        let results: Vec<Result<VariantResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|v| {
                    let (p, root) = (&p, &root);
                    s.spawn(move || run_variant(m, p, v, &variant_dir(root, &v.name), progress).map(|r| r.0))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Config("variant worker panicked".into())))
                })
                .collect()
        });
        for (v, r) in wave.iter().zip(results) {
            match r {
                Ok(row) => {
                    report.rows.push(row);
                    report.write(&root)?;
                }
                Err(e) => {
                    report.failed = Some(v.name.clone());
                    report.write(&root)?;
                    return Err(e);
                }
            }
        }
    }
    Ok(report)
}
