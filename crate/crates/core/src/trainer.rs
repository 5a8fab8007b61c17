//! Multi-task training: every epoch the mini-batches of all tasks are pooled
//! and shuffled, and each batch updates the shared model with its own
//! λ-weighted loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Examples, TaskKind};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Model};
use crate::numerics::{AdamConfig, AdamW, Gradients, Graph};
use crate::text::{pad_batch, shift_right, PaddedBatch, SeqRole, TokenSeq, Vocab, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 64,
            seed: 0,
            label_smoothing: 0.1,
            grad_clip: 1.0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!(
                "grad_clip {} must be non-negative",
                self.grad_clip
            )));
        }
        self.optimizer.validate()
    }
}

/// Token-encoded examples of one task.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoded {
    Generation(Vec<(TokenSeq, TokenSeq)>),
    /// Utterance and label index.
    Classification(Vec<(TokenSeq, usize)>),
}

impl Encoded {
    pub fn len(&self) -> usize {
        match self {
            Encoded::Generation(v) => v.len(),
            Encoded::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> TaskKind {
        match self {
            Encoded::Generation(_) => TaskKind::Generation,
            Encoded::Classification(_) => TaskKind::Classification,
        }
    }

    /// Batch of the examples at `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        match self {
            Encoded::Generation(v) => {
                let utts: Vec<TokenSeq> = idx.iter().map(|&i| v[i].0.clone()).collect();
                let resps: Vec<TokenSeq> = idx.iter().map(|&i| v[i].1.clone()).collect();
                let shifted = resps.iter().map(shift_right).collect::<Result<Vec<_>>>()?;
                Ok(Batch::Generation {
                    enc: pad_batch(&utts)?,
                    dec: pad_batch(&shifted)?,
                    targets: pad_batch(&resps)?.ids,
                })
            }
            Encoded::Classification(v) => {
                let utts: Vec<TokenSeq> = idx.iter().map(|&i| v[i].0.clone()).collect();
                Ok(Batch::Classification {
                    enc: pad_batch(&utts)?,
                    labels: idx.iter().map(|&i| v[i].1).collect(),
                })
            }
        }
    }
}

/// Encodes a task's examples; classification labels become indices into
/// `labels`.
pub fn encode_examples(ex: &Examples, vocab: &Vocab, max_len: usize, labels: &[String]) -> Result<Encoded> {
    match ex {
        Examples::Generation(v) => v
            .iter()
            .map(|e| {
                Ok((
                    vocab.encode(&e.utterance, max_len)?,
                    vocab.encode(&e.response, max_len)?.with_role(SeqRole::Response),
                ))
            })
            .collect::<Result<_>>()
            .map(Encoded::Generation),
        Examples::Classification(v) => v
            .iter()
            .map(|e| {
                let label = labels
                    .iter()
                    .position(|l| *l == e.label)
                    .ok_or_else(|| Error::Data(format!("label {:?} not in the task's label set", e.label)))?;
                Ok((vocab.encode(&e.text, max_len)?, label))
            })
            .collect::<Result<_>>()
            .map(Encoded::Classification),
    }
}

/// Padded model inputs for one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Generation {
        enc: PaddedBatch,
        dec: PaddedBatch,
        /// Gold response ids, padded with PAD (the ignore index).
        targets: Vec<u32>,
    },
    Classification {
        enc: PaddedBatch,
        labels: Vec<usize>,
    },
}

/// One task as the trainer sees it.
#[derive(Debug, Clone)]
pub struct TrainTask {
    pub name: String,
    pub weight: f64,
    pub train: Encoded,
    pub valid: Encoded,
}

impl TrainTask {
    pub fn kind(&self) -> TaskKind {
        self.train.kind()
    }

    pub fn num_batches(&self, batch_size: usize) -> usize {
        self.train.len().div_ceil(batch_size)
    }
}

/// A reference to one mini-batch of one task's training split.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BatchTicket {
    pub task: String,
    pub batch_index: usize,
}

/// Mixes two words into one seed (splitmix64 finalizer).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a << 6)
        .wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, used so per-task seeds depend on the task's name rather than its
/// position in a list.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Pools every batch of every task for one epoch and shuffles the pool with
/// a seed derived from `(seed, epoch)`.
pub fn build_schedule(tasks: &[(String, usize)], epoch: usize, seed: u64) -> Result<Vec<BatchTicket>> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to schedule".into()));
    }
    let mut pool = Vec::new();
    for (name, batches) in tasks {
        if *batches == 0 {
            return Err(Error::Data(format!("task `{name}` has no training batches")));
        }
        pool.extend((0..*batches).map(|b| BatchTicket {
            task: name.clone(),
            batch_index: b,
        }));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64)));
    Ok(pool)
}

/// Example indices of every batch of a task for one epoch.
pub fn epoch_batches(task: &str, len: usize, batch_size: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let task_seed = mix_seed(mix_seed(seed, name_hash(task)), epoch as u64);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(task_seed));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Unweighted task loss of `batch` and the gradient of `weight · loss`.
pub fn loss_and_gradients(
    model: &Model,
    task: &str,
    batch: &Batch,
    label_smoothing: f64,
    weight: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(model.params());
    let loss = match batch {
        Batch::Generation { enc, dec, targets } => {
            let logits = model.forward_generation(&mut g, enc, dec, dropout_rng)?;
            g.label_smoothed_nll(logits, targets, label_smoothing, PAD)?
        }
        Batch::Classification { enc, labels } => {
            let logits = model.forward_classification(&mut g, enc, task, dropout_rng)?;
            g.classification_nll(logits, labels)?
        }
    };
    let value = g.value(loss)[0];
    let grads = g.backward_scaled(loss, weight)?;
    Ok((value, grads))
}

/// Mean unweighted loss of a task's batch without dropout or gradients.
pub fn eval_loss(model: &Model, task: &str, batch: &Batch, label_smoothing: f64) -> Result<f64> {
    let mut g = Graph::new(model.params());
    let loss = match batch {
        Batch::Generation { enc, dec, targets } => {
            let logits = model.forward_generation(&mut g, enc, dec, None)?;
            g.label_smoothed_nll(logits, targets, label_smoothing, PAD)?
        }
        Batch::Classification { enc, labels } => {
            let logits = model.forward_classification(&mut g, enc, task, None)?;
            g.classification_nll(logits, labels)?
        }
    };
    Ok(g.value(loss)[0])
}

/// Outcome of one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub task: String,
    pub batch_index: usize,
    pub loss: f64,
    pub weight: f64,
}

/// One optimizer update for `ticket`'s batch: backpropagates `λ · loss`,
/// clips, steps and zeroes gradients. A zero weight leaves the model and
/// optimizer untouched. The returned loss is unweighted.
#[allow(clippy::too_many_arguments)]
pub fn step(
    model: &mut Model,
    optimizer: &mut AdamW,
    task: &TrainTask,
    batch: &Batch,
    cfg: &TrainConfig,
    epoch: usize,
    batch_index: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(model, &task.name, batch, cfg.label_smoothing, task.weight, dropout_rng)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            task: task.name.clone(),
            epoch,
            batch: batch_index,
            value: loss,
        });
    }
    if task.weight == 0.0 {
        return Ok(loss);
    }
    let params = model.params_mut();
    params.accumulate(&grads)?;
    // Heads of other tasks are off this loss's path: their gradient is zero.
    params.fill_missing_grads();
    if cfg.grad_clip > 0.0 {
        let norm = params.grad_norm();
        if norm > cfg.grad_clip {
            params.scale_grads(cfg.grad_clip / norm);
        }
    }
    let result = optimizer.step(params);
    params.zero_grad();
    result.map(|_| loss)
}

/// Per-epoch training and validation figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean unweighted training loss per task over the epoch's batches.
    pub train_loss: BTreeMap<String, f64>,
    /// Unweighted validation loss per task (plain NLL for generation).
    pub valid_loss: BTreeMap<String, f64>,
    /// Validation accuracy per classification task.
    pub valid_accuracy: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub best_epoch: Option<usize>,
}

/// Where and how training writes checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointSink<'a> {
    pub dir: PathBuf,
    pub vocab: &'a Vocab,
}

impl CheckpointSink<'_> {
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest generation validation loss.
    pub best: Model,
    pub report: LossReport,
}

fn validate_tasks(tasks: &[TrainTask], model: &Model) -> Result<()> {
    let generation = tasks.iter().filter(|t| t.kind() == TaskKind::Generation).count();
    if generation != 1 {
        return Err(Error::Config(format!(
            "a training plan needs exactly one generation task, found {generation}"
        )));
    }
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].iter().any(|o| o.name == t.name) {
            return Err(Error::Config(format!("task `{}` listed twice", t.name)));
        }
        if !(0.0..=1.0).contains(&t.weight) {
            return Err(Error::Config(format!(
                "task `{}` weight {} outside [0, 1]",
                t.name, t.weight
            )));
        }
        if t.train.kind() != t.valid.kind() {
            return Err(Error::Config(format!("task `{}` mixes example kinds", t.name)));
        }
        if t.kind() == TaskKind::Classification && model.head_param_ids(&t.name).is_none() {
            return Err(Error::UnknownTask {
                name: t.name.clone(),
                registered: model.head_names(),
            });
        }
        if t.train.is_empty() || t.valid.is_empty() {
            return Err(Error::Data(format!(
                "task `{}` has an empty train or valid split",
                t.name
            )));
        }
    }
    Ok(())
}

/// Validation loss (and accuracy for classification) of one task.
pub fn validate_task(model: &Model, task: &TrainTask, batch_size: usize) -> Result<(f64, Option<f64>)> {
    let n = task.valid.len();
    let mut weighted = 0.0;
    let mut denom = 0.0;
    let mut correct = 0usize;
    for chunk in (0..n).collect::<Vec<_>>().chunks(batch_size) {
        let batch = task.valid.batch(chunk)?;
        match &batch {
            Batch::Generation { targets, .. } => {
                let count = targets.iter().filter(|&&t| t != PAD).count() as f64;
                weighted += eval_loss(model, &task.name, &batch, 0.0)? * count;
                denom += count;
            }
            Batch::Classification { enc, labels } => {
                let mut g = Graph::new(model.params());
                let logits = model.forward_classification(&mut g, enc, &task.name, None)?;
                let c = g.shape(logits)[1];
                for (row, &label) in g.value(logits).chunks(c).zip(labels) {
                    correct += (argmax(row) == label) as usize;
                }
                let loss = g.classification_nll(logits, labels)?;
                weighted += g.value(loss)[0] * labels.len() as f64;
                denom += labels.len() as f64;
            }
        }
    }
    let accuracy = (task.kind() == TaskKind::Classification).then(|| correct as f64 / n as f64);
    Ok((weighted / denom, accuracy))
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Runs `cfg.epochs` epochs. Tasks with zero weight cannot change the model
/// and are left out of the schedule altogether.
pub fn train(
    model: &mut Model,
    tasks: &[TrainTask],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink<'_>>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    validate_tasks(tasks, model)?;
    let active: Vec<&TrainTask> = tasks.iter().filter(|t| t.weight > 0.0).collect();
    let by_name: BTreeMap<&str, &TrainTask> = active.iter().map(|t| (t.name.as_str(), *t)).collect();
    let counts: Vec<(String, usize)> = active
        .iter()
        .map(|t| (t.name.clone(), t.num_batches(cfg.batch_size)))
        .collect();
    let mut optimizer = AdamW::new(cfg.optimizer, model.params());
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, name_hash("dropout")));
    let mut report = LossReport::default();
    let mut best: Option<(f64, Model)> = None;
    let mut step_no = 0;
    for epoch in 0..cfg.epochs {
        let schedule = build_schedule(&counts, epoch, cfg.seed)?;
        let batches: BTreeMap<&str, Vec<Vec<usize>>> = active
            .iter()
            .map(|t| {
                (
                    t.name.as_str(),
                    epoch_batches(&t.name, t.train.len(), cfg.batch_size, epoch, cfg.seed),
                )
            })
            .collect();
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for ticket in &schedule {
            let task = by_name[ticket.task.as_str()];
            let batch = task.train.batch(&batches[ticket.task.as_str()][ticket.batch_index])?;
            let loss = step(
                model,
                &mut optimizer,
                task,
                &batch,
                cfg,
                epoch,
                ticket.batch_index,
                Some(&mut dropout_rng),
            )?;
            log(&format!(
                "epoch={epoch} step={step_no} task={} batch={} loss={loss:.6} weight={}",
                task.name, ticket.batch_index, task.weight
            ));
            let entry = sums.entry(task.name.clone()).or_insert((0.0, 0));
            entry.0 += loss;
            entry.1 += 1;
            report.steps.push(StepRecord {
                epoch,
                step: step_no,
                task: task.name.clone(),
                batch_index: ticket.batch_index,
                loss,
                weight: task.weight,
            });
            step_no += 1;
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            valid_loss: BTreeMap::new(),
            valid_accuracy: BTreeMap::new(),
        };
        let mut gen_valid = f64::INFINITY;
        for task in tasks {
            let (loss, acc) = validate_task(model, task, cfg.batch_size)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    task: task.name.clone(),
                    epoch,
                    batch: 0,
                    value: loss,
                });
            }
            if task.kind() == TaskKind::Generation {
                gen_valid = loss;
            }
            record.valid_loss.insert(task.name.clone(), loss);
            if let Some(a) = acc {
                record.valid_accuracy.insert(task.name.clone(), a);
            }
        }
        let summary: Vec<String> = record
            .valid_loss
            .iter()
            .map(|(k, v)| match record.valid_accuracy.get(k) {
                Some(a) => format!("{k}={v:.4}/acc={a:.4}"),
                None => format!("{k}={v:.4}"),
            })
            .collect();
        log(&format!("epoch={epoch} valid {}", summary.join(" ")));
        let improved = best.as_ref().is_none_or(|(b, _)| gen_valid < *b);
        if improved {
            best = Some((gen_valid, model.clone()));
            report.best_epoch = Some(epoch);
        }
        if let Some(sink) = sink {
            save_checkpoint(sink.last(), model, sink.vocab)?;
            if improved {
                save_checkpoint(sink.best(), model, sink.vocab)?;
            }
        }
        report.epochs.push(record);
    }
    let best = best.map(|(_, m)| m).expect("at least one epoch");
    Ok(TrainOutcome { best, report })
}

/// Convenience for callers holding a path.
pub fn checkpoint_sink<'a>(dir: &Path, vocab: &'a Vocab) -> Result<CheckpointSink<'a>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(CheckpointSink {
        dir: dir.to_path_buf(),
        vocab,
    })
}
