//! `mtdial`: synthesize data, split it, train, generate, evaluate, and run
//! experiment matrices from one manifest.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use mtdial_core::data::synth::{gen_synthetic, SynthKind};
use mtdial_core::data::{load_tsv, split_examples};
use mtdial_core::decoding::{generate_file, BeamConfig};
use mtdial_core::experiment::{self, classify, run_matrix, run_variant, variant_dir, write_echo};
use mtdial_core::metrics::{classification_scores, generation_scores, ClassificationScores, MetricsReport};
use mtdial_core::model::load_checkpoint;
use mtdial_core::trainer::{mix_seed, name_hash};
use mtdial_core::{Error, ErrorKind, RunManifest, TaskKind};

const THREADS_ENV: &str = "MTDIAL_THREADS";

#[derive(Parser)]
#[command(
    name = "mtdial",
    version,
    about = "Multi-task response generation with emotion heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Generation,
    Classification,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic corpora (full file plus an 8:1:1 split per task).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of utterance/response pairs.
        #[arg(long, default_value_t = 2000)]
        size: usize,
        /// Examples per classification task.
        #[arg(long, default_value_t = 1000)]
        cls_size: usize,
        /// Tasks to write, among R, E2, E6, E12.
        #[arg(long, value_delimiter = ',', default_value = "R,E6,E2,E12")]
        tasks: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split one TSV file 8:1:1 into <prefix>.{train,valid,test}.tsv.
    Splits {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Label set for classification files.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        prefix: PathBuf,
    },
    /// Train one variant (default: every task at its manifest weight).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Decode one response per input line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 5)]
        beams: usize,
        #[arg(long, default_value_t = 3)]
        no_repeat_ngram: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 1.0)]
        length_penalty: f64,
    },
    /// Predict one label per input line with a classification head.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Label names, one per line, in head order; indices are written
        /// without it.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score responses and/or predicted labels; writes a JSON report.
    Evaluate {
        #[arg(long, requires = "reference")]
        hyp: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Predicted labels: one per line, or the last tab field of each line.
        #[arg(long, requires_all = ["gold", "labels"])]
        pred: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Label set, one per line.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train and evaluate every [[variant]] of the manifest.
    Matrix {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Usage) => 2,
        Some(ErrorKind::Config) => 3,
        Some(ErrorKind::Data) => 4,
        Some(ErrorKind::Numeric) => 5,
        Some(ErrorKind::Io) => 6,
        None => 1,
    }
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a count")))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(1),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

fn lines(path: &Path) -> anyhow::Result<Vec<String>> {
    Ok(read(path)?
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

fn last_field(line: &str) -> String {
    line.rsplit('\t').next().unwrap_or(line).trim().to_string()
}

fn synth(seed: u64, size: usize, cls_size: usize, tasks: &[String], out: &Path) -> anyhow::Result<()> {
    for name in tasks {
        let kind = SynthKind::parse(name).ok_or_else(|| Error::Config(format!("unknown synthetic task `{name}`")))?;
        let n = if kind == SynthKind::Generation { size } else { cls_size };
        let task_seed = mix_seed(seed, name_hash(&name.to_ascii_uppercase()));
        let ex = gen_synthetic(kind, n, task_seed)?;
        let stem = name.to_ascii_lowercase();
        write(&out.join(format!("{stem}.tsv")), &ex.to_tsv())?;
        let (train, valid, test) = split_examples(ex, seed)?;
        for (split, part) in [("train", train), ("valid", valid), ("test", test)] {
            write(&out.join(format!("{stem}.{split}.tsv")), &part.to_tsv())?;
        }
        eprintln!("wrote {} {name} examples to {}", n, out.display());
    }
    Ok(())
}

fn splits(input: &Path, kind: Kind, labels: &[String], seed: u64, prefix: &Path) -> anyhow::Result<()> {
    let kind = match kind {
        Kind::Generation => TaskKind::Generation,
        Kind::Classification => TaskKind::Classification,
    };
    let ex = load_tsv(input, kind, labels)?;
    let (train, valid, test) = split_examples(ex, seed)?;
    for (split, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
        let mut path = prefix.as_os_str().to_owned();
        path.push(format!(".{split}.tsv"));
        write(Path::new(&path), &part.to_tsv())?;
    }
    eprintln!("split into {}/{}/{}", train.len(), valid.len(), test.len());
    Ok(())
}

fn train(config: &Path, variant: Option<&str>) -> anyhow::Result<()> {
    let m = RunManifest::load(config)?;
    let v = match variant {
        None => m.full_variant(),
        Some(name) => {
            let entry = m
                .variants
                .iter()
                .find(|v| v.name == name)
                .ok_or_else(|| Error::Config(format!("no variant named `{name}`")))?;
            m.resolve_variant(entry)?
        }
    };
    let root = m.output_dir();
    write_echo(&m, &root)?;
    let p = experiment::prepare(&m)?;
    let dir = variant_dir(&root, &v.name);
    let progress = |line: &str| eprintln!("{line}");
    let (result, _, _) = run_variant(&m, &p, &v, &dir, &progress)?;
    eprintln!(
        "trained `{}`; best epoch {}; outputs in {}",
        result.name,
        result.best_epoch,
        dir.display()
    );
    Ok(())
}

fn evaluate(
    hyp: Option<&Path>,
    reference: Option<&Path>,
    pred: Option<&Path>,
    gold: Option<&Path>,
    labels: Option<&Path>,
    output: &Path,
) -> anyhow::Result<()> {
    let mut report = MetricsReport::default();
    if let (Some(h), Some(r)) = (hyp, reference) {
        report.generation = Some(generation_scores(&lines(h)?, &lines(r)?)?);
    }
    if let (Some(p), Some(g), Some(l)) = (pred, gold, labels) {
        let pred: Vec<String> = lines(p)?.iter().map(|l| last_field(l)).collect();
        let gold: Vec<String> = lines(g)?.iter().map(|l| last_field(l)).collect();
        let labels: Vec<String> = lines(l)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
        let (accuracy, macro_f1) = classification_scores(&pred, &gold, &labels)?;
        report.classification.push(ClassificationScores {
            task: g
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            accuracy,
            macro_f1,
            n_examples: pred.len(),
        });
    }
    if report.generation.is_none() && report.classification.is_empty() {
        bail!(Error::InvalidArgument(
            "nothing to evaluate: pass --hyp/--ref and/or --pred/--gold/--labels".into()
        ));
    }
    write(output, &serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            size,
            cls_size,
            tasks,
            out,
        } => synth(seed, size, cls_size, &tasks, &out),
        Command::Splits {
            input,
            kind,
            labels,
            seed,
            prefix,
        } => splits(&input, kind, &labels, seed, &prefix),
        Command::Train { config, variant } => train(&config, variant.as_deref()),
        Command::Generate {
            checkpoint,
            input,
            output,
            beams,
            no_repeat_ngram,
            max_len,
            length_penalty,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = BeamConfig {
                beam_width: beams,
                max_len,
                no_repeat_ngram,
                length_penalty,
            };
            let n = generate_file(&ck.model, &ck.vocab, &input, &output, &cfg)?;
            eprintln!("wrote {n} responses to {}", output.display());
            Ok(())
        }
        Command::Classify {
            checkpoint,
            task,
            input,
            output,
            labels,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let head = ck
                .model
                .config()
                .head(&task)
                .ok_or_else(|| Error::UnknownTask {
                    name: task.clone(),
                    registered: ck.model.head_names(),
                })?
                .clone();
            let texts = lines(&input)?;
            let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
            let names = match &labels {
                Some(path) => {
                    let names: Vec<String> = lines(path)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
                    if names.len() != head.num_labels {
                        bail!(Error::Config(format!(
                            "{} labels given for a head with {} classes",
                            names.len(),
                            head.num_labels
                        )));
                    }
                    Some(names)
                }
                None => None,
            };
            let pred = classify(&ck.model, &ck.vocab, &task, &texts, 32)?;
            let mut out = String::new();
            for p in pred {
                match &names {
                    Some(n) => out.push_str(&n[p]),
                    None => out.push_str(&p.to_string()),
                }
                out.push('\n');
            }
            write(&output, &out)?;
            eprintln!("wrote {} predictions to {}", texts.len(), output.display());
            Ok(())
        }
        Command::Evaluate {
            hyp,
            reference,
            pred,
            gold,
            labels,
            output,
        } => evaluate(
            hyp.as_deref(),
            reference.as_deref(),
            pred.as_deref(),
            gold.as_deref(),
            labels.as_deref(),
            &output,
        ),
        Command::Matrix { config } => {
            let m = RunManifest::load(&config)?;
            let progress = |line: &str| eprintln!("{line}");
            let report = run_matrix(&m, threads()?, &progress)?;
            eprint!("{}", report.to_table());
            eprintln!("report written to {}", m.output_dir().join("matrix.tsv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
