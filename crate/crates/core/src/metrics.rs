//! Automatic evaluation: corpus BLEU-4, distinct-n, average length, token
//! accuracy, and classification accuracy / macro-F1.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

fn ngrams(tokens: &[String], n: usize) -> impl Iterator<Item = &[String]> {
    tokens.windows(n.max(1)).filter(move |_| tokens.len() >= n)
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Corpus-level BLEU-4 in [0, 100] with one reference per hypothesis.
///
/// Modified precisions are clipped by reference counts and pooled over the
/// corpus. An order with no matches uses `1 / (2·c)` instead of 0, where `c`
/// is the number of candidate n-grams of that order (at least 1). The brevity
/// penalty `exp(1 − r/c)` applies when the hypotheses are shorter in total.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("BLEU of an empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        let (h, rf) = (tokenize(h), tokenize(rf));
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let ref_counts = counts(&rf, n);
            for (g, k) in counts(&h, n) {
                matched[n - 1] += k.min(ref_counts.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let log_mean = (0..4)
        .map(|i| {
            let p = if matched[i] == 0 {
                1.0 / (2.0 * total[i].max(1) as f64)
            } else {
                matched[i] as f64 / total[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * log_mean.exp())
}

/// Unique n-grams over total n-grams across the whole corpus.
pub fn distinct_n(hypotheses: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("distinct-n needs n ≥ 1".into()));
    }
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("distinct-n of an empty corpus".into()));
    }
    let toks: Vec<Vec<String>> = hypotheses.iter().map(|h| tokenize(h)).collect();
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for t in &toks {
        for g in ngrams(t, n) {
            unique.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(format!("no sentence has {n} tokens")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Mean number of whitespace-separated words.
pub fn avg_len(hypotheses: &[String]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("average length of an empty corpus".into()));
    }
    let words: usize = hypotheses.iter().map(|h| h.split_whitespace().count()).sum();
    Ok(words as f64 / hypotheses.len() as f64)
}

/// Position-wise token agreement pooled over the corpus: matches divided by
/// the longer of each hypothesis/reference pair.
pub fn token_accuracy(hypotheses: &[String], references: &[String]) -> Result<f64> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "token accuracy over {} hypotheses and {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let (mut hit, mut denom) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (tokenize(h), tokenize(r));
        hit += h.iter().zip(&r).filter(|(a, b)| a == b).count();
        denom += h.len().max(r.len());
    }
    Ok(if denom == 0 { 1.0 } else { hit as f64 / denom as f64 })
}

/// Accuracy and macro-F1; a label's F1 is 0 when its precision and recall
/// are both 0.
pub fn classification_scores<S: AsRef<str>>(pred: &[S], gold: &[S], labels: &[S]) -> Result<(f64, f64)> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    if pred.is_empty() || labels.is_empty() {
        return Err(Error::InvalidArgument("scores of an empty label list".into()));
    }
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_ref(), i)).collect();
    let lookup = |s: &S| {
        index
            .get(s.as_ref())
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("label {:?} not in the label set", s.as_ref())))
    };
    let k = labels.len();
    let (mut tp, mut fp, mut fnn) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let mut correct = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (lookup(p)?, lookup(g)?);
        if p == g {
            tp[p] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fnn[g] += 1;
        }
    }
    let f1_sum: f64 = (0..k)
        .map(|i| {
            let denom = 2 * tp[i] + fp[i] + fnn[i];
            if tp[i] == 0 {
                0.0
            } else {
                2.0 * tp[i] as f64 / denom as f64
            }
        })
        .sum();
    Ok((correct as f64 / pred.len() as f64, f1_sum / k as f64))
}

/// Generation-side figures, shaped like the automatic-evaluation columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub bleu: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub avg_len: f64,
    pub token_accuracy: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub task: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub n_examples: usize,
}

/// Everything measured in one evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub generation: Option<GenerationScores>,
    pub classification: Vec<ClassificationScores>,
}

pub fn generation_scores(hypotheses: &[String], references: &[String]) -> Result<GenerationScores> {
    // distinct-2 is undefined when no response has two words; report 0.
    let distinct = |n| match distinct_n(hypotheses, n) {
        Ok(v) => Ok(v),
        Err(_) if !hypotheses.is_empty() => Ok(0.0),
        Err(e) => Err(e),
    };
    Ok(GenerationScores {
        bleu: bleu(hypotheses, references)?,
        distinct1: distinct(1)?,
        distinct2: distinct(2)?,
        avg_len: avg_len(hypotheses)?,
        token_accuracy: token_accuracy(hypotheses, references)?,
        n_examples: hypotheses.len(),
    })
}
