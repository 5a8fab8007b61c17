//! Beam search and greedy decoding with repeated-n-gram blocking.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderMemory, Model};
use crate::text::{TokenId, TokenSeq, Vocab, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Longest hypothesis, counting the leading BOS.
    pub max_len: usize,
    /// Forbid any n-gram of this size from occurring twice; 0 disables.
    pub no_repeat_ngram: usize,
    /// Per-token probability factor α: scores are `log p + len·ln α`, so
    /// α = 1 ranks by raw log-probability.
    pub length_penalty: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_len: crate::text::DEFAULT_MAX_LEN,
            no_repeat_ngram: 3,
            length_penalty: 1.0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("decoding max_len must be at least 2".into()));
        }
        if !(self.length_penalty > 0.0 && self.length_penalty.is_finite()) {
            return Err(Error::Config(format!(
                "length_penalty {} must be positive",
                self.length_penalty
            )));
        }
        Ok(())
    }

    fn score(&self, log_prob: f64, generated: usize) -> f64 {
        if self.length_penalty == 1.0 {
            log_prob
        } else {
            log_prob + generated as f64 * self.length_penalty.ln()
        }
    }
}

/// Anything that can score the next token after a batch of prefixes.
pub trait Scorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary for each prefix; every prefix
    /// starts with BOS. `-inf` marks tokens that may not be produced.
    fn next_log_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>>;
}

/// Scores continuations of one utterance with a trained model. PAD and BOS
/// are never produced.
pub struct ModelScorer<'m> {
    model: &'m Model,
    memory: EncoderMemory,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, utterance: &TokenSeq) -> Result<Self> {
        Ok(Self {
            model,
            memory: model.encoder_memory(utterance)?,
        })
    }
}

impl Scorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_log_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
        let mut out = self.model.next_token_log_probs(&self.memory, prefixes)?;
        for row in &mut out {
            row[PAD as usize] = f64::NEG_INFINITY;
            row[BOS as usize] = f64::NEG_INFINITY;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Token ids starting with BOS.
    pub ids: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without BOS and the terminating EOS.
    pub fn tokens(&self) -> &[TokenId] {
        let body = &self.ids[1..];
        body.strip_suffix(&[EOS]).unwrap_or(body)
    }
}

/// Whether appending `next` to `ids` would repeat an n-gram already in
/// `ids`.
pub fn repeats_ngram(ids: &[TokenId], next: TokenId, n: usize) -> bool {
    if n == 0 || ids.len() + 1 < n {
        return false;
    }
    if n == 1 {
        return ids.contains(&next);
    }
    let tail = &ids[ids.len() + 1 - n..];
    ids.windows(n).any(|w| w[..n - 1] == *tail && w[n - 1] == next)
}

struct Candidate {
    score: f64,
    log_prob: f64,
    token: TokenId,
    beam: usize,
}

/// Beam search from BOS.
///
/// Each step expands every live hypothesis over the vocabulary, drops
/// candidates that would repeat an n-gram, and keeps the `beam_width` best by
/// score (ties: lower token id, then lower beam index). Candidates ending in
/// EOS or reaching `max_len` are finished and leave the beam. Search stops
/// when no live hypothesis can still beat the best finished one.
pub fn beam_search(scorer: &dyn Scorer, cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let vocab = scorer.vocab_size();
    let mut live = vec![Hypothesis {
        ids: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<(f64, Hypothesis)> = Vec::new();
    // Extensions never raise a score when α ≤ 1.
    let monotone = cfg.length_penalty <= 1.0;
    while !live.is_empty() {
        let prefixes: Vec<&[TokenId]> = live.iter().map(|h| h.ids.as_slice()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        if lps.len() != live.len() || lps.iter().any(|r| r.len() != vocab) {
            return Err(Error::Shape("scorer returned a malformed distribution".into()));
        }
        let mut cands = Vec::new();
        for (beam, (hyp, row)) in live.iter().zip(&lps).enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                let tok = tok as TokenId;
                if lp == f64::NEG_INFINITY || repeats_ngram(&hyp.ids, tok, cfg.no_repeat_ngram) {
                    continue;
                }
                if lp.is_nan() || lp > 1e-9 {
                    return Err(Error::NumericDomain(format!("invalid log-probability {lp}")));
                }
                let log_prob = hyp.log_prob + lp.min(0.0);
                cands.push(Candidate {
                    score: cfg.score(log_prob, hyp.ids.len()),
                    log_prob,
                    token: tok,
                    beam,
                });
            }
        }
        if cands.is_empty() {
            // Every continuation is blocked: the live hypotheses end here.
            for h in live.drain(..) {
                let s = cfg.score(h.log_prob, h.ids.len() - 1);
                finished.push((s, Hypothesis { finished: true, ..h }));
            }
            break;
        }
        cands.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then(a.token.cmp(&b.token))
                .then(a.beam.cmp(&b.beam))
        });
        cands.truncate(cfg.beam_width);
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            let mut ids = live[c.beam].ids.clone();
            ids.push(c.token);
            let done = c.token == EOS || ids.len() >= cfg.max_len;
            let hyp = Hypothesis {
                ids,
                log_prob: c.log_prob,
                finished: done,
            };
            if done {
                finished.push((c.score, hyp));
            } else {
                next.push((c.score, hyp));
            }
        }
        let best_finished = finished.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        let best_live = next.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        live = next.into_iter().map(|(_, h)| h).collect();
        if monotone && !finished.is_empty() && best_live <= best_finished {
            break;
        }
    }
    // First-found wins among equal scores.
    let mut best: Option<(f64, Hypothesis)> = None;
    for (s, h) in finished {
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, h));
        }
    }
    Ok(best.map(|(_, h)| h).expect("search always finishes a hypothesis"))
}

/// Repeatedly takes the highest-scoring allowed token (lowest id on ties).
pub fn greedy(scorer: &dyn Scorer, cfg: &BeamConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut hyp = Hypothesis {
        ids: vec![BOS],
        log_prob: 0.0,
        finished: false,
    };
    while !hyp.finished {
        let row = scorer.next_log_probs(&[&hyp.ids])?.remove(0);
        let mut pick: Option<(TokenId, f64)> = None;
        for (tok, &lp) in row.iter().enumerate() {
            let tok = tok as TokenId;
            if lp == f64::NEG_INFINITY || repeats_ngram(&hyp.ids, tok, cfg.no_repeat_ngram) {
                continue;
            }
            if pick.is_none_or(|(_, b)| lp > b) {
                pick = Some((tok, lp));
            }
        }
        match pick {
            None => hyp.finished = true,
            Some((tok, lp)) => {
                hyp.ids.push(tok);
                hyp.log_prob += lp.min(0.0);
                hyp.finished = tok == EOS || hyp.ids.len() >= cfg.max_len;
            }
        }
    }
    Ok(hyp)
}

/// Decoding settings capped to what the model can represent.
fn capped(model: &Model, cfg: &BeamConfig) -> BeamConfig {
    BeamConfig {
        max_len: cfg.max_len.min(model.config().max_len),
        ..*cfg
    }
}

/// Decodes one utterance to text.
pub fn generate(model: &Model, vocab: &Vocab, utterance: &str, cfg: &BeamConfig) -> Result<String> {
    let seq = vocab.encode(utterance, model.config().max_len)?;
    let scorer = ModelScorer::new(model, &seq)?;
    let hyp = beam_search(&scorer, &capped(model, cfg))?;
    Ok(vocab.detokenize(hyp.tokens()))
}

/// Decodes every line of `input` into the matching line of `output`.
/// Returns the number of responses written.
pub fn generate_file(
    model: &Model,
    vocab: &Vocab,
    input: impl AsRef<Path>,
    output: impl AsRef<Path>,
    cfg: &BeamConfig,
) -> Result<usize> {
    let (input, output) = (input.as_ref(), output.as_ref());
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let mut out = String::new();
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let reply = generate(model, vocab, line, cfg).map_err(|e| Error::DataLine {
            path: input.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let _ = writeln!(out, "{reply}");
        n += 1;
    }
    std::fs::write(output, out).map_err(|e| Error::io(output, e))?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token table keyed by prefix length.
    struct Table(Vec<Vec<f64>>);

    impl Scorer for Table {
        fn vocab_size(&self) -> usize {
            self.0[0].len()
        }
        fn next_log_probs(&self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| self.0[(p.len() - 1).min(self.0.len() - 1)].clone())
                .collect())
        }
    }

    fn probs(p: &[f64]) -> Vec<f64> {
        p.iter()
            .map(|v| if *v == 0.0 { f64::NEG_INFINITY } else { v.ln() })
            .collect()
    }

    #[test]
    fn ngram_blocking() {
        assert!(repeats_ngram(&[1, 4, 5, 4], 5, 2));
        assert!(!repeats_ngram(&[1, 4, 5, 4], 6, 2));
        assert!(repeats_ngram(&[1, 4, 5, 6, 4, 5], 6, 3));
        assert!(!repeats_ngram(&[1, 4, 5], 6, 3));
        assert!(!repeats_ngram(&[1, 4], 4, 0));
        assert!(repeats_ngram(&[1, 4], 4, 1));
    }

    #[test]
    fn stops_at_eos() {
        let t = Table(vec![probs(&[0.0, 0.0, 0.3, 0.7]), probs(&[0.0, 0.0, 0.9, 0.1])]);
        let cfg = BeamConfig {
            beam_width: 2,
            max_len: 6,
            no_repeat_ngram: 0,
            ..BeamConfig::default()
        };
        let h = beam_search(&t, &cfg).unwrap();
        assert_eq!(h.ids, [BOS, 3, EOS]);
        assert!(h.finished);
        assert!((h.log_prob - (0.7f64 * 0.9).ln()).abs() < 1e-12);
        assert_eq!(greedy(&t, &cfg).unwrap().ids, [BOS, 3, EOS]);
    }

    #[test]
    fn max_len_finishes_hypotheses() {
        let t = Table(vec![probs(&[0.0, 0.0, 0.1, 0.9])]);
        let cfg = BeamConfig {
            beam_width: 3,
            max_len: 4,
            no_repeat_ngram: 0,
            ..BeamConfig::default()
        };
        let h = beam_search(&t, &cfg).unwrap();
        assert_eq!(h.ids, [BOS, 3, 3, 3]);
        assert!(h.finished);
        // with unigram blocking, 3 then EOS (0.09) loses to EOS alone (0.1)
        let h = beam_search(
            &t,
            &BeamConfig {
                no_repeat_ngram: 1,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(h.ids, [BOS, EOS]);
    }

    #[test]
    fn zero_width_is_rejected() {
        let t = Table(vec![probs(&[0.0, 0.0, 1.0])]);
        let cfg = BeamConfig {
            beam_width: 0,
            ..BeamConfig::default()
        };
        assert!(matches!(beam_search(&t, &cfg), Err(Error::Config(_))));
    }
}
