//! Independent oracles shared by the core tests and the acceptance suite.
//! Each check returns what it measured; callers decide the verdict.
#![allow(dead_code)]

use std::collections::BTreeMap;

use astro_float::{BigFloat, Consts, RoundingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtdial_core::decoding::{beam_search, greedy, BeamConfig, Hypothesis, ModelScorer, Scorer};
use mtdial_core::metrics::{avg_len, bleu, classification_scores, distinct_n, token_accuracy};
use mtdial_core::numerics::{
    classification_nll, label_smoothed_nll, softmax, AdamConfig, AdamW, Graph, ParamStore, Tensor,
};
use mtdial_core::text::{pad_batch, shift_right, tokenize, PaddedBatch, SeqRole, TokenId, TokenSeq, BOS, EOS, PAD};
use mtdial_core::trainer::build_schedule;
use mtdial_core::{ClsHeadSpec, Model, ModelConfig};

const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

/// 256-bit arithmetic for the loss and optimizer oracles.
pub struct Big {
    cc: Consts,
}

impl Big {
    pub fn new() -> Self {
        Self {
            cc: Consts::new().expect("constants cache"),
        }
    }

    pub fn f(&self, x: f64) -> BigFloat {
        BigFloat::from_f64(x, PREC)
    }

    pub fn to_f64(&self, x: &BigFloat) -> f64 {
        format!("{x}").parse().expect("decimal rendering")
    }

    pub fn exp(&mut self, x: &BigFloat) -> BigFloat {
        x.exp(PREC, RM, &mut self.cc)
    }

    pub fn ln(&mut self, x: &BigFloat) -> BigFloat {
        x.ln(PREC, RM, &mut self.cc)
    }

    pub fn sum(&self, xs: &[BigFloat]) -> BigFloat {
        xs.iter().fold(self.f(0.0), |a, b| a.add(b, PREC, RM))
    }

    /// Row log-softmax without max-shifting; the precision absorbs it.
    pub fn log_softmax(&mut self, row: &[f64]) -> Vec<BigFloat> {
        let xs: Vec<BigFloat> = row.iter().map(|&v| self.f(v)).collect();
        let exps: Vec<BigFloat> = xs.iter().map(|x| self.exp(x)).collect();
        let lse = self.ln(&self.sum(&exps));
        xs.iter().map(|x| x.sub(&lse, PREC, RM)).collect()
    }
}

fn random_row(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Largest absolute error of `softmax` over random rows.
pub fn softmax_max_err(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut big = Big::new();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let rows = rng.gen_range(1..4);
        let cols = rng.gen_range(1..9);
        let vals = random_row(&mut rng, rows * cols, 30.0);
        let got = softmax(&Tensor::new([rows, cols], vals.clone()).unwrap(), 1).unwrap();
        for r in 0..rows {
            let lp = big.log_softmax(&vals[r * cols..(r + 1) * cols]);
            for (c, l) in lp.iter().enumerate() {
                let p = big.exp(l);
                let want = big.to_f64(&p);
                worst = worst.max((got.values()[r * cols + c] - want).abs());
            }
        }
    }
    worst
}

/// Largest absolute error of `label_smoothed_nll` over random `[T, V]`
/// logits, smoothing levels and ignored positions.
pub fn smoothed_nll_max_err(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut big = Big::new();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let t = rng.gen_range(1..6);
        let v = rng.gen_range(2..10);
        let eps = [0.0, 0.1, rng.gen_range(0.0..0.9)][rng.gen_range(0..3)];
        let logits = random_row(&mut rng, t * v, 10.0);
        let mut targets: Vec<u32> = (0..t).map(|_| rng.gen_range(1..v as u32)).collect();
        for tg in targets.iter_mut().skip(1) {
            if rng.gen_bool(0.3) {
                *tg = 0;
            }
        }
        let got = label_smoothed_nll(&Tensor::new([t, v], logits.clone()).unwrap(), &targets, eps, 0)
            .unwrap()
            .item()
            .unwrap();
        // q = (1-ε)·onehot + ε/V ; loss = mean over kept positions of -Σ q·log p
        let mut total = big.f(0.0);
        let mut kept = 0;
        for (pos, &tg) in targets.iter().enumerate() {
            if tg == 0 {
                continue;
            }
            kept += 1;
            let lp = big.log_softmax(&logits[pos * v..(pos + 1) * v]);
            for (c, l) in lp.iter().enumerate() {
                let mut q = big.f(eps).div(&big.f(v as f64), PREC, RM);
                if c == tg as usize {
                    q = q.add(&big.f(1.0).sub(&big.f(eps), PREC, RM), PREC, RM);
                }
                total = total.sub(&q.mul(l, PREC, RM), PREC, RM);
            }
        }
        let want = big.to_f64(&total.div(&big.f(kept as f64), PREC, RM));
        worst = worst.max((got - want).abs());
    }
    worst
}

/// Largest absolute error of `classification_nll` over random logits.
pub fn class_nll_max_err(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut big = Big::new();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let c = rng.gen_range(2..13);
        let logits = random_row(&mut rng, c, 20.0);
        let label = rng.gen_range(0..c);
        let got = classification_nll(&Tensor::from_vec(logits.clone()), label)
            .unwrap()
            .item()
            .unwrap();
        let lp = big.log_softmax(&logits);
        let want = -big.to_f64(&lp[label]);
        worst = worst.max((got - want).abs());
    }
    worst
}

/// Largest absolute error of one AdamW step from a random optimizer state.
pub fn adamw_max_err(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let big = Big::new();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(1..6);
        let cfg = AdamConfig {
            learning_rate: 10f64.powf(rng.gen_range(-5.0..-1.0)),
            beta1: rng.gen_range(0.5..0.99),
            beta2: rng.gen_range(0.9..0.9999),
            epsilon: 10f64.powf(rng.gen_range(-10.0..-6.0)),
            weight_decay: [0.0, 0.01, rng.gen_range(0.0..0.1)][rng.gen_range(0..3)],
        };
        let p0 = random_row(&mut rng, n, 2.0);
        let g = random_row(&mut rng, n, 1.0);
        let m0 = random_row(&mut rng, n, 0.5);
        let v0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();
        let steps_before = rng.gen_range(0..20u64);
        let (m0, v0) = if steps_before == 0 {
            (vec![0.0; n], vec![0.0; n])
        } else {
            (m0, v0)
        };

        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_vec(p0.clone())).unwrap();
        store.get_mut(id).accumulate_grad(&g).unwrap();
        let mut opt = AdamW::new(cfg, &store);
        opt.state.step_count = steps_before;
        opt.state.first_moment[0] = m0.clone();
        opt.state.second_moment[0] = v0.clone();
        opt.step(&mut store).unwrap();

        let t = steps_before as usize + 1;
        let one = big.f(1.0);
        let (b1, b2) = (big.f(cfg.beta1), big.f(cfg.beta2));
        let bc1 = one.sub(&b1.powi(t, PREC, RM), PREC, RM);
        let bc2 = one.sub(&b2.powi(t, PREC, RM), PREC, RM);
        let lr = big.f(cfg.learning_rate);
        for k in 0..n {
            let gk = big.f(g[k]);
            let m = b1
                .mul(&big.f(m0[k]), PREC, RM)
                .add(&one.sub(&b1, PREC, RM).mul(&gk, PREC, RM), PREC, RM);
            let v = b2.mul(&big.f(v0[k]), PREC, RM).add(
                &one.sub(&b2, PREC, RM).mul(&gk.mul(&gk, PREC, RM), PREC, RM),
                PREC,
                RM,
            );
            let m_hat = m.div(&bc1, PREC, RM);
            let v_hat = v.div(&bc2, PREC, RM);
            let denom = v_hat.sqrt(PREC, RM).add(&big.f(cfg.epsilon), PREC, RM);
            let decayed = big.f(p0[k]).mul(
                &one.sub(&lr.mul(&big.f(cfg.weight_decay), PREC, RM), PREC, RM),
                PREC,
                RM,
            );
            let want = decayed.sub(&lr.mul(&m_hat.div(&denom, PREC, RM), PREC, RM), PREC, RM);
            let got = store.get(id).values()[k];
            worst = worst.max((got - big.to_f64(&want)).abs());
        }
    }
    worst
}

/// A model small enough for elementwise finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 16,
        max_len: 8,
        dropout: 0.1,
        cls_heads: vec![ClsHeadSpec::new("E6", 6), ClsHeadSpec::new("E2", 2)],
    }
}

/// Tiny model with every parameter, heads included, drawn at random so no
/// gradient path is trivially zero.
pub fn tiny_model(seed: u64) -> Model {
    let mut model = Model::init(tiny_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let scale = if model.params().name(id).contains("gamma") {
            0.2
        } else {
            0.5
        };
        for v in model.params_mut().get_mut(id).values_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    model
}

fn seq(ids: &[TokenId]) -> TokenSeq {
    let mut v = ids.to_vec();
    v.push(EOS);
    TokenSeq::new(v, SeqRole::Utterance)
}

pub struct TinyBatch {
    pub enc: PaddedBatch,
    pub dec: PaddedBatch,
    pub targets: Vec<u32>,
    pub labels: Vec<usize>,
}

/// Two utterance/response pairs of different lengths, so padding is exercised.
pub fn tiny_batch() -> TinyBatch {
    let utts = [seq(&[4, 5, 6, 7]), seq(&[8, 9])];
    let resps = [
        seq(&[10, 11, 4]).with_role(SeqRole::Response),
        seq(&[5, 6, 7, 8, 9]).with_role(SeqRole::Response),
    ];
    let shifted: Vec<TokenSeq> = resps.iter().map(|r| shift_right(r).unwrap()).collect();
    TinyBatch {
        enc: pad_batch(&utts).unwrap(),
        dec: pad_batch(&shifted).unwrap(),
        targets: pad_batch(&resps).unwrap().ids,
        labels: vec![3, 1],
    }
}

pub enum TinyLoss {
    Generation,
    Classification(&'static str),
}

pub fn tiny_loss(model: &Model, batch: &TinyBatch, loss: &TinyLoss) -> f64 {
    let mut g = Graph::new(model.params());
    let l = tiny_loss_var(model, &mut g, batch, loss);
    g.value(l)[0]
}

fn tiny_loss_var(model: &Model, g: &mut Graph, batch: &TinyBatch, loss: &TinyLoss) -> mtdial_core::numerics::Var {
    match loss {
        TinyLoss::Generation => {
            let logits = model.forward_generation(g, &batch.enc, &batch.dec, None).unwrap();
            g.label_smoothed_nll(logits, &batch.targets, 0.1, PAD).unwrap()
        }
        TinyLoss::Classification(task) => {
            let logits = model.forward_classification(g, &batch.enc, task, None).unwrap();
            g.classification_nll(logits, &batch.labels).unwrap()
        }
    }
}

/// Analytic gradient of every parameter, flattened in store order; absent
/// gradients are zeros.
pub fn tiny_gradients(model: &Model, batch: &TinyBatch, loss: &TinyLoss) -> Vec<f64> {
    let mut g = Graph::new(model.params());
    let l = tiny_loss_var(model, &mut g, batch, loss);
    let grads = g.backward(l).unwrap();
    let mut out = Vec::new();
    for (id, _, t) in model.params().iter() {
        match grads.get(id) {
            Some(gr) => out.extend_from_slice(gr),
            None => out.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    out
}

pub struct GradCheck {
    pub params: usize,
    pub within: usize,
    /// Entries where both gradients sit below [`ZERO_FLOOR`]; these count
    /// as agreeing.
    pub zeros: usize,
    /// Worst relative error among the remaining entries.
    pub worst: f64,
}

/// Below this both gradients are round-off: the key-projection biases, for
/// example, have an exactly zero true gradient because softmax ignores a
/// constant added to every score, and backprop leaves ~1e-18 residue while
/// central differences resolve nothing under ~1e-12.
pub const ZERO_FLOOR: f64 = 1e-10;

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.params as f64
    }
}

fn rel_err(a: f64, n: f64) -> Option<f64> {
    let scale = a.abs().max(n.abs());
    (scale > ZERO_FLOOR).then(|| (a - n).abs() / scale)
}

/// Central differences with step `h` against the analytic gradient, over
/// every scalar parameter.
pub fn gradient_check(model: &Model, batch: &TinyBatch, loss: &TinyLoss, h: f64, tol: f64) -> GradCheck {
    let analytic = tiny_gradients(model, batch, loss);
    let mut probe = model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    let (mut k, mut within, mut zeros, mut worst) = (0usize, 0usize, 0usize, 0.0f64);
    for id in ids {
        for i in 0..model.params().get(id).numel() {
            let orig = model.params().get(id).values()[i];
            probe.params_mut().get_mut(id).values_mut()[i] = orig + h;
            let up = tiny_loss(&probe, batch, loss);
            probe.params_mut().get_mut(id).values_mut()[i] = orig - h;
            let down = tiny_loss(&probe, batch, loss);
            probe.params_mut().get_mut(id).values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            match rel_err(analytic[k], numeric) {
                None => {
                    zeros += 1;
                    within += 1;
                }
                Some(e) => {
                    worst = worst.max(e);
                    within += (e <= tol) as usize;
                }
            }
            k += 1;
        }
    }
    GradCheck {
        params: k,
        within,
        zeros,
        worst,
    }
}

/// Sum of |grad| over the named parameters' gradients.
pub fn grad_mass(
    model: &Model,
    grads: &mtdial_core::numerics::Gradients,
    ids: &[mtdial_core::numerics::ParamId],
) -> f64 {
    let _ = model;
    ids.iter()
        .filter_map(|&id| grads.get(id))
        .flat_map(|g| g.iter())
        .map(|v| v.abs())
        .sum()
}

/// Head isolation on the tiny model: (E6-loss grad on E2 head, generation
/// grad on all heads, E6-loss grad on its own head, E6-loss grad on the
/// shared encoder). The first two must be exactly zero.
pub fn head_isolation() -> (f64, f64, f64, f64) {
    let model = tiny_model(11);
    let batch = tiny_batch();
    let e2 = model.head_param_ids("E2").unwrap();
    let e6 = model.head_param_ids("E6").unwrap();
    let shared: Vec<_> = model
        .params()
        .iter()
        .filter(|(_, n, _)| n.starts_with("encoder."))
        .map(|(id, _, _)| id)
        .collect();

    let mut g = Graph::new(model.params());
    let l = tiny_loss_var(&model, &mut g, &batch, &TinyLoss::Classification("E6"));
    let cls = g.backward(l).unwrap();
    let mut g = Graph::new(model.params());
    let l = tiny_loss_var(&model, &mut g, &batch, &TinyLoss::Generation);
    let gen = g.backward(l).unwrap();
    let heads: Vec<_> = e2.iter().chain(&e6).copied().collect();
    (
        grad_mass(&model, &cls, &e2),
        grad_mass(&model, &gen, &heads),
        grad_mass(&model, &cls, &e6),
        grad_mass(&model, &cls, &shared),
    )
}

/// Per-epoch check of the pooled schedule against each task's batch list,
/// over random task sizes. Returns (conserved, reproducible, epochs differ).
pub fn schedule_properties(cases: usize, seed: u64) -> (bool, bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut conserved, mut reproducible, mut varies) = (true, true, true);
    for _ in 0..cases {
        let n_tasks = rng.gen_range(1..5);
        let tasks: Vec<(String, usize)> = (0..n_tasks).map(|i| (format!("T{i}"), rng.gen_range(1..30))).collect();
        let s = rng.gen();
        let epoch = rng.gen_range(0..64);
        let sched = build_schedule(&tasks, epoch, s).unwrap();
        let mut got: BTreeMap<(String, usize), usize> = BTreeMap::new();
        for t in &sched {
            *got.entry((t.task.clone(), t.batch_index)).or_default() += 1;
        }
        let mut want = BTreeMap::new();
        for (name, n) in &tasks {
            for b in 0..*n {
                want.insert((name.clone(), b), 1usize);
            }
        }
        conserved &= got == want;
        reproducible &= sched == build_schedule(&tasks, epoch, s).unwrap();
        let total: usize = tasks.iter().map(|t| t.1).sum();
        if total >= 8 {
            varies &= sched != build_schedule(&tasks, epoch + 1, s).unwrap();
        }
    }
    (conserved, reproducible, varies)
}

// ---- metrics: direct counting, no hashing ----

fn grams(toks: &[String], n: usize) -> Vec<Vec<String>> {
    if toks.len() < n {
        return Vec::new();
    }
    (0..=toks.len() - n).map(|i| toks[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

pub fn brute_bleu(hyps: &[String], refs: &[String]) -> f64 {
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let h = tokenize(h);
        let rf = tokenize(rf);
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let hg = grams(&h, n);
            let rg = grams(&rf, n);
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                num[n - 1] += occurrences(&hg, g).min(occurrences(&rg, g));
            }
            den[n - 1] += hg.len();
        }
    }
    if c == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let p = if num[n] == 0 {
            1.0 / (2.0 * den[n].max(1) as f64)
        } else {
            num[n] as f64 / den[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * (log_sum / 4.0).exp()
}

pub fn brute_distinct(hyps: &[String], n: usize) -> Option<f64> {
    let mut all = Vec::new();
    for h in hyps {
        all.extend(grams(&tokenize(h), n));
    }
    if all.is_empty() {
        return None;
    }
    let mut uniq: Vec<Vec<String>> = Vec::new();
    for g in &all {
        if !uniq.contains(g) {
            uniq.push(g.clone());
        }
    }
    Some(uniq.len() as f64 / all.len() as f64)
}

pub fn brute_scores(pred: &[String], gold: &[String], labels: &[String]) -> (f64, f64) {
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    let mut f1 = 0.0;
    for l in labels {
        let tp = pred.iter().zip(gold).filter(|(p, g)| *p == l && *g == l).count() as f64;
        let pp = pred.iter().filter(|p| *p == l).count() as f64;
        let gp = gold.iter().filter(|g| *g == l).count() as f64;
        let precision = if pp > 0.0 { tp / pp } else { 0.0 };
        let recall = if gp > 0.0 { tp / gp } else { 0.0 };
        if precision + recall > 0.0 {
            f1 += 2.0 * precision * recall / (precision + recall);
        }
    }
    (correct as f64 / pred.len() as f64, f1 / labels.len() as f64)
}

const WORDS: [&str; 7] = ["the", "cat", "sat", "on", "a", "mat", "dog"];

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..9);
    (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Largest disagreement between the library metrics and the brute-force
/// versions over random small corpora.
pub fn metric_max_err(corpora: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut note = |a: f64, b: f64| worst = worst.max((a - b).abs());
    for _ in 0..corpora {
        let n = rng.gen_range(1..7);
        let hyps: Vec<String> = (0..n).map(|_| random_sentence(&mut rng)).collect();
        // references often share words with the hypothesis
        let refs: Vec<String> = hyps
            .iter()
            .map(|h| {
                if rng.gen_bool(0.5) {
                    h.clone()
                } else {
                    random_sentence(&mut rng)
                }
            })
            .collect();
        note(bleu(&hyps, &refs).unwrap(), brute_bleu(&hyps, &refs));
        for k in 1..=2 {
            match (distinct_n(&hyps, k), brute_distinct(&hyps, k)) {
                (Ok(a), Some(b)) => note(a, b),
                (Err(_), None) => {}
                _ => return f64::INFINITY,
            }
        }
        let words: usize = hyps.iter().map(|h| h.split_whitespace().count()).sum();
        note(avg_len(&hyps).unwrap(), words as f64 / n as f64);
        let (mut hit, mut den) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(&refs) {
            let (h, r) = (tokenize(h), tokenize(r));
            for i in 0..h.len().max(r.len()) {
                if i < h.len() && i < r.len() && h[i] == r[i] {
                    hit += 1;
                }
            }
            den += h.len().max(r.len());
        }
        let want = if den == 0 { 1.0 } else { hit as f64 / den as f64 };
        note(token_accuracy(&hyps, &refs).unwrap(), want);

        let k = rng.gen_range(2..7);
        let labels: Vec<String> = (0..k).map(|i| format!("l{i}")).collect();
        let m = rng.gen_range(1..25);
        let gold: Vec<String> = (0..m).map(|_| labels[rng.gen_range(0..k)].clone()).collect();
        let pred: Vec<String> = gold
            .iter()
            .map(|g| {
                if rng.gen_bool(0.5) {
                    g.clone()
                } else {
                    labels[rng.gen_range(0..k)].clone()
                }
            })
            .collect();
        let (acc, f1) = classification_scores(&pred, &gold, &labels).unwrap();
        let (bacc, bf1) = brute_scores(&pred, &gold, &labels);
        note(acc, bacc);
        note(f1, bf1);
    }
    worst
}

// ---- decoding ----

/// Next-token distributions given by a function of the prefix.
pub struct FnScorer<F: Fn(&[TokenId]) -> Vec<f64>> {
    pub vocab: usize,
    pub f: F,
}

impl<F: Fn(&[TokenId]) -> Vec<f64>> Scorer for FnScorer<F> {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, prefixes: &[&[TokenId]]) -> mtdial_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| (self.f)(p)).collect())
    }
}

/// Log-probabilities over ids 0..6 with PAD and BOS impossible; the four
/// producible tokens are EOS, 3, 4 and 5.
pub fn toy_row(p_eos: f64, p3: f64, p4: f64, p5: f64) -> Vec<f64> {
    vec![
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
        p_eos.ln(),
        p3.ln(),
        p4.ln(),
        p5.ln(),
    ]
}

/// The hand-built toy model: token 3 looks best first but leads nowhere
/// likely; token 4 leads to a confident EOS.
pub fn toy_model(prefix: &[TokenId]) -> Vec<f64> {
    match prefix.last() {
        Some(&3) => toy_row(0.3, 0.25, 0.25, 0.2),
        Some(&4) => toy_row(0.9, 0.04, 0.03, 0.03),
        Some(&5) => toy_row(0.25, 0.25, 0.25, 0.25),
        _ => toy_row(0.05, 0.5, 0.4, 0.05),
    }
}

/// Best finished sequence by exhaustive enumeration: every continuation of
/// BOS that ends in EOS or reaches `max_len` ids.
pub fn exhaustive_best<F: Fn(&[TokenId]) -> Vec<f64>>(f: &F, max_len: usize) -> (Vec<TokenId>, f64) {
    fn walk<F: Fn(&[TokenId]) -> Vec<f64>>(
        f: &F,
        prefix: &mut Vec<TokenId>,
        lp: f64,
        max_len: usize,
        best: &mut (Vec<TokenId>, f64),
    ) {
        let row = f(prefix);
        for (tok, &l) in row.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            prefix.push(tok as TokenId);
            let total = lp + l;
            if tok as TokenId == EOS || prefix.len() >= max_len {
                if total > best.1 {
                    *best = (prefix.clone(), total);
                }
            } else {
                walk(f, prefix, total, max_len, best);
            }
            prefix.pop();
        }
    }
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    walk(f, &mut vec![BOS], 0.0, max_len, &mut best);
    best
}

/// Toy-model decoding: (greedy, beam-2, exhaustive best ids, exhaustive log-prob).
pub fn toy_decoding() -> (Hypothesis, Hypothesis, Vec<TokenId>, f64) {
    let scorer = FnScorer { vocab: 6, f: toy_model };
    let cfg = BeamConfig {
        beam_width: 2,
        max_len: 5,
        no_repeat_ngram: 0,
        length_penalty: 1.0,
    };
    let g = greedy(&scorer, &cfg).unwrap();
    let b = beam_search(&scorer, &cfg).unwrap();
    let (ids, lp) = exhaustive_best(&toy_model, 5);
    (g, b, ids, lp)
}

/// Model for the decoding checks: the tiny architecture with a larger
/// vocabulary and random weights, so distributions are uneven.
pub fn decoding_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: 20,
        max_len: 24,
        ..tiny_config()
    };
    let mut model = Model::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).values_mut() {
            *v += rng.gen_range(-1.0..1.0);
        }
    }
    model
}

pub fn random_utterance(rng: &mut ChaCha8Rng, vocab: usize) -> TokenSeq {
    let n = rng.gen_range(1..8);
    let mut ids: Vec<TokenId> = (0..n).map(|_| rng.gen_range(4..vocab as TokenId)).collect();
    ids.push(EOS);
    TokenSeq::new(ids, SeqRole::Utterance)
}

/// Number of inputs (out of `n`) where beam-1 and greedy disagree.
pub fn beam1_greedy_mismatches(n: usize, seed: u64) -> usize {
    let model = decoding_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BeamConfig {
        beam_width: 1,
        max_len: 16,
        no_repeat_ngram: 3,
        length_penalty: 1.0,
    };
    (0..n)
        .filter(|_| {
            let utt = random_utterance(&mut rng, 20);
            let scorer = ModelScorer::new(&model, &utt).unwrap();
            let b = beam_search(&scorer, &cfg).unwrap();
            let g = greedy(&scorer, &cfg).unwrap();
            b.ids != g.ids || b.log_prob != g.log_prob
        })
        .count()
}

/// Trigrams occurring more than once within a response, counted by brute
/// force over `n` beam-5 responses with trigram blocking; also returns how
/// many responses the same inputs would repeat a trigram in without
/// blocking, to show the check has teeth.
pub fn repeated_trigrams(n: usize, seed: u64) -> (usize, usize) {
    let model = decoding_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let blocked = BeamConfig {
        beam_width: 5,
        max_len: 24,
        no_repeat_ngram: 3,
        length_penalty: 1.0,
    };
    let open = BeamConfig {
        no_repeat_ngram: 0,
        ..blocked
    };
    let count = |ids: &[TokenId]| {
        let mut repeats = 0;
        for i in 0..ids.len().saturating_sub(2) {
            for j in i + 1..ids.len() - 2 {
                if ids[i..i + 3] == ids[j..j + 3] {
                    repeats += 1;
                }
            }
        }
        repeats
    };
    let (mut with, mut without) = (0, 0);
    for _ in 0..n {
        let utt = random_utterance(&mut rng, 20);
        let scorer = ModelScorer::new(&model, &utt).unwrap();
        with += count(&beam_search(&scorer, &blocked).unwrap().ids);
        if count(&beam_search(&scorer, &open).unwrap().ids) > 0 {
            without += 1;
        }
    }
    (with, without)
}

// ---- trainer ----

use mtdial_core::data::synth::{gen_synthetic, SynthKind};
use mtdial_core::numerics::AdamConfig as Adam;
use mtdial_core::text::Vocab;
use mtdial_core::trainer::{encode_examples, loss_and_gradients, step, Batch, TrainTask};
use mtdial_core::TrainConfig;

pub struct Fixture {
    pub model: Model,
    pub tasks: Vec<TrainTask>,
}

/// A small model and synthetic tasks (40 examples each) with the given
/// weights; task names are synthetic kinds (R, E6, E2, E12).
pub fn fixture(weights: &[(&str, f64)]) -> Fixture {
    let kinds = [SynthKind::Generation, SynthKind::E6, SynthKind::E2, SynthKind::E12];
    let text: String = kinds
        .iter()
        .map(|&k| gen_synthetic(k, 40, 5).unwrap().to_tsv().replace('\t', " "))
        .collect();
    let vocab = Vocab::build(text.lines(), 1).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        max_len: 32,
        dropout: 0.1,
        cls_heads: vec![
            ClsHeadSpec::new("E6", 6),
            ClsHeadSpec::new("E2", 2),
            ClsHeadSpec::new("E12", 12),
        ],
    };
    let model = Model::init(cfg, 0).unwrap();
    let tasks = weights
        .iter()
        .map(|&(name, weight)| {
            let kind = SynthKind::parse(name).unwrap();
            let labels: Vec<String> = kind.labels().iter().map(|s| s.to_string()).collect();
            let enc = encode_examples(&gen_synthetic(kind, 40, 5).unwrap(), &vocab, 32, &labels).unwrap();
            TrainTask {
                name: name.into(),
                weight,
                train: enc.clone(),
                valid: enc,
            }
        })
        .collect();
    Fixture { model, tasks }
}

pub fn train_config(weight_decay: f64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 2,
        optimizer: Adam {
            learning_rate: 1e-3,
            weight_decay,
            ..Adam::default()
        },
        ..TrainConfig::default()
    }
}

pub fn first_batch(t: &TrainTask) -> Batch {
    t.train.batch(&(0..8).collect::<Vec<_>>()).unwrap()
}

/// A λ = 0 step (no weight decay) for each task kind leaves parameters and
/// optimizer state untouched.
pub fn zero_weight_step_is_noop() -> bool {
    ["R", "E6"].iter().all(|&name| {
        let mut f = fixture(&[(name, 0.0)]);
        let cfg = train_config(0.0);
        let before = f.model.params().clone();
        let mut opt = AdamW::new(cfg.optimizer, f.model.params());
        let batch = first_batch(&f.tasks[0]);
        let loss = step(&mut f.model, &mut opt, &f.tasks[0], &batch, &cfg, 0, 0, None).unwrap();
        loss > 0.0 && *f.model.params() == before && opt.state.step_count == 0
    })
}

/// A λ = 1 step equals the update written out without any weighting.
pub fn unit_weight_step_is_plain() -> bool {
    ["R", "E6"].iter().all(|&name| {
        let f = fixture(&[(name, 1.0)]);
        let cfg = train_config(0.01);
        let batch = first_batch(&f.tasks[0]);

        let mut weighted = f.model.clone();
        let mut opt = AdamW::new(cfg.optimizer, weighted.params());
        step(&mut weighted, &mut opt, &f.tasks[0], &batch, &cfg, 0, 0, None).unwrap();

        let mut plain = f.model.clone();
        let grads = {
            let mut g = Graph::new(plain.params());
            let loss = match &batch {
                Batch::Generation { enc, dec, targets } => {
                    let l = plain.forward_generation(&mut g, enc, dec, None).unwrap();
                    g.label_smoothed_nll(l, targets, cfg.label_smoothing, PAD).unwrap()
                }
                Batch::Classification { enc, labels } => {
                    let l = plain.forward_classification(&mut g, enc, name, None).unwrap();
                    g.classification_nll(l, labels).unwrap()
                }
            };
            g.backward(loss).unwrap()
        };
        let p = plain.params_mut();
        p.accumulate(&grads).unwrap();
        p.fill_missing_grads();
        let norm = p.grad_norm();
        if norm > cfg.grad_clip {
            p.scale_grads(cfg.grad_clip / norm);
        }
        let mut opt = AdamW::new(cfg.optimizer, p);
        opt.step(p).unwrap();
        p.zero_grad();
        weighted.params() == plain.params()
    })
}

/// λ = 0.5 yields exactly half of every λ = 1 gradient, and the same
/// (unweighted) reported loss.
pub fn half_weight_halves_gradients() -> bool {
    ["R", "E6"].iter().all(|&name| {
        let f = fixture(&[(name, 1.0)]);
        let batch = first_batch(&f.tasks[0]);
        let (l1, full) = loss_and_gradients(&f.model, name, &batch, 0.1, 1.0, None).unwrap();
        let (l2, half) = loss_and_gradients(&f.model, name, &batch, 0.1, 0.5, None).unwrap();
        l1 == l2
            && full.iter().count() == half.iter().count()
            && full.iter().all(|(id, g)| {
                half.get(id)
                    .is_some_and(|h| g.iter().zip(h).all(|(a, b)| *b == 0.5 * a))
            })
    })
}
