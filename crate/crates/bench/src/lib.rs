//! Shared fixtures for the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtdial_core::text::{pad_batch, shift_right, PaddedBatch, SeqRole, TokenId, TokenSeq, EOS};
use mtdial_core::{Model, ModelConfig};

pub const VOCAB: usize = 1000;

/// Freshly initialised desk-scale model with one six-way head.
pub fn desk_model() -> Model {
    Model::init(ModelConfig::desk(VOCAB).with_head("E6", 6), 1).expect("desk config is valid")
}

pub fn random_seq(rng: &mut ChaCha8Rng, len: usize, role: SeqRole) -> TokenSeq {
    let mut ids: Vec<TokenId> = (0..len).map(|_| rng.gen_range(4..VOCAB as TokenId)).collect();
    ids.push(EOS);
    TokenSeq::new(ids, role)
}

pub struct Batch {
    pub enc: PaddedBatch,
    pub dec: PaddedBatch,
    pub targets: Vec<TokenId>,
    pub labels: Vec<usize>,
}

/// `rows` random utterance/response pairs of `len` words each.
pub fn batch(rows: usize, len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utts: Vec<TokenSeq> = (0..rows)
        .map(|_| random_seq(&mut rng, len, SeqRole::Utterance))
        .collect();
    let resps: Vec<TokenSeq> = (0..rows)
        .map(|_| random_seq(&mut rng, len, SeqRole::Response))
        .collect();
    let shifted: Vec<TokenSeq> = resps.iter().map(|r| shift_right(r).expect("non-empty")).collect();
    Batch {
        enc: pad_batch(&utts).expect("batch"),
        dec: pad_batch(&shifted).expect("batch"),
        targets: pad_batch(&resps).expect("batch").ids,
        labels: (0..rows).map(|i| i % 6).collect(),
    }
}

/// Whitespace sentences over a small vocabulary, so n-grams recur.
pub fn sentences(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..20);
            (0..len)
                .map(|_| format!("w{}", rng.gen_range(0..200)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}
