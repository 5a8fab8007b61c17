use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use mtdial_bench::{batch, desk_model, random_seq, sentences};
use mtdial_core::decoding::ModelScorer;
use mtdial_core::metrics::{bleu, distinct_n};
use mtdial_core::numerics::kernels::gemm;
use mtdial_core::text::{SeqRole, PAD};
use mtdial_core::{beam_search, BeamConfig, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for (m, k, n) in [(256, 128, 128), (256, 128, 512), (256, 128, 1000)] {
        let a: Vec<f64> = (0..m * k).map(|i| (i % 7) as f64 * 0.1).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 5) as f64 * 0.1).collect();
        let mut out = vec![0.0; m * n];
        group.bench_function(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), |bench| {
            bench.iter(|| gemm(m, k, n, black_box(&a), false, black_box(&b), false, &mut out, false))
        });
    }
    group.finish();
}

fn bench_model(c: &mut Criterion) {
    let model = desk_model();
    let b = batch(32, 16, 3);
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("generation forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(model.params());
            let logits = model.forward_generation(&mut g, &b.enc, &b.dec, None).unwrap();
            black_box(g.label_smoothed_nll(logits, &b.targets, 0.1, PAD).unwrap());
        })
    });
    group.bench_function("generation forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(model.params());
            let logits = model.forward_generation(&mut g, &b.enc, &b.dec, None).unwrap();
            let loss = g.label_smoothed_nll(logits, &b.targets, 0.1, PAD).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
    group.bench_function("classification forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(model.params());
            let logits = model.forward_classification(&mut g, &b.enc, "E6", None).unwrap();
            let loss = g.classification_nll(logits, &b.labels).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
    group.finish();
}

fn bench_decoding(c: &mut Criterion) {
    let model = desk_model();
    let utt = random_seq(&mut ChaCha8Rng::seed_from_u64(5), 12, SeqRole::Utterance);
    let mut group = c.benchmark_group("decoding");
    group.sample_size(10);
    for width in [1, 5] {
        let cfg = BeamConfig {
            beam_width: width,
            max_len: 20,
            ..BeamConfig::default()
        };
        group.bench_function(BenchmarkId::new("beam", width), |bench| {
            bench.iter(|| {
                let scorer = ModelScorer::new(&model, &utt).unwrap();
                black_box(beam_search(&scorer, &cfg).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let hyps = sentences(2000, 1);
    let refs = sentences(2000, 2);
    c.bench_function("bleu 2000", |bench| {
        bench.iter(|| bleu(black_box(&hyps), black_box(&refs)).unwrap())
    });
    c.bench_function("distinct-2 2000", |bench| {
        bench.iter(|| distinct_n(black_box(&hyps), 2).unwrap())
    });
}

criterion_group!(benches, bench_gemm, bench_model, bench_decoding, bench_metrics);
criterion_main!(benches);
