use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sugmine::embed::{build_vocab, train_skipgram, SkipGramConfig};
use sugmine::explain::{sage_scores, SageConfig};
use sugmine::synth::{generate, SynthConfig};
use sugmine::tensor::Matrix;
use sugmine::textprep::{tokenize, TokenSeq};
use sugmine::xformer::{scaled_dot_attention, train, TrainExample};
use sugmine::{Domain, TransformerConfig, TransformerModel};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (q, k, v) = (
        random_matrix(&mut rng, 64, 16),
        random_matrix(&mut rng, 64, 16),
        random_matrix(&mut rng, 64, 16),
    );
    let mask = vec![false; 64];
    c.bench_function("scaled_dot_attention_64x16", |b| {
        b.iter(|| scaled_dot_attention(&q, &k, &v, &mask).unwrap())
    });

    let model = TransformerModel::new(TransformerConfig::default(), 64).unwrap();
    let x = random_matrix(&mut rng, 32, 64);
    let mask = vec![false; 33];
    let input = model.assemble_input(&x);
    c.bench_function("encoder_forward_d64_len32", |b| b.iter(|| model.encode(&input, &mask).unwrap()));
}

fn training(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = TransformerConfig {
        epochs: 1,
        batch_size: 16,
        ..TransformerConfig::default()
    };
    let data: Vec<TrainExample> = (0..32)
        .map(|i| TrainExample {
            rows: random_matrix(&mut rng, 12, 64),
            suggestion: i % 3 == 0,
            domain: Domain::ALL[i % 4],
        })
        .collect();
    let base = TransformerModel::new(cfg, 64).unwrap();
    let mut group = c.benchmark_group("transformer");
    group.sample_size(10);
    group.bench_function("train_epoch_32_examples", |b| {
        b.iter_batched(|| base.clone(), |mut m| train(&mut m, &data).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

fn embeddings(c: &mut Criterion) {
    let corpus = generate(&SynthConfig {
        n_reviews: 400,
        ..SynthConfig::default()
    })
    .unwrap();
    let lists: Vec<Vec<String>> = corpus.iter().map(|r| tokenize(&r.text)).collect();
    let seqs: Vec<TokenSeq> = lists.iter().map(|t| TokenSeq::new("x", t.clone())).collect();
    let vocab = build_vocab(&seqs, 1).unwrap();
    let cfg = SkipGramConfig {
        epochs: 1,
        ..SkipGramConfig::default()
    };
    let mut group = c.benchmark_group("skipgram");
    group.sample_size(10);
    group.bench_function("epoch_400_reviews", |b| b.iter(|| train_skipgram(&lists, &vocab, &cfg, None).unwrap()));
    group.finish();
}

fn sage(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut target = BTreeMap::new();
    let mut background = BTreeMap::new();
    for i in 0..500 {
        let t = format!("w{i}");
        let n: u64 = rng.random_range(1..50);
        target.insert(t.clone(), n);
        background.insert(t, n + rng.random_range(0..200));
    }
    let cfg = SageConfig::default();
    c.bench_function("sage_500_tokens", |b| b.iter(|| sage_scores(&target, &background, &cfg).unwrap()));
}

criterion_group!(benches, attention, training, embeddings, sage);
criterion_main!(benches);
