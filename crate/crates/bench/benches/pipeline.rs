use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fairsite::autodiff::Tape;
use fairsite::datagen::{generate, GeneratorConfig};
use fairsite::network::{NetworkConfig, SiteSelector};
use fairsite::policy::{exact_combination_probability, policy_gradient_step, sample_ranking, GradientOrder};
use fairsite::training::{train, TrainConfig};
use fairsite::{DatasetManifest, Matrix, RankingInstance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn desk() -> (DatasetManifest, Vec<RankingInstance>) {
    generate(&GeneratorConfig {
        pool_size: 100,
        n_trials: 20,
        copies_per_trial: 2,
        dimensions: DatasetManifest {
            m: 10,
            k: 5,
            ..DatasetManifest::desk()
        },
        seed: 1,
        ..GeneratorConfig::default()
    })
    .expect("generator config is valid")
}

fn network(dims: &DatasetManifest, width: usize) -> SiteSelector {
    let config = NetworkConfig {
        embedding_width: width,
        ..NetworkConfig::default()
    };
    SiteSelector::new(dims, &config, 0).expect("network config is valid")
}

fn policy(c: &mut Criterion) {
    let q: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("sample_ranking m20 k10", |b| {
        b.iter(|| sample_ranking(black_box(&q), 10, &mut rng).unwrap())
    });
    let combo: Vec<usize> = (0..6).collect();
    c.bench_function("exact_probability m20 k6", |b| {
        b.iter(|| exact_combination_probability(black_box(&q), &combo, 6).unwrap())
    });
    let samples: Vec<_> = (0..64)
        .map(|i| (sample_ranking(&q, 10, &mut rng).unwrap(), i as f64 / 64.0))
        .collect();
    c.bench_function("policy_gradient 64 samples", |b| {
        b.iter(|| policy_gradient_step(black_box(&q), &samples, 10, GradientOrder::Drawn).unwrap())
    });
}

fn forward_backward(c: &mut Criterion) {
    let (dims, xs) = desk();
    for width in [16, 64] {
        let net = network(&dims, width);
        c.bench_function(&format!("score instance width {width}"), |b| {
            b.iter(|| net.scores(black_box(&xs[0])).unwrap())
        });
        c.bench_function(&format!("forward+backward width {width}"), |b| {
            b.iter(|| {
                let mut tape = Tape::new(&net.store);
                let q = net.forward(&mut tape, &xs[0]).unwrap();
                let seed = Matrix::from_vec(dims.m, 1, vec![1.0; dims.m]);
                tape.backward(q, seed).into_param_grads(&net.store)
            })
        });
    }
}

fn training_epoch(c: &mut Criterion) {
    let (dims, xs) = desk();
    let (val, tr) = xs.split_at(4);
    let config = TrainConfig {
        epochs: 1,
        learning_rate: 1e-3,
        network: NetworkConfig {
            embedding_width: 16,
            ..NetworkConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one epoch 36 instances width 16", |b| {
        b.iter_batched(|| config.clone(), |cfg| train(tr, val, &dims, &cfg).unwrap(), BatchSize::SmallInput)
    });
    group.finish();
}

fn generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("datagen");
    group.sample_size(10);
    group.bench_function("desk 100 sites 20 trials", |b| b.iter(desk));
    group.finish();
}

criterion_group!(benches, policy, forward_backward, training_epoch, generation);
criterion_main!(benches);
