// SPDX-License-Identifier: MIT OR Apache-2.0

//! One worker against the full pool on the two parallel hot paths: batched
//! SVDs for the factor cache, and dataset scoring.
//!
//! Build with `--no-default-features` to measure the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use laser_core::eval::{score_samples, Content, EvalConfig, Metric, QASample};
use laser_core::laser::{FactorCache, Method};
use laser_core::parallel::with_threads;
use laser_core::transformer::{Activation, ModelConfig, NormKind, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model() -> TransformerModel {
    let cfg = ModelConfig {
        num_layers: 4,
        hidden_dim: 64,
        num_heads: 4,
        mlp_hidden_dim: 256,
        vocab_size: 259,
        max_context: 64,
        activation: Activation::Gelu,
        use_bias: true,
        norm_kind: NormKind::PreLayernorm,
        layer_norm_eps: 1e-5,
    };
    TransformerModel::random(cfg, 1).unwrap()
}

fn samples(n: usize) -> Vec<QASample> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    (0..n)
        .map(|i| QASample {
            id: format!("{i:04}"),
            prompt: Content::Ids((0..24).map(|_| rng.gen_range(0..256)).collect()),
            answer: Content::Ids(vec![rng.gen_range(0..256)]),
            paraphrases: Vec::new(),
            candidates: Vec::new(),
            frequency: None,
            subject: None,
            answer_text: None,
        })
        .collect()
}

fn threads() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("all_cores", 0)]
}

fn bench(c: &mut Criterion) {
    let model = model();
    let slots: Vec<_> = model.slots().collect();
    let data = samples(32);
    let eval = EvalConfig::new(Metric::Generation { max_tokens: 4 });

    let mut group = c.benchmark_group("factor_cache");
    group.sample_size(10);
    for (name, n) in threads() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                with_threads(n, || {
                    FactorCache::build(&model, &slots, Method::SvdTruncate).unwrap()
                })
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("score_samples");
    group.sample_size(10);
    for (name, n) in threads() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| with_threads(n, || score_samples(&model, &data, &eval).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
