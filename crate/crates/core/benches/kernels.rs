use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use d2st_core::adapter::AdapterConfig;
use d2st_core::adsta::{dense_attention, Adsta, AdstaConfig};
use d2st_core::backbone::{BackboneConfig, InsertionPolicy, ModelAssembly};
use d2st_core::fewshot::{episode_gradients, evaluate, Metric};
use d2st_core::parallel::Parallelism;
use d2st_core::synthvid::{EpisodeSource, Family, SynthEpisodes, VideoGeometry};
use d2st_core::{ParamStore, SeededRng, Tape, Tensor};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn model() -> ModelAssembly {
    ModelAssembly::assemble(&BackboneConfig::four_stage(), &InsertionPolicy::Full, &AdapterConfig::d2st(), 0).unwrap()
}

fn episodes() -> SynthEpisodes {
    SynthEpisodes {
        family: Family::Temporal,
        noise_sigma: 0.05,
        way: 5,
        shot: 1,
        queries: 1,
        geometry: VideoGeometry::default(),
        seed: 0,
    }
}

fn training_step(c: &mut Criterion) {
    let m = model();
    let ep = episodes().episode(0).unwrap();
    let mut g = c.benchmark_group("episode_gradients");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(name, |b| b.iter(|| black_box(episode_gradients(&m, &ep, Metric::Bimhm, 0.1, mode).unwrap())));
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let m = model();
    let src = episodes();
    let mut g = c.benchmark_group("evaluate_4_episodes");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(name, |b| b.iter(|| black_box(evaluate(&m, &src, 4, Metric::Bimhm, 0.1, mode).unwrap())));
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let channels = 16;
    let mut g = c.benchmark_group("attention");
    g.sample_size(20);
    for volume in [[4, 4, 4], [8, 8, 8], [8, 16, 16]] {
        let mut rng = SeededRng::new(1);
        let mut store = ParamStore::new();
        let adsta = Adsta::new(&mut store, "a", channels, volume, &AdstaConfig::temporal(4, 2), false, &mut rng).unwrap();
        let x = Tensor::randn([volume[0], volume[1], volume[2], channels], 1.0, &mut rng);
        let tokens: usize = volume.iter().product();
        g.bench_with_input(BenchmarkId::new("dense", tokens), &x, |b, x| {
            b.iter(|| {
                let tape = Tape::with_params(&store);
                black_box(dense_attention(tape.constant(x.clone()), &adsta.proj).unwrap().output.value());
            })
        });
        g.bench_with_input(BenchmarkId::new("adsta", tokens), &x, |b, x| {
            b.iter(|| {
                let tape = Tape::with_params(&store);
                black_box(adsta.forward(tape.constant(x.clone())).unwrap().value());
            })
        });
    }
    g.finish();
}

criterion_group!(benches, training_step, evaluation, attention);
criterion_main!(benches);
