//! Whole-model contracts: identity at initialization, frozen backbone,
//! frame-permutation behaviour, parallel/sequential agreement, and the
//! episode loss gradient.

use d2st_core::adapter::AdapterConfig;
use d2st_core::adsta::AdstaConfig;
use d2st_core::backbone::{BackboneConfig, InsertionPolicy, ModelAssembly};
use d2st_core::checkpoint::Checkpoint;
use d2st_core::fewshot::{episode_gradients, evaluate, train_episodes, Metric, TrainConfig};
use d2st_core::gradcheck::{finite_diff_grad, relative_error};
use d2st_core::optim::AdamConfig;
use d2st_core::parallel::Parallelism;
use d2st_core::synthvid::{EpisodeSource, Family, SynthEpisodes, VideoGeometry};
use d2st_core::{Real, SeededRng, Tensor};

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stages: 2,
        channels: 16,
        frames: 4,
        grid: [4, 4],
        image: [16, 16],
        seed: 5,
    }
}

fn tiny_d2st() -> AdapterConfig {
    AdapterConfig::dual(AdstaConfig::spatial(1, 2), AdstaConfig::temporal(4, 1)).with_ratio(0.5)
}

fn tiny_episodes(family: Family, seed: u64) -> SynthEpisodes {
    SynthEpisodes {
        family,
        noise_sigma: 0.05,
        way: 3,
        shot: 1,
        queries: 1,
        geometry: VideoGeometry {
            frames: 4,
            height: 16,
            width: 16,
        },
        seed,
    }
}

fn policies() -> Vec<InsertionPolicy> {
    vec![
        InsertionPolicy::Early,
        InsertionPolicy::Late,
        InsertionPolicy::Skip,
        InsertionPolicy::Full,
        InsertionPolicy::None,
        InsertionPolicy::Stages(vec![1, 10]),
    ]
}

#[test]
fn adapters_are_identity_at_initialization() {
    let cfg = BackboneConfig::default();
    let bare = ModelAssembly::backbone_only(&cfg).unwrap();
    let mut rng = SeededRng::new(3);
    let video = Tensor::uniform([8, 32, 32, 3], 0.0, 1.0, &mut rng);
    let want = bare.features(&video).unwrap();
    for adapter in [AdapterConfig::d2st(), AdapterConfig::dst(), AdapterConfig::spatial_only(), AdapterConfig::vanilla()] {
        for policy in policies() {
            let m = ModelAssembly::assemble(&cfg, &policy, &adapter, 17).unwrap();
            assert_eq!(m.adapters.len(), policy.resolve(cfg.stages).unwrap().len());
            assert!(m.features(&video).unwrap().bitwise_eq(&want), "{policy:?} / {:?}", adapter.kind);
        }
    }
}

#[test]
fn insertion_policies_pick_the_documented_stages() {
    assert_eq!(InsertionPolicy::Early.resolve(12).unwrap(), (0..6).collect::<Vec<_>>());
    assert_eq!(InsertionPolicy::Late.resolve(12).unwrap(), (6..12).collect::<Vec<_>>());
    assert_eq!(InsertionPolicy::Skip.resolve(12).unwrap(), vec![0, 2, 4, 6, 8, 10]);
    assert_eq!(InsertionPolicy::Full.resolve(4).unwrap(), vec![0, 1, 2, 3]);
    assert!(InsertionPolicy::Stages(vec![2, 2]).resolve(4).is_err());
    assert!(InsertionPolicy::Stages(vec![4]).resolve(4).is_err());
}

#[test]
fn frozen_parameters_survive_200_steps() {
    let mut model = ModelAssembly::assemble(&tiny_backbone(), &InsertionPolicy::Full, &tiny_d2st(), 1).unwrap();
    let snap = model.snapshot_frozen();
    let digest = model.frozen_digest();
    let before = Checkpoint::capture(&model, serde_json::Value::Null, true, 0);
    let cfg = TrainConfig {
        steps: 200,
        optimizer: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
        metric: Metric::Bimhm,
        tau: 0.1,
    };
    let report = train_episodes(&mut model, &tiny_episodes(Family::Temporal, 9), &cfg, Parallelism::Rayon).unwrap();
    assert_eq!(report.losses.len(), 200);
    assert!(model.verify_frozen(&snap));
    assert_eq!(model.frozen_digest(), digest);
    // The tunable side did move.
    let after = Checkpoint::capture(&model, serde_json::Value::Null, true, 200);
    assert!(before.tensors.iter().zip(&after.tensors).any(|(a, b)| !a.1.bitwise_eq(&b.1)));
}

#[test]
fn zero_steps_leave_the_checkpoint_at_initialization() {
    let mut model = ModelAssembly::assemble(&tiny_backbone(), &InsertionPolicy::Full, &tiny_d2st(), 1).unwrap();
    let init = Checkpoint::capture(&model, serde_json::Value::Null, true, 0).to_bytes().unwrap();
    let cfg = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    train_episodes(&mut model, &tiny_episodes(Family::Temporal, 9), &cfg, Parallelism::Sequential).unwrap();
    assert_eq!(Checkpoint::capture(&model, serde_json::Value::Null, true, 0).to_bytes().unwrap(), init);
}

/// Moves every trainable parameter to a random value so no zero-initialized
/// path hides a gradient.
fn randomize(model: &mut ModelAssembly, seed: u64) {
    let mut rng = SeededRng::new(seed);
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let shape = model.store.value(id).shape().to_vec();
        model.store.assign(id, Tensor::randn(shape, 0.3, &mut rng)).unwrap();
    }
}

fn permute_frames(video: &Tensor, order: &[usize]) -> Tensor {
    let per = video.len() / video.shape()[0];
    let mut data = Vec::with_capacity(video.len());
    for &f in order {
        data.extend_from_slice(&video.data()[f * per..(f + 1) * per]);
    }
    Tensor::new(video.shape(), data).unwrap()
}

#[test]
fn frame_local_adapters_are_permutation_equivariant() {
    let cfg = BackboneConfig::four_stage();
    let mut rng = SeededRng::new(8);
    let video = Tensor::uniform([8, 32, 32, 3], 0.0, 1.0, &mut rng);
    let order = [3, 0, 7, 1, 6, 2, 5, 4];
    for adapter in [AdapterConfig::spatial_only(), AdapterConfig::vanilla()] {
        let mut m = ModelAssembly::assemble(&cfg, &InsertionPolicy::Full, &adapter, 2).unwrap();
        randomize(&mut m, 4);
        let f = m.features(&video).unwrap();
        let g = m.features(&permute_frames(&video, &order)).unwrap();
        assert!(permute_frames(&f, &order).max_abs_diff(&g) < 1e-12);
    }
    // A temporal pathway breaks this once trained away from initialization.
    let mut m = ModelAssembly::assemble(&cfg, &InsertionPolicy::Full, &AdapterConfig::dst(), 2).unwrap();
    randomize(&mut m, 4);
    let f = m.features(&video).unwrap();
    let g = m.features(&permute_frames(&video, &order)).unwrap();
    assert!(permute_frames(&f, &order).max_abs_diff(&g) > 1e-6);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let mut model = ModelAssembly::assemble(&tiny_backbone(), &InsertionPolicy::Full, &tiny_d2st(), 3).unwrap();
    randomize(&mut model, 6);
    let src = tiny_episodes(Family::Temporal, 12);
    let ep = src.episode(0).unwrap();
    for metric in [Metric::Bimhm, Metric::Otam] {
        let (ls, gs) = episode_gradients(&model, &ep, metric, 0.1, Parallelism::Sequential).unwrap();
        let (lp, gp) = episode_gradients(&model, &ep, metric, 0.1, Parallelism::Rayon).unwrap();
        assert_eq!(ls.to_bits(), lp.to_bits());
        assert_eq!(gs.len(), gp.len());
        for (id, g) in gs.iter() {
            assert!(gp.get(id).unwrap().bitwise_eq(g));
        }
    }
    let a = evaluate(&model, &src, 6, Metric::Bimhm, 0.1, Parallelism::Sequential).unwrap();
    let b = evaluate(&model, &src, 6, Metric::Bimhm, 0.1, Parallelism::Rayon).unwrap();
    assert_eq!(a, b);
}

#[test]
fn episode_loss_gradient_matches_finite_differences() {
    let mut model = ModelAssembly::assemble(&tiny_backbone(), &InsertionPolicy::Stages(vec![1]), &tiny_d2st(), 3).unwrap();
    randomize(&mut model, 7);
    let ep = tiny_episodes(Family::Temporal, 21).episode(0).unwrap();
    for metric in [Metric::Bimhm, Metric::Otam] {
        let (_, grads) = episode_gradients(&model, &ep, metric, 0.5, Parallelism::Sequential).unwrap();
        let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape()));
            let numeric = finite_diff_grad(
                |probe| {
                    let mut m = model.clone();
                    m.store.get_mut(id).value = probe.clone();
                    Ok(episode_gradients(&m, &ep, metric, 0.5, Parallelism::Sequential)?.0)
                },
                model.store.value(id),
                1e-5,
            )
            .unwrap();
            // Some gradients are exactly zero (an up-projection bias shifts every
            // frame feature equally); there only difference noise remains.
            let err = relative_error(&analytic, &numeric);
            let abs = analytic.max_abs_diff(&numeric);
            assert!(err < 1e-4 || abs < 1e-9, "{metric} {}: rel {err}, abs {abs}", model.store.get(id).name);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut model = ModelAssembly::assemble(&tiny_backbone(), &InsertionPolicy::Full, &tiny_d2st(), 1).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            tau: 0.1,
            ..TrainConfig::default()
        };
        let r = train_episodes(&mut model, &tiny_episodes(Family::Temporal, 2), &cfg, Parallelism::Rayon).unwrap();
        (r.losses, Checkpoint::capture(&model, serde_json::Value::Null, true, 5).to_bytes().unwrap())
    };
    let (la, ca) = run();
    let (lb, cb) = run();
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ca, cb);
}

#[test]
fn frozen_backbone_separates_the_spatial_family() {
    let model = ModelAssembly::backbone_only(&BackboneConfig::four_stage()).unwrap();
    let src = SynthEpisodes {
        family: Family::Spatial,
        noise_sigma: 0.05,
        way: 5,
        shot: 1,
        queries: 2,
        geometry: VideoGeometry::default(),
        seed: 44,
    };
    let r = evaluate(&model, &src, 40, Metric::Bimhm, 1.0, Parallelism::Rayon).unwrap();
    assert!(r.accuracy > 20.0 + 2.0 * r.ci95.max(3.0), "{r:?}");
}

#[test]
fn tunable_fraction_is_small_for_vanilla_adapters() {
    let m = ModelAssembly::assemble(&BackboneConfig::default(), &InsertionPolicy::Full, &AdapterConfig::vanilla(), 0).unwrap();
    let p = m.partition_parameters();
    assert_eq!(p.tunable_count + p.frozen_count, m.store.iter().map(|(_, p)| p.numel()).sum::<usize>());
    let frac: Real = p.tunable_fraction();
    assert!(frac > 0.0 && frac < 0.5);
}
