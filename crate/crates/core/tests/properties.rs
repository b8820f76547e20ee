use proptest::prelude::*;

use d2st_core::adsta::{cell_centers, point_importance, sample_reference_grid, SamplingKernel};
use d2st_core::checkpoint::{tensor_from_bytes, tensor_to_bytes};
use d2st_core::fewshot::{bimhm_distance, otam_distance, summarize};
use d2st_core::kernels::{softmax_rows, trilinear_weights};
use d2st_core::synthvid::{render_video, sample_episode, temporal_pool, Family, SynthClassSpec, VideoGeometry, ShapeId, MotionId};
use d2st_core::{Real, SeededRng, Tensor};

fn geometry() -> VideoGeometry {
    VideoGeometry::default()
}

fn sorted_frames(frames: &Tensor) -> Vec<Vec<u64>> {
    let per = frames.len() / frames.shape()[0];
    let mut v: Vec<Vec<u64>> = frames.data().chunks(per).map(|f| f.iter().map(|x| x.to_bits()).collect()).collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trilinear_weights_form_a_partition_of_unity(
        vol in (1usize..6, 1usize..6, 1usize..6),
        u in (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64),
    ) {
        let vol = [vol.0, vol.1, vol.2];
        let p = [u.0 * (vol[0] - 1) as Real, u.1 * (vol[1] - 1) as Real, u.2 * (vol[2] - 1) as Real];
        let w = trilinear_weights(p, vol);
        let total: Real = w.iter().map(|x| x.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|x| x.1 >= 0.0 && x.0 < vol.iter().product()));
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0..30.0f64, 1..60), width in 1usize..6) {
        let n = data.len() / width * width;
        prop_assume!(n > 0);
        let y = softmax_rows(&data[..n], width);
        for row in y.chunks(width) {
            prop_assert!((row.iter().sum::<Real>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn reference_points_sit_inside_the_volume(t in 1usize..10, h in 1usize..10, nt in 1usize..10, ns in 1usize..10) {
        prop_assume!(nt <= t && ns <= h);
        let grid = sample_reference_grid([t, h, h], SamplingKernel::new(nt, ns).unwrap()).unwrap();
        prop_assert_eq!(grid.point_count(), nt * ns * ns);
        for p in grid.points.data().chunks(3) {
            prop_assert!(p[0] >= 0.0 && p[0] <= (t - 1) as Real);
            prop_assert!(p[1] >= 0.0 && p[1] <= (h - 1) as Real);
        }
        let c = cell_centers(t, nt);
        prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn alignment_distances_are_symmetric_and_bounded(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let d = Tensor::uniform([r, c], 0.0, 2.0, &mut rng);
        let dt = Tensor::new([c, r], (0..r * c).map(|k| d.data()[(k % r) * c + k / r]).collect()).unwrap();
        prop_assert!((bimhm_distance(&d).unwrap() - bimhm_distance(&dt).unwrap()).abs() < 1e-12);
        prop_assert!((otam_distance(&d).unwrap() - otam_distance(&dt).unwrap()).abs() < 1e-12);
        let min = d.data().iter().copied().fold(Real::INFINITY, Real::min);
        let max = d.data().iter().copied().fold(0.0, Real::max);
        let b = bimhm_distance(&d).unwrap();
        prop_assert!(b >= min - 1e-12 && b <= max + 1e-12);
        prop_assert!(otam_distance(&d).unwrap() >= min - 1e-12);
    }

    #[test]
    fn point_importance_sums_to_token_count(n in 1usize..20, m in 1usize..10, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let logits = Tensor::randn([n, m], 2.0, &mut rng);
        let w = Tensor::new([n, m], softmax_rows(logits.data(), m)).unwrap();
        let imp = point_importance(&w).unwrap();
        prop_assert!((imp.iter().sum::<Real>() - n as Real).abs() < 1e-9);
    }

    #[test]
    fn confidence_interval_is_nonnegative_and_mean_in_range(accs in prop::collection::vec(0.0..=1.0f64, 1..40)) {
        let r = summarize(accs.clone()).unwrap();
        prop_assert!(r.ci95 >= 0.0);
        prop_assert!(r.accuracy >= 0.0 && r.accuracy <= 100.0 + 1e-9);
        prop_assert_eq!(r.episodes, accs.len());
    }

    #[test]
    fn tensor_files_roundtrip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let t = Tensor::randn(shape, 1.0, &mut rng);
        prop_assert!(tensor_from_bytes(&tensor_to_bytes(&t)).unwrap().bitwise_eq(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn temporal_classes_share_frame_multisets(seed in any::<u64>(), a in 0usize..6, b in 0usize..6) {
        let pool = temporal_pool(0.05);
        let va = render_video(&pool[a], &geometry(), 0, seed).unwrap();
        let vb = render_video(&pool[b], &geometry(), 1, seed).unwrap();
        prop_assert_eq!(sorted_frames(&va.frames), sorted_frames(&vb.frames));
        if a != b {
            prop_assert!(!va.frames.bitwise_eq(&vb.frames));
        }
    }

    #[test]
    fn videos_are_deterministic_and_in_range(seed in any::<u64>(), shape in 0usize..3, motion in 0usize..5, noise in 0.0..0.3f64) {
        let spec = SynthClassSpec {
            family: Family::Spatial,
            shape: ShapeId::ALL[shape],
            motion: MotionId::SPATIAL[motion],
            noise_sigma: noise,
        };
        let a = render_video(&spec, &geometry(), 2, seed).unwrap();
        let b = render_video(&spec, &geometry(), 2, seed).unwrap();
        prop_assert!(a.frames.bitwise_eq(&b.frames));
        prop_assert!(a.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn episodes_have_distinct_classes_and_seeds(seed in any::<u64>(), way in 2usize..6, shot in 1usize..3, queries in 1usize..3) {
        let mut rng = SeededRng::new(seed);
        let geom = VideoGeometry { frames: 2, height: 16, width: 16 };
        let ep = sample_episode(&temporal_pool(0.0), way, shot, queries, &geom, &mut rng).unwrap();
        prop_assert_eq!(ep.support.len(), way * shot);
        prop_assert_eq!(ep.query.len(), way * queries);
        let mut classes = ep.classes.clone();
        classes.sort_unstable();
        classes.dedup();
        prop_assert_eq!(classes.len(), way);
        let mut seeds: Vec<u64> = ep.support.iter().chain(&ep.query).map(|v| v.seed).collect();
        let n = seeds.len();
        seeds.sort_unstable();
        seeds.dedup();
        prop_assert_eq!(seeds.len(), n);
        for (i, v) in ep.support.iter().enumerate() {
            prop_assert_eq!(v.label, i / shot);
        }
    }
}

#[test]
fn static_noise_free_video_has_identical_frames() {
    let spec = SynthClassSpec {
        family: Family::Spatial,
        shape: ShapeId::Square,
        motion: MotionId::Static,
        noise_sigma: 0.0,
    };
    let v = render_video(&spec, &geometry(), 0, 3).unwrap();
    let per = v.frames.len() / 8;
    let first = &v.frames.data()[..per];
    assert!(v.frames.data().chunks(per).all(|f| f == first));
}

#[test]
fn invalid_specs_are_configuration_errors() {
    let bad = SynthClassSpec {
        family: Family::Temporal,
        shape: ShapeId::Disk,
        motion: MotionId::Static,
        noise_sigma: 0.0,
    };
    assert!(matches!(render_video(&bad, &geometry(), 0, 0), Err(d2st_core::Error::Config(_))));
    let mut rng = SeededRng::new(0);
    assert!(matches!(
        sample_episode(&temporal_pool(0.0), 7, 1, 1, &geometry(), &mut rng),
        Err(d2st_core::Error::Config(_))
    ));
}
