//! Optimized kernels against slow, independently written reference versions.

use d2st_core::adsta::{sample_reference_grid, sparse_attention, Projections, SamplingKernel, TUNED_KERNELS, AdstaConfig, AdstaVariant};
use d2st_core::fewshot::{bimhm_distance, otam_distance};
use d2st_core::kernels::{dwconv3d, trilinear_sample, ConvGeometry};
use d2st_core::{ParamStore, Real, SeededRng, Tape, Tensor};

fn tent(a: Real, b: Real) -> Real {
    (1.0 - (a - b).abs()).max(0.0)
}

/// Sum over every token of the separable tent kernel times its feature.
fn exhaustive_trilinear(map: &[Real], vol: [usize; 3], c: usize, p: [Real; 3]) -> Vec<Real> {
    let mut out = vec![0.0; c];
    for t in 0..vol[0] {
        for h in 0..vol[1] {
            for w in 0..vol[2] {
                let g = tent(p[0], t as Real) * tent(p[1], h as Real) * tent(p[2], w as Real);
                let base = ((t * vol[1] + h) * vol[2] + w) * c;
                for k in 0..c {
                    out[k] += g * map[base + k];
                }
            }
        }
    }
    out
}

#[test]
fn trilinear_matches_exhaustive_sum_on_1000_pairs() {
    let mut rng = SeededRng::new(11);
    let mut worst: Real = 0.0;
    for _ in 0..1000 {
        let vol = [1 + rng.below(5), 1 + rng.below(6), 1 + rng.below(6)];
        let c = 1 + rng.below(4);
        let map = Tensor::randn([vol[0], vol[1], vol[2], c], 1.0, &mut rng);
        let p: [Real; 3] = std::array::from_fn(|a| rng.uniform() * (vol[a] - 1) as Real);
        let fast = trilinear_sample(map.data(), vol, c, &p).unwrap();
        let slow = exhaustive_trilinear(map.data(), vol, c, p);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-10, "max deviation {worst}");
}

#[test]
fn integer_points_return_exact_tokens() {
    let mut rng = SeededRng::new(12);
    let vol = [3, 4, 5];
    let map = Tensor::randn([3, 4, 5, 2], 1.0, &mut rng);
    for t in 0..3 {
        for h in 0..4 {
            for w in 0..5 {
                let got = trilinear_sample(map.data(), vol, 2, &[t as Real, h as Real, w as Real]).unwrap();
                let base = ((t * 4 + h) * 5 + w) * 2;
                assert_eq!(got, &map.data()[base..base + 2]);
            }
        }
    }
}

#[test]
fn differentiable_trilinear_agrees_with_kernel() {
    let mut rng = SeededRng::new(13);
    let map = Tensor::randn([2, 3, 3, 4], 1.0, &mut rng);
    let pts = Tensor::from_fn([5, 3], |i| [0.7, 1.3, 1.9][i % 3] * ((i / 3) as Real * 0.2 + 0.2));
    let tape = Tape::new();
    let out = tape.input(map.clone()).trilinear(tape.input(pts.clone())).unwrap();
    let want = trilinear_sample(map.data(), [2, 3, 3], 4, pts.data()).unwrap();
    assert_eq!(out.value().data(), &want[..]);
}

fn mat(store: &ParamStore, id: d2st_core::ParamId) -> Vec<Real> {
    store.value(id).data().to_vec()
}

/// Row vector times a `c×c` matrix.
fn vecmat(x: &[Real], w: &[Real], c: usize) -> Vec<Real> {
    (0..c).map(|j| (0..c).map(|i| x[i] * w[i * c + j]).sum()).collect()
}

#[test]
fn sparse_attention_matches_per_token_loop() {
    let mut rng = SeededRng::new(21);
    for case in 0..100 {
        let heads = 1 + case % 2;
        let c = 2 * (1 + rng.below(3));
        let vol = [1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3)];
        let m = 1 + rng.below(6);
        let mut store = ParamStore::new();
        let proj = Projections::new(&mut store, "p", c, heads, true, &mut rng).unwrap();
        let fmap = Tensor::randn([vol[0], vol[1], vol[2], c], 1.0, &mut rng);
        let keys = Tensor::randn([m, c], 1.0, &mut rng);

        let tape = Tape::with_params(&store);
        let got = sparse_attention(tape.input(fmap.clone()), tape.input(keys.clone()), &proj).unwrap();
        let (wq, wk, wv, wo) = (mat(&store, proj.wq), mat(&store, proj.wk), mat(&store, proj.wv), mat(&store, proj.wo));

        let out = got.output.value();
        let n: usize = vol.iter().product();
        let d = c / heads;
        let kproj: Vec<Vec<Real>> = keys.data().chunks(c).map(|k| vecmat(k, &wk, c)).collect();
        let vproj: Vec<Vec<Real>> = keys.data().chunks(c).map(|k| vecmat(k, &wv, c)).collect();
        for i in 0..n {
            let q = vecmat(&fmap.data()[i * c..(i + 1) * c], &wq, c);
            let mut merged = vec![0.0; c];
            let mut avg = vec![0.0; m];
            for h in 0..heads {
                let r = h * d..(h + 1) * d;
                let scores: Vec<Real> = (0..m)
                    .map(|j| q[r.clone()].iter().zip(&kproj[j][r.clone()]).map(|(a, b)| a * b).sum::<Real>() / (d as Real).sqrt())
                    .collect();
                let mx = scores.iter().copied().fold(Real::NEG_INFINITY, Real::max);
                let e: Vec<Real> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: Real = e.iter().sum();
                for j in 0..m {
                    let a = e[j] / z;
                    avg[j] += a / heads as Real;
                    for k in r.clone() {
                        merged[k] += a * vproj[j][k];
                    }
                }
            }
            let want = vecmat(&merged, &wo, c);
            let row = &out.data()[i * c..(i + 1) * c];
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "case {case} token {i}: {a} vs {b}");
            }
            let wrow = &got.weights.data()[i * m..(i + 1) * m];
            for (a, b) in wrow.iter().zip(&avg) {
                assert!((a - b).abs() < 1e-10);
            }
            assert!((wrow.iter().sum::<Real>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn tuned_kernels_satisfy_the_contract() {
    for row in TUNED_KERNELS {
        for kernel in [row.spatial, row.temporal, row.uniform] {
            let grid = sample_reference_grid(row.volume, kernel).unwrap();
            assert_eq!(grid.point_count(), kernel.n_t * kernel.n_s * kernel.n_s);
            let ext = kernel.cell_extent(row.volume);
            for p in grid.points.data().chunks(3) {
                for a in 0..3 {
                    // Index-space centre of cell k is (k + 0.5)·extent − 0.5.
                    let k = (p[a] + 0.5) / ext[a] - 0.5;
                    assert!((k - k.round()).abs() < 1e-12, "{p:?} off-centre on axis {a}");
                }
            }
        }
        AdstaConfig::new(AdstaVariant::Temporal, row.temporal).validate().unwrap();
        AdstaConfig::new(AdstaVariant::Uniform, row.uniform).validate().unwrap();
        assert!(row.temporal.n_t > row.temporal.n_s);
        let spatial = AdstaConfig::new(AdstaVariant::Spatial, row.spatial).validate();
        if row.spatial.n_s > row.spatial.n_t {
            spatial.unwrap();
        } else {
            // The 7×7 stage lists an isotropic ⟨2,2,2⟩ kernel, which cannot
            // be built as a spatial variant.
            assert_eq!(row.volume, [8, 7, 7]);
            assert!(spatial.is_err());
            AdstaConfig::new(AdstaVariant::Uniform, row.spatial).validate().unwrap();
        }
    }
}

#[test]
fn variants_reject_the_wrong_density_relation() {
    let bad = [
        AdstaConfig::new(AdstaVariant::Spatial, SamplingKernel::new(4, 2).unwrap()),
        AdstaConfig::new(AdstaVariant::Spatial, SamplingKernel::new(4, 4).unwrap()),
        AdstaConfig::new(AdstaVariant::Temporal, SamplingKernel::new(2, 4).unwrap()),
        AdstaConfig::new(AdstaVariant::Uniform, SamplingKernel::new(2, 4).unwrap()),
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

/// Cheapest path by trying every monotone path that enters on row 0 and
/// leaves on the last row.
fn enumerate_paths(d: &[Real], rows: usize, cols: usize) -> Real {
    fn walk(d: &[Real], rows: usize, cols: usize, i: usize, j: usize) -> Real {
        let here = d[i * cols + j];
        if i == rows - 1 {
            // May still step right along the last row, but that only adds cost.
            let mut best = here;
            let mut acc = here;
            for k in j + 1..cols {
                acc += d[i * cols + k];
                best = best.min(acc);
            }
            return best;
        }
        let mut best = here + walk(d, rows, cols, i + 1, j);
        if j + 1 < cols {
            best = best.min(here + walk(d, rows, cols, i + 1, j + 1));
            best = best.min(here + walk(d, rows, cols, i, j + 1));
        }
        best
    }
    (0..cols).map(|j| walk(d, rows, cols, 0, j)).fold(Real::INFINITY, Real::min)
}

fn transpose(d: &[Real], r: usize, c: usize) -> Vec<Real> {
    (0..c * r).map(|k| d[(k % r) * c + k / r]).collect()
}

#[test]
fn otam_matches_path_enumeration() {
    let mut rng = SeededRng::new(31);
    let mut cases = 0;
    for n in [4, 5] {
        for _ in 0..150 {
            let d = Tensor::uniform([n, n], 0.0, 3.0, &mut rng);
            let want = 0.5 * (enumerate_paths(d.data(), n, n) + enumerate_paths(&transpose(d.data(), n, n), n, n));
            let got = otam_distance(&d).unwrap();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            cases += 1;
        }
    }
    assert!(cases >= 200);
}

#[test]
fn bimhm_matches_min_scan() {
    let mut rng = SeededRng::new(32);
    for _ in 0..250 {
        let (r, c) = (1 + rng.below(8), 1 + rng.below(8));
        let d = Tensor::uniform([r, c], 0.0, 5.0, &mut rng);
        let x = d.data();
        let mut row_sum = 0.0;
        for i in 0..r {
            let mut m = Real::INFINITY;
            for j in 0..c {
                if x[i * c + j] < m {
                    m = x[i * c + j];
                }
            }
            row_sum += m;
        }
        let mut col_sum = 0.0;
        for j in 0..c {
            let mut m = Real::INFINITY;
            for i in 0..r {
                if x[i * c + j] < m {
                    m = x[i * c + j];
                }
            }
            col_sum += m;
        }
        let want = (row_sum / r as Real + col_sum / c as Real) / 2.0;
        assert!((bimhm_distance(&d).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn identical_sequences_are_at_distance_zero() {
    let mut rng = SeededRng::new(33);
    for _ in 0..20 {
        let f = Tensor::randn([6, 5], 1.0, &mut rng);
        let d = d2st_core::fewshot::frame_distance_matrix(&f, &f).unwrap();
        assert_eq!(bimhm_distance(&d).unwrap(), 0.0);
        assert_eq!(otam_distance(&d).unwrap(), 0.0);
    }
}

#[test]
fn depthwise_conv_matches_direct_summation() {
    let mut rng = SeededRng::new(41);
    for kernel in [[1, 3, 3], [3, 1, 1], [3, 3, 3], [1, 1, 1]] {
        for stride in [[1, 1, 1], [1, 2, 2]] {
            let input = [4, 5, 6];
            let c = 3;
            let Ok(g) = ConvGeometry::same(input, c, kernel, stride) else { continue };
            let x = Tensor::randn([4, 5, 6, c], 1.0, &mut rng);
            let k = Tensor::randn([c, kernel[0], kernel[1], kernel[2]], 1.0, &mut rng);
            let b = Tensor::randn([c], 1.0, &mut rng);
            let got = dwconv3d(x.data(), k.data(), b.data(), &g);
            let pad = g.padding.map(|p| p as isize);
            for ot in 0..g.output[0] {
                for oh in 0..g.output[1] {
                    for ow in 0..g.output[2] {
                        for ch in 0..c {
                            let mut acc = b.data()[ch];
                            for a in 0..kernel[0] {
                                for bb in 0..kernel[1] {
                                    for dd in 0..kernel[2] {
                                        let t = (ot * stride[0] + a) as isize - pad[0];
                                        let h = (oh * stride[1] + bb) as isize - pad[1];
                                        let w = (ow * stride[2] + dd) as isize - pad[2];
                                        if t < 0 || h < 0 || w < 0 || t >= 4 || h >= 5 || w >= 6 {
                                            continue;
                                        }
                                        let xi = ((t as usize * 5 + h as usize) * 6 + w as usize) * c + ch;
                                        let ki = ((ch * kernel[0] + a) * kernel[1] + bb) * kernel[2] + dd;
                                        acc += x.data()[xi] * k.data()[ki];
                                    }
                                }
                            }
                            let oi = ((ot * g.output[1] + oh) * g.output[2] + ow) * c + ch;
                            assert!((got[oi] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
