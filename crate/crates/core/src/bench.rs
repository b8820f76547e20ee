//! Cost model and wall-clock comparison of dense attention, aDSTA and the
//! convolutional pathways.
//!
//! Analytic FLOPs count only the attention core (scores plus weighted sum,
//! two FLOPs per multiply-add): `4·N·N·C` for dense attention over `N`
//! tokens and `4·N·M·C` for `M` sampled keys.

use std::time::Instant;

use serde::Serialize;

use crate::adapter::{ConvPathway, Pathway};
use crate::adsta::{dense_attention, Adsta, AdstaConfig, AdstaVariant, SamplingKernel};
use crate::autograd::Tape;
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

pub fn dense_attention_flops(tokens: usize, channels: usize) -> u64 {
    4 * (tokens as u64) * (tokens as u64) * channels as u64
}

pub fn adsta_attention_flops(tokens: usize, points: usize, channels: usize) -> u64 {
    4 * (tokens as u64) * (points as u64) * channels as u64
}

/// Median wall-clock milliseconds of `reps` calls.
pub fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Real> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() as Real * 1e3);
    }
    times.sort_by(|a, b| a.total_cmp(b));
    let n = times.len();
    Ok(if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub volume: [usize; 3],
    pub tokens: usize,
    pub points: usize,
    pub channels: usize,
    pub dense_flops: u64,
    pub adsta_flops: u64,
    pub flop_ratio: Real,
    pub dense_ms: Real,
    pub adsta_ms: Real,
    pub conv_ms: Real,
    /// `dense_ms / adsta_ms`.
    pub time_ratio: Real,
    pub adsta_params: usize,
    pub conv_params: usize,
}

/// Variant matching the density relation of `kernel`.
pub fn variant_for(kernel: SamplingKernel) -> AdstaVariant {
    use std::cmp::Ordering::*;
    match kernel.n_s.cmp(&kernel.n_t) {
        Greater => AdstaVariant::Spatial,
        Less => AdstaVariant::Temporal,
        Equal => AdstaVariant::Uniform,
    }
}

/// Times one forward pass of each operator on a random `[T, H, W, C]` map.
/// The aDSTA timing covers the whole module (position embedding, offsets,
/// sampling, attention); the conv timing covers both DST-style pathways.
pub fn bench_case(volume: [usize; 3], channels: usize, kernel: SamplingKernel, reps: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let cfg = AdstaConfig::new(variant_for(kernel), kernel);
    let adsta = Adsta::new(&mut store, "bench.adsta", channels, volume, &cfg, true, &mut rng)?;
    let conv_s = ConvPathway::new(&mut store, "bench.conv_s", channels, [1, 3, 3], true, &mut rng);
    let conv_t = ConvPathway::new(&mut store, "bench.conv_t", channels, [3, 1, 1], true, &mut rng);
    let [t, h, w] = volume;
    let x = Tensor::randn([t, h, w, channels], 1.0, &mut rng);
    let tokens = t * h * w;
    let points = kernel.point_count();

    let dense_ms = median_ms(reps, || {
        let tape = Tape::with_params(&store);
        dense_attention(tape.constant(x.clone()), &adsta.proj)?;
        Ok(())
    })?;
    let adsta_ms = median_ms(reps, || {
        let tape = Tape::with_params(&store);
        adsta.forward(tape.constant(x.clone()))?;
        Ok(())
    })?;
    let conv_ms = median_ms(reps, || {
        let tape = Tape::with_params(&store);
        let v = tape.constant(x.clone());
        conv_s.forward(v)?;
        conv_t.forward(v)?;
        Ok(())
    })?;
    let dense_flops = dense_attention_flops(tokens, channels);
    let adsta_flops = adsta_attention_flops(tokens, points, channels);
    let conv_params = Pathway::Conv { kernel: [1, 3, 3] }.param_count(channels)
        + Pathway::Conv { kernel: [3, 1, 1] }.param_count(channels);
    Ok(BenchRow {
        volume,
        tokens,
        points,
        channels,
        dense_flops,
        adsta_flops,
        flop_ratio: dense_flops as Real / adsta_flops as Real,
        dense_ms,
        adsta_ms,
        conv_ms,
        time_ratio: dense_ms / adsta_ms,
        adsta_params: adsta.param_count(),
        conv_params,
    })
}

/// Largest absolute difference between aDSTA and dense attention when the
/// reference grid covers every token, offsets are zero (as initialized) and
/// the position embedding is off.
pub fn dense_crosscheck(volume: [usize; 3], channels: usize, seed: u64) -> Result<Real> {
    let [t, h, w] = volume;
    if h != w {
        return Err(crate::error::config_err!("the cross-check needs a square token grid, got {volume:?}"));
    }
    let kernel = SamplingKernel::new(t, h)?;
    let mut cfg = AdstaConfig::new(variant_for(kernel), kernel);
    cfg.dpe = false;
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let adsta = Adsta::new(&mut store, "check", channels, volume, &cfg, true, &mut rng)?;
    let x = Tensor::randn([t, h, w, channels], 1.0, &mut rng);
    let tape = Tape::with_params(&store);
    let sparse = adsta.forward(tape.constant(x.clone()))?;
    let dense = dense_attention(tape.constant(x), &adsta.proj)?;
    Ok(sparse.value().max_abs_diff(&dense.output.value()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_ratio_for_512_tokens_and_32_points() {
        let r = dense_attention_flops(512, 16) as f64 / adsta_attention_flops(512, 32, 16) as f64;
        assert_eq!(r, 16.0);
    }

    #[test]
    fn median_of_constant_work() {
        let mut calls = 0;
        median_ms(10, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 10);
    }
}
