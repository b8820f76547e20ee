//! Deterministic synthetic videos and few-shot episodes.
//!
//! Two class families:
//!
//! * **temporal**: every class shows the same kind of clip, a shape sliding
//!   horizontally, but with its frames put in a class-specific order. All
//!   classes of the family therefore have identical frame multisets for a
//!   given seed, and only frame order tells them apart.
//! * **spatial**: classes differ by shape and color; motion is present but
//!   appearance alone identifies the class.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Spatial,
    Temporal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeId {
    Disk,
    Square,
    Bar,
}

impl ShapeId {
    pub const ALL: [ShapeId; 3] = [ShapeId::Disk, ShapeId::Square, ShapeId::Bar];

    fn covers(self, dx: Real, dy: Real) -> bool {
        match self {
            ShapeId::Disk => dx * dx + dy * dy <= 16.0,
            ShapeId::Square => dx.abs() <= 3.5 && dy.abs() <= 3.5,
            ShapeId::Bar => dx.abs() <= 5.5 && dy.abs() <= 1.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionId {
    Left,
    Right,
    Up,
    Down,
    Static,
    ReorderA,
    ReorderB,
}

impl MotionId {
    pub const SPATIAL: [MotionId; 5] = [
        MotionId::Left,
        MotionId::Right,
        MotionId::Up,
        MotionId::Down,
        MotionId::Static,
    ];
    pub const TEMPORAL: [MotionId; 6] = [
        MotionId::Right,
        MotionId::Left,
        MotionId::Up,
        MotionId::Down,
        MotionId::ReorderA,
        MotionId::ReorderB,
    ];

    /// Frame order used by the temporal family: output frame `i` shows
    /// keyframe `order[i]`.
    pub fn temporal_order(self, frames: usize) -> Result<Vec<usize>> {
        let ident: Vec<usize> = (0..frames).collect();
        let evens_odds: Vec<usize> = (0..frames).step_by(2).chain((1..frames).step_by(2)).collect();
        // Interleave first and second halves: 0, h, 1, h+1, ...
        let half = frames.div_ceil(2);
        let interleave: Vec<usize> = (0..half)
            .flat_map(|i| std::iter::once(i).chain((i + half < frames).then_some(i + half)))
            .collect();
        let rev = |v: Vec<usize>| v.into_iter().rev().collect::<Vec<_>>();
        Ok(match self {
            MotionId::Right => ident,
            MotionId::Left => rev(ident),
            MotionId::Up => evens_odds,
            MotionId::Down => rev(evens_odds),
            MotionId::ReorderA => interleave,
            MotionId::ReorderB => rev(interleave),
            MotionId::Static => return Err(config_err!("static motion has no temporal-family order")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClassSpec {
    pub family: Family,
    pub shape: ShapeId,
    pub motion: MotionId,
    pub noise_sigma: Real,
}

impl SynthClassSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(config_err!("noise_sigma must be finite and non-negative"));
        }
        match (self.family, self.motion) {
            (Family::Temporal, MotionId::Static) => Err(config_err!("temporal family has no static class")),
            (Family::Spatial, MotionId::ReorderA | MotionId::ReorderB) => {
                Err(config_err!("spatial family has no reorder classes"))
            }
            _ => Ok(()),
        }
    }

    fn color(&self) -> [Real; 3] {
        match self.family {
            Family::Temporal => [0.9, 0.9, 0.9],
            Family::Spatial => match self.motion {
                MotionId::Left => [0.95, 0.2, 0.2],
                MotionId::Right => [0.2, 0.9, 0.25],
                MotionId::Up => [0.25, 0.3, 0.95],
                MotionId::Down => [0.95, 0.85, 0.2],
                _ => [0.85, 0.3, 0.9],
            },
        }
    }
}

impl fmt::Display for SynthClassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}/{:?}/{:?}", self.family, self.shape, self.motion)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for VideoGeometry {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VideoSample {
    /// `[T, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    pub seed: u64,
}

/// Pixel step per frame.
const STEP: Real = 2.0;
const MARGIN: Real = 6.0;

fn paint(frame: &mut [Real], geom: &VideoGeometry, shape: ShapeId, color: [Real; 3], cx: Real, cy: Real) {
    for y in 0..geom.height {
        for x in 0..geom.width {
            if shape.covers(x as Real + 0.5 - cx, y as Real + 0.5 - cy) {
                let p = (y * geom.width + x) * 3;
                frame[p..p + 3].copy_from_slice(&color);
            }
        }
    }
}

fn start(rng: &mut SeededRng, extent: usize, travel: Real) -> Real {
    let lo = MARGIN;
    let hi = (extent as Real - MARGIN - travel).max(lo);
    lo + rng.uniform() * (hi - lo)
}

/// Renders one video of class `spec` with label `label`.
pub fn render_video(spec: &SynthClassSpec, geom: &VideoGeometry, label: usize, seed: u64) -> Result<VideoSample> {
    spec.validate()?;
    if geom.frames == 0 || geom.height == 0 || geom.width == 0 {
        return Err(config_err!("video geometry must be positive"));
    }
    let mut rng = SeededRng::new(seed);
    let travel = STEP * (geom.frames - 1) as Real;
    let frame_len = geom.height * geom.width * 3;
    let color = spec.color();

    let (dx, dy) = match (spec.family, spec.motion) {
        (Family::Temporal, _) | (_, MotionId::Right) => (STEP, 0.0),
        (_, MotionId::Left) => (-STEP, 0.0),
        (_, MotionId::Up) => (0.0, -STEP),
        (_, MotionId::Down) => (0.0, STEP),
        _ => (0.0, 0.0),
    };
    let (mut x0, mut y0) = (
        start(&mut rng, geom.width, if dx != 0.0 { travel } else { 0.0 }),
        start(&mut rng, geom.height, if dy != 0.0 { travel } else { 0.0 }),
    );
    if dx < 0.0 {
        x0 += travel;
    }
    if dy < 0.0 {
        y0 += travel;
    }

    let mut keyframes: Vec<Vec<Real>> = (0..geom.frames)
        .map(|t| {
            let mut f = vec![0.0; frame_len];
            paint(&mut f, geom, spec.shape, color, x0 + dx * t as Real, y0 + dy * t as Real);
            f
        })
        .collect();
    if spec.noise_sigma > 0.0 {
        for f in &mut keyframes {
            for v in f.iter_mut() {
                *v = (*v + spec.noise_sigma * rng.normal()).clamp(0.0, 1.0);
            }
        }
    }
    let order: Vec<usize> = match spec.family {
        Family::Temporal => spec.motion.temporal_order(geom.frames)?,
        Family::Spatial => (0..geom.frames).collect(),
    };
    let mut data = Vec::with_capacity(frame_len * geom.frames);
    for &k in &order {
        data.extend_from_slice(&keyframes[k]);
    }
    Ok(VideoSample {
        frames: Tensor::new([geom.frames, geom.height, geom.width, 3], data)?,
        label,
        seed,
    })
}

/// Six temporal classes sharing one shape.
pub fn temporal_pool(noise_sigma: Real) -> Vec<SynthClassSpec> {
    MotionId::TEMPORAL
        .iter()
        .map(|&motion| SynthClassSpec {
            family: Family::Temporal,
            shape: ShapeId::Disk,
            motion,
            noise_sigma,
        })
        .collect()
}

/// Fifteen spatial classes: every shape with every non-reorder motion.
pub fn spatial_pool(noise_sigma: Real) -> Vec<SynthClassSpec> {
    ShapeId::ALL
        .iter()
        .flat_map(|&shape| {
            MotionId::SPATIAL.iter().map(move |&motion| SynthClassSpec {
                family: Family::Spatial,
                shape,
                motion,
                noise_sigma,
            })
        })
        .collect()
}

pub fn pool_for(family: Family, noise_sigma: Real) -> Vec<SynthClassSpec> {
    match family {
        Family::Temporal => temporal_pool(noise_sigma),
        Family::Spatial => spatial_pool(noise_sigma),
    }
}

/// One N-way K-shot task. Labels are episode-local, `0..way`.
#[derive(Clone, Debug)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Pool indices of the drawn classes; label `i` is `classes[i]`.
    pub classes: Vec<usize>,
    /// Class-major: `support[c * shot + k]`.
    pub support: Vec<VideoSample>,
    pub query: Vec<VideoSample>,
}

impl Episode {
    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|v| v.label).collect()
    }
}

/// Draws `way` distinct classes and `shot + queries` fresh videos for each.
pub fn sample_episode(
    pool: &[SynthClassSpec],
    way: usize,
    shot: usize,
    queries: usize,
    geom: &VideoGeometry,
    rng: &mut SeededRng,
) -> Result<Episode> {
    if way == 0 || shot == 0 || queries == 0 {
        return Err(config_err!("way, shot and queries must be positive"));
    }
    if pool.len() < way {
        return Err(config_err!("class pool of {} cannot supply {way} ways", pool.len()));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(way);

    let mut used = BTreeSet::new();
    let mut fresh = |rng: &mut SeededRng| loop {
        let s = rng.next_u64();
        if used.insert(s) {
            return s;
        }
    };
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for (label, &c) in idx.iter().enumerate() {
        for _ in 0..shot {
            support.push(render_video(&pool[c], geom, label, fresh(rng))?);
        }
        for _ in 0..queries {
            query.push(render_video(&pool[c], geom, label, fresh(rng))?);
        }
    }
    Ok(Episode {
        way,
        shot,
        queries_per_class: queries,
        classes: idx,
        support,
        query,
    })
}

/// Random access to a deterministic stream of episodes.
pub trait EpisodeSource: Sync {
    fn episode(&self, index: u64) -> Result<Episode>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthEpisodes {
    pub family: Family,
    pub noise_sigma: Real,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub geometry: VideoGeometry,
    pub seed: u64,
}

impl SynthEpisodes {
    pub fn pool(&self) -> Vec<SynthClassSpec> {
        pool_for(self.family, self.noise_sigma)
    }
}

impl EpisodeSource for SynthEpisodes {
    fn episode(&self, index: u64) -> Result<Episode> {
        let mut rng = SeededRng::derive(self.seed, index);
        sample_episode(&self.pool(), self.way, self.shot, self.queries, &self.geometry, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(v: &VideoSample, t: usize) -> &[Real] {
        let n = v.frames.len() / v.frames.shape()[0];
        &v.frames.data()[t * n..(t + 1) * n]
    }

    #[test]
    fn orders_are_permutations() {
        for m in MotionId::TEMPORAL {
            let mut o = m.temporal_order(8).unwrap();
            o.sort_unstable();
            assert_eq!(o, (0..8).collect::<Vec<_>>(), "{m:?}");
        }
        assert_eq!(MotionId::Up.temporal_order(8).unwrap(), vec![0, 2, 4, 6, 1, 3, 5, 7]);
        assert_eq!(MotionId::ReorderA.temporal_order(8).unwrap(), vec![0, 4, 1, 5, 2, 6, 3, 7]);
    }

    #[test]
    fn static_noiseless_frames_are_identical() {
        let spec = SynthClassSpec {
            family: Family::Spatial,
            shape: ShapeId::Square,
            motion: MotionId::Static,
            noise_sigma: 0.0,
        };
        let v = render_video(&spec, &VideoGeometry::default(), 0, 3).unwrap();
        for t in 1..8 {
            assert_eq!(frame(&v, 0), frame(&v, t));
        }
        assert!(v.frames.data().iter().any(|&p| p > 0.0));
    }

    #[test]
    fn invalid_family_motion_pairs() {
        let mut spec = temporal_pool(0.0)[0];
        spec.motion = MotionId::Static;
        assert!(render_video(&spec, &VideoGeometry::default(), 0, 0).is_err());
        let mut spec = spatial_pool(0.0)[0];
        spec.motion = MotionId::ReorderB;
        assert!(render_video(&spec, &VideoGeometry::default(), 0, 0).is_err());
    }

    #[test]
    fn episode_arithmetic() {
        let mut rng = SeededRng::new(1);
        let ep = sample_episode(&temporal_pool(0.05), 5, 1, 5, &VideoGeometry::default(), &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 25);
        let mut rng = SeededRng::new(1);
        assert!(sample_episode(&temporal_pool(0.05), 7, 1, 5, &VideoGeometry::default(), &mut rng).is_err());
    }
}
