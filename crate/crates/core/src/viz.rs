//! Shifted reference points ranked by accumulated attention.

use serde::Serialize;

use crate::adsta::{point_importance, AdstaTrace};
use crate::autograd::Tape;
use crate::backbone::ModelAssembly;
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftedPoint {
    /// Index of the point in the reference grid.
    pub point: usize,
    pub t: Real,
    pub h: Real,
    pub w: Real,
    /// The frame on which a between-frames point is drawn.
    pub nearest_frame: usize,
    pub importance: Real,
}

#[derive(Clone, Debug, Serialize)]
pub struct PathwayPoints {
    pub stage: usize,
    pub pathway: &'static str,
    /// Number of query tokens; the importances sum to this.
    pub tokens: usize,
    pub points: Vec<ShiftedPoint>,
}

impl PathwayPoints {
    pub fn total_importance(&self) -> Real {
        self.points.iter().map(|p| p.importance).sum()
    }

    /// The `k` most important points, highest first; equal importances keep
    /// grid order.
    pub fn top_k(&self, k: usize) -> Vec<ShiftedPoint> {
        let mut sorted = self.points.clone();
        sorted.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.point.cmp(&b.point)));
        sorted.truncate(k);
        sorted
    }
}

pub fn nearest_frame(t: Real, frames: usize) -> usize {
    (t.round().max(0.0) as usize).min(frames.saturating_sub(1))
}

pub fn pathway_points(stage: usize, pathway: &'static str, trace: &AdstaTrace) -> Result<PathwayPoints> {
    let importance = point_importance(&trace.weights)?;
    let coords = trace.coords.data();
    let points = importance
        .iter()
        .enumerate()
        .map(|(i, &imp)| {
            let [t, h, w] = [coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]];
            ShiftedPoint {
                point: i,
                t,
                h,
                w,
                nearest_frame: nearest_frame(t, trace.volume[0]),
                importance: imp,
            }
        })
        .collect();
    Ok(PathwayPoints {
        stage,
        pathway,
        tokens: trace.weights.shape()[0],
        points,
    })
}

/// Runs one video through `model` and collects every aDSTA pathway's points.
pub fn shifted_points(model: &ModelAssembly, frames: &Tensor) -> Result<Vec<PathwayPoints>> {
    let tape = Tape::with_params(&model.store);
    let (_, traces) = model.forward_video_traced(&tape, frames)?;
    let mut out = Vec::new();
    for st in traces {
        if let Some(t) = &st.trace.spatial {
            out.push(pathway_points(st.stage, "spatial", t)?);
        }
        if let Some(t) = &st.trace.temporal {
            out.push(pathway_points(st.stage, "temporal", t)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_attention_gives_equal_importance() {
        let trace = AdstaTrace {
            volume: [2, 2, 2],
            coords: Tensor::zeros([4, 3]),
            weights: Tensor::full([8, 4], 0.25),
        };
        let p = pathway_points(0, "spatial", &trace).unwrap();
        assert!(p.points.iter().all(|x| x.importance == 2.0));
        assert_eq!(p.total_importance(), 8.0);
        let top = p.top_k(2);
        assert_eq!((top[0].point, top[1].point), (0, 1));
    }

    #[test]
    fn nearest_frame_rounds_and_clamps() {
        assert_eq!(nearest_frame(2.4, 8), 2);
        assert_eq!(nearest_frame(2.5, 8), 3);
        assert_eq!(nearest_frame(7.0, 8), 7);
    }
}
