//! Episodic few-shot matching: prototypes, frame distances, the Bi-MHM and
//! OTAM video distances, the episode loss, and training / evaluation loops.
//!
//! Each metric exists twice: a plain function on [`Tensor`]s used for
//! inference, and a differentiable version on [`Var`]s used for training.

use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::ModelAssembly;
use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::kernels;
use crate::optim::{Adam, AdamConfig};
use crate::parallel::Parallelism;
use crate::params::Gradients;
use crate::synthvid::{Episode, EpisodeSource};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Bimhm,
    Otam,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bimhm" | "bi-mhm" => Ok(Metric::Bimhm),
            "otam" => Ok(Metric::Otam),
            other => Err(config_err!("unknown metric `{other}` (expected bimhm or otam)")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Bimhm => "bimhm",
            Metric::Otam => "otam",
        })
    }
}

fn matrix(d: &Tensor) -> Result<(usize, usize)> {
    match d.shape() {
        [r, c] if *r > 0 && *c > 0 => Ok((*r, *c)),
        s => Err(contract_err!("distance matrix must be non-empty 2-D, got {s:?}")),
    }
}

/// Frame-wise mean of `K ≥ 1` equally shaped feature sequences.
pub fn class_prototype(support: &[Tensor]) -> Result<Tensor> {
    let first = support.first().ok_or_else(|| contract_err!("prototype of an empty support set"))?;
    let mut acc = vec![0.0; first.len()];
    for s in support {
        if s.shape() != first.shape() {
            return Err(dim_err!("support shapes {:?} and {:?} differ", first.shape(), s.shape()));
        }
        for (a, v) in acc.iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let k = support.len() as Real;
    Tensor::new(first.shape(), acc.into_iter().map(|v| v / k).collect())
}

/// `D[i][j] = ‖q_i − c_j‖₂` for frame features `q[T_q×d]`, `c[T_c×d]`.
pub fn frame_distance_matrix(q: &Tensor, c: &Tensor) -> Result<Tensor> {
    match (q.shape(), c.shape()) {
        ([tq, d], [tc, d2]) if d == d2 => Tensor::new([*tq, *tc], kernels::pairwise_l2(q.data(), c.data(), *tq, *tc, *d)),
        (a, b) => Err(dim_err!("frame features {a:?} and {b:?} are not matrices of equal width")),
    }
}

/// Mean of row minima and column minima, averaged.
pub fn bimhm_distance(d: &Tensor) -> Result<Real> {
    let (r, c) = matrix(d)?;
    let x = d.data();
    let rows: Real = (0..r)
        .map(|i| x[i * c..(i + 1) * c].iter().copied().fold(Real::INFINITY, Real::min))
        .sum();
    let cols: Real = (0..c)
        .map(|j| (0..r).map(|i| x[i * c + j]).fold(Real::INFINITY, Real::min))
        .sum();
    Ok(0.5 * rows / r as Real + 0.5 * cols / c as Real)
}

/// Relaxed-boundary monotone alignment cost, averaged over `D` and `Dᵀ`.
pub fn otam_distance(d: &Tensor) -> Result<Real> {
    let (r, c) = matrix(d)?;
    let (fwd, _) = kernels::relaxed_dtw(d.data(), r, c);
    let (bwd, _) = kernels::relaxed_dtw(&kernels::transpose(d.data(), r, c), c, r);
    Ok(0.5 * (fwd + bwd))
}

pub fn metric_distance(metric: Metric, d: &Tensor) -> Result<Real> {
    match metric {
        Metric::Bimhm => bimhm_distance(d),
        Metric::Otam => otam_distance(d),
    }
}

/// Differentiable [`metric_distance`].
pub fn metric_distance_var<'t>(metric: Metric, d: Var<'t>) -> Result<Var<'t>> {
    let shape = d.shape();
    if shape.len() != 2 || shape.contains(&0) {
        return Err(contract_err!("distance matrix must be non-empty 2-D, got {shape:?}"));
    }
    match metric {
        Metric::Bimhm => {
            let rows = d.min_axis(1)?.mean_axis(0)?;
            let cols = d.min_axis(0)?.mean_axis(0)?;
            Ok(rows.add(cols)?.scale(0.5))
        }
        Metric::Otam => d.otam(),
    }
}

/// `logit_c = −distance(query, prototype_c) / τ`.
pub fn classify_query(query: &Tensor, prototypes: &[Tensor], metric: Metric, tau: Real) -> Result<Vec<Real>> {
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive"));
    }
    prototypes
        .iter()
        .map(|p| Ok(-metric_distance(metric, &frame_distance_matrix(query, p)?)? / tau))
        .collect()
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of the episode's query logits, on already computed
/// per-video features. `support` is class-major with `shot` videos per class.
pub fn episode_loss_from_features<'t>(
    support: &[Var<'t>],
    query: &[Var<'t>],
    labels: &[usize],
    shot: usize,
    metric: Metric,
    tau: Real,
) -> Result<Var<'t>> {
    if shot == 0 || support.is_empty() || support.len() % shot != 0 {
        return Err(contract_err!("{} support videos do not split into {shot}-shot classes", support.len()));
    }
    if !(tau > 0.0) {
        return Err(config_err!("temperature must be positive"));
    }
    let prototypes = support
        .chunks(shot)
        .map(|c| if c.len() == 1 { Ok(c[0]) } else { Var::stack(c)?.mean_axis(0) })
        .collect::<Result<Vec<_>>>()?;
    let rows = query
        .iter()
        .map(|q| {
            let d = prototypes
                .iter()
                .map(|p| metric_distance_var(metric, q.pairwise_l2(*p)?))
                .collect::<Result<Vec<_>>>()?;
            Var::stack(&d)
        })
        .collect::<Result<Vec<_>>>()?;
    Var::stack(&rows)?.scale(-1.0 / tau).cross_entropy(labels)
}

/// Frame features `[T, C]` for every video of an episode, support first.
pub fn episode_features(model: &ModelAssembly, episode: &Episode, par: Parallelism) -> Result<Vec<Tensor>> {
    let videos: Vec<_> = episode.support.iter().chain(&episode.query).collect();
    par.try_map_indexed(videos.len(), |i| model.features(&videos[i].frames))
}

/// Query accuracy of one episode, in `[0, 1]`.
pub fn episode_accuracy(model: &ModelAssembly, episode: &Episode, metric: Metric, tau: Real, par: Parallelism) -> Result<Real> {
    let feats = episode_features(model, episode, par)?;
    let (support, query) = feats.split_at(episode.support.len());
    let prototypes = support
        .chunks(episode.shot)
        .map(class_prototype)
        .collect::<Result<Vec<_>>>()?;
    let mut correct = 0;
    for (q, v) in query.iter().zip(&episode.query) {
        if argmax(&classify_query(q, &prototypes, metric, tau)?) == v.label {
            correct += 1;
        }
    }
    Ok(correct as Real / query.len() as Real)
}

/// Loss and adapter gradients for one episode.
///
/// Every video is forwarded on its own tape; the loss is then built on a
/// separate tape over the resulting features, and each video tape is
/// finally back-propagated with its feature gradient. Per-video gradients
/// are summed in video order, so the result does not depend on `par`.
pub fn episode_gradients(
    model: &ModelAssembly,
    episode: &Episode,
    metric: Metric,
    tau: Real,
    par: Parallelism,
) -> Result<(Real, Gradients)> {
    let videos: Vec<_> = episode.support.iter().chain(&episode.query).collect();
    let recorded = par.try_map_indexed(videos.len(), |i| -> Result<_> {
        let tape = Tape::with_params(&model.store);
        let f = model.forward_video(&tape, &videos[i].frames)?;
        let (index, value) = (f.index(), (*f.value()).clone());
        Ok((Mutex::new((tape, index)), value))
    })?;

    let loss_tape = Tape::new();
    let leaves: Vec<Var> = recorded.iter().map(|(_, f)| loss_tape.input(f.clone())).collect();
    let (support, query) = leaves.split_at(episode.support.len());
    let loss = episode_loss_from_features(support, query, &episode.query_labels(), episode.shot, metric, tau)?;
    let loss_value = loss.value().item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!("non-finite episode loss {loss_value}")));
    }
    let back = loss.backward_full()?;
    let seeds: Vec<Tensor> = leaves
        .iter()
        .zip(&recorded)
        .map(|(l, (_, f))| back.wrt(*l).cloned().unwrap_or_else(|| Tensor::zeros(f.shape())))
        .collect();

    let per_video = par.try_map_indexed(recorded.len(), |i| -> Result<Gradients> {
        let guard = recorded[i].0.lock().expect("tape lock poisoned");
        let (tape, index) = &*guard;
        Ok(tape.backward_from(tape.var(*index)?, seeds[i].clone())?.into_params())
    })?;
    let mut grads = Gradients::default();
    for g in &per_video {
        grads.merge(g);
    }
    Ok((loss_value, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub optimizer: AdamConfig,
    pub metric: Metric,
    pub tau: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            optimizer: AdamConfig::default(),
            metric: Metric::Bimhm,
            tau: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Episode loss before each update.
    pub losses: Vec<Real>,
}

/// Runs `cfg.steps` Adam updates, one per episode `0..steps` of `source`.
pub fn train_episodes(
    model: &mut ModelAssembly,
    source: &dyn EpisodeSource,
    cfg: &TrainConfig,
    par: Parallelism,
) -> Result<TrainReport> {
    let mut adam = Adam::new(cfg.optimizer)?;
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let episode = source.episode(step as u64)?;
        let (loss, grads) = episode_gradients(model, &episode, cfg.metric, cfg.tau, par).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("training step {step}: {msg}")),
            other => other,
        })?;
        adam.step(&mut model.store, &grads);
        report.losses.push(loss);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    /// Mean query accuracy in percent.
    pub accuracy: Real,
    /// Half-width of the normal-approximation 95% interval, in percent.
    pub ci95: Real,
    pub per_episode: Vec<Real>,
}

/// Mean accuracy and 95% interval from per-episode accuracies in `[0, 1]`.
pub fn summarize(per_episode: Vec<Real>) -> Result<EvalReport> {
    let n = per_episode.len();
    if n == 0 {
        return Err(contract_err!("cannot summarize zero episodes"));
    }
    let mean = per_episode.iter().sum::<Real>() / n as Real;
    let ci = if n > 1 {
        let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<Real>() / (n - 1) as Real;
        1.96 * var.sqrt() / (n as Real).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        episodes: n,
        accuracy: 100.0 * mean,
        ci95: 100.0 * ci,
        per_episode,
    })
}

/// Evaluates episodes `0..count` of `source`. Episodes are spread over
/// workers; each draws from its own derived seed.
pub fn evaluate(
    model: &ModelAssembly,
    source: &dyn EpisodeSource,
    count: usize,
    metric: Metric,
    tau: Real,
    par: Parallelism,
) -> Result<EvalReport> {
    if count == 0 {
        return Err(config_err!("episode count must be at least 1"));
    }
    let accs = par.try_map_indexed(count, |i| {
        let ep = source.episode(i as u64)?;
        episode_accuracy(model, &ep, metric, tau, Parallelism::Sequential)
    })?;
    summarize(accs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_frame_bimhm_is_the_distance() {
        let d = Tensor::new([1, 1], vec![0.7]).unwrap();
        assert_eq!(bimhm_distance(&d).unwrap(), 0.7);
        assert_eq!(otam_distance(&d).unwrap(), 0.7);
    }

    #[test]
    fn empty_matrix_is_a_contract_error() {
        assert!(matches!(bimhm_distance(&Tensor::zeros([3])), Err(Error::Contract(_))));
    }

    #[test]
    fn orthonormal_frames_are_sqrt2_apart() {
        let e = Tensor::eye(3);
        let d = frame_distance_matrix(&e, &e).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { Real::sqrt(2.0) };
                assert!((d.get(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototype_of_opposites_is_zero() {
        let x = Tensor::from_fn([4, 3], |i| i as Real - 5.0);
        let p = class_prototype(&[x.clone(), x.map(|v| -v)]).unwrap();
        assert_eq!(p, Tensor::zeros([4, 3]));
        assert!(class_prototype(&[]).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let tape = Tape::new();
        let f = tape.input(Tensor::ones([2, 3]));
        let loss = episode_loss_from_features(&[f; 5], &[f, f], &[0, 3], 1, Metric::Bimhm, 1.0).unwrap();
        assert!((loss.value().item().unwrap() - (5.0 as Real).ln()).abs() < 1e-12);
    }

    #[test]
    fn summary_of_one_episode_has_zero_width() {
        let r = summarize(vec![1.0]).unwrap();
        assert_eq!((r.accuracy, r.ci95), (100.0, 0.0));
    }

    #[test]
    fn unknown_metric() {
        assert!(matches!("trx".parse::<Metric>(), Err(Error::Config(_))));
    }
}
