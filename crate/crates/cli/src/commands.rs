//! Subcommand implementations. Each one validates the configuration, does
//! its work, writes its record and tables under `out`, and returns the
//! `result` part of the record.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use d2st_core::backbone::ModelAssembly;
use d2st_core::bench::{bench_case, dense_crosscheck, BenchRow};
use d2st_core::checkpoint::{tensor_from_bytes, tensor_to_bytes, Checkpoint};
use d2st_core::fewshot::{evaluate, train_episodes, EvalReport};
use d2st_core::gradcheck::{check_adapter_end_to_end, check_all_primitives, GRAD_TOL};
use d2st_core::synthvid::{render_video, EpisodeSource, VideoSample};
use d2st_core::viz::{shifted_points, PathwayPoints};
use d2st_core::adsta::SamplingKernel;
use d2st_core::{Error, Primitive, Real, Result, Tensor};

use crate::config::RunConfig;
use crate::output::{write_csv, write_record};

/// Largest parameter count the end-to-end gradient check may use.
pub const GRADCHECK_PARAM_LIMIT: usize = 20_000;

pub fn build_model(cfg: &RunConfig) -> Result<ModelAssembly> {
    ModelAssembly::assemble(&cfg.backbone(), &cfg.insertion, &cfg.adapter_config(), cfg.adapter_seed())
}

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug, Serialize)]
pub struct TrainResult {
    pub steps: usize,
    pub final_loss: Option<Real>,
    pub checkpoint: PathBuf,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub frozen_unchanged: bool,
    pub frozen_params: usize,
    pub tunable_params: usize,
    pub tunable_percent: Real,
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: Real,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<TrainResult> {
    cfg.validate()?;
    prepare(out)?;
    let clock = Instant::now();
    let mut model = build_model(cfg)?;
    let snapshot = model.snapshot_frozen();
    let before = model.frozen_digest();
    let report = train_episodes(&mut model, &cfg.train_source(), &cfg.train_config(), cfg.parallelism)?;
    let after = model.frozen_digest();
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join("checkpoint.bin"));
    Checkpoint::capture(&model, cfg.to_json(), true, cfg.train.steps).save(&path)?;

    let rows: Vec<_> = report
        .losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    write_csv(&out.join("loss_trace.csv"), &rows)?;
    let part = model.partition_parameters();
    let result = TrainResult {
        steps: cfg.train.steps,
        final_loss: report.losses.last().copied(),
        checkpoint: path,
        frozen_unchanged: model.verify_frozen(&snapshot) && before == after,
        frozen_digest_before: before,
        frozen_digest_after: after,
        frozen_params: part.frozen_count,
        tunable_params: part.tunable_count,
        tunable_percent: part.tunable_percent(),
    };
    write_record(out, "train", cfg.to_json(), &result, clock.elapsed().as_secs_f64())?;
    Ok(result)
}

// ---------------------------------------------------------------- eval

/// Loads `path` into `model` after checking that it was produced with the
/// same backbone, adapter and insertion stages as `cfg`.
pub fn load_checkpoint(cfg: &RunConfig, model: &mut ModelAssembly, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let ours = cfg.to_json();
    for key in ["backbone", "adapter", "insertion_stages"] {
        let theirs = ck.header.config.pointer(&format!("/resolved/{key}"));
        if theirs != ours.pointer(&format!("/resolved/{key}")) {
            return Err(Error::Format(format!(
                "schema mismatch: checkpoint `{}` was written with a different {key}",
                path.display()
            )));
        }
    }
    ck.restore(model)?;
    Ok(ck)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub metric: String,
    pub episodes: usize,
    pub accuracy: Real,
    pub ci95: Real,
    /// True when the interval has zero width because only one episode ran.
    pub degenerate_ci: bool,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_steps: Option<usize>,
}

#[derive(Serialize)]
struct EpisodeRow {
    episode: usize,
    accuracy: Real,
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<EvalResult> {
    cfg.validate()?;
    prepare(out)?;
    let clock = Instant::now();
    let mut model = build_model(cfg)?;
    let steps = match checkpoint {
        Some(p) => Some(load_checkpoint(cfg, &mut model, p)?.header.steps),
        None => None,
    };
    let report: EvalReport = evaluate(
        &model,
        &cfg.eval_source(),
        cfg.episodes.eval_episodes,
        cfg.metric,
        cfg.tau,
        cfg.parallelism,
    )?;
    let rows: Vec<_> = report
        .per_episode
        .iter()
        .enumerate()
        .map(|(episode, &accuracy)| EpisodeRow { episode, accuracy })
        .collect();
    write_csv(&out.join("per_episode.csv"), &rows)?;
    let result = EvalResult {
        metric: cfg.metric.to_string(),
        episodes: report.episodes,
        accuracy: report.accuracy,
        ci95: report.ci95,
        degenerate_ci: report.episodes < 2,
        checkpoint: checkpoint.map(Path::to_path_buf),
        checkpoint_steps: steps,
    };
    write_record(out, "eval", cfg.to_json(), &result, clock.elapsed().as_secs_f64())?;
    Ok(result)
}

// ---------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub name: String,
    pub max_rel_error: Real,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckResult {
    pub tolerance: Real,
    pub rows: Vec<GradcheckRow>,
    pub adapter_params: usize,
    pub passed: bool,
}

/// Runs every primitive check and the tiny end-to-end adapter check.
/// `corrupt` swaps one backward rule for a wrong one (for testing the check).
pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path, corrupt: Option<Primitive>) -> Result<GradcheckResult> {
    prepare(out)?;
    let clock = Instant::now();
    let mut rows: Vec<GradcheckRow> = check_all_primitives(cfg.seed, corrupt)?
        .into_iter()
        .map(|r| GradcheckRow {
            passed: r.passed(),
            name: r.name,
            max_rel_error: r.max_rel_error,
        })
        .collect();
    let (err, n) = check_adapter_end_to_end(cfg.seed, corrupt)?;
    if n > GRADCHECK_PARAM_LIMIT {
        return Err(Error::Config(format!(
            "gradient check geometry has {n} parameters, limit is {GRADCHECK_PARAM_LIMIT}"
        )));
    }
    rows.push(GradcheckRow {
        name: "adapter_end_to_end".into(),
        max_rel_error: err,
        passed: err < GRAD_TOL,
    });
    write_csv(&out.join("gradcheck.csv"), &rows)?;
    let result = GradcheckResult {
        tolerance: GRAD_TOL,
        passed: rows.iter().all(|r| r.passed),
        rows,
        adapter_params: n,
    };
    write_record(out, "gradcheck", cfg.to_json(), &result, clock.elapsed().as_secs_f64())?;
    Ok(result)
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Debug, Serialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub crosscheck_volume: [usize; 3],
    pub crosscheck_max_abs_diff: Real,
    /// aDSTA FLOPs below dense FLOPs for every row with fewer points than tokens.
    pub flops_direction_ok: bool,
    /// Measured time ratio above 1 for every row with at least 512 tokens.
    pub time_direction_ok: bool,
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<BenchResult> {
    cfg.validate()?;
    prepare(out)?;
    let clock = Instant::now();
    let b = &cfg.bench;
    let kernel = SamplingKernel::new(b.kernel[0], b.kernel[1])?;
    let rows = b
        .volumes
        .iter()
        .enumerate()
        .map(|(i, &v)| bench_case(v, b.channels, kernel, b.reps, cfg.seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let diff = dense_crosscheck(b.crosscheck_volume, b.channels, cfg.seed)?;
    write_csv(&out.join("bench.csv"), &rows.iter().map(BenchCsvRow::from).collect::<Vec<_>>())?;
    let result = BenchResult {
        flops_direction_ok: rows
            .iter()
            .filter(|r| r.points < r.tokens)
            .all(|r| r.adsta_flops < r.dense_flops),
        time_direction_ok: rows.iter().filter(|r| r.tokens >= 512).all(|r| r.time_ratio > 1.0),
        rows,
        crosscheck_volume: b.crosscheck_volume,
        crosscheck_max_abs_diff: diff,
    };
    write_record(out, "bench", cfg.to_json(), &result, clock.elapsed().as_secs_f64())?;
    Ok(result)
}

/// Flat CSV view of a [`BenchRow`]; the csv crate cannot write nested arrays.
#[derive(Serialize)]
struct BenchCsvRow {
    t: usize,
    h: usize,
    w: usize,
    tokens: usize,
    points: usize,
    channels: usize,
    dense_flops: u64,
    adsta_flops: u64,
    flop_ratio: Real,
    dense_ms: Real,
    adsta_ms: Real,
    conv_ms: Real,
    time_ratio: Real,
    adsta_params: usize,
    conv_params: usize,
}

impl From<&BenchRow> for BenchCsvRow {
    fn from(r: &BenchRow) -> Self {
        let [t, h, w] = r.volume;
        Self {
            t,
            h,
            w,
            tokens: r.tokens,
            points: r.points,
            channels: r.channels,
            dense_flops: r.dense_flops,
            adsta_flops: r.adsta_flops,
            flop_ratio: r.flop_ratio,
            dense_ms: r.dense_ms,
            adsta_ms: r.adsta_ms,
            conv_ms: r.conv_ms,
            time_ratio: r.time_ratio,
            adsta_params: r.adsta_params,
            conv_params: r.conv_params,
        }
    }
}

// ---------------------------------------------------------------- viz

#[derive(Clone, Debug, Serialize)]
pub struct VizSummary {
    pub stage: usize,
    pub pathway: &'static str,
    pub tokens: usize,
    pub points: usize,
    pub total_importance: Real,
}

#[derive(Clone, Debug, Serialize)]
pub struct VizResult {
    pub input: String,
    pub topk: usize,
    pub pathways: Vec<VizSummary>,
}

#[derive(Serialize)]
struct PointRow {
    stage: usize,
    pathway: &'static str,
    rank: Option<usize>,
    point: usize,
    t: Real,
    h: Real,
    w: Real,
    nearest_frame: usize,
    importance: Real,
}

fn point_rows(p: &PathwayPoints, points: &[d2st_core::viz::ShiftedPoint], ranked: bool) -> Vec<PointRow> {
    points
        .iter()
        .enumerate()
        .map(|(i, s)| PointRow {
            stage: p.stage,
            pathway: p.pathway,
            rank: ranked.then_some(i),
            point: s.point,
            t: s.t,
            h: s.h,
            w: s.w,
            nearest_frame: s.nearest_frame,
            importance: s.importance,
        })
        .collect()
}

/// Exports shifted points of every aDSTA pathway for one video: either
/// `input` (a tensor file of shape `[T, H, W, 3]`) or a rendered video of the
/// first class of the configured family.
pub fn cmd_viz(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>, input: Option<&Path>, topk: usize) -> Result<VizResult> {
    cfg.validate()?;
    prepare(out)?;
    let clock = Instant::now();
    let mut model = build_model(cfg)?;
    if let Some(p) = checkpoint {
        load_checkpoint(cfg, &mut model, p)?;
    }
    let (frames, source) = match input {
        Some(p) => (tensor_from_bytes(&std::fs::read(p)?)?, p.display().to_string()),
        None => {
            let spec = cfg.eval_source().pool()[0];
            let v = render_video(&spec, &cfg.geometry(), 0, cfg.viz_seed())?;
            (v.frames, format!("rendered:{:?}/{:?}/{:?}", spec.family, spec.shape, spec.motion))
        }
    };
    let geom = cfg.geometry();
    let want = [geom.frames, geom.height, geom.width, 3];
    if frames.shape() != want {
        return Err(Error::Config(format!("input video has shape {:?}, expected {want:?}", frames.shape())));
    }
    let pathways = shifted_points(&model, &frames)?;
    let mut all = Vec::new();
    let mut top = Vec::new();
    for p in &pathways {
        all.extend(point_rows(p, &p.points, false));
        top.extend(point_rows(p, &p.top_k(topk), true));
    }
    write_csv(&out.join("viz_points.csv"), &all)?;
    write_csv(&out.join("viz_topk.csv"), &top)?;
    let result = VizResult {
        input: source,
        topk,
        pathways: pathways
            .iter()
            .map(|p| VizSummary {
                stage: p.stage,
                pathway: p.pathway,
                tokens: p.tokens,
                points: p.points.len(),
                total_importance: p.total_importance(),
            })
            .collect(),
    };
    write_record(out, "viz", cfg.to_json(), &result, clock.elapsed().as_secs_f64())?;
    Ok(result)
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug, Serialize)]
pub struct VideoEntry {
    pub file: String,
    pub role: &'static str,
    pub label: usize,
    pub class: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpisodeEntry {
    pub episode: usize,
    pub dir: String,
    pub classes: Vec<usize>,
    pub videos: Vec<VideoEntry>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GenDataResult {
    pub pool: Vec<d2st_core::synthvid::SynthClassSpec>,
    pub episodes: Vec<EpisodeEntry>,
}

/// Writes `count` evaluation episodes as raw tensor files plus `manifest.json`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, count: usize) -> Result<GenDataResult> {
    cfg.validate()?;
    prepare(out)?;
    let clock = Instant::now();
    let source = cfg.eval_source();
    let mut episodes = Vec::with_capacity(count);
    for e in 0..count {
        let ep = source.episode(e as u64)?;
        let dir = format!("episode_{e:05}");
        std::fs::create_dir_all(out.join(&dir))?;
        let mut videos = Vec::new();
        let mut dump = |role: &'static str, i: usize, v: &VideoSample| -> Result<()> {
            let file = format!("{dir}/{role}_{i:03}.tensor");
            std::fs::write(out.join(&file), tensor_to_bytes(&v.frames))?;
            videos.push(VideoEntry {
                file,
                role,
                label: v.label,
                class: ep.classes[v.label],
                seed: v.seed,
            });
            Ok(())
        };
        for (i, v) in ep.support.iter().enumerate() {
            dump("support", i, v)?;
        }
        for (i, v) in ep.query.iter().enumerate() {
            dump("query", i, v)?;
        }
        episodes.push(EpisodeEntry {
            episode: e,
            dir,
            classes: ep.classes.clone(),
            videos,
        });
    }
    let result = GenDataResult {
        pool: source.pool(),
        episodes,
    };
    let manifest = serde_json::to_string_pretty(&result).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out.join("manifest.json"), manifest + "\n")?;
    write_record(out, "gen-data", cfg.to_json(), &serde_json::json!({ "episodes": count }), clock.elapsed().as_secs_f64())?;
    Ok(result)
}

/// Reads a frames tensor written by `gen-data`.
pub fn read_video(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&std::fs::read(path)?)
}
