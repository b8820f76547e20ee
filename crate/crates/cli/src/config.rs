//! Run configuration, loaded from TOML and validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use d2st_core::adapter::{AdapterConfig, AdapterKind, Pathway};
use d2st_core::adsta::{AdstaConfig, AdstaVariant, SamplingKernel};
use d2st_core::backbone::{BackboneConfig, InsertionPolicy};
use d2st_core::fewshot::{Metric, TrainConfig};
use d2st_core::optim::AdamConfig;
use d2st_core::parallel::Parallelism;
use d2st_core::synthvid::{pool_for, Family, SynthEpisodes, VideoGeometry};
use d2st_core::{Error, Real, Result, SeededRng};

/// Adapter family selected by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathwayKind {
    /// Dual aDSTA pathways.
    Adsta,
    /// Dual depthwise-conv pathways (1×3×3 and 3×1×1).
    Conv3d,
    /// Frame-local 1×3×3 conv pathway only.
    SpatialOnly,
    /// Bottleneck without pathways.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSpec {
    pub pathway_kind: PathwayKind,
    pub bottleneck_ratio: Real,
    /// `[n_t, n_s]` of the spatial pathway.
    pub spatial_kernel: [usize; 2],
    /// `[n_t, n_s]` of the temporal pathway.
    pub temporal_kernel: [usize; 2],
    /// Offset range λ, in half grid cells.
    pub range_scale: Real,
    pub heads: usize,
    pub dpe: bool,
    pub residual: bool,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            pathway_kind: PathwayKind::Adsta,
            bottleneck_ratio: AdapterConfig::DEFAULT_RATIO,
            spatial_kernel: [2, 4],
            temporal_kernel: [8, 2],
            range_scale: 1.0,
            heads: 1,
            dpe: true,
            residual: true,
        }
    }
}

fn variant_of(k: [usize; 2]) -> AdstaVariant {
    d2st_core::bench::variant_for(SamplingKernel { n_t: k[0], n_s: k[1] })
}

impl AdapterSpec {
    pub fn resolve(&self) -> AdapterConfig {
        let adsta = |k: [usize; 2]| AdstaConfig {
            variant: variant_of(k),
            kernel: SamplingKernel { n_t: k[0], n_s: k[1] },
            range_scale: self.range_scale,
            heads: self.heads,
            dpe: self.dpe,
        };
        let mut cfg = match self.pathway_kind {
            PathwayKind::Adsta => AdapterConfig::dual(adsta(self.spatial_kernel), adsta(self.temporal_kernel)),
            PathwayKind::Conv3d => AdapterConfig::dst(),
            PathwayKind::SpatialOnly => AdapterConfig::spatial_only(),
            PathwayKind::None => AdapterConfig::vanilla(),
        };
        cfg.bottleneck_ratio = self.bottleneck_ratio;
        cfg.residual = self.residual;
        cfg
    }

    /// Checks that the declared kernels really are spatially / temporally
    /// anisotropic for the aDSTA pathways.
    fn validate(&self) -> Result<()> {
        if self.pathway_kind == PathwayKind::Adsta {
            if variant_of(self.spatial_kernel) == AdstaVariant::Temporal {
                return Err(Error::Config(format!(
                    "spatial pathway kernel {:?} is denser in time than in space",
                    self.spatial_kernel
                )));
            }
            if variant_of(self.temporal_kernel) == AdstaVariant::Spatial {
                return Err(Error::Config(format!(
                    "temporal pathway kernel {:?} is denser in space than in time",
                    self.temporal_kernel
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub family: Family,
    pub noise_sigma: Real,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub eval_episodes: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            family: Family::Temporal,
            noise_sigma: 0.05,
            way: 5,
            shot: 1,
            queries: 5,
            eval_episodes: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// Token volumes `[T, H, W]` to time.
    pub volumes: Vec<[usize; 3]>,
    pub channels: usize,
    /// `[n_t, n_s]` of the timed aDSTA.
    pub kernel: [usize; 2],
    pub reps: usize,
    /// Volume for the dense-attention equivalence check (square grid).
    pub crosscheck_volume: [usize; 3],
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            volumes: vec![[4, 4, 4], [8, 8, 8], [8, 16, 16]],
            channels: 16,
            kernel: [2, 4],
            reps: 10,
            crosscheck_volume: [8, 8, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; backbone, adapter and episode seeds derive from it.
    pub seed: u64,
    pub model: ModelSpec,
    pub adapter: AdapterSpec,
    pub insertion: InsertionPolicy,
    pub metric: Metric,
    /// Logit temperature τ.
    pub tau: Real,
    pub episodes: EpisodeSpec,
    pub train: TrainSpec,
    pub bench: BenchSpec,
    pub parallelism: Parallelism,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub stages: usize,
    pub channels: usize,
    pub frames: usize,
    pub grid: [usize; 2],
    pub image: [usize; 2],
}

impl Default for ModelSpec {
    fn default() -> Self {
        let b = BackboneConfig::four_stage();
        Self {
            stages: b.stages,
            channels: b.channels,
            frames: b.frames,
            grid: b.grid,
            image: b.image,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::default(),
            adapter: AdapterSpec::default(),
            insertion: InsertionPolicy::Full,
            metric: Metric::Bimhm,
            tau: 0.1,
            episodes: EpisodeSpec::default(),
            train: TrainSpec::default(),
            bench: BenchSpec::default(),
            parallelism: Parallelism::Rayon,
            out_dir: None,
        }
    }
}

/// Seed streams derived from the master seed.
mod stream {
    pub const BACKBONE: u64 = 1;
    pub const ADAPTER: u64 = 2;
    pub const TRAIN_EPISODES: u64 = 3;
    pub const EVAL_EPISODES: u64 = 4;
    pub const VIZ_VIDEO: u64 = 5;
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn derived(&self, stream: u64) -> u64 {
        SeededRng::derive(self.seed, stream).next_u64()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            stages: self.model.stages,
            channels: self.model.channels,
            frames: self.model.frames,
            grid: self.model.grid,
            image: self.model.image,
            seed: self.derived(stream::BACKBONE),
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        self.adapter.resolve()
    }

    pub fn adapter_seed(&self) -> u64 {
        self.derived(stream::ADAPTER)
    }

    pub fn viz_seed(&self) -> u64 {
        self.derived(stream::VIZ_VIDEO)
    }

    pub fn geometry(&self) -> VideoGeometry {
        VideoGeometry {
            frames: self.model.frames,
            height: self.model.image[0],
            width: self.model.image[1],
        }
    }

    fn source(&self, stream: u64) -> SynthEpisodes {
        SynthEpisodes {
            family: self.episodes.family,
            noise_sigma: self.episodes.noise_sigma,
            way: self.episodes.way,
            shot: self.episodes.shot,
            queries: self.episodes.queries,
            geometry: self.geometry(),
            seed: self.derived(stream),
        }
    }

    pub fn train_source(&self) -> SynthEpisodes {
        self.source(stream::TRAIN_EPISODES)
    }

    pub fn eval_source(&self) -> SynthEpisodes {
        self.source(stream::EVAL_EPISODES)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            optimizer: self.train.optimizer,
            metric: self.metric,
            tau: self.tau,
        }
    }

    /// Checks every module's invariants without building anything large.
    pub fn validate(&self) -> Result<()> {
        let bb = self.backbone();
        bb.validate()?;
        self.adapter.validate()?;
        let adapter = self.adapter_config();
        if !self.insertion.resolve(bb.stages)?.is_empty() {
            adapter.validate_for(bb.volume(), bb.channels)?;
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        let e = &self.episodes;
        if e.way < 2 || e.shot == 0 || e.queries == 0 {
            return Err(Error::Config("episodes need way ≥ 2, shot ≥ 1, queries ≥ 1".into()));
        }
        if e.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        if !(e.noise_sigma >= 0.0 && e.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        let pool = pool_for(e.family, e.noise_sigma).len();
        if pool < e.way {
            return Err(Error::Config(format!("{:?} family has {pool} classes, fewer than way = {}", e.family, e.way)));
        }
        self.train.optimizer.validate()?;
        let b = &self.bench;
        if b.channels == 0 || b.reps == 0 || b.volumes.is_empty() {
            return Err(Error::Config("bench needs channels, reps and at least one volume".into()));
        }
        SamplingKernel::new(b.kernel[0], b.kernel[1])?;
        Ok(())
    }

    /// The resolved configuration as embedded in output records.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "run": self,
            "resolved": {
                "backbone": self.backbone(),
                "adapter": self.adapter_config(),
                "adapter_seed": self.adapter_seed(),
                "train_episode_seed": self.train_source().seed,
                "eval_episode_seed": self.eval_source().seed,
                "insertion_stages": self.insertion.resolve(self.model.stages).unwrap_or_default(),
                "adapter_position": "after_mixer",
            }
        })
    }

    /// True when the adapter has no pathways that depend on more than one frame.
    pub fn is_frame_local(&self) -> bool {
        match self.adapter_config().kind {
            AdapterKind::Vanilla => true,
            AdapterKind::Dual { spatial, temporal } => [spatial, temporal].iter().all(|p| match p {
                Pathway::Conv { kernel } => kernel[0] == 1,
                Pathway::Identity | Pathway::Off => true,
                Pathway::Adsta(_) => false,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 7\ninsertion = { stages = [0, 2] }\n[adapter]\npathway_kind = \"none\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.insertion, InsertionPolicy::Stages(vec![0, 2]));
        assert_eq!(cfg.adapter.pathway_kind, PathwayKind::None);
        assert_eq!(cfg.episodes.way, 5);
    }

    #[test]
    fn swapped_kernels_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.adapter.spatial_kernel = [8, 2];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
    }
}
