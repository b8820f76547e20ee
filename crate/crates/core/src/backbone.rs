//! A frozen toy backbone with pluggable adapters.
//!
//! Frames `[T, H_img, W_img, 3]` are cut into non-overlapping patches and
//! linearly embedded into a `[T, H, W, C]` token map. Each stage applies a
//! frozen per-token mixer with a residual skip,
//! `x ← x + GELU(Norm(PW(x)))`, and then the stage's adapter when one is
//! inserted. Frame features are the spatial mean of the final map.
//!
//! All backbone weights are drawn from a seed and marked frozen. Only
//! adapter parameters are trainable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{Adapter, AdapterConfig, AdapterTrace};
use crate::autograd::{Tape, Var};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{ChannelNorm, Linear, PointwiseConv3d};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: usize,
    pub channels: usize,
    pub frames: usize,
    /// Token grid height and width.
    pub grid: [usize; 2],
    /// Input frame height and width in pixels; multiples of the grid.
    pub image: [usize; 2],
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: 12,
            channels: 32,
            frames: 8,
            grid: [8, 8],
            image: [32, 32],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// The four-stage variant.
    pub fn four_stage() -> Self {
        Self {
            stages: 4,
            ..Self::default()
        }
    }

    pub fn volume(&self) -> [usize; 3] {
        [self.frames, self.grid[0], self.grid[1]]
    }

    pub fn patch(&self) -> [usize; 2] {
        [self.image[0] / self.grid[0], self.image[1] / self.grid[1]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.channels == 0 || self.frames == 0 {
            return Err(config_err!("backbone needs positive stages, channels and frames"));
        }
        for a in 0..2 {
            if self.grid[a] == 0 || self.image[a] == 0 || self.image[a] % self.grid[a] != 0 {
                return Err(config_err!(
                    "image {:?} must be a positive multiple of the token grid {:?}",
                    self.image,
                    self.grid
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Stage {
    mixer: PointwiseConv3d,
    norm: ChannelNorm,
}

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    embed: Linear,
    stages: Vec<Stage>,
}

impl ToyBackbone {
    /// Registers frozen, seed-determined weights in `store`.
    pub fn build(config: &BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed);
        let [ph, pw] = config.patch();
        let patch_dim = ph * pw * 3;
        let c = config.channels;
        let embed = Linear::new(
            store,
            "backbone.embed",
            patch_dim,
            c,
            Init::Normal(1.0 / (patch_dim as Real).sqrt()),
            Init::Normal(0.1),
            false,
            &mut rng,
        );
        let stages = (0..config.stages)
            .map(|i| {
                let name = format!("backbone.stage{i:02}");
                Stage {
                    mixer: PointwiseConv3d(Linear::new(
                        store,
                        &format!("{name}.mixer"),
                        c,
                        c,
                        Init::Normal(1.0 / (c as Real).sqrt()),
                        Init::Normal(0.1),
                        false,
                        &mut rng,
                    )),
                    norm: ChannelNorm::new(store, &format!("{name}.norm"), c, false),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            stages,
        })
    }

    /// Cuts frames into `[T, H, W, ph·pw·3]` patch vectors.
    pub fn patchify(&self, frames: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let expected = [cfg.frames, cfg.image[0], cfg.image[1], 3];
        if frames.shape() != expected {
            return Err(dim_err!(
                "expected frames of shape {expected:?}, got {:?}",
                frames.shape()
            ));
        }
        let [gh, gw] = cfg.grid;
        let [ph, pw] = cfg.patch();
        let [_, ih, iw] = [cfg.frames, cfg.image[0], cfg.image[1]];
        let dim = ph * pw * 3;
        let mut out = Vec::with_capacity(frames.len());
        for t in 0..cfg.frames {
            for h in 0..gh {
                for w in 0..gw {
                    for dy in 0..ph {
                        let row = ((t * ih + h * ph + dy) * iw + w * pw) * 3;
                        out.extend_from_slice(&frames.data()[row..row + pw * 3]);
                    }
                }
            }
        }
        Tensor::new([cfg.frames, gh, gw, dim], out)
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }
}

/// Where adapters go.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionPolicy {
    /// First half of the stages.
    Early,
    /// Last half.
    Late,
    /// Every other stage, starting with the first.
    Skip,
    /// Every stage.
    Full,
    /// No adapters.
    None,
    /// Explicit zero-based stage indices.
    Stages(Vec<usize>),
}

impl InsertionPolicy {
    /// Zero-based stage indices, ascending.
    pub fn resolve(&self, stages: usize) -> Result<Vec<usize>> {
        let half = stages / 2;
        let mut idx: Vec<usize> = match self {
            InsertionPolicy::Early => (0..half).collect(),
            InsertionPolicy::Late => (stages - half..stages).collect(),
            InsertionPolicy::Skip => (0..stages).step_by(2).collect(),
            InsertionPolicy::Full => (0..stages).collect(),
            InsertionPolicy::None => Vec::new(),
            InsertionPolicy::Stages(s) => {
                let mut seen = std::collections::BTreeSet::new();
                for &i in s {
                    if i >= stages {
                        return Err(config_err!("stage {i} out of range for {stages} stages"));
                    }
                    if !seen.insert(i) {
                        return Err(config_err!("duplicate adapter insertion at stage {i}"));
                    }
                }
                s.clone()
            }
        };
        idx.sort_unstable();
        Ok(idx)
    }
}

/// Parameter partition with counts.
#[derive(Clone, Debug)]
pub struct Partition {
    pub frozen: Vec<ParamId>,
    pub tunable: Vec<ParamId>,
    pub frozen_count: usize,
    pub tunable_count: usize,
}

impl Partition {
    /// `tunable / (tunable + frozen)`.
    pub fn tunable_fraction(&self) -> Real {
        let total = self.tunable_count + self.frozen_count;
        if total == 0 {
            0.0
        } else {
            self.tunable_count as Real / total as Real
        }
    }

    pub fn tunable_percent(&self) -> Real {
        100.0 * self.tunable_fraction()
    }
}

/// Frozen parameter values captured before optimization.
#[derive(Clone, Debug)]
pub struct FrozenSnapshot(Vec<(ParamId, Tensor)>);

/// Captured traces of every aDSTA pathway in a forward pass.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub stage: usize,
    pub trace: AdapterTrace,
}

/// A frozen backbone with adapters at selected stages, sharing one store.
#[derive(Clone, Debug)]
pub struct ModelAssembly {
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub adapters: BTreeMap<usize, Adapter>,
    pub adapter_config: Option<AdapterConfig>,
}

impl ModelAssembly {
    /// Backbone without adapters.
    pub fn backbone_only(config: &BackboneConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::build(config, &mut store)?;
        Ok(Self {
            store,
            backbone,
            adapters: BTreeMap::new(),
            adapter_config: None,
        })
    }

    /// Builds the backbone and inserts one adapter after the mixer of every
    /// stage selected by `policy`. Adapter weights are drawn from `adapter_seed`.
    pub fn assemble(
        config: &BackboneConfig,
        policy: &InsertionPolicy,
        adapter: &AdapterConfig,
        adapter_seed: u64,
    ) -> Result<Self> {
        let mut asm = Self::backbone_only(config)?;
        let stages = policy.resolve(config.stages)?;
        let mut rng = SeededRng::new(adapter_seed);
        for s in stages {
            asm.insert_adapter(s, adapter, &mut rng)?;
        }
        asm.adapter_config = Some(adapter.clone());
        Ok(asm)
    }

    pub fn insert_adapter(&mut self, stage: usize, config: &AdapterConfig, rng: &mut SeededRng) -> Result<()> {
        if stage >= self.backbone.stage_count() {
            return Err(config_err!("stage {stage} out of range"));
        }
        if self.adapters.contains_key(&stage) {
            return Err(config_err!("duplicate adapter insertion at stage {stage}"));
        }
        let cfg = &self.backbone.config;
        let adapter = Adapter::new(
            &mut self.store,
            &format!("adapter{stage:02}"),
            cfg.channels,
            cfg.volume(),
            config,
            rng,
        )?;
        self.adapters.insert(stage, adapter);
        Ok(())
    }

    pub fn partition_parameters(&self) -> Partition {
        let (tunable, frozen): (Vec<_>, Vec<_>) = self.store.ids().partition(|&id| self.store.get(id).trainable);
        Partition {
            frozen_count: frozen.iter().map(|&id| self.store.get(id).numel()).sum(),
            tunable_count: tunable.iter().map(|&id| self.store.get(id).numel()).sum(),
            frozen,
            tunable,
        }
    }

    pub fn snapshot_frozen(&self) -> FrozenSnapshot {
        FrozenSnapshot(
            self.store
                .iter()
                .filter(|(_, p)| !p.trainable)
                .map(|(id, p)| (id, p.value.clone()))
                .collect(),
        )
    }

    /// True iff every frozen parameter is bitwise identical to `snapshot`.
    pub fn verify_frozen(&self, snapshot: &FrozenSnapshot) -> bool {
        let current = self.store.iter().filter(|(_, p)| !p.trainable).count();
        current == snapshot.0.len()
            && snapshot
                .0
                .iter()
                .all(|(id, t)| !self.store.get(*id).trainable && self.store.value(*id).bitwise_eq(t))
    }

    /// SHA-256 over names and value bits of every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter().filter(|(_, p)| !p.trainable) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-frame features `[T, C]` of one video.
    pub fn forward_video<'t>(&self, tape: &'t Tape<'t>, frames: &Tensor) -> Result<Var<'t>> {
        self.forward_inner(tape, frames, None)
    }

    pub fn forward_video_traced<'t>(&self, tape: &'t Tape<'t>, frames: &Tensor) -> Result<(Var<'t>, Vec<StageTrace>)> {
        let mut traces = Vec::new();
        let f = self.forward_inner(tape, frames, Some(&mut traces))?;
        Ok((f, traces))
    }

    fn forward_inner<'t>(&self, tape: &'t Tape<'t>, frames: &Tensor, mut traces: Option<&mut Vec<StageTrace>>) -> Result<Var<'t>> {
        let patches = self.backbone.patchify(frames)?;
        let mut x = self.backbone.embed.forward(tape.constant(patches))?;
        for (i, stage) in self.backbone.stages.iter().enumerate() {
            let mixed = stage.norm.forward(stage.mixer.forward(x)?)?.gelu();
            x = x.add(mixed)?;
            if let Some(adapter) = self.adapters.get(&i) {
                match traces.as_deref_mut() {
                    Some(list) => {
                        let mut trace = AdapterTrace::default();
                        x = adapter.forward_traced(x, Some(&mut trace))?;
                        list.push(StageTrace { stage: i, trace });
                    }
                    None => x = adapter.forward(x)?,
                }
            }
        }
        let cfg = &self.backbone.config;
        x.reshape(&[cfg.frames, cfg.grid[0] * cfg.grid[1], cfg.channels])?.mean_axis(1)
    }

    /// Frame features as a plain tensor.
    pub fn features(&self, frames: &Tensor) -> Result<Tensor> {
        let tape = Tape::with_params(&self.store);
        let f = self.forward_video(&tape, frames)?;
        let out = (*f.value()).clone();
        Ok(out)
    }
}
