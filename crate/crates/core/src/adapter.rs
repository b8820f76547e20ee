//! Bottleneck adapters: the dual-pathway D²ST-Adapter, its convolutional
//! DST sibling, and the single-path vanilla baseline.
//!
//! Dual-pathway form, with `v = x·W_down`:
//!
//! ```text
//! y = GELU(F_S(v) + F_T(v))·W_up  (+ x when residual)
//! ```
//!
//! Both pathways read the same `v` in parallel. With a zero-initialized up
//! projection and the residual skip on, every adapter starts as the
//! identity map.

use serde::{Deserialize, Serialize};

use crate::adsta::{Adsta, AdstaConfig, AdstaTrace};
use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::nn::{ChannelNorm, DepthwiseConv3d, Linear};
use crate::params::{Init, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Real;

/// How one pathway of a dual-pathway adapter is modelled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pathway {
    /// Deformable sparse attention.
    Adsta(AdstaConfig),
    /// Depthwise conv → channel norm → GELU with the given `kt×kh×kw` kernel.
    Conv { kernel: [usize; 3] },
    /// Passes the bottleneck features through unchanged.
    Identity,
    /// Contributes nothing.
    Off,
}

impl Pathway {
    pub fn param_count(&self, bottleneck: usize) -> usize {
        match self {
            Pathway::Adsta(cfg) => cfg.param_count(bottleneck),
            Pathway::Conv { kernel } => bottleneck * kernel.iter().product::<usize>() + bottleneck + 2 * bottleneck,
            Pathway::Identity | Pathway::Off => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterKind {
    Dual { spatial: Pathway, temporal: Pathway },
    /// `GELU(x·W_down)·W_up` with no pathways.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck_ratio: Real,
    pub kind: AdapterKind,
    #[serde(default = "yes")]
    pub residual: bool,
}

fn yes() -> bool {
    true
}

impl AdapterConfig {
    pub const DEFAULT_RATIO: Real = 0.25;

    /// aDSTA-S ⟨2,4,4⟩ and aDSTA-T ⟨8,2,2⟩ for the default 8×8×8 token volume.
    pub fn d2st() -> Self {
        Self::dual(AdstaConfig::spatial(2, 4), AdstaConfig::temporal(8, 2))
    }

    pub fn dual(spatial: AdstaConfig, temporal: AdstaConfig) -> Self {
        Self {
            bottleneck_ratio: Self::DEFAULT_RATIO,
            kind: AdapterKind::Dual {
                spatial: Pathway::Adsta(spatial),
                temporal: Pathway::Adsta(temporal),
            },
            residual: true,
        }
    }

    /// Convolutional pathways: 1×3×3 spatial, 3×1×1 temporal.
    pub fn dst() -> Self {
        Self {
            bottleneck_ratio: Self::DEFAULT_RATIO,
            kind: AdapterKind::Dual {
                spatial: Pathway::Conv { kernel: [1, 3, 3] },
                temporal: Pathway::Conv { kernel: [3, 1, 1] },
            },
            residual: true,
        }
    }

    /// Only a frame-local 1×3×3 spatial pathway; no temporal mixing at all.
    pub fn spatial_only() -> Self {
        Self {
            bottleneck_ratio: Self::DEFAULT_RATIO,
            kind: AdapterKind::Dual {
                spatial: Pathway::Conv { kernel: [1, 3, 3] },
                temporal: Pathway::Off,
            },
            residual: true,
        }
    }

    pub fn vanilla() -> Self {
        Self {
            bottleneck_ratio: Self::DEFAULT_RATIO,
            kind: AdapterKind::Vanilla,
            residual: true,
        }
    }

    pub fn with_ratio(mut self, ratio: Real) -> Self {
        self.bottleneck_ratio = ratio;
        self
    }

    /// `"adsta"`, `"conv3d"`, or `"none"` (vanilla / mixed configurations
    /// report their spatial pathway's kind).
    pub fn pathway_kind(&self) -> &'static str {
        match &self.kind {
            AdapterKind::Vanilla => "none",
            AdapterKind::Dual { spatial, .. } => match spatial {
                Pathway::Adsta(_) => "adsta",
                Pathway::Conv { .. } => "conv3d",
                _ => "none",
            },
        }
    }

    /// `C′ = round(ρ·C)`, at least 1.
    pub fn bottleneck(&self, channels: usize) -> Result<usize> {
        let r = self.bottleneck_ratio;
        if !(r > 0.0 && r <= 1.0) {
            return Err(config_err!("bottleneck ratio must lie in (0, 1], got {r}"));
        }
        let c = (r * channels as Real).round() as usize;
        if c == 0 {
            return Err(config_err!("bottleneck ratio {r} leaves no channels out of {channels}"));
        }
        Ok(c)
    }

    pub fn validate_for(&self, volume: [usize; 3], channels: usize) -> Result<()> {
        let c = self.bottleneck(channels)?;
        if let AdapterKind::Dual { spatial, temporal } = &self.kind {
            for p in [spatial, temporal] {
                match p {
                    Pathway::Adsta(cfg) => cfg.validate_for(volume, c)?,
                    Pathway::Conv { kernel } => {
                        if kernel.iter().any(|k| k % 2 == 0) {
                            return Err(config_err!("conv pathway kernel {kernel:?} must be odd"));
                        }
                    }
                    Pathway::Identity | Pathway::Off => {}
                }
            }
        }
        Ok(())
    }
}

/// Exact number of trainable scalars in one adapter over `channels` channels.
pub fn count_tunable_params(cfg: &AdapterConfig, channels: usize) -> Result<usize> {
    let b = cfg.bottleneck(channels)?;
    let projections = (channels * b + b) + (b * channels + channels);
    Ok(projections
        + match &cfg.kind {
            AdapterKind::Vanilla => 0,
            AdapterKind::Dual { spatial, temporal } => spatial.param_count(b) + temporal.param_count(b),
        })
}

/// Depthwise conv → channel norm → GELU.
#[derive(Clone, Debug)]
pub struct ConvPathway {
    pub conv: DepthwiseConv3d,
    pub norm: ChannelNorm,
}

impl ConvPathway {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: [usize; 3], trainable: bool, rng: &mut SeededRng) -> Self {
        let taps = kernel.iter().product::<usize>() as Real;
        let conv = DepthwiseConv3d::new(
            store,
            &format!("{name}.conv"),
            channels,
            kernel,
            [1, 1, 1],
            Init::Normal(1.0 / taps.sqrt()),
            trainable,
            rng,
        );
        let norm = ChannelNorm::new(store, &format!("{name}.norm"), channels, trainable);
        Self { conv, norm }
    }

    pub fn forward<'t>(&self, v: Var<'t>) -> Result<Var<'t>> {
        Ok(self.norm.forward(self.conv.forward(v)?)?.gelu())
    }
}

/// Both DST branches on the same bottleneck input:
/// `(GELU(Norm(dw₁ₓ₃ₓ₃ v)), GELU(Norm(dw₃ₓ₁ₓ₁ v)))`.
pub fn dst_conv_pathways<'t>(v: Var<'t>, spatial: &ConvPathway, temporal: &ConvPathway) -> Result<(Var<'t>, Var<'t>)> {
    Ok((spatial.forward(v)?, temporal.forward(v)?))
}

#[derive(Clone, Debug)]
pub enum PathwayModule {
    Adsta(Adsta),
    Conv(ConvPathway),
    Identity,
    Off,
}

impl PathwayModule {
    fn build(
        store: &mut ParamStore,
        name: &str,
        bottleneck: usize,
        volume: [usize; 3],
        pathway: &Pathway,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(match pathway {
            Pathway::Adsta(cfg) => PathwayModule::Adsta(Adsta::new(store, name, bottleneck, volume, cfg, trainable, rng)?),
            Pathway::Conv { kernel } => PathwayModule::Conv(ConvPathway::new(store, name, bottleneck, *kernel, trainable, rng)),
            Pathway::Identity => PathwayModule::Identity,
            Pathway::Off => PathwayModule::Off,
        })
    }

    /// `None` for a disabled pathway.
    fn forward<'t>(&self, v: Var<'t>, trace: Option<&mut Option<AdstaTrace>>) -> Result<Option<Var<'t>>> {
        Ok(match self {
            PathwayModule::Adsta(a) => {
                let (y, t) = a.forward_traced(v)?;
                if let Some(slot) = trace {
                    *slot = Some(t);
                }
                Some(y)
            }
            PathwayModule::Conv(c) => Some(c.forward(v)?),
            PathwayModule::Identity => Some(v),
            PathwayModule::Off => None,
        })
    }
}

/// Shifted-point traces of an adapter's aDSTA pathways, if any.
#[derive(Clone, Debug, Default)]
pub struct AdapterTrace {
    pub spatial: Option<AdstaTrace>,
    pub temporal: Option<AdstaTrace>,
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub config: AdapterConfig,
    pub channels: usize,
    pub bottleneck: usize,
    pub down: Linear,
    pub up: Linear,
    pub spatial: PathwayModule,
    pub temporal: PathwayModule,
}

impl Adapter {
    /// Registers a trainable adapter for `[T,H,W,channels]` maps.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        volume: [usize; 3],
        config: &AdapterConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate_for(volume, channels)?;
        let b = config.bottleneck(channels)?;
        let down = Linear::new(
            store,
            &format!("{name}.down"),
            channels,
            b,
            Init::Normal(1.0 / (channels as Real).sqrt()),
            Init::Zeros,
            true,
            rng,
        );
        let (spatial, temporal) = match &config.kind {
            AdapterKind::Vanilla => (PathwayModule::Identity, PathwayModule::Off),
            AdapterKind::Dual { spatial, temporal } => (
                PathwayModule::build(store, &format!("{name}.spatial"), b, volume, spatial, true, rng)?,
                PathwayModule::build(store, &format!("{name}.temporal"), b, volume, temporal, true, rng)?,
            ),
        };
        let up = Linear::new(store, &format!("{name}.up"), b, channels, Init::Zeros, Init::Zeros, true, rng);
        Ok(Self {
            config: config.clone(),
            channels,
            bottleneck: b,
            down,
            up,
            spatial,
            temporal,
        })
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.forward_traced(x, None)
    }

    pub fn forward_traced<'t>(&self, x: Var<'t>, trace: Option<&mut AdapterTrace>) -> Result<Var<'t>> {
        if x.shape().last() != Some(&self.channels) {
            return Err(dim_err!("adapter over {} channels got map {:?}", self.channels, x.shape()));
        }
        let v = self.down.forward(x)?;
        let (st, tt) = match trace {
            Some(t) => (Some(&mut t.spatial), Some(&mut t.temporal)),
            None => (None, None),
        };
        let fused = match (self.spatial.forward(v, st)?, self.temporal.forward(v, tt)?) {
            (Some(s), Some(t)) => s.add(t)?,
            (Some(p), None) | (None, Some(p)) => p,
            (None, None) => v.scale(0.0),
        };
        let y = self.up.forward(fused.gelu())?;
        if self.config.residual {
            y.add(x)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        count_tunable_params(&self.config, self.channels).expect("validated at construction")
    }
}

/// `GELU(x·W_down)·W_up`, plus `x` when `residual`.
pub fn vanilla_adapter_forward<'t>(x: Var<'t>, down: &Linear, up: &Linear, residual: bool) -> Result<Var<'t>> {
    if down.c_out != up.c_in || down.c_in != up.c_out {
        return Err(dim_err!(
            "vanilla adapter chain {}→{} / {}→{} does not close",
            down.c_in,
            down.c_out,
            up.c_in,
            up.c_out
        ));
    }
    let y = up.forward(down.forward(x)?.gelu())?;
    if residual {
        y.add(x)
    } else {
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_count_by_construction() {
        let cfg = AdapterConfig::vanilla();
        assert_eq!(cfg.bottleneck(64).unwrap(), 16);
        assert_eq!(count_tunable_params(&cfg, 64).unwrap(), 64 * 16 + 16 + 16 * 64 + 64);
        assert_eq!(count_tunable_params(&cfg, 64).unwrap(), 2128);
    }

    #[test]
    fn conv_minus_vanilla_is_two_kernels_and_norms() {
        let c = 64;
        let b = 16;
        let diff = count_tunable_params(&AdapterConfig::dst(), c).unwrap()
            - count_tunable_params(&AdapterConfig::vanilla(), c).unwrap();
        let spatial = b * 9 + b + 2 * b;
        let temporal = b * 3 + b + 2 * b;
        assert_eq!(diff, spatial + temporal);
    }

    #[test]
    fn wider_bottleneck_costs_more() {
        for cfg in [AdapterConfig::vanilla(), AdapterConfig::dst(), AdapterConfig::d2st()] {
            let narrow = count_tunable_params(&cfg.clone().with_ratio(0.25), 32).unwrap();
            let wide = count_tunable_params(&cfg.with_ratio(0.5), 32).unwrap();
            assert!(wide > narrow);
        }
    }

    #[test]
    fn ratio_bounds() {
        assert!(AdapterConfig::vanilla().with_ratio(0.0).bottleneck(32).is_err());
        assert!(AdapterConfig::vanilla().with_ratio(1.5).bottleneck(32).is_err());
        assert!(AdapterConfig::vanilla().with_ratio(0.01).bottleneck(32).is_err());
        assert_eq!(AdapterConfig::vanilla().with_ratio(1.0).bottleneck(32).unwrap(), 32);
    }
}
