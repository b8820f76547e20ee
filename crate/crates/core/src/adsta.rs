//! Anisotropic deformable spatio-temporal attention.
//!
//! One forward pass:
//!
//! 1. dynamic position embedding: `F' = dwconv₃ₓ₃ₓ₃(x) + x`;
//! 2. a reference grid of `M = n_t·n_s·n_s` cell centres;
//! 3. an offset network (strided depthwise conv → GELU → 1×1×1 conv → tanh)
//!    predicts one bounded 3D offset per reference point;
//! 4. shifted points are clamped into the volume and their features are
//!    read from `F'` by trilinear interpolation;
//! 5. every token of `F'` attends to the `M` interpolated points, which act
//!    as shared keys and values.
//!
//! Offsets are bounded by `λ` times half a grid cell per axis, so with
//! `λ ≤ 1` each point stays inside its own cell.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::nn::{DepthwiseConv3d, Linear, PointwiseConv3d};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Reference-point densities `⟨n_t, n_s, n_s⟩` along time, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingKernel {
    pub n_t: usize,
    pub n_s: usize,
}

impl SamplingKernel {
    pub fn new(n_t: usize, n_s: usize) -> Result<Self> {
        if n_t == 0 || n_s == 0 {
            return Err(config_err!("sampling densities must be positive, got <{n_t}, {n_s}, {n_s}>"));
        }
        Ok(Self { n_t, n_s })
    }

    /// `M = n_t · n_s · n_s`.
    pub fn point_count(&self) -> usize {
        self.n_t * self.n_s * self.n_s
    }

    pub fn densities(&self) -> [usize; 3] {
        [self.n_t, self.n_s, self.n_s]
    }

    pub fn check_fits(&self, volume: [usize; 3]) -> Result<()> {
        let [t, h, w] = volume;
        if self.n_t == 0 || self.n_s == 0 {
            return Err(config_err!("sampling densities must be positive"));
        }
        if self.n_t > t || self.n_s > h.min(w) {
            return Err(config_err!(
                "sampling kernel <{}, {}, {}> exceeds feature volume {volume:?}",
                self.n_t,
                self.n_s,
                self.n_s
            ));
        }
        Ok(())
    }

    /// Cell extents `(T/n_t, H/n_s, W/n_s)` in token units.
    pub fn cell_extent(&self, volume: [usize; 3]) -> [Real; 3] {
        let d = self.densities();
        std::array::from_fn(|a| volume[a] as Real / d[a] as Real)
    }
}

impl std::fmt::Display for SamplingKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "<{}, {}, {}>", self.n_t, self.n_s, self.n_s)
    }
}

/// One row of the tuned kernel table: feature volume and the kernels used
/// by the spatial, temporal and uniform variants.
#[derive(Clone, Copy, Debug)]
pub struct TunedKernels {
    pub backbone: &'static str,
    pub volume: [usize; 3],
    pub spatial: SamplingKernel,
    pub temporal: SamplingKernel,
    pub uniform: SamplingKernel,
}

const fn k(n_t: usize, n_s: usize) -> SamplingKernel {
    SamplingKernel { n_t, n_s }
}

/// Tuned sampling kernels per backbone stage resolution.
pub const TUNED_KERNELS: [TunedKernels; 5] = [
    TunedKernels { backbone: "resnet50", volume: [8, 56, 56], spatial: k(2, 8), temporal: k(8, 4), uniform: k(4, 4) },
    TunedKernels { backbone: "resnet50", volume: [8, 28, 28], spatial: k(2, 4), temporal: k(8, 2), uniform: k(4, 4) },
    TunedKernels { backbone: "resnet50", volume: [8, 14, 14], spatial: k(2, 4), temporal: k(8, 2), uniform: k(4, 4) },
    TunedKernels { backbone: "resnet50", volume: [8, 7, 7], spatial: k(2, 2), temporal: k(8, 1), uniform: k(4, 4) },
    TunedKernels { backbone: "clip-vit-b", volume: [8, 14, 14], spatial: k(2, 4), temporal: k(8, 2), uniform: k(4, 4) },
];

/// Centres of `n` equal cells along an axis of extent `len`, in index space:
/// `(k + 0.5)·len/n − 0.5`.
pub fn cell_centers(len: usize, n: usize) -> Vec<Real> {
    (0..n)
        .map(|k| (k as Real + 0.5) * len as Real / n as Real - 0.5)
        .collect()
}

/// Static reference points, row-major over (t, h, w).
#[derive(Clone, Debug)]
pub struct ReferenceGrid {
    pub volume: [usize; 3],
    pub kernel: SamplingKernel,
    /// `[M, 3]` coordinates `(t, h, w)`.
    pub points: Tensor,
}

impl ReferenceGrid {
    pub fn point_count(&self) -> usize {
        self.points.shape()[0]
    }
}

pub fn sample_reference_grid(volume: [usize; 3], kernel: SamplingKernel) -> Result<ReferenceGrid> {
    kernel.check_fits(volume)?;
    let [ct, ch, cw] = [
        cell_centers(volume[0], kernel.n_t),
        cell_centers(volume[1], kernel.n_s),
        cell_centers(volume[2], kernel.n_s),
    ];
    let mut data = Vec::with_capacity(kernel.point_count() * 3);
    for &t in &ct {
        for &h in &ch {
            for &w in &cw {
                data.extend_from_slice(&[t, h, w]);
            }
        }
    }
    Ok(ReferenceGrid {
        volume,
        kernel,
        points: Tensor::new([kernel.point_count(), 3], data)?,
    })
}

/// Which pathway an aDSTA instance is tailored for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdstaVariant {
    /// Denser in space than in time (`n_s > n_t`).
    Spatial,
    /// Denser in time than in space (`n_t > n_s`).
    Temporal,
    /// Equal densities.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdstaConfig {
    pub variant: AdstaVariant,
    pub kernel: SamplingKernel,
    /// Offset range as a multiple of half a grid cell.
    #[serde(default = "default_range_scale")]
    pub range_scale: Real,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Whether the dynamic position embedding is applied.
    #[serde(default = "default_true")]
    pub dpe: bool,
}

fn default_range_scale() -> Real {
    1.0
}
fn default_heads() -> usize {
    1
}
fn default_true() -> bool {
    true
}

impl AdstaConfig {
    pub fn new(variant: AdstaVariant, kernel: SamplingKernel) -> Self {
        Self {
            variant,
            kernel,
            range_scale: 1.0,
            heads: 1,
            dpe: true,
        }
    }

    pub fn spatial(n_t: usize, n_s: usize) -> Self {
        Self::new(AdstaVariant::Spatial, SamplingKernel { n_t, n_s })
    }

    pub fn temporal(n_t: usize, n_s: usize) -> Self {
        Self::new(AdstaVariant::Temporal, SamplingKernel { n_t, n_s })
    }

    pub fn uniform(n: usize) -> Self {
        Self::new(AdstaVariant::Uniform, SamplingKernel { n_t: n, n_s: n })
    }

    /// Checks the variant/density relation and scalar ranges.
    pub fn validate(&self) -> Result<()> {
        let SamplingKernel { n_t, n_s } = self.kernel;
        SamplingKernel::new(n_t, n_s)?;
        let ok = match self.variant {
            AdstaVariant::Spatial => n_s > n_t,
            AdstaVariant::Temporal => n_t > n_s,
            AdstaVariant::Uniform => n_t == n_s,
        };
        if !ok {
            return Err(config_err!(
                "{:?} variant is inconsistent with sampling kernel {}",
                self.variant,
                self.kernel
            ));
        }
        if !(self.range_scale > 0.0 && self.range_scale.is_finite()) {
            return Err(config_err!("offset range scale must be positive, got {}", self.range_scale));
        }
        if self.heads == 0 {
            return Err(config_err!("head count must be positive"));
        }
        Ok(())
    }

    /// Full validation against a feature volume and channel count.
    pub fn validate_for(&self, volume: [usize; 3], channels: usize) -> Result<()> {
        self.validate()?;
        self.kernel.check_fits(volume)?;
        if channels % self.heads != 0 {
            return Err(config_err!("{} heads do not divide {channels} channels", self.heads));
        }
        offset_stride(volume, self.kernel)?;
        Ok(())
    }

    /// Trainable scalar count of one instance over `channels`.
    pub fn param_count(&self, channels: usize) -> usize {
        let dw = channels * 27 + channels;
        let dpe = if self.dpe { dw } else { 0 };
        let offsets = dw + channels * 3 + 3;
        dpe + offsets + 4 * channels * channels
    }
}

/// Stride of the offset network's depthwise conv: one output per grid cell.
fn offset_stride(volume: [usize; 3], kernel: SamplingKernel) -> Result<[usize; 3]> {
    let d = kernel.densities();
    let mut stride = [0; 3];
    for a in 0..3 {
        if volume[a] % d[a] != 0 {
            return Err(config_err!(
                "feature volume {volume:?} is not divisible into {} cells (offset network stride)",
                kernel
            ));
        }
        stride[a] = volume[a] / d[a];
    }
    Ok(stride)
}

/// Predicts bounded offsets for the reference points.
#[derive(Clone, Debug)]
pub struct OffsetNet {
    pub depthwise: DepthwiseConv3d,
    pub pointwise: PointwiseConv3d,
    pub range_scale: Real,
}

impl OffsetNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        volume: [usize; 3],
        kernel: SamplingKernel,
        range_scale: Real,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let stride = offset_stride(volume, kernel)?;
        let depthwise = DepthwiseConv3d::new(
            store,
            &format!("{name}.dw"),
            channels,
            [3, 3, 3],
            stride,
            Init::Normal(1.0 / (27.0 as Real).sqrt()),
            trainable,
            rng,
        );
        let pointwise = PointwiseConv3d(Linear::new(
            store,
            &format!("{name}.pw"),
            channels,
            3,
            Init::Zeros,
            Init::Zeros,
            trainable,
            rng,
        ));
        Ok(Self {
            depthwise,
            pointwise,
            range_scale,
        })
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.param_count() + self.pointwise.param_count()
    }
}

/// `F' = dwconv(x) + x`.
pub fn dpe_apply<'t>(x: Var<'t>, dpe: &DepthwiseConv3d) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 4 || shape[3] != dpe.channels {
        return Err(dim_err!(
            "position embedding over {} channels got map {shape:?}",
            dpe.channels
        ));
    }
    if dpe.stride != [1, 1, 1] || dpe.size != [3, 3, 3] {
        return Err(config_err!("position embedding must be a 3x3x3 stride-1 depthwise conv"));
    }
    dpe.forward(x)?.add(x)
}

fn volume_of(x: &Var<'_>) -> Result<([usize; 3], usize)> {
    match x.shape().as_slice() {
        &[t, h, w, c] => Ok(([t, h, w], c)),
        s => Err(dim_err!("expected a [T,H,W,C] feature map, got {s:?}")),
    }
}

/// Raw offsets mapped through tanh and scaled to `λ·(cell extent)/2` per axis.
/// Returns an `[M, 3]` value.
pub fn predict_offsets<'t>(fmap: Var<'t>, grid: &ReferenceGrid, net: &OffsetNet) -> Result<Var<'t>> {
    let (volume, _) = volume_of(&fmap)?;
    if volume != grid.volume {
        return Err(config_err!(
            "reference grid built for {:?} applied to map {volume:?}",
            grid.volume
        ));
    }
    let stride = offset_stride(volume, grid.kernel)?;
    if stride != net.depthwise.stride {
        return Err(config_err!(
            "offset network stride {:?} does not match grid cells {stride:?}",
            net.depthwise.stride
        ));
    }
    let m = grid.point_count();
    let ext = grid.kernel.cell_extent(volume);
    let bound = Tensor::new([3], (0..3).map(|a| net.range_scale * ext[a] / 2.0).collect())?;
    let raw = net.pointwise.forward(net.depthwise.forward(fmap)?.gelu())?;
    raw.reshape(&[m, 3])?.tanh().mul_row(fmap.tape().constant(bound))
}

/// Reference points plus offsets, clamped into `[0, L−1]` per axis.
pub fn shift_and_clamp<'t>(grid: &ReferenceGrid, offsets: Var<'t>) -> Result<Var<'t>> {
    let refs = offsets.tape().constant(grid.points.clone());
    let hi: Vec<Real> = grid.volume.iter().map(|&l| (l - 1) as Real).collect();
    refs.add(offsets)?.clamp_cols(&[0.0; 3], &hi)
}

/// Samples `fmap` at `[M, 3]` points by trilinear interpolation.
pub fn trilinear_sample<'t>(fmap: Var<'t>, points: Var<'t>) -> Result<Var<'t>> {
    fmap.trilinear(points)
}

/// Query/key/value/output projections, each `C′×C′`, no bias.
#[derive(Clone, Debug)]
pub struct Projections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub channels: usize,
    pub heads: usize,
}

impl Projections {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize, trainable: bool, rng: &mut SeededRng) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(config_err!("{heads} heads do not divide {channels} channels"));
        }
        let init = Init::Normal(1.0 / (channels as Real).sqrt());
        let mut mk = |suffix: &str| store.add(format!("{name}.{suffix}"), init.build(&[channels, channels], rng), trainable);
        Ok(Self {
            wq: mk("wq"),
            wk: mk("wk"),
            wv: mk("wv"),
            wo: mk("wo"),
            channels,
            heads,
        })
    }
}

/// Output of sparse attention with the head-averaged `[N, M]` weights.
pub struct Attended<'t> {
    pub output: Var<'t>,
    pub weights: Tensor,
}

/// Every token of `fmap` attends to the rows of `keys` (`[M, C′]`):
/// `Z = softmax(q Kᵀ/√d) V · W_o` with `d = C′/heads`.
pub fn sparse_attention<'t>(fmap: Var<'t>, keys: Var<'t>, proj: &Projections) -> Result<Attended<'t>> {
    let (volume, c) = volume_of(&fmap)?;
    if c != proj.channels {
        return Err(dim_err!("attention over {} channels got map with {c}", proj.channels));
    }
    let kshape = keys.shape();
    if kshape.len() != 2 || kshape[1] != c {
        return Err(dim_err!("attention keys must be [M, {c}], got {kshape:?}"));
    }
    let m = kshape[0];
    if m == 0 {
        return Err(config_err!("attention needs at least one key point"));
    }
    if proj.heads == 0 || c % proj.heads != 0 {
        return Err(config_err!("{} heads do not divide {c} channels", proj.heads));
    }
    let tape = fmap.tape();
    let n: usize = volume.iter().product();
    let x = fmap.reshape(&[n, c])?;
    let q = x.matmul(tape.param(proj.wq))?;
    let k = keys.matmul(tape.param(proj.wk))?;
    let v = keys.matmul(tape.param(proj.wv))?;
    let d = c / proj.heads;
    let scale = 1.0 / (d as Real).sqrt();
    let mut heads = Vec::with_capacity(proj.heads);
    let mut weights = Tensor::zeros([n, m]);
    for h in 0..proj.heads {
        let (qh, kh, vh) = if proj.heads == 1 {
            (q, k, v)
        } else {
            (q.slice_cols(h * d, d)?, k.slice_cols(h * d, d)?, v.slice_cols(h * d, d)?)
        };
        let a = qh.matmul(kh.transpose()?)?.scale(scale).softmax()?;
        weights.add_assign(&a.value());
        heads.push(a.matmul(vh)?);
    }
    if proj.heads > 1 {
        let inv = 1.0 / proj.heads as Real;
        weights = weights.map(|w| w * inv);
    }
    let merged = if proj.heads == 1 { heads[0] } else { Var::concat_cols(&heads)? };
    let z = merged.matmul(tape.param(proj.wo))?;
    Ok(Attended {
        output: z.reshape(&[volume[0], volume[1], volume[2], c])?,
        weights,
    })
}

/// Full attention where every token is also a key and value.
pub fn dense_attention<'t>(fmap: Var<'t>, proj: &Projections) -> Result<Attended<'t>> {
    let (volume, c) = volume_of(&fmap)?;
    let n: usize = volume.iter().product();
    let keys = fmap.reshape(&[n, c])?;
    sparse_attention(fmap, keys, proj)
}

/// Accumulated attention mass per key point: column sums of a
/// row-stochastic `[N, M]` weight matrix.
pub fn point_importance(weights: &Tensor) -> Result<Vec<Real>> {
    let &[n, m] = weights.shape() else {
        return Err(dim_err!("attention weights must be [N, M], got {:?}", weights.shape()));
    };
    let mut importance = vec![0.0; m];
    for (i, row) in weights.data().chunks(m).enumerate() {
        let total: Real = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|&w| w < 0.0) {
            return Err(contract_err!("attention row {i} is not normalized (sum {total})"));
        }
        for (acc, w) in importance.iter_mut().zip(row) {
            *acc += w;
        }
    }
    debug_assert!(n > 0);
    Ok(importance)
}

/// Shifted points and attention weights captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AdstaTrace {
    pub volume: [usize; 3],
    /// `[M, 3]` clamped point coordinates.
    pub coords: Tensor,
    /// `[N, M]` head-averaged attention weights.
    pub weights: Tensor,
}

/// One aDSTA instance bound to a fixed feature volume.
#[derive(Clone, Debug)]
pub struct Adsta {
    pub config: AdstaConfig,
    pub volume: [usize; 3],
    pub channels: usize,
    pub grid: ReferenceGrid,
    pub dpe: Option<DepthwiseConv3d>,
    pub offsets: OffsetNet,
    pub proj: Projections,
}

impl Adsta {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        volume: [usize; 3],
        config: &AdstaConfig,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate_for(volume, channels)?;
        let grid = sample_reference_grid(volume, config.kernel)?;
        let dpe = config.dpe.then(|| {
            DepthwiseConv3d::new(store, &format!("{name}.dpe"), channels, [3, 3, 3], [1, 1, 1], Init::Zeros, trainable, rng)
        });
        let offsets = OffsetNet::new(
            store,
            &format!("{name}.offset"),
            channels,
            volume,
            config.kernel,
            config.range_scale,
            trainable,
            rng,
        )?;
        let proj = Projections::new(store, &format!("{name}.attn"), channels, config.heads, trainable, rng)?;
        Ok(Self {
            config: config.clone(),
            volume,
            channels,
            grid,
            dpe,
            offsets,
            proj,
        })
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count(self.channels)
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_traced(x)?.0)
    }

    pub fn forward_traced<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, AdstaTrace)> {
        let (volume, c) = volume_of(&x)?;
        if volume != self.volume || c != self.channels {
            return Err(dim_err!(
                "aDSTA built for {:?}x{} got map {:?}",
                self.volume,
                self.channels,
                x.shape()
            ));
        }
        let fprime = match &self.dpe {
            Some(dpe) => dpe_apply(x, dpe)?,
            None => x,
        };
        let offsets = predict_offsets(fprime, &self.grid, &self.offsets)?;
        let points = shift_and_clamp(&self.grid, offsets)?;
        let sampled = trilinear_sample(fprime, points)?;
        let att = sparse_attention(fprime, sampled, &self.proj)?;
        let trace = AdstaTrace {
            volume,
            coords: (*points.value()).clone(),
            weights: att.weights,
        };
        Ok((att.output, trace))
    }
}
