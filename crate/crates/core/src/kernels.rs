//! Plain numeric kernels on flat row-major buffers.
//!
//! These carry no gradient bookkeeping. The autograd tape calls them for
//! both passes, and the benchmarks call them directly.

use crate::error::{contract_err, dim_err, Error, Result};
use crate::tensor::Real;

const SQRT_2: Real = std::f64::consts::SQRT_2 as Real;
const INV_SQRT_2PI: Real = 0.398_942_280_401_432_7 as Real;

// ── dense algebra ────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[Real], a_strides: [usize; 2], b: &[Real], b_strides: [usize; 2]) -> Vec<Real> {
    assert!(a.len() >= m * k && b.len() >= k * n, "gemm operands too short");
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let s = |v: usize| v as isize;
    // SAFETY: the strides address exactly the m×k and k×n elements checked
    // above, and `out` holds m·n elements in row-major order.
    unsafe {
        #[cfg(not(feature = "single-precision"))]
        let f = matrixmultiply::dgemm;
        #[cfg(feature = "single-precision")]
        let f = matrixmultiply::sgemm;
        f(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            s(a_strides[0]),
            s(a_strides[1]),
            b.as_ptr(),
            s(b_strides[0]),
            s(b_strides[1]),
            0.0,
            out.as_mut_ptr(),
            s(n),
            1,
        );
    }
    out
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    gemm(m, k, n, a, [k, 1], b, [n, 1])
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub fn matmul_tn(a: &[Real], b: &[Real], k: usize, m: usize, n: usize) -> Vec<Real> {
    gemm(m, k, n, a, [1, m], b, [n, 1])
}

/// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
pub fn matmul_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    gemm(m, k, n, a, [k, 1], b, [1, k])
}

pub fn transpose(a: &[Real], rows: usize, cols: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax over blocks of `width`, stabilized by max subtraction.
pub fn softmax_rows(x: &[Real], width: usize) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Vector-Jacobian product of the row softmax given its output `y`.
pub fn softmax_rows_backward(y: &[Real], grad: &[Real], width: usize) -> Vec<Real> {
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), dst) in y.chunks(width).zip(grad.chunks(width)).zip(out.chunks_mut(width)) {
        let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    out
}

// ── activations ──────────────────────────────────────────────────────

#[cfg(not(feature = "single-precision"))]
pub fn erf(x: Real) -> Real {
    libm::erf(x)
}
#[cfg(feature = "single-precision")]
pub fn erf(x: Real) -> Real {
    libm::erff(x)
}

/// Standard normal CDF.
pub fn normal_cdf(x: Real) -> Real {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: Real) -> Real {
    x * normal_cdf(x)
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: Real) -> Real {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

// ── depthwise 3D convolution ─────────────────────────────────────────

/// Geometry of a depthwise 3D correlation over a `[T, H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    /// Zero padding of `(k - 1) / 2` per axis, so stride 1 with odd kernels
    /// keeps the spatio-temporal shape.
    pub fn same(input: [usize; 3], channels: usize, kernel: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        let mut padding = [0; 3];
        let mut output = [0; 3];
        for a in 0..3 {
            if kernel[a] == 0 || stride[a] == 0 {
                return Err(dim_err!("kernel {kernel:?} and stride {stride:?} must be positive"));
            }
            if stride[a] == 1 && kernel[a] % 2 == 0 {
                return Err(dim_err!("stride-1 convolution needs odd kernel sizes, got {kernel:?}"));
            }
            padding[a] = (kernel[a] - 1) / 2;
            let padded = input[a] + 2 * padding[a];
            if padded < kernel[a] {
                return Err(dim_err!(
                    "kernel {kernel:?} larger than padded input {input:?}"
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            input,
            channels,
            kernel,
            stride,
            padding,
            output,
        })
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Input coordinate hit by output `o` and kernel tap `k` along `axis`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k) as isize - self.padding[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Visits every (output cell, kernel tap, input cell) triple with the
    /// tap index into a `[C, kt, kh, kw]` kernel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ot, oh, ow] = self.output;
        let [kt, kh, kw] = self.kernel;
        let [_, ih, iw] = self.input;
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    let out_cell = (t * oh + h) * ow + w;
                    for a in 0..kt {
                        let Some(st) = self.source(0, t, a) else { continue };
                        for b in 0..kh {
                            let Some(sh) = self.source(1, h, b) else { continue };
                            for d in 0..kw {
                                let Some(sw) = self.source(2, w, d) else { continue };
                                let tap = (a * kh + b) * kw + d;
                                f(out_cell, tap, (st * ih + sh) * iw + sw);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Reorders a `[C, taps]` kernel to `[taps, C]` so the channel loop is contiguous.
fn taps_major(kernel: &[Real], channels: usize, taps: usize) -> Vec<Real> {
    transpose(kernel, channels, taps)
}

pub fn dwconv3d(x: &[Real], kernel: &[Real], bias: &[Real], g: &ConvGeometry) -> Vec<Real> {
    let c = g.channels;
    let cells: usize = g.output.iter().product();
    let kt = taps_major(kernel, c, g.taps());
    let mut out = vec![0.0; cells * c];
    for cell in out.chunks_mut(c) {
        cell.copy_from_slice(bias);
    }
    g.for_each_tap(|o, tap, i| {
        let dst = &mut out[o * c..(o + 1) * c];
        let src = &x[i * c..(i + 1) * c];
        let k = &kt[tap * c..(tap + 1) * c];
        for ((d, &s), &kv) in dst.iter_mut().zip(src).zip(k) {
            *d += kv * s;
        }
    });
    out
}

/// Gradients of [`dwconv3d`] with respect to input, kernel and bias.
pub fn dwconv3d_backward(
    x: &[Real],
    kernel: &[Real],
    grad: &[Real],
    g: &ConvGeometry,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let c = g.channels;
    let taps = g.taps();
    let kt = taps_major(kernel, c, taps);
    let mut dx = vec![0.0; x.len()];
    let mut dk_taps = vec![0.0; taps * c];
    let mut db = vec![0.0; c];
    for cell in grad.chunks(c) {
        for (b, &v) in db.iter_mut().zip(cell) {
            *b += v;
        }
    }
    g.for_each_tap(|o, tap, i| {
        let go = &grad[o * c..(o + 1) * c];
        let xi = &x[i * c..(i + 1) * c];
        let k = &kt[tap * c..(tap + 1) * c];
        let dk = &mut dk_taps[tap * c..(tap + 1) * c];
        for ch in 0..c {
            dk[ch] += xi[ch] * go[ch];
        }
        let dxi = &mut dx[i * c..(i + 1) * c];
        for ch in 0..c {
            dxi[ch] += k[ch] * go[ch];
        }
    });
    (dx, transpose(&dk_taps, taps, c), db)
}

// ── per-channel normalization ────────────────────────────────────────

/// Normalizes each channel of an `[N, C]` buffer over its N rows.
/// Returns `(x̂, 1/σ)`.
pub fn channel_norm(x: &[Real], channels: usize, eps: Real) -> (Vec<Real>, Vec<Real>) {
    let n = x.len() / channels;
    let mut mean = vec![0.0; channels];
    for row in x.chunks(channels) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as Real;
    }
    let mut var = vec![0.0; channels];
    for row in x.chunks(channels) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<Real> = var.iter().map(|s| 1.0 / (s / n as Real + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for (src, dst) in x.chunks(channels).zip(xhat.chunks_mut(channels)) {
        for c in 0..channels {
            dst[c] = (src[c] - mean[c]) * inv_std[c];
        }
    }
    (xhat, inv_std)
}

pub fn channel_norm_backward(xhat: &[Real], inv_std: &[Real], grad: &[Real], channels: usize) -> Vec<Real> {
    let n = (xhat.len() / channels) as Real;
    let mut mean_g = vec![0.0; channels];
    let mut mean_gx = vec![0.0; channels];
    for (gr, xr) in grad.chunks(channels).zip(xhat.chunks(channels)) {
        for c in 0..channels {
            mean_g[c] += gr[c];
            mean_gx[c] += gr[c] * xr[c];
        }
    }
    for c in 0..channels {
        mean_g[c] /= n;
        mean_gx[c] /= n;
    }
    let mut dx = vec![0.0; xhat.len()];
    for ((d, gr), xr) in dx.chunks_mut(channels).zip(grad.chunks(channels)).zip(xhat.chunks(channels)) {
        for c in 0..channels {
            d[c] = inv_std[c] * (gr[c] - mean_g[c] - xr[c] * mean_gx[c]);
        }
    }
    dx
}

// ── trilinear interpolation ──────────────────────────────────────────

/// The two lattice neighbours of `p` along an axis of extent `len` and
/// their tent weights `max(0, 1 - |p - r|)`. For `len == 1` the second
/// neighbour carries zero weight.
#[inline]
pub fn axis_neighbours(p: Real, len: usize) -> ([usize; 2], [Real; 2]) {
    if len == 1 {
        return ([0, 0], [1.0 - p.abs(), 0.0]);
    }
    let lo = (p.floor().max(0.0) as usize).min(len - 2);
    let frac = p - lo as Real;
    ([lo, lo + 1], [1.0 - frac, frac])
}

/// The eight (flat token index, weight) pairs used to interpolate at `point`
/// in a `[T, H, W]` volume.
pub fn trilinear_weights(point: [Real; 3], volume: [usize; 3]) -> [(usize, Real); 8] {
    let axes: [_; 3] = std::array::from_fn(|a| axis_neighbours(point[a], volume[a]));
    let mut out = [(0, 0.0); 8];
    for (n, slot) in out.iter_mut().enumerate() {
        let (bt, bh, bw) = (n >> 2 & 1, n >> 1 & 1, n & 1);
        let idx = (axes[0].0[bt] * volume[1] + axes[1].0[bh]) * volume[2] + axes[2].0[bw];
        *slot = (idx, axes[0].1[bt] * axes[1].1[bh] * axes[2].1[bw]);
    }
    out
}

fn check_points(points: &[Real], volume: [usize; 3]) -> Result<()> {
    for p in points.chunks(3) {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample point {p:?}")));
        }
        for a in 0..3 {
            let hi = (volume[a] - 1) as Real;
            if !(p[a] >= 0.0 && p[a] <= hi) {
                return Err(contract_err!(
                    "sample point {p:?} lies outside the volume {volume:?}"
                ));
            }
        }
    }
    Ok(())
}

/// Samples a `[T, H, W, C]` map at `M` points (`[M, 3]`, index space).
pub fn trilinear_sample(map: &[Real], volume: [usize; 3], channels: usize, points: &[Real]) -> Result<Vec<Real>> {
    check_points(points, volume)?;
    let m = points.len() / 3;
    let mut out = vec![0.0; m * channels];
    for (p, dst) in points.chunks(3).zip(out.chunks_mut(channels)) {
        for (idx, w) in trilinear_weights([p[0], p[1], p[2]], volume) {
            if w == 0.0 {
                continue;
            }
            let src = &map[idx * channels..(idx + 1) * channels];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`trilinear_sample`] with respect to the map and the points.
pub fn trilinear_sample_backward(
    map: &[Real],
    volume: [usize; 3],
    channels: usize,
    points: &[Real],
    grad: &[Real],
) -> (Vec<Real>, Vec<Real>) {
    let mut dmap = vec![0.0; map.len()];
    let mut dpoints = vec![0.0; points.len()];
    for ((p, g), dp) in points.chunks(3).zip(grad.chunks(channels)).zip(dpoints.chunks_mut(3)) {
        let axes: [_; 3] = std::array::from_fn(|a| axis_neighbours(p[a], volume[a]));
        // d(weight)/d(p) per axis: -1 for the low neighbour, +1 for the high one.
        let slope: [[Real; 2]; 3] = std::array::from_fn(|a| {
            if volume[a] == 1 {
                [0.0, 0.0]
            } else {
                [-1.0, 1.0]
            }
        });
        for n in 0..8 {
            let b = [n >> 2 & 1, n >> 1 & 1, n & 1];
            let idx = (axes[0].0[b[0]] * volume[1] + axes[1].0[b[1]]) * volume[2] + axes[2].0[b[2]];
            let w = [axes[0].1[b[0]], axes[1].1[b[1]], axes[2].1[b[2]]];
            let src = &map[idx * channels..(idx + 1) * channels];
            let weight = w[0] * w[1] * w[2];
            let dst = &mut dmap[idx * channels..(idx + 1) * channels];
            let mut dot = 0.0;
            for c in 0..channels {
                dst[c] += weight * g[c];
                dot += src[c] * g[c];
            }
            dp[0] += slope[0][b[0]] * w[1] * w[2] * dot;
            dp[1] += w[0] * slope[1][b[1]] * w[2] * dot;
            dp[2] += w[0] * w[1] * slope[2][b[2]] * dot;
        }
    }
    (dmap, dpoints)
}

// ── frame distances and alignment ────────────────────────────────────

/// `D[i][j] = ‖a_i − b_j‖₂` for `a[rows×d]`, `b[cols×d]`.
pub fn pairwise_l2(a: &[Real], b: &[Real], rows: usize, cols: usize, d: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..cols {
            let bj = &b[j * d..(j + 1) * d];
            out[i * cols + j] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum::<Real>().sqrt();
        }
    }
    out
}

/// Minimum-cost monotone alignment through `D[rows×cols]`: the path may
/// enter anywhere on row 0 and leave anywhere on the last row, stepping
/// right, down, or diagonally. Returns the cost and the visited cells.
pub fn relaxed_dtw(d: &[Real], rows: usize, cols: usize) -> (Real, Vec<(usize, usize)>) {
    let mut acc = vec![0.0; rows * cols];
    acc[..cols].copy_from_slice(&d[..cols]);
    for i in 1..rows {
        for j in 0..cols {
            let mut best = acc[(i - 1) * cols + j];
            if j > 0 {
                best = best.min(acc[(i - 1) * cols + j - 1]).min(acc[i * cols + j - 1]);
            }
            acc[i * cols + j] = d[i * cols + j] + best;
        }
    }
    let last = &acc[(rows - 1) * cols..];
    let mut j = 0;
    for (k, &v) in last.iter().enumerate() {
        if v < last[j] {
            j = k;
        }
    }
    let cost = last[j];
    let mut i = rows - 1;
    let mut path = vec![(i, j)];
    while i > 0 {
        // Tie order: diagonal, up, left.
        let up = acc[(i - 1) * cols + j];
        let (mut ni, mut nj, mut best) = (i - 1, j, up);
        if j > 0 {
            let diag = acc[(i - 1) * cols + j - 1];
            let left = acc[i * cols + j - 1];
            if diag <= best {
                (ni, nj, best) = (i - 1, j - 1, diag);
            }
            if left < best {
                (ni, nj) = (i, j - 1);
            }
        }
        i = ni;
        j = nj;
        path.push((i, j));
    }
    path.reverse();
    (cost, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<Real> = (0..6).map(|v| v as Real).collect(); // 2x3
        let b: Vec<Real> = (0..12).map(|v| v as Real * 0.5).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), ab);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), ab);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::SeededRng::new(5);
        let (m, k, n) = (7, 13, 9);
        let a: Vec<Real> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<Real> = (0..k * n).map(|_| rng.normal()).collect();
        let got = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: Real = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((got[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746).abs() < 1e-8);
        assert!((gelu(-1.0) + 0.158_655_254).abs() < 1e-8);
    }

    #[test]
    fn conv_geometry_same_and_strided() {
        let g = ConvGeometry::same([8, 8, 8], 4, [3, 3, 3], [1, 1, 1]).unwrap();
        assert_eq!(g.output, [8, 8, 8]);
        let g = ConvGeometry::same([8, 8, 8], 4, [3, 3, 3], [4, 2, 2]).unwrap();
        assert_eq!(g.output, [2, 4, 4]);
        assert!(ConvGeometry::same([8, 8, 8], 4, [2, 3, 3], [1, 1, 1]).is_err());
        assert!(ConvGeometry::same([1, 8, 8], 4, [4, 1, 1], [2, 1, 1]).is_err());
    }

    #[test]
    fn neighbour_weights_at_upper_edge() {
        let (idx, w) = axis_neighbours(3.0, 4);
        assert_eq!(idx, [2, 3]);
        assert_eq!(w, [0.0, 1.0]);
    }

    #[test]
    fn dtw_single_cell() {
        let (c, p) = relaxed_dtw(&[2.5], 1, 1);
        assert_eq!(c, 2.5);
        assert_eq!(p, vec![(0, 0)]);
    }
}
