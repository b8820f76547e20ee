//! Parameterized layers shared by the adapters and the toy backbone.
//!
//! Feature maps are `[T, H, W, C]` tensors. Layers hold [`ParamId`]s into a
//! [`ParamStore`] and read their weights through the tape, so the same layer
//! can be evaluated concurrently on independent tapes.

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Real;

/// `y = x·W + b` along the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        weight_init: Init,
        bias_init: Init,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), weight_init.build(&[c_in, c_out], rng), trainable);
        let bias = store.add(format!("{name}.bias"), bias_init.build(&[c_out], rng), trainable);
        Self {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn param_count(&self) -> usize {
        self.c_in * self.c_out + self.c_out
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let c = shape.last().copied().unwrap_or(0);
        if c != self.c_in {
            return Err(dim_err!(
                "linear layer expects {} input channels, got shape {shape:?}",
                self.c_in
            ));
        }
        let rows = x.value().len() / c;
        let tape = x.tape();
        let y = x
            .reshape(&[rows, c])?
            .matmul(tape.param(self.weight))?
            .add_row(tape.param(self.bias))?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.c_out;
        y.reshape(&out_shape)
    }
}

/// A 1×1×1 convolution: the same linear map applied at every position.
#[derive(Clone, Debug)]
pub struct PointwiseConv3d(pub Linear);

impl PointwiseConv3d {
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape().len() != 4 {
            return Err(dim_err!("pointwise conv expects [T,H,W,C], got {:?}", x.shape()));
        }
        self.0.forward(x)
    }

    pub fn param_count(&self) -> usize {
        self.0.param_count()
    }
}

/// One `kt×kh×kw` filter per channel, zero "same" padding.
#[derive(Clone, Debug)]
pub struct DepthwiseConv3d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub size: [usize; 3],
    pub stride: [usize; 3],
}

impl DepthwiseConv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        size: [usize; 3],
        stride: [usize; 3],
        kernel_init: Init,
        trainable: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let [kt, kh, kw] = size;
        let kernel = store.add(
            format!("{name}.kernel"),
            kernel_init.build(&[channels, kt, kh, kw], rng),
            trainable,
        );
        let bias = store.add(format!("{name}.bias"), Init::Zeros.build(&[channels], rng), trainable);
        Self {
            kernel,
            bias,
            channels,
            size,
            stride,
        }
    }

    pub fn param_count(&self) -> usize {
        self.channels * self.size.iter().product::<usize>() + self.channels
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.dwconv3d(tape.param(self.kernel), tape.param(self.bias), self.stride)
    }
}

/// Per-sample, per-channel normalization over all (T, H, W) positions,
/// followed by a learned affine map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
    pub eps: Real,
}

impl ChannelNorm {
    pub const DEFAULT_EPS: Real = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, trainable: bool) -> Self {
        let scale = store.add(format!("{name}.scale"), crate::Tensor::ones([channels]), trainable);
        let shift = store.add(format!("{name}.shift"), crate::Tensor::zeros([channels]), trainable);
        Self {
            scale,
            shift,
            channels,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape().last() != Some(&self.channels) {
            return Err(dim_err!(
                "channel norm over {} channels got shape {:?}",
                self.channels,
                x.shape()
            ));
        }
        let tape = x.tape();
        x.channel_norm(self.eps)?
            .mul_row(tape.param(self.scale))?
            .add_row(tape.param(self.shift))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::Tensor;

    fn fixed_linear(w: Vec<Real>, b: Vec<Real>, c_in: usize, c_out: usize) -> (ParamStore, Linear) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        let l = Linear::new(&mut store, "l", c_in, c_out, Init::Zeros, Init::Zeros, true, &mut rng);
        store.assign(l.weight, Tensor::new([c_in, c_out], w).unwrap()).unwrap();
        store.assign(l.bias, Tensor::new([c_out], b).unwrap()).unwrap();
        (store, l)
    }

    #[test]
    fn linear_hand_expansion() {
        let (store, l) = fixed_linear(vec![1.0, 1.0, 1.0, -1.0], vec![0.0, 0.0], 2, 2);
        let tape = Tape::with_params(&store);
        let y = l.forward(tape.constant(Tensor::new([2], vec![1.0, 2.0]).unwrap())).unwrap();
        assert_eq!(y.value().data(), &[3.0, -1.0]);
    }

    #[test]
    fn linear_identity_and_bias_broadcast() {
        let (store, l) = fixed_linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let tape = Tape::with_params(&store);
        let x = Tensor::from_fn([3, 2], |i| i as Real - 2.5);
        assert_eq!(*l.forward(tape.constant(x.clone())).unwrap().value(), x);

        let (store, l) = fixed_linear(vec![0.0; 4], vec![0.5, -2.0], 2, 2);
        let tape = Tape::with_params(&store);
        let y = l.forward(tape.constant(x)).unwrap();
        assert_eq!(y.value().data(), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);
    }

    #[test]
    fn linear_channel_mismatch() {
        let (store, l) = fixed_linear(vec![0.0; 4], vec![0.0; 2], 2, 2);
        let tape = Tape::with_params(&store);
        let err = l.forward(tape.constant(Tensor::ones([3]))).unwrap_err();
        assert!(matches!(err, crate::Error::Dimension(_)));
    }
}
