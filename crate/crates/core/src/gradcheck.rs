//! Central-difference gradient oracle and per-primitive gradient checks.

use crate::adapter::{Adapter, AdapterConfig};
use crate::adsta::AdstaConfig;
use crate::autograd::{Primitive, Tape, Var};
use crate::params::ParamStore;
use crate::error::{contract_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Default step for central differences.
pub const FD_EPS: Real = 1e-5;
/// Acceptance threshold for analytic-vs-numeric relative error.
pub const GRAD_TOL: Real = 1e-4;

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<Real>, x: &Tensor, eps: Real) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(contract_err!("finite-difference step must be positive, got {eps}"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "function is not finite around coordinate {i} ({down}, {up})"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Real {
    let scale = analytic.max_abs().max(numeric.max_abs()).max(1e-8);
    analytic.max_abs_diff(numeric) / scale
}

/// Compares analytic gradients of `build(inputs)` (a scalar) against
/// central differences for every input. Returns the worst relative error.
pub fn check_graph<F>(inputs: &[Tensor], build: F, corrupt: Option<Primitive>) -> Result<Real>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut tape = Tape::new();
    if let Some(p) = corrupt {
        tape = tape.with_corrupted_rule(p);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&vars)?;
    let back = loss.backward_full()?;
    let mut worst: Real = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = back.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.input(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                build(&vars)?.value().item()
            },
            x,
            FD_EPS,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// `Σ v ⊙ w` for a fixed weight tensor `w`, turning any output into a
/// scalar with a non-trivial upstream gradient.
pub fn weighted_sum<'t>(v: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = v.tape().constant(weights.clone());
    Ok(v.mul(w)?.sum())
}

/// One row of a gradient-check report.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: Real,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOL
    }
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Runs the gradient check of one primitive on random inputs.
pub fn check_primitive(p: Primitive, rng: &mut SeededRng, corrupt: Option<Primitive>) -> Result<Real> {
    let r = |s: &[usize], rng: &mut SeededRng| randn(s, rng);
    match p {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let w = r(&[3, 4], rng);
            let ins = [r(&[3, 4], rng), r(&[3, 4], rng)];
            check_graph(
                &ins,
                |v| {
                    let y = match p {
                        Primitive::Add => v[0].add(v[1])?,
                        Primitive::Sub => v[0].sub(v[1])?,
                        _ => v[0].mul(v[1])?,
                    };
                    weighted_sum(y, &w)
                },
                corrupt,
            )
        }
        Primitive::Scale => {
            let w = r(&[3, 4], rng);
            check_graph(&[r(&[3, 4], rng)], |v| weighted_sum(v[0].scale(-1.7), &w), corrupt)
        }
        Primitive::AddRow | Primitive::MulRow => {
            let w = r(&[2, 3, 4], rng);
            let ins = [r(&[2, 3, 4], rng), r(&[4], rng)];
            check_graph(
                &ins,
                |v| {
                    let y = if p == Primitive::AddRow {
                        v[0].add_row(v[1])?
                    } else {
                        v[0].mul_row(v[1])?
                    };
                    weighted_sum(y, &w)
                },
                corrupt,
            )
        }
        Primitive::MatMul => {
            let w = r(&[3, 2], rng);
            let ins = [r(&[3, 4], rng), r(&[4, 2], rng)];
            check_graph(&ins, |v| weighted_sum(v[0].matmul(v[1])?, &w), corrupt)
        }
        Primitive::Transpose => {
            let w = r(&[4, 3], rng);
            check_graph(&[r(&[3, 4], rng)], |v| weighted_sum(v[0].transpose()?, &w), corrupt)
        }
        Primitive::Reshape => {
            let w = r(&[3, 4], rng);
            check_graph(&[r(&[2, 6], rng)], |v| weighted_sum(v[0].reshape(&[3, 4])?, &w), corrupt)
        }
        Primitive::Gelu => {
            let w = r(&[3, 4], rng);
            check_graph(&[r(&[3, 4], rng)], |v| weighted_sum(v[0].gelu(), &w), corrupt)
        }
        Primitive::Tanh => {
            let w = r(&[3, 4], rng);
            check_graph(&[r(&[3, 4], rng)], |v| weighted_sum(v[0].tanh(), &w), corrupt)
        }
        Primitive::Softmax => {
            let w = r(&[3, 5], rng);
            check_graph(&[r(&[3, 5], rng)], |v| weighted_sum(v[0].softmax()?, &w), corrupt)
        }
        Primitive::Sum => check_graph(&[r(&[3, 4], rng)], |v| Ok(v[0].sum().scale(1.3)), corrupt),
        Primitive::MeanAxis => {
            let w = r(&[2, 4], rng);
            check_graph(&[r(&[2, 3, 4], rng)], |v| weighted_sum(v[0].mean_axis(1)?, &w), corrupt)
        }
        Primitive::MinAxis => {
            let w = r(&[3], rng);
            check_graph(&[r(&[3, 4], rng)], |v| weighted_sum(v[0].min_axis(1)?, &w), corrupt)
        }
        Primitive::SliceCols => {
            let w = r(&[3, 3], rng);
            check_graph(&[r(&[3, 5], rng)], |v| weighted_sum(v[0].slice_cols(1, 3)?, &w), corrupt)
        }
        Primitive::ConcatCols => {
            let w = r(&[3, 5], rng);
            let ins = [r(&[3, 2], rng), r(&[3, 3], rng)];
            check_graph(&ins, |v| weighted_sum(Var::concat_cols(v)?, &w), corrupt)
        }
        Primitive::Stack => {
            let w = r(&[2, 2, 3], rng);
            let ins = [r(&[2, 3], rng), r(&[2, 3], rng)];
            check_graph(&ins, |v| weighted_sum(Var::stack(v)?, &w), corrupt)
        }
        Primitive::ClampCols => {
            let w = r(&[5, 3], rng);
            let x = Tensor::uniform([5, 3], -1.5, 1.5, rng);
            check_graph(
                &[x],
                |v| weighted_sum(v[0].clamp_cols(&[-1.0, -0.5, 0.0], &[1.0, 0.5, 1.2])?, &w),
                corrupt,
            )
        }
        Primitive::DwConv3d => {
            let w1 = r(&[4, 4, 4, 3], rng);
            let w2 = r(&[2, 2, 2, 3], rng);
            let ins = [r(&[4, 4, 4, 3], rng), r(&[3, 3, 3, 3], rng), r(&[3], rng)];
            let same = check_graph(&ins, |v| weighted_sum(v[0].dwconv3d(v[1], v[2], [1, 1, 1])?, &w1), corrupt)?;
            let strided = check_graph(&ins, |v| weighted_sum(v[0].dwconv3d(v[1], v[2], [2, 2, 2])?, &w2), corrupt)?;
            Ok(same.max(strided))
        }
        Primitive::ChannelNorm => {
            let w = r(&[2, 3, 3, 4], rng);
            check_graph(&[r(&[2, 3, 3, 4], rng)], |v| weighted_sum(v[0].channel_norm(1e-5)?, &w), corrupt)
        }
        Primitive::Trilinear => {
            let w = r(&[5, 2], rng);
            let map = r(&[3, 4, 4, 2], rng);
            let pts = Tensor::from_fn([5, 3], |i| {
                let hi = [2.0, 3.0, 3.0][i % 3];
                0.05 + (hi - 0.1) * rng.uniform()
            });
            check_graph(&[map, pts], |v| weighted_sum(v[0].trilinear(v[1])?, &w), corrupt)
        }
        Primitive::PairwiseL2 => {
            let w = r(&[3, 4], rng);
            let ins = [r(&[3, 4], rng), r(&[4, 4], rng)];
            check_graph(&ins, |v| weighted_sum(v[0].pairwise_l2(v[1])?, &w), corrupt)
        }
        Primitive::Otam => {
            let d = Tensor::uniform([4, 5], 0.1, 2.0, rng);
            check_graph(&[d], |v| Ok(v[0].otam()?.scale(1.1)), corrupt)
        }
        Primitive::CrossEntropy => {
            let labels = [1, 4, 0];
            check_graph(&[r(&[3, 5], rng)], |v| v[0].cross_entropy(&labels), corrupt)
        }
    }
}

/// A random composite graph touching several primitives at once.
pub fn check_composite(rng: &mut SeededRng, corrupt: Option<Primitive>) -> Result<Real> {
    let ins = [
        randn(&[4, 3], rng),
        randn(&[3, 5], rng),
        randn(&[5], rng),
        randn(&[2, 5], rng),
    ];
    let w = randn(&[4, 2], rng);
    check_graph(
        &ins,
        |v| {
            let h = v[0].matmul(v[1])?.add_row(v[2])?.gelu();
            let a = h.softmax()?;
            let d = a.pairwise_l2(v[3])?;
            let t = d.tanh().mul(d)?;
            weighted_sum(t, &w)
        },
        corrupt,
    )
}

/// Gradient checks of every registered primitive plus one composite graph.
pub fn check_all_primitives(seed: u64, corrupt: Option<Primitive>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (i, p) in Primitive::ALL.iter().enumerate() {
        let mut rng = SeededRng::derive(seed, i as u64);
        rows.push(CheckRow {
            name: p.name().to_string(),
            max_rel_error: check_primitive(*p, &mut rng, corrupt)?,
        });
    }
    let mut rng = SeededRng::derive(seed, Primitive::ALL.len() as u64);
    rows.push(CheckRow {
        name: "composite".into(),
        max_rel_error: check_composite(&mut rng, corrupt)?,
    });
    Ok(rows)
}

/// Like [`check_graph`] but differentiates with respect to every trainable
/// parameter of `store`. Returns the worst relative error.
pub fn check_params<F>(store: &ParamStore, build: F, corrupt: Option<Primitive>) -> Result<Real>
where
    F: for<'t> Fn(&'t Tape<'t>) -> Result<Var<'t>>,
{
    let mut tape = Tape::with_params(store);
    if let Some(p) = corrupt {
        tape = tape.with_corrupted_rule(p);
    }
    let grads = build(&tape)?.backward()?;
    let mut worst: Real = 0.0;
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut s = store.clone();
                s.get_mut(id).value = probe.clone();
                let tape = Tape::with_params(&s);
                build(&tape)?.value().item()
            },
            &p.value,
            FD_EPS,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Geometry of the end-to-end adapter check.
pub const TINY_VOLUME: [usize; 3] = [4, 4, 4];
pub const TINY_CHANNELS: usize = 8;

/// The tiny dual-pathway configuration: ρ = 0.5, both pathways ⟨2,2,2⟩.
pub fn tiny_adapter_config() -> AdapterConfig {
    AdapterConfig::dual(AdstaConfig::uniform(2), AdstaConfig::uniform(2)).with_ratio(0.5)
}

/// Gradient check of a whole adapter forward with respect to all of its
/// parameters. Parameters are first moved to random values so that no
/// zero-initialized path hides a gradient. Returns the worst relative error
/// and the number of checked scalars.
pub fn check_adapter_end_to_end(seed: u64, corrupt: Option<Primitive>) -> Result<(Real, usize)> {
    let mut rng = SeededRng::new(seed);
    let mut store = ParamStore::new();
    let adapter = Adapter::new(&mut store, "tiny", TINY_CHANNELS, TINY_VOLUME, &tiny_adapter_config(), &mut rng)?;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.assign(id, Tensor::randn(shape, 0.5, &mut rng))?;
    }
    let [t, h, w] = TINY_VOLUME;
    let x = Tensor::randn([t, h, w, TINY_CHANNELS], 1.0, &mut rng);
    let weights = Tensor::randn([t, h, w, TINY_CHANNELS], 1.0, &mut rng);
    let err = check_params(
        &store,
        |tape| weighted_sum(adapter.forward(tape.constant(x.clone()))?, &weights),
        corrupt,
    )?;
    Ok((err, store.count(true)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_adapter_passes_and_corruption_fails() {
        let (err, n) = check_adapter_end_to_end(0, None).unwrap();
        assert!(err < GRAD_TOL, "{err}");
        assert!(n <= 20_000);
        let (bad, _) = check_adapter_end_to_end(0, Some(Primitive::Trilinear)).unwrap();
        assert!(bad > GRAD_TOL);
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| Ok(t.item()? * t.item()?), &x, 1e-5).unwrap();
        assert!((g.item().unwrap() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::from_fn([4], |i| i as Real);
        let g = finite_diff_grad(|_| Ok(2.0), &x, 1e-5).unwrap();
        assert_eq!(g, Tensor::zeros([4]));
    }

    #[test]
    fn rejects_bad_step_and_non_finite_output() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(finite_diff_grad(|_| Ok(0.0), &x, 0.0), Err(Error::Contract(_))));
        assert!(matches!(
            finite_diff_grad(|_| Ok(Real::NAN), &x, 1e-5),
            Err(Error::Numeric(_))
        ));
    }
}
