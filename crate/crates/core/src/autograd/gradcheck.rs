//! Central finite-difference gradient checker.
//!
//! Gradients are taken by reverse mode in `f32`; the finite differences
//! evaluate the same forward expression in `f64` at the same point, so the
//! difference quotient is not swamped by single-precision rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A differentiable expression of one or more input tensors.
pub trait GradFn {
    fn build<S: Scalar>(&self, g: &mut Graph<S>, inputs: &[Var]) -> Result<Var>;
}

/// Wraps an expression body into a [`GradFn`] usable at any scalar type.
#[macro_export]
macro_rules! grad_fn {
    (|$g:ident, $xs:ident| $body:expr) => {{
        struct __GradFn;
        impl $crate::autograd::gradcheck::GradFn for __GradFn {
            fn build<S: $crate::Scalar>(
                &self,
                $g: &mut $crate::autograd::Graph<S>,
                $xs: &[$crate::autograd::Var],
            ) -> $crate::Result<$crate::autograd::Var> {
                $body
            }
        }
        __GradFn
    }};
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    /// Largest `|auto - numeric| / max(|auto|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub checked: usize,
}

pub const DEFAULT_STEP: f64 = 1e-3;
pub const REL_FLOOR: f64 = 0.1;

/// Scalar probe `Σ out ⊙ R` with fixed random weights `R`, so every output
/// element contributes a distinct cotangent.
fn probe<S: Scalar>(f: &impl GradFn, g: &mut Graph<S>, xs: &[Var], seed: u64) -> Result<Var> {
    let out = f.build(g, xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = Tensor::from_fn(shape, |_| S::lit(rng.random_range(-1.0..1.0)));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn eval_f64(f: &impl GradFn, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let l = probe(f, &mut g, &xs, seed)?;
    Ok(g.value(l).data()[0])
}

/// Compares reverse-mode gradients of every input element against central
/// differences with the given `step`.
pub fn check<F: GradFn>(f: &F, inputs: &[Tensor<f32>], step: f64, seed: u64) -> Result<GradReport> {
    let mut g = Graph::<f32>::new();
    let xs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = probe(f, &mut g, &xs, seed)?;
    g.backward(loss)?;

    let base: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let mut report = GradReport::default();
    for (i, &x) in xs.iter().enumerate() {
        let auto = g.grad(x).unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let mut plus = base.clone();
            plus[i].data_mut()[j] += step;
            let mut minus = base.clone();
            minus[i].data_mut()[j] -= step;
            let numeric = (eval_f64(f, &plus, seed)? - eval_f64(f, &minus, seed)?) / (2.0 * step);
            let a = auto.data()[j] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn normal_ish(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

/// Values in `±[0.05, 1]`, keeping every element away from the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05f32..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn run_case<F: GradFn>(
    out: &mut Vec<(&'static str, GradReport)>,
    name: &'static str,
    f: F,
    instances: usize,
    rng: &mut ChaCha8Rng,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f32>>,
) -> Result<()> {
    let mut total = GradReport::default();
    for _ in 0..instances {
        let inputs = gen(rng);
        let seed = rng.random();
        let r = check(&f, &inputs, DEFAULT_STEP, seed)?;
        total.max_rel_err = total.max_rel_err.max(r.max_rel_err);
        total.checked += r.checked;
    }
    out.push((name, total));
    Ok(())
}

/// Gradient check of every differentiable graph operation on `instances`
/// random inputs each. Returns the worst relative error per operation.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<(&'static str, GradReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let o = &mut out;
    let n = instances;

    run_case(o, "add", grad_fn!(|g, x| g.add(x[0], x[1])), n, rng, |r| {
        vec![normal_ish(r, &[3, 4]), normal_ish(r, &[3, 4])]
    })?;
    run_case(o, "sub", grad_fn!(|g, x| g.sub(x[0], x[1])), n, rng, |r| {
        vec![normal_ish(r, &[3, 4]), normal_ish(r, &[3, 4])]
    })?;
    run_case(o, "mul", grad_fn!(|g, x| g.mul(x[0], x[1])), n, rng, |r| {
        vec![normal_ish(r, &[3, 4]), normal_ish(r, &[3, 4])]
    })?;
    run_case(o, "scale", grad_fn!(|g, x| Ok(g.scale(x[0], S::lit(-1.7)))), n, rng, |r| vec![normal_ish(r, &[5])])?;
    run_case(o, "one_minus", grad_fn!(|g, x| Ok(g.one_minus(x[0]))), n, rng, |r| vec![normal_ish(r, &[5])])?;
    run_case(o, "scale_by", grad_fn!(|g, x| g.scale_by(x[0], x[1])), n, rng, |r| {
        vec![normal_ish(r, &[2, 3, 4]), normal_ish(r, &[1])]
    })?;
    run_case(o, "matmul", grad_fn!(|g, x| g.matmul(x[0], x[1])), n, rng, |r| {
        vec![normal_ish(r, &[3, 4]), normal_ish(r, &[4, 5])]
    })?;
    run_case(o, "matmul_batched", grad_fn!(|g, x| g.matmul(x[0], x[1])), n, rng, |r| {
        vec![normal_ish(r, &[2, 3, 4]), normal_ish(r, &[4, 2])]
    })?;
    run_case(o, "add_bias", grad_fn!(|g, x| g.add_bias(x[0], x[1])), n, rng, |r| {
        vec![normal_ish(r, &[2, 3, 5]), normal_ish(r, &[5])]
    })?;
    run_case(o, "layer_norm", grad_fn!(|g, x| g.layer_norm(x[0], x[1], x[2], 1e-6)), n, rng, |r| {
        vec![normal_ish(r, &[4, 6]), normal_ish(r, &[6]), normal_ish(r, &[6])]
    })?;
    run_case(o, "relu", grad_fn!(|g, x| Ok(g.relu(x[0]))), n, rng, |r| vec![off_kink(r, &[4, 5])])?;
    run_case(o, "gelu", grad_fn!(|g, x| Ok(g.gelu(x[0]))), n, rng, |r| vec![normal_ish(r, &[4, 5])])?;
    run_case(o, "sigmoid", grad_fn!(|g, x| Ok(g.sigmoid(x[0]))), n, rng, |r| vec![normal_ish(r, &[4, 5])])?;
    run_case(o, "softmax_last", grad_fn!(|g, x| g.softmax(x[0], 1)), n, rng, |r| vec![normal_ish(r, &[3, 5])])?;
    run_case(o, "softmax_first", grad_fn!(|g, x| g.softmax(x[0], 0)), n, rng, |r| vec![normal_ish(r, &[4, 2, 3])])?;
    run_case(o, "conv2d", grad_fn!(|g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1)), n, rng, |r| {
        vec![normal_ish(r, &[2, 5, 5]), normal_ish(r, &[3, 2, 3, 3]), normal_ish(r, &[3])]
    })?;
    run_case(o, "conv2d_strided", grad_fn!(|g, x| g.conv2d(x[0], x[1], None, 2, 0)), n, rng, |r| {
        vec![normal_ish(r, &[2, 6, 6]), normal_ish(r, &[2, 2, 2, 2])]
    })?;
    run_case(o, "deconv2d_x2", grad_fn!(|g, x| g.deconv2d(x[0], x[1], Some(x[2]), 2)), n, rng, |r| {
        vec![normal_ish(r, &[3, 3, 3]), normal_ish(r, &[3, 2, 2, 2]), normal_ish(r, &[2])]
    })?;
    run_case(o, "deconv2d_x4", grad_fn!(|g, x| g.deconv2d(x[0], x[1], None, 4)), n, rng, |r| {
        vec![normal_ish(r, &[2, 2, 2]), normal_ish(r, &[2, 2, 4, 4])]
    })?;
    run_case(o, "conv_transpose2d_overlap", grad_fn!(|g, x| g.conv_transpose2d(x[0], x[1], None, 2)), n, rng, |r| {
        vec![normal_ish(r, &[2, 3, 3]), normal_ish(r, &[2, 2, 3, 3])]
    })?;
    run_case(o, "global_avg_pool", grad_fn!(|g, x| g.global_avg_pool(x[0])), n, rng, |r| {
        vec![normal_ish(r, &[3, 4, 4])]
    })?;
    run_case(o, "scale_channels", grad_fn!(|g, x| g.scale_channels(x[0], x[1])), n, rng, |r| {
        vec![normal_ish(r, &[3, 4, 4]), normal_ish(r, &[3])]
    })?;
    run_case(o, "upsample_bilinear_x2", grad_fn!(|g, x| g.upsample_bilinear(x[0], 2)), n, rng, |r| {
        vec![normal_ish(r, &[2, 3, 3])]
    })?;
    run_case(o, "upsample_bilinear_x4", grad_fn!(|g, x| g.upsample_bilinear(x[0], 4)), n, rng, |r| {
        vec![normal_ish(r, &[1, 2, 3])]
    })?;
    run_case(o, "transpose", grad_fn!(|g, x| g.transpose(x[0])), n, rng, |r| vec![normal_ish(r, &[3, 5])])?;
    run_case(o, "reshape", grad_fn!(|g, x| g.reshape(x[0], &[5, 3])), n, rng, |r| vec![normal_ish(r, &[3, 5])])?;
    run_case(o, "attention", grad_fn!(|g, x| g.attention(x[0], 2)), n, rng, |r| vec![normal_ish(r, &[5, 12])])?;
    run_case(o, "cross_entropy", grad_fn!(|g, x| g.cross_entropy(x[0], &[0, 3, 1, 2, 2, 0, 3, 1, 1])), n, rng, |r| {
        vec![normal_ish(r, &[4, 3, 3])]
    })?;
    run_case(o, "sum", grad_fn!(|g, x| Ok(g.sum(x[0]))), n, rng, |r| vec![normal_ish(r, &[3, 4])])?;
    run_case(o, "mean", grad_fn!(|g, x| Ok(g.mean(x[0]))), n, rng, |r| vec![normal_ish(r, &[3, 4])])?;
    Ok(out)
}
