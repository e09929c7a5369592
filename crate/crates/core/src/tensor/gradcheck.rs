//! Finite-difference gradient checking and the registry of checked ops.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

pub type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
pub type Sample = fn(&mut Rng) -> Vec<Tensor>;

/// One differentiable op under test: how to draw inputs and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    pub sample: Sample,
    pub build: Build,
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(1e-8);
    diff / scale
}

/// Projects the op output onto fixed random weights so every output entry
/// contributes to the scalar being differentiated.
fn scalar_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let flat = tape.reshape(out, &[weights.len()])?;
    let w = tape.constant(weights.clone());
    let p = tape.mul(flat, w)?;
    Ok(tape.sum(p))
}

fn evaluate(build: Build, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars)?;
    let loss = scalar_loss(&mut tape, out, weights)?;
    Ok(tape.value(loss).item())
}

/// Worst relative error between analytic and central-difference gradients
/// over all inputs of one instance.
pub fn check_instance(build: Build, inputs: &[Tensor], rng: &mut Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let n_out = tape.value(out).len();
    let weights = Tensor::from_fn(&[n_out], |_| rng.gen_range(-1.0..1.0));
    let loss = scalar_loss(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0_f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.tensor(vars[i]);
        let mut numeric = vec![0.0; input.len()];
        let mut probe = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + FD_STEP;
            let fp = evaluate(build, &probe, &weights)?;
            probe[i].data_mut()[j] = x0 - FD_STEP;
            let fm = evaluate(build, &probe, &weights)?;
            probe[i].data_mut()[j] = x0;
            *slot = (fp - fm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Runs `instances` random instances of `case`; returns the worst error.
pub fn check_op(case: &OpCase, instances: usize, rng: &mut Rng) -> Result<f64> {
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let inputs = (case.sample)(rng);
        worst = worst.max(check_instance(case.build, &inputs, rng)?);
    }
    Ok(worst)
}

fn normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Values with magnitude in [0.2, 1.2] and random sign, away from kinks at 0.
fn off_kink(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.2);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.3..2.0))
}

fn two(rng: &mut Rng) -> Vec<Tensor> {
    vec![normal(&[4, 4], rng), normal(&[4, 4], rng)]
}

fn one(rng: &mut Rng) -> Vec<Tensor> {
    vec![normal(&[4, 4], rng)]
}

fn one_off_kink(rng: &mut Rng) -> Vec<Tensor> {
    vec![off_kink(&[4, 4], rng)]
}

fn image(rng: &mut Rng) -> Vec<Tensor> {
    vec![normal(&[2, 4, 4], rng)]
}

/// Every differentiable op the models use.
pub fn registry() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", sample: two, build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", sample: two, build: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", sample: two, build: |t, v| t.mul(v[0], v[1]) },
        OpCase {
            name: "div",
            sample: |r| vec![normal(&[4, 4], r), off_kink(&[4, 4], r)],
            build: |t, v| t.div(v[0], v[1]),
        },
        OpCase {
            name: "maximum",
            sample: |r| {
                let a = normal(&[4, 4], r);
                // Keep the two arguments at least 0.1 apart.
                let b = Tensor::from_fn(&[4, 4], |i| {
                    let d = r.gen_range(0.1..1.0);
                    a.data()[i] + if r.gen_bool(0.5) { d } else { -d }
                });
                vec![a, b]
            },
            build: |t, v| t.maximum(v[0], v[1]),
        },
        OpCase { name: "neg", sample: one, build: |t, v| Ok(t.neg(v[0])) },
        OpCase { name: "abs", sample: one_off_kink, build: |t, v| Ok(t.abs(v[0])) },
        OpCase { name: "exp", sample: one, build: |t, v| Ok(t.exp(v[0])) },
        OpCase { name: "log", sample: |r| vec![positive(&[4, 4], r)], build: |t, v| Ok(t.log(v[0])) },
        OpCase { name: "sigmoid", sample: one, build: |t, v| Ok(t.sigmoid(v[0])) },
        OpCase { name: "relu", sample: one_off_kink, build: |t, v| Ok(t.relu(v[0])) },
        OpCase { name: "tanh", sample: one, build: |t, v| Ok(t.tanh(v[0])) },
        OpCase { name: "add_scalar", sample: one, build: |t, v| Ok(t.add_scalar(v[0], 0.7)) },
        OpCase { name: "mul_scalar", sample: one, build: |t, v| Ok(t.mul_scalar(v[0], -1.3)) },
        OpCase {
            name: "matmul",
            sample: |r| vec![normal(&[4, 3], r), normal(&[3, 4], r)],
            build: |t, v| t.matmul(v[0], v[1]),
        },
        OpCase {
            name: "add_row",
            sample: |r| vec![normal(&[4, 4], r), normal(&[4], r)],
            build: |t, v| t.add_row(v[0], v[1]),
        },
        OpCase {
            name: "conv2d",
            sample: |r| vec![normal(&[2, 4, 4], r), normal(&[3, 2, 3, 3], r), normal(&[3], r)],
            build: |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        },
        OpCase {
            name: "conv2d_stride2",
            sample: |r| vec![normal(&[2, 4, 4], r), normal(&[2, 2, 3, 3], r)],
            build: |t, v| t.conv2d(v[0], v[1], None, 2, 1),
        },
        OpCase {
            name: "conv_transpose2d",
            sample: |r| vec![normal(&[2, 4, 4], r), normal(&[2, 3, 2, 2], r), normal(&[3], r)],
            build: |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0),
        },
        OpCase {
            name: "depthwise_conv2d",
            sample: |r| vec![normal(&[2, 4, 4], r), normal(&[2, 1, 3, 3], r), normal(&[2], r)],
            build: |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2])),
        },
        OpCase { name: "avg_pool2", sample: image, build: |t, v| t.avg_pool2(v[0]) },
        OpCase { name: "max_pool2", sample: image, build: |t, v| t.max_pool2(v[0]) },
        OpCase { name: "upsample2", sample: image, build: |t, v| t.upsample2(v[0]) },
        OpCase { name: "softmax_rows", sample: one, build: |t, v| t.softmax(v[0], 1) },
        OpCase { name: "softmax_channels", sample: image, build: |t, v| t.softmax(v[0], 0) },
        OpCase {
            name: "layer_norm",
            sample: |r| vec![normal(&[4, 4], r), normal(&[4], r), normal(&[4], r)],
            build: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        OpCase { name: "sum", sample: one, build: |t, v| Ok(t.sum(v[0])) },
        OpCase { name: "mean", sample: one, build: |t, v| Ok(t.mean(v[0])) },
        OpCase { name: "sum_axis", sample: image, build: |t, v| t.sum_axis(v[0], 1) },
        OpCase { name: "mean_axis", sample: image, build: |t, v| t.mean_axis(v[0], 0) },
        OpCase { name: "reshape", sample: one, build: |t, v| t.reshape(v[0], &[2, 8]) },
        OpCase { name: "transpose", sample: |r| vec![normal(&[4, 3], r)], build: |t, v| t.transpose(v[0]) },
        OpCase {
            name: "concat",
            sample: |r| vec![normal(&[1, 4, 4], r), normal(&[2, 4, 4], r)],
            build: |t, v| t.concat(&[v[0], v[1]], 0),
        },
        OpCase { name: "slice", sample: image, build: |t, v| t.slice(v[0], 2, 1, 2) },
        OpCase { name: "patchify", sample: image, build: |t, v| t.patchify(v[0], 2) },
        OpCase {
            name: "unpatchify",
            sample: |r| vec![normal(&[4, 8], r)],
            build: |t, v| t.unpatchify(v[0], 2, 4, 4, 2),
        },
        OpCase { name: "sobel_mag", sample: image, build: |t, v| t.sobel_mag(v[0]) },
        OpCase { name: "gaussian_blur_same", sample: image, build: |t, v| t.gaussian_blur(v[0], 3, 1.0, false) },
        OpCase { name: "gaussian_blur_valid", sample: image, build: |t, v| t.gaussian_blur(v[0], 3, 1.5, true) },
        OpCase {
            name: "pearson_channels",
            sample: |r| vec![normal(&[2, 4, 4], r), normal(&[2, 4, 4], r)],
            build: |t, v| t.pearson_channels(v[0], v[1]),
        },
        OpCase { name: "variance", sample: one, build: |t, v| Ok(t.variance(v[0])) },
        OpCase { name: "covariance", sample: two, build: |t, v| t.covariance(v[0], v[1]) },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn every_registered_op_matches_finite_differences() {
        let mut r = rng::stream(7, "gradcheck");
        for case in registry() {
            let err = check_op(&case, 10, &mut r).unwrap();
            assert!(err < 1e-5, "{}: rel error {err:e}", case.name);
        }
    }

    #[test]
    fn rel_error_is_scale_free() {
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e1 = rel_error(&[1.0, 0.0], &[1.1, 0.0]);
        let e2 = rel_error(&[10.0, 0.0], &[11.0, 0.0]);
        assert!((e1 - e2).abs() < 1e-12);
    }
}
