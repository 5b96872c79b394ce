//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfevo::layers::{Cache, Conv2d, ConvTranspose2d, Dense, Layer};
use selfevo::model::{Model, Target};
use selfevo::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error; gradient entries below it are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &mut Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let plus = f(x);
        x.data_mut()[i] = orig - FD_STEP;
        let minus = f(x);
        x.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    out
}

fn project(out: &Tensor, weights: &Tensor) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Checks input and parameter gradients of one layer against central
/// differences of the scalar `sum(layer(x) * r)`. Returns the worst
/// relative error.
pub fn check_layer(layer: &Layer, input: &Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let (out, cache) = layer.forward(input).unwrap();
    let r = random_tensor(out.shape(), rng);
    let (dx, dparams) = layer.backward(&cache, &r, true).unwrap();
    drop::<Cache>(cache);

    let mut worst = 0.0f64;
    let mut x = input.clone();
    let num_dx = numeric_grad(&mut x, |x| project(&layer.forward(x).unwrap().0, &r));
    worst = worst.max(max_rel(dx.unwrap().data(), &num_dx));

    for (pi, dp) in dparams.iter().enumerate() {
        let mut probe = layer.clone();
        let mut values = probe.params()[pi].clone();
        let num = numeric_grad(&mut values, |v| {
            probe.params_mut()[pi].data_mut().copy_from_slice(v.data());
            project(&probe.forward(input).unwrap().0, &r)
        });
        worst = worst.max(max_rel(dp.data(), &num));
    }
    worst
}

/// Input whose entries stay at least `gap` away from zero (relu kink).
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Input with all entries distinct, spaced at least 1e-3 apart (pooling ties).
pub fn distinct_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 1e-2 - 0.5 * n as f64 * 1e-2).collect();
    values.shuffle(rng);
    Tensor::new(shape.to_vec(), values).unwrap()
}

pub fn random_dense(rng: &mut ChaCha8Rng) -> (Layer, Tensor) {
    let n = rng.random_range(1..4);
    let fan_in = rng.random_range(2..9);
    let fan_out = rng.random_range(1..7);
    let layer = Layer::Dense(Dense::new(fan_in, fan_out, rng));
    (layer, random_tensor(&[n, fan_in], rng))
}

pub fn random_conv(rng: &mut ChaCha8Rng) -> (Layer, Tensor) {
    let n = rng.random_range(1..3);
    let ic = rng.random_range(1..4);
    let oc = rng.random_range(1..4);
    let k = [1, 3, 5][rng.random_range(0..3)];
    let pad = rng.random_range(0..=k / 2);
    let side = rng.random_range(k.max(3)..k.max(3) + 4);
    let mut conv = Conv2d::new(ic, oc, k, pad, rng);
    conv.bias = random_tensor(&[oc], rng);
    (Layer::Conv2d(conv), random_tensor(&[n, ic, side, side + 1], rng))
}

pub fn random_conv_transpose(rng: &mut ChaCha8Rng) -> (Layer, Tensor) {
    let n = rng.random_range(1..3);
    let ic = rng.random_range(1..4);
    let oc = rng.random_range(1..4);
    let k = rng.random_range(1..4);
    let stride = rng.random_range(1..3);
    let mut conv = ConvTranspose2d::new(ic, oc, k, stride, rng);
    conv.bias = random_tensor(&[oc], rng);
    let h = rng.random_range(1..5);
    (Layer::ConvTranspose2d(conv), random_tensor(&[n, ic, h, h + 1], rng))
}

/// End-to-end check of a model's mean loss gradient against central
/// differences of the loss itself.
pub fn check_model(model: &Model, input: &Tensor, targets: &[Target]) -> f64 {
    let pass = model.loss_and_grads(input, targets).unwrap();
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (pi, g) in pass.grads.iter().enumerate() {
        let mut values = probe.params()[pi].clone();
        let num = numeric_grad(&mut values, |v| {
            probe.params_mut()[pi].data_mut().copy_from_slice(v.data());
            probe.loss_and_grads(input, targets).unwrap().loss
        });
        probe.params_mut()[pi].data_mut().copy_from_slice(values.data());
        worst = worst.max(max_rel(g.data(), &num));
    }
    worst
}

/// Straight-from-the-equations ADAM on one scalar, used as the oracle for
/// the tensor implementation.
pub fn scalar_adam_trajectory(
    start: f64,
    grads: &[f64],
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<f64> {
    let (mut theta, mut m, mut v) = (start, 0.0, 0.0);
    let mut out = Vec::with_capacity(grads.len());
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as f64;
        theta -= lr * wd * theta;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powf(t));
        let v_hat = v / (1.0 - beta2.powf(t));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(theta);
    }
    out
}

/// Per-step evolution written out longhand: update, then a separate
/// inference pass, for every step. No forward pass is reused.
#[allow(clippy::too_many_arguments)]
pub fn naive_evolution(
    theta_model: &Model,
    input: &Tensor,
    label: Target,
    support: Option<(&Tensor, &[Target])>,
    t_support: usize,
    t_selfish: usize,
    support_solver: &selfevo::optim::SolverConfig,
    selfish_solver: &selfevo::optim::SolverConfig,
) -> Vec<Tensor> {
    use selfevo::optim::AdamState;
    let mut m = theta_model.clone();
    let mut x_shape = vec![1];
    x_shape.extend_from_slice(input.shape());
    let x = input.clone().reshape(&x_shape).unwrap();
    let mut out = Vec::new();
    if let Some((inputs, targets)) = support {
        let mut st = AdamState::new(m.params());
        for _ in 0..t_support {
            m.train_step(inputs, targets, &mut st, support_solver).unwrap();
            out.push(m.predict_one(input).unwrap());
        }
    }
    let mut st = AdamState::new(m.params());
    for _ in 0..t_selfish {
        m.train_step(&x, &[label], &mut st, selfish_solver).unwrap();
        out.push(m.predict_one(input).unwrap());
    }
    out
}

pub fn mnist_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn load_mnist() -> selfevo::data::NoisyDataset {
    let dir = mnist_dir();
    selfevo::data::idx::load_idx(
        &dir.join("train-images-idx3-ubyte.gz"),
        &dir.join("train-labels-idx1-ubyte.gz"),
    )
    .expect("bundled MNIST subset")
}
