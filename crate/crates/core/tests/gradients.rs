mod common;

use common::*;
use rand::Rng;
use selfevo::layers::{Conv2d, Layer};
use selfevo::loss::{mse_loss, softmax_cross_entropy};
use selfevo::model::{Model, ModelKind, ModelSpec, Target};
use selfevo::Tensor;

const INSTANCES: u64 = 20;

fn assert_within(kind: &str, worst: f64) {
    assert!(
        worst <= GRAD_TOLERANCE,
        "{kind}: max relative error {worst:e} exceeds {GRAD_TOLERANCE:e}"
    );
}

#[test]
fn dense_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = rng(seed);
        let (layer, x) = random_dense(&mut rng);
        assert_within("dense", check_layer(&layer, &x, &mut rng));
    }
}

#[test]
fn relu_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = rng(100 + seed);
        let x = away_from_zero(&[2, 3, 4], 1e-2, &mut rng);
        assert_within("relu", check_layer(&Layer::Relu, &x, &mut rng));
    }
}

#[test]
fn conv2d_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = rng(200 + seed);
        let (layer, x) = random_conv(&mut rng);
        assert_within("conv2d", check_layer(&layer, &x, &mut rng));
    }
}

#[test]
fn conv2d_single_filter_reference_case() {
    let mut rng = rng(7);
    let layer = Layer::Conv2d(Conv2d::new(1, 1, 3, 0, &mut rng));
    let x = random_tensor(&[1, 1, 4, 4], &mut rng);
    let worst = check_layer(&layer, &x, &mut rng);
    assert!(worst <= 1e-6, "conv2d 1×4×4 case: {worst:e}");
}

#[test]
fn max_pool_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = rng(300 + seed);
        let h = rng.random_range(2..7);
        let x = distinct_values(&[2, 2, h, h + 1], &mut rng);
        assert_within("max_pool2", check_layer(&Layer::MaxPool2, &x, &mut rng));
    }
}

#[test]
fn conv_transpose_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = rng(400 + seed);
        let (layer, x) = random_conv_transpose(&mut rng);
        assert_within("conv_transpose2d", check_layer(&layer, &x, &mut rng));
    }
}

#[test]
fn softmax_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = rng(500 + seed);
        let c = rng.random_range(2..12);
        let x = random_tensor(&[3, c], &mut rng);
        assert_within("softmax", check_layer(&Layer::Softmax, &x, &mut rng));
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = rng(600 + seed);
        let c = rng.random_range(2..12);
        let target = rng.random_range(0..c);
        let mut logits = Tensor::from_fn(&[c], |_| rng.random_range(-3.0..3.0));
        let (_, grad, _) = softmax_cross_entropy(logits.data(), target).unwrap();
        let num = numeric_grad(&mut logits, |l| {
            softmax_cross_entropy(l.data(), target).unwrap().0
        });
        for (a, n) in grad.iter().zip(&num) {
            assert!((a - n).abs() <= 1e-8, "ce grad {a} vs {n}");
            assert_within("softmax_cross_entropy", rel_err(*a, *n));
        }
    }
}

#[test]
fn mse_gradients() {
    for seed in 0..INSTANCES {
        let mut rng = rng(700 + seed);
        let shape = [rng.random_range(1..4), rng.random_range(1..6)];
        let mut pred = random_tensor(&shape, &mut rng);
        let target = random_tensor(&shape, &mut rng);
        let (_, grad) = mse_loss(&pred, &target).unwrap();
        let num = numeric_grad(&mut pred, |p| mse_loss(p, &target).unwrap().0);
        for (a, n) in grad.data().iter().zip(&num) {
            assert!((a - n).abs() <= 1e-8, "mse grad {a} vs {n}");
            assert_within("mse", rel_err(*a, *n));
        }
    }
}

#[test]
fn softmax_is_a_shift_invariant_distribution() {
    for seed in 0..INSTANCES {
        let mut rng = rng(800 + seed);
        let x = random_tensor(&[4, 7], &mut rng);
        let shifted = Tensor::from_fn(&[4, 7], |i| x.data()[i] + 123.25);
        let a = Layer::Softmax.forward(&x).unwrap().0;
        let b = Layer::Softmax.forward(&shifted).unwrap().0;
        for row in a.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}

/// Zero biases put relu inputs exactly on the kink wherever the incoming
/// activations vanish; positive biases move them off it.
fn lift_biases(model: &mut Model) {
    for layer in model.layers_mut() {
        match layer {
            Layer::Conv2d(c) => c.bias.data_mut().fill(0.3),
            Layer::ConvTranspose2d(c) => c.bias.data_mut().fill(0.3),
            _ => {}
        }
    }
}

fn small_classifier() -> ModelSpec {
    ModelSpec {
        kind: ModelKind::Classification,
        input_shape: vec![1, 10, 10],
        conv_widths: vec![2, 3],
        dense_widths: vec![5],
        classes: 4,
        kernel: 3,
    }
}

#[test]
fn classifier_end_to_end_gradient() {
    let model = Model::new(small_classifier(), 3).unwrap();
    let mut rng = rng(900);
    let x = random_tensor(&[2, 1, 10, 10], &mut rng);
    let worst = check_model(&model, &x, &[Target::Class(1), Target::Class(3)]);
    assert_within("classifier", worst);
}

#[test]
fn encoder_decoder_end_to_end_gradient() {
    let spec = ModelSpec {
        conv_widths: vec![2, 4],
        ..ModelSpec::encoder_decoder(8, 8)
    };
    let mut model = Model::new(spec, 5).unwrap();
    lift_biases(&mut model);
    let mut rng = rng(901);
    let x = random_tensor(&[2, 2, 8, 8], &mut rng);
    let t = Tensor::from_fn(&[1, 8, 8], |i| (i % 5) as f64 * 0.2);
    let worst = check_model(&model, &x, &[Target::Map(&t), Target::Map(&t)]);
    assert_within("encoder-decoder", worst);
}

#[test]
fn e2l_variants_end_to_end_gradient() {
    let cls = Model::new(ModelSpec::e2l_classifier(6, 4), 2).unwrap();
    let mut rng = rng(902);
    let x = random_tensor(&[2, 1, 6, 4], &mut rng);
    assert_within(
        "e2l-classifier",
        check_model(&cls, &x, &[Target::Class(0), Target::Class(2)]),
    );

    let primary = ModelSpec {
        conv_widths: vec![4, 8],
        ..ModelSpec::encoder_decoder(8, 8)
    };
    let mut img = Model::new(ModelSpec::e2l_image(&primary, 3).unwrap(), 2).unwrap();
    lift_biases(&mut img);
    let x = random_tensor(&[1, 3, 8, 8], &mut rng);
    let t = Tensor::full(&[1, 8, 8], 0.5);
    assert_within("e2l-image", check_model(&img, &x, &[Target::Map(&t)]));
}
