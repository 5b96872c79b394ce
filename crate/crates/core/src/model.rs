//! Concrete architectures: the LeNet-style classifier, the encoder-decoder
//! heat-map painter, and the thin evolution-to-label variants of both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Cache, Conv2d, ConvTranspose2d, Dense, Layer};
use crate::loss::{mse_loss, softmax_cross_entropy};
use crate::optim::{adam_step, AdamState, SolverConfig};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Classification,
    ImageRegression,
    E2lClassification,
    E2lImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[channels, height, width]` of one sample.
    pub input_shape: Vec<usize>,
    /// Output channels of each convolution stage.
    pub conv_widths: Vec<usize>,
    /// Hidden dense widths (classification kinds only).
    #[serde(default)]
    pub dense_widths: Vec<usize>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    pub kernel: usize,
}

fn default_classes() -> usize {
    10
}

impl ModelSpec {
    /// LeNet-style reference: two 5×5 conv-relu-pool stages (6, 16), dense 120, 84.
    pub fn classifier(classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Classification,
            input_shape: vec![1, 28, 28],
            conv_widths: vec![6, 16],
            dense_widths: vec![120, 84],
            classes,
            kernel: 5,
        }
    }

    /// Three-level encoder-decoder on a template/science pair.
    pub fn encoder_decoder(height: usize, width: usize) -> Self {
        ModelSpec {
            kind: ModelKind::ImageRegression,
            input_shape: vec![2, height, width],
            conv_widths: vec![16, 32, 64],
            dense_widths: Vec::new(),
            classes: 1,
            kernel: 3,
        }
    }

    /// E2L for the image task: the primary layout at half width, reading
    /// `depth` cube slices as input channels.
    pub fn e2l_image(primary: &ModelSpec, depth: usize) -> Result<Self> {
        if primary.kind != ModelKind::ImageRegression {
            return Err(Error::Spec("image E2L derives from an image-regression spec".into()));
        }
        let conv_widths = primary
            .conv_widths
            .iter()
            .map(|w| {
                if w % 2 == 0 {
                    Ok(w / 2)
                } else {
                    Err(Error::Spec(format!("hidden width {w} cannot be halved")))
                }
            })
            .collect::<Result<_>>()?;
        Ok(ModelSpec {
            kind: ModelKind::E2lImage,
            input_shape: vec![depth, primary.input_shape[1], primary.input_shape[2]],
            conv_widths,
            dense_widths: Vec::new(),
            classes: 1,
            kernel: primary.kernel,
        })
    }

    /// E2L for classification: the `depth × classes` strip read as a one-channel image.
    pub fn e2l_classifier(depth: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::E2lClassification,
            input_shape: vec![1, depth, classes],
            conv_widths: vec![16],
            dense_widths: vec![64],
            classes,
            kernel: 3,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(
            self.kind,
            ModelKind::Classification | ModelKind::E2lClassification
        )
    }

    /// Shape of one sample's output (no batch axis).
    pub fn output_shape(&self) -> Vec<usize> {
        if self.is_classification() {
            vec![self.classes]
        } else {
            vec![1, self.input_shape[1], self.input_shape[2]]
        }
    }

    fn padding(&self) -> usize {
        match self.kind {
            ModelKind::Classification => 0,
            _ => self.kernel / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!(
                "input shape must be [C, H, W] with positive sides, got {:?}",
                self.input_shape
            )));
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) {
            return Err(Error::Spec("conv widths must be non-empty and positive".into()));
        }
        if self.kernel == 0 {
            return Err(Error::Spec("kernel size must be positive".into()));
        }
        if self.is_classification() {
            if self.classes < 2 {
                return Err(Error::Spec("classification needs at least 2 classes".into()));
            }
            if self.dense_widths.contains(&0) {
                return Err(Error::Spec("dense widths must be positive".into()));
            }
        } else {
            let levels = self.conv_widths.len() as u32;
            let div = 1usize << levels;
            let (h, w) = (self.input_shape[1], self.input_shape[2]);
            if h % div != 0 || w % div != 0 {
                return Err(Error::Spec(format!(
                    "{h}×{w} is not divisible by 2^{levels}"
                )));
            }
        }
        Ok(())
    }
}

/// What a single sample is trained towards.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Class(usize),
    Map(&'a Tensor),
}

/// Result of one forward/backward pass over a batch.
pub struct Pass {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    /// Model outputs for the batch at the parameters used in the pass
    /// (probabilities for classification models).
    pub outputs: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::rng_for(seed, &[rng::stream::INIT]);
        let layers = match spec.kind {
            ModelKind::Classification | ModelKind::E2lClassification => {
                conv_dense_stack(&spec, &mut rng)?
            }
            ModelKind::ImageRegression | ModelKind::E2lImage => {
                encoder_decoder_stack(&spec, &mut rng)
            }
        };
        let model = Model { spec, layers };
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(&model.spec.input_shape);
        let out = model.output_shape_for(&batch_shape)?;
        debug_assert_eq!(&out[1..], model.spec.output_shape().as_slice());
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn output_shape_for(&self, batch_shape: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(batch_shape.to_vec(), |s, l| l.output_shape(&s))
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.rank() != 4 || input.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Dimension(format!(
                "model expects [N, {:?}], got {:?}",
                self.spec.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Inference on a batch `[N, C, H, W]`.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Inference on one unbatched sample.
    pub fn predict_one(&self, sample: &Tensor) -> Result<Tensor> {
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(sample.shape());
        let out = self.predict(&sample.clone().reshape(&batch_shape)?)?;
        out.reshape(&self.spec.output_shape())
    }

    /// Mean loss over the batch and its parameter gradients. Classification
    /// models train with cross-entropy on the logits feeding the final
    /// softmax; image models with MSE on the output map.
    pub fn loss_and_grads(&self, input: &Tensor, targets: &[Target]) -> Result<Pass> {
        self.check_input(input)?;
        let n = input.shape()[0];
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for a batch of {n}",
                targets.len()
            )));
        }
        let classification = self.spec.is_classification();
        let trained = if classification {
            &self.layers[..self.layers.len() - 1]
        } else {
            &self.layers[..]
        };

        let mut caches: Vec<Cache> = Vec::with_capacity(trained.len());
        let mut x = input.clone();
        for layer in trained {
            let (y, cache) = layer.forward(&x)?;
            caches.push(cache);
            x = y;
        }

        let (loss, mut grad, outputs) = if classification {
            let c = self.spec.classes;
            let mut grad = Tensor::zeros(x.shape());
            let mut probs = Tensor::zeros(x.shape());
            let mut total = 0.0;
            for (b, t) in targets.iter().enumerate() {
                let Target::Class(class) = *t else {
                    return Err(Error::KindMismatch(
                        "classification model needs class targets".into(),
                    ));
                };
                let (l, g, p) = softmax_cross_entropy(&x.data()[b * c..(b + 1) * c], class)?;
                total += l;
                for (dst, v) in grad.data_mut()[b * c..(b + 1) * c].iter_mut().zip(g) {
                    *dst = v / n as f64;
                }
                probs.data_mut()[b * c..(b + 1) * c].copy_from_slice(&p);
            }
            (total / n as f64, grad, probs)
        } else {
            let maps = targets
                .iter()
                .map(|t| match t {
                    Target::Map(m) => Ok(*m),
                    Target::Class(_) => Err(Error::KindMismatch(
                        "image model needs heat-map targets".into(),
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            let target = Tensor::stack(&maps)?.reshape(x.shape())?;
            let (l, g) = mse_loss(&x, &target)?;
            (l, g, x)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                sample: None,
                step: 0,
            });
        }

        let mut grads_rev: Vec<Vec<Tensor>> = Vec::with_capacity(trained.len());
        for (i, (layer, cache)) in trained.iter().zip(&caches).enumerate().rev() {
            let (dx, pg) = layer.backward(cache, &grad, i > 0)?;
            grads_rev.push(pg);
            if let Some(dx) = dx {
                grad = dx;
            }
        }
        let grads = grads_rev.into_iter().rev().flatten().collect();
        Ok(Pass {
            loss,
            grads,
            outputs,
        })
    }

    /// One optimizer step on a batch. Returns the pass computed at the
    /// parameters before the update.
    pub fn train_step(
        &mut self,
        input: &Tensor,
        targets: &[Target],
        state: &mut AdamState,
        solver: &SolverConfig,
    ) -> Result<Pass> {
        let pass = self.loss_and_grads(input, targets)?;
        let mut params = self.params_mut();
        adam_step(&mut params, &pass.grads, state, solver)?;
        Ok(pass)
    }
}

fn conv_dense_stack(spec: &ModelSpec, rng: &mut Rng) -> Result<Vec<Layer>> {
    let (mut c, mut h, mut w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
    let pad = spec.padding();
    let mut layers = Vec::new();
    for &width in &spec.conv_widths {
        let conv = Conv2d::new(c, width, spec.kernel, pad, rng);
        let (oh, ow) = conv.output_hw(h, w).ok_or_else(|| {
            Error::Spec(format!("{h}×{w} input too small for kernel {}", spec.kernel))
        })?;
        if oh < 2 || ow < 2 {
            return Err(Error::Spec(format!(
                "{oh}×{ow} feature map cannot be pooled"
            )));
        }
        layers.push(Layer::Conv2d(conv));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        c = width;
        h = oh / 2;
        w = ow / 2;
    }
    let mut features = c * h * w;
    for &width in &spec.dense_widths {
        layers.push(Layer::Dense(Dense::new(features, width, rng)));
        layers.push(Layer::Relu);
        features = width;
    }
    layers.push(Layer::Dense(Dense::new(features, spec.classes, rng)));
    layers.push(Layer::Softmax);
    Ok(layers)
}

fn encoder_decoder_stack(spec: &ModelSpec, rng: &mut Rng) -> Vec<Layer> {
    let pad = spec.padding();
    let widths = &spec.conv_widths;
    let mut layers = Vec::new();
    let mut c = spec.input_shape[0];
    for &width in widths {
        layers.push(Layer::Conv2d(Conv2d::new(c, width, spec.kernel, pad, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool2);
        c = width;
    }
    for level in (0..widths.len()).rev() {
        let out = if level > 0 { widths[level - 1] } else { widths[0] };
        layers.push(Layer::ConvTranspose2d(ConvTranspose2d::new(c, out, 2, 2, rng)));
        layers.push(Layer::Relu);
        c = out;
    }
    layers.push(Layer::Conv2d(Conv2d::new(c, 1, spec.kernel, pad, rng)));
    layers.push(Layer::Relu);
    layers
}

pub fn build_classifier(spec: ModelSpec, seed: u64) -> Result<Model> {
    if spec.kind != ModelKind::Classification {
        return Err(Error::Spec(format!("{:?} is not a classifier spec", spec.kind)));
    }
    Model::new(spec, seed)
}

pub fn build_encoder_decoder(spec: ModelSpec, seed: u64) -> Result<Model> {
    if spec.kind != ModelKind::ImageRegression {
        return Err(Error::Spec(format!(
            "{:?} is not an encoder-decoder spec",
            spec.kind
        )));
    }
    Model::new(spec, seed)
}

pub fn build_e2l(spec: ModelSpec, seed: u64) -> Result<Model> {
    if !matches!(spec.kind, ModelKind::E2lClassification | ModelKind::E2lImage) {
        return Err(Error::Spec(format!("{:?} is not an E2L spec", spec.kind)));
    }
    Model::new(spec, seed)
}
