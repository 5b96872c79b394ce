//! Layer primitives with hand-written backward passes.
//!
//! All layers operate on a leading batch axis: dense layers see `[N, ...]`
//! (trailing axes flattened), spatial layers see `[N, C, H, W]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Stride-1 convolution with symmetric zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
}

/// Transposed convolution without padding; output side is `(in - 1) * stride + k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    /// `[in_channels, out_channels, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense(Dense),
    Relu,
    Conv2d(Conv2d),
    /// 2×2 max pooling, stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    ConvTranspose2d(ConvTranspose2d),
    /// Softmax over the last axis.
    Softmax,
}

/// Values saved by `forward` for the matching `backward`.
#[derive(Debug)]
pub enum Cache {
    Dense { input: Tensor },
    Relu { input: Tensor },
    Conv2d { input_shape: Vec<usize>, cols: Vec<f64> },
    MaxPool2 { input_shape: Vec<usize>, argmax: Vec<usize> },
    ConvTranspose2d { input: Tensor },
    Softmax { output: Tensor },
}

fn he_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

impl Dense {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            weight: he_normal(&[outputs, inputs], inputs, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape()[1], self.weight.shape()[0])
    }
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            weight: he_normal(
                &[out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
                rng,
            ),
            bias: Tensor::zeros(&[out_channels]),
            padding,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (_, _, k) = self.dims();
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < k || wp < k {
            return None;
        }
        Some((hp - k + 1, wp - k + 1))
    }
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        ConvTranspose2d {
            weight: he_normal(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
            bias: Tensor::zeros(&[out_channels]),
            stride,
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, k) = self.dims();
        ((h - 1) * self.stride + k, (w - 1) * self.stride + k)
    }
}

/// Gathers `k×k` patches of a `[c, h, w]` image into `[c*k*k, oh*ow]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatters columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn expect_rank4(input: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match input.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        s => Err(Error::Dimension(format!("{what} expects [N, C, H, W], got {s:?}"))),
    }
}

/// Max-shifted softmax of one row.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Relu => "relu",
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool2 => "max_pool2",
            Layer::ConvTranspose2d(_) => "conv_transpose2d",
            Layer::Softmax => "softmax",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::ConvTranspose2d(c) => vec![&c.weight, &c.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::ConvTranspose2d(c) => vec![&mut c.weight, &mut c.bias],
            _ => Vec::new(),
        }
    }

    /// Output shape for a batched input shape, or a dimension error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || {
            Error::Dimension(format!(
                "{} layer cannot take input of shape {:?}",
                self.kind(),
                input
            ))
        };
        match self {
            Layer::Relu => Ok(input.to_vec()),
            Layer::Softmax => {
                if input.is_empty() {
                    Err(bad())
                } else {
                    Ok(input.to_vec())
                }
            }
            Layer::Dense(d) => {
                let (fan_in, fan_out) = d.dims();
                if input.is_empty() || input[1..].iter().product::<usize>() != fan_in {
                    return Err(bad());
                }
                Ok(vec![input[0], fan_out])
            }
            Layer::Conv2d(c) => {
                let (oc, ic, _) = c.dims();
                match input {
                    &[n, ch, h, w] if ch == ic => {
                        let (oh, ow) = c.output_hw(h, w).ok_or_else(bad)?;
                        Ok(vec![n, oc, oh, ow])
                    }
                    _ => Err(bad()),
                }
            }
            Layer::MaxPool2 => match input {
                &[n, ch, h, w] if h >= 2 && w >= 2 => Ok(vec![n, ch, h / 2, w / 2]),
                _ => Err(bad()),
            },
            Layer::ConvTranspose2d(c) => {
                let (ic, oc, _) = c.dims();
                match input {
                    &[n, ch, h, w] if ch == ic && h > 0 && w > 0 => {
                        let (oh, ow) = c.output_hw(h, w);
                        Ok(vec![n, oc, oh, ow])
                    }
                    _ => Err(bad()),
                }
            }
        }
    }

    /// Inference-only forward pass; keeps no cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        if let Layer::Relu = self {
            let mut out = input.clone();
            out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            return Ok(out);
        }
        self.forward(input).map(|(out, _)| out)
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        let out_shape = self.output_shape(input.shape())?;
        match self {
            Layer::Relu => {
                let mut out = input.clone();
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                Ok((
                    out,
                    Cache::Relu {
                        input: input.clone(),
                    },
                ))
            }
            Layer::Softmax => {
                let c = *input.shape().last().unwrap();
                let mut out = Tensor::zeros(input.shape());
                for (src, dst) in input
                    .data()
                    .chunks(c)
                    .zip(out.data_mut().chunks_mut(c))
                {
                    softmax_into(src, dst);
                }
                let cache = Cache::Softmax {
                    output: out.clone(),
                };
                Ok((out, cache))
            }
            Layer::Dense(d) => {
                let (fan_in, fan_out) = d.dims();
                let n = input.shape()[0];
                let mut out = vec![0.0; n * fan_out];
                for row in out.chunks_mut(fan_out) {
                    row.copy_from_slice(d.bias.data());
                }
                gemm_nt(n, fan_in, fan_out, input.data(), d.weight.data(), &mut out);
                Ok((
                    Tensor::new(out_shape, out)?,
                    Cache::Dense {
                        input: input.clone(),
                    },
                ))
            }
            Layer::Conv2d(conv) => {
                let (n, ic, h, w) = expect_rank4(input, "conv2d")?;
                let (oc, _, k) = conv.dims();
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let p = oh * ow;
                let rows = ic * k * k;
                let mut cols = vec![0.0; n * rows * p];
                let mut out = vec![0.0; n * oc * p];
                for b in 0..n {
                    let x = &input.data()[b * ic * h * w..(b + 1) * ic * h * w];
                    let col = &mut cols[b * rows * p..(b + 1) * rows * p];
                    im2col(x, ic, h, w, k, 1, conv.padding, oh, ow, col);
                    let y = &mut out[b * oc * p..(b + 1) * oc * p];
                    for (o, chunk) in y.chunks_mut(p).enumerate() {
                        chunk.fill(conv.bias.data()[o]);
                    }
                    gemm_nn(oc, rows, p, conv.weight.data(), col, y);
                }
                Ok((
                    Tensor::new(out_shape, out)?,
                    Cache::Conv2d {
                        input_shape: input.shape().to_vec(),
                        cols,
                    },
                ))
            }
            Layer::MaxPool2 => {
                let (n, c, h, w) = expect_rank4(input, "max_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; n * c * oh * ow];
                let mut argmax = vec![0usize; out.len()];
                let x = input.data();
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + (2 * oy) * w + 2 * ox;
                            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                            let o = (plane * oh + oy) * ow + ox;
                            out[o] = x[best];
                            argmax[o] = best;
                        }
                    }
                }
                Ok((
                    Tensor::new(out_shape, out)?,
                    Cache::MaxPool2 {
                        input_shape: input.shape().to_vec(),
                        argmax,
                    },
                ))
            }
            Layer::ConvTranspose2d(conv) => {
                let (n, ic, h, w) = expect_rank4(input, "conv_transpose2d")?;
                let (_, oc, k) = conv.dims();
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let p = h * w;
                let rows = oc * k * k;
                let mut out = vec![0.0; n * oc * oh * ow];
                let mut z = vec![0.0; rows * p];
                for b in 0..n {
                    let x = &input.data()[b * ic * p..(b + 1) * ic * p];
                    z.fill(0.0);
                    gemm_tn(rows, ic, p, conv.weight.data(), x, &mut z);
                    let y = &mut out[b * oc * oh * ow..(b + 1) * oc * oh * ow];
                    for (o, chunk) in y.chunks_mut(oh * ow).enumerate() {
                        chunk.fill(conv.bias.data()[o]);
                    }
                    col2im(&z, oc, oh, ow, k, conv.stride, 0, h, w, y);
                }
                Ok((
                    Tensor::new(out_shape, out)?,
                    Cache::ConvTranspose2d {
                        input: input.clone(),
                    },
                ))
            }
        }
    }

    /// Returns the input gradient (skipped when `need_input_grad` is false)
    /// and the parameter gradients in `params()` order.
    pub fn backward(
        &self,
        cache: &Cache,
        output_grad: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        match (self, cache) {
            (Layer::Relu, Cache::Relu { input }) => {
                check_same(input.shape(), output_grad.shape(), "relu")?;
                let mut g = output_grad.clone();
                for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok((Some(g), Vec::new()))
            }
            (Layer::Softmax, Cache::Softmax { output }) => {
                check_same(output.shape(), output_grad.shape(), "softmax")?;
                let c = *output.shape().last().unwrap();
                let mut g = Tensor::zeros(output.shape());
                for ((y, dy), dx) in output
                    .data()
                    .chunks(c)
                    .zip(output_grad.data().chunks(c))
                    .zip(g.data_mut().chunks_mut(c))
                {
                    let s: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for i in 0..c {
                        dx[i] = y[i] * (dy[i] - s);
                    }
                }
                Ok((Some(g), Vec::new()))
            }
            (Layer::Dense(d), Cache::Dense { input }) => {
                let (fan_in, fan_out) = d.dims();
                let n = input.shape()[0];
                check_same(&[n, fan_out], output_grad.shape(), "dense")?;
                let dy = output_grad.data();
                let mut dw = vec![0.0; fan_out * fan_in];
                gemm_tn(fan_out, n, fan_in, dy, input.data(), &mut dw);
                let mut db = vec![0.0; fan_out];
                for row in dy.chunks(fan_out) {
                    for (b, &g) in db.iter_mut().zip(row) {
                        *b += g;
                    }
                }
                let dx = if need_input_grad {
                    let mut dx = vec![0.0; n * fan_in];
                    gemm_nn(n, fan_out, fan_in, dy, d.weight.data(), &mut dx);
                    Some(Tensor::new(input.shape().to_vec(), dx)?)
                } else {
                    None
                };
                Ok((
                    dx,
                    vec![
                        Tensor::new(d.weight.shape().to_vec(), dw)?,
                        Tensor::new(vec![fan_out], db)?,
                    ],
                ))
            }
            (Layer::Conv2d(conv), Cache::Conv2d { input_shape, cols }) => {
                let (n, ic, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
                let (oc, _, k) = conv.dims();
                let expected = self.output_shape(input_shape)?;
                check_same(&expected, output_grad.shape(), "conv2d")?;
                let (oh, ow) = (expected[2], expected[3]);
                let p = oh * ow;
                let rows = ic * k * k;
                let mut dw = vec![0.0; oc * rows];
                let mut db = vec![0.0; oc];
                let mut dx = if need_input_grad {
                    Some(vec![0.0; n * ic * h * w])
                } else {
                    None
                };
                let mut dcols = vec![0.0; rows * p];
                for b in 0..n {
                    let dy = &output_grad.data()[b * oc * p..(b + 1) * oc * p];
                    let col = &cols[b * rows * p..(b + 1) * rows * p];
                    gemm_nt(oc, p, rows, dy, col, &mut dw);
                    for (o, chunk) in dy.chunks(p).enumerate() {
                        db[o] += chunk.iter().sum::<f64>();
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.fill(0.0);
                        gemm_tn(rows, oc, p, conv.weight.data(), dy, &mut dcols);
                        let dxb = &mut dx[b * ic * h * w..(b + 1) * ic * h * w];
                        col2im(&dcols, ic, h, w, k, 1, conv.padding, oh, ow, dxb);
                    }
                }
                let dx = dx
                    .map(|v| Tensor::new(input_shape.clone(), v))
                    .transpose()?;
                Ok((
                    dx,
                    vec![
                        Tensor::new(conv.weight.shape().to_vec(), dw)?,
                        Tensor::new(vec![oc], db)?,
                    ],
                ))
            }
            (Layer::MaxPool2, Cache::MaxPool2 { input_shape, argmax }) => {
                let expected = self.output_shape(input_shape)?;
                check_same(&expected, output_grad.shape(), "max_pool2")?;
                let mut dx = Tensor::zeros(input_shape);
                for (&idx, &g) in argmax.iter().zip(output_grad.data()) {
                    dx.data_mut()[idx] += g;
                }
                Ok((Some(dx), Vec::new()))
            }
            (Layer::ConvTranspose2d(conv), Cache::ConvTranspose2d { input }) => {
                let (n, ic, h, w) = expect_rank4(input, "conv_transpose2d")?;
                let (_, oc, k) = conv.dims();
                let expected = self.output_shape(input.shape())?;
                check_same(&expected, output_grad.shape(), "conv_transpose2d")?;
                let (oh, ow) = (expected[2], expected[3]);
                let p = h * w;
                let rows = oc * k * k;
                let mut dw = vec![0.0; ic * rows];
                let mut db = vec![0.0; oc];
                let mut dx = if need_input_grad {
                    Some(vec![0.0; n * ic * p])
                } else {
                    None
                };
                let mut dz = vec![0.0; rows * p];
                for b in 0..n {
                    let dy = &output_grad.data()[b * oc * oh * ow..(b + 1) * oc * oh * ow];
                    for (o, chunk) in dy.chunks(oh * ow).enumerate() {
                        db[o] += chunk.iter().sum::<f64>();
                    }
                    im2col(dy, oc, oh, ow, k, conv.stride, 0, h, w, &mut dz);
                    let x = &input.data()[b * ic * p..(b + 1) * ic * p];
                    gemm_nt(ic, p, rows, x, &dz, &mut dw);
                    if let Some(dx) = dx.as_mut() {
                        gemm_nn(ic, rows, p, conv.weight.data(), &dz, &mut dx[b * ic * p..(b + 1) * ic * p]);
                    }
                }
                let dx = dx
                    .map(|v| Tensor::new(input.shape().to_vec(), v))
                    .transpose()?;
                Ok((
                    dx,
                    vec![
                        Tensor::new(conv.weight.shape().to_vec(), dw)?,
                        Tensor::new(vec![oc], db)?,
                    ],
                ))
            }
            (layer, _) => Err(Error::Argument(format!(
                "cache does not belong to a {} layer",
                layer.kind()
            ))),
        }
    }
}

fn check_same(expected: &[usize], got: &[usize], what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension(format!(
            "{what} backward: expected gradient of shape {expected:?}, got {got:?}"
        )));
    }
    Ok(())
}
