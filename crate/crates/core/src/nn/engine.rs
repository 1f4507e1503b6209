//! Forward and backward passes over a stack of primitive layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::{stack_output_shape, LayerSpec, BN_EPS};
use crate::nn::params::{ParamKey, ParameterTree, Role};
use crate::tensor::Tensor;

/// A contiguous run of backbone layers. `first` is the absolute index of the
/// first layer, so parameter keys stay stable when a backbone is split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStack {
    pub first: usize,
    pub layers: Vec<LayerSpec>,
}

impl LayerStack {
    pub fn new(first: usize, layers: Vec<LayerSpec>) -> Self {
        LayerStack { first, layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// `(absolute index, layer)` pairs.
    pub fn indexed(&self) -> impl Iterator<Item = (usize, &LayerSpec)> + '_ {
        self.layers
            .iter()
            .enumerate()
            .map(move |(i, l)| (self.first + i, l))
    }

    pub fn end(&self) -> usize {
        self.first + self.layers.len()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        stack_output_shape(&self.layers, self.first, input)
    }

    /// Per-sample input shape of every layer, plus the final output shape.
    pub fn shape_trace(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input.to_vec()];
        for (idx, layer) in self.indexed() {
            let next = layer.output_shape(shapes.last().unwrap(), idx)?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn param_keys(&self) -> Vec<(ParamKey, Vec<usize>)> {
        self.indexed()
            .flat_map(|(idx, layer)| {
                layer
                    .param_shapes()
                    .into_iter()
                    .map(move |(role, shape)| (ParamKey::new(idx, role), shape))
            })
            .collect()
    }

    /// Fan-in scaled uniform initialization; batchnorm starts at scale 1,
    /// shift 0.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParameterTree {
        let mut tree = ParameterTree::new();
        for (idx, layer) in self.indexed() {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            for (role, shape) in layer.param_shapes() {
                let len: usize = shape.iter().product();
                let data: Vec<f64> = match (layer, role) {
                    (LayerSpec::BatchNorm { .. }, Role::Weight) => vec![1.0; len],
                    (LayerSpec::BatchNorm { .. }, Role::Bias) => vec![0.0; len],
                    _ => (0..len).map(|_| rng.random_range(-bound..bound)).collect(),
                };
                tree.insert(ParamKey::new(idx, role), Tensor::new(shape, data).unwrap());
            }
        }
        tree
    }

    /// Every trainable layer has correctly shaped parameters.
    pub fn check_params(&self, params: &ParameterTree) -> Result<()> {
        for (key, shape) in self.param_keys() {
            let t = params.require(&key)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    key.layer,
                    format!(
                        "parameter {key} has shape {:?}, expected {shape:?}",
                        t.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

enum Saved {
    Input(Tensor),
    ReluMask(Vec<bool>),
    MaxPool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
}

/// Activations recorded by [`forward`]. Consumed by [`backward`], so a tape
/// can only ever be replayed once.
pub struct GradientTape<'a> {
    stack: &'a LayerStack,
    params: &'a ParameterTree,
    saved: Vec<Saved>,
    output_shape: Vec<usize>,
}

impl GradientTape<'_> {
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

pub fn forward<'a>(
    stack: &'a LayerStack,
    params: &'a ParameterTree,
    batch: &Tensor,
) -> Result<(Tensor, GradientTape<'a>)> {
    run_forward(stack, params, batch, true).map(|(out, saved)| {
        let tape = GradientTape {
            stack,
            params,
            saved,
            output_shape: out.shape().to_vec(),
        };
        (out, tape)
    })
}

/// Forward pass without recording a tape.
pub fn infer(stack: &LayerStack, params: &ParameterTree, batch: &Tensor) -> Result<Tensor> {
    run_forward(stack, params, batch, false).map(|(out, _)| out)
}

fn run_forward(
    stack: &LayerStack,
    params: &ParameterTree,
    batch: &Tensor,
    record: bool,
) -> Result<(Tensor, Vec<Saved>)> {
    if batch.shape().len() < 2 {
        return Err(Error::shape(
            stack.first,
            "batch must have a leading batch dimension",
        ));
    }
    let mut x = batch.clone();
    let mut saved = Vec::with_capacity(if record { stack.len() } else { 0 });
    for (idx, layer) in stack.indexed() {
        let out_sample = layer.output_shape(x.sample_shape(), idx)?;
        let (y, s) = match *layer {
            LayerSpec::Conv2d {
                stride, padding, ..
            } => {
                let w = param(params, idx, Role::Weight)?;
                let b = param(params, idx, Role::Bias)?;
                let y = conv2d_forward(&x, w, b, stride, padding, &out_sample);
                (y, record.then_some(Saved::Input(x)))
            }
            LayerSpec::Linear { .. } => {
                let w = param(params, idx, Role::Weight)?;
                let b = param(params, idx, Role::Bias)?;
                let y = linear_forward(&x, w, b);
                (y, record.then_some(Saved::Input(x)))
            }
            LayerSpec::Relu => {
                let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
                (y, record.then_some(Saved::ReluMask(mask)))
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (y, argmax) = maxpool_forward(&x, kernel, stride, &out_sample);
                let input_shape = x.shape().to_vec();
                (
                    y,
                    record.then_some(Saved::MaxPool {
                        argmax,
                        input_shape,
                    }),
                )
            }
            LayerSpec::AvgPool { kernel, stride } => {
                let y = avgpool_forward(&x, kernel, stride, &out_sample);
                let input_shape = x.shape().to_vec();
                (y, record.then_some(Saved::AvgPool { input_shape }))
            }
            LayerSpec::Flatten => {
                let input_shape = x.shape().to_vec();
                let b = x.batch();
                let y = x.reshape(vec![b, out_sample[0]])?;
                (y, record.then_some(Saved::Flatten { input_shape }))
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = param(params, idx, Role::Weight)?;
                let beta = param(params, idx, Role::Bias)?;
                let (y, xhat, inv_std) = batchnorm_forward(&x, gamma, beta);
                (y, record.then_some(Saved::BatchNorm { xhat, inv_std }))
            }
        };
        if let Some(s) = s {
            saved.push(s);
        }
        x = y;
    }
    Ok((x, saved))
}

fn param(params: &ParameterTree, layer: usize, role: Role) -> Result<&Tensor> {
    params.require(&ParamKey::new(layer, role))
}

/// Parameter gradients for every trainable layer on the tape.
pub fn backward(tape: GradientTape<'_>, loss_grad: &Tensor) -> Result<ParameterTree> {
    backward_impl(tape, loss_grad, false).map(|(g, _)| g)
}

/// Like [`backward`] but also returns the gradient with respect to the
/// stack's input.
pub fn backward_with_input(
    tape: GradientTape<'_>,
    loss_grad: &Tensor,
) -> Result<(ParameterTree, Tensor)> {
    backward_impl(tape, loss_grad, true).map(|(g, dx)| (g, dx.expect("input gradient requested")))
}

fn backward_impl(
    tape: GradientTape<'_>,
    loss_grad: &Tensor,
    need_input_grad: bool,
) -> Result<(ParameterTree, Option<Tensor>)> {
    let GradientTape {
        stack,
        params,
        saved,
        output_shape,
    } = tape;
    if loss_grad.shape() != output_shape.as_slice() {
        return Err(Error::Usage(format!(
            "loss gradient shape {:?} does not match output shape {output_shape:?}",
            loss_grad.shape()
        )));
    }
    let mut grads = ParameterTree::new();
    let mut dy = loss_grad.clone();
    let layers: Vec<(usize, &LayerSpec)> = stack.indexed().collect();
    for ((idx, layer), s) in layers.into_iter().zip(saved).rev() {
        let is_first = idx == stack.first;
        let want_dx = need_input_grad || !is_first;
        dy = match (layer, s) {
            (
                LayerSpec::Conv2d {
                    stride, padding, ..
                },
                Saved::Input(x),
            ) => {
                let w = param(params, idx, Role::Weight)?;
                let (dx, dw, db) = conv2d_backward(&x, w, &dy, *stride, *padding, want_dx);
                grads.insert(ParamKey::weight(idx), dw);
                grads.insert(ParamKey::bias(idx), db);
                dx
            }
            (LayerSpec::Linear { .. }, Saved::Input(x)) => {
                let w = param(params, idx, Role::Weight)?;
                let (dx, dw, db) = linear_backward(&x, w, &dy, want_dx);
                grads.insert(ParamKey::weight(idx), dw);
                grads.insert(ParamKey::bias(idx), db);
                dx
            }
            (LayerSpec::Relu, Saved::ReluMask(mask)) => {
                let mut dx = dy;
                for (v, keep) in dx.data_mut().iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
                dx
            }
            (
                LayerSpec::MaxPool { .. },
                Saved::MaxPool {
                    argmax,
                    input_shape,
                },
            ) => {
                let mut dx = Tensor::zeros(&input_shape);
                let d = dx.data_mut();
                for (&src, &g) in argmax.iter().zip(dy.data()) {
                    d[src] += g;
                }
                dx
            }
            (LayerSpec::AvgPool { kernel, stride }, Saved::AvgPool { input_shape }) => {
                avgpool_backward(&dy, *kernel, *stride, &input_shape)
            }
            (LayerSpec::Flatten, Saved::Flatten { input_shape }) => dy.reshape(input_shape)?,
            (LayerSpec::BatchNorm { .. }, Saved::BatchNorm { xhat, inv_std }) => {
                let gamma = param(params, idx, Role::Weight)?;
                let (dx, dgamma, dbeta) = batchnorm_backward(&xhat, &inv_std, gamma, &dy);
                grads.insert(ParamKey::weight(idx), dgamma);
                grads.insert(ParamKey::bias(idx), dbeta);
                dx
            }
            _ => return Err(Error::Usage(format!("tape does not match layer {idx}"))),
        };
    }
    Ok((grads, need_input_grad.then_some(dy)))
}

/// Dot product with four independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results are deterministic.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output positions `o` in `0..out_len` whose input `o * stride + offset - pad`
/// falls inside `0..in_len`.
fn valid_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    offset: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = if in_len + pad > offset {
        ((in_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Geometry of one convolution, shared by the im2col helpers.
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample `[ci, h, w]` into `[ci*k*k, ho*wo]`.
    fn im2col(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let p = self.cols();
        for c in 0..self.ci {
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = valid_range(self.ho, self.h, self.stride, kh, self.pad);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = valid_range(self.wo, self.w, self.stride, kw, self.pad);
                    let row = &mut out[((c * self.k + kh) * self.k + kw) * p..][..p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * self.stride + kh - self.pad;
                        let src = &x[(c * self.h + ih) * self.w..][..self.w];
                        for ow in ow_lo..ow_hi {
                            row[oh * self.wo + ow] = src[ow * self.stride + kw - self.pad];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters `[ci*k*k, ho*wo]` back onto `[ci, h, w]`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.cols();
        for c in 0..self.ci {
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = valid_range(self.ho, self.h, self.stride, kh, self.pad);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = valid_range(self.wo, self.w, self.stride, kw, self.pad);
                    let row = &cols[((c * self.k + kh) * self.k + kw) * p..][..p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * self.stride + kh - self.pad;
                        let dst = &mut dx[(c * self.h + ih) * self.w..][..self.w];
                        for ow in ow_lo..ow_hi {
                            dst[ow * self.stride + kw - self.pad] += row[oh * self.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize, ho: usize, wo: usize) -> ConvGeom {
    ConvGeom {
        ci: x.shape()[1],
        h: x.shape()[2],
        w: x.shape()[3],
        k: w.shape()[2],
        stride,
        pad,
        ho,
        wo,
    }
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    out: &[usize],
) -> Tensor {
    let g = conv_geom(x, w, stride, pad, out[1], out[2]);
    let (bs, co) = (x.shape()[0], w.shape()[0]);
    let (q, p) = (g.rows(), g.cols());
    let sample = g.ci * g.h * g.w;
    let mut y = vec![0.0; bs * co * p];
    let mut cols = vec![0.0; q * p];
    let (wdat, bd) = (w.data(), b.data());
    for n in 0..bs {
        g.im2col(&x.data()[n * sample..][..sample], &mut cols);
        for o in 0..co {
            let plane = &mut y[(n * co + o) * p..][..p];
            plane.fill(bd[o]);
            for (r, &wv) in wdat[o * q..][..q].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                for (yv, cv) in plane.iter_mut().zip(&cols[r * p..][..p]) {
                    *yv += wv * cv;
                }
            }
        }
    }
    Tensor::new(vec![bs, co, g.ho, g.wo], y).unwrap()
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> (Tensor, Tensor, Tensor) {
    let g = conv_geom(x, w, stride, pad, dy.shape()[2], dy.shape()[3]);
    let (bs, co) = (x.shape()[0], w.shape()[0]);
    let (q, p) = (g.rows(), g.cols());
    let sample = g.ci * g.h * g.w;
    let mut dx = vec![0.0; if want_dx { x.len() } else { 0 }];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    let mut cols = vec![0.0; q * p];
    let mut dcols = vec![0.0; if want_dx { q * p } else { 0 }];
    let (wdat, dyd) = (w.data(), dy.data());
    for n in 0..bs {
        g.im2col(&x.data()[n * sample..][..sample], &mut cols);
        dcols.fill(0.0);
        for o in 0..co {
            let gplane = &dyd[(n * co + o) * p..][..p];
            db[o] += gplane.iter().sum::<f64>();
            for r in 0..q {
                let crow = &cols[r * p..][..p];
                dw[o * q + r] += dot(gplane, crow);
                let wv = wdat[o * q + r];
                if want_dx && wv != 0.0 {
                    for (d, gv) in dcols[r * p..][..p].iter_mut().zip(gplane) {
                        *d += wv * gv;
                    }
                }
            }
        }
        if want_dx {
            g.col2im(&dcols, &mut dx[n * sample..][..sample]);
        }
    }
    let dx = if want_dx {
        Tensor::new(x.shape().to_vec(), dx).unwrap()
    } else {
        Tensor::zeros(x.shape())
    };
    (
        dx,
        Tensor::new(w.shape().to_vec(), dw).unwrap(),
        Tensor::new(vec![co], db).unwrap(),
    )
}

fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (bs, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut y = Vec::with_capacity(bs * dout);
    for row in x.data().chunks(din) {
        for (o, wrow) in w.data().chunks(din).enumerate() {
            y.push(dot(row, wrow) + b.data()[o]);
        }
    }
    Tensor::new(vec![bs, dout], y).unwrap()
}

fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, want_dx: bool) -> (Tensor, Tensor, Tensor) {
    let (bs, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut dw = vec![0.0; dout * din];
    let mut db = vec![0.0; dout];
    let mut dx = vec![0.0; if want_dx { bs * din } else { 0 }];
    for n in 0..bs {
        let xrow = &x.data()[n * din..(n + 1) * din];
        let grow = &dy.data()[n * dout..(n + 1) * dout];
        for o in 0..dout {
            let g = grow[o];
            db[o] += g;
            let wrow = &w.data()[o * din..(o + 1) * din];
            let dwrow = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dwrow[i] += g * xrow[i];
            }
            if want_dx {
                let dxrow = &mut dx[n * din..(n + 1) * din];
                for i in 0..din {
                    dxrow[i] += g * wrow[i];
                }
            }
        }
    }
    let dx = if want_dx {
        Tensor::new(vec![bs, din], dx).unwrap()
    } else {
        Tensor::zeros(x.shape())
    };
    (
        dx,
        Tensor::new(vec![dout, din], dw).unwrap(),
        Tensor::new(vec![dout], db).unwrap(),
    )
}

fn maxpool_forward(x: &Tensor, k: usize, stride: usize, out: &[usize]) -> (Tensor, Vec<usize>) {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out[1], out[2]);
    let mut y = Vec::with_capacity(bs * c * ho * wo);
    let mut argmax = Vec::with_capacity(bs * c * ho * wo);
    let xd = x.data();
    for plane in 0..bs * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * stride * w + ow * stride;
                for kh in 0..k {
                    for kw in 0..k {
                        let i = base + (oh * stride + kh) * w + ow * stride + kw;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                y.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::new(vec![bs, c, ho, wo], y).unwrap(), argmax)
}

fn avgpool_forward(x: &Tensor, k: usize, stride: usize, out: &[usize]) -> Tensor {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out[1], out[2]);
    let scale = 1.0 / (k * k) as f64;
    let mut y = Vec::with_capacity(bs * c * ho * wo);
    let xd = x.data();
    for plane in 0..bs * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for kh in 0..k {
                    for kw in 0..k {
                        acc += xd[base + (oh * stride + kh) * w + ow * stride + kw];
                    }
                }
                y.push(acc * scale);
            }
        }
    }
    Tensor::new(vec![bs, c, ho, wo], y).unwrap()
}

fn avgpool_backward(dy: &Tensor, k: usize, stride: usize, input_shape: &[usize]) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (dy.shape()[2], dy.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let scale = 1.0 / (k * k) as f64;
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for plane in 0..planes {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let g = dy.data()[(plane * ho + oh) * wo + ow] * scale;
                for kh in 0..k {
                    for kw in 0..k {
                        d[base + (oh * stride + kh) * w + ow * stride + kw] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-batch normalization over every axis except channels (axis 1).
#[allow(clippy::needless_range_loop)]
fn batchnorm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let bs = x.shape()[0];
    let c = x.shape()[1];
    let spatial: usize = x.shape()[2..].iter().product();
    let count = (bs * spatial) as f64;
    let xd = x.data();
    let mut inv_std = vec![0.0; c];
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let idx = |n: usize, s: usize| (n * c + ch) * spatial + s;
        let mut mean = 0.0;
        for n in 0..bs {
            for s in 0..spatial {
                mean += xd[idx(n, s)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for n in 0..bs {
            for s in 0..spatial {
                let d = xd[idx(n, s)] - mean;
                var += d * d;
            }
        }
        var /= count;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for n in 0..bs {
            for s in 0..spatial {
                let i = idx(n, s);
                let xh = (xd[i] - mean) * istd;
                xhat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), y).unwrap(),
        Tensor::new(x.shape().to_vec(), xhat).unwrap(),
        inv_std,
    )
}

fn batchnorm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let bs = xhat.shape()[0];
    let c = xhat.shape()[1];
    let spatial: usize = xhat.shape()[2..].iter().product();
    let count = (bs * spatial) as f64;
    let (xh, g) = (xhat.data(), dy.data());
    let mut dx = vec![0.0; xhat.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let idx = |n: usize, s: usize| (n * c + ch) * spatial + s;
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for n in 0..bs {
            for s in 0..spatial {
                let i = idx(n, s);
                sum_g += g[i];
                sum_gx += g[i] * xh[i];
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let scale = gamma.data()[ch] * inv_std[ch] / count;
        for n in 0..bs {
            for s in 0..spatial {
                let i = idx(n, s);
                dx[i] = scale * (count * g[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    (
        Tensor::new(xhat.shape().to_vec(), dx).unwrap(),
        Tensor::new(vec![c], dgamma).unwrap(),
        Tensor::new(vec![c], dbeta).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tree(entries: &[(ParamKey, &[usize], &[f64])]) -> ParameterTree {
        entries
            .iter()
            .map(|(k, s, d)| (*k, Tensor::from_slice(s, d).unwrap()))
            .collect()
    }

    #[test]
    fn valid_range_matches_enumeration() {
        for out_len in 1..6 {
            for in_len in 1..8 {
                for stride in 1..3 {
                    for offset in 0..4 {
                        for pad in 0..3 {
                            let want: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * stride + offset) as isize - pad as isize;
                                    i >= 0 && i < in_len as isize
                                })
                                .collect();
                            let (lo, hi) = valid_range(out_len, in_len, stride, offset, pad);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn linear_dot_product() {
        let stack = LayerStack::new(0, vec![LayerSpec::linear(2, 1)]);
        let params = tree(&[
            (ParamKey::weight(0), &[1, 2], &[1.0, 1.0]),
            (ParamKey::bias(0), &[1], &[0.0]),
        ]);
        let x = Tensor::from_slice(&[1, 2], &[3.0, 4.0]).unwrap();
        let (y, _) = forward(&stack, &params, &x).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let stack = LayerStack::new(0, vec![LayerSpec::Relu]);
        let x = Tensor::from_slice(&[1, 3], &[-1.0, 0.0, 2.0]).unwrap();
        let y = infer(&stack, &ParameterTree::new(), &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_convolution() {
        let stack = LayerStack::new(0, vec![LayerSpec::conv(1, 1, 1, 0)]);
        let params = tree(&[
            (ParamKey::weight(0), &[1, 1, 1, 1], &[1.0]),
            (ParamKey::bias(0), &[1], &[0.0]),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 5 * 4)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let x = Tensor::from_slice(&[2, 1, 5, 4], &data).unwrap();
        let y = infer(&stack, &params, &x).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn linear_weight_gradient_is_input() {
        let stack = LayerStack::new(0, vec![LayerSpec::linear(1, 1)]);
        let params = tree(&[
            (ParamKey::weight(0), &[1, 1], &[0.7]),
            (ParamKey::bias(0), &[1], &[0.1]),
        ]);
        let x = Tensor::from_slice(&[1, 1], &[2.5]).unwrap();
        let (_, tape) = forward(&stack, &params, &x).unwrap();
        let g = backward(tape, &Tensor::full(&[1, 1], 1.0)).unwrap();
        assert_eq!(g.get(&ParamKey::weight(0)).unwrap().data(), &[2.5]);
        assert_eq!(g.get(&ParamKey::bias(0)).unwrap().data(), &[1.0]);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let stack = LayerStack::new(
            0,
            vec![
                LayerSpec::conv(1, 2, 3, 1),
                LayerSpec::BatchNorm { channels: 2 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::linear(2 * 4 * 4, 3),
            ],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = stack.init_params(&mut rng);
        let data: Vec<f64> = (0..3 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_slice(&[3, 1, 4, 4], &data).unwrap();
        let (y, tape) = forward(&stack, &params, &x).unwrap();
        let g = backward(tape, &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(g.len(), params.len());
        assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn missing_parameter_is_config_error() {
        let stack = LayerStack::new(0, vec![LayerSpec::linear(2, 1)]);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            forward(&stack, &ParameterTree::new(), &x),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let stack = LayerStack::new(5, vec![LayerSpec::Relu, LayerSpec::linear(3, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = stack.init_params(&mut rng);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            forward(&stack, &params, &x),
            Err(Error::Shape { layer: 6, .. })
        ));
    }

    #[test]
    fn loss_grad_shape_checked() {
        let stack = LayerStack::new(0, vec![LayerSpec::Relu]);
        let params = ParameterTree::new();
        let x = Tensor::zeros(&[1, 2]);
        let (_, tape) = forward(&stack, &params, &x).unwrap();
        assert!(matches!(
            backward(tape, &Tensor::zeros(&[1, 3])),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn pruned_channel_stays_zero_through_batchnorm() {
        let stack = LayerStack::new(0, vec![LayerSpec::BatchNorm { channels: 2 }]);
        let params = tree(&[
            (ParamKey::weight(0), &[2], &[0.0, 1.0]),
            (ParamKey::bias(0), &[2], &[0.0, 0.5]),
        ]);
        let x = Tensor::from_slice(&[2, 2, 1, 1], &[0.0, 1.0, 0.0, 3.0]).unwrap();
        let y = infer(&stack, &params, &x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[2], 0.0);
    }
}
