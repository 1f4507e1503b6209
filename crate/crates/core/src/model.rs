//! Backbone definitions, the encoder/predictor split and embeddings.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, LayerSpec, LayerStack, ParameterTree};
use crate::tensor::Tensor;

pub type TaskId = usize;
pub type ClientId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Pretrained,
    Fresh,
}

/// An N-layer network plus its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    pub stack: LayerStack,
    pub input_shape: Vec<usize>,
    pub weights: ParameterTree,
    pub provenance: Provenance,
}

impl BackboneModel {
    pub fn new(
        layers: Vec<LayerSpec>,
        input_shape: Vec<usize>,
        weights: ParameterTree,
        provenance: Provenance,
    ) -> Result<Self> {
        if layers.len() < 2 {
            return Err(Error::Config(format!(
                "a backbone needs at least 2 layers, got {}",
                layers.len()
            )));
        }
        let stack = LayerStack::new(0, layers);
        stack.output_shape(&input_shape)?;
        stack.check_params(&weights)?;
        Ok(BackboneModel {
            stack,
            input_shape,
            weights,
            provenance,
        })
    }

    pub fn fresh(layers: Vec<LayerSpec>, input_shape: Vec<usize>, seed: u64) -> Result<Self> {
        let stack = LayerStack::new(0, layers.clone());
        let weights = stack.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        Self::new(layers, input_shape, weights, Provenance::Fresh)
    }

    pub fn num_layers(&self) -> usize {
        self.stack.len()
    }

    pub fn output_classes(&self) -> Result<usize> {
        let out = self.stack.output_shape(&self.input_shape)?;
        match out.as_slice() {
            &[k] => Ok(k),
            other => Err(Error::Config(format!(
                "backbone output must be a vector, got {other:?}"
            ))),
        }
    }
}

/// The desk-scale backbone, fifteen primitive layers:
///
/// ```text
///  0 conv 5x5 C->10   1 bn   2 relu   3 maxpool 2
///  4 conv 5x5 10->32  5 bn   6 relu   7 maxpool 2
///  8 conv 1x1 32->6   9 bn  10 relu  11 flatten
/// 12 linear ->10     13 relu 14 linear 10->classes
/// ```
///
/// Splitting at a quarter, half or three quarters of the depth (layers 4, 8
/// and 12) always leaves at least one hidden conv or linear layer in the
/// predictor, so pruning acts at every split point.
pub fn desk_backbone_layers(input_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    let &[c, h, w] = input_shape else {
        return Err(Error::Config(format!(
            "desk backbone needs [C, H, W] input, got {input_shape:?}"
        )));
    };
    if h < 4 || w < 4 {
        return Err(Error::Config(
            "desk backbone needs inputs of at least 4x4".into(),
        ));
    }
    let (c1, c2, c3, hidden) = (10, 32, 6, 10);
    let flat = c3 * (h / 2 / 2) * (w / 2 / 2);
    Ok(vec![
        LayerSpec::conv(c, c1, 5, 2),
        LayerSpec::BatchNorm { channels: c1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool {
            kernel: 2,
            stride: 2,
        },
        LayerSpec::conv(c1, c2, 5, 2),
        LayerSpec::BatchNorm { channels: c2 },
        LayerSpec::Relu,
        LayerSpec::MaxPool {
            kernel: 2,
            stride: 2,
        },
        LayerSpec::conv(c2, c3, 1, 0),
        LayerSpec::BatchNorm { channels: c3 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::linear(flat, hidden),
        LayerSpec::Relu,
        LayerSpec::linear(hidden, classes),
    ])
}

/// `ceil(fraction * total)`, which must leave both encoder and predictor
/// non-empty.
pub fn encoder_depth(total: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "encoder fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = (fraction * total as f64).ceil() as usize;
    if n < 1 || n > total.saturating_sub(1) {
        return Err(Error::Config(format!(
            "fraction {fraction} of {total} layers gives an encoder of {n} layers"
        )));
    }
    Ok(n)
}

/// Frozen first `n` layers of a backbone. Cheap to clone and safe to share
/// between threads; there is no mutable access to its weights.
#[derive(Debug, Clone)]
pub struct EncoderView {
    stack: Arc<LayerStack>,
    weights: Arc<ParameterTree>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

/// Cache key of an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EmbeddingKey {
    pub client: ClientId,
    pub task: TaskId,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub key: EmbeddingKey,
    pub values: Tensor,
}

impl EncoderView {
    /// Number of backbone layers covered. Zero means identity.
    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    pub fn stack(&self) -> &LayerStack {
        &self.stack
    }

    pub fn weights(&self) -> &ParameterTree {
        &self.weights
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn digest(&self) -> [u8; 32] {
        self.weights.digest()
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                0,
                format!(
                    "encoder expects samples of shape {:?}, got {:?}",
                    self.input_shape,
                    batch.sample_shape()
                ),
            ));
        }
        if self.stack.is_empty() {
            return Ok(batch.clone());
        }
        nn::infer(&self.stack, &self.weights, batch)
    }

    pub fn encode(&self, key: EmbeddingKey, batch: &Tensor) -> Result<Embedding> {
        Ok(Embedding {
            key,
            values: self.forward(batch)?,
        })
    }
}

/// Trainable tail of a backbone for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictor {
    pub stack: LayerStack,
    pub params: ParameterTree,
    /// Per-sample shape of the embeddings this predictor consumes.
    pub input_shape: Vec<usize>,
    pub task: Option<TaskId>,
}

impl Predictor {
    pub fn forward<'a>(&'a self, embedding: &Tensor) -> Result<(Tensor, nn::GradientTape<'a>)> {
        nn::forward(&self.stack, &self.params, embedding)
    }

    pub fn infer(&self, embedding: &Tensor) -> Result<Tensor> {
        nn::infer(&self.stack, &self.params, embedding)
    }

    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    /// The same layers with different weights.
    pub fn with_params(&self, params: ParameterTree) -> Result<Predictor> {
        self.stack.check_params(&params)?;
        Ok(Predictor {
            params,
            ..self.clone()
        })
    }
}

/// Splits a backbone into the frozen encoder (`[0, n)`) and a predictor
/// template (`[n, N)`) initialized from the backbone's tail weights.
pub fn split_backbone(backbone: &BackboneModel, fraction: f64) -> Result<(EncoderView, Predictor)> {
    let n = encoder_depth(backbone.num_layers(), fraction)?;
    split_at(backbone, n)
}

/// Split at an explicit depth. `n = 0` gives an identity encoder and a
/// predictor covering the whole backbone, which is how the baselines train.
pub fn split_at(backbone: &BackboneModel, n: usize) -> Result<(EncoderView, Predictor)> {
    let total = backbone.num_layers();
    if n >= total {
        return Err(Error::Config(format!("cannot split {total} layers at {n}")));
    }
    let layers = &backbone.stack.layers;
    let enc_stack = LayerStack::new(0, layers[..n].to_vec());
    let enc_out = enc_stack.output_shape(&backbone.input_shape)?;
    let encoder = EncoderView {
        weights: Arc::new(backbone.weights.restrict(0..n)),
        stack: Arc::new(enc_stack),
        input_shape: backbone.input_shape.clone(),
        output_shape: enc_out.clone(),
    };
    let predictor = Predictor {
        stack: LayerStack::new(n, layers[n..].to_vec()),
        params: backbone.weights.restrict(n..total),
        input_shape: enc_out,
        task: None,
    };
    Ok((encoder, predictor))
}

/// One independent deep copy of the template per task.
pub fn instantiate_predictors(
    template: &Predictor,
    tasks: &[TaskId],
) -> BTreeMap<TaskId, Predictor> {
    tasks
        .iter()
        .map(|&t| {
            let mut p = template.clone();
            p.task = Some(t);
            (t, p)
        })
        .collect()
}

/// Settings for central pre-training of the backbone on public data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains a fresh backbone on the pooled public splits of `tasks`. Labels
/// keep their task-local values, so the head learns a shared label space of
/// width `max(classes)`.
pub fn pretrain_backbone(
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    tasks: &[&Dataset],
    config: &PretrainConfig,
) -> Result<BackboneModel> {
    let mut model = BackboneModel::fresh(layers, input_shape, config.seed)?;
    let mut pool: Vec<(usize, usize)> = tasks
        .iter()
        .enumerate()
        .flat_map(|(t, d)| d.splits.public.iter().map(move |&i| (t, i)))
        .collect();
    if pool.is_empty() || config.epochs == 0 {
        return Ok(model);
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed));
    let batches: Vec<(Tensor, Vec<usize>)> = pool
        .chunks(config.batch_size.max(1))
        .map(|chunk| {
            let mut data = Vec::new();
            let mut labels = Vec::with_capacity(chunk.len());
            for &(t, i) in chunk {
                data.extend_from_slice(tasks[t].image(i));
                labels.push(tasks[t].label(i));
            }
            let mut shape = vec![chunk.len()];
            shape.extend_from_slice(&model.input_shape);
            (Tensor::new(shape, data).expect("pretrain batch"), labels)
        })
        .collect();
    for _ in 0..config.epochs {
        train_epoch(
            &model.stack,
            &mut model.weights,
            &batches,
            config.lr,
            config.weight_decay,
            None,
        )?;
    }
    model.provenance = Provenance::Pretrained;
    Ok(model)
}

/// One pass of SGD over `batches`. When `grad_mask` is given, gradients are
/// multiplied by it element-wise before every step. Returns the mean loss.
pub fn train_epoch(
    stack: &LayerStack,
    params: &mut ParameterTree,
    batches: &[(Tensor, Vec<usize>)],
    lr: f64,
    weight_decay: f64,
    grad_mask: Option<&ParameterTree>,
) -> Result<f64> {
    let mut total = 0.0;
    for (x, labels) in batches {
        let (logits, tape) = nn::forward(stack, params, x)?;
        let (loss, dlogits) = nn::cross_entropy(&logits, labels)?;
        let mut grads = nn::backward(tape, &dlogits)?;
        if let Some(mask) = grad_mask {
            grads = grads.zip_map(mask, |g, m| g * m)?;
        }
        nn::sgd_step(params, &grads, lr, weight_decay)?;
        total += loss;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Top-1 accuracy of `stack` on pre-encoded batches.
pub fn accuracy(
    stack: &LayerStack,
    params: &ParameterTree,
    batches: &[(Tensor, Vec<usize>)],
) -> Result<f64> {
    let (mut correct, mut seen) = (0usize, 0usize);
    for (x, labels) in batches {
        let logits = nn::infer(stack, params, x)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        seen += labels.len();
    }
    Ok(if seen == 0 {
        0.0
    } else {
        correct as f64 / seen as f64
    })
}
