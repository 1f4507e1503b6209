use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::Role;

/// Variance floor used by batch normalization.
pub const BN_EPS: f64 = 1e-5;

/// One primitive layer of a backbone. Shapes below exclude the batch
/// dimension: images are `[C, H, W]`, feature vectors are `[D]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    BatchNorm {
        channels: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::BatchNorm { .. } => "batchnorm",
        }
    }

    pub fn trainable(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } | LayerSpec::BatchNorm { .. }
        )
    }

    /// Layers whose output channels can be scored and pruned.
    pub fn prunable(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. })
    }

    pub fn out_channels(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            LayerSpec::Linear { out_features, .. } => Some(out_features),
            LayerSpec::BatchNorm { channels } => Some(channels),
            _ => None,
        }
    }

    /// Parameter tensors this layer owns, in key order.
    pub fn param_shapes(&self) -> Vec<(Role, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                (
                    Role::Weight,
                    vec![out_channels, in_channels, kernel, kernel],
                ),
                (Role::Bias, vec![out_channels]),
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                (Role::Weight, vec![out_features, in_features]),
                (Role::Bias, vec![out_features]),
            ],
            LayerSpec::BatchNorm { channels } => {
                vec![(Role::Weight, vec![channels]), (Role::Bias, vec![channels])]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Fan-in used for uniform initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 1,
        }
    }

    /// Per-sample output shape for a per-sample input shape. `index` only
    /// labels errors.
    pub fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = image_dims(input, index, self.name())?;
                if c != in_channels {
                    return Err(Error::shape(
                        index,
                        format!("conv2d expects {in_channels} input channels, got {c}"),
                    ));
                }
                if stride == 0 || kernel == 0 {
                    return Err(Error::shape(
                        index,
                        "conv2d kernel and stride must be positive",
                    ));
                }
                let ho = window_out(h + 2 * padding, kernel, stride)
                    .ok_or_else(|| Error::shape(index, "conv2d kernel larger than padded input"))?;
                let wo = window_out(w + 2 * padding, kernel, stride)
                    .ok_or_else(|| Error::shape(index, "conv2d kernel larger than padded input"))?;
                Ok(vec![out_channels, ho, wo])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.len() != 1 || input[0] != in_features {
                    return Err(Error::shape(
                        index,
                        format!("linear expects [{in_features}], got {input:?}"),
                    ));
                }
                Ok(vec![out_features])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                let [c, h, w] = image_dims(input, index, self.name())?;
                if stride == 0 || kernel == 0 {
                    return Err(Error::shape(
                        index,
                        "pool kernel and stride must be positive",
                    ));
                }
                let ho = window_out(h, kernel, stride)
                    .ok_or_else(|| Error::shape(index, "pool window larger than input"))?;
                let wo = window_out(w, kernel, stride)
                    .ok_or_else(|| Error::shape(index, "pool window larger than input"))?;
                Ok(vec![c, ho, wo])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::BatchNorm { channels } => {
                if input.is_empty() || input[0] != channels {
                    return Err(Error::shape(
                        index,
                        format!("batchnorm expects {channels} channels, got {input:?}"),
                    ));
                }
                Ok(input.to_vec())
            }
        }
    }
}

fn image_dims(input: &[usize], index: usize, name: &str) -> Result<[usize; 3]> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(Error::shape(
            index,
            format!("{name} expects [C, H, W], got {input:?}"),
        )),
    }
}

fn window_out(extent: usize, kernel: usize, stride: usize) -> Option<usize> {
    (extent >= kernel).then(|| (extent - kernel) / stride + 1)
}

/// Composes `output_shape` over a sequence of layers starting at absolute
/// index `first`.
pub fn stack_output_shape(
    layers: &[LayerSpec],
    first: usize,
    input: &[usize],
) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, layer) in layers.iter().enumerate() {
        shape = layer.output_shape(&shape, first + i)?;
    }
    Ok(shape)
}
