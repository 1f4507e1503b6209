//! L1 channel importance, per-client channel masks and element-wise masking.
//!
//! A channel mask is built per prunable (conv/linear) layer over its output
//! channels and then expanded to element granularity. A pruned output channel
//! zeroes its filter, its bias entry, the scale and shift of any batchnorm
//! that follows it, and the input slices that read it in the next prunable
//! layer. Those input slices only ever see zeros, so the expanded zero set is
//! exactly the structurally removed parameters. The last prunable layer of a
//! predictor is the classifier and never loses output channels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::error::{Error, Result};
use crate::model::{ClientId, Predictor, TaskId};
use crate::nn::{LayerSpec, LayerStack, ParamKey, ParameterTree};

/// Per prunable layer, one L1 score per output channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImportanceScores {
    pub layers: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Owner {
    pub client: ClientId,
    pub task: TaskId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub owner: Owner,
    pub ratio: f64,
    /// `true` = kept, per output channel of every prunable layer.
    pub channels: BTreeMap<usize, Vec<bool>>,
    /// 0/1 values with the predictor's parameter structure.
    pub elements: ParameterTree,
}

/// Sum of absolute filter weights per output channel. Biases and
/// non-prunable layers do not contribute.
pub fn channel_importance(predictor: &Predictor) -> Result<ImportanceScores> {
    let mut layers = BTreeMap::new();
    for (idx, layer) in predictor.stack.indexed() {
        if !layer.prunable() {
            continue;
        }
        let w = predictor.params.require(&ParamKey::weight(idx))?;
        let per = w.len() / w.shape()[0];
        let scores = w
            .data()
            .chunks(per)
            .map(|filter| filter.iter().map(|v| v.abs()).sum())
            .collect();
        layers.insert(idx, scores);
    }
    if layers.is_empty() {
        return Err(Error::Config(
            "predictor has no conv or linear layer to score".into(),
        ));
    }
    Ok(ImportanceScores { layers })
}

/// Number of channels removed from a layer of `channels` at ratio `ratio`.
pub fn pruned_count(channels: usize, ratio: f64) -> usize {
    // The epsilon absorbs products such as 0.6 * 5 = 2.9999999999999996.
    (ratio * channels as f64 + 1e-9).floor() as usize
}

/// Chooses which channels to keep. In every layer except `classifier`, the
/// `floor(ratio * C)` lowest-scoring channels are dropped, lower index first
/// among equal scores.
pub fn select_channels(
    scores: &ImportanceScores,
    ratio: f64,
    classifier: Option<usize>,
) -> Result<BTreeMap<usize, Vec<bool>>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "pruning ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let mut out = BTreeMap::new();
    for (&idx, s) in &scores.layers {
        let mut keep = vec![true; s.len()];
        if Some(idx) != classifier {
            let k = pruned_count(s.len(), ratio);
            if k >= s.len() {
                return Err(Error::Config(format!(
                    "ratio {ratio} would remove all {} channels of layer {idx}",
                    s.len()
                )));
            }
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
            for &c in &order[..k] {
                keep[c] = false;
            }
        }
        out.insert(idx, keep);
    }
    Ok(out)
}

/// Index of the classifier: the last prunable layer of the stack.
pub fn classifier_layer(stack: &LayerStack) -> Option<usize> {
    stack
        .indexed()
        .filter(|(_, l)| l.prunable())
        .map(|(i, _)| i)
        .last()
}

/// Builds the client's mask for `predictor` at ratio `ratio`.
pub fn build_mask(
    predictor: &Predictor,
    scores: &ImportanceScores,
    ratio: f64,
    owner: Owner,
) -> Result<ChannelMask> {
    let channels = select_channels(scores, ratio, classifier_layer(&predictor.stack))?;
    let elements = expand_channels(&predictor.stack, &predictor.input_shape, &channels)?;
    Ok(ChannelMask {
        owner,
        ratio,
        channels,
        elements,
    })
}

/// The all-ones mask (ratio 0).
pub fn full_mask(predictor: &Predictor, owner: Owner) -> Result<ChannelMask> {
    let scores = channel_importance(predictor)?;
    build_mask(predictor, &scores, 0.0, owner)
}

/// Element-level expansion of per-channel keep flags.
pub fn expand_channels(
    stack: &LayerStack,
    input_shape: &[usize],
    channels: &BTreeMap<usize, Vec<bool>>,
) -> Result<ParameterTree> {
    let shapes = stack.shape_trace(input_shape)?;
    let mut elements: ParameterTree = stack
        .param_keys()
        .into_iter()
        .map(|(key, shape)| (key, crate::Tensor::full(&shape, 1.0)))
        .collect();
    // Keep flags of the most recent prunable layer and how many consecutive
    // features each of its channels occupies at the current point.
    let mut pending: Option<(&Vec<bool>, usize)> = None;
    for ((idx, layer), in_shape) in stack.indexed().zip(&shapes) {
        match *layer {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let w = elements.get_mut(&ParamKey::weight(idx)).unwrap().data_mut();
                let filter = in_channels * kernel * kernel;
                if let Some((keep, _)) = pending {
                    check_len(idx, keep.len(), in_channels)?;
                    let slice = kernel * kernel;
                    for o in 0..out_channels {
                        for (c, _) in keep.iter().enumerate().filter(|(_, k)| !**k) {
                            let at = o * filter + c * slice;
                            w[at..at + slice].fill(0.0);
                        }
                    }
                }
                let own = layer_flags(channels, idx, out_channels)?;
                for (o, _) in own.iter().enumerate().filter(|(_, k)| !**k) {
                    w[o * filter..(o + 1) * filter].fill(0.0);
                }
                zero_channels(&mut elements, ParamKey::bias(idx), own);
                pending = Some((own, 1));
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let w = elements.get_mut(&ParamKey::weight(idx)).unwrap().data_mut();
                if let Some((keep, block)) = pending {
                    check_len(idx, keep.len() * block, in_features)?;
                    for o in 0..out_features {
                        for (c, _) in keep.iter().enumerate().filter(|(_, k)| !**k) {
                            let at = o * in_features + c * block;
                            w[at..at + block].fill(0.0);
                        }
                    }
                }
                let own = layer_flags(channels, idx, out_features)?;
                for (o, _) in own.iter().enumerate().filter(|(_, k)| !**k) {
                    w[o * in_features..(o + 1) * in_features].fill(0.0);
                }
                zero_channels(&mut elements, ParamKey::bias(idx), own);
                pending = Some((own, 1));
            }
            LayerSpec::BatchNorm { channels: c } => {
                if let Some((keep, block)) = pending {
                    check_len(idx, keep.len() * block, c * block)?;
                    zero_channels(&mut elements, ParamKey::weight(idx), keep);
                    zero_channels(&mut elements, ParamKey::bias(idx), keep);
                }
            }
            LayerSpec::Flatten => {
                if let Some((keep, block)) = pending {
                    let spatial: usize = in_shape[1..].iter().product();
                    pending = Some((keep, block * spatial));
                }
            }
            LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } => {}
        }
    }
    Ok(elements)
}

fn layer_flags(
    channels: &BTreeMap<usize, Vec<bool>>,
    idx: usize,
    expected: usize,
) -> Result<&Vec<bool>> {
    let flags = channels
        .get(&idx)
        .ok_or_else(|| Error::shape(idx, "no channel flags for prunable layer"))?;
    check_len(idx, flags.len(), expected)?;
    Ok(flags)
}

fn check_len(idx: usize, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::shape(
            idx,
            format!("channel mask covers {got} channels, layer has {expected}"),
        ));
    }
    Ok(())
}

fn zero_channels(elements: &mut ParameterTree, key: ParamKey, keep: &[bool]) {
    if let Some(t) = elements.get_mut(&key) {
        for (v, k) in t.data_mut().iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

impl ChannelMask {
    /// `tree ⊙ M`.
    pub fn apply_to(&self, tree: &ParameterTree) -> Result<ParameterTree> {
        tree.zip_map(&self.elements, |w, m| if m == 0.0 { 0.0 } else { w })
    }

    pub fn kept_elements(&self) -> usize {
        self.elements.count_nonzero()
    }

    pub fn total_elements(&self) -> usize {
        self.elements.num_values()
    }

    pub fn kept_channels(&self, layer: usize) -> Option<usize> {
        self.channels
            .get(&layer)
            .map(|k| k.iter().filter(|&&b| b).count())
    }

    /// Element masks and channel flags agree bit for bit.
    pub fn same_support(&self, other: &ChannelMask) -> bool {
        self.channels == other.channels && self.elements.bit_eq(&other.elements)
    }
}

/// `w ⊙ M`. Masked positions become exactly zero
/// and kept positions are left bit-identical.
pub fn apply_mask(predictor: &Predictor, mask: &ChannelMask) -> Result<Predictor> {
    if let Some(task) = predictor.task {
        if task != mask.owner.task {
            return Err(Error::Usage(format!(
                "mask for task {} applied to predictor of task {task}",
                mask.owner.task
            )));
        }
    }
    if !predictor.params.same_structure(&mask.elements) {
        return Err(Error::shape(
            predictor.stack.first,
            "mask does not match predictor parameter shapes",
        ));
    }
    let params = mask.apply_to(&predictor.params)?;
    Ok(Predictor {
        params,
        ..predictor.clone()
    })
}

/// Parameters and per-sample forward FLOPs left after structural removal.
pub fn effective_counts(predictor: &Predictor, mask: &ChannelMask) -> Result<(usize, u64)> {
    let params = accounting::count_params(&predictor.stack, &predictor.input_shape, Some(mask))?;
    let flops = accounting::count_flops(&predictor.stack, &predictor.input_shape, Some(mask))?;
    Ok((params, flops))
}
