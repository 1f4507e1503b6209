//! Parameter, FLOP and communication accounting.
//!
//! FLOPs are forward FLOPs per sample with two FLOPs per multiply-accumulate:
//!
//! | layer     | FLOPs                                   |
//! |-----------|-----------------------------------------|
//! | conv2d    | `2 * k^2 * C_in * C_out * H_out * W_out` |
//! | linear    | `2 * d_in * d_out`                      |
//! | batchnorm | `2` per output element                  |
//! | relu      | `1` per output element                  |
//! | max/avg pool | `k^2` per output element             |
//! | flatten   | `0`                                     |
//!
//! Biases are not counted. Under a channel mask only live channels count:
//! a pruned output channel removes its own filter and the input slices that
//! read it downstream.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClientId, TaskId};
use crate::nn::{LayerSpec, LayerStack};
use crate::pruning::ChannelMask;

/// Per-layer structural footprint under an optional mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: usize,
    pub params: usize,
    pub flops: u64,
}

/// Walks the stack tracking how many channels are still live.
pub fn layer_costs(
    stack: &LayerStack,
    input_shape: &[usize],
    mask: Option<&ChannelMask>,
) -> Result<Vec<LayerCost>> {
    let shapes = stack.shape_trace(input_shape)?;
    let mut live = *input_shape
        .first()
        .ok_or_else(|| Error::shape(stack.first, "empty input shape"))?;
    let mut costs = Vec::with_capacity(stack.len());
    for ((idx, layer), io) in stack.indexed().zip(shapes.windows(2)) {
        let out = &io[1];
        let out_spatial: usize = out[1..].iter().product();
        let kept_out =
            |total: usize| -> usize { mask.and_then(|m| m.kept_channels(idx)).unwrap_or(total) };
        let (params, flops) = match *layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                let o = kept_out(out_channels);
                let kk = kernel * kernel;
                let p = o * live * kk + o;
                let f = 2 * kk * live * o * out_spatial;
                live = o;
                (p, f as u64)
            }
            LayerSpec::Linear { out_features, .. } => {
                let o = kept_out(out_features);
                let p = o * live + o;
                let f = 2 * live * o;
                live = o;
                (p, f as u64)
            }
            LayerSpec::BatchNorm { .. } => (2 * live, (2 * live * out_spatial) as u64),
            LayerSpec::Relu => (0, (live * out_spatial) as u64),
            LayerSpec::MaxPool { kernel, .. } | LayerSpec::AvgPool { kernel, .. } => {
                (0, (kernel * kernel * live * out_spatial) as u64)
            }
            LayerSpec::Flatten => {
                let spatial: usize = io[0][1..].iter().product();
                live *= spatial;
                (0, 0)
            }
        };
        costs.push(LayerCost {
            layer: idx,
            params,
            flops,
        });
    }
    Ok(costs)
}

/// Trainable parameters, structurally reduced under `mask`.
pub fn count_params(
    stack: &LayerStack,
    input_shape: &[usize],
    mask: Option<&ChannelMask>,
) -> Result<usize> {
    Ok(layer_costs(stack, input_shape, mask)?
        .iter()
        .map(|c| c.params)
        .sum())
}

/// Forward FLOPs per sample, structurally reduced under `mask`.
pub fn count_flops(
    stack: &LayerStack,
    input_shape: &[usize],
    mask: Option<&ChannelMask>,
) -> Result<u64> {
    Ok(layer_costs(stack, input_shape, mask)?
        .iter()
        .map(|c| c.flops)
        .sum())
}

/// Fraction removed going from `full` to `reduced`.
pub fn reduction(full: f64, reduced: f64) -> f64 {
    1.0 - reduced / full
}

/// FLOPs of one shared encoder plus `tasks` predictors, against `tasks`
/// independent full backbones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharingFlops {
    pub encoder_depth: usize,
    pub shared_total: u64,
    pub independent_total: u64,
}

impl SharingFlops {
    pub fn reduction(&self) -> f64 {
        reduction(self.independent_total as f64, self.shared_total as f64)
    }
}

pub fn sharing_flops(
    backbone: &LayerStack,
    input_shape: &[usize],
    encoder_depth: usize,
    tasks: usize,
) -> Result<SharingFlops> {
    let costs = layer_costs(backbone, input_shape, None)?;
    let encoder: u64 = costs[..encoder_depth].iter().map(|c| c.flops).sum();
    let predictor: u64 = costs[encoder_depth..].iter().map(|c| c.flops).sum();
    let full = encoder + predictor;
    Ok(SharingFlops {
        encoder_depth,
        shared_total: encoder + tasks as u64 * predictor,
        independent_total: tasks as u64 * full,
    })
}

pub const CSV_HEADER: &str = "round,framework,task,accuracy,uplink_params,downlink_params,flops";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskId,
    pub accuracy: f64,
    pub uplink_params: u64,
    pub downlink_params: u64,
    /// Training FLOPs spent on this task by all participants in the round.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub framework: String,
    pub participants: Vec<ClientId>,
    pub tasks: Vec<TaskRecord>,
    pub client_flops: BTreeMap<ClientId, u64>,
    /// `(client, task, reason)` for work that was skipped or failed.
    pub failures: Vec<(ClientId, Option<TaskId>, String)>,
    /// Excluded from CSV and JSON exports, which must be byte-stable.
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

impl RoundRecord {
    pub fn uplink(&self) -> u64 {
        self.tasks.iter().map(|t| t.uplink_params).sum()
    }

    pub fn downlink(&self) -> u64 {
        self.tasks.iter().map(|t| t.downlink_params).sum()
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.tasks.iter().map(|t| t.accuracy).sum::<f64>() / self.tasks.len().max(1) as f64
    }
}

/// Append-only per-round resource and accuracy log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundLedger {
    records: Vec<RoundRecord>,
    failure: Option<String>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    framework: &'a str,
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<&'a str>,
    rounds: usize,
    final_accuracy: BTreeMap<TaskId, f64>,
    final_mean_accuracy: f64,
    mean_accuracy_per_round: Vec<f64>,
    total_uplink_params: u64,
    total_downlink_params: u64,
    total_flops: u64,
}

impl RoundLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_round(&mut self, record: RoundRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.round <= last.round {
                return Err(Error::Usage(format!(
                    "round {} recorded after round {}",
                    record.round, last.round
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// Marks the run as failed; exports carry the marker.
    pub fn mark_failed(&mut self, reason: impl Into<String>) {
        self.failure = Some(reason.into());
    }

    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.records.last()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            for t in &r.tasks {
                writeln!(
                    out,
                    "{},{},{},{:.6},{},{},{}",
                    r.round,
                    r.framework,
                    t.task,
                    t.accuracy,
                    t.uplink_params,
                    t.downlink_params,
                    t.flops
                )
                .unwrap();
            }
        }
        out
    }

    pub fn to_json_summary(&self) -> String {
        let last = self.records.last();
        let status = match &self.failure {
            Some(_) => "failed",
            None => "complete",
        };
        let summary = Summary {
            framework: last.map(|r| r.framework.as_str()).unwrap_or(""),
            status,
            failure: self.failure.as_deref(),
            rounds: self.records.len(),
            final_accuracy: last
                .map(|r| r.tasks.iter().map(|t| (t.task, t.accuracy)).collect())
                .unwrap_or_default(),
            final_mean_accuracy: last.map(RoundRecord::mean_accuracy).unwrap_or(0.0),
            mean_accuracy_per_round: self
                .records
                .iter()
                .map(RoundRecord::mean_accuracy)
                .collect(),
            total_uplink_params: self.records.iter().map(RoundRecord::uplink).sum(),
            total_downlink_params: self.records.iter().map(RoundRecord::downlink).sum(),
            total_flops: self
                .records
                .iter()
                .flat_map(|r| &r.tasks)
                .map(|t| t.flops)
                .sum(),
        };
        let mut s = serde_json::to_string_pretty(&summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes `ledger.csv` and `summary.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        if self.records.is_empty() && self.failure.is_none() {
            return Err(Error::Usage(
                "nothing to export from an empty ledger".into(),
            ));
        }
        fs::create_dir_all(dir)?;
        let csv = dir.join("ledger.csv");
        let json = dir.join("summary.json");
        fs::write(&csv, self.to_csv())?;
        fs::write(&json, self.to_json_summary())?;
        Ok((csv, json))
    }
}
