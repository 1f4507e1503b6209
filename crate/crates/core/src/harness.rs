//! Experiment configuration, single runs and seed/grid sweeps.
//!
//! A run pre-trains the backbone on the pooled public splits, partitions
//! every task's train split over the clients, plays the configured number of
//! rounds and writes its artifacts into one directory:
//!
//! ```text
//! <output_dir>/<run name>/
//!     config.toml  ledger.csv  summary.json  manifest.json  backbone.bin  checkpoint.bin
//! ```
//!
//! Relative IDX paths in the dataset roster are resolved against the
//! directory in `FEDLPS_DATA_DIR` (or the working directory when unset).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::accounting::RoundLedger;
use crate::container::{self, Checkpoint, MaskRecord};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::federation::{
    assign_levels, level_ratio, mix_seed, ClientProfile, Federation, FederationSetup, Framework,
    LocalConfig, RecoveryMode, LEVEL_RATIOS,
};
use crate::model::{self, BackboneModel, PretrainConfig};
use crate::nn::LayerSpec;

pub const DATA_DIR_ENV: &str = "FEDLPS_DATA_DIR";
pub const VERSION: &str = concat!("fedlps ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        name: String,
        classes: usize,
        per_class: usize,
        #[serde(default = "default_margin")]
        margin: f64,
    },
    Idx {
        name: String,
        images: PathBuf,
        labels: PathBuf,
    },
}

fn default_margin() -> f64 {
    data::DEFAULT_SYNTH_MARGIN
}

impl DatasetSpec {
    pub fn name(&self) -> &str {
        match self {
            DatasetSpec::Synthetic { name, .. } | DatasetSpec::Idx { name, .. } => name,
        }
    }
}

/// Class-count roster of the desk tasks.
pub const DESK_TASK_CLASSES: [usize; 5] = [10, 6, 8, 4, 12];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub tasks: Vec<DatasetSpec>,
    /// `[C, H, W]` of synthetic samples.
    pub sample_shape: Vec<usize>,
    pub test_fraction: f64,
    /// Share of each train split set aside as public pre-training data.
    pub public_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// Missing fields in a config file take their desk-preset values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub framework: String,
    pub rounds: usize,
    pub clients: usize,
    /// Pruning ratio per capability level, level 1 first.
    pub level_ratios: Vec<f64>,
    pub encoder_fraction: f64,
    /// `None` means an IID split; otherwise the Dirichlet concentration.
    /// TOML has no null, so an absent key reads as IID.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub participation: f64,
    pub recovery: RecoveryMode,
    pub cache_embeddings: bool,
    pub eval_batch_size: usize,
    pub seed: u64,
    pub pretrain: PretrainSettings,
    /// Backbone layers; the desk backbone sized to the data when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<Vec<LayerSpec>>,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        ExperimentConfig::desk().data
    }
}

impl Default for PretrainSettings {
    fn default() -> Self {
        ExperimentConfig::desk().pretrain
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults: 8 clients, 3 tasks, 20 rounds, batch 64.
    pub fn desk() -> Self {
        ExperimentConfig {
            framework: "fedlps".into(),
            rounds: 20,
            clients: 8,
            level_ratios: LEVEL_RATIOS.to_vec(),
            encoder_fraction: 0.25,
            alpha: Some(0.5),
            lr: 0.1,
            weight_decay: 0.001,
            batch_size: 64,
            local_epochs: 2,
            participation: 1.0,
            recovery: RecoveryMode::Static,
            cache_embeddings: true,
            eval_batch_size: 256,
            seed: 0,
            pretrain: PretrainSettings {
                epochs: 20,
                lr: 0.05,
                weight_decay: 0.001,
                batch_size: 32,
            },
            backbone: None,
            data: DataConfig {
                tasks: desk_tasks(3, 60),
                sample_shape: vec![3, 12, 12],
                test_fraction: 0.2,
                public_fraction: 0.2,
            },
            output_dir: PathBuf::from("runs"),
        }
    }

    /// Full-scale federation settings on the desk data: 10 clients, 5 tasks,
    /// 100 rounds, batch 512, lr 0.001, weight decay 0.001, 5 local epochs.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.rounds = 100;
        c.clients = 10;
        c.batch_size = 512;
        c.lr = 0.001;
        c.local_epochs = 5;
        c.data.tasks = desk_tasks(5, 200);
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn framework(&self) -> Result<Framework> {
        self.framework.parse()
    }

    /// Checks every field before any compute happens.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        self.framework()?;
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if self.level_ratios.is_empty() || self.level_ratios.iter().any(|r| !(0.0..1.0).contains(r))
        {
            return bad("level_ratios must be non-empty with every ratio in [0, 1)".into());
        }
        if self.level_ratios[0] != 0.0 {
            return bad("level 1 must have ratio 0".into());
        }
        if !(self.encoder_fraction > 0.0 && self.encoder_fraction < 1.0) {
            return bad(format!(
                "encoder_fraction {} must lie in (0, 1)",
                self.encoder_fraction
            ));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return bad(format!("alpha {a} must be positive"));
            }
        }
        if !positive(self.lr) || !positive(self.pretrain.lr) {
            return bad("learning rates must be positive".into());
        }
        if self.weight_decay < 0.0 || self.pretrain.weight_decay < 0.0 {
            return bad("weight decay must be non-negative".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.pretrain.batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad(format!(
                "participation {} must lie in (0, 1]",
                self.participation
            ));
        }
        if self.data.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        let mut names: Vec<&str> = self.data.tasks.iter().map(DatasetSpec::name).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.data.tasks.len() {
            return bad("task names must be unique".into());
        }
        for t in &self.data.tasks {
            if let DatasetSpec::Synthetic {
                classes,
                per_class,
                margin,
                ..
            } = t
            {
                if *classes < 2 || *per_class == 0 || !positive(*margin) {
                    return bad(format!(
                        "synthetic task {} needs classes >= 2, per_class >= 1, margin > 0",
                        t.name()
                    ));
                }
            }
        }
        if self.data.sample_shape.len() != 3 || self.data.sample_shape.contains(&0) {
            return bad("sample_shape must be [C, H, W] with non-zero dims".into());
        }
        if !(0.0..1.0).contains(&self.data.test_fraction)
            || !(0.0..1.0).contains(&self.data.public_fraction)
        {
            return bad("split fractions must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. The output directory is left
    /// out so the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    /// Directory name of this run inside `output_dir`.
    pub fn run_name(&self) -> String {
        let partition = match self.alpha {
            None => "iid".to_string(),
            Some(a) => format!("lda{a}"),
        };
        format!(
            "{}-{}-f{}-seed{}",
            self.framework, partition, self.encoder_fraction, self.seed
        )
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `count` synthetic tasks with differing class counts.
pub fn desk_tasks(count: usize, per_class: usize) -> Vec<DatasetSpec> {
    (0..count)
        .map(|i| DatasetSpec::Synthetic {
            name: format!("synth{i}"),
            classes: DESK_TASK_CLASSES[i % DESK_TASK_CLASSES.len()],
            per_class,
            margin: data::DEFAULT_SYNTH_MARGIN,
        })
        .collect()
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Materializes the roster with train/test/public splits. Dataset seeds
/// depend on the run seed so repeats see fresh draws.
pub fn load_datasets(config: &DataConfig, seed: u64) -> Result<Vec<Dataset>> {
    let root = data_dir();
    let mut out = Vec::new();
    for (i, spec) in config.tasks.iter().enumerate() {
        let ds = match spec {
            DatasetSpec::Synthetic {
                name,
                classes,
                per_class,
                margin,
            } => data::synth_dataset_with_margin(
                name,
                *classes,
                *per_class,
                &config.sample_shape,
                mix_seed(seed, &[i as u64, 11]),
                *margin,
            )?,
            DatasetSpec::Idx {
                name,
                images,
                labels,
            } => data::load_idx(name, &root.join(images), &root.join(labels))?,
        };
        out.push(ds.with_splits(
            config.test_fraction,
            config.public_fraction,
            mix_seed(seed, &[i as u64, 12]),
        )?);
    }
    let shape = &out[0].sample_shape;
    if let Some(d) = out.iter().find(|d| &d.sample_shape != shape) {
        return Err(Error::Data(format!(
            "task {} has samples of shape {:?}, expected {:?}",
            d.name, d.sample_shape, shape
        )));
    }
    Ok(out)
}

/// Pre-trains the desk backbone on the pooled public splits. The head is as
/// wide as the largest class count.
pub fn pretrain(config: &ExperimentConfig, datasets: &[Dataset]) -> Result<BackboneModel> {
    let shape = datasets[0].sample_shape.clone();
    let classes = datasets.iter().map(|d| d.classes).max().unwrap_or(2);
    let layers = match &config.backbone {
        Some(layers) => layers.clone(),
        None => model::desk_backbone_layers(&shape, classes)?,
    };
    let refs: Vec<&Dataset> = datasets.iter().collect();
    model::pretrain_backbone(
        layers,
        shape,
        &refs,
        &PretrainConfig {
            epochs: config.pretrain.epochs,
            lr: config.pretrain.lr,
            weight_decay: config.pretrain.weight_decay,
            batch_size: config.pretrain.batch_size,
            seed: mix_seed(config.seed, &[13]),
        },
    )
}

/// Client profiles with levels, ratios and per-task shards.
pub fn build_clients(
    config: &ExperimentConfig,
    datasets: &[Dataset],
) -> Result<Vec<ClientProfile>> {
    let framework = config.framework()?;
    let levels = assign_levels(config.clients, config.level_ratios.len());
    let max_ratio = *config.level_ratios.last().expect("validated non-empty");
    let mut shards: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); config.clients];
    for (t, ds) in datasets.iter().enumerate() {
        let seed = mix_seed(config.seed, &[t as u64, 14]);
        let plan = match config.alpha {
            None => data::partition_iid(&ds.splits.train, config.clients, seed)?,
            Some(a) => data::partition_lda(ds, &ds.splits.train, config.clients, a, seed)?,
        };
        for (c, shard) in plan.shards.into_iter().enumerate() {
            shards[c].insert(t, shard);
        }
    }
    levels
        .into_iter()
        .zip(shards)
        .enumerate()
        .map(|(id, (level, shards))| {
            let ratio = match framework {
                Framework::FedDrop => max_ratio,
                Framework::FedAvg => 0.0,
                _ => level_ratio(&config.level_ratios, level)?,
            };
            Ok(ClientProfile::new(id, level, ratio, shards))
        })
        .collect()
}

/// Everything a run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub ledger: RoundLedger,
    pub manifest: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub framework: String,
    pub rounds_completed: usize,
    pub status: String,
    pub artifacts: Vec<String>,
}

/// Runs one configuration end to end using a freshly pre-trained backbone.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let datasets = load_datasets(&config.data, config.seed)?;
    let backbone = pretrain(config, &datasets)?;
    run_with(config, datasets, &backbone)
}

/// The round engine for `config`, before any round has run.
pub fn build_federation(
    config: &ExperimentConfig,
    datasets: Vec<Dataset>,
    backbone: &BackboneModel,
) -> Result<Federation> {
    config.validate()?;
    let framework = config.framework()?;
    let depth = if framework.shares_encoder() {
        model::encoder_depth(backbone.num_layers(), config.encoder_fraction)?
    } else {
        0
    };
    let (encoder, template) = model::split_at(backbone, depth)?;
    let clients = build_clients(config, &datasets)?;
    let setup = FederationSetup {
        framework,
        encoder,
        template,
        datasets,
        local: LocalConfig {
            epochs: config.local_epochs,
            lr: config.lr,
            weight_decay: config.weight_decay,
            batch_size: config.batch_size,
            seed: mix_seed(config.seed, &[15]),
            cache_embeddings: config.cache_embeddings,
        },
        recovery: config.recovery,
        participation: config.participation,
        eval_batch_size: config.eval_batch_size,
    };
    Federation::new(setup, clients)
}

/// Runs one configuration on already loaded data and backbone. On a
/// mid-run failure the partial ledger is written with a failure marker
/// before the error is returned.
pub fn run_with(
    config: &ExperimentConfig,
    datasets: Vec<Dataset>,
    backbone: &BackboneModel,
) -> Result<RunOutcome> {
    let framework = config.framework()?;
    let mut fed = build_federation(config, datasets, backbone)?;
    let dir = config.output_dir.join(config.run_name());
    let mut ledger = RoundLedger::new();
    let mut error = None;
    for _ in 0..config.rounds {
        match fed.run_round() {
            Ok(record) => ledger.record_round(record)?,
            Err(e) => {
                ledger.mark_failed(e.to_string());
                error = Some(e);
                break;
            }
        }
    }
    fs::create_dir_all(&dir)?;
    ledger.export(&dir)?;
    let mut artifacts = vec!["ledger.csv".to_string(), "summary.json".to_string()];
    fs::write(
        dir.join("backbone.bin"),
        container::encode_backbone(backbone),
    )?;
    artifacts.push("backbone.bin".into());
    let checkpoint = checkpoint_of(&fed);
    fs::write(
        dir.join("checkpoint.bin"),
        container::encode_checkpoint(&checkpoint),
    )?;
    artifacts.push("checkpoint.bin".into());
    let manifest = Manifest {
        version: VERSION.to_string(),
        config_hash: config.hash(),
        seed: config.seed,
        framework: framework.name().to_string(),
        rounds_completed: ledger.records().len(),
        status: if error.is_some() {
            "failed"
        } else {
            "complete"
        }
        .to_string(),
        artifacts,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    match error {
        Some(e) => Err(e),
        None => Ok(RunOutcome {
            dir,
            ledger,
            manifest,
        }),
    }
}

fn checkpoint_of(fed: &Federation) -> Checkpoint {
    Checkpoint {
        round: fed.state.round,
        framework: fed.setup.framework.name().to_string(),
        predictor: fed.setup.template.stack.clone(),
        input_shape: fed.setup.template.input_shape.clone(),
        globals: fed.state.globals.clone(),
        masks: fed
            .clients
            .iter()
            .flat_map(|c| c.masks.values().map(MaskRecord::of))
            .collect(),
    }
}

/// Grid of runs. Every combination of framework, partition and encoder
/// fraction is one cell, repeated once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub frameworks: Vec<String>,
    /// `None` entries are IID partitions.
    pub alphas: Vec<Option<f64>>,
    pub encoder_fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        // TOML has no null, so partitions are written as strings or numbers.
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            base: ExperimentConfig,
            frameworks: Vec<String>,
            partitions: Vec<toml::Value>,
            encoder_fractions: Vec<f64>,
            seeds: Vec<u64>,
        }
        let raw: Raw =
            toml::from_str(text).map_err(|e| Error::Usage(format!("invalid sweep spec: {e}")))?;
        let alphas = raw
            .partitions
            .iter()
            .map(|v| match v {
                toml::Value::String(s) if s == "iid" => Ok(None),
                toml::Value::Float(a) => Ok(Some(*a)),
                toml::Value::Integer(a) => Ok(Some(*a as f64)),
                other => Err(Error::Usage(format!(
                    "partition must be \"iid\" or an alpha, got {other}"
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(SweepSpec {
            base: raw.base,
            frameworks: raw.frameworks,
            alphas,
            encoder_fractions: raw.encoder_fractions,
            seeds: raw.seeds,
        })
    }

    /// One config per (cell, seed), seeds innermost.
    pub fn configs(&self) -> Result<Vec<ExperimentConfig>> {
        let cells = self.frameworks.len() * self.alphas.len() * self.encoder_fractions.len();
        if cells == 0 || self.seeds.is_empty() {
            return Err(Error::Usage("sweep grid has no cells".into()));
        }
        let mut out = Vec::new();
        for fw in &self.frameworks {
            for &alpha in &self.alphas {
                for &fraction in &self.encoder_fractions {
                    for &seed in &self.seeds {
                        let mut c = self.base.clone();
                        c.framework = fw.clone();
                        c.alpha = alpha;
                        c.encoder_fraction = fraction;
                        c.seed = seed;
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Mean final accuracy of one cell and task over its seeds. A cell where
/// every run failed has a single summary with no task and no mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub framework: String,
    pub partition: String,
    pub encoder_fraction: f64,
    pub task: Option<usize>,
    pub runs: usize,
    pub mean_accuracy: Option<f64>,
    pub failed_runs: usize,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<(ExperimentConfig, Result<RunOutcome>)>,
    pub summary: Vec<CellSummary>,
    pub merged_csv: PathBuf,
}

pub const SWEEP_CSV_HEADER: &str =
    "framework,partition,encoder_fraction,task,runs,failed_runs,mean_accuracy";

/// Runs every cell. Data and backbones are shared between cells with the
/// same seed. A failed run is counted and the sweep continues.
pub fn sweep(spec: &SweepSpec) -> Result<SweepOutcome> {
    let configs = spec.configs()?;
    let mut prepared: BTreeMap<u64, (Vec<Dataset>, BackboneModel)> = BTreeMap::new();
    let mut runs = Vec::new();
    for config in configs {
        if let std::collections::btree_map::Entry::Vacant(e) = prepared.entry(config.seed) {
            let datasets = load_datasets(&config.data, config.seed)?;
            let backbone = pretrain(&config, &datasets)?;
            e.insert((datasets, backbone));
        }
        let (datasets, backbone) = &prepared[&config.seed];
        let result = run_with(&config, datasets.clone(), backbone);
        runs.push((config, result));
    }
    let summary = summarize(&runs);
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for s in &summary {
        let task = s.task.map(|t| t.to_string()).unwrap_or_default();
        let mean = s
            .mean_accuracy
            .map(|m| format!("{m:.6}"))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{task},{},{},{mean}\n",
            s.framework, s.partition, s.encoder_fraction, s.runs, s.failed_runs
        ));
    }
    fs::create_dir_all(&spec.base.output_dir)?;
    let merged_csv = spec.base.output_dir.join("sweep.csv");
    fs::write(&merged_csv, csv)?;
    Ok(SweepOutcome {
        runs,
        summary,
        merged_csv,
    })
}

/// False for zero, negatives and NaN.
fn positive(x: f64) -> bool {
    x > 0.0
}

fn partition_label(alpha: Option<f64>) -> String {
    match alpha {
        None => "iid".into(),
        Some(a) => format!("lda{a}"),
    }
}

fn summarize(runs: &[(ExperimentConfig, Result<RunOutcome>)]) -> Vec<CellSummary> {
    type Key = (String, String, u64);
    /// Runs, per-task (accuracy sum, count), failed runs.
    type Cell = (f64, BTreeMap<usize, (f64, usize)>, usize);
    let mut cells: BTreeMap<Key, Cell> = BTreeMap::new();
    let mut order: Vec<Key> = Vec::new();
    for (config, result) in runs {
        let key = (
            config.framework.clone(),
            partition_label(config.alpha),
            config.encoder_fraction.to_bits(),
        );
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        let cell = cells
            .entry(key)
            .or_insert((config.encoder_fraction, BTreeMap::new(), 0));
        match result {
            Ok(outcome) => {
                if let Some(last) = outcome.ledger.last() {
                    for t in &last.tasks {
                        let e = cell.1.entry(t.task).or_insert((0.0, 0));
                        e.0 += t.accuracy;
                        e.1 += 1;
                    }
                }
            }
            Err(_) => cell.2 += 1,
        }
    }
    let mut out = Vec::new();
    for key in order {
        let (fraction, tasks, failed) = &cells[&key];
        let row = |task, runs, mean_accuracy| CellSummary {
            framework: key.0.clone(),
            partition: key.1.clone(),
            encoder_fraction: *fraction,
            task,
            runs,
            mean_accuracy,
            failed_runs: *failed,
        };
        if tasks.is_empty() {
            out.push(row(None, 0, None));
        }
        for (&task, &(sum, n)) in tasks {
            out.push(row(Some(task), n, Some(sum / n as f64)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let mut iid = ExperimentConfig::desk();
        iid.alpha = None;
        iid.backbone = Some(vec![LayerSpec::Flatten, LayerSpec::linear(432, 10)]);
        for c in [
            ExperimentConfig::desk(),
            ExperimentConfig::full_scale(),
            iid,
        ] {
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        let p = ExperimentConfig::full_scale();
        assert_eq!(
            (p.clients, p.data.tasks.len(), p.rounds, p.batch_size),
            (10, 5, 100, 512)
        );
        assert_eq!((p.lr, p.weight_decay, p.local_epochs), (0.001, 0.001, 5));
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut c = ExperimentConfig::desk();
        c.framework = "fedprox".into();
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
        let mut c = ExperimentConfig::desk();
        c.encoder_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.alpha = Some(0.0);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.level_ratios = vec![0.2, 0.4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::desk().to_toml();
        text.insert_str(0, "bogus = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn empty_grid_is_usage_error() {
        let spec = SweepSpec {
            base: ExperimentConfig::desk(),
            frameworks: vec![],
            alphas: vec![None],
            encoder_fractions: vec![0.25],
            seeds: vec![0],
        };
        assert!(matches!(spec.configs(), Err(Error::Usage(_))));
    }
}
