//! Client-side local training and server-side recovery and aggregation, plus
//! the FedAvg, FedDrop and overlap-aggregation baselines.
//!
//! FedLPS clients train per-task predictors on top of a frozen shared
//! encoder. The server fills every pruned position with the backbone
//! predictor's value before a data-size weighted average, so each position of
//! the new global receives a contribution from every participant. The
//! baselines train the whole backbone per task (an identity encoder) and
//! differ in who participates and how sparse updates are merged.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accounting::{self, RoundRecord, TaskRecord};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ClientId, EmbeddingKey, EncoderView, Predictor, TaskId};
use crate::nn::ParameterTree;
use crate::pruning::{self, ChannelMask, Owner};
use crate::tensor::Tensor;

/// Pruning ratio of capability levels 1 through 5.
pub const LEVEL_RATIOS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

/// Map task -> dense aggregated predictor weights.
pub type GlobalPredictors = BTreeMap<TaskId, ParameterTree>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    FedLps,
    FedAvg,
    FedDrop,
    Overlap,
}

impl Framework {
    pub const ALL: [Framework; 4] = [
        Framework::FedLps,
        Framework::FedAvg,
        Framework::FedDrop,
        Framework::Overlap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Framework::FedLps => "fedlps",
            Framework::FedAvg => "fedavg",
            Framework::FedDrop => "feddrop",
            Framework::Overlap => "overlap",
        }
    }

    /// Whether clients share a frozen encoder. Baselines train full models.
    pub fn shares_encoder(self) -> bool {
        self == Framework::FedLps
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Framework::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown framework {s:?} (expected fedlps, fedavg, feddrop or overlap)"
                ))
            })
    }
}

/// Which weights fill pruned positions during recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// The pre-trained predictor tail, fixed for the whole run.
    #[default]
    Static,
    /// The global predictor the round started from.
    PreviousGlobal,
}

/// Ratio of a 1-based capability level under `ratios`.
pub fn level_ratio(ratios: &[f64], level: usize) -> Result<f64> {
    level
        .checked_sub(1)
        .and_then(|i| ratios.get(i))
        .copied()
        .ok_or_else(|| {
            Error::Config(format!(
                "capability level {level} outside 1..={}",
                ratios.len()
            ))
        })
}

/// Levels spread evenly over clients, lowest level first.
pub fn assign_levels(clients: usize, levels: usize) -> Vec<usize> {
    (0..clients)
        .map(|i| 1 + i * levels / clients.max(1))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ClientProfile {
    pub id: ClientId,
    pub level: usize,
    pub ratio: f64,
    /// Training sample indices per task.
    pub shards: BTreeMap<TaskId, Vec<usize>>,
    /// Built in the client's first round, fixed afterwards.
    pub masks: BTreeMap<TaskId, ChannelMask>,
    cache: BTreeMap<EmbeddingKey, Tensor>,
}

impl ClientProfile {
    pub fn new(
        id: ClientId,
        level: usize,
        ratio: f64,
        shards: BTreeMap<TaskId, Vec<usize>>,
    ) -> Self {
        ClientProfile {
            id,
            level,
            ratio,
            shards,
            masks: BTreeMap::new(),
            cache: BTreeMap::new(),
        }
    }

    pub fn shard_size(&self, task: TaskId) -> usize {
        self.shards.get(&task).map_or(0, Vec::len)
    }

    pub fn cached_embeddings(&self) -> usize {
        self.cache.len()
    }
}

/// Local optimisation settings shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep encoder outputs between rounds. The encoder is frozen, so this
    /// only saves work; results are bit-identical either way.
    pub cache_embeddings: bool,
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client: ClientId,
    /// Masked trained weights per task.
    pub trees: BTreeMap<TaskId, ParameterTree>,
    pub skipped: Vec<(TaskId, String)>,
    /// Samples processed per task (shard size times epochs).
    pub samples: BTreeMap<TaskId, usize>,
}

/// SplitMix64 finalizer used to derive independent seeds.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Fixed batches of a client's shard: shuffled once per (client, task) and
/// chunked, so per-batch statistics and cached embeddings stay stable.
fn shard_batches(
    shard: &[usize],
    batch_size: usize,
    seed: u64,
    client: ClientId,
    task: TaskId,
) -> Vec<Vec<usize>> {
    let mut order = shard.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
        seed,
        &[client as u64, task as u64],
    )));
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains every task predictor of one client for `cfg.epochs` passes over
/// its shard. Masks are built from the incoming predictor the first time a
/// task is seen and reused afterwards. Gradients are masked so pruned
/// positions stay exactly zero.
pub fn local_train(
    profile: &mut ClientProfile,
    encoder: &EncoderView,
    template: &Predictor,
    incoming: &GlobalPredictors,
    datasets: &[Dataset],
    cfg: &LocalConfig,
    round: usize,
) -> Result<LocalUpdate> {
    let mut update = LocalUpdate {
        client: profile.id,
        trees: BTreeMap::new(),
        skipped: Vec::new(),
        samples: BTreeMap::new(),
    };
    if !cfg.cache_embeddings {
        profile.cache.clear();
    }
    for (&task, global) in incoming {
        let shard = profile.shards.get(&task).cloned().unwrap_or_default();
        if shard.is_empty() {
            update.skipped.push((task, "empty shard".into()));
            continue;
        }
        let dataset = datasets
            .get(task)
            .ok_or_else(|| Error::Config(format!("no dataset for task {task}")))?;
        let mut predictor = template.with_params(global.clone())?;
        predictor.task = Some(task);
        let owner = Owner {
            client: profile.id,
            task,
        };
        if !profile.masks.contains_key(&task) {
            let scores = pruning::channel_importance(&predictor)?;
            let mask = pruning::build_mask(&predictor, &scores, profile.ratio, owner)?;
            profile.masks.insert(task, mask);
        }
        let mask = &profile.masks[&task];
        let mut params = pruning::apply_mask(&predictor, mask)?.params;

        let mut batches = Vec::new();
        for (b, idx) in shard_batches(&shard, cfg.batch_size, cfg.seed, profile.id, task)
            .into_iter()
            .enumerate()
        {
            let key = EmbeddingKey {
                client: profile.id,
                task,
                batch: b,
            };
            let (x, labels) = dataset.batch(&idx);
            let emb = match profile.cache.get(&key) {
                Some(e) => e.clone(),
                None => {
                    let e = encoder.encode(key, &x)?.values;
                    if cfg.cache_embeddings && encoder.depth() > 0 {
                        profile.cache.insert(key, e.clone());
                    }
                    e
                }
            };
            batches.push((emb, labels));
        }
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..batches.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
                cfg.seed,
                &[
                    profile.id as u64,
                    task as u64,
                    round as u64,
                    epoch as u64,
                    1,
                ],
            )));
            let epoch_batches: Vec<_> = order.iter().map(|&i| batches[i].clone()).collect();
            model::train_epoch(
                &predictor.stack,
                &mut params,
                &epoch_batches,
                cfg.lr,
                cfg.weight_decay,
                Some(&mask.elements),
            )?;
        }
        if !params.is_finite() {
            return Err(Error::Protocol {
                client: profile.id,
                task,
                message: "local training diverged (non-finite weights)".into(),
            });
        }
        update.samples.insert(task, shard.len() * cfg.epochs);
        update.trees.insert(task, params);
    }
    Ok(update)
}

/// `received + (backbone - backbone ⊙ M)`: kept positions take the client's
/// values, pruned positions take the backbone predictor's.
pub fn recover(
    received: &ParameterTree,
    mask: &ChannelMask,
    backbone: &ParameterTree,
) -> Result<ParameterTree> {
    let protocol = |message: String| Error::Protocol {
        client: mask.owner.client,
        task: mask.owner.task,
        message,
    };
    if !received.same_structure(&mask.elements) || !backbone.same_structure(&mask.elements) {
        return Err(protocol(
            "received, mask and backbone predictor differ in structure".into(),
        ));
    }
    let mut out = received.clone();
    for ((key, o), (_, m)) in out.iter_mut().zip(mask.elements.iter()) {
        let b = backbone.require(key)?;
        for ((o, &m), &b) in o.data_mut().iter_mut().zip(m.data()).zip(b.data()) {
            if m == 0.0 {
                if *o != 0.0 {
                    return Err(protocol(format!(
                        "nonzero value at pruned position of {key}"
                    )));
                }
                *o = b;
            }
        }
    }
    Ok(out)
}

/// Shard-size weighted average, normalized over the given participants.
pub fn aggregate_task(
    recovered: &BTreeMap<ClientId, ParameterTree>,
    sizes: &BTreeMap<ClientId, usize>,
) -> Result<ParameterTree> {
    let total: usize = recovered
        .keys()
        .map(|c| sizes.get(c).copied().unwrap_or(0))
        .sum();
    if total == 0 {
        return Err(Error::Aggregation(
            "total shard size of participants is zero".into(),
        ));
    }
    let mut iter = recovered.iter();
    let (_, first) = iter.next().expect("nonzero total implies a participant");
    let mut acc = first.zeros_like();
    for (c, tree) in recovered {
        let w = sizes.get(c).copied().unwrap_or(0) as f64 / total as f64;
        acc = acc.zip_map(tree, |a, v| a + w * v).map_err(|_| {
            Error::Aggregation(format!(
                "client {c} sent a predictor with a different structure"
            ))
        })?;
    }
    Ok(acc)
}

/// Averages every position only over the clients whose mask keeps it,
/// weighted by shard size. Positions kept by nobody keep `previous`.
pub fn overlap_aggregate(
    received: &BTreeMap<ClientId, (ParameterTree, ChannelMask)>,
    sizes: &BTreeMap<ClientId, usize>,
    previous: &ParameterTree,
) -> Result<ParameterTree> {
    let mut den = previous.zeros_like();
    let mut kept = BTreeMap::new();
    for (c, (tree, mask)) in received {
        if !tree.same_structure(previous) {
            return Err(Error::Aggregation(format!(
                "client {c} sent a predictor with a different structure"
            )));
        }
        let w = sizes.get(c).copied().unwrap_or(0) as f64;
        let k = mask.elements.map(|m| if m == 0.0 { 0.0 } else { w });
        den = den.zip_map(&k, |a, b| a + b)?;
        kept.insert(*c, k);
    }
    // Normalized weights first, so a position kept by one client is copied exactly.
    let mut num = previous.zeros_like();
    for (c, (tree, _)) in received {
        let share = kept[c].zip_map(&den, |k, d| if d > 0.0 { k / d } else { 0.0 })?;
        let weighted = tree.zip_map(&share, |v, s| v * s)?;
        num = num.zip_map(&weighted, |a, b| a + b)?;
    }
    let mut out = previous.clone();
    for ((key, o), (_, n)) in out.iter_mut().zip(num.iter()) {
        let d = den.require(key)?;
        for ((o, &n), &d) in o.data_mut().iter_mut().zip(n.data()).zip(d.data()) {
            if d > 0.0 {
                *o = n;
            }
        }
    }
    Ok(out)
}

/// Everything a run needs besides mutable round state.
#[derive(Debug, Clone)]
pub struct FederationSetup {
    pub framework: Framework,
    pub encoder: EncoderView,
    /// Predictor layout plus the pre-trained tail weights.
    pub template: Predictor,
    pub datasets: Vec<Dataset>,
    pub local: LocalConfig,
    pub recovery: RecoveryMode,
    /// Fraction of eligible clients selected per round.
    pub participation: f64,
    /// Batch size used when evaluating on test splits.
    pub eval_batch_size: usize,
}

/// Server state carried between rounds.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    pub globals: GlobalPredictors,
    pub selected: Vec<ClientId>,
    /// `(client, task)` -> predictor received in the last round.
    pub received: BTreeMap<(ClientId, TaskId), ParameterTree>,
}

pub struct Federation {
    pub setup: FederationSetup,
    pub clients: Vec<ClientProfile>,
    pub state: RoundState,
    eval_batches: Vec<Vec<(Tensor, Vec<usize>)>>,
}

impl Federation {
    /// Initial globals are the pre-trained predictor tail for every task.
    /// Test-split embeddings are computed once up front.
    pub fn new(setup: FederationSetup, clients: Vec<ClientProfile>) -> Result<Self> {
        let globals = (0..setup.datasets.len())
            .map(|t| (t, setup.template.params.clone()))
            .collect();
        let mut eval_batches = Vec::new();
        for ds in &setup.datasets {
            let mut batches = Vec::new();
            for idx in ds.splits.test.chunks(setup.eval_batch_size.max(1)) {
                let (x, labels) = ds.batch(idx);
                batches.push((setup.encoder.forward(&x)?, labels));
            }
            eval_batches.push(batches);
        }
        Ok(Federation {
            setup,
            clients,
            state: RoundState {
                round: 0,
                globals,
                selected: Vec::new(),
                received: BTreeMap::new(),
            },
            eval_batches,
        })
    }

    /// Top-1 test accuracy of the current global predictor of every task.
    pub fn evaluate(&self) -> Result<BTreeMap<TaskId, f64>> {
        self.state
            .globals
            .iter()
            .map(|(&t, params)| {
                Ok((
                    t,
                    model::accuracy(&self.setup.template.stack, params, &self.eval_batches[t])?,
                ))
            })
            .collect()
    }

    fn eligible(&self, client: &ClientProfile) -> bool {
        match self.setup.framework {
            Framework::FedAvg => client.level == 1,
            _ => true,
        }
    }

    fn select(&self, round: usize) -> Vec<usize> {
        let mut eligible: Vec<usize> = (0..self.clients.len())
            .filter(|&i| self.eligible(&self.clients[i]))
            .collect();
        if self.setup.participation < 1.0 && !eligible.is_empty() {
            let k = ((self.setup.participation * eligible.len() as f64).ceil() as usize)
                .clamp(1, eligible.len());
            eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
                self.setup.local.seed,
                &[round as u64, 2],
            )));
            eligible.truncate(k);
            eligible.sort_unstable();
        }
        eligible
    }

    /// One communication round: local training on every selected client,
    /// then per-task merging according to the framework. Client failures
    /// are recorded and the client is left out of aggregation.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let round = self.state.round + 1;
        let framework = self.setup.framework;
        let selected = self.select(round);
        let mut failures = Vec::new();
        let mut updates = Vec::new();
        for &i in &selected {
            let setup = &self.setup;
            let profile = &mut self.clients[i];
            match local_train(
                profile,
                &setup.encoder,
                &setup.template,
                &self.state.globals,
                &setup.datasets,
                &setup.local,
                round,
            ) {
                Ok(u) => {
                    for (t, reason) in &u.skipped {
                        failures.push((u.client, Some(*t), reason.clone()));
                    }
                    updates.push(u);
                }
                Err(e) => failures.push((profile.id, None, e.to_string())),
            }
        }

        if !selected.is_empty() && updates.is_empty() {
            let reasons: Vec<String> = failures
                .iter()
                .map(|(c, _, r)| format!("client {c}: {r}"))
                .collect();
            return Err(Error::Aggregation(format!(
                "every selected client failed in round {round} ({})",
                reasons.join("; ")
            )));
        }
        let stack = &self.setup.template.stack;
        let input_shape = &self.setup.template.input_shape;
        let dense = accounting::count_params(stack, input_shape, None)? as u64;
        let encoder_flops = if self.setup.encoder.depth() > 0 {
            accounting::count_flops(
                self.setup.encoder.stack(),
                &self.setup.datasets[0].sample_shape,
                None,
            )?
        } else {
            0
        };

        let mut new_globals = GlobalPredictors::new();
        let mut records = Vec::new();
        let mut client_flops: BTreeMap<ClientId, u64> = BTreeMap::new();
        let mut received_log = BTreeMap::new();
        for (&task, previous) in &self.state.globals {
            let mut received = BTreeMap::new();
            let mut sizes = BTreeMap::new();
            let (mut uplink, mut flops) = (0u64, 0u64);
            for u in &updates {
                let Some(tree) = u.trees.get(&task) else {
                    continue;
                };
                let profile = self
                    .clients
                    .iter()
                    .find(|c| c.id == u.client)
                    .expect("update from known client");
                let mask = &profile.masks[&task];
                let (params, fwd) = pruning::effective_counts(&self.setup.template, mask)?;
                let samples = u.samples[&task] as u64;
                uplink += params as u64;
                flops += fwd * samples;
                *client_flops.entry(u.client).or_default() +=
                    fwd * samples + encoder_flops * profile.shard_size(task) as u64;
                sizes.insert(u.client, profile.shard_size(task));
                received.insert(u.client, (tree.clone(), mask.clone()));
                received_log.insert((u.client, task), tree.clone());
            }
            let merged = if received.is_empty() {
                previous.clone()
            } else {
                match framework {
                    Framework::FedLps => {
                        let backbone = match self.setup.recovery {
                            RecoveryMode::Static => &self.setup.template.params,
                            RecoveryMode::PreviousGlobal => previous,
                        };
                        let recovered = received
                            .iter()
                            .map(|(&c, (tree, mask))| Ok((c, recover(tree, mask, backbone)?)))
                            .collect::<Result<BTreeMap<_, _>>>()?;
                        aggregate_task(&recovered, &sizes)?
                    }
                    Framework::FedAvg => {
                        let trees = received.iter().map(|(&c, (t, _))| (c, t.clone())).collect();
                        aggregate_task(&trees, &sizes)?
                    }
                    Framework::FedDrop | Framework::Overlap => {
                        overlap_aggregate(&received, &sizes, previous)?
                    }
                }
            };
            new_globals.insert(task, merged);
            records.push(TaskRecord {
                task,
                accuracy: 0.0,
                uplink_params: uplink,
                downlink_params: dense * selected.len() as u64,
                flops,
            });
        }

        self.state = RoundState {
            round,
            globals: new_globals,
            selected: selected.iter().map(|&i| self.clients[i].id).collect(),
            received: received_log,
        };
        let acc = self.evaluate()?;
        for r in &mut records {
            r.accuracy = acc[&r.task];
        }
        Ok(RoundRecord {
            round,
            framework: framework.name().to_string(),
            participants: self.state.selected.clone(),
            tasks: records,
            client_flops,
            failures,
            wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKey;
    use crate::tensor::Tensor;

    fn tree(w: &[f64]) -> ParameterTree {
        [(
            ParamKey::weight(0),
            Tensor::from_slice(&[w.len()], w).unwrap(),
        )]
        .into_iter()
        .collect()
    }

    fn mask(m: &[f64], client: usize) -> ChannelMask {
        ChannelMask {
            owner: Owner { client, task: 0 },
            ratio: 0.0,
            channels: BTreeMap::new(),
            elements: tree(m),
        }
    }

    #[test]
    fn recover_substitutes_backbone() {
        let out = recover(
            &tree(&[1.5, 0.0, 2.0]),
            &mask(&[1.0, 0.0, 1.0], 0),
            &tree(&[1.0, 4.0, 2.0]),
        )
        .unwrap();
        assert_eq!(
            out.get(&ParamKey::weight(0)).unwrap().data(),
            &[1.5, 4.0, 2.0]
        );
    }

    #[test]
    fn recover_rejects_mismatch_with_owner() {
        let err = recover(
            &tree(&[1.0, 2.0]),
            &mask(&[1.0, 1.0, 1.0], 7),
            &tree(&[0.0; 3]),
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Protocol {
                client: 7,
                task: 0,
                ..
            }
        ));
    }

    #[test]
    fn aggregate_weights_by_size() {
        let trees: BTreeMap<_, _> = [(0, tree(&[1.0, 10.0])), (1, tree(&[2.0, 20.0]))]
            .into_iter()
            .collect();
        let sizes: BTreeMap<_, _> = [(0, 30), (1, 70)].into_iter().collect();
        let out = aggregate_task(&trees, &sizes).unwrap();
        let d = out.get(&ParamKey::weight(0)).unwrap().data().to_vec();
        assert!((d[0] - 1.7).abs() < 1e-12 && (d[1] - 17.0).abs() < 1e-12);
        let zero: BTreeMap<_, _> = [(0, 0), (1, 0)].into_iter().collect();
        assert!(matches!(
            aggregate_task(&trees, &zero),
            Err(Error::Aggregation(_))
        ));
    }

    #[test]
    fn overlap_singleton_and_untouched() {
        let received: BTreeMap<_, _> = [
            (0, (tree(&[1.0, 0.0, 0.0]), mask(&[1.0, 0.0, 0.0], 0))),
            (1, (tree(&[3.0, 5.0, 0.0]), mask(&[1.0, 1.0, 0.0], 1))),
        ]
        .into_iter()
        .collect();
        let sizes: BTreeMap<_, _> = [(0, 1), (1, 1)].into_iter().collect();
        let out = overlap_aggregate(&received, &sizes, &tree(&[9.0, 9.0, 9.0])).unwrap();
        assert_eq!(
            out.get(&ParamKey::weight(0)).unwrap().data(),
            &[2.0, 5.0, 9.0]
        );
    }

    #[test]
    fn framework_names_parse() {
        for f in Framework::ALL {
            assert_eq!(f.name().parse::<Framework>().unwrap(), f);
        }
        assert!(matches!(
            "fedprox".parse::<Framework>(),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn levels_and_ratios() {
        assert_eq!(assign_levels(8, 5), vec![1, 1, 2, 2, 3, 4, 4, 5]);
        assert_eq!(assign_levels(10, 5), vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
        assert_eq!(level_ratio(&LEVEL_RATIOS, 1).unwrap(), 0.0);
        assert_eq!(level_ratio(&LEVEL_RATIOS, 5).unwrap(), 0.8);
        assert!(level_ratio(&LEVEL_RATIOS, 0).is_err());
        assert!(level_ratio(&LEVEL_RATIOS, 6).is_err());
    }

    #[test]
    fn seeds_differ_by_part() {
        assert_ne!(mix_seed(1, &[0, 1]), mix_seed(1, &[1, 0]));
        assert_eq!(mix_seed(5, &[2]), mix_seed(5, &[2]));
    }

    #[test]
    fn shard_batches_cover_shard() {
        let b = shard_batches(&[5, 6, 7, 8, 9], 2, 3, 0, 0);
        assert_eq!(b.len(), 3);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![5, 6, 7, 8, 9]);
    }
}
