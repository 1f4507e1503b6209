//! Helpers shared by the integration tests.
#![allow(dead_code)]

use fedlps::nn::{
    backward_with_input, forward, infer, LayerSpec, LayerStack, ParamKey, ParameterTree,
};
use fedlps::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Worst relative error seen by a finite-difference sweep.
#[derive(Debug, Default)]
pub struct GradReport {
    pub probes: usize,
    pub worst: f64,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares analytic gradients of `L = sum(r * f(x))` against central
/// differences for up to `per_tensor` entries of every parameter and of the
/// input.
pub fn check_gradients(
    layers: Vec<LayerSpec>,
    input: &[usize],
    batch: usize,
    per_tensor: usize,
    seed: u64,
) -> GradReport {
    let mut r = rng(seed);
    let stack = LayerStack::new(0, layers);
    let params = stack.init_params(&mut r);
    let mut shape = vec![batch];
    shape.extend_from_slice(input);
    let x = random_tensor(&shape, &mut r);
    let (y, tape) = forward(&stack, &params, &x).unwrap();
    let weights = random_tensor(y.shape(), &mut r);
    let (grads, dx) = backward_with_input(tape, &weights).unwrap();

    let loss = |p: &ParameterTree, x: &Tensor| -> f64 {
        let y = infer(&stack, p, x).unwrap();
        y.data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };
    let h = 1e-5;
    let mut report = GradReport::default();
    let mut record = |analytic: f64, numeric: f64| {
        report.probes += 1;
        report.worst = report.worst.max(rel_err(analytic, numeric));
    };
    let keys: Vec<ParamKey> = params.keys().copied().collect();
    for key in keys {
        let len = params.get(&key).unwrap().len();
        for _ in 0..per_tensor.min(len) {
            let i = r.random_range(0..len);
            let mut plus = params.clone();
            plus.get_mut(&key).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(&key).unwrap().data_mut()[i] -= h;
            let numeric = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
            record(grads.get(&key).unwrap().data()[i], numeric);
        }
    }
    for _ in 0..per_tensor.min(x.len()) {
        let i = r.random_range(0..x.len());
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * h);
        record(dx.data()[i], numeric);
    }
    report
}

use fedlps::data::Dataset;
use fedlps::harness::{self, desk_tasks, ExperimentConfig};
use fedlps::model::BackboneModel;

/// A small but complete desk configuration: 4 clients, 2 tasks.
pub fn tiny_config(framework: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.framework = framework.into();
    c.rounds = 1;
    c.clients = 4;
    c.local_epochs = 1;
    c.batch_size = 16;
    c.pretrain.epochs = 1;
    c.data.tasks = desk_tasks(2, 12);
    c
}

pub fn fixture(config: &ExperimentConfig) -> (Vec<Dataset>, BackboneModel) {
    let datasets = harness::load_datasets(&config.data, config.seed).unwrap();
    let backbone = harness::pretrain(config, &datasets).unwrap();
    (datasets, backbone)
}
