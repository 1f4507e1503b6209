//! Command-line front end: `run`, `sweep` and `inspect`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedlps::container;
use fedlps::federation::RecoveryMode;
use fedlps::harness::{self, desk_tasks, ExperimentConfig, SweepSpec};
use fedlps::Error;

#[derive(Parser)]
#[command(
    name = "fedlps",
    version,
    about = "Federated learning simulator with shared encoders and pruned predictors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run(Box<RunArgs>),
    /// Run every cell of a sweep spec and write a merged CSV.
    Sweep {
        /// TOML sweep spec with a `[base]` config table.
        spec: PathBuf,
        /// Overrides the spec's base output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the contents of a checkpoint or backbone file.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults used when no config file is given.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// fedlps, fedavg, feddrop or overlap.
    #[arg(long)]
    framework: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    /// Number of synthetic tasks; replaces the configured roster.
    #[arg(long)]
    tasks: Option<usize>,
    /// Samples per class of generated synthetic tasks.
    #[arg(long, default_value_t = 60)]
    per_class: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Dirichlet concentration of a non-IID split.
    #[arg(long, conflicts_with = "iid")]
    alpha: Option<f64>,
    /// Split every task uniformly at random across clients.
    #[arg(long)]
    iid: bool,
    /// Share of backbone layers frozen in the shared encoder.
    #[arg(long)]
    encoder_fraction: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Local epochs per round.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// What fills pruned positions before aggregation.
    #[arg(long, value_parser = ["static", "previous_global"])]
    recovery: Option<String>,
    /// Parent directory of the run directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => match self.preset {
                Preset::Desk => ExperimentConfig::desk(),
                Preset::Full => ExperimentConfig::full_scale(),
            },
        };
        if let Some(v) = &self.framework {
            c.framework = v.clone();
        }
        if let Some(v) = self.rounds {
            c.rounds = v;
        }
        if let Some(v) = self.clients {
            c.clients = v;
        }
        if let Some(n) = self.tasks {
            c.data.tasks = desk_tasks(n, self.per_class);
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = Some(v);
        }
        if self.iid {
            c.alpha = None;
        }
        if let Some(v) = self.encoder_fraction {
            c.encoder_fraction = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.epochs {
            c.local_epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = &self.recovery {
            c.recovery = match v.as_str() {
                "previous_global" => RecoveryMode::PreviousGlobal,
                _ => RecoveryMode::Static,
            };
        }
        if let Some(v) = &self.output {
            c.output_dir = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Partition(_) | Error::Input(_) => 3,
        _ => 4,
    }
}

fn run(args: RunArgs) -> Result<(), Error> {
    let config = args.config()?;
    let outcome = harness::run(&config)?;
    if let Some(last) = outcome.ledger.last() {
        for t in &last.tasks {
            println!("task {} accuracy {:.4}", t.task, t.accuracy);
        }
        println!(
            "mean accuracy {:.4} after {} rounds",
            last.mean_accuracy(),
            last.round
        );
    }
    println!("artifacts in {}", outcome.dir.display());
    Ok(())
}

fn sweep(spec: PathBuf, output: Option<PathBuf>) -> Result<(), Error> {
    let text = std::fs::read_to_string(&spec)
        .map_err(|e| Error::Usage(format!("cannot read sweep spec {}: {e}", spec.display())))?;
    let mut spec = SweepSpec::from_toml(&text)?;
    if let Some(dir) = output {
        spec.base.output_dir = dir;
    }
    let outcome = harness::sweep(&spec)?;
    for (config, result) in &outcome.runs {
        if let Err(e) = result {
            eprintln!("run {} failed: {e}", config.run_name());
        }
    }
    println!(
        "{} runs, merged table in {}",
        outcome.runs.len(),
        outcome.merged_csv.display()
    );
    Ok(())
}

fn inspect(path: PathBuf) -> Result<(), Error> {
    let bytes = std::fs::read(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(backbone) = container::decode_backbone(&bytes) {
        println!(
            "backbone {:?}, input {:?}",
            backbone.provenance, backbone.input_shape
        );
        for (i, layer) in backbone.stack.indexed() {
            println!("  layer {i}: {layer:?}");
        }
        println!("  parameters {}", backbone.weights.num_values());
        return Ok(());
    }
    let cp = container::decode_checkpoint(&bytes)?;
    println!("checkpoint round {} framework {}", cp.round, cp.framework);
    println!(
        "predictor layers {}..{} on input {:?}",
        cp.predictor.first,
        cp.predictor.end(),
        cp.input_shape
    );
    for (task, tree) in &cp.globals {
        let digest: String = tree.digest()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        println!(
            "  task {task}: {} parameters, digest {digest}",
            tree.num_values()
        );
    }
    for m in &cp.masks {
        let kept: Vec<String> = m
            .channels
            .iter()
            .map(|(l, bits)| format!("{l}:{}/{}", bits.iter().filter(|&&b| b).count(), bits.len()))
            .collect();
        println!(
            "  mask client {} task {} ratio {}: kept {}",
            m.owner.client,
            m.owner.task,
            m.ratio,
            kept.join(" ")
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(*args),
        Command::Sweep { spec, output } => sweep(spec, output),
        Command::Inspect { checkpoint } => inspect(checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
