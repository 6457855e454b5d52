use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lfra::commands::{cmd_ablate, cmd_complexity, cmd_eval, cmd_gradcheck, cmd_predict, cmd_train};
use lfra::{Result, RunConfig};
use toml::{Table, Value};

/// Lightweight retinal vessel segmentation.
#[derive(Parser)]
#[command(name = "lfra", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess, augment, split and train; writes the best checkpoint.
    Train(Flags),
    /// Metrics of a checkpoint on a labeled dataset.
    Eval(Flags),
    /// Probability maps, masks and overlays for every input image.
    Predict(Flags),
    /// Parameter count, FLOPs and serialized size.
    Complexity {
        #[command(flatten)]
        flags: Flags,
        /// Also list every layer.
        #[arg(long)]
        per_layer: bool,
    },
    /// Lists the ablation presets, optionally training each one.
    Ablate {
        #[command(flatten)]
        flags: Flags,
        #[arg(long)]
        train: bool,
    },
    /// Finite-difference check of every gradient; exits nonzero on failure.
    Gradcheck(Flags),
}

/// Shared options. Values given in `--config` override these flags.
#[derive(Args)]
struct Flags {
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    /// drive, stare, chase or custom.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Count only pixels inside the field-of-view mask.
    #[arg(long)]
    fov_only: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Square input size after preprocessing.
    #[arg(long)]
    size: Option<usize>,
    /// Stop after this many epochs without improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Training-set size after augmentation.
    #[arg(long)]
    augment: Option<usize>,
}

fn path_value(p: PathBuf) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

impl Flags {
    fn resolve(self) -> Result<RunConfig> {
        let mut t = Table::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.to_string(), v);
            }
        };
        put("dataset_root", self.dataset_root.map(path_value));
        put("dataset", self.dataset.map(Value::String));
        put("preset", self.preset.map(Value::String));
        put("out", self.out.map(path_value));
        put("seed", self.seed.map(|v| Value::Integer(v as i64)));
        put("epochs", self.epochs.map(|v| Value::Integer(v as i64)));
        put("batch_size", self.batch_size.map(|v| Value::Integer(v as i64)));
        put("lr", self.lr.map(Value::Float));
        put("threshold", self.threshold.map(Value::Float));
        put("fov_only", self.fov_only.then_some(Value::Boolean(true)));
        put("checkpoint", self.checkpoint.map(path_value));
        put("size", self.size.map(|v| Value::Integer(v as i64)));
        put("patience", self.patience.map(|v| Value::Integer(v as i64)));
        put("augment", self.augment.map(|v| Value::Integer(v as i64)));
        RunConfig::resolve(t, self.config.as_deref())
    }
}

fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Train(f) => cmd_train(&f.resolve()?),
        Command::Eval(f) => cmd_eval(&f.resolve()?),
        Command::Predict(f) => cmd_predict(&f.resolve()?),
        Command::Complexity { flags, per_layer } => cmd_complexity(&flags.resolve()?, per_layer),
        Command::Ablate { flags, train } => cmd_ablate(&flags.resolve()?, train),
        Command::Gradcheck(f) => cmd_gradcheck(&f.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
