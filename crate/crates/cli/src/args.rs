//! Command-line flags and their resolution into a `RunConfig`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use heunflow::autodiff::{Activation, LossKind};
use heunflow::blocks::{BlockSpec, Family};
use heunflow::ode::Method;
use heunflow::training::{ModelSpec, OptimizerConfig, SequenceOptions, TrainConfig};

use crate::config::{ClassifyConfig, OdeBenchConfig, RunConfig, SineConfig, SweepConfig};

pub const DATA_DIR_ENV: &str = "HEUNFLOW_DATA_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "heunflow",
    version,
    about = "Euler, Heun and weighted-Heun residual networks: ODE benchmark and training experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit convergence orders of Euler, Heun and weighted Heun on x' = 2 sqrt(x).
    OdeBench(OdeBenchArgs),
    /// Classify MNIST digits.
    Mnist(ClassifyArgs),
    /// Classify MIT-BIH heartbeats (preprocessed 187-sample CSVs).
    Ecg(ClassifyArgs),
    /// Next-step sine prediction and free-running generation with an LSTM.
    Sine(SineArgs),
    /// Train one weighted-Heun model per alpha and summarize best accuracies.
    AlphaSweep(SweepArgs),
    /// Re-run an experiment from a config.json written by an earlier run.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Plain,
    Resnet,
    Heun,
    Extheun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Block,
    Lstm,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Ce,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Sine,
    Mnist,
    Ecg,
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("alpha must lie in [0, 1], got {v}"))
    }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got {v}"))
    }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie strictly between 0 and 1, got {v}"))
    }
}

#[derive(Debug, Clone, Args)]
pub struct SharedArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    /// Corrector weight in [0, 1]; requires `--family extheun`.
    #[arg(long, value_parser = parse_alpha)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_parser = parse_positive)]
    pub lr: Option<f64>,
    /// Total samples drawn (train + test) by seeded stratified sampling.
    #[arg(long)]
    pub subset_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Fill the wall_time_s column (runs stop being byte-identical).
    #[arg(long)]
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OdeBenchArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4.0, value_parser = parse_positive)]
    pub t_end: f64,
    /// Step sizes, comma separated.
    #[arg(long = "h", value_delimiter = ',', default_values_t = vec![0.1, 0.05, 0.025, 0.0125], value_parser = parse_positive)]
    pub step_sizes: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyOpts {
    #[arg(long, value_enum, default_value_t = ModelArg::Block)]
    pub model: ModelArg,
    /// Number of blocks in the stack.
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Separate weights per block instead of one shared transition map.
    #[arg(long)]
    pub per_layer_weights: bool,
    /// Sequence steps each sample is cut into for `--model lstm|gru`
    /// (defaults: 28 rows for MNIST, 11 chunks of 17 for ECG).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = LossArg::Ce)]
    pub loss: LossArg,
    #[arg(long, default_value_t = 0.2, value_parser = parse_fraction)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Dataset root; defaults to $HEUNFLOW_DATA_DIR, then ./data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub opts: ClassifyOpts,
}

#[derive(Debug, Clone, Args)]
pub struct SineOpts {
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    /// Length of the time axis; defaults to 16 pi.
    #[arg(long, value_parser = parse_positive)]
    pub total_length: Option<f64>,
    #[arg(long, default_value_t = 32)]
    pub window: usize,
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    #[arg(long, default_value_t = 0.75, value_parser = parse_fraction)]
    pub train_fraction: f64,
    /// Free-running steps; defaults to one period.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Held-out one-step predictions within this distance count as accurate.
    #[arg(long, default_value_t = 0.05, value_parser = parse_positive)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SineArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(flatten)]
    pub opts: SineOpts,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long, value_enum, default_value_t = TaskArg::Sine)]
    pub task: TaskArg,
    /// Alphas to train, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_alpha,
          default_values_t = vec![0.0, 0.25, 0.5, 0.75, 0.8, 0.9, 1.0])]
    pub alphas: Vec<f64>,
    /// Train the alphas concurrently, one thread each.
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub classify: ClassifyOpts,
    #[command(flatten)]
    pub sine: SineOpts,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Flag combinations clap cannot express; reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

fn family(shared: &SharedArgs, default: FamilyArg) -> Result<Family, UsageError> {
    match (shared.family.unwrap_or(default), shared.alpha) {
        (FamilyArg::Extheun, Some(alpha)) => Ok(Family::ExtendedHeun { alpha }),
        (FamilyArg::Extheun, None) => Err(UsageError("--family extheun requires --alpha".into())),
        (_, Some(_)) => Err(UsageError("--alpha is only valid with --family extheun".into())),
        (FamilyArg::Plain, None) => Ok(Family::Plain),
        (FamilyArg::Resnet, None) => Ok(Family::Resnet),
        (FamilyArg::Heun, None) => Ok(Family::Heun),
    }
}

fn optimizer(shared: &SharedArgs, default_lr: f64) -> OptimizerConfig {
    let lr = shared.lr.unwrap_or(default_lr);
    match shared.optimizer {
        OptimizerArg::Adam => OptimizerConfig::adam(lr),
        OptimizerArg::Sgd => OptimizerConfig::Sgd {
            lr,
            momentum: shared.momentum,
        },
    }
}

pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[derive(Debug, Clone, Copy)]
struct TaskDefaults {
    subset: usize,
    epochs: usize,
    batch: usize,
    hidden: usize,
    lr: f64,
    steps: usize,
}

const MNIST: TaskDefaults = TaskDefaults {
    subset: 10_000,
    epochs: 10,
    batch: 64,
    hidden: 128,
    lr: 1e-3,
    steps: 28,
};

const ECG: TaskDefaults = TaskDefaults {
    subset: 20_000,
    epochs: 100,
    batch: 64,
    hidden: 128,
    lr: 1e-3,
    steps: 11,
};

pub const SINE_EPOCHS: usize = 100;
pub const SINE_HIDDEN: usize = 32;
pub const SINE_BATCH: usize = 16;
pub const SINE_LR: f64 = 1e-3;

fn classify_config(shared: &SharedArgs, opts: &ClassifyOpts, fam: Family, d: TaskDefaults) -> Result<ClassifyConfig, UsageError> {
    let hidden = shared.hidden.unwrap_or(d.hidden);
    let model = match opts.model {
        ModelArg::Block => ModelSpec::Blocks {
            block: BlockSpec {
                family: fam,
                depth: opts.depth,
                share_weights: !opts.per_layer_weights,
            },
            hidden,
            activation: Activation::Tanh,
            init_scale: 1.0,
        },
        ModelArg::Lstm => ModelSpec::Lstm {
            family: fam,
            hidden,
            steps: opts.steps.unwrap_or(d.steps),
        },
        ModelArg::Gru => {
            if shared.family.is_some() || shared.alpha.is_some() {
                return Err(UsageError("--family/--alpha do not apply to --model gru".into()));
            }
            ModelSpec::Gru {
                hidden,
                steps: opts.steps.unwrap_or(d.steps),
            }
        }
    };
    let subset = shared.subset_size.unwrap_or(d.subset);
    let test_size = ((subset as f64) * opts.test_fraction).round() as usize;
    Ok(ClassifyConfig {
        train: TrainConfig {
            model,
            optimizer: optimizer(shared, d.lr),
            epochs: shared.epochs.unwrap_or(d.epochs),
            batch_size: shared.batch_size.unwrap_or(d.batch),
            seed: shared.seed,
            loss: match opts.loss {
                LossArg::Ce => LossKind::SoftmaxCrossEntropy,
                LossArg::Mse => LossKind::Mse,
            },
            record_wall_time: shared.record_wall_time,
        },
        data_dir: absolute(&opts.data_dir.clone().unwrap_or_else(default_data_dir)),
        train_size: subset - test_size,
        test_size,
        split_seed: opts.split_seed,
    })
}

fn sine_config(shared: &SharedArgs, opts: &SineOpts, fam: Family) -> SineConfig {
    SineConfig {
        train: TrainConfig {
            model: ModelSpec::Lstm {
                family: fam,
                hidden: shared.hidden.unwrap_or(SINE_HIDDEN),
                steps: 1,
            },
            optimizer: optimizer(shared, SINE_LR),
            epochs: shared.epochs.unwrap_or(SINE_EPOCHS),
            batch_size: shared.batch_size.unwrap_or(SINE_BATCH),
            seed: shared.seed,
            loss: LossKind::Mse,
            record_wall_time: shared.record_wall_time,
        },
        sequence: SequenceOptions {
            window: opts.window,
            stride: opts.stride,
            train_fraction: opts.train_fraction,
            horizon: opts.horizon,
            tolerance: opts.tolerance,
        },
        total_length: opts.total_length.unwrap_or(16.0 * PI),
        points: opts.points,
    }
}

/// Resolves flags into a run config and its output directory. Replay is
/// handled by the caller since it reads a file.
pub fn resolve(command: &Command) -> Result<(RunConfig, PathBuf), UsageError> {
    match command {
        Command::OdeBench(a) => Ok((
            RunConfig::OdeBench(OdeBenchConfig {
                t_end: a.t_end,
                step_sizes: a.step_sizes.clone(),
                methods: vec![Method::Euler, Method::Heun, Method::WeightedHeun { alpha: 0.5 }],
            }),
            a.out_dir.clone(),
        )),
        Command::Mnist(a) => {
            let fam = family(&a.shared, FamilyArg::Heun)?;
            Ok((RunConfig::Mnist(classify_config(&a.shared, &a.opts, fam, MNIST)?), a.shared.out_dir.clone()))
        }
        Command::Ecg(a) => {
            let fam = family(&a.shared, FamilyArg::Heun)?;
            Ok((RunConfig::Ecg(classify_config(&a.shared, &a.opts, fam, ECG)?), a.shared.out_dir.clone()))
        }
        Command::Sine(a) => {
            let fam = family(&a.shared, FamilyArg::Heun)?;
            Ok((RunConfig::Sine(sine_config(&a.shared, &a.opts, fam)), a.shared.out_dir.clone()))
        }
        Command::AlphaSweep(a) => {
            if a.shared.family.is_some() {
                return Err(UsageError("alpha-sweep always uses --family extheun; pass --alphas instead".into()));
            }
            if a.classify.model == ModelArg::Gru {
                return Err(UsageError("alpha-sweep needs --model block or lstm".into()));
            }
            let alphas = a.shared.alpha.map_or_else(|| a.alphas.clone(), |v| vec![v]);
            let template = Family::ExtendedHeun { alpha: alphas[0] };
            let task = match a.task {
                TaskArg::Sine => RunConfig::Sine(sine_config(&a.shared, &a.sine, template)),
                TaskArg::Mnist => RunConfig::Mnist(classify_config(&a.shared, &a.classify, template, MNIST)?),
                TaskArg::Ecg => RunConfig::Ecg(classify_config(&a.shared, &a.classify, template, ECG)?),
            };
            Ok((
                RunConfig::AlphaSweep(SweepConfig {
                    alphas,
                    task: Box::new(task),
                    parallel: a.parallel,
                }),
                a.shared.out_dir.clone(),
            ))
        }
        Command::Replay(a) => Err(UsageError(format!(
            "replay of {} must be resolved by reading the file",
            a.config.display()
        ))),
    }
}
