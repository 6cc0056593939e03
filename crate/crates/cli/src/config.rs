//! Fully resolved run descriptions. A `config.json` holds one of these and
//! reproduces the run it came from.

use std::path::PathBuf;

use heunflow::blocks::Family;
use heunflow::ode::Method;
use heunflow::training::{ModelSpec, SequenceOptions, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    OdeBench(OdeBenchConfig),
    Mnist(ClassifyConfig),
    Ecg(ClassifyConfig),
    Sine(SineConfig),
    AlphaSweep(SweepConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeBenchConfig {
    pub t_end: f64,
    pub step_sizes: Vec<f64>,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub train: TrainConfig,
    pub data_dir: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    /// Seed of the stratified subset draw, kept apart from the training seed
    /// so that runs with different seeds see the same split.
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineConfig {
    pub train: TrainConfig,
    pub sequence: SequenceOptions,
    pub total_length: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    /// Template run; its family is replaced by `ExtendedHeun { alpha }`.
    pub task: Box<RunConfig>,
    pub parallel: bool,
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::OdeBench(_) => "ode-bench",
            RunConfig::Mnist(_) => "mnist",
            RunConfig::Ecg(_) => "ecg",
            RunConfig::Sine(_) => "sine",
            RunConfig::AlphaSweep(_) => "alpha-sweep",
        }
    }

    pub fn train_config_mut(&mut self) -> Option<&mut TrainConfig> {
        match self {
            RunConfig::Mnist(c) | RunConfig::Ecg(c) => Some(&mut c.train),
            RunConfig::Sine(c) => Some(&mut c.train),
            _ => None,
        }
    }

    /// Copy of a training run with its block family replaced.
    pub fn with_family(&self, family: Family) -> Option<RunConfig> {
        let mut out = self.clone();
        let train = out.train_config_mut()?;
        train.model = match train.model {
            ModelSpec::Blocks {
                mut block,
                hidden,
                activation,
                init_scale,
            } => {
                block.family = family;
                ModelSpec::Blocks {
                    block,
                    hidden,
                    activation,
                    init_scale,
                }
            }
            ModelSpec::Lstm { hidden, steps, .. } => ModelSpec::Lstm { family, hidden, steps },
            ModelSpec::Gru { .. } => return None,
        };
        Some(out)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
