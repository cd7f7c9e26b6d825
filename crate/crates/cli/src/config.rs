//! Experiment configuration: a flat `key = value` file plus `--key value`
//! overrides. Later sources win: defaults, then the file, then the command line.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use vclab_core::continual::{BetaMode, TrainConfig};
use vclab_core::heuristics::{DifficultyConvention, HeuristicConfig, NormShape};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    /// Split MNIST in the custom pair order, one head per task.
    SplitCustom,
    /// Split MNIST in the standard 0/1, 2/3, ... order.
    SplitStandard,
    /// Permuted MNIST, single 10-class head.
    Permuted,
    /// Alternating MNIST and grayscale CIFAR-10 binary tasks.
    Mixed,
    /// Gaussian blob tasks; needs no dataset files.
    Synthetic,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::SplitCustom => "split_custom",
            Experiment::SplitStandard => "split_standard",
            Experiment::Permuted => "permuted",
            Experiment::Mixed => "mixed",
            Experiment::Synthetic => "synthetic",
        }
    }

    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            Experiment::Permuted => vec![100, 100],
            Experiment::Synthetic => vec![32, 32],
            _ => vec![256, 256],
        }
    }

    /// Settings this experiment uses unless the key is given explicitly.
    /// The synthetic smoke run trades Monte-Carlo precision for speed.
    fn defaults(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Experiment::Synthetic => &[("epochs", "3"), ("probe_eval_samples", "5")],
            _ => &[],
        }
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "split_custom" => Experiment::SplitCustom,
            "split_standard" => Experiment::SplitStandard,
            "permuted" => Experiment::Permuted,
            "mixed" => Experiment::Mixed,
            "synthetic" => Experiment::Synthetic,
            other => return Err(CliError::Config(format!("unknown experiment {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Model {
    /// β-ELBO with the same β for every task.
    Fixed(f64),
    /// β chosen per task from difficulty and similarity.
    Auto,
}

impl Model {
    /// Label used in result files, e.g. `autovcl` or `gvcl:0.01`.
    pub fn label(self) -> String {
        match self {
            Model::Fixed(b) => format!("gvcl:{b}"),
            Model::Auto => "autovcl".to_string(),
        }
    }

    pub fn beta_mode(self) -> BetaMode {
        match self {
            Model::Fixed(b) => BetaMode::Fixed(b),
            Model::Auto => BetaMode::Auto,
        }
    }
}

impl FromStr for Model {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        if s == "auto" || s == "autovcl" {
            return Ok(Model::Auto);
        }
        let beta = s
            .strip_prefix("gvcl:")
            .ok_or_else(|| CliError::Config(format!("model must be `auto` or `gvcl:<beta>`, got {s:?}")))?;
        let beta: f64 = parse_value("model", beta)?;
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(CliError::Config(format!("fixed beta must be positive, got {beta}")));
        }
        Ok(Model::Fixed(beta))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: Model,
    pub trials: usize,
    pub master_seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub heuristics: HeuristicConfig,
    /// Trunk widths; `None` means the experiment's default.
    pub hidden: Option<Vec<usize>>,
    pub permuted_tasks: usize,
    /// Training examples per synthetic task.
    pub synthetic_n: usize,
    /// Write the posterior after every stage as a snapshot file.
    pub snapshots: bool,
    explicit: BTreeSet<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Synthetic,
            model: Model::Auto,
            trials: 5,
            master_seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("results"),
            train: TrainConfig::default(),
            heuristics: HeuristicConfig::default(),
            hidden: None,
            permuted_tasks: 10,
            synthetic_n: 2000,
            snapshots: false,
            explicit: BTreeSet::new(),
        }
    }
}

/// Every accepted key, for help text and error messages.
pub const KEYS: &[&str] = &[
    "experiment",
    "model",
    "trials",
    "seed",
    "data_dir",
    "out_dir",
    "epochs",
    "batch_size",
    "lr",
    "train_mc_samples",
    "eval_mc_samples",
    "lambda",
    "probe_size",
    "probe_batch",
    "probe_epochs",
    "probe_repeats",
    "probe_lr",
    "probe_mc_samples",
    "probe_eval_samples",
    "difficulty_convention",
    "norm_shape",
    "hidden",
    "permuted_tasks",
    "synthetic_n",
    "snapshots",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value {value:?} for key {key}")))
}

impl ExperimentConfig {
    /// Applies one `key = value` setting. Dashes in keys are accepted as
    /// underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let h = &mut self.heuristics;
        let t = &mut self.train;
        match key.as_str() {
            "experiment" => self.experiment = v.parse()?,
            "model" => self.model = v.parse()?,
            "trials" => self.trials = parse_value(&key, v)?,
            "seed" | "master_seed" => self.master_seed = parse_value(&key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "epochs" => t.epochs = parse_value(&key, v)?,
            "batch_size" => t.batch_size = parse_value(&key, v)?,
            "lr" => t.lr = parse_value(&key, v)?,
            "train_mc_samples" => t.train_mc_samples = parse_value(&key, v)?,
            "eval_mc_samples" => t.eval_mc_samples = parse_value(&key, v)?,
            "lambda" => h.lambda = parse_value(&key, v)?,
            "probe_size" => h.probe_size = parse_value(&key, v)?,
            "probe_batch" => h.probe_batch = parse_value(&key, v)?,
            "probe_epochs" => h.probe_epochs = parse_value(&key, v)?,
            "probe_repeats" => h.probe_repeats = parse_value(&key, v)?,
            "probe_lr" => h.probe_lr = parse_value(&key, v)?,
            "probe_mc_samples" => h.probe_mc_samples = parse_value(&key, v)?,
            "probe_eval_samples" => h.probe_eval_samples = parse_value(&key, v)?,
            "difficulty_convention" => {
                h.difficulty_convention = match v {
                    "inverse_improvement" => DifficultyConvention::InverseImprovement,
                    "improvement" => DifficultyConvention::Improvement,
                    _ => return Err(CliError::Config(format!("unknown difficulty_convention {v:?}"))),
                }
            }
            "norm_shape" => {
                h.norm_shape = match v {
                    "linear_clamp" => NormShape::LinearClamp,
                    "smoothstep" => NormShape::Smoothstep,
                    _ => return Err(CliError::Config(format!("unknown norm_shape {v:?}"))),
                }
            }
            "hidden" => {
                let dims = v
                    .split(',')
                    .map(|d| parse_value::<usize>(&key, d))
                    .collect::<Result<Vec<_>, _>>()?;
                self.hidden = Some(dims);
            }
            "permuted_tasks" => self.permuted_tasks = parse_value(&key, v)?,
            "synthetic_n" => self.synthetic_n = parse_value(&key, v)?,
            "snapshots" => self.snapshots = parse_value(&key, v)?,
            _ => {
                return Err(CliError::Config(format!(
                    "unknown key {key:?}; accepted keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        self.explicit.insert(key);
        Ok(())
    }

    /// Applies a flat config file. Blank lines and lines starting with `#`
    /// are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Builds a config from command-line words: `--config <file>` is applied
    /// first, then every other `--key value` / `--key=value` pair on top.
    pub fn from_args(args: &[String]) -> Result<Self, CliError> {
        let mut pairs = Vec::new();
        let mut config_file = None;
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| CliError::Config(format!("expected --key, got {arg:?}")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it
                        .next()
                        .ok_or_else(|| CliError::Config(format!("missing value for --{key}")))?;
                    (key.to_string(), v.clone())
                }
            };
            if key == "config" {
                config_file = Some(PathBuf::from(value));
            } else {
                pairs.push((key, value));
            }
        }
        let mut cfg = Self::default();
        if let Some(path) = config_file {
            cfg.apply_file(&path)?;
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        cfg.finish()
    }

    /// Fills experiment-dependent defaults and validates.
    pub fn finish(mut self) -> Result<Self, CliError> {
        for &(key, value) in self.experiment.defaults() {
            if !self.explicit.contains(key) {
                self.set(key, value)?;
            }
        }
        self.train.beta_mode = self.model.beta_mode();
        if self.trials == 0 {
            return Err(CliError::Config("trials must be at least 1".into()));
        }
        if self.permuted_tasks == 0 {
            return Err(CliError::Config("permuted_tasks must be at least 1".into()));
        }
        if self.hidden.as_ref().is_some_and(|h| h.is_empty() || h.contains(&0)) {
            return Err(CliError::Config("hidden widths must be positive".into()));
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.model == Model::Auto {
            self.heuristics.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.experiment == Experiment::Synthetic && self.synthetic_n < 4 {
            return Err(CliError::Config("synthetic_n must be at least 4".into()));
        }
        Ok(self)
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| self.experiment.default_hidden())
    }

    /// Seed of trial `trial` (0-based).
    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.master_seed.wrapping_add(trial as u64)
    }

    /// `<out_dir>/<experiment>_<model>.csv`, with `:` in the model label
    /// replaced so the name is portable.
    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join(format!("{}_{}.csv", self.experiment.name(), self.file_stem_model()))
    }

    pub(crate) fn file_stem_model(&self) -> String {
        self.model.label().replace(':', "-")
    }
}
