//! Multi-trial experiment orchestration.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vclab_core::continual::{run_sequence_with, StageRecord};
use vclab_core::data::{
    load_cifar10_gray28, load_mnist, make_mixed_sequence, make_permuted_tasks, make_split_tasks,
    make_synthetic_blobs, DataSplits, TaskSpec, CUSTOM_SPLIT_PAIRS, INPUT_DIM, STANDARD_SPLIT_PAIRS,
};
use vclab_core::numerics::{derive_seed, Rng};
use vclab_core::vbnn::Architecture;

use crate::config::{Experiment, ExperimentConfig};
use crate::results::{write_results_csv, ResultRow};
use crate::CliError;

/// Separation and rotation of each synthetic task. The sequence mixes easy,
/// hard and near-repeat tasks so the automatic β has something to react to.
pub const SYNTHETIC_TASKS: [(f64, f64); 5] = [(10.0, 0.0), (10.0, 0.3), (1.5, 1.2), (6.0, 2.0), (10.0, 0.0)];

enum Loaded {
    None,
    Mnist(DataSplits),
    MnistCifar(DataSplits, DataSplits),
}

fn subdir_or_self(dir: &Path, name: &str) -> PathBuf {
    let sub = dir.join(name);
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn load(cfg: &ExperimentConfig) -> Result<Loaded, CliError> {
    let data_err = |e: vclab_core::Error| CliError::Data(format!("{e} (looked under {})", cfg.data_dir.display()));
    Ok(match cfg.experiment {
        Experiment::Synthetic => Loaded::None,
        Experiment::Mixed => Loaded::MnistCifar(
            load_mnist(&subdir_or_self(&cfg.data_dir, "mnist")).map_err(data_err)?,
            load_cifar10_gray28(&subdir_or_self(&cfg.data_dir, "cifar10")).map_err(data_err)?,
        ),
        _ => Loaded::Mnist(load_mnist(&subdir_or_self(&cfg.data_dir, "mnist")).map_err(data_err)?),
    })
}

/// Tasks for one trial. Permuted-MNIST permutations and synthetic data are
/// drawn from the trial seed; split and mixed tasks are fixed.
fn trial_tasks(cfg: &ExperimentConfig, data: &Loaded, seed: u64) -> Result<Vec<TaskSpec>, CliError> {
    let tasks = match (cfg.experiment, data) {
        (Experiment::SplitCustom, Loaded::Mnist(m)) => make_split_tasks(m, &CUSTOM_SPLIT_PAIRS, "mnist-", 0)?,
        (Experiment::SplitStandard, Loaded::Mnist(m)) => make_split_tasks(m, &STANDARD_SPLIT_PAIRS, "mnist-", 0)?,
        (Experiment::Permuted, Loaded::Mnist(m)) => {
            let mut rng = Rng::seed_from(derive_seed(seed, &[], "permutations"));
            make_permuted_tasks(m, cfg.permuted_tasks, &mut rng)?
        }
        (Experiment::Mixed, Loaded::MnistCifar(m, c)) => make_mixed_sequence(m, c)?,
        (Experiment::Synthetic, Loaded::None) => {
            let mut rng = Rng::seed_from(derive_seed(seed, &[], "synthetic"));
            SYNTHETIC_TASKS
                .iter()
                .enumerate()
                .map(|(i, &(sep, rot))| Ok(make_synthetic_blobs(sep, rot, cfg.synthetic_n, &mut rng)?.with_head(i)))
                .collect::<Result<Vec<_>, CliError>>()?
        }
        _ => unreachable!("loader and experiment disagree"),
    };
    Ok(tasks)
}

fn output_dim(tasks: &[TaskSpec]) -> Result<usize, CliError> {
    let k = tasks[0].num_classes();
    if tasks.iter().any(|t| t.num_classes() != k) {
        return Err(CliError::Data("all tasks of a sequence must have the same number of classes".into()));
    }
    Ok(k)
}

fn stage_rows(cfg: &ExperimentConfig, trial: usize, seed: u64, tasks: &[TaskSpec], rec: &StageRecord) -> Vec<ResultRow> {
    let h = rec.heuristics.as_ref();
    rec.accuracies
        .iter()
        .enumerate()
        .map(|(i, &accuracy)| ResultRow {
            experiment: cfg.experiment.name().to_string(),
            model: cfg.model.label(),
            trial,
            seed,
            stage: rec.stage,
            task_index: i + 1,
            task_name: tasks[i].name.clone(),
            accuracy,
            beta: rec.beta,
            d: h.map(|h| h.d),
            s: h.map(|h| h.s),
            delta_d: h.map(|h| h.delta_d),
        })
        .collect()
}

/// Runs one trial and returns its rows in (stage, task) order.
fn run_trial_with(cfg: &ExperimentConfig, data: &Loaded, trial: usize) -> Result<Vec<ResultRow>, CliError> {
    let seed = cfg.trial_seed(trial);
    let tasks = trial_tasks(cfg, data, seed)?;
    let arch = Architecture::new(INPUT_DIM, &cfg.hidden_dims(), output_dim(&tasks)?);
    let snap_dir = cfg.out_dir.join("snapshots");
    let mut rows = Vec::new();
    run_sequence_with(&tasks, &arch, &cfg.train, &cfg.heuristics, seed, |rec, prior| {
        rows.extend(stage_rows(cfg, trial, seed, &tasks, rec));
        if cfg.snapshots {
            let name = format!(
                "{}_{}_trial{}_stage{}.vclsnap",
                cfg.experiment.name(),
                cfg.file_stem_model(),
                trial,
                rec.stage
            );
            prior.write_to(&snap_dir.join(name))?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// Runs every trial (concurrently where threads are available), writes the
/// rows in trial order to [`ExperimentConfig::results_path`] and returns
/// that path.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let data = load(cfg)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    if cfg.snapshots {
        let dir = cfg.out_dir.join("snapshots");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| run_trial_with(cfg, &data, trial))
        .collect::<Result<Vec<_>, CliError>>()?;
    let rows: Vec<ResultRow> = per_trial.into_iter().flatten().collect();
    let path = cfg.results_path();
    let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_results_csv(std::io::BufWriter::new(file), &rows)?;
    Ok(path)
}
