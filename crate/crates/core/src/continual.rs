//! Sequential training over a task sequence with the posterior of each task
//! serving as the prior of the next.

use crate::data::{Split, TaskSpec};
use crate::error::{Error, Result};
use crate::heuristics::{
    average_difficulty_gap, compute_beta, measure_similarity, probe_difficulty, HeuristicConfig,
    HeuristicTrace, TaskHeuristics,
};
use crate::numerics::{argmax, derive_seed, Rng};
use crate::vbnn::{Architecture, ElboBreakdown, NetOptimizer, PosteriorSnapshot, VariationalNet};

/// Rows per chunk when evaluating, to bound activation memory.
const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_mc_samples: usize,
    pub eval_mc_samples: usize,
    pub beta_mode: BetaMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            lr: 0.001,
            train_mc_samples: 5,
            eval_mc_samples: 20,
            beta_mode: BetaMode::Auto,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::arg(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.train_mc_samples == 0 || self.eval_mc_samples == 0 {
            return Err(Error::arg("Monte-Carlo sample counts must be at least 1"));
        }
        if let BetaMode::Fixed(b) = self.beta_mode {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::arg(format!("fixed beta must be positive, got {b}")));
            }
        }
        Ok(())
    }

    fn fit_settings(&self) -> FitSettings {
        FitSettings {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            mc_samples: self.train_mc_samples,
        }
    }
}

/// Optimisation knobs shared by full training and difficulty probes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct FitSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mc_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub mean_nll: f64,
    /// KL (nats) at the last step of the epoch.
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub beta: f64,
    pub steps: usize,
    pub epochs: Vec<EpochStats>,
}

/// Trains the trunk and the task's head on the given training positions.
/// The KL term is amortised over `positions.len()`.
pub(crate) fn train_positions(
    net: &mut VariationalNet,
    prior: &PosteriorSnapshot,
    task: &TaskSpec,
    positions: &[usize],
    beta: f64,
    settings: &FitSettings,
    rng: &mut Rng,
) -> Result<TrainLog> {
    if positions.is_empty() {
        return Err(Error::arg(format!("task {} has no training data", task.name)));
    }
    let mut opt = NetOptimizer::new(net, task.head_index, settings.lr)?;
    let n_task = positions.len();
    let mut order = positions.to_vec();
    let mut log = TrainLog {
        beta,
        steps: 0,
        epochs: Vec::with_capacity(settings.epochs),
    };
    for _ in 0..settings.epochs {
        rng.shuffle(&mut order);
        let (mut loss, mut nll, mut last) = (0.0, 0.0, None::<ElboBreakdown>);
        let mut batches = 0;
        for chunk in order.chunks(settings.batch_size) {
            let (x, y) = task.batch(Split::Train, chunk);
            let b = net.train_step(prior, &mut opt, &x, &y, beta, n_task, settings.mc_samples, rng)?;
            loss += b.loss;
            nll += b.nll;
            last = Some(b);
            batches += 1;
        }
        log.steps += batches;
        log.epochs.push(EpochStats {
            mean_loss: loss / batches as f64,
            mean_nll: nll / batches as f64,
            kl: last.map_or(0.0, |b| b.kl),
        });
    }
    Ok(log)
}

/// Fraction of the given examples whose posterior-predictive argmax matches.
pub(crate) fn accuracy_on(
    net: &VariationalNet,
    task: &TaskSpec,
    split: Split,
    positions: &[usize],
    head: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::arg(format!("task {} has no examples to evaluate", task.name)));
    }
    let mut correct = 0usize;
    for chunk in positions.chunks(EVAL_CHUNK) {
        let (x, y) = task.batch(split, chunk);
        let probs = net.posterior_predict(head, &x, rng, n_samples)?;
        correct += y
            .iter()
            .enumerate()
            .filter(|&(r, &label)| argmax(probs.row(r)) == label)
            .count();
    }
    Ok(correct as f64 / positions.len() as f64)
}

/// Runs `cfg.epochs` passes of minibatch Adam on the β-ELBO of `task`,
/// reshuffling every epoch and keeping the last partial batch. Only the trunk
/// and the task's head are updated.
pub fn train_on_task(
    net: &mut VariationalNet,
    prior: &PosteriorSnapshot,
    task: &TaskSpec,
    beta: f64,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainLog> {
    cfg.validate()?;
    net.head(task.head_index)?;
    let positions: Vec<usize> = (0..task.train.len()).collect();
    train_positions(net, prior, task, &positions, beta, &cfg.fit_settings(), rng)
}

/// Test-set accuracy of the posterior predictive.
pub fn evaluate(net: &VariationalNet, task: &TaskSpec, cfg: &TrainConfig, rng: &mut Rng) -> Result<f64> {
    let positions: Vec<usize> = (0..task.test.len()).collect();
    accuracy_on(net, task, Split::Test, &positions, task.head_index, cfg.eval_mc_samples, rng)
}

/// Accuracy of every seen task after every stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends stage `t`, which must hold exactly `t` accuracies.
    pub fn push_stage(&mut self, accuracies: Vec<f64>) -> Result<()> {
        if accuracies.len() != self.rows.len() + 1 {
            return Err(Error::dim(
                "AccuracyMatrix::push_stage",
                format!("stage {} needs {} entries, got {}", self.rows.len() + 1, self.rows.len() + 1, accuracies.len()),
            ));
        }
        if accuracies.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::arg("accuracies must lie in [0, 1]"));
        }
        self.rows.push(accuracies);
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.rows.len()
    }

    /// Accuracies after stage `stage` (0-based).
    pub fn stage(&self, stage: usize) -> &[f64] {
        &self.rows[stage]
    }

    /// Accuracy of `task` after `stage` (both 0-based), if the task was seen.
    pub fn entry(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows.get(stage).and_then(|r| r.get(task)).copied()
    }

    /// Mean accuracy over the tasks seen at `stage` (0-based).
    pub fn average(&self, stage: usize) -> f64 {
        let r = &self.rows[stage];
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn averages(&self) -> Vec<f64> {
        (0..self.rows.len()).map(|t| self.average(t)).collect()
    }
}

/// Everything recorded about one stage of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    /// 1-based stage number.
    pub stage: usize,
    pub task_name: String,
    pub beta: f64,
    pub heuristics: Option<TaskHeuristics>,
    pub train_log: TrainLog,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub matrix: AccuracyMatrix,
    pub stages: Vec<StageRecord>,
}

impl SequenceResult {
    pub fn trace(&self) -> HeuristicTrace {
        self.stages.iter().filter_map(|s| s.heuristics.clone()).collect()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.beta).collect()
    }
}

/// Runs a whole sequence; see [`run_sequence_with`].
pub fn run_sequence(
    tasks: &[TaskSpec],
    arch: &Architecture,
    cfg: &TrainConfig,
    heuristic_cfg: &HeuristicConfig,
    master_seed: u64,
) -> Result<SequenceResult> {
    run_sequence_with(tasks, arch, cfg, heuristic_cfg, master_seed, |_, _| Ok(()))
}

/// For each task: (auto mode) probe difficulty and similarity and compute β;
/// train; advance the prior; evaluate all tasks seen so far. `on_stage` is
/// called after every stage with the stage record and the new prior.
///
/// All randomness comes from sub-seeds of `master_seed`, one per purpose
/// (`init`, `head`, `probe`, `similarity`, `train`, `eval`), so probing does
/// not perturb training and a fixed-β run follows the same path as an auto
/// run that happens to choose the same β.
pub fn run_sequence_with(
    tasks: &[TaskSpec],
    arch: &Architecture,
    cfg: &TrainConfig,
    heuristic_cfg: &HeuristicConfig,
    master_seed: u64,
    mut on_stage: impl FnMut(&StageRecord, &PosteriorSnapshot) -> Result<()>,
) -> Result<SequenceResult> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::arg("a sequence needs at least one task"));
    }
    if cfg.beta_mode == BetaMode::Auto {
        heuristic_cfg.validate()?;
    }
    let mut net = arch.build(&mut Rng::seed_from(derive_seed(master_seed, &[], "init")))?;
    let mut prior = PosteriorSnapshot::standard_normal(&net);
    let mut d_history = Vec::with_capacity(tasks.len());
    let mut matrix = AccuracyMatrix::new();
    let mut stages = Vec::with_capacity(tasks.len());

    for (i, task) in tasks.iter().enumerate() {
        let t = i + 1;
        let stage = t as u64;
        let (beta, heuristics) = match cfg.beta_mode {
            BetaMode::Fixed(b) => (b, None),
            BetaMode::Auto => {
                let probe = probe_difficulty(task, arch, heuristic_cfg, derive_seed(master_seed, &[stage], "probe"))?;
                let mut sim_rng = Rng::seed_from(derive_seed(master_seed, &[stage], "similarity"));
                let sim = measure_similarity(task, &net, heuristic_cfg, &mut sim_rng)?;
                let delta_d = average_difficulty_gap(&d_history);
                let beta = compute_beta(&d_history, probe.difficulty, sim.similarity, t, heuristic_cfg);
                d_history.push(probe.difficulty);
                let h = TaskHeuristics {
                    d: probe.difficulty,
                    s: sim.similarity,
                    delta_d,
                    beta,
                    probe_accuracies: probe.accuracies,
                    a_star: sim.a_star,
                    a_prime: task.chance_accuracy(),
                };
                (beta, Some(h))
            }
        };

        let head_seed = derive_seed(master_seed, &[task.head_index as u64], "head");
        net.add_head(task.head_index, &mut Rng::seed_from(head_seed));
        let mut train_rng = Rng::seed_from(derive_seed(master_seed, &[stage], "train"));
        let train_log = train_on_task(&mut net, &prior, task, beta, cfg, &mut train_rng)?;
        prior = net.advance_prior();

        let accuracies = tasks[..=i]
            .iter()
            .enumerate()
            .map(|(j, seen)| {
                let mut eval_rng = Rng::seed_from(derive_seed(master_seed, &[stage, j as u64], "eval"));
                evaluate(&net, seen, cfg, &mut eval_rng)
            })
            .collect::<Result<Vec<f64>>>()?;
        matrix.push_stage(accuracies.clone())?;
        let record = StageRecord {
            stage: t,
            task_name: task.name.clone(),
            beta,
            heuristics,
            train_log,
            accuracies,
        };
        on_stage(&record, &prior)?;
        stages.push(record);
    }
    Ok(SequenceResult { matrix, stages })
}
