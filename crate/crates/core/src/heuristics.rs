//! Task difficulty and similarity heuristics and the resulting per-task β.
//!
//! For task `t` with chance accuracy `a'`:
//!
//! - difficulty `d_t` comes from a mock training run: a fresh network of the
//!   same architecture is trained for one short epoch on a small subset and its
//!   held-out accuracy `a_t` is turned into a normalised improvement over chance;
//! - similarity `s_t = norm(|a*_t - a'|, 1 - a')` where `a*_t` is the accuracy of
//!   the current network on the new task before any training;
//! - `β_t = exp(λ (max(d_1..d_{t-1}) - d_t / (1 + δ_d (t-1)) + s_t))`, where
//!   `δ_d` is the mean gap between consecutive previous difficulties.

use crate::continual::{accuracy_on, train_positions, FitSettings};
use crate::data::{Split, TaskSpec};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};
use crate::vbnn::{Architecture, PosteriorSnapshot, VariationalNet};

pub const BETA_MIN: f64 = 1e-3;
pub const BETA_MAX: f64 = 1e3;

/// How probe improvement maps to difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifficultyConvention {
    /// `d = 1 - improvement`: tasks the probe learns poorly are harder.
    InverseImprovement,
    /// `d = improvement`.
    Improvement,
}

/// Shape of the map from `|a* - a'|` onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormShape {
    LinearClamp,
    Smoothstep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicConfig {
    pub lambda: f64,
    pub probe_size: usize,
    pub probe_batch: usize,
    pub probe_epochs: usize,
    pub probe_repeats: usize,
    pub probe_lr: f64,
    /// Monte-Carlo weight samples per probe training step.
    pub probe_mc_samples: usize,
    /// Weight samples for the predictive used by probes and similarity.
    pub probe_eval_samples: usize,
    pub difficulty_convention: DifficultyConvention,
    pub norm_shape: NormShape,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            probe_size: 1000,
            probe_batch: 256,
            probe_epochs: 1,
            probe_repeats: 10,
            probe_lr: 0.001,
            probe_mc_samples: 5,
            probe_eval_samples: 20,
            difficulty_convention: DifficultyConvention::InverseImprovement,
            norm_shape: NormShape::LinearClamp,
        }
    }
}

impl HeuristicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::arg(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.probe_batch == 0 || self.probe_size < self.probe_batch {
            return Err(Error::arg(format!(
                "probe_size ({}) must be at least probe_batch ({}) and both positive",
                self.probe_size, self.probe_batch
            )));
        }
        if self.probe_repeats == 0 || self.probe_epochs == 0 {
            return Err(Error::arg("probe_repeats and probe_epochs must be at least 1"));
        }
        if !(self.probe_lr > 0.0) {
            return Err(Error::arg("probe_lr must be positive"));
        }
        if self.probe_mc_samples == 0 || self.probe_eval_samples == 0 {
            return Err(Error::arg("probe sample counts must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of [`probe_difficulty`].
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyProbe {
    pub difficulty: f64,
    pub improvement: f64,
    /// Held-out accuracy of each repeat.
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub chance: f64,
}

/// Outcome of [`measure_similarity`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMeasure {
    pub similarity: f64,
    /// Accuracy of the most informative existing head, if any head qualified.
    pub a_star: Option<f64>,
    pub head_used: Option<usize>,
}

/// Heuristic record of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHeuristics {
    pub d: f64,
    pub s: f64,
    pub delta_d: f64,
    pub beta: f64,
    pub probe_accuracies: Vec<f64>,
    pub a_star: Option<f64>,
    pub a_prime: f64,
}

/// Per-task heuristics for a whole sequence.
pub type HeuristicTrace = Vec<TaskHeuristics>;

/// Maps `x in [0, hi]` onto `[0, 1]` with `norm(0) = 0` and `norm(hi) = 1`.
pub fn norm_unit(x: f64, hi: f64, shape: NormShape) -> Result<f64> {
    if !(hi > 0.0) {
        return Err(Error::arg(format!("norm upper anchor must be positive, got {hi}")));
    }
    let u = (x / hi).clamp(0.0, 1.0);
    Ok(match shape {
        NormShape::LinearClamp => u,
        NormShape::Smoothstep => u * u * (3.0 - 2.0 * u),
    })
}

/// Mean absolute gap between consecutive difficulties; 0 with fewer than two.
pub fn average_difficulty_gap(d_history: &[f64]) -> f64 {
    if d_history.len() < 2 {
        return 0.0;
    }
    let total: f64 = d_history.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    total / (d_history.len() - 1) as f64
}

/// β for task `t` (1-based) given the difficulties of tasks `1..t`.
/// The first task gets β = 1. The result is clamped to
/// `[BETA_MIN, BETA_MAX]`.
pub fn compute_beta(d_history: &[f64], d_t: f64, s_t: f64, t: usize, cfg: &HeuristicConfig) -> f64 {
    if t <= 1 || d_history.is_empty() {
        return 1.0;
    }
    let max_prev = d_history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let delta = average_difficulty_gap(d_history);
    let exponent = cfg.lambda * (max_prev - d_t / (1.0 + delta * (t - 1) as f64) + s_t);
    exponent.exp().clamp(BETA_MIN, BETA_MAX)
}

/// Difficulty from probe accuracy, chance level and the convention in use.
pub fn difficulty_from_accuracy(mean_accuracy: f64, chance: f64, convention: DifficultyConvention) -> (f64, f64) {
    let improvement = ((mean_accuracy - chance) / (1.0 - chance)).clamp(0.0, 1.0);
    let d = match convention {
        DifficultyConvention::InverseImprovement => 1.0 - improvement,
        DifficultyConvention::Improvement => improvement,
    };
    (d, improvement)
}

/// Mock-trains fresh networks on small subsets of `task` and measures how far
/// above chance they get. Repeat `r` draws everything from
/// `derive_seed(seed, [r], "repeat")`.
pub fn probe_difficulty(
    task: &TaskSpec,
    arch: &Architecture,
    cfg: &HeuristicConfig,
    seed: u64,
) -> Result<DifficultyProbe> {
    cfg.validate()?;
    let n = task.train.len();
    if n < 2 * cfg.probe_size {
        return Err(Error::arg(format!(
            "task {} has {n} training examples; difficulty probes need {}",
            task.name,
            2 * cfg.probe_size
        )));
    }
    if arch.output_dim != task.num_classes() || arch.input_dim != task.input_dim() {
        return Err(Error::dim(
            "probe_difficulty",
            format!(
                "architecture {}->{} does not fit task {} ({} inputs, {} classes)",
                arch.input_dim,
                arch.output_dim,
                task.name,
                task.input_dim(),
                task.num_classes()
            ),
        ));
    }
    let settings = FitSettings {
        epochs: cfg.probe_epochs,
        batch_size: cfg.probe_batch,
        lr: cfg.probe_lr,
        mc_samples: cfg.probe_mc_samples,
    };
    let head = task.head_index;
    let accuracies = (0..cfg.probe_repeats)
        .map(|r| {
            let mut rng = Rng::seed_from(derive_seed(seed, &[r as u64], "repeat"));
            let order = rng.permutation(n);
            let (train_pos, rest) = order.split_at(cfg.probe_size);
            let eval_pos = &rest[..cfg.probe_size];
            let mut net = arch.build(&mut rng)?;
            net.add_head(head, &mut rng);
            let prior = PosteriorSnapshot::standard_normal(&net);
            train_positions(&mut net, &prior, task, train_pos, 1.0, &settings, &mut rng)?;
            accuracy_on(&net, task, Split::Train, eval_pos, head, cfg.probe_eval_samples, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let chance = task.chance_accuracy();
    let (difficulty, improvement) = difficulty_from_accuracy(mean_accuracy, chance, cfg.difficulty_convention);
    Ok(DifficultyProbe {
        difficulty,
        improvement,
        accuracies,
        mean_accuracy,
        chance,
    })
}

/// How predictable `task` is under `net` before training on it.
///
/// If the task's own head already exists (single-head networks), that head is
/// evaluated. Otherwise every existing head with the right number of outputs
/// is tried and the one whose accuracy is furthest from chance is used. A
/// network without heads has learned nothing and gives similarity 0.
pub fn measure_similarity(
    task: &TaskSpec,
    net: &VariationalNet,
    cfg: &HeuristicConfig,
    rng: &mut Rng,
) -> Result<SimilarityMeasure> {
    let none = SimilarityMeasure {
        similarity: 0.0,
        a_star: None,
        head_used: None,
    };
    let heads: Vec<usize> = if net.has_head(task.head_index) {
        vec![task.head_index]
    } else {
        net.head_indices()
            .filter(|&h| net.head(h).map(|l| l.output_dim() == task.num_classes()).unwrap_or(false))
            .collect()
    };
    if heads.is_empty() {
        return Ok(none);
    }
    let n = task.train.len();
    let mut order = rng.permutation(n);
    order.truncate(cfg.probe_size.min(n));
    let chance = task.chance_accuracy();
    let mut best: Option<(usize, f64)> = None;
    for h in heads {
        let acc = accuracy_on(net, task, Split::Train, &order, h, cfg.probe_eval_samples, rng)?;
        if best.is_none_or(|(_, b)| (acc - chance).abs() > (b - chance).abs()) {
            best = Some((h, acc));
        }
    }
    let (head, a_star) = best.expect("at least one head evaluated");
    Ok(SimilarityMeasure {
        similarity: norm_unit((a_star - chance).abs(), 1.0 - chance, cfg.norm_shape)?,
        a_star: Some(a_star),
        head_used: Some(head),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn cfg() -> HeuristicConfig {
        HeuristicConfig::default()
    }

    #[test]
    fn norm_anchors_and_midpoint() {
        for shape in [NormShape::LinearClamp, NormShape::Smoothstep] {
            assert_eq!(norm_unit(0.0, 0.5, shape).unwrap(), 0.0);
            assert_eq!(norm_unit(0.5, 0.5, shape).unwrap(), 1.0);
            assert!((norm_unit(0.25, 0.5, shape).unwrap() - 0.5).abs() < 1e-15);
            assert_eq!(norm_unit(2.0, 0.5, shape).unwrap(), 1.0);
        }
        assert!(norm_unit(0.1, 0.0, NormShape::LinearClamp).is_err());
        assert!(norm_unit(0.1, -1.0, NormShape::Smoothstep).is_err());
    }

    #[test]
    fn difficulty_gap_examples() {
        assert_eq!(average_difficulty_gap(&[]), 0.0);
        assert_eq!(average_difficulty_gap(&[0.3]), 0.0);
        assert!((average_difficulty_gap(&[0.2, 0.8]) - 0.6).abs() < 1e-15);
        assert!((average_difficulty_gap(&[0.2, 0.8, 0.2]) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn beta_examples() {
        let c = cfg();
        assert_eq!(compute_beta(&[], 0.7, 0.3, 1, &c), 1.0);
        assert!((compute_beta(&[0.4], 0.4, 0.0, 2, &c) - 1.0).abs() < 1e-12);
        let want = (5.0f64 * (0.8 - 0.8 / 2.2)).exp();
        let got = compute_beta(&[0.2, 0.8], 0.8, 0.0, 3, &c);
        assert!((got - want).abs() < 1e-9);
        assert!((got - 8.86).abs() < 5e-3);
        let got = compute_beta(&[0.1], 0.1, 0.6, 2, &c);
        assert!((got - 3.0f64.exp()).abs() < 1e-9);
        assert!((got - 20.09).abs() < 5e-3);
    }

    #[test]
    fn beta_is_clamped() {
        let c = cfg();
        assert_eq!(compute_beta(&[1.0], 0.0, 1.0, 2, &c), BETA_MAX);
        assert_eq!(compute_beta(&[0.0], 1.0, 0.0, 2, &c), (-5.0f64).exp());
        let strong = HeuristicConfig { lambda: 50.0, ..cfg() };
        assert_eq!(compute_beta(&[0.0], 1.0, 0.0, 2, &strong), BETA_MIN);
    }

    #[test]
    fn constant_difficulties_keep_beta_at_one() {
        let c = cfg();
        let mut hist = vec![0.37];
        for t in 2..12 {
            assert!((compute_beta(&hist, 0.37, 0.0, t, &c) - 1.0).abs() < 1e-12);
            hist.push(0.37);
        }
    }

    #[test]
    fn difficulty_conventions() {
        let (d, imp) = difficulty_from_accuracy(0.9, 0.5, DifficultyConvention::InverseImprovement);
        assert!((imp - 0.8).abs() < 1e-12);
        assert!((d - 0.2).abs() < 1e-12);
        let (d, _) = difficulty_from_accuracy(0.9, 0.5, DifficultyConvention::Improvement);
        assert!((d - 0.8).abs() < 1e-12);
        assert_eq!(difficulty_from_accuracy(0.3, 0.5, DifficultyConvention::InverseImprovement).0, 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(HeuristicConfig { lambda: 0.0, ..cfg() }.validate().is_err());
        assert!(HeuristicConfig { probe_size: 100, ..cfg() }.validate().is_err());
        assert!(HeuristicConfig { probe_repeats: 0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn probe_requires_enough_data() {
        let task = crate::data::make_synthetic_blobs(5.0, 0.0, 100, &mut Rng::seed_from(0)).unwrap();
        let arch = Architecture::new(784, &[8], 2);
        assert!(matches!(
            probe_difficulty(&task, &arch, &cfg(), 1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn untrained_network_gives_zero_similarity() {
        let task = crate::data::make_synthetic_blobs(5.0, 0.0, 100, &mut Rng::seed_from(0)).unwrap();
        let net = VariationalNet::init_network(784, &[8], 2, &mut Rng::seed_from(1)).unwrap();
        let m = measure_similarity(&task, &net, &cfg(), &mut Rng::seed_from(2)).unwrap();
        assert_eq!(m.similarity, 0.0);
        assert_eq!(m.a_star, None);
    }

    proptest! {
        #[test]
        fn beta_monotone_in_difficulty_and_similarity(
            hist in proptest::collection::vec(0.0f64..1.0, 1..6),
            d in 0.0f64..1.0, dd in 0.001f64..0.2,
            s in 0.0f64..1.0, ds in 0.001f64..0.2,
        ) {
            let c = HeuristicConfig { lambda: 0.5, ..cfg() };
            let t = hist.len() + 1;
            let base = compute_beta(&hist, d, s, t, &c);
            prop_assert!(base > 0.0);
            if d + dd <= 1.0 {
                prop_assert!(compute_beta(&hist, d + dd, s, t, &c) < base);
            }
            if s + ds <= 1.0 {
                prop_assert!(compute_beta(&hist, d, s + ds, t, &c) > base);
            }
        }

        #[test]
        fn heuristics_stay_in_range(acc in 0.0f64..1.0, k in 2usize..11, x in -1.0f64..2.0) {
            let chance = 1.0 / k as f64;
            for conv in [DifficultyConvention::InverseImprovement, DifficultyConvention::Improvement] {
                let (d, _) = difficulty_from_accuracy(acc, chance, conv);
                prop_assert!((0.0..=1.0).contains(&d));
            }
            for shape in [NormShape::LinearClamp, NormShape::Smoothstep] {
                let s = norm_unit(x, 1.0 - chance, shape).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }
    }
}
