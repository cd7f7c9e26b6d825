//! Trial aggregation: per (experiment, model, stage) mean and standard error
//! of the stage-average accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::results::ResultRow;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub experiment: String,
    pub model: String,
    /// 1-based stage.
    pub stage: usize,
    pub trials: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation over trials divided by `sqrt(trials)`;
    /// zero for a single trial.
    pub sem: f64,
    /// Mean over trials of `log10(beta)` for the stage.
    pub mean_log10_beta: f64,
}

impl StageSummary {
    pub fn single_trial(&self) -> bool {
        self.trials == 1
    }
}

/// Arithmetic mean and standard error of the mean. One value gives SEM 0.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Default)]
struct TrialStage {
    acc_sum: f64,
    count: usize,
    beta: f64,
}

/// Groups rows by (experiment, model, stage), averaging accuracy over the
/// tasks seen at each stage within a trial, then across trials.
pub fn aggregate_trials(rows: &[ResultRow]) -> Result<Vec<StageSummary>, CliError> {
    if rows.is_empty() {
        return Err(CliError::Data("no result rows to aggregate".into()));
    }
    let mut per_trial: BTreeMap<(String, String, usize, usize), TrialStage> = BTreeMap::new();
    for r in rows {
        let e = per_trial
            .entry((r.experiment.clone(), r.model.clone(), r.stage, r.trial))
            .or_default();
        e.acc_sum += r.accuracy;
        e.count += 1;
        e.beta = r.beta;
    }
    let mut grouped: BTreeMap<(String, String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((exp, model, stage, _), ts) in per_trial {
        let g = grouped.entry((exp, model, stage)).or_default();
        g.0.push(ts.acc_sum / ts.count as f64);
        g.1.push(ts.beta.log10());
    }
    Ok(grouped
        .into_iter()
        .map(|((experiment, model, stage), (accs, log_betas))| {
            let (mean_accuracy, sem) = mean_sem(&accs);
            StageSummary {
                experiment,
                model,
                stage,
                trials: accs.len(),
                mean_accuracy,
                sem,
                mean_log10_beta: mean_sem(&log_betas).0,
            }
        })
        .collect())
}

/// CSV-style table of summaries; single-trial rows are flagged.
pub fn render_summary(summaries: &[StageSummary]) -> String {
    let mut out = String::from("experiment,model,stage,trials,mean_accuracy,sem,mean_log10_beta,note\n");
    for s in summaries {
        let note = if s.single_trial() { "single_trial_sem_zero" } else { "" };
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            s.experiment, s.model, s.stage, s.trials, s.mean_accuracy, s.sem, s.mean_log10_beta, note
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, trial: usize, stage: usize, task: usize, accuracy: f64) -> ResultRow {
        ResultRow {
            experiment: "synthetic".into(),
            model: model.into(),
            trial,
            seed: trial as u64,
            stage,
            task_index: task,
            task_name: format!("t{task}"),
            accuracy,
            beta: 10.0,
            d: None,
            s: None,
            delta_d: None,
        }
    }

    #[test]
    fn sem_matches_hand_values() {
        let (m, s) = mean_sem(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_sem(&[0.7]), (0.7, 0.0));
        assert_eq!(mean_sem(&[0.9; 5]).1, 0.0);
    }

    #[test]
    fn stage_average_then_trial_mean() {
        let rows = vec![
            row("a", 0, 1, 1, 1.0),
            row("a", 0, 2, 1, 0.8),
            row("a", 0, 2, 2, 0.6),
            row("a", 1, 1, 1, 0.8),
            row("a", 1, 2, 1, 0.6),
            row("a", 1, 2, 2, 0.6),
        ];
        let s = aggregate_trials(&rows).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0].mean_accuracy - 0.9).abs() < 1e-12);
        assert!((s[1].mean_accuracy - 0.65).abs() < 1e-12);
        assert!((s[1].sem - 0.05).abs() < 1e-12);
        assert_eq!(s[1].mean_log10_beta, 1.0);
        assert_eq!(s[1].trials, 2);
    }

    #[test]
    fn single_trial_is_flagged() {
        let s = aggregate_trials(&[row("a", 0, 1, 1, 0.5)]).unwrap();
        assert_eq!(s[0].sem, 0.0);
        assert!(render_summary(&s).contains("single_trial_sem_zero"));
        assert!(aggregate_trials(&[]).is_err());
    }
}
