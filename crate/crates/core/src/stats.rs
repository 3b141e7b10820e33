//! Behavioral statistics: per-trial t-tests against chance, learning onset,
//! block-smoothed curves, Kendall τ-b and the two behavioral GLMMs.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::choice::ChoiceLog;
use crate::error::{Error, Result};
use crate::glmm::{fit_glmm, DesignTable, GlmmFit, GlmmSpec};
use crate::policy::finish_csv;
use crate::task::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    /// Zero variance with the mean away from `mu0`; t is infinite.
    pub degenerate: bool,
}

/// One-sample t-test of mean > mu0, upper-tail p.
pub fn t_test_one_sided(values: &[f64], mu0: f64) -> Result<TTest> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData("t-test needs at least 2 values".into()));
    }
    if values.iter().any(|v| !v.is_finite()) || !mu0.is_finite() {
        return Err(Error::InvalidArgument("t-test input is not finite".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let df = n - 1;
    if sd <= 1e-12 * mean.abs().max(1.0) {
        let diff = mean - mu0;
        if diff.abs() <= 1e-12 * mean.abs().max(1.0) {
            return Ok(TTest { t: 0.0, df, p: 0.5, degenerate: false });
        }
        let (t, p) = if diff > 0.0 { (f64::INFINITY, 0.0) } else { (f64::NEG_INFINITY, 1.0) };
        return Ok(TTest { t, df, p, degenerate: true });
    }
    let t = (mean - mu0) / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(TTest { t, df, p: dist.sf(t), degenerate: false })
}

/// Participants × trials correctness with one condition label per participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub participants: Vec<String>,
    pub conditions: Vec<String>,
    pub correct: Vec<Vec<bool>>,
}

/// Per-trial group summary, one row of a plot-ready curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub t: f64,
    pub p: f64,
}

impl AccuracyTable {
    pub fn new(participants: Vec<String>, conditions: Vec<String>, correct: Vec<Vec<bool>>) -> Result<Self> {
        if participants.len() != correct.len() || conditions.len() != correct.len() {
            return Err(Error::Validation("participant, condition and row counts differ".into()));
        }
        let Some(first) = correct.first() else {
            return Err(Error::InsufficientData("accuracy table is empty".into()));
        };
        if first.is_empty() {
            return Err(Error::InsufficientData("accuracy table has no trials".into()));
        }
        if let Some(i) = correct.iter().position(|r| r.len() != first.len()) {
            return Err(Error::Validation(format!(
                "participant '{}' has {} trials, expected {}",
                participants[i],
                correct[i].len(),
                first.len()
            )));
        }
        Ok(Self { participants, conditions, correct })
    }

    /// Completed logs of one task kind; condition is the task's feature.
    pub fn from_logs(logs: &[ChoiceLog]) -> Result<Self> {
        if let Some(log) = logs.iter().find(|l| l.kind() != logs[0].kind()) {
            return Err(Error::Validation(format!("session '{}' mixes task kinds", log.session_id)));
        }
        Self::new(
            logs.iter().map(|l| l.participant_id.clone()).collect(),
            logs.iter().map(|l| l.task.condition_feature.clone()).collect(),
            logs.iter().map(|l| l.correctness()).collect(),
        )
    }

    pub fn n_participants(&self) -> usize {
        self.correct.len()
    }

    pub fn n_trials(&self) -> usize {
        self.correct[0].len()
    }

    pub fn trial_values(&self, trial: usize) -> Vec<f64> {
        self.correct.iter().map(|r| f64::from(u8::from(r[trial]))).collect()
    }

    /// Mean accuracy per trial across participants.
    pub fn trial_means(&self) -> Vec<f64> {
        (0..self.n_trials())
            .map(|t| self.trial_values(t).iter().sum::<f64>() / self.n_participants() as f64)
            .collect()
    }

    /// Per-trial means with normal-approximation 95% bands and t-tests
    /// against `chance`.
    pub fn summarize(&self, chance: f64) -> Result<Vec<TrialSummary>> {
        let n = self.n_participants() as f64;
        (0..self.n_trials())
            .map(|trial| {
                let v = self.trial_values(trial);
                let mean = v.iter().sum::<f64>() / n;
                let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
                let half = 1.959963984540054 * sd / n.sqrt();
                let test = t_test_one_sided(&v, chance)?;
                Ok(TrialSummary {
                    trial,
                    mean,
                    ci_low: mean - half,
                    ci_high: mean + half,
                    t: test.t,
                    p: test.p,
                })
            })
            .collect()
    }
}

/// First trial whose own one-sided test clears `alpha_level`.
pub fn learning_onset(table: &AccuracyTable, chance: f64, alpha_level: f64) -> Result<Option<usize>> {
    for trial in 0..table.n_trials() {
        if t_test_one_sided(&table.trial_values(trial), chance)?.p < alpha_level {
            return Ok(Some(trial));
        }
    }
    Ok(None)
}

pub fn summary_to_csv(rows: &[TrialSummary]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "mean_accuracy", "ci_low", "ci_high", "t", "p_value"])?;
    for r in rows {
        w.write_record([
            r.trial.to_string(),
            r.mean.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.t.to_string(),
            r.p.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// Non-overlapping block means; a trailing partial block averages what it has.
pub fn smooth_curve(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window > values.len() {
        return Err(Error::InvalidArgument(format!(
            "window {window} outside 1..={}",
            values.len()
        )));
    }
    Ok(values
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallTau {
    pub tau_b: f64,
    /// Two-sided, normal approximation with tie-adjusted variance.
    pub p: f64,
    pub concordant_minus_discordant: i64,
}

/// Sizes of runs of equal values in a sorted sequence.
fn tie_groups<T: PartialEq>(sorted: &[T]) -> Vec<u64> {
    let mut out = Vec::new();
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            if run > 1 {
                out.push(run);
            }
            run = 1;
        }
    }
    if run > 1 {
        out.push(run);
    }
    out
}

fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall τ-b by Knight's O(n log n) algorithm.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<KendallTau> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData("tau-b needs at least 2 points".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("tau-b input contains NaN".into()));
    }
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let x_ties = tie_groups(&xs);
    let joint_ties = tie_groups(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count(&mut ys, &mut Vec::with_capacity(n));
    let y_ties = tie_groups(&ys);

    let pairs_of = |g: &[u64]| g.iter().map(|t| t * (t - 1) / 2).sum::<u64>();
    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let (n1, n2, n3) = (pairs_of(&x_ties), pairs_of(&y_ties), pairs_of(&joint_ties));
    if n1 == n0 || n2 == n0 {
        return Err(Error::InvalidArgument("all values tied; tau-b undefined".into()));
    }
    // concordant - discordant, among pairs untied in both
    let s = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    let tau_b = s as f64 / (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();

    let nf = n as f64;
    let sum_f = |g: &[u64], f: &dyn Fn(f64) -> f64| g.iter().map(|&t| f(t as f64)).sum::<f64>();
    let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
    let a = |t: f64| t * (t - 1.0) * (2.0 * t + 5.0);
    let b = |t: f64| t * (t - 1.0);
    let c = |t: f64| t * (t - 1.0) * (t - 2.0);
    let mut var = (v0 - sum_f(&x_ties, &a) - sum_f(&y_ties, &a)) / 18.0
        + sum_f(&x_ties, &b) * sum_f(&y_ties, &b) / (2.0 * nf * (nf - 1.0));
    if n > 2 {
        var += sum_f(&x_ties, &c) * sum_f(&y_ties, &c) / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
    }
    let p = if var > 0.0 {
        erfc((s as f64 / var.sqrt()).abs() / std::f64::consts::SQRT_2).min(1.0)
    } else {
        1.0
    };
    Ok(KendallTau { tau_b, p, concordant_minus_discordant: s })
}

/// Category analysis: correctness ~ trial, participant random intercepts and
/// random slopes for trial. Condition enters as a fixed factor; it only gets
/// a random slope when it varies within participants.
pub fn category_learning_glmm(logs: &[ChoiceLog]) -> Result<GlmmFit> {
    let (table, within) = behavior_table(logs, TaskKind::Category)?;
    let mut fixed = vec!["trial"];
    let mut random = vec!["trial"];
    if distinct(table.factor("condition").unwrap_or_default()) > 1 {
        fixed.push("condition");
        if within {
            random.push("condition");
        }
    }
    fit_glmm(&table, &GlmmSpec::new("correct", "participant").fixed(&fixed).random(&random).standardized(true))
}

/// Reward analysis: chose-right ~ reward difference × trial, with matching
/// random slopes.
pub fn reward_learning_glmm(logs: &[ChoiceLog]) -> Result<GlmmFit> {
    let (table, _) = behavior_table(logs, TaskKind::Reward)?;
    let terms = ["reward_diff", "trial", "reward_diff:trial"];
    fit_glmm(&table, &GlmmSpec::new("chose_right", "participant").fixed(&terms).random(&terms).standardized(true))
}

fn distinct(values: &[String]) -> usize {
    let mut v: Vec<&String> = values.iter().collect();
    v.sort();
    v.dedup();
    v.len()
}

/// Long-format table over all records. The flag reports whether any
/// participant appears under more than one condition.
fn behavior_table(logs: &[ChoiceLog], kind: TaskKind) -> Result<(DesignTable, bool)> {
    let mut trial = Vec::new();
    let mut correct = Vec::new();
    let mut chose_right = Vec::new();
    let mut reward_diff = Vec::new();
    let mut participant = Vec::new();
    let mut condition = Vec::new();
    for log in logs {
        if log.kind() != kind {
            return Err(Error::Validation(format!(
                "session '{}' is a {} task, expected {kind}",
                log.session_id,
                log.kind()
            )));
        }
        for r in &log.records {
            let t = &log.task.trials[r.trial];
            trial.push(r.trial as f64);
            correct.push(f64::from(u8::from(r.correct)));
            chose_right.push(if r.choice == 1 { 1.0 } else { 0.0 });
            if kind == TaskKind::Reward {
                let v = t.reward_values()?;
                reward_diff.push(v[1] - v[0]);
            }
            participant.push(log.participant_id.clone());
            condition.push(log.task.condition_feature.clone());
        }
    }
    let mut seen: Vec<(&String, &String)> = participant.iter().zip(&condition).collect();
    seen.sort();
    seen.dedup();
    let within = distinct(&participant) < seen.len();
    let mut table = DesignTable::new(trial.len());
    table.add_numeric("trial", trial)?;
    match kind {
        TaskKind::Category => {
            table.add_numeric("correct", correct)?;
        }
        TaskKind::Reward => {
            table.add_numeric("chose_right", chose_right)?;
            table.add_numeric("reward_diff", reward_diff)?;
        }
    }
    table.add_factor("participant", participant)?;
    table.add_factor("condition", condition)?;
    Ok((table, within))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_test_example() {
        let r = t_test_one_sided(&[0.6, 0.55, 0.65], 0.5).unwrap();
        assert!((r.t - 3.4641016).abs() < 1e-6);
        assert_eq!(r.df, 2);
        assert!((r.p - 0.037037).abs() < 1e-4, "{}", r.p);
    }

    #[test]
    fn t_test_degenerate_cases() {
        let r = t_test_one_sided(&[0.5, 0.5], 0.5).unwrap();
        assert_eq!((r.t, r.p, r.degenerate), (0.0, 0.5, false));
        let r = t_test_one_sided(&[1.0, 1.0, 1.0], 0.5).unwrap();
        assert_eq!(r.p, 0.0);
        assert!(r.degenerate);
        assert!(t_test_one_sided(&[1.0], 0.5).is_err());
    }

    #[test]
    fn onset_on_all_correct_table_is_zero() {
        let t = AccuracyTable::new(
            vec!["a".into(), "b".into()],
            vec!["c".into(), "c".into()],
            vec![vec![true; 5], vec![true; 5]],
        )
        .unwrap();
        assert_eq!(learning_onset(&t, 0.5, 0.05).unwrap(), Some(0));
        let t = AccuracyTable::new(
            vec!["a".into(), "b".into()],
            vec!["c".into(), "c".into()],
            vec![vec![true, false], vec![false, true]],
        )
        .unwrap();
        assert_eq!(learning_onset(&t, 0.5, 0.05).unwrap(), None);
        assert!(AccuracyTable::new(vec!["a".into()], vec!["c".into()], vec![vec![]]).is_err());
    }

    #[test]
    fn smoothing_blocks() {
        assert_eq!(smooth_curve(&[1.0, 1.0, 1.0, 1.0], 2).unwrap(), vec![1.0, 1.0]);
        assert_eq!(smooth_curve(&[0.0, 1.0, 0.0, 1.0], 2).unwrap(), vec![0.5, 0.5]);
        assert_eq!(smooth_curve(&[1.0, 2.0, 3.0], 2).unwrap(), vec![1.5, 3.0]);
        assert!(smooth_curve(&[1.0], 2).is_err());
    }

    #[test]
    fn tau_extremes_and_ties() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau_b(&x, &x).unwrap().tau_b, 1.0);
        let rev = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(kendall_tau_b(&x, &rev).unwrap().tau_b, -1.0);
        assert!(kendall_tau_b(&x, &[1.0; 4]).is_err());
        // one pair tied in x, the other five concordant
        let r = kendall_tau_b(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.concordant_minus_discordant, 5);
        assert!((r.tau_b - 5.0 / 30f64.sqrt()).abs() < 1e-15);
    }
}
