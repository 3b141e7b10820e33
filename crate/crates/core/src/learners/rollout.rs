//! Trial-by-trial rollouts: at trial t the learner is refit on trials < t
//! and predicts trial t.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ard::{ard_fit, ArdOptions};
use super::bayes::{bayes_ridge_weights, fit_bayes_hyperparams};
use super::logistic::{fit_logistic, LogisticOptions, Penalty};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numeric::{log_space, sigmoid};
use crate::pca::PcaTransform;
use crate::scaling::ScalingParams;
use crate::task::{TaskKind, TaskSpec, REWARD_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    LogisticL2,
    LogisticL1,
    BayesRidge,
    ArdRidge,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::LogisticL2 => "logistic_l2",
            LearnerKind::LogisticL1 => "logistic_l1",
            LearnerKind::BayesRidge => "bayes_ridge",
            LearnerKind::ArdRidge => "ard_ridge",
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, LearnerKind::LogisticL2 | LearnerKind::LogisticL1)
    }

    /// Default learner for a task kind.
    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Category => LearnerKind::LogisticL2,
            TaskKind::Reward => LearnerKind::BayesRidge,
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic_l2" => Ok(LearnerKind::LogisticL2),
            "logistic_l1" => Ok(LearnerKind::LogisticL1),
            "bayes_ridge" => Ok(LearnerKind::BayesRidge),
            "ard_ridge" => Ok(LearnerKind::ArdRidge),
            other => Err(Error::InvalidArgument(format!("unknown learner kind {other:?}"))),
        }
    }
}

/// 17 log-spaced penalties from 1e-4 to 1e4.
pub fn default_alpha_grid() -> Vec<f64> {
    log_space(1e-4, 1e4, 17)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub alpha_grid: Vec<f64>,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub max_iterations: usize,
    /// Project onto this many principal components of the task's stimuli.
    pub pca_components: Option<usize>,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        let opts = LogisticOptions::default();
        Self {
            kind: LearnerKind::LogisticL2,
            alpha_grid: default_alpha_grid(),
            gradient_tolerance: opts.gradient_tolerance,
            step_tolerance: opts.step_tolerance,
            max_iterations: opts.max_iterations,
            pca_components: None,
        }
    }
}

impl LearnerConfig {
    pub fn for_task(kind: TaskKind) -> Self {
        Self {
            kind: LearnerKind::default_for(kind),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() {
            return Err(Error::InvalidArgument("alpha grid is empty".into()));
        }
        if self.alpha_grid.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidArgument("alpha grid values must be positive".into()));
        }
        if !(self.gradient_tolerance > 0.0 && self.step_tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be positive".into()));
        }
        if self.pca_components == Some(0) {
            return Err(Error::InvalidArgument("pca_components must be positive".into()));
        }
        Ok(())
    }

    fn logistic_options(&self) -> LogisticOptions {
        LogisticOptions {
            gradient_tolerance: self.gradient_tolerance,
            step_tolerance: self.step_tolerance,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPrediction {
    pub trial: usize,
    /// Category task: predicted p(C = 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_one: Option<f64>,
    /// Reward task: value estimate per option, left to right.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    /// The learner's own greedy decision (class or option index).
    pub model_choice: usize,
    pub model_correct: bool,
    pub converged: bool,
    /// Evidence-fitted `(lambda, sigma)` for Bayesian ridge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPrediction {
    pub task_kind: TaskKind,
    pub learner: LearnerKind,
    /// Chosen logistic penalty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub trials: Vec<TrialPrediction>,
    pub accuracy: f64,
    pub converged: bool,
}

impl TrajectoryPrediction {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Accuracy over trials `from..to`.
    pub fn accuracy_between(&self, from: usize, to: usize) -> f64 {
        let slice = &self.trials[from.min(self.trials.len())..to.min(self.trials.len())];
        if slice.is_empty() {
            return 0.0;
        }
        slice.iter().filter(|t| t.model_correct).count() as f64 / slice.len() as f64
    }
}

/// Feature rows in presentation order (one per displayed stimulus), with
/// the optional per-task PCA projection applied.
pub fn task_features(task: &TaskSpec, rep: &EmbeddingMatrix, config: &LearnerConfig) -> Result<DMatrix<f64>> {
    let ids: Vec<&str> = task.stimulus_ids().collect();
    let x = rep.select_rows(&ids)?;
    match config.pca_components {
        Some(k) => PcaTransform::fit(&x, k)?.apply(&x),
        None => Ok(x),
    }
}

/// Run the configured learner over the task. Classifiers pick their
/// penalty by [`grid_search_alpha`].
pub fn sequential_rollout(task: &TaskSpec, rep: &EmbeddingMatrix, config: &LearnerConfig) -> Result<TrajectoryPrediction> {
    config.validate()?;
    let features = task_features(task, rep, config)?;
    rollout_features(task, &features, config)
}

/// [`sequential_rollout`] on precomputed feature rows.
pub fn rollout_features(task: &TaskSpec, features: &DMatrix<f64>, config: &LearnerConfig) -> Result<TrajectoryPrediction> {
    if config.kind.is_classifier() {
        Ok(grid_search_features(task, features, config)?.1)
    } else {
        reward_rollout(task, features, config)
    }
}

/// Pick the grid penalty with the highest rollout task accuracy (ties to
/// the smallest penalty); returns it with its trajectory.
pub fn grid_search_alpha(task: &TaskSpec, rep: &EmbeddingMatrix, config: &LearnerConfig) -> Result<(f64, TrajectoryPrediction)> {
    config.validate()?;
    let features = task_features(task, rep, config)?;
    grid_search_features(task, &features, config)
}

pub fn grid_search_features(
    task: &TaskSpec,
    features: &DMatrix<f64>,
    config: &LearnerConfig,
) -> Result<(f64, TrajectoryPrediction)> {
    if !config.kind.is_classifier() {
        return Err(Error::InvalidArgument(format!(
            "{} has no penalty grid",
            config.kind
        )));
    }
    let mut grid = config.alpha_grid.clone();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<(f64, TrajectoryPrediction)> = None;
    for alpha in grid {
        let traj = category_rollout(task, features, config, alpha)?;
        if best.as_ref().map_or(true, |(_, b)| traj.accuracy > b.accuracy) {
            best = Some((alpha, traj));
        }
    }
    Ok(best.expect("grid validated non-empty"))
}

fn check_rows(task: &TaskSpec, features: &DMatrix<f64>) -> Result<()> {
    let expected: usize = task.trials.iter().map(|t| t.stimuli.len()).sum();
    if features.nrows() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: features.nrows(),
        });
    }
    Ok(())
}

fn standardized_training(train: &DMatrix<f64>) -> (ScalingParams, DMatrix<f64>) {
    let params = ScalingParams::fit_lenient(train);
    let z = params.apply(train).expect("params fitted on these columns");
    (params, z)
}

/// Category rollout at a fixed penalty.
pub fn category_rollout(
    task: &TaskSpec,
    features: &DMatrix<f64>,
    config: &LearnerConfig,
    alpha: f64,
) -> Result<TrajectoryPrediction> {
    if task.kind != TaskKind::Category {
        return Err(Error::InvalidArgument("classifier rollouts need a category task".into()));
    }
    if !config.kind.is_classifier() {
        return Err(Error::InvalidArgument(format!("{} is not a classifier", config.kind)));
    }
    check_rows(task, features)?;
    let penalty = if config.kind == LearnerKind::LogisticL1 { Penalty::L1 } else { Penalty::L2 };
    let options = config.logistic_options();
    let p = features.ncols();
    let labels: Vec<u8> = task.trials.iter().map(|t| t.category_label()).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(task.trials.len());
    let mut warm: Option<DVector<f64>> = None;
    let mut seen = [false, false];
    for (t, &label) in labels.iter().enumerate() {
        let train = features.rows(0, t).into_owned();
        let (params, z) = standardized_training(&train);
        let pseudo = !(seen[0] && seen[1]);
        let extra = if pseudo { 2 } else { 0 };
        let mut design = DMatrix::zeros(t + extra, p);
        design.rows_mut(0, t).copy_from(&z);
        let mut y: Vec<f64> = labels[..t].iter().map(|&l| l as f64).collect();
        if pseudo {
            y.extend([0.0, 1.0]);
        }
        let fit = fit_logistic(&design, &y, alpha, penalty, &options, warm.as_ref()).map_err(|e| e.at_trial(t))?;
        let test = params.apply_vec(&features.row(t).transpose()).map_err(|e| e.at_trial(t))?;
        let p_one = sigmoid(fit.beta.dot(&test));
        let choice = usize::from(p_one > 0.5);
        out.push(TrialPrediction {
            trial: t,
            p_one: Some(p_one),
            values: None,
            model_choice: choice,
            model_correct: choice == label as usize,
            converged: fit.converged,
            hyperparams: None,
        });
        warm = Some(fit.beta);
        seen[label as usize] = true;
    }
    Ok(finish(task, config.kind, Some(alpha), out))
}

fn finish(task: &TaskSpec, learner: LearnerKind, alpha: Option<f64>, trials: Vec<TrialPrediction>) -> TrajectoryPrediction {
    let n = trials.len().max(1) as f64;
    let accuracy = trials.iter().filter(|t| t.model_correct).count() as f64 / n;
    let converged = trials.iter().all(|t| t.converged);
    if !converged {
        log::warn!("{learner} rollout had non-converged fits");
    }
    TrajectoryPrediction {
        task_kind: task.kind,
        learner,
        alpha,
        trials,
        accuracy,
        converged,
    }
}

/// Reward rollout with Bayesian ridge or ARD. Both options' rewards from
/// each past trial are training targets; targets are centered on their
/// training mean and the mean is added back to predictions.
pub fn reward_rollout(task: &TaskSpec, features: &DMatrix<f64>, config: &LearnerConfig) -> Result<TrajectoryPrediction> {
    if task.kind != TaskKind::Reward {
        return Err(Error::InvalidArgument("regression rollouts need a reward task".into()));
    }
    if config.kind.is_classifier() {
        return Err(Error::InvalidArgument(format!("{} is not a regression learner", config.kind)));
    }
    check_rows(task, features)?;
    let mut rewards = Vec::with_capacity(features.nrows());
    for trial in &task.trials {
        rewards.extend_from_slice(trial.reward_values()?);
    }
    let mut out = Vec::with_capacity(task.trials.len());
    let mut row = 0;
    for (t, trial) in task.trials.iter().enumerate() {
        let k = trial.stimuli.len();
        let (values, converged, hyper) = if row < 2 {
            (vec![REWARD_MAX / 2.0; k], true, None)
        } else {
            let train = features.rows(0, row).into_owned();
            let (params, z) = standardized_training(&train);
            let mean = rewards[..row].iter().sum::<f64>() / row as f64;
            let r = DVector::from_iterator(row, rewards[..row].iter().map(|v| v - mean));
            let (weights, converged, hyper) = regression_weights(config.kind, &z, &r).map_err(|e| e.at_trial(t))?;
            let mut values = Vec::with_capacity(k);
            for i in 0..k {
                let x = params.apply_vec(&features.row(row + i).transpose()).map_err(|e| e.at_trial(t))?;
                values.push(mean + weights.dot(&x));
            }
            (values, converged, hyper)
        };
        let choice = if values.len() > 1 && values[1] > values[0] { 1 } else { 0 };
        out.push(TrialPrediction {
            trial: t,
            p_one: None,
            model_correct: choice == trial.best_option()?,
            model_choice: choice,
            values: Some(values),
            converged,
            hyperparams: hyper,
        });
        row += k;
    }
    Ok(finish(task, config.kind, None, out))
}

fn regression_weights(
    kind: LearnerKind,
    z: &DMatrix<f64>,
    r: &DVector<f64>,
) -> Result<(DVector<f64>, bool, Option<(f64, f64)>)> {
    if r.iter().all(|v| *v == 0.0) {
        return Ok((DVector::zeros(z.ncols()), true, None));
    }
    match kind {
        LearnerKind::BayesRidge => {
            let h = fit_bayes_hyperparams(z, r)?;
            let w = bayes_ridge_weights(z, r, h.lambda, h.sigma)?;
            Ok((w, h.converged, Some((h.lambda, h.sigma))))
        }
        LearnerKind::ArdRidge => {
            let fit = ard_fit(z, r, &ArdOptions::default())?;
            Ok((DVector::from_vec(fit.weights), fit.converged, None))
        }
        _ => unreachable!("classifiers handled by the caller"),
    }
}
