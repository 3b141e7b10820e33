//! Category- and reward-learning tasks built from one embedding feature.
//!
//! Stimuli are drawn by splitting the feature's loading range into equal
//! width bins and sampling a bin uniformly before sampling a stimulus within
//! it, which flattens skewed loading distributions.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from_seed, RNG_ALGORITHM};

/// Stimuli drawn per participant.
pub const STIMULI_PER_TASK: usize = 120;
/// Trials in a category task (one stimulus each).
pub const CATEGORY_TRIALS: usize = 120;
/// Trials in a reward task (two stimuli each).
pub const REWARD_TRIALS: usize = 60;
/// Loading bins used for stimulus sampling.
pub const DEFAULT_BINS: usize = 5;
/// Rewards are rescaled onto `[0, REWARD_MAX]`.
pub const REWARD_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Category,
    Reward,
}

impl TaskKind {
    pub fn stimuli_per_trial(self) -> usize {
        match self {
            TaskKind::Category => 1,
            TaskKind::Reward => 2,
        }
    }

    pub fn standard_trials(self) -> usize {
        match self {
            TaskKind::Category => CATEGORY_TRIALS,
            TaskKind::Reward => REWARD_TRIALS,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(TaskKind::Category),
            "reward" => Ok(TaskKind::Reward),
            other => Err(Error::InvalidArgument(format!("unknown task kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Category => "category",
            TaskKind::Reward => "reward",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusDraw {
    pub stimulus_id: String,
    pub loading: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

/// One trial. Category trials carry a `label`; reward trials carry one
/// reward per presented stimulus, left to right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub stimuli: Vec<StimulusDraw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
}

impl Trial {
    pub fn category_label(&self) -> Result<u8> {
        self.label
            .ok_or_else(|| Error::Validation(format!("trial {} has no category label", self.index)))
    }

    pub fn reward_values(&self) -> Result<&[f64]> {
        self.rewards
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("trial {} has no rewards", self.index)))
    }

    /// Index of the best option (category: the label; reward: the higher
    /// reward, ties to the left).
    pub fn best_option(&self) -> Result<usize> {
        if let Some(label) = self.label {
            return Ok(label as usize);
        }
        let r = self.reward_values()?;
        Ok(if r.len() > 1 && r[1] > r[0] { 1 } else { 0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub condition_feature: String,
    pub seed: u64,
    pub rng_algorithm: String,
    pub trials: Vec<Trial>,
}

impl TaskSpec {
    /// Stimulus ids in presentation order.
    pub fn stimulus_ids(&self) -> impl Iterator<Item = &str> {
        self.trials
            .iter()
            .flat_map(|t| t.stimuli.iter().map(|s| s.stimulus_id.as_str()))
    }

    /// Structural checks: stimuli per trial, outcomes present, no repeats,
    /// rewards within range, gapless indices.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, trial) in self.trials.iter().enumerate() {
            if trial.index != i {
                return Err(Error::Validation(format!("trial index {} at position {i}", trial.index)));
            }
            if trial.stimuli.len() != self.kind.stimuli_per_trial() {
                return Err(Error::Validation(format!(
                    "trial {i} has {} stimuli",
                    trial.stimuli.len()
                )));
            }
            for s in &trial.stimuli {
                if !seen.insert(s.stimulus_id.as_str()) {
                    return Err(Error::Validation(format!(
                        "stimulus '{}' repeats in trial {i}",
                        s.stimulus_id
                    )));
                }
            }
            match self.kind {
                TaskKind::Category => {
                    let label = trial.category_label()?;
                    if label > 1 {
                        return Err(Error::Validation(format!("trial {i} label {label}")));
                    }
                }
                TaskKind::Reward => {
                    let r = trial.reward_values()?;
                    if r.len() != 2 || r.iter().any(|v| !(0.0..=REWARD_MAX).contains(v)) {
                        return Err(Error::Validation(format!("trial {i} rewards {r:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// [`TaskSpec::validate`] plus the standard trial counts (120 / 60).
    pub fn validate_protocol(&self) -> Result<()> {
        self.validate()?;
        if self.trials.len() != self.kind.standard_trials() {
            return Err(Error::Validation(format!(
                "{} task has {} trials, expected {}",
                self.kind,
                self.trials.len(),
                self.kind.standard_trials()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let task: TaskSpec = serde_json::from_str(text)?;
        task.validate()?;
        Ok(task)
    }
}

/// Stimulus id -> image path or URL.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageManifest(pub BTreeMap<String, String>);

impl ImageManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn get(&self, stimulus_id: &str) -> Option<&str> {
        self.0.get(stimulus_id).map(String::as_str)
    }

    /// Fill `image_ref` of every draw; fails if a stimulus has no image.
    pub fn attach(&self, draws: &mut [StimulusDraw]) -> Result<()> {
        for d in draws {
            if !self.0.contains_key(&d.stimulus_id) {
                return Err(Error::Validation(format!(
                    "stimulus '{}' has no image in the manifest",
                    d.stimulus_id
                )));
            }
            d.image_ref = Some(d.stimulus_id.clone());
        }
        Ok(())
    }
}

/// `n_bins + 1` equally spaced edges from `min` to `max`.
pub fn bin_edges(min: f64, max: f64, n_bins: usize) -> Vec<f64> {
    (0..=n_bins)
        .map(|i| {
            if i == n_bins {
                max
            } else {
                min + i as f64 * (max - min) / n_bins as f64
            }
        })
        .collect()
}

/// Equal-width bin index of each loading; the maximum lands in the last bin.
pub fn bin_loadings(loadings: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be positive".into()));
    }
    if loadings.is_empty() {
        return Err(Error::InvalidArgument("no loadings".into()));
    }
    if loadings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite loading".into()));
    }
    let min = loadings.iter().copied().fold(f64::INFINITY, f64::min);
    let max = loadings.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(Error::Validation(format!(
            "degenerate loading range: all loadings equal {min}"
        )));
    }
    let edges = bin_edges(min, max, n_bins);
    Ok(loadings
        .iter()
        .map(|&v| {
            // largest i with v >= edges[i], capped at the last bin
            let i = edges[1..n_bins].partition_point(|&e| e <= v);
            i.min(n_bins - 1)
        })
        .collect())
}

/// Draw `n` distinct stimuli with [`DEFAULT_BINS`] loading bins.
pub fn sample_stimuli(
    embedding: &EmbeddingMatrix,
    feature: &str,
    n: usize,
    seed: u64,
) -> Result<Vec<StimulusDraw>> {
    sample_stimuli_binned(embedding, feature, n, seed, DEFAULT_BINS)
}

/// Draw `n` distinct stimuli: pick a non-exhausted bin uniformly, then an
/// unused stimulus uniformly within it.
pub fn sample_stimuli_binned(
    embedding: &EmbeddingMatrix,
    feature: &str,
    n: usize,
    seed: u64,
    n_bins: usize,
) -> Result<Vec<StimulusDraw>> {
    let loadings = embedding.feature_column(feature)?;
    if n > loadings.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n} stimuli but only {} available",
            loadings.len()
        )));
    }
    let bins = bin_loadings(&loadings, n_bins)?;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (row, &b) in bins.iter().enumerate() {
        members[b].push(row);
    }
    let mut rng = rng_from_seed(seed);
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let open: Vec<usize> = (0..n_bins).filter(|&b| !members[b].is_empty()).collect();
        let bin = open[rng.random_range(0..open.len())];
        let pick = rng.random_range(0..members[bin].len());
        let row = members[bin].swap_remove(pick);
        draws.push(StimulusDraw {
            stimulus_id: embedding.stimulus_ids()[row].clone(),
            loading: loadings[row],
            image_ref: None,
        });
    }
    Ok(draws)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// One stimulus per trial, label 1 iff loading > median, draw order kept.
pub fn make_category_task(draws: &[StimulusDraw], feature: &str, seed: u64) -> Result<TaskSpec> {
    if draws.is_empty() {
        return Err(Error::InvalidArgument("no stimuli".into()));
    }
    let loadings: Vec<f64> = draws.iter().map(|d| d.loading).collect();
    let med = median(&loadings);
    let trials = draws
        .iter()
        .enumerate()
        .map(|(index, d)| Trial {
            index,
            stimuli: vec![d.clone()],
            label: Some(u8::from(d.loading > med)),
            rewards: None,
        })
        .collect();
    let task = TaskSpec {
        kind: TaskKind::Category,
        condition_feature: feature.to_string(),
        seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        trials,
    };
    task.validate()?;
    Ok(task)
}

/// Rewards rescaled to [0, 100]; stimuli paired by a seeded random perfect
/// matching, which also randomizes left/right placement.
pub fn make_reward_task(draws: &[StimulusDraw], feature: &str, seed: u64) -> Result<TaskSpec> {
    if draws.len() < 2 || draws.len() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "reward task needs an even number of stimuli, got {}",
            draws.len()
        )));
    }
    let min = draws.iter().map(|d| d.loading).fold(f64::INFINITY, f64::min);
    let max = draws.iter().map(|d| d.loading).fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::Validation("zero loading range".into()));
    }
    let reward = |l: f64| {
        if l == min {
            0.0
        } else if l == max {
            REWARD_MAX
        } else {
            (REWARD_MAX * (l - min) / (max - min)).clamp(0.0, REWARD_MAX)
        }
    };
    let mut order: Vec<usize> = (0..draws.len()).collect();
    order.shuffle(&mut rng_from_seed(child_seed(seed, 1)));
    let trials = order
        .chunks(2)
        .enumerate()
        .map(|(index, pair)| {
            let stimuli: Vec<StimulusDraw> = pair.iter().map(|&i| draws[i].clone()).collect();
            let rewards = stimuli.iter().map(|s| reward(s.loading)).collect();
            Trial {
                index,
                stimuli,
                label: None,
                rewards: Some(rewards),
            }
        })
        .collect();
    let task = TaskSpec {
        kind: TaskKind::Reward,
        condition_feature: feature.to_string(),
        seed,
        rng_algorithm: RNG_ALGORITHM.to_string(),
        trials,
    };
    task.validate()?;
    Ok(task)
}

/// Full generation: 120 binned draws, then the task rule for `kind`.
pub fn generate_task(
    embedding: &EmbeddingMatrix,
    feature: &str,
    kind: TaskKind,
    seed: u64,
) -> Result<TaskSpec> {
    generate_task_with(embedding, feature, kind, seed, STIMULI_PER_TASK)
}

/// [`generate_task`] with an explicit stimulus count (desk-scale variants).
pub fn generate_task_with(
    embedding: &EmbeddingMatrix,
    feature: &str,
    kind: TaskKind,
    seed: u64,
    n_stimuli: usize,
) -> Result<TaskSpec> {
    let draws = sample_stimuli(embedding, feature, n_stimuli, child_seed(seed, 0))?;
    match kind {
        TaskKind::Category => make_category_task(&draws, feature, seed),
        TaskKind::Reward => make_reward_task(&draws, feature, seed),
    }
}
