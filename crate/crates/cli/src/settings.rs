//! Flags and config-file keys. Every flag has a config key of the same
//! name (dashes become underscores); flags override the file.

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::Args;
use repscope::learners::LearnerKind;
use repscope::task::TaskKind;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// JSON config file; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Embedding file (.csv or binary): the generating or fitted representation.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    /// JSON manifest of named representation files.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Choice log file, or a directory of them.
    #[arg(long)]
    pub logs: Option<PathBuf>,
    /// Explicit task JSON.
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Scores JSON written by `compare` (stats: feature-count correlation).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Stimulus id -> image path manifest (serve).
    #[arg(long)]
    pub image_manifest: Option<PathBuf>,
    /// Comprehension questions as a JSON object of id -> expected answer (serve).
    #[arg(long)]
    pub comprehension: Option<PathBuf>,

    #[arg(long)]
    pub feature: Option<String>,
    #[arg(long)]
    pub task_kind: Option<TaskKind>,
    /// Trials per generated task.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learner: Option<LearnerKind>,
    /// Comma-separated penalty grid.
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    /// Project representations onto this many principal components.
    #[arg(long)]
    pub pca_k: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub serve_addr: Option<SocketAddr>,

    /// Simulated agents.
    #[arg(long)]
    pub agents: Option<usize>,
    /// Softmax temperature of simulated agents.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Lapse probability of simulated agents.
    #[arg(long)]
    pub lapse: Option<f64>,
    /// Simulated agents always take the learner's choice.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub greedy: Option<bool>,
    /// Generating representation for `recover` (a manifest name).
    #[arg(long)]
    pub generating: Option<String>,
    /// Synthetic candidates for `recover` without a manifest.
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Per-participant random slope in the policy model.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random_effects: Option<bool>,
    /// rsa: representation the others are compared against.
    #[arg(long)]
    pub anchor: Option<String>,
    /// rsa: comma-separated reference representations.
    #[arg(long, value_delimiter = ',')]
    pub references: Option<Vec<String>>,
    /// stats: significance level of the per-trial tests.
    #[arg(long)]
    pub onset_alpha: Option<f64>,

    #[arg(long)]
    pub bonus_base: Option<f64>,
    #[arg(long)]
    pub bonus_per_correct: Option<f64>,
    #[arg(long)]
    pub bonus_per_point: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub require_comprehension: Option<bool>,
}

fn to_map(s: &Settings) -> Map<String, Value> {
    match serde_json::to_value(s).expect("settings serialize") {
        Value::Object(m) => m.into_iter().filter(|(_, v)| !v.is_null()).collect(),
        _ => Map::new(),
    }
}

impl Settings {
    /// Merge a config file (if any) under the command-line values.
    pub fn resolve(self) -> Result<Self, CliError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Settings = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let mut merged = to_map(&file);
        merged.extend(to_map(&self));
        let mut out: Settings = serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        out.config = Some(path);
        Ok(out)
    }

    /// Reject keys the subcommand does not use.
    pub fn check_allowed(&self, subcommand: &str, allowed: &[&str]) -> Result<(), CliError> {
        let extra: Vec<String> = to_map(self)
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .map(|k| format!("--{}", k.replace('_', "-")))
            .collect();
        if extra.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("{subcommand} does not take {}", extra.join(", "))))
        }
    }

    pub fn out(&self) -> Result<PathBuf, CliError> {
        self.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))
    }
}

/// Fetch a required value or fail with a usage error naming the flag.
pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value.clone().ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}
