//! Per-participant choice logs, shared by the session server, the
//! simulator and the model-comparison pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{TaskKind, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Completed,
    Abandoned,
}

/// A stimulus as displayed: position 0 is left (or centre for a single
/// stimulus), 1 is right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShownStimulus {
    pub stimulus_id: String,
    pub position: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub trial: usize,
    pub stimuli: Vec<ShownStimulus>,
    pub response_key: String,
    /// Category task: chosen category label. Reward task: chosen option
    /// index (0 left, 1 right).
    pub choice: usize,
    pub correct: bool,
    /// Reward of the chosen option (reward task only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    pub response_time_ms: f64,
    /// Server receive time, ISO-8601 UTC.
    pub received_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLog {
    pub session_id: String,
    pub participant_id: String,
    pub status: SessionStatus,
    pub task: TaskSpec,
    pub records: Vec<ChoiceRecord>,
}

/// RFC 3339 with millisecond precision and a `Z` suffix.
pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ChoiceRecord {
    /// Build the record for `choice` on `trial` of `task`, deriving
    /// correctness and the obtained reward from the ground truth.
    pub fn from_task(
        task: &TaskSpec,
        trial: usize,
        choice: usize,
        response_key: &str,
        response_time_ms: f64,
        received_at: String,
    ) -> Result<Self> {
        let t = task
            .trials
            .get(trial)
            .ok_or_else(|| Error::Validation(format!("trial {trial} is outside the task")))?;
        let options = match task.kind {
            TaskKind::Category => 2,
            TaskKind::Reward => t.stimuli.len(),
        };
        if choice >= options {
            return Err(Error::Validation(format!(
                "trial {trial}: choice {choice} is not among the {options} options"
            )));
        }
        let reward = match task.kind {
            TaskKind::Category => None,
            TaskKind::Reward => Some(t.reward_values()?[choice]),
        };
        Ok(Self {
            trial,
            stimuli: t
                .stimuli
                .iter()
                .enumerate()
                .map(|(position, s)| ShownStimulus {
                    stimulus_id: s.stimulus_id.clone(),
                    position,
                    image_ref: s.image_ref.clone(),
                })
                .collect(),
            response_key: response_key.to_string(),
            choice,
            correct: choice == t.best_option()?,
            reward,
            response_time_ms,
            received_at,
        })
    }
}

impl ChoiceLog {
    pub fn new(session_id: &str, participant_id: &str, task: TaskSpec) -> Self {
        Self {
            session_id: session_id.to_string(),
            participant_id: participant_id.to_string(),
            status: SessionStatus::Active,
            task,
            records: Vec::new(),
        }
    }

    pub fn kind(&self) -> TaskKind {
        self.task.kind
    }

    /// Binary response used by the policy model: the chosen category
    /// label (category) or "chose right" (reward).
    pub fn responses(&self) -> Vec<f64> {
        self.records.iter().map(|r| if r.choice == 1 { 1.0 } else { 0.0 }).collect()
    }

    pub fn correctness(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.correct).collect()
    }

    /// Gapless increasing trial indices from 0, records consistent with
    /// the embedded task, and a status matching completeness.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let ctx = |m: String| Error::Validation(format!("log {}: {m}", self.session_id));
        if self.records.len() > self.task.trials.len() {
            return Err(ctx(format!(
                "{} records for a {}-trial task",
                self.records.len(),
                self.task.trials.len()
            )));
        }
        for (i, rec) in self.records.iter().enumerate() {
            if rec.trial != i {
                return Err(ctx(format!("record {i} has trial index {} (expected {i})", rec.trial)));
            }
            let trial = &self.task.trials[i];
            let shown: Vec<&str> = rec.stimuli.iter().map(|s| s.stimulus_id.as_str()).collect();
            let expected: Vec<&str> = trial.stimuli.iter().map(|s| s.stimulus_id.as_str()).collect();
            if shown != expected {
                return Err(ctx(format!("trial {i}: presented stimuli differ from the task")));
            }
            let options = match self.task.kind {
                TaskKind::Category => 2,
                TaskKind::Reward => trial.stimuli.len(),
            };
            if rec.choice >= options {
                return Err(ctx(format!("trial {i}: choice {} not among presented options", rec.choice)));
            }
            if rec.correct != (rec.choice == trial.best_option()?) {
                return Err(ctx(format!("trial {i}: correctness flag disagrees with the task")));
            }
        }
        let complete = self.records.len() == self.task.trials.len();
        match self.status {
            SessionStatus::Completed if !complete => Err(ctx("completed log is missing trials".into())),
            SessionStatus::Active | SessionStatus::Abandoned if complete && !self.records.is_empty() => {
                Err(ctx("log has every trial but is not marked completed".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let log: ChoiceLog = serde_json::from_str(text)?;
        log.validate()?;
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                location: path.display().to_string(),
                message: j.to_string(),
            },
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Load one log file, or every `*.json` log in a directory (sorted by
/// file name).
pub fn load_logs(path: &Path) -> Result<Vec<ChoiceLog>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files.iter().map(|p| ChoiceLog::load(p)).collect()
    } else {
        Ok(vec![ChoiceLog::load(path)?])
    }
}
