//! Wire types and the in-memory session state rebuilt from the event log.

use std::collections::BTreeMap;

use repscope::choice::{ChoiceLog, ChoiceRecord, SessionStatus};
use repscope::task::{TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

/// Category feedback display time.
pub const CATEGORY_FEEDBACK_MS: u64 = 2000;
/// Reward display time.
pub const REWARD_FEEDBACK_MS: u64 = 1500;
/// Blank screen after the reward display.
pub const REWARD_ITI_MS: u64 = 1000;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGeneration {
    pub kind: TaskKind,
    pub feature: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub n_stimuli: Option<usize>,
}

/// Body of `POST /sessions`: exactly one of `task` and `generate`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub participant_id: String,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub generate: Option<TaskGeneration>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitChoice {
    pub trial: usize,
    pub choice: usize,
    #[serde(default)]
    pub response_key: Option<String>,
    pub response_time_ms: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComprehensionAnswers {
    #[serde(default)]
    pub answers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComprehensionResult {
    pub passed: bool,
    pub failed: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Consent {
    pub use_data: bool,
}

/// Feedback returned after a choice. Stored verbatim so that replays are
/// byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub trial: usize,
    pub choice: usize,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    pub feedback_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iti_ms: Option<u64>,
    pub bonus: f64,
    pub next_trial: Option<usize>,
    pub completed: bool,
}

/// Linear estimated-payment formula shown to participants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BonusFormula {
    pub base: f64,
    pub per_correct: f64,
    pub per_reward_point: f64,
}

impl Default for BonusFormula {
    fn default() -> Self {
        Self {
            base: 0.0,
            per_correct: 0.02,
            per_reward_point: 0.0005,
        }
    }
}

impl BonusFormula {
    pub fn evaluate(&self, records: &[ChoiceRecord]) -> f64 {
        let correct = records.iter().filter(|r| r.correct).count() as f64;
        let points: f64 = records.iter().filter_map(|r| r.reward).sum();
        self.base + self.per_correct * correct + self.per_reward_point * points
    }
}

/// Question id -> expected answer. An empty check passes any submission.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComprehensionCheck(pub BTreeMap<String, String>);

impl ComprehensionCheck {
    pub fn grade(&self, answers: &BTreeMap<String, String>) -> ComprehensionResult {
        let failed: Vec<String> = self
            .0
            .iter()
            .filter(|(q, expected)| answers.get(*q).map(|a| a.trim()) != Some(expected.trim()))
            .map(|(q, _)| q.clone())
            .collect();
        ComprehensionResult {
            passed: failed.is_empty(),
            failed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        participant_id: String,
        task: TaskSpec,
        at: String,
    },
    Comprehension {
        at: String,
    },
    Choice {
        record: ChoiceRecord,
        feedback: Feedback,
    },
    Consent {
        use_data: bool,
        at: String,
    },
    Abandoned {
        at: String,
    },
}

#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: String,
    pub participant_id: String,
    pub task: TaskSpec,
    pub status: SessionStatus,
    pub created_at: String,
    pub updated_at: String,
    pub comprehension_passed: bool,
    pub data_use_consent: Option<bool>,
    pub records: Vec<ChoiceRecord>,
    pub feedback: Vec<Feedback>,
}

impl Session {
    pub fn current_trial(&self) -> usize {
        self.records.len()
    }

    pub fn n_trials(&self) -> usize {
        self.task.trials.len()
    }

    /// Start a session from its creation event.
    pub fn from_created(event: &Event) -> Option<Self> {
        let Event::Created {
            session_id,
            participant_id,
            task,
            at,
        } = event
        else {
            return None;
        };
        Some(Self {
            session_id: session_id.clone(),
            participant_id: participant_id.clone(),
            task: task.clone(),
            status: if task.trials.is_empty() {
                SessionStatus::Completed
            } else {
                SessionStatus::Active
            },
            created_at: at.clone(),
            updated_at: at.clone(),
            comprehension_passed: false,
            data_use_consent: None,
            records: Vec::new(),
            feedback: Vec::new(),
        })
    }

    /// Apply a later event. Returns false (leaving the session untouched)
    /// for events that do not fit the current state, such as a repeated
    /// choice record.
    pub fn apply(&mut self, event: Event) -> bool {
        match event {
            Event::Created { .. } => return false,
            Event::Comprehension { at } => {
                self.comprehension_passed = true;
                self.updated_at = at;
            }
            Event::Choice { record, feedback } => {
                if self.status != SessionStatus::Active
                    || record.trial != self.current_trial()
                    || feedback.trial != record.trial
                {
                    return false;
                }
                self.updated_at = record.received_at.clone();
                self.records.push(record);
                self.feedback.push(feedback);
                if self.current_trial() == self.n_trials() {
                    self.status = SessionStatus::Completed;
                }
            }
            Event::Consent { use_data, at } => {
                self.data_use_consent = Some(use_data);
                self.updated_at = at;
            }
            Event::Abandoned { at } => {
                if self.status != SessionStatus::Active {
                    return false;
                }
                self.status = SessionStatus::Abandoned;
                self.updated_at = at;
            }
        }
        true
    }

    pub fn export(&self) -> ChoiceLog {
        ChoiceLog {
            session_id: self.session_id.clone(),
            participant_id: self.participant_id.clone(),
            status: self.status,
            task: self.task.clone(),
            records: self.records.clone(),
        }
    }

    pub fn view(&self, bonus: &BonusFormula) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            participant_id: self.participant_id.clone(),
            kind: self.task.kind,
            n_trials: self.n_trials(),
            current_trial: self.current_trial(),
            status: self.status,
            comprehension_passed: self.comprehension_passed,
            data_use_consent: self.data_use_consent,
            bonus: bonus.evaluate(&self.records),
            created_at: self.created_at.clone(),
            updated_at: self.updated_at.clone(),
        }
    }
}

/// Public session summary; carries no ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub participant_id: String,
    pub kind: TaskKind,
    pub n_trials: usize,
    pub current_trial: usize,
    pub status: SessionStatus,
    pub comprehension_passed: bool,
    pub data_use_consent: Option<bool>,
    pub bonus: f64,
    pub created_at: String,
    pub updated_at: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct StimulusPayload {
    pub position: usize,
    pub stimulus_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_url: Option<String>,
}

/// What the client needs to show one trial: stimuli and positions only.
#[derive(Debug, Clone, Serialize)]
pub struct TrialPayload {
    pub session_id: String,
    pub kind: TaskKind,
    pub trial: usize,
    pub n_trials: usize,
    pub stimuli: Vec<StimulusPayload>,
    pub response_keys: [&'static str; 2],
    pub bonus: f64,
}
