//! Synthetic participants: a sequential learner over one representation
//! drives a softmax-with-lapse choice policy.
//!
//! Both tasks reveal full feedback (the category label, both rewards), so
//! the learner's trajectory does not depend on the agent's own choices and
//! a participant is one rollout plus sampled decisions.

use chrono::{DateTime, Duration, Utc};
use nalgebra::DMatrix;
use rayon::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::choice::{format_timestamp, ChoiceLog, ChoiceRecord, SessionStatus};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::learners::{sequential_rollout, LearnerConfig, TrajectoryPrediction, TrialPrediction};
use crate::numeric::sigmoid;
use crate::policy::{rank_scores, score_predictions, score_representation, NllScore, PolicyOptions};
use crate::rng::{child_seed, rng_from_seed, Rng};
use crate::task::{generate_task, TaskKind, TaskSpec};

/// Keys recorded for the left (option 0) and right (option 1) response.
pub const RESPONSE_KEYS: [&str; 2] = ["f", "j"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub representation: String,
    pub learner: LearnerConfig,
    /// Softmax temperature; `f64::INFINITY` gives uniform choices.
    pub temperature: f64,
    #[serde(default)]
    pub greedy: bool,
    #[serde(default)]
    pub lapse: f64,
    pub seed: u64,
}

impl AgentConfig {
    pub fn new(representation: &str, kind: TaskKind, seed: u64) -> Self {
        Self {
            representation: representation.to_string(),
            learner: LearnerConfig::for_task(kind),
            temperature: default_temperature(kind),
            greedy: false,
            lapse: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.greedy && !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.lapse) {
            return Err(Error::InvalidArgument(format!("lapse rate {} outside [0, 1]", self.lapse)));
        }
        self.learner.validate()
    }
}

/// Temperatures that leave visible choice noise at each task's value scale
/// (probabilities in [0, 1] vs rewards in [0, 100]).
pub fn default_temperature(kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Category => 0.25,
        TaskKind::Reward => 10.0,
    }
}

/// Probability of choosing option 1 under the agent's policy, lapse included.
pub fn choice_probability(kind: TaskKind, pred: &TrialPrediction, agent: &AgentConfig) -> Result<f64> {
    let advantage = match kind {
        TaskKind::Category => {
            let p = pred
                .p_one
                .ok_or_else(|| Error::Validation(format!("trial {} has no class probability", pred.trial)))?;
            p - (1.0 - p)
        }
        TaskKind::Reward => match pred.values.as_deref() {
            Some([left, right]) => right - left,
            _ => return Err(Error::Validation(format!("trial {} lacks two value estimates", pred.trial))),
        },
    };
    let p = if agent.greedy {
        if pred.model_choice == 1 { 1.0 } else { 0.0 }
    } else if agent.temperature.is_infinite() {
        0.5
    } else {
        sigmoid(advantage / agent.temperature)
    };
    Ok((1.0 - agent.lapse) * p + agent.lapse * 0.5)
}

pub fn sample_choice(p_one: f64, rng: &mut Rng) -> usize {
    usize::from(rng.random::<f64>() < p_one)
}

fn start_time() -> DateTime<Utc> {
    DateTime::<Utc>::UNIX_EPOCH
}

/// Choice log for an agent given its learner trajectory. Timestamps are
/// synthetic (one second per trial from the Unix epoch) so logs are
/// reproducible byte for byte.
pub fn simulate_from_prediction(
    task: &TaskSpec,
    pred: &TrajectoryPrediction,
    agent: &AgentConfig,
    session_id: &str,
    participant_id: &str,
) -> Result<ChoiceLog> {
    agent.validate()?;
    if pred.trials.len() != task.trials.len() {
        return Err(Error::DimensionMismatch {
            expected: task.trials.len(),
            got: pred.trials.len(),
        });
    }
    let mut rng = rng_from_seed(child_seed(agent.seed, 1));
    let mut log = ChoiceLog::new(session_id, participant_id, task.clone());
    for (t, tp) in pred.trials.iter().enumerate() {
        let choice = sample_choice(choice_probability(task.kind, tp, agent)?, &mut rng);
        let at = format_timestamp(start_time() + Duration::seconds(t as i64 + 1));
        log.records
            .push(ChoiceRecord::from_task(task, t, choice, RESPONSE_KEYS[choice], 0.0, at)?);
    }
    log.status = SessionStatus::Completed;
    Ok(log)
}

/// Roll the agent's learner over `rep` and sample its choices.
pub fn simulate_participant(task: &TaskSpec, rep: &EmbeddingMatrix, agent: &AgentConfig) -> Result<ChoiceLog> {
    let (log, _) = simulate_with_trajectory(task, rep, agent, &format!("sim-{}", agent.seed), &format!("agent-{}", agent.seed))?;
    Ok(log)
}

pub fn simulate_with_trajectory(
    task: &TaskSpec,
    rep: &EmbeddingMatrix,
    agent: &AgentConfig,
    session_id: &str,
    participant_id: &str,
) -> Result<(ChoiceLog, TrajectoryPrediction)> {
    agent.validate()?;
    let pred = sequential_rollout(task, rep, &agent.learner).map_err(|e| e.in_representation(&agent.representation))?;
    let log = simulate_from_prediction(task, &pred, agent, session_id, participant_id)?;
    Ok((log, pred))
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

/// Independent standard Gaussian representations over shared stimulus ids
/// `s000…`. Pairwise CKA concentrates near `n_features / n_stimuli`.
pub fn synthetic_candidates(
    n_stimuli: usize,
    n_features: usize,
    n_candidates: usize,
    seed: u64,
) -> Result<Vec<(String, EmbeddingMatrix)>> {
    let stimuli = ids("s", n_stimuli);
    (0..n_candidates)
        .map(|c| {
            let mut rng = rng_from_seed(child_seed(seed, c as u64));
            let values = gaussian_matrix(n_stimuli, n_features, &mut rng);
            let features = (0..n_features).map(|j| format!("f{j}")).collect();
            let emb = EmbeddingMatrix::new(stimuli.clone(), features, values)?;
            Ok((format!("rep{c}"), emb))
        })
        .collect()
}

/// Randomly rotated copy of `rep` with additive Gaussian noise, for graded
/// similarity to an original.
pub fn perturbed_copy(rep: &EmbeddingMatrix, noise_sd: f64, seed: u64) -> Result<EmbeddingMatrix> {
    let mut rng = rng_from_seed(seed);
    let p = rep.n_features();
    let q = gaussian_matrix(p, p, &mut rng).qr().q();
    let noise = gaussian_matrix(rep.n_stimuli(), p, &mut rng) * noise_sd;
    EmbeddingMatrix::new(
        rep.stimulus_ids().to_vec(),
        rep.feature_names().to_vec(),
        rep.values() * q + noise,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub task_kind: TaskKind,
    pub learner: LearnerConfig,
    pub temperature: f64,
    pub greedy: bool,
    pub lapse: f64,
    pub seed: u64,
    pub policy: PolicyOptions,
}

impl RecoveryConfig {
    pub fn new(kind: TaskKind, seed: u64) -> Self {
        Self {
            task_kind: kind,
            learner: LearnerConfig::for_task(kind),
            temperature: default_temperature(kind),
            greedy: false,
            lapse: 0.0,
            seed,
            policy: PolicyOptions::default(),
        }
    }

    fn agent(&self, representation: &str, seed: u64) -> AgentConfig {
        AgentConfig {
            representation: representation.to_string(),
            learner: self.learner.clone(),
            temperature: self.temperature,
            greedy: self.greedy,
            lapse: self.lapse,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub generating: String,
    /// 1-based position of the generating representation in the ranking.
    pub rank: usize,
    /// Ranked scores (ascending total NLL).
    pub scores: Vec<NllScore>,
    /// `(representation, total NLL − generating total NLL)` for the others.
    pub margins: Vec<(String, f64)>,
}

impl RecoveryReport {
    pub fn recovered(&self) -> bool {
        self.rank == 1
    }

    pub fn min_margin(&self) -> Option<f64> {
        self.margins.iter().map(|m| m.1).min_by(f64::total_cmp)
    }

    pub fn mean_margin(&self) -> Option<f64> {
        (!self.margins.is_empty()).then(|| self.margins.iter().map(|m| m.1).sum::<f64>() / self.margins.len() as f64)
    }
}

/// Agents whose tasks are built on successive features of the generating
/// representation, each learning over that representation.
pub fn simulate_agents(
    generating: &(String, EmbeddingMatrix),
    n_agents: usize,
    config: &RecoveryConfig,
) -> Result<Vec<ChoiceLog>> {
    Ok(simulate_agents_with_trajectories(generating, n_agents, config)?
        .into_iter()
        .map(|(log, _)| log)
        .collect())
}

fn simulate_agents_with_trajectories(
    generating: &(String, EmbeddingMatrix),
    n_agents: usize,
    config: &RecoveryConfig,
) -> Result<Vec<(ChoiceLog, TrajectoryPrediction)>> {
    let (name, rep) = generating;
    let features = rep.feature_names();
    let width = n_agents.to_string().len();
    (0..n_agents)
        .into_par_iter()
        .map(|a| {
            let seed = child_seed(config.seed, a as u64);
            let feature = &features[a % features.len()];
            let task = generate_task(rep, feature, config.task_kind, child_seed(seed, 0))?;
            let agent = config.agent(name, seed);
            simulate_with_trajectory(&task, rep, &agent, &format!("sim-{a:0width$}"), &format!("agent-{a:0width$}"))
        })
        .collect()
}

/// Simulate `n_agents` from `generating`, score every candidate and report
/// where the generating representation lands. The generating
/// representation is scored on the trajectories that drove the agents.
pub fn recovery_experiment(
    generating: &str,
    candidates: &[(String, EmbeddingMatrix)],
    n_agents: usize,
    config: &RecoveryConfig,
) -> Result<RecoveryReport> {
    let gen = candidates
        .iter()
        .find(|(n, _)| n == generating)
        .ok_or_else(|| Error::InvalidArgument(format!("generating representation '{generating}' is not a candidate")))?;
    if n_agents == 0 {
        return Err(Error::InvalidArgument("need at least one agent".into()));
    }
    let (logs, preds): (Vec<_>, Vec<_>) = simulate_agents_with_trajectories(gen, n_agents, config)?.into_iter().unzip();
    let scores = candidates
        .par_iter()
        .map(|(name, rep)| {
            if name == generating {
                score_predictions(name, &preds, &logs, &config.policy)
            } else {
                score_representation(name, rep, &logs, &config.learner, &config.policy)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = rank_scores(scores);
    let pos = scores.iter().position(|s| s.representation == generating).expect("generating rep scored");
    let base = scores[pos].total_nll;
    let margins = scores
        .iter()
        .filter(|s| s.representation != generating)
        .map(|s| (s.representation.clone(), s.total_nll - base))
        .collect();
    Ok(RecoveryReport {
        generating: generating.to_string(),
        rank: pos + 1,
        scores,
        margins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rsa::pairwise_cka;

    fn one_rep(seed: u64) -> (String, EmbeddingMatrix) {
        synthetic_candidates(200, 10, 1, seed).unwrap().remove(0)
    }

    #[test]
    fn pure_lapse_is_at_chance() {
        let (name, rep) = one_rep(1);
        let mut hits = 0usize;
        let mut total = 0usize;
        for s in 0..17u64 {
            let task = generate_task(&rep, "f0", TaskKind::Category, s).unwrap();
            let mut agent = AgentConfig::new(&name, TaskKind::Category, s);
            agent.lapse = 1.0;
            let log = simulate_participant(&task, &rep, &agent).unwrap();
            hits += log.records.iter().filter(|r| r.correct).count();
            total += log.records.len();
        }
        assert!(total >= 2000);
        let acc = hits as f64 / total as f64;
        assert!((acc - 0.5).abs() < 0.03, "{acc}");
    }

    #[test]
    fn greedy_agent_learns_generating_feature() {
        let (_, rep) = one_rep(2);
        let column = DMatrix::from_column_slice(200, 1, &rep.feature_column("f3").unwrap());
        let feature = EmbeddingMatrix::new(rep.stimulus_ids().to_vec(), vec!["f3".into()], column).unwrap();
        let mut accs = Vec::new();
        for s in 0..20u64 {
            let task = generate_task(&rep, "f3", TaskKind::Category, s).unwrap();
            let mut agent = AgentConfig::new("f3", TaskKind::Category, s);
            agent.greedy = true;
            let log = simulate_participant(&task, &feature, &agent).unwrap();
            let last = &log.records[80..];
            let acc = last.iter().filter(|r| r.correct).count() as f64 / last.len() as f64;
            assert!(acc >= 0.85, "seed {s}: {acc}");
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!(mean >= 0.95, "{mean}");
    }

    #[test]
    fn simulation_is_deterministic_and_valid() {
        let (name, rep) = one_rep(3);
        let task = generate_task(&rep, "f1", TaskKind::Reward, 4).unwrap();
        let agent = AgentConfig::new(&name, TaskKind::Reward, 9);
        let a = simulate_participant(&task, &rep, &agent).unwrap();
        let b = simulate_participant(&task, &rep, &agent).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        a.validate().unwrap();
        assert_eq!(a.records.len(), 60);
        assert_eq!(a.status, SessionStatus::Completed);
        assert_eq!(ChoiceLog::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn agent_validation() {
        let mut a = AgentConfig::new("r", TaskKind::Category, 0);
        a.temperature = 0.0;
        assert!(a.validate().is_err());
        a.greedy = true;
        a.validate().unwrap();
        a.lapse = 1.5;
        assert!(a.validate().is_err());
    }

    #[test]
    fn candidates_are_dissimilar_and_copies_graded() {
        let c = synthetic_candidates(300, 50, 4, 5).unwrap();
        let m = pairwise_cka(&c).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(m.values[i][j] < 0.3, "{}", m.values[i][j]);
                }
            }
        }
        let near = perturbed_copy(&c[0].1, 0.1, 1).unwrap();
        let far = perturbed_copy(&c[0].1, 2.0, 1).unwrap();
        let cka = |e: &EmbeddingMatrix| crate::rsa::linear_cka(c[0].1.values(), e.values()).unwrap();
        assert!(cka(&near) > cka(&far));
    }

    #[test]
    fn single_candidate_ranks_first() {
        let c = synthetic_candidates(150, 5, 1, 6).unwrap();
        let cfg = RecoveryConfig::new(TaskKind::Reward, 1);
        let r = recovery_experiment("rep0", &c, 2, &cfg).unwrap();
        assert_eq!(r.rank, 1);
        assert!(r.margins.is_empty());
        assert!(recovery_experiment("nope", &c, 2, &cfg).is_err());
    }
}
