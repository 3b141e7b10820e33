//! Sequential linear learners and the per-trial rollout that drives them.

pub mod ard;
pub mod bayes;
pub mod logistic;
pub mod rollout;

pub use ard::{ard_fit, ArdFit, ArdOptions};
pub use bayes::{bayes_ridge_predict, bayes_ridge_weights, fit_bayes_hyperparams, BayesHyperparams};
pub use logistic::{fit_logistic, logistic_predict, LogisticFit, LogisticOptions, Penalty};
pub use rollout::{
    grid_search_alpha, sequential_rollout, LearnerConfig, LearnerKind, TrajectoryPrediction,
    TrialPrediction,
};
