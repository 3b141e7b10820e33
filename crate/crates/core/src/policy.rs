//! Policy models linking learner outputs to choices, scored by
//! leave-one-trial-out cross-validated negative log-likelihood.
//!
//! The policy is a logistic GLMM with the learner's output as the only
//! fixed and the only random (per-participant) predictor, no intercepts.
//! Category: learner p(C = 1) predicts the chosen label. Reward: the
//! right-minus-left value difference predicts choosing right. The predictor
//! is standardized once over all trials.
//!
//! Every choice is held out once. Folds start from the full-data optimum:
//! the fold gradient there is the full gradient with one group's term
//! recomputed, and BFGS seeded with the full-data inverse Hessian takes a
//! Newton step from it and iterates to the same tolerance as a cold fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::ChoiceLog;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::glmm::LaplaceModel;
use crate::learners::rollout::{sequential_rollout, LearnerConfig, LearnerKind, TrajectoryPrediction};
use crate::numeric::{clip_prob, clipped_nll, sigmoid, KahanSum};
use crate::optim::{finite_difference_hessian, minimize_bfgs_from, BfgsOptions, OptimResult};
use crate::task::TaskKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyOptions {
    /// Include the per-participant random slope.
    pub random_effects: bool,
    /// Fraction of folds re-fitted from a cold start to audit warm starts.
    pub audit_rate: f64,
    /// Largest tolerated held-out NLL difference between warm and cold fits.
    pub audit_tolerance: f64,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        Self {
            random_effects: true,
            audit_rate: 0.01,
            audit_tolerance: 1e-4,
        }
    }
}

/// Predictor, response and grouping for the policy model.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyData {
    /// Standardized predictor per choice.
    pub predictor: Vec<f64>,
    pub response: Vec<f64>,
    pub group: Vec<usize>,
    pub participants: Vec<String>,
    pub sessions: Vec<String>,
    pub kind: TaskKind,
}

/// Raw (unstandardized) policy predictor for trial `t` of a trajectory.
pub fn raw_predictor(pred: &TrajectoryPrediction, t: usize) -> Result<f64> {
    let tp = pred
        .trials
        .get(t)
        .ok_or_else(|| Error::Validation(format!("no prediction for trial {t}")))?;
    match pred.task_kind {
        TaskKind::Category => tp
            .p_one
            .ok_or_else(|| Error::Validation(format!("trial {t}: prediction has no probability"))),
        TaskKind::Reward => match tp.values.as_deref() {
            Some([left, right]) => Ok(right - left),
            _ => Err(Error::Validation(format!("trial {t}: prediction needs two value estimates"))),
        },
    }
}

/// Align predictions with recorded choices (trial by trial) and
/// standardize the predictor over all choices.
pub fn policy_data(predictions: &[TrajectoryPrediction], logs: &[ChoiceLog]) -> Result<PolicyData> {
    if predictions.len() != logs.len() {
        return Err(Error::DimensionMismatch {
            expected: logs.len(),
            got: predictions.len(),
        });
    }
    let kind = logs
        .first()
        .map(|l| l.kind())
        .ok_or_else(|| Error::InsufficientData("no choice logs".into()))?;
    let mut raw = Vec::new();
    let mut response = Vec::new();
    let mut group = Vec::new();
    for (g, (pred, log)) in predictions.iter().zip(logs).enumerate() {
        if log.kind() != kind || pred.task_kind != kind {
            return Err(Error::Validation(format!(
                "log {} mixes task kinds in one comparison",
                log.session_id
            )));
        }
        for rec in &log.records {
            raw.push(raw_predictor(pred, rec.trial).map_err(|e| e.at_trial(rec.trial))?);
            response.push(if rec.choice == 1 { 1.0 } else { 0.0 });
            group.push(g);
        }
    }
    if raw.is_empty() {
        return Err(Error::InsufficientData("logs contain no choices".into()));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().copied().collect::<KahanSum>().total() / n;
    let ss = raw.iter().map(|v| (v - mean) * (v - mean)).collect::<KahanSum>().total();
    let sd = if raw.len() > 1 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    let constant = sd <= 1e-12 * mean.abs().max(1e-300);
    let predictor = raw
        .iter()
        .map(|v| if constant { 0.0 } else { (v - mean) / sd })
        .collect();
    Ok(PolicyData {
        predictor,
        response,
        group,
        participants: logs.iter().map(|l| l.participant_id.clone()).collect(),
        sessions: logs.iter().map(|l| l.session_id.clone()).collect(),
        kind,
    })
}

impl PolicyData {
    pub fn model(&self, random_effects: bool) -> Result<LaplaceModel> {
        let n = self.predictor.len();
        let x = DMatrix::from_column_slice(n, 1, &self.predictor);
        let z = if random_effects { x.clone() } else { DMatrix::zeros(n, 0) };
        LaplaceModel::new(x, z, self.response.clone(), &self.group)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Fitted,
    /// Random effects dropped (failed fit or single-class training set).
    Fallback,
    /// Scored at chance after every fit failed.
    Chance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub p_one: f64,
    pub nll: f64,
    pub params: DVector<f64>,
    pub status: FoldStatus,
}

/// Below this random-effect sd, folds are fit over the signed sd rather than its log.
pub const WARM_SD_FLOOR: f64 = 0.1;

const LIFT_SDS: [f64; 5] = [0.01, 0.03, 0.1, 0.3, 1.0];

/// Below this sd a variance is taken as zero unless the fit is stuck there.
const NEGLIGIBLE_SD: f64 = 1e-3;

/// Full-data fit plus what folds need to start from it.
pub struct LooEngine<'a> {
    model: &'a LaplaceModel,
    fixed: LaplaceModel,
    x: DVector<f64>,
    cache: Vec<DVector<f64>>,
    value: f64,
    group_terms: Vec<(f64, DVector<f64>)>,
    gradient: DVector<f64>,
    inverse_hessian: DMatrix<f64>,
    options: BfgsOptions,
    n_ones: usize,
    /// False when the full-data fit failed; folds then use the fixed-only model.
    pub full_converged: bool,
}

impl<'a> LooEngine<'a> {
    pub fn new(model: &'a LaplaceModel, fixed: LaplaceModel) -> Result<Self> {
        let options = model.bfgs_options();
        let mut cache = model.empty_cache();
        let start = model.start(&DVector::zeros(model.p), 0.5);
        let res = model.optimize(start, None, &mut cache, &options);
        let res = model.newton_polish(res, None, &mut cache, &options);
        let x = res.x.clone();
        let mut group_terms = Vec::with_capacity(model.groups.len());
        let mut gradient = DVector::zeros(model.n_params());
        let mut value = KahanSum::new();
        for j in 0..model.groups.len() {
            let t = model.group_terms(j, &x, None, Some(&cache[j]))?;
            value.add(t.value);
            gradient += &t.gradient;
            group_terms.push((t.value, t.gradient));
        }
        let mut hcache = cache.clone();
        let hess = finite_difference_hessian(|p| model.objective(p, None, &mut hcache).1, &x, 1e-5);
        let hess = (&hess + hess.transpose()) * 0.5;
        let inverse_hessian = match hess.cholesky() {
            Some(ch) => ch.inverse(),
            None => res.inverse_hessian.clone(),
        };
        if !res.converged {
            log::warn!("policy model did not converge on the full data; folds start cold");
        }
        let n_ones = model.groups.iter().flat_map(|g| &g.y).filter(|v| **v == 1.0).count();
        Ok(Self {
            model,
            fixed,
            x,
            cache,
            value: value.total(),
            group_terms,
            gradient,
            inverse_hessian,
            options,
            n_ones,
            full_converged: res.converged,
        })
    }

    pub fn full_params(&self) -> &DVector<f64> {
        &self.x
    }

    fn predict(&self, model: &LaplaceModel, params: &DVector<f64>, j: usize, i: usize, u: &DVector<f64>) -> f64 {
        let blk = &model.groups[j];
        let mut eta = 0.0;
        for k in 0..model.p {
            eta += blk.x[(i, k)] * params[k];
        }
        if model.q > 0 {
            let b = model.lower_factor(params) * u;
            for k in 0..model.q {
                eta += blk.z[(i, k)] * b[k];
            }
        }
        sigmoid(eta)
    }

    /// Held-out fit for row `i` of group `j`, warm-started from the full fit.
    pub fn fold(&self, j: usize, i: usize) -> FoldOutcome {
        let y = self.model.groups[j].y[i];
        let remaining_ones = self.n_ones - (y == 1.0) as usize;
        let n_train = self.model.n_obs - 1;
        if remaining_ones == 0 || remaining_ones == n_train {
            // single-class training set: intercept-only frequency
            let p_one = clip_prob(remaining_ones as f64 / n_train.max(1) as f64);
            return FoldOutcome {
                p_one,
                nll: clipped_nll(p_one, y == 1.0),
                params: DVector::zeros(0),
                status: FoldStatus::Fallback,
            };
        }
        if self.full_converged {
            if let Some(out) = self.warm_fold(j, i) {
                return out;
            }
        }
        if let Some(out) = self.cold_fold(j, i) {
            return out;
        }
        self.fallback_fold(j, i)
    }

    fn warm_fold(&self, j: usize, i: usize) -> Option<FoldOutcome> {
        let model = self.model;
        let skip = Some((j, i));
        let t = model.group_terms(j, &self.x, Some(i), Some(&self.cache[j])).ok()?;
        let (full_v, full_g) = &self.group_terms[j];
        let value = self.value - full_v + t.value;
        let mut grad = -(&self.gradient - full_g + &t.gradient);
        let (_, flags) = model.clamp(&self.x);
        for (k, f) in flags.iter().enumerate() {
            if *f {
                grad[k] = 0.0;
            }
        }
        let mut cache = self.cache.clone();
        cache[j] = t.u_hat.clone();
        let options = BfgsOptions {
            initial_inverse_hessian: Some(self.inverse_hessian.clone()),
            ..self.options.clone()
        };
        // the log-sd gradient vanishes like sd^2, so near zero variance the
        // fit runs over the signed sd
        let floor = WARM_SD_FLOOR.ln();
        let small: Vec<usize> = (0..model.theta_len())
            .filter(|&k| model.is_log_sd(k) && self.x[model.p + k] < floor)
            .collect();
        let mut res = if small.is_empty() {
            minimize_bfgs_from(|p| model.objective(p, skip, &mut cache), self.x.clone(), -value, grad, &options)
        } else {
            self.minimize_signed_sd(&small, &self.x, -value, grad, skip, &mut cache, &options)
        };
        if !res.converged {
            return None;
        }
        if let Some(alt) = self.refine_small_sd(&res, skip, &cache) {
            (res, cache) = alt;
        }
        let (params, _) = model.clamp(&res.x);
        let u = model.group_terms(j, &params, Some(i), Some(&cache[j])).ok()?.u_hat;
        let p_one = self.predict(model, &params, j, i, &u);
        Some(FoldOutcome {
            p_one,
            nll: clipped_nll(p_one, model.groups[j].y[i] == 1.0),
            params,
            status: FoldStatus::Fitted,
        })
    }

    /// Refit of a result that ended below [`WARM_SD_FLOOR`], over the signed
    /// sd instead of its log. A result stuck at zero while the objective
    /// still falls with the variance restarts from the best of a few lifted
    /// sds.
    fn refine_small_sd(
        &self,
        res: &OptimResult,
        skip: Option<(usize, usize)>,
        cache: &[DVector<f64>],
    ) -> Option<(OptimResult, Vec<DVector<f64>>)> {
        let model = self.model;
        let score = model.zero_variance_score(&res.x, skip);
        let (_, clamped) = model.clamp(&res.x);
        let floor = WARM_SD_FLOOR.ln();
        let small: Vec<usize> = (0..model.theta_len())
            .filter(|&k| model.is_log_sd(k) && res.x[model.p + k] < floor && !(clamped[model.p + k] && score[k] <= 0.0))
            .collect();
        if small.is_empty() {
            return None;
        }
        let tolerance = self.options.gradient_tolerance / (2.0 * WARM_SD_FLOOR * WARM_SD_FLOOR);
        let stuck = small.iter().any(|&k| {
            let t = res.x[model.p + k];
            let slope = if clamped[model.p + k] { -score[k] } else { res.gradient[model.p + k] / (2.0 * (2.0 * t).exp()) };
            slope < -tolerance
        });
        let mut cache = cache.to_vec();
        let (mut f0, mut g0, mut x0) = (res.value, res.gradient.clone(), res.x.clone());
        if stuck {
            for sd in LIFT_SDS {
                let mut x = res.x.clone();
                for &k in &small {
                    x[model.p + k] = sd.ln();
                }
                let (f, g) = model.objective(&x, skip, &mut cache);
                if f < f0 {
                    (f0, g0, x0) = (f, g, x);
                }
            }
        }
        let negligible = !stuck && small.iter().all(|&k| res.x[model.p + k] < NEGLIGIBLE_SD.ln());
        let signed_amax = small.iter().map(|&k| (g0[model.p + k] / x0[model.p + k].exp()).abs()).fold(g0.amax(), f64::max);
        if negligible || signed_amax <= self.options.gradient_tolerance {
            return None;
        }
        let alt = self.minimize_signed_sd(&small, &x0, f0, g0, skip, &mut cache, &self.options);
        (alt.converged && alt.value <= res.value).then_some((alt, cache))
    }

    /// BFGS over `x` with the log-sd coordinates `coords` replaced by the
    /// signed sd. The objective is even in each, so the sign is dropped on
    /// return. An initial metric in `options` is carried over to the new
    /// coordinates.
    #[allow(clippy::too_many_arguments)]
    fn minimize_signed_sd(
        &self,
        coords: &[usize],
        x0: &DVector<f64>,
        f0: f64,
        mut g0: DVector<f64>,
        skip: Option<(usize, usize)>,
        cache: &mut [DVector<f64>],
        options: &BfgsOptions,
    ) -> OptimResult {
        let model = self.model;
        let mut y0 = x0.clone();
        let mut scale = DVector::from_element(x0.len(), 1.0);
        for &k in coords {
            let sd = x0[model.p + k].exp();
            y0[model.p + k] = sd;
            g0[model.p + k] /= sd;
            scale[model.p + k] = sd;
        }
        let to_log = |y: &DVector<f64>| {
            let mut x = y.clone();
            for &k in coords {
                x[model.p + k] = y[model.p + k].abs().max(f64::MIN_POSITIVE).ln();
            }
            x
        };
        let options = BfgsOptions {
            initial_inverse_hessian: options
                .initial_inverse_hessian
                .as_ref()
                .map(|m| DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| scale[a] * m[(a, b)] * scale[b])),
            ..options.clone()
        };
        let mut res = minimize_bfgs_from(
            |y| {
                let (f, mut g) = model.objective(&to_log(y), skip, cache);
                for &k in coords {
                    let s = y[model.p + k];
                    g[model.p + k] = if s == 0.0 { 0.0 } else { g[model.p + k] / s };
                }
                (f, g)
            },
            y0,
            f0,
            g0,
            &options,
        );
        for &k in coords {
            res.gradient[model.p + k] *= res.x[model.p + k];
        }
        res.x = to_log(&res.x);
        res
    }

    /// Fixed-effects-only fit of the fold; chance if that fails too.
    fn fallback_fold(&self, j: usize, i: usize) -> FoldOutcome {
        let y = self.model.groups[j].y[i] == 1.0;
        let model = &self.fixed;
        let mut cache = model.empty_cache();
        let res = model.optimize(DVector::zeros(model.n_params()), Some((j, i)), &mut cache, &model.bfgs_options());
        if res.converged {
            let p_one = self.predict(model, &res.x, j, i, &DVector::zeros(0));
            FoldOutcome {
                p_one,
                nll: clipped_nll(p_one, y),
                params: res.x,
                status: FoldStatus::Fallback,
            }
        } else {
            log::warn!("fold ({j}, {i}) failed; scored at chance");
            FoldOutcome {
                p_one: 0.5,
                nll: std::f64::consts::LN_2,
                params: DVector::zeros(0),
                status: FoldStatus::Chance,
            }
        }
    }

    /// Cold-start fit of the same fold, for audits.
    pub fn cold_fold(&self, j: usize, i: usize) -> Option<FoldOutcome> {
        let model = self.model;
        let mut cache = model.empty_cache();
        let start = model.start(&DVector::zeros(model.p), 0.5);
        let res = model.optimize(start, Some((j, i)), &mut cache, &self.options);
        if !res.converged {
            return None;
        }
        let p_one = self.predict(model, &res.x, j, i, &cache[j]);
        Some(FoldOutcome {
            p_one,
            nll: clipped_nll(p_one, model.groups[j].y[i] == 1.0),
            params: res.x,
            status: FoldStatus::Fitted,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantNll {
    pub participant_id: String,
    pub session_id: String,
    pub nll: f64,
    pub n_choices: usize,
    pub fallback_folds: usize,
    pub chance_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllScore {
    pub representation: String,
    pub learner: LearnerKind,
    pub task_kind: TaskKind,
    pub total_nll: f64,
    pub n_choices: usize,
    /// `n_choices * ln 2`.
    pub chance_nll: f64,
    pub per_participant: Vec<ParticipantNll>,
    pub fallback_folds: usize,
    pub chance_folds: usize,
    pub audited_folds: usize,
    pub audit_max_abs_diff: f64,
    /// Full-data policy slope (standardized predictor).
    pub policy_slope: f64,
    /// Held-out p(response = 1) per choice, in log order.
    #[serde(skip)]
    pub heldout_p: Vec<f64>,
}

/// Leave-one-trial-out NLL of the policy model over all participants.
pub fn loo_cv_nll(predictions: &[TrajectoryPrediction], logs: &[ChoiceLog], options: &PolicyOptions) -> Result<NllScore> {
    let data = policy_data(predictions, logs)?;
    let learner = predictions.first().map_or(LearnerKind::LogisticL2, |p| p.learner);
    score_policy(&data, learner, options)
}

pub fn score_policy(data: &PolicyData, learner: LearnerKind, options: &PolicyOptions) -> Result<NllScore> {
    let model = data.model(options.random_effects)?;
    let fixed = data.model(false)?;
    let engine = LooEngine::new(&model, fixed)?;
    let stride = if options.audit_rate > 0.0 {
        (1.0 / options.audit_rate).round().max(1.0) as usize
    } else {
        usize::MAX
    };
    let n = data.predictor.len();
    let mut heldout_p = vec![0.0; n];
    let mut fold_nll = vec![0.0; n];
    let mut status = vec![FoldStatus::Fitted; n];
    let mut audited = 0;
    let mut audit_max: f64 = 0.0;
    let mut fold_index = 0;
    for (j, blk) in model.groups.iter().enumerate() {
        for (i, &row) in blk.rows.iter().enumerate() {
            let out = engine.fold(j, i);
            if fold_index % stride == 0 && out.status == FoldStatus::Fitted {
                if let Some(cold) = engine.cold_fold(j, i) {
                    audited += 1;
                    let diff = (cold.nll - out.nll).abs();
                    audit_max = audit_max.max(diff);
                    if diff > options.audit_tolerance {
                        log::warn!("warm/cold fold mismatch {diff:.3e} at group {j} row {i}");
                    }
                }
            }
            heldout_p[row] = out.p_one;
            fold_nll[row] = out.nll;
            status[row] = out.status;
            fold_index += 1;
        }
    }
    let mut per_participant: Vec<ParticipantNll> = data
        .participants
        .iter()
        .zip(&data.sessions)
        .map(|(p, s)| ParticipantNll {
            participant_id: p.clone(),
            session_id: s.clone(),
            nll: 0.0,
            n_choices: 0,
            fallback_folds: 0,
            chance_folds: 0,
        })
        .collect();
    let mut sums: Vec<KahanSum> = vec![KahanSum::new(); per_participant.len()];
    for row in 0..n {
        let g = data.group[row];
        sums[g].add(fold_nll[row]);
        let pp = &mut per_participant[g];
        pp.n_choices += 1;
        match status[row] {
            FoldStatus::Fallback => pp.fallback_folds += 1,
            FoldStatus::Chance => pp.chance_folds += 1,
            FoldStatus::Fitted => {}
        }
    }
    for (pp, s) in per_participant.iter_mut().zip(&sums) {
        pp.nll = s.total();
    }
    Ok(NllScore {
        representation: String::new(),
        learner,
        task_kind: data.kind,
        total_nll: fold_nll.iter().copied().collect::<KahanSum>().total(),
        n_choices: n,
        chance_nll: n as f64 * std::f64::consts::LN_2,
        fallback_folds: status.iter().filter(|s| **s == FoldStatus::Fallback).count(),
        chance_folds: status.iter().filter(|s| **s == FoldStatus::Chance).count(),
        per_participant,
        audited_folds: audited,
        audit_max_abs_diff: audit_max,
        policy_slope: engine.full_params()[0],
        heldout_p,
    })
}

/// Roll each participant's learner over every representation and rank the
/// representations by total held-out NLL (ascending; ties by name).
pub fn compare_representations(
    representations: &[(String, EmbeddingMatrix)],
    logs: &[ChoiceLog],
    config: &LearnerConfig,
    options: &PolicyOptions,
) -> Result<Vec<NllScore>> {
    if representations.is_empty() {
        return Err(Error::InvalidArgument("no representations to compare".into()));
    }
    let scores = representations
        .par_iter()
        .map(|(name, rep)| score_representation(name, rep, logs, config, options))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_scores(scores))
}

/// Rollouts of one representation for every log, then its LOO score.
pub fn score_representation(
    name: &str,
    rep: &EmbeddingMatrix,
    logs: &[ChoiceLog],
    config: &LearnerConfig,
    options: &PolicyOptions,
) -> Result<NllScore> {
    let preds = logs
        .iter()
        .map(|log| {
            sequential_rollout(&log.task, rep, config).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("session {}: {m}", log.session_id)),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_representation(name))?;
    score_predictions(name, &preds, logs, options)
}

/// LOO score for precomputed trajectories, labelled with `name`.
pub fn score_predictions(
    name: &str,
    predictions: &[TrajectoryPrediction],
    logs: &[ChoiceLog],
    options: &PolicyOptions,
) -> Result<NllScore> {
    let mut score = loo_cv_nll(predictions, logs, options).map_err(|e| e.in_representation(name))?;
    score.representation = name.to_string();
    Ok(score)
}

/// Ascending by total NLL, ties by name.
pub fn rank_scores(mut scores: Vec<NllScore>) -> Vec<NllScore> {
    scores.sort_by(|a, b| {
        a.total_nll
            .total_cmp(&b.total_nll)
            .then_with(|| a.representation.cmp(&b.representation))
    });
    scores
}

/// Ranked table: one row per representation.
pub fn scores_to_csv(scores: &[NllScore]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "rank",
        "representation",
        "learner",
        "task_kind",
        "total_nll",
        "chance_nll",
        "n_choices",
        "policy_slope",
        "fallback_folds",
        "chance_folds",
    ])?;
    for (rank, s) in scores.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            s.representation.clone(),
            s.learner.to_string(),
            s.task_kind.to_string(),
            format!("{:?}", s.total_nll),
            format!("{:?}", s.chance_nll),
            s.n_choices.to_string(),
            format!("{:?}", s.policy_slope),
            s.fallback_folds.to_string(),
            s.chance_folds.to_string(),
        ])?;
    }
    finish_csv(w)
}

/// Long table: one row per representation and participant.
pub fn participants_to_csv(scores: &[NllScore]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["representation", "participant_id", "session_id", "nll", "n_choices", "fallback_folds", "chance_folds"])?;
    for s in scores {
        for p in &s.per_participant {
            w.write_record([
                s.representation.clone(),
                p.participant_id.clone(),
                p.session_id.clone(),
                format!("{:?}", p.nll),
                p.n_choices.to_string(),
                p.fallback_folds.to_string(),
                p.chance_folds.to_string(),
            ])?;
        }
    }
    finish_csv(w)
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn synthetic(groups: usize, per: usize, slope: f64, sd: f64, seed: u64) -> PolicyData {
        let mut rng = rng_from_seed(seed);
        let mut predictor = Vec::new();
        let mut response = Vec::new();
        let mut group = Vec::new();
        for g in 0..groups {
            let b = slope + sd * rng.sample::<f64, _>(StandardNormal);
            for _ in 0..per {
                let x: f64 = rng.sample(StandardNormal);
                predictor.push(x);
                response.push(if rng.random::<f64>() < sigmoid(b * x) { 1.0 } else { 0.0 });
                group.push(g);
            }
        }
        PolicyData {
            predictor,
            response,
            group,
            participants: (0..groups).map(|g| format!("p{g}")).collect(),
            sessions: (0..groups).map(|g| format!("s{g}")).collect(),
            kind: TaskKind::Category,
        }
    }

    // slope and random-slope sd agree (the log-sd is flat near sd = 0)
    fn same_fit(a: &DVector<f64>, b: &DVector<f64>) -> bool {
        (a[0] - b[0]).abs() < 1e-4 && (a[1].exp() - b[1].exp()).abs() < 1e-3
    }

    #[test]
    fn warm_folds_match_cold_fits() {
        let data = synthetic(6, 30, 1.2, 0.5, 1);
        let model = data.model(true).unwrap();
        let engine = LooEngine::new(&model, data.model(false).unwrap()).unwrap();
        for (j, i) in [(0, 0), (2, 7), (5, 29), (3, 14)] {
            let warm = engine.fold(j, i);
            let cold = engine.cold_fold(j, i).unwrap();
            assert_eq!(warm.status, FoldStatus::Fitted);
            assert!(same_fit(&warm.params, &cold.params), "{} vs {}", warm.params, cold.params);
            assert!((warm.nll - cold.nll).abs() < 1e-6);
        }
    }

    #[test]
    fn heldout_response_does_not_enter_its_fold() {
        let data = synthetic(5, 24, 1.0, 0.4, 2);
        let row = 37;
        let mut flipped = data.clone();
        flipped.response[row] = 1.0 - flipped.response[row];
        let (m1, m2) = (data.model(true).unwrap(), flipped.model(true).unwrap());
        let e1 = LooEngine::new(&m1, data.model(false).unwrap()).unwrap();
        let e2 = LooEngine::new(&m2, flipped.model(false).unwrap()).unwrap();
        let (j, i) = (data.group[row], m1.groups[data.group[row]].rows.iter().position(|&r| r == row).unwrap());
        let f1 = e1.fold(j, i);
        let f2 = e2.fold(j, i);
        assert!(same_fit(&f1.params, &f2.params));
        assert!((f1.p_one - f2.p_one).abs() < 1e-6);
    }

    #[test]
    fn constant_predictor_scores_chance() {
        for n in [60usize, 120, 480] {
            let groups = n / 60;
            let mut data = synthetic(groups.max(2), n / groups.max(2), 0.0, 0.0, 3);
            data.predictor.iter_mut().for_each(|v| *v = 0.0);
            let score = score_policy(&data, LearnerKind::LogisticL2, &PolicyOptions::default()).unwrap();
            assert!((score.total_nll - score.chance_nll).abs() < 1e-6 * n as f64);
        }
    }

    #[test]
    fn informative_predictor_beats_chance_and_totals_add_up() {
        let data = synthetic(4, 60, 2.0, 0.3, 4);
        let score = score_policy(&data, LearnerKind::LogisticL2, &PolicyOptions::default()).unwrap();
        assert!(score.total_nll < 0.8 * score.chance_nll);
        let sum: f64 = score.per_participant.iter().map(|p| p.nll).sum();
        assert!((sum - score.total_nll).abs() < 1e-9);
        assert_eq!(score.chance_folds, 0);
        assert!(score.audited_folds >= 2);
        assert!(score.audit_max_abs_diff < 1e-4);
    }

    #[test]
    fn single_class_folds_fall_back() {
        let mut data = synthetic(2, 10, 1.0, 0.0, 5);
        data.response.iter_mut().for_each(|v| *v = 1.0);
        data.response[3] = 0.0;
        let score = score_policy(&data, LearnerKind::LogisticL2, &PolicyOptions::default()).unwrap();
        assert!(score.fallback_folds >= 1);
        assert!(score.total_nll.is_finite());
    }

    #[test]
    fn csv_exports_have_one_row_per_entry() {
        let data = synthetic(3, 20, 1.0, 0.2, 6);
        let mut score = score_policy(&data, LearnerKind::LogisticL2, &PolicyOptions::default()).unwrap();
        score.representation = "rep".into();
        let table = scores_to_csv(std::slice::from_ref(&score)).unwrap();
        assert_eq!(table.lines().count(), 2);
        assert!(table.lines().nth(1).unwrap().starts_with("1,rep,logistic_l2,category,"));
        let long = participants_to_csv(&[score]).unwrap();
        assert_eq!(long.lines().count(), 4);
    }
}
