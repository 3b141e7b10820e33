//! Bayesian ridge regression with a spherical Gaussian weight prior.
//!
//! Prior `w ~ N(0, lambda^-1 I)`, likelihood `r ~ N(Xw, sigma^2 I)`. The
//! posterior-mean prediction at `x` is
//! `(sigma^-2 (sigma^-2 X'X + lambda I)^-1 X'r)' x`. Hyperparameters maximize
//! the log evidence `-1/2 [n log 2 pi + log|K| + r'K^-1 r]` with
//! `K = sigma^2 I + lambda^-1 X X'`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{minimize_bfgs, BfgsOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds on `ln lambda` and `ln sigma` during evidence maximization.
pub const LN_LAMBDA_BOUNDS: (f64, f64) = (-23.0, 23.0);
pub const LN_SIGMA_BOUNDS: (f64, f64) = (-16.0, 16.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesHyperparams {
    pub lambda: f64,
    pub sigma: f64,
    pub log_evidence: f64,
    pub converged: bool,
}

fn check(x: &DMatrix<f64>, r: &DVector<f64>) -> Result<()> {
    if x.nrows() != r.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: r.len(),
        });
    }
    Ok(())
}

/// Posterior mean weights via a Cholesky solve, retrying with diagonal jitter.
pub fn bayes_ridge_weights(
    x: &DMatrix<f64>,
    r: &DVector<f64>,
    lambda: f64,
    sigma: f64,
) -> Result<DVector<f64>> {
    check(x, r)?;
    if !(lambda > 0.0 && sigma > 0.0) {
        return Err(Error::InvalidArgument("lambda and sigma must be positive".into()));
    }
    let prec = 1.0 / (sigma * sigma);
    let p = x.ncols();
    let mut a = x.tr_mul(x) * prec;
    for j in 0..p {
        a[(j, j)] += lambda;
    }
    let rhs = x.tr_mul(r) * prec;
    let scale = (0..p).map(|j| a[(j, j)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut m = a.clone();
        for j in 0..p {
            m[(j, j)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            let w = chol.solve(&rhs);
            if w.iter().all(|v| v.is_finite()) {
                return Ok(w);
            }
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    Err(Error::Numerical("posterior precision is not positive definite".into()))
}

/// Posterior-mean prediction at `x_new`.
pub fn bayes_ridge_predict(
    x: &DMatrix<f64>,
    r: &DVector<f64>,
    x_new: &DVector<f64>,
    lambda: f64,
    sigma: f64,
) -> Result<f64> {
    if x_new.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: x_new.len(),
        });
    }
    Ok(bayes_ridge_weights(x, r, lambda, sigma)?.dot(x_new))
}

/// Log evidence by a direct Cholesky factorization of `K` (n x n).
pub fn log_evidence_direct(x: &DMatrix<f64>, r: &DVector<f64>, lambda: f64, sigma: f64) -> Result<f64> {
    check(x, r)?;
    let n = r.len();
    let mut k = x * x.transpose() / lambda;
    for i in 0..n {
        k[(i, i)] += sigma * sigma;
    }
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::Numerical("evidence covariance not positive definite".into()))?;
    let l = chol.l();
    let log_det: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let quad = r.dot(&chol.solve(r));
    Ok(-0.5 * (n as f64 * LN_2PI + log_det + quad))
}

/// Spectral summary of `X` that makes evidence evaluation O(rank).
#[derive(Debug, Clone)]
pub struct EvidenceModel {
    n: usize,
    /// squared singular values
    s2: Vec<f64>,
    /// squared projections of r onto the left singular vectors
    c2: Vec<f64>,
    /// part of ||r||^2 outside the column space
    residual: f64,
    r_scale: f64,
}

impl EvidenceModel {
    pub fn new(x: &DMatrix<f64>, r: &DVector<f64>) -> Result<Self> {
        check(x, r)?;
        let (n, p) = x.shape();
        let rr = r.norm_squared();
        let mut s2 = Vec::new();
        let mut c2 = Vec::new();
        if n <= p {
            let eig = (x * x.transpose()).symmetric_eigen();
            let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
            for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                if ev > 1e-12 * top && ev > 0.0 {
                    let c = eig.eigenvectors.column(i).dot(r);
                    s2.push(ev);
                    c2.push(c * c);
                }
            }
        } else {
            let eig = x.tr_mul(x).symmetric_eigen();
            let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
            let xr = x.tr_mul(r);
            for (i, &ev) in eig.eigenvalues.iter().enumerate() {
                if ev > 1e-12 * top && ev > 0.0 {
                    let c = eig.eigenvectors.column(i).dot(&xr);
                    s2.push(ev);
                    c2.push(c * c / ev);
                }
            }
        }
        let explained: f64 = c2.iter().sum();
        let residual = (rr - explained).max(0.0);
        let r_scale = if n > 1 { (rr / n as f64).sqrt() } else { rr.sqrt() };
        Ok(Self {
            n,
            s2,
            c2,
            residual,
            r_scale: if r_scale > 0.0 { r_scale } else { 1.0 },
        })
    }

    /// Log evidence and its gradient in `(ln lambda, ln sigma)`.
    pub fn evaluate(&self, ln_lambda: f64, ln_sigma: f64) -> (f64, [f64; 2]) {
        let lambda = ln_lambda.exp();
        let v = (2.0 * ln_sigma).exp();
        let m = self.s2.len();
        let rest = (self.n - m) as f64;
        let mut log_det = rest * v.ln();
        let mut quad = self.residual / v;
        let mut d_lnv = rest - self.residual / v;
        let mut d_lnl = 0.0;
        for (&s2, &c2) in self.s2.iter().zip(&self.c2) {
            let d = v + s2 / lambda;
            log_det += d.ln();
            quad += c2 / d;
            d_lnv += v / d - c2 * v / (d * d);
            let t = s2 / lambda;
            d_lnl += t * (1.0 / d - c2 / (d * d));
        }
        let value = -0.5 * (self.n as f64 * LN_2PI + log_det + quad);
        // d/d ln sigma = 2 d/d ln v
        (value, [0.5 * d_lnl, -d_lnv])
    }

    pub fn log_evidence(&self, lambda: f64, sigma: f64) -> f64 {
        self.evaluate(lambda.ln(), sigma.ln()).0
    }
}

fn clamp_params(z: &DVector<f64>) -> (f64, f64, [bool; 2]) {
    let a = z[0].clamp(LN_LAMBDA_BOUNDS.0, LN_LAMBDA_BOUNDS.1);
    let b = z[1].clamp(LN_SIGMA_BOUNDS.0, LN_SIGMA_BOUNDS.1);
    (a, b, [a != z[0], b != z[1]])
}

/// Maximize the evidence over `(lambda, sigma)` from a fixed 3 x 3 grid of
/// starting points (lambda in {1e-2, 1, 1e2}; sigma in {0.1, 0.5, 1} times
/// the RMS of `r`). Parameters are bounded in log space.
pub fn fit_bayes_hyperparams(x: &DMatrix<f64>, r: &DVector<f64>) -> Result<BayesHyperparams> {
    if r.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "evidence maximization needs at least 2 observations, got {}",
            r.len()
        )));
    }
    let model = EvidenceModel::new(x, r)?;
    let options = BfgsOptions {
        max_iterations: 200,
        gradient_tolerance: 1e-8,
        ..Default::default()
    };
    let mut best: Option<BayesHyperparams> = None;
    for ln_l0 in [(1e-2f64).ln(), 0.0, (1e2f64).ln()] {
        for s_mult in [0.1f64, 0.5, 1.0] {
            let ln_s0 = (s_mult * model.r_scale).ln();
            // minimize -evidence of the box-clamped parameters; gradient is
            // zero along clamped coordinates
            let objective = |z: &DVector<f64>| {
                let (a, b, clamped) = clamp_params(z);
                let (v, g) = model.evaluate(a, b);
                let g = DVector::from_vec(vec![
                    if clamped[0] { 0.0 } else { -g[0] },
                    if clamped[1] { 0.0 } else { -g[1] },
                ]);
                (-v, g)
            };
            let res = minimize_bfgs(objective, DVector::from_vec(vec![ln_l0, ln_s0]), &options);
            let (a, b, _) = clamp_params(&res.x);
            let value = model.evaluate(a, b).0;
            let candidate = BayesHyperparams {
                lambda: a.exp(),
                sigma: b.exp(),
                log_evidence: value,
                converged: res.converged,
            };
            if best.map_or(true, |bst| value > bst.log_evidence) {
                best = Some(candidate);
            }
        }
    }
    let best = best.expect("grid is non-empty");
    if !best.converged {
        log::warn!("evidence maximization did not converge; returning best start");
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn ols_limit_and_hand_case() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let r = DVector::from_vec(vec![1.0, 2.0]);
        let xn = DVector::from_vec(vec![3.0]);
        let ols = bayes_ridge_predict(&x, &r, &xn, 1e-12, 1.0).unwrap();
        assert!((ols - 3.0).abs() < 1e-6);
        let w = bayes_ridge_weights(&x, &r, 1.0, 1.0).unwrap();
        assert!((w[0] - 5.0 / 6.0).abs() < 1e-12);
        let pred = bayes_ridge_predict(&x, &r, &xn, 1.0, 1.0).unwrap();
        assert!((pred - 2.5).abs() < 1e-9);
    }

    #[test]
    fn shrinks_monotonically_in_lambda() {
        let x = gaussian(30, 4, 1);
        let r = &x * DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0]) + DVector::from_element(30, 0.1);
        let xn = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0]);
        let mut prev = f64::INFINITY;
        for k in -2..12 {
            let lambda = 10f64.powi(k);
            let pred = bayes_ridge_predict(&x, &r, &xn, lambda, 1.0).unwrap().abs();
            assert!(pred <= prev + 1e-12);
            prev = pred;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn spectral_evidence_matches_direct() {
        for (n, p, seed) in [(20, 5, 2), (6, 12, 3), (10, 10, 4)] {
            let x = gaussian(n, p, seed);
            let r = gaussian(n, 1, seed + 100).column(0).into_owned();
            let model = EvidenceModel::new(&x, &r).unwrap();
            for (l, s) in [(0.1, 0.5), (1.0, 1.0), (30.0, 2.0)] {
                let a = model.log_evidence(l, s);
                let b = log_evidence_direct(&x, &r, l, s).unwrap();
                assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn evidence_gradient_matches_finite_differences() {
        let x = gaussian(15, 4, 5);
        let r = gaussian(15, 1, 6).column(0).into_owned();
        let model = EvidenceModel::new(&x, &r).unwrap();
        let (a, b) = (0.3, -0.2);
        let (_, g) = model.evaluate(a, b);
        let h = 1e-6;
        let da = (model.evaluate(a + h, b).0 - model.evaluate(a - h, b).0) / (2.0 * h);
        let db = (model.evaluate(a, b + h).0 - model.evaluate(a, b - h).0) / (2.0 * h);
        assert!((da - g[0]).abs() < 1e-6 && (db - g[1]).abs() < 1e-6);
    }

    #[test]
    fn noiseless_single_feature() {
        let x = gaussian(40, 5, 7);
        let r = x.column(2).into_owned();
        let h = fit_bayes_hyperparams(&x, &r).unwrap();
        assert!(h.sigma * h.sigma < 1e-3, "{h:?}");
    }

    #[test]
    fn pure_noise_shrinks_weights() {
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..50 {
            let x = gaussian(50, 5, 1000 + seed);
            let r = gaussian(50, 1, 2000 + seed).column(0).into_owned();
            let h = fit_bayes_hyperparams(&x, &r).unwrap();
            let w = bayes_ridge_weights(&x, &r, h.lambda, h.sigma).unwrap();
            total += w.iter().map(|v| v.abs()).sum::<f64>();
            count += w.len();
        }
        let mean = total / count as f64;
        assert!(mean < 0.1, "{mean}");
    }

    #[test]
    fn optimum_beats_surrounding_grid() {
        let x = gaussian(30, 6, 8);
        let r = &x * DVector::from_vec(vec![0.5, 0.0, -1.0, 0.0, 0.2, 0.0]) + gaussian(30, 1, 9).column(0) * 0.7;
        let h = fit_bayes_hyperparams(&x, &r).unwrap();
        let model = EvidenceModel::new(&x, &r).unwrap();
        let (la, ls) = (h.lambda.ln(), h.sigma.ln());
        for i in 0..20 {
            for j in 0..20 {
                let a = la + (i as f64 - 9.5) * 0.2;
                let b = ls + (j as f64 - 9.5) * 0.2;
                let v = model.evaluate(a, b).0;
                assert!(h.log_evidence >= v - 1e-9, "grid point ({a},{b}) {v} > {}", h.log_evidence);
            }
        }
        let direct = log_evidence_direct(&x, &r, h.lambda, h.sigma).unwrap();
        assert!((direct - h.log_evidence).abs() < 1e-8 * direct.abs());
    }

    #[test]
    fn needs_two_observations() {
        let x = DMatrix::zeros(1, 2);
        let r = DVector::zeros(1);
        assert!(fit_bayes_hyperparams(&x, &r).is_err());
    }
}
