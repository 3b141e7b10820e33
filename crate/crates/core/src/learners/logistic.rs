//! Penalized logistic regression without intercept.
//!
//! Loss: `-sum_i [y_i log h(x_i) + (1 - y_i) log(1 - h(x_i))] + alpha * penalty(beta)`
//! with `penalty = ||beta||^2` (L2) or `||beta||_1` (L1). L2 uses damped
//! Newton steps (Woodbury form when there are fewer rows than features);
//! L1 uses IRLS outer steps with cyclic coordinate descent on the weighted
//! least-squares subproblem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log1p_exp, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    L2,
    L1,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticOptions {
    /// Converged when the (minimum-norm sub)gradient infinity-norm is below this.
    pub gradient_tolerance: f64,
    /// Stop when an accepted step moves beta by less than this (infinity-norm).
    pub step_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-12,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub beta: DVector<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `beta` is then the best iterate.
    pub converged: bool,
}

/// `1 / (1 + exp(-beta' x))`.
pub fn logistic_predict(beta: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
    if beta.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: beta.len(),
            got: x.len(),
        });
    }
    Ok(sigmoid(beta.dot(x)))
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], alpha: f64) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument("labels must be 0 or 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// Cross-entropy (the smooth data term).
pub fn cross_entropy(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| log1p_exp(e) - yi * e)
        .sum()
}

/// Gradient of [`cross_entropy`]: `X' (mu - y)`.
pub fn cross_entropy_gradient(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> DVector<f64> {
    let eta = x * beta;
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&e, &yi)| sigmoid(e) - yi));
    x.tr_mul(&resid)
}

/// Full penalized objective.
pub fn logistic_objective(
    x: &DMatrix<f64>,
    y: &[f64],
    beta: &DVector<f64>,
    alpha: f64,
    penalty: Penalty,
) -> f64 {
    let pen = match penalty {
        Penalty::L2 => beta.norm_squared(),
        Penalty::L1 => beta.iter().map(|b| b.abs()).sum(),
    };
    cross_entropy(x, y, beta) + alpha * pen
}

/// Gradient of the L2 objective.
pub fn l2_objective_gradient(
    x: &DMatrix<f64>,
    y: &[f64],
    beta: &DVector<f64>,
    alpha: f64,
) -> DVector<f64> {
    cross_entropy_gradient(x, y, beta) + beta * (2.0 * alpha)
}

/// Minimum-norm subgradient of the L1 objective.
pub fn l1_min_subgradient(
    x: &DMatrix<f64>,
    y: &[f64],
    beta: &DVector<f64>,
    alpha: f64,
) -> DVector<f64> {
    let g = cross_entropy_gradient(x, y, beta);
    DVector::from_iterator(
        g.len(),
        g.iter().zip(beta.iter()).map(|(&gj, &bj)| {
            if bj > 0.0 {
                gj + alpha
            } else if bj < 0.0 {
                gj - alpha
            } else {
                let m = gj.abs() - alpha;
                if m > 0.0 { m * gj.signum() } else { 0.0 }
            }
        }),
    )
}

/// Fit with the requested penalty, optionally from a warm start.
///
/// Both objectives are strictly convex (L2) or convex (L1); a warm start
/// changes the path but not the optimum the tolerance certifies.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    alpha: f64,
    penalty: Penalty,
    options: &LogisticOptions,
    warm_start: Option<&DVector<f64>>,
) -> Result<LogisticFit> {
    check_inputs(x, y, alpha)?;
    let start = match warm_start {
        Some(b) if b.len() == x.ncols() => b.clone(),
        _ => DVector::zeros(x.ncols()),
    };
    match penalty {
        Penalty::L2 => fit_l2(x, y, alpha, options, start),
        Penalty::L1 => fit_l1(x, y, alpha, options, start),
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// In-place Cholesky of the upper triangle of a row-major `n×n` matrix
/// (the lower factor is stored transposed), then solves `A x = b` in `b`.
fn cholesky_solve(a: &mut [f64], n: usize, b: &mut [f64]) -> bool {
    // right-looking: row j of U is finalized, then rows below are updated
    for j in 0..n {
        let d = a[j * n + j];
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for v in &mut a[j * n + j + 1..(j + 1) * n] {
            *v /= d;
        }
        let (done, rest) = a.split_at_mut((j + 1) * n);
        let uj = &done[j * n..];
        for k in j + 1..n {
            let f = uj[k];
            if f != 0.0 {
                let row = &mut rest[(k - j - 1) * n..(k - j) * n];
                for (r, u) in row[k..].iter_mut().zip(&uj[k..]) {
                    *r -= f * u;
                }
            }
        }
    }
    // U' z = b, then U x = z, with U[k][j] = a[k*n + j] for k <= j
    for j in 0..n {
        let mut v = b[j];
        for k in 0..j {
            v -= a[k * n + j] * b[k];
        }
        b[j] = v / a[j * n + j];
    }
    for j in (0..n).rev() {
        let mut v = b[j];
        for k in j + 1..n {
            v -= a[j * n + k] * b[k];
        }
        b[j] = v / a[j * n + j];
    }
    true
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Objective of the L2 problem from the linear predictor.
fn l2_value(eta: &[f64], y: &[f64], beta: &[f64], alpha: f64) -> f64 {
    let data: f64 = eta.iter().zip(y).map(|(&e, &yi)| log1p_exp(e) - yi * e).sum();
    data + alpha * dot(beta, beta)
}

fn fit_l2(
    x: &DMatrix<f64>,
    y: &[f64],
    alpha: f64,
    options: &LogisticOptions,
    start: DVector<f64>,
) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    let ridge = 2.0 * alpha;
    // row-major copy: row i is xr[i*p..(i+1)*p]
    let xr: Vec<f64> = (0..n).flat_map(|i| (0..p).map(move |j| x[(i, j)])).collect();
    let row = |i: usize| &xr[i * p..(i + 1) * p];
    let woodbury = n < p;
    let gram: Vec<f64> = if woodbury {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                k[i * n + j] = dot(row(i), row(j));
            }
        }
        k
    } else {
        Vec::new()
    };
    let mut beta: Vec<f64> = start.iter().copied().collect();
    let mut eta: Vec<f64> = (0..n).map(|i| dot(row(i), &beta)).collect();
    let mut mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
    let gradient = |mu: &[f64], beta: &[f64]| -> Vec<f64> {
        let mut g: Vec<f64> = beta.iter().map(|b| ridge * b).collect();
        for i in 0..n {
            let r = mu[i] - y[i];
            if r != 0.0 {
                for (gj, xj) in g.iter_mut().zip(row(i)) {
                    *gj += r * xj;
                }
            }
        }
        g
    };
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut objective = l2_value(&eta, y, &beta, alpha);
    let mut grad = gradient(&mu, &beta);
    let mut gnorm = inf(&grad);
    let mut iterations = 0;
    let mut h = vec![0.0; if woodbury { n * n } else { p * p }];
    while gnorm > options.gradient_tolerance && iterations < options.max_iterations {
        iterations += 1;
        let w: Vec<f64> = mu.iter().map(|&m| (m * (1.0 - m)).max(1e-12)).collect();
        let mut step = grad.clone();
        let solved = if woodbury {
            // (X'WX + rI)^-1 g = (g - X'(r W^-1 + X X')^-1 X g) / r
            h.copy_from_slice(&gram);
            for i in 0..n {
                h[i * n + i] += ridge / w[i];
            }
            let mut xg: Vec<f64> = (0..n).map(|i| dot(row(i), &grad)).collect();
            let ok = cholesky_solve(&mut h, n, &mut xg);
            for i in 0..n {
                for (sj, xj) in step.iter_mut().zip(row(i)) {
                    *sj -= xg[i] * xj;
                }
            }
            for sj in step.iter_mut() {
                *sj /= ridge;
            }
            ok
        } else {
            h.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let xi = row(i);
                for j in 0..p {
                    let a = w[i] * xi[j];
                    let hj = &mut h[j * p + j..(j + 1) * p];
                    for (hk, xk) in hj.iter_mut().zip(&xi[j..]) {
                        *hk += a * xk;
                    }
                }
            }
            for j in 0..p {
                h[j * p + j] += ridge;
            }
            cholesky_solve(&mut h, p, &mut step)
        };
        if !solved {
            return Err(Error::Numerical("logistic Hessian not positive definite".into()));
        }
        // backtracking on the true objective along X step
        let xs: Vec<f64> = (0..n).map(|i| dot(row(i), &step)).collect();
        let slope = dot(&grad, &step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b - t * s).collect();
            let cand_eta: Vec<f64> = eta.iter().zip(&xs).map(|(e, s)| e - t * s).collect();
            let obj = l2_value(&cand_eta, y, &cand, alpha);
            if obj <= objective - 1e-4 * t * slope {
                let moved = t * inf(&step);
                beta = cand;
                eta = cand_eta;
                objective = obj;
                accepted = moved > options.step_tolerance;
                break;
            }
            t *= 0.5;
        }
        mu = eta.iter().map(|&e| sigmoid(e)).collect();
        grad = gradient(&mu, &beta);
        gnorm = inf(&grad);
        if !accepted {
            break;
        }
    }
    // recompute from beta so the reported state carries no drift from the
    // incremental eta updates
    let beta = DVector::from_vec(beta);
    let objective = logistic_objective(x, y, &beta, alpha, Penalty::L2);
    let gnorm = inf_norm(&l2_objective_gradient(x, y, &beta, alpha));
    Ok(LogisticFit {
        beta,
        objective,
        gradient_norm: gnorm,
        iterations,
        converged: gnorm <= options.gradient_tolerance,
    })
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

fn fit_l1(
    x: &DMatrix<f64>,
    y: &[f64],
    alpha: f64,
    options: &LogisticOptions,
    mut beta: DVector<f64>,
) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    let mut objective = logistic_objective(x, y, &beta, alpha, Penalty::L1);
    let mut sub = l1_min_subgradient(x, y, &beta, alpha);
    let mut gnorm = inf_norm(&sub);
    let mut iterations = 0;
    while gnorm > options.gradient_tolerance && iterations < options.max_iterations {
        iterations += 1;
        let eta = x * &beta;
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let m = sigmoid(eta[i]);
            w[i] = (m * (1.0 - m)).max(1e-10);
            z[i] = eta[i] + (y[i] - m) / w[i];
        }
        // coordinate descent on 0.5 sum w (z - X b)^2 + alpha |b|_1
        let col_w: Vec<f64> = (0..p)
            .map(|j| (0..n).map(|i| w[i] * x[(i, j)] * x[(i, j)]).sum())
            .collect();
        let mut b = beta.clone();
        let mut resid: Vec<f64> = (0..n).map(|i| z[i] - eta[i]).collect();
        for _sweep in 0..1000 {
            let mut max_delta: f64 = 0.0;
            for j in 0..p {
                if col_w[j] <= 0.0 {
                    if b[j] != 0.0 {
                        b[j] = 0.0;
                    }
                    continue;
                }
                let old = b[j];
                let rho: f64 = (0..n).map(|i| w[i] * x[(i, j)] * resid[i]).sum::<f64>() + col_w[j] * old;
                let new = soft_threshold(rho, alpha) / col_w[j];
                if new != old {
                    let d = new - old;
                    for i in 0..n {
                        resid[i] -= d * x[(i, j)];
                    }
                    b[j] = new;
                    max_delta = max_delta.max(d.abs());
                }
            }
            if max_delta < 1e-13 {
                break;
            }
        }
        let direction = &b - &beta;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let candidate = &beta + &direction * t;
            let obj = logistic_objective(x, y, &candidate, alpha, Penalty::L1);
            if obj <= objective {
                let moved = inf_norm(&(&candidate - &beta));
                beta = candidate;
                objective = obj;
                accepted = moved > options.step_tolerance;
                break;
            }
            t *= 0.5;
        }
        sub = l1_min_subgradient(x, y, &beta, alpha);
        gnorm = inf_norm(&sub);
        if !accepted {
            break;
        }
    }
    Ok(LogisticFit {
        beta,
        objective,
        gradient_norm: gnorm,
        iterations,
        converged: gnorm <= options.gradient_tolerance,
    })
}
