//! Logistic mixed-effects models fitted by the Laplace approximation.
//!
//! Random effects for group `j` are `b_j = L u_j` with `u_j ~ N(0, I)` and
//! `L` lower triangular in log-Cholesky form (log diagonal, raw
//! off-diagonal). For each group the conditional mode `u_hat` is found by
//! Newton's method and the marginal likelihood is approximated by
//!
//! `F_j = l_j(u_hat) - u_hat'u_hat / 2 - log det(A'WA + I) / 2`, `A = Z_j L`.
//!
//! The gradient of `F = sum_j F_j` with respect to `(beta, theta)` is exact
//! (implicit differentiation through `u_hat`), and the outer problem is
//! solved by BFGS.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::numeric::{log1p_exp, sigmoid, KahanSum};
use crate::optim::{finite_difference_hessian, minimize_bfgs_from, BfgsOptions};

/// Bounds on log-diagonal entries of the random-effects factor.
pub const LOG_SD_BOUNDS: (f64, f64) = (-12.0, 5.0);
const OFFDIAG_BOUND: f64 = 50.0;
/// A random-effect standard deviation below this is reported as a boundary fit.
pub const BOUNDARY_SD: f64 = 1e-4;

/// Named numeric and factor columns of equal length.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignTable {
    n_rows: usize,
    numeric: BTreeMap<String, Vec<f64>>,
    factors: BTreeMap<String, Vec<String>>,
}

impl DesignTable {
    pub fn new(n_rows: usize) -> Self {
        Self {
            n_rows,
            ..Default::default()
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn add_numeric(&mut self, name: &str, values: Vec<f64>) -> Result<&mut Self> {
        self.check_len(name, values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("column {name:?} row {i}: missing or non-finite value")));
        }
        self.numeric.insert(name.to_string(), values);
        Ok(self)
    }

    pub fn add_factor(&mut self, name: &str, values: Vec<String>) -> Result<&mut Self> {
        self.check_len(name, values.len())?;
        if let Some(i) = values.iter().position(|v| v.is_empty()) {
            return Err(Error::Validation(format!("column {name:?} row {i}: missing level")));
        }
        self.factors.insert(name.to_string(), values);
        Ok(self)
    }

    fn check_len(&self, name: &str, len: usize) -> Result<()> {
        if len != self.n_rows {
            return Err(Error::Validation(format!(
                "column {name:?} has {len} rows, table has {}",
                self.n_rows
            )));
        }
        if self.numeric.contains_key(name) || self.factors.contains_key(name) {
            return Err(Error::Validation(format!("duplicate column {name:?}")));
        }
        Ok(())
    }

    pub fn numeric(&self, name: &str) -> Option<&[f64]> {
        self.numeric.get(name).map(Vec::as_slice)
    }

    pub fn factor(&self, name: &str) -> Option<&[String]> {
        self.factors.get(name).map(Vec::as_slice)
    }
}

/// Model formula: `response ~ [1 +] fixed + ([1 +] random | group)`.
/// Terms are column names; `a:b` is the product of columns, and factor
/// columns expand to treatment-coded dummies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmSpec {
    pub response: String,
    pub fixed_effects: Vec<String>,
    pub fixed_intercept: bool,
    pub random_effects: Vec<String>,
    pub random_intercept: bool,
    pub group: String,
    pub standardize_predictors: bool,
}

impl GlmmSpec {
    /// Intercept-only model with a random intercept.
    pub fn new(response: &str, group: &str) -> Self {
        Self {
            response: response.to_string(),
            fixed_effects: Vec::new(),
            fixed_intercept: true,
            random_effects: Vec::new(),
            random_intercept: true,
            group: group.to_string(),
            standardize_predictors: false,
        }
    }

    pub fn fixed(mut self, terms: &[&str]) -> Self {
        self.fixed_effects = terms.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn random(mut self, terms: &[&str]) -> Self {
        self.random_effects = terms.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn without_intercepts(mut self) -> Self {
        self.fixed_intercept = false;
        self.random_intercept = false;
        self
    }

    pub fn without_random_intercept(mut self) -> Self {
        self.random_intercept = false;
        self
    }

    pub fn standardized(mut self, yes: bool) -> Self {
        self.standardize_predictors = yes;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub name: String,
    pub mean: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmmFit {
    pub fixed: Vec<Coefficient>,
    pub random_names: Vec<String>,
    /// Lower-triangular factor `L` (rows), covariance `L L'`.
    pub random_factor: Vec<Vec<f64>>,
    pub random_covariance: Vec<Vec<f64>>,
    /// Laplace-approximated marginal log-likelihood.
    pub log_likelihood: f64,
    pub n_obs: usize,
    pub n_groups: usize,
    pub group_levels: Vec<String>,
    /// Conditional modes `b_j = L u_hat_j` per group.
    pub conditional_modes: Vec<Vec<f64>>,
    pub converged: bool,
    /// Some random-effect standard deviation is at (or near) zero.
    pub boundary: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub objective_trace: Vec<f64>,
    pub scaling: Vec<ColumnScaling>,
    /// Fitted probabilities in input row order.
    #[serde(skip)]
    pub fitted: Vec<f64>,
}

impl GlmmFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.fixed.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One group's rows.
#[derive(Debug, Clone)]
pub struct GroupBlock {
    pub rows: Vec<usize>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: Vec<f64>,
}

/// Per-group Laplace contribution.
#[derive(Debug, Clone)]
pub struct GroupTerms {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub u_hat: DVector<f64>,
}

/// Response, designs and grouping ready for evaluation.
#[derive(Debug, Clone)]
pub struct LaplaceModel {
    pub p: usize,
    pub q: usize,
    pub groups: Vec<GroupBlock>,
    pub n_obs: usize,
    theta_index: Vec<(usize, usize)>,
}

/// Two-sided normal tail probability of a Wald statistic.
pub fn wald_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

impl LaplaceModel {
    /// `x` (n x p), `z` (n x q), binary `y`, and a group index per row.
    pub fn new(x: DMatrix<f64>, z: DMatrix<f64>, y: Vec<f64>, group: &[usize]) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n || group.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.nrows().min(z.nrows()).min(group.len()),
            });
        }
        if let Some(i) = y.iter().position(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Validation(format!("response row {i} is not binary")));
        }
        let n_groups = group.iter().copied().max().map_or(0, |g| g + 1);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
        for (i, &g) in group.iter().enumerate() {
            members[g].push(i);
        }
        let (p, q) = (x.ncols(), z.ncols());
        let groups = members
            .into_iter()
            .filter(|rows| !rows.is_empty())
            .map(|rows| GroupBlock {
                x: DMatrix::from_fn(rows.len(), p, |i, k| x[(rows[i], k)]),
                z: DMatrix::from_fn(rows.len(), q, |i, k| z[(rows[i], k)]),
                y: rows.iter().map(|&i| y[i]).collect(),
                rows,
            })
            .collect();
        let mut theta_index = Vec::new();
        for c in 0..q {
            for r in c..q {
                theta_index.push((r, c));
            }
        }
        Ok(Self {
            p,
            q,
            groups,
            n_obs: n,
            theta_index,
        })
    }

    pub fn n_params(&self) -> usize {
        self.p + self.theta_index.len()
    }

    /// Clamp to the parameter box; returns clamped flags per coordinate.
    pub fn clamp(&self, params: &DVector<f64>) -> (DVector<f64>, Vec<bool>) {
        let mut out = params.clone();
        let mut flags = vec![false; params.len()];
        for (k, &(r, c)) in self.theta_index.iter().enumerate() {
            let i = self.p + k;
            let (lo, hi) = if r == c { LOG_SD_BOUNDS } else { (-OFFDIAG_BOUND, OFFDIAG_BOUND) };
            if params[i] < lo || params[i] > hi {
                out[i] = params[i].clamp(lo, hi);
                flags[i] = true;
            }
        }
        (out, flags)
    }

    pub fn lower_factor(&self, params: &DVector<f64>) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.q, self.q);
        for (k, &(r, c)) in self.theta_index.iter().enumerate() {
            let v = params[self.p + k];
            l[(r, c)] = if r == c { v.exp() } else { v };
        }
        l
    }

    /// Start: pooled fixed effects `beta0`, random sd `sd0` on the diagonal.
    pub fn start(&self, beta0: &DVector<f64>, sd0: f64) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_params());
        x.rows_mut(0, self.p).copy_from(beta0);
        for (k, &(r, c)) in self.theta_index.iter().enumerate() {
            if r == c {
                x[self.p + k] = sd0.ln();
            }
        }
        x
    }

    /// Laplace contribution of group `j`, optionally leaving out one of its
    /// rows (local index). `u0` seeds the inner Newton iteration.
    pub fn group_terms(&self, j: usize, params: &DVector<f64>, skip: Option<usize>, u0: Option<&DVector<f64>>) -> Result<GroupTerms> {
        let blk = &self.groups[j];
        let (p, q) = (self.p, self.q);
        let nj = blk.y.len();
        let mask: Vec<f64> = (0..nj).map(|i| if Some(i) == skip { 0.0 } else { 1.0 }).collect();
        let beta = params.rows(0, p).into_owned();
        let xb = &blk.x * &beta;
        let mut gradient = DVector::zeros(self.n_params());

        if q == 0 {
            let mut value = KahanSum::new();
            for i in 0..nj {
                if mask[i] == 0.0 {
                    continue;
                }
                value.add(blk.y[i] * xb[i] - log1p_exp(xb[i]));
                let res = blk.y[i] - sigmoid(xb[i]);
                for k in 0..p {
                    gradient[k] += blk.x[(i, k)] * res;
                }
            }
            return Ok(GroupTerms {
                value: value.total(),
                gradient,
                u_hat: DVector::zeros(0),
            });
        }

        if p == 1 && q == 1 {
            return self.scalar_terms(j, params, &mask, u0);
        }
        let l = self.lower_factor(params);
        let a = &blk.z * &l;
        let h_of = |u: &DVector<f64>| -> f64 {
            let eta = &xb + &a * u;
            let mut s = KahanSum::new();
            for i in 0..nj {
                if mask[i] != 0.0 {
                    s.add(blk.y[i] * eta[i] - log1p_exp(eta[i]));
                }
            }
            s.total() - 0.5 * u.norm_squared()
        };
        let mut u = match u0 {
            Some(u) if u.len() == q && u.iter().all(|v| v.is_finite()) => u.clone(),
            _ => DVector::zeros(q),
        };
        let mut h = h_of(&u);
        let mut inner_ok = false;
        for _ in 0..100 {
            let eta = &xb + &a * &u;
            let mut res = DVector::zeros(nj);
            let mut wa = a.clone();
            for i in 0..nj {
                let mu = sigmoid(eta[i]);
                res[i] = mask[i] * (blk.y[i] - mu);
                let w = mask[i] * mu * (1.0 - mu);
                for c in 0..q {
                    wa[(i, c)] *= w;
                }
            }
            let g = a.tr_mul(&res) - &u;
            let m = a.tr_mul(&wa) + DMatrix::identity(q, q);
            let chol = m
                .cholesky()
                .ok_or_else(|| Error::Numerical("conditional-mode Hessian not positive definite".into()))?;
            let step = chol.solve(&g);
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-12 {
                let cand = &u + &step * t;
                let hc = h_of(&cand);
                if hc >= h - 1e-14 * h.abs().max(1.0) {
                    u = cand;
                    h = hc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || step.amax() * t < 1e-10 {
                inner_ok = true;
                break;
            }
        }
        if !inner_ok {
            log::debug!("conditional mode for group {j} hit the iteration cap");
        }

        // quantities at u_hat
        let eta = &xb + &a * &u;
        let mut res = DVector::zeros(nj);
        let mut w = DVector::zeros(nj);
        let mut wprime = DVector::zeros(nj);
        let mut loglik = KahanSum::new();
        for i in 0..nj {
            let mu = sigmoid(eta[i]);
            if mask[i] != 0.0 {
                loglik.add(blk.y[i] * eta[i] - log1p_exp(eta[i]));
            }
            res[i] = mask[i] * (blk.y[i] - mu);
            w[i] = mask[i] * mu * (1.0 - mu);
            wprime[i] = w[i] * (1.0 - 2.0 * mu);
        }
        let wa = DMatrix::from_fn(nj, q, |i, c| w[i] * a[(i, c)]);
        let m = a.tr_mul(&wa) + DMatrix::identity(q, q);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Numerical("conditional-mode Hessian not positive definite".into()))?;
        let log_det = 2.0 * (0..q).map(|i| chol.l()[(i, i)].ln()).sum::<f64>();
        let minv = chol.inverse();
        let value = loglik.total() - 0.5 * u.norm_squared() - 0.5 * log_det;

        // leverage-type terms c_i = w'_i a_i' M^-1 a_i
        let am = &a * &minv;
        let cvec = DVector::from_fn(nj, |i, _| wprime[i] * am.row(i).dot(&a.row(i)));

        // beta: du/dbeta = -M^-1 A'WX, deta/dbeta = X + A du/dbeta
        let du_db = -(&minv * wa.tr_mul(&blk.x));
        let deta_db = &blk.x + &a * &du_db;
        let gb = blk.x.tr_mul(&res) - deta_db.tr_mul(&cvec) * 0.5;
        gradient.rows_mut(0, p).copy_from(&gb);

        // theta_k: A'_k has column c equal to d * Z[:, r]
        for (k, &(r, c)) in self.theta_index.iter().enumerate() {
            let d = if r == c { l[(r, c)] } else { 1.0 };
            let zr = blk.z.column(r) * d;
            let wzr = zr.component_mul(&w);
            // A'_k' res = e_c (zr . res);  A'W A'_k u = A'(W zr) u_c
            let mut rhs = a.tr_mul(&wzr) * (-u[c]);
            rhs[c] += zr.dot(&res);
            let du = &minv * rhs;
            let deta = &zr * u[c] + &a * &du;
            // tr(M^-1 A'_k' W A) = (A' W zr) . M^-1[:, c]
            let tr = a.tr_mul(&wzr).dot(&minv.column(c));
            gradient[p + k] = res.dot(&zr) * u[c] - tr - 0.5 * cvec.dot(&deta);
        }
        Ok(GroupTerms { value, gradient, u_hat: u })
    }

    /// [`LaplaceModel::group_terms`] for one fixed and one random
    /// predictor, in scalar arithmetic.
    fn scalar_terms(&self, j: usize, params: &DVector<f64>, mask: &[f64], u0: Option<&DVector<f64>>) -> Result<GroupTerms> {
        let blk = &self.groups[j];
        let nj = blk.y.len();
        let beta = params[0];
        let ell = params[1].exp();
        let x: Vec<f64> = (0..nj).map(|i| blk.x[(i, 0)]).collect();
        let a: Vec<f64> = (0..nj).map(|i| blk.z[(i, 0)] * ell).collect();
        let h_of = |u: f64| -> f64 {
            let mut s = KahanSum::new();
            for i in 0..nj {
                if mask[i] != 0.0 {
                    let eta = x[i] * beta + a[i] * u;
                    s.add(blk.y[i] * eta - log1p_exp(eta));
                }
            }
            s.total() - 0.5 * u * u
        };
        let mut u = u0.and_then(|v| v.get(0).copied()).filter(|v| v.is_finite()).unwrap_or(0.0);
        let mut h = f64::NAN;
        for _ in 0..100 {
            let (mut g, mut m) = (-u, 1.0);
            for i in 0..nj {
                let mu = sigmoid(x[i] * beta + a[i] * u);
                g += mask[i] * a[i] * (blk.y[i] - mu);
                m += mask[i] * mu * (1.0 - mu) * a[i] * a[i];
            }
            let step = g / m;
            if step.abs() < 0.25 {
                // concave in u with exact curvature: short Newton steps need no search
                u += step;
                h = f64::NAN;
                if step.abs() < 1e-10 {
                    break;
                }
                continue;
            }
            if h.is_nan() {
                h = h_of(u);
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-12 {
                let cand = u + step * t;
                let hc = h_of(cand);
                if hc >= h - 1e-14 * h.abs().max(1.0) {
                    u = cand;
                    h = hc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || (step * t).abs() < 1e-10 {
                break;
            }
        }
        let mut loglik = KahanSum::new();
        let (mut m, mut swax, mut swaa) = (1.0, 0.0, 0.0);
        let mut res = vec![0.0; nj];
        let mut w = vec![0.0; nj];
        let mut wp = vec![0.0; nj];
        for i in 0..nj {
            let eta = x[i] * beta + a[i] * u;
            let e = (-eta.abs()).exp();
            let mu = if eta >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
            if mask[i] != 0.0 {
                loglik.add(blk.y[i] * eta - (eta.max(0.0) + e.ln_1p()));
            }
            res[i] = mask[i] * (blk.y[i] - mu);
            w[i] = mask[i] * mu * (1.0 - mu);
            wp[i] = w[i] * (1.0 - 2.0 * mu);
            m += w[i] * a[i] * a[i];
            swax += w[i] * a[i] * x[i];
            swaa += w[i] * a[i] * a[i];
        }
        let value = loglik.total() - 0.5 * u * u - 0.5 * m.ln();
        let du_db = -swax / m;
        let du_dt = ((0..nj).map(|i| a[i] * res[i]).sum::<f64>() - swaa * u) / m;
        let (mut gb, mut gt) = (0.0, -swaa / m);
        for i in 0..nj {
            let c = wp[i] * a[i] * a[i] / m;
            gb += x[i] * res[i] - 0.5 * c * (x[i] + a[i] * du_db);
            gt += res[i] * a[i] * u - 0.5 * c * (a[i] * u + a[i] * du_dt);
        }
        Ok(GroupTerms {
            value,
            gradient: DVector::from_vec(vec![gb, gt]),
            u_hat: DVector::from_element(1, u),
        })
    }

    /// Sum of group contributions with an optional left-out row
    /// `(group, local row)`; `cache` holds and receives conditional modes.
    pub fn evaluate(
        &self,
        params: &DVector<f64>,
        skip: Option<(usize, usize)>,
        cache: &mut [DVector<f64>],
    ) -> Result<(f64, DVector<f64>)> {
        let mut value = KahanSum::new();
        let mut grad = DVector::zeros(self.n_params());
        for j in 0..self.groups.len() {
            let local = skip.and_then(|(g, i)| (g == j).then_some(i));
            let t = self.group_terms(j, params, local, cache.get(j))?;
            value.add(t.value);
            grad += &t.gradient;
            if let Some(slot) = cache.get_mut(j) {
                *slot = t.u_hat;
            }
        }
        Ok((value.total(), grad))
    }

    /// Minimization objective on the parameter box: `-F` at the clamped
    /// point, with zero gradient along clamped coordinates. Failures read
    /// as infinite so the line search backs off.
    pub fn objective(
        &self,
        params: &DVector<f64>,
        skip: Option<(usize, usize)>,
        cache: &mut [DVector<f64>],
    ) -> (f64, DVector<f64>) {
        let (x, flags) = self.clamp(params);
        match self.evaluate(&x, skip, cache) {
            Ok((v, g)) if v.is_finite() => {
                let mut g = -g;
                for (i, f) in flags.iter().enumerate() {
                    if *f {
                        g[i] = 0.0;
                    }
                }
                (-v, g)
            }
            _ => (f64::INFINITY, DVector::zeros(params.len())),
        }
    }

    pub fn empty_cache(&self) -> Vec<DVector<f64>> {
        vec![DVector::zeros(self.q); self.groups.len()]
    }

    /// Gradient tolerance scaled by the number of observations.
    pub fn gradient_tolerance(&self) -> f64 {
        1e-7 * (self.n_obs.max(1) as f64)
    }

    pub fn bfgs_options(&self) -> BfgsOptions {
        BfgsOptions {
            max_iterations: 500,
            gradient_tolerance: self.gradient_tolerance(),
            ..Default::default()
        }
    }

    /// Minimize `-F` from `start`; returns the optimizer result with the
    /// clamped optimum and conditional modes in `cache`.
    pub fn optimize(
        &self,
        start: DVector<f64>,
        skip: Option<(usize, usize)>,
        cache: &mut [DVector<f64>],
        options: &BfgsOptions,
    ) -> crate::optim::OptimResult {
        let (f0, g0) = self.objective(&start, skip, cache);
        let mut res = minimize_bfgs_from(|x| self.objective(x, skip, cache), start, f0, g0, options);
        let (clamped, _) = self.clamp(&res.x);
        res.x = clamped;
        // leave the cache at the optimum
        let _ = self.objective(&res.x.clone(), skip, cache);
        res
    }

    /// Newton steps on a finite-difference Hessian over the unclamped
    /// coordinates, for BFGS runs whose line search stalls within reach of
    /// the gradient tolerance. Each step must lower the gradient norm.
    pub fn newton_polish(
        &self,
        mut res: crate::optim::OptimResult,
        skip: Option<(usize, usize)>,
        cache: &mut Vec<DVector<f64>>,
        options: &BfgsOptions,
    ) -> crate::optim::OptimResult {
        for _ in 0..5 {
            if res.converged {
                break;
            }
            let (_, flags) = self.clamp(&res.x);
            let free: Vec<usize> = (0..res.x.len()).filter(|&i| !flags[i]).collect();
            let mut hcache = cache.clone();
            let hess = finite_difference_hessian(|pt| self.objective(pt, skip, &mut hcache).1, &res.x, 1e-5);
            let sub = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
            let g = DVector::from_iterator(free.len(), free.iter().map(|&i| res.gradient[i]));
            let Some(chol) = sub.cholesky() else { break };
            let dx = chol.solve(&g);
            let mut x = res.x.clone();
            for (a, &i) in free.iter().enumerate() {
                x[i] -= dx[a];
            }
            let mut trial_cache = cache.clone();
            let (value, gradient) = self.objective(&x, skip, &mut trial_cache);
            if !(value.is_finite() && gradient.amax() < res.gradient.amax()) {
                break;
            }
            *cache = trial_cache;
            res.x = self.clamp(&x).0;
            res.value = value;
            res.gradient = gradient;
            res.iterations += 1;
            res.trace.push(value);
            res.converged = res.gradient.amax() <= options.gradient_tolerance;
        }
        res
    }

    /// Derivative of the log-likelihood in each random-effect variance at
    /// zero covariance, per covariance coordinate (0 off the diagonal). A
    /// positive entry means that variance wants to leave zero.
    pub fn zero_variance_score(&self, params: &DVector<f64>, skip: Option<(usize, usize)>) -> Vec<f64> {
        let mut score = vec![0.0; self.theta_len()];
        for (j, blk) in self.groups.iter().enumerate() {
            let mut sum_rz = vec![0.0; self.q];
            let mut sum_wzz = vec![0.0; self.q];
            for i in 0..blk.y.len() {
                if skip == Some((j, i)) {
                    continue;
                }
                let eta: f64 = (0..self.p).map(|k| blk.x[(i, k)] * params[k]).sum();
                let mu = sigmoid(eta);
                for r in 0..self.q {
                    let z = blk.z[(i, r)];
                    sum_rz[r] += (blk.y[i] - mu) * z;
                    sum_wzz[r] += mu * (1.0 - mu) * z * z;
                }
            }
            for (k, &(r, c)) in self.theta_index.iter().enumerate() {
                if r == c {
                    score[k] += 0.5 * (sum_rz[r] * sum_rz[r] - sum_wzz[r]);
                }
            }
        }
        score
    }

    /// Pooled logistic start (random effects ignored).
    pub fn pooled_beta(&self) -> Result<DVector<f64>> {
        let x = DMatrix::from_fn(self.n_obs, self.p, |i, k| {
            let (g, r) = self.locate(i);
            self.groups[g].x[(r, k)]
        });
        let y: Vec<f64> = (0..self.n_obs)
            .map(|i| {
                let (g, r) = self.locate(i);
                self.groups[g].y[r]
            })
            .collect();
        let fit = crate::learners::logistic::fit_logistic(
            &x,
            &y,
            1e-8,
            crate::learners::logistic::Penalty::L2,
            &Default::default(),
            None,
        )?;
        Ok(fit.beta)
    }

    fn locate(&self, row: usize) -> (usize, usize) {
        for (g, blk) in self.groups.iter().enumerate() {
            if let Some(r) = blk.rows.iter().position(|&i| i == row) {
                return (g, r);
            }
        }
        unreachable!("row {row} not in any group")
    }

    pub fn theta_len(&self) -> usize {
        self.theta_index.len()
    }

    /// True for log-diagonal coordinates.
    pub fn is_log_sd(&self, k: usize) -> bool {
        let (r, c) = self.theta_index[k];
        r == c
    }
}

struct Built {
    model: LaplaceModel,
    fixed_names: Vec<String>,
    random_names: Vec<String>,
    levels: Vec<String>,
    scaling: Vec<ColumnScaling>,
}

fn expand_term(
    table: &DesignTable,
    term: &str,
    scaled: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<(String, Vec<f64>)>> {
    let n = table.n_rows();
    let mut cols: Vec<(String, Vec<f64>)> = vec![(String::new(), vec![1.0; n])];
    for part in term.split(':') {
        let part = part.trim();
        let pieces: Vec<(String, Vec<f64>)> = if let Some(v) = scaled.get(part).or_else(|| table.numeric.get(part)) {
            vec![(part.to_string(), v.clone())]
        } else if let Some(levels) = table.factor(part) {
            let mut uniq: Vec<&String> = levels.iter().collect();
            uniq.sort();
            uniq.dedup();
            uniq.iter()
                .skip(1)
                .map(|lv| {
                    (
                        format!("{part}[{lv}]"),
                        levels.iter().map(|v| if v == *lv { 1.0 } else { 0.0 }).collect(),
                    )
                })
                .collect()
        } else {
            return Err(Error::Validation(format!("predictor {part:?} not in design table")));
        };
        let mut next = Vec::new();
        for (na, va) in &cols {
            for (nb, vb) in &pieces {
                let name = if na.is_empty() { nb.clone() } else { format!("{na}:{nb}") };
                next.push((name, va.iter().zip(vb).map(|(a, b)| a * b).collect()));
            }
        }
        cols = next;
    }
    Ok(cols)
}

fn build(table: &DesignTable, spec: &GlmmSpec) -> Result<Built> {
    let n = table.n_rows();
    let y = table
        .numeric(&spec.response)
        .ok_or_else(|| Error::Validation(format!("response {:?} not in design table", spec.response)))?
        .to_vec();
    let group_col = table
        .factor(&spec.group)
        .ok_or_else(|| Error::Validation(format!("grouping factor {:?} not in design table", spec.group)))?;
    let mut levels: Vec<String> = group_col.to_vec();
    levels.sort();
    levels.dedup();
    if levels.len() < 2 {
        return Err(Error::Validation(format!(
            "grouping factor {:?} needs at least 2 levels",
            spec.group
        )));
    }
    let index: BTreeMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let group: Vec<usize> = group_col.iter().map(|g| index[g.as_str()]).collect();

    let mut scaled = BTreeMap::new();
    let mut scaling = Vec::new();
    if spec.standardize_predictors {
        let mut bases: Vec<&str> = spec
            .fixed_effects
            .iter()
            .chain(&spec.random_effects)
            .flat_map(|t| t.split(':').map(str::trim))
            .filter(|p| table.numeric(p).is_some())
            .collect();
        bases.sort();
        bases.dedup();
        for name in bases {
            let v = table.numeric(name).expect("filtered to numeric");
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0)).sqrt();
            let scale = if sd > 0.0 { sd } else { 1.0 };
            scaled.insert(name.to_string(), v.iter().map(|x| (x - mean) / scale).collect::<Vec<_>>());
            scaling.push(ColumnScaling {
                name: name.to_string(),
                mean,
                scale,
            });
        }
    }

    let assemble = |intercept: bool, terms: &[String]| -> Result<(Vec<String>, DMatrix<f64>)> {
        let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
        if intercept {
            cols.push(("(Intercept)".into(), vec![1.0; n]));
        }
        for t in terms {
            cols.extend(expand_term(table, t, &scaled)?);
        }
        let m = DMatrix::from_fn(n, cols.len(), |i, k| cols[k].1[i]);
        Ok((cols.into_iter().map(|(name, _)| name).collect(), m))
    };
    let (fixed_names, x) = assemble(spec.fixed_intercept, &spec.fixed_effects)?;
    let (random_names, z) = assemble(spec.random_intercept, &spec.random_effects)?;
    let model = LaplaceModel::new(x, z, y, &group)?;
    Ok(Built {
        model,
        fixed_names,
        random_names,
        levels,
        scaling,
    })
}

/// Fit a logistic GLMM by maximizing the Laplace-approximated marginal
/// likelihood. Wald statistics come from the observed information at the
/// optimum.
pub fn fit_glmm(table: &DesignTable, spec: &GlmmSpec) -> Result<GlmmFit> {
    let built = build(table, spec)?;
    let model = &built.model;
    let beta0 = model.pooled_beta()?;
    let start = model.start(&beta0, 0.5);
    let mut cache = model.empty_cache();
    let options = model.bfgs_options();
    let res = model.optimize(start, None, &mut cache, &options);
    let res = model.newton_polish(res, None, &mut cache, &options);
    if !res.converged {
        let tail: Vec<String> = res.trace.iter().rev().take(5).map(|v| format!("{v:.10}")).collect();
        return Err(Error::NonConvergence(format!(
            "GLMM stopped after {} iterations with gradient norm {:.3e}; last objective values {}",
            res.iterations,
            res.gradient.amax(),
            tail.join(", ")
        )));
    }
    let x = res.x.clone();
    let l = model.lower_factor(&x);

    // observed information over coordinates not on the box boundary
    let (_, flags) = model.clamp(&(&x * 1.0));
    let free: Vec<usize> = (0..x.len())
        .filter(|&i| {
            if i < model.p {
                return true;
            }
            let k = i - model.p;
            let lo = LOG_SD_BOUNDS.0 + 1e-6;
            !(flags[i] || (model.is_log_sd(k) && x[i] <= lo))
        })
        .collect();
    let mut hcache = cache.clone();
    let step = 1e-4;
    let hess = finite_difference_hessian(|pt| model.objective(pt, None, &mut hcache).1, &x, step);
    let sub = DMatrix::from_fn(free.len(), free.len(), |a, b| 0.5 * (hess[(free[a], free[b])] + hess[(free[b], free[a])]));
    let cov_beta = match sub.clone().cholesky() {
        Some(ch) => ch.inverse().view((0, 0), (model.p, model.p)).into_owned(),
        None => {
            let bb = sub.view((0, 0), (model.p, model.p)).into_owned();
            bb.cholesky()
                .ok_or_else(|| Error::Numerical("fixed-effect information is not positive definite".into()))?
                .inverse()
        }
    };
    let fixed = built
        .fixed_names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let se = cov_beta[(k, k)].max(0.0).sqrt();
            let z = x[k] / se;
            Coefficient {
                name: name.clone(),
                estimate: x[k],
                std_error: se,
                z,
                p_value: wald_p_value(z),
            }
        })
        .collect();
    // a variance is on the boundary when zeroing it costs (almost) nothing
    let mut boundary = (0..model.q).any(|i| l[(i, i)] < BOUNDARY_SD);
    for k in 0..model.theta_len() {
        if boundary || !model.is_log_sd(k) {
            continue;
        }
        let mut at_zero = x.clone();
        at_zero[model.p + k] = LOG_SD_BOUNDS.0;
        let mut c = cache.clone();
        if let Ok((v, _)) = model.evaluate(&at_zero, None, &mut c) {
            boundary = v >= -res.value - 1e-6;
        }
    }
    let cov = &l * l.transpose();
    let to_rows = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
    let modes: Vec<DVector<f64>> = cache.iter().map(|u| &l * u).collect();

    let mut fitted = vec![0.0; model.n_obs];
    let beta = x.rows(0, model.p).into_owned();
    for (g, blk) in model.groups.iter().enumerate() {
        let eta = &blk.x * &beta + &blk.z * &modes[g];
        for (r, &row) in blk.rows.iter().enumerate() {
            fitted[row] = sigmoid(eta[r]);
        }
    }
    Ok(GlmmFit {
        fixed,
        random_names: built.random_names,
        random_factor: to_rows(&l),
        random_covariance: to_rows(&cov),
        log_likelihood: -res.value,
        n_obs: model.n_obs,
        n_groups: model.groups.len(),
        group_levels: built.levels,
        conditional_modes: modes.iter().map(|b| b.iter().copied().collect()).collect(),
        converged: true,
        boundary,
        iterations: res.iterations,
        gradient_norm: res.gradient.amax(),
        objective_trace: res.trace,
        scaling: built.scaling,
        fitted,
    })
}
