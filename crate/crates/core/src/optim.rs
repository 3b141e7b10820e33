//! Quasi-Newton minimization (BFGS with a strong-Wolfe line search).
//!
//! Used for the Bayesian-ridge evidence and the mixed-model Laplace
//! objective. Objectives return `(value, gradient)`; non-finite values are
//! treated as infeasible and the line search backs off.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Converged when the gradient infinity-norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop (not converged) when a step changes `f` by less than this, relatively.
    pub stall_tolerance: f64,
    pub initial_inverse_hessian: Option<DMatrix<f64>>,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            stall_tolerance: 1e-14,
            initial_inverse_hessian: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting with the start point.
    pub trace: Vec<f64>,
    pub inverse_hessian: DMatrix<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimize `objective` from `x0`, optionally reusing a known start value.
pub fn minimize_bfgs<F>(mut objective: F, x0: DVector<f64>, options: &BfgsOptions) -> OptimResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let (f0, g0) = objective(&x0);
    minimize_bfgs_from(objective, x0, f0, g0, options)
}

/// Like [`minimize_bfgs`] when the start value and gradient are already known.
pub fn minimize_bfgs_from<F>(
    mut objective: F,
    x0: DVector<f64>,
    f0: f64,
    g0: DVector<f64>,
    options: &BfgsOptions,
) -> OptimResult
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let n = x0.len();
    let mut x = x0;
    let mut f = f0;
    let mut g = g0;
    let mut evaluations = 1;
    let mut h = options
        .initial_inverse_hessian
        .clone()
        .unwrap_or_else(|| DMatrix::identity(n, n));
    let scale_first = options.initial_inverse_hessian.is_none();
    let mut trace = vec![f];
    let mut converged = inf_norm(&g) <= options.gradient_tolerance;
    let mut iterations = 0;

    while !converged && iterations < options.max_iterations && f.is_finite() {
        iterations += 1;
        let mut direction = -(&h * &g);
        let mut slope = g.dot(&direction);
        if !(slope < 0.0) {
            // lost positive definiteness; restart from steepest descent
            h = DMatrix::identity(n, n);
            direction = -g.clone();
            slope = g.dot(&direction);
        }
        let initial_step = if iterations == 1 && scale_first {
            (1.0 / inf_norm(&g).max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let Some(step) = line_search(&mut objective, &x, f, slope, &direction, initial_step, &mut evaluations) else {
            break;
        };
        let s = &step.x - &x;
        let y = &step.gradient - &g;
        let sy = s.dot(&y);
        let rel_change = (f - step.value).abs() / f.abs().max(1.0);
        x = step.x;
        f = step.value;
        g = step.gradient;
        trace.push(f);
        converged = inf_norm(&g) <= options.gradient_tolerance;
        if converged {
            break;
        }
        if sy > 1e-12 * s.norm() * y.norm() {
            if iterations == 1 && scale_first {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yhy + rho) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        if rel_change < options.stall_tolerance {
            break;
        }
    }

    OptimResult {
        x,
        value: f,
        gradient: g,
        iterations,
        evaluations,
        converged,
        trace,
        inverse_hessian: h,
    }
}

struct Point {
    x: DVector<f64>,
    value: f64,
    gradient: DVector<f64>,
    slope: f64,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn line_search<F>(
    objective: &mut F,
    x: &DVector<f64>,
    f0: f64,
    slope0: f64,
    direction: &DVector<f64>,
    initial_step: f64,
    evaluations: &mut usize,
) -> Option<LineResult>
where
    F: FnMut(&DVector<f64>) -> (f64, DVector<f64>),
{
    let mut eval = |a: f64, evaluations: &mut usize| -> Point {
        *evaluations += 1;
        let xa = x + direction * a;
        let (v, g) = objective(&xa);
        let slope = g.dot(direction);
        Point {
            x: xa,
            value: if v.is_finite() { v } else { f64::INFINITY },
            gradient: g,
            slope,
        }
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut slope_prev = slope0;
    let mut a = initial_step;
    for i in 0..40 {
        let p = eval(a, evaluations);
        if !p.value.is_finite() {
            a = 0.5 * (a_prev + a);
            continue;
        }
        if p.value > f0 + C1 * a * slope0 || (i > 0 && p.value >= f_prev) {
            return zoom(&mut eval, f0, slope0, (a_prev, f_prev, slope_prev), (a, p.value, p.slope), evaluations)
                .or_else(|| accept_if_decrease(p, f0));
        }
        if p.slope.abs() <= -C2 * slope0 {
            return Some(LineResult::from(p));
        }
        if p.slope >= 0.0 {
            return zoom(&mut eval, f0, slope0, (a, p.value, p.slope), (a_prev, f_prev, slope_prev), evaluations)
                .or_else(|| accept_if_decrease(p, f0));
        }
        a_prev = a;
        f_prev = p.value;
        slope_prev = p.slope;
        a *= 2.0;
    }
    None
}

fn accept_if_decrease(p: Point, f0: f64) -> Option<LineResult> {
    (p.value < f0).then(|| LineResult::from(p))
}

struct LineResult {
    x: DVector<f64>,
    value: f64,
    gradient: DVector<f64>,
}

impl From<Point> for LineResult {
    fn from(p: Point) -> Self {
        Self {
            x: p.x,
            value: p.value,
            gradient: p.gradient,
        }
    }
}

fn zoom<E>(
    eval: &mut E,
    f0: f64,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    evaluations: &mut usize,
) -> Option<LineResult>
where
    E: FnMut(f64, &mut usize) -> Point,
{
    let mut best: Option<Point> = None;
    for _ in 0..40 {
        let (a_lo, f_lo, s_lo) = lo;
        let (a_hi, f_hi, _) = hi;
        let width = a_hi - a_lo;
        // safeguarded quadratic interpolation using f and slope at lo
        let denom = 2.0 * (f_hi - f_lo - s_lo * width);
        let mut a = if denom.is_finite() && denom.abs() > 0.0 {
            a_lo - s_lo * width * width / denom
        } else {
            a_lo + 0.5 * width
        };
        let (left, right) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
        let margin = 0.1 * (right - left);
        if !(a > left + margin && a < right - margin) {
            a = 0.5 * (a_lo + a_hi);
        }
        let p = eval(a, evaluations);
        if p.value > f0 + C1 * a * slope0 || p.value >= f_lo {
            hi = (a, p.value, p.slope);
        } else {
            if p.slope.abs() <= -C2 * slope0 {
                return Some(LineResult::from(p));
            }
            if p.slope * (a_hi - a_lo) >= 0.0 {
                hi = lo;
            }
            lo = (a, p.value, p.slope);
            if best.as_ref().map_or(true, |b| p.value < b.value) {
                best = Some(p);
            }
        }
        if (hi.0 - lo.0).abs() < 1e-16 * lo.0.abs().max(1.0) {
            break;
        }
    }
    best.filter(|b| b.value < f0).map(LineResult::from)
}

/// Central finite-difference Jacobian of a gradient function (a Hessian).
pub fn finite_difference_hessian<G>(mut gradient: G, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    G: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let e = step * x[j].abs().max(1.0);
        let mut xp = x.clone();
        xp[j] += e;
        let mut xm = x.clone();
        xm[j] -= e;
        let d = (gradient(&xp) - gradient(&xm)) / (2.0 * e);
        h.set_column(j, &d);
    }
    (&h + h.transpose()) * 0.5
}
