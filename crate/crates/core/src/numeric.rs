//! Small numerical helpers shared by the learners and the mixed model.

/// Probability floor/ceiling applied before any log-loss.
pub const PROB_CLIP: f64 = 1e-6;

/// Logistic sigmoid, stable for large |z|.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
pub fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of `y` under logit `eta`.
#[inline]
pub fn bernoulli_loglik(y: f64, eta: f64) -> f64 {
    y * eta - log1p_exp(eta)
}

/// Clip a probability into `[PROB_CLIP, 1 - PROB_CLIP]`.
#[inline]
pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Negative log-probability of a binary outcome with clipping.
#[inline]
pub fn clipped_nll(p_one: f64, outcome: bool) -> f64 {
    let p = clip_prob(p_one);
    if outcome {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Neumaier compensated summation accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = KahanSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Compensated sum of a sequence.
pub fn stable_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<KahanSum>().total()
}

/// `n` log-spaced points between `lo` and `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    let mut out: Vec<f64> = (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect();
    out[0] = lo;
    out[n - 1] = hi;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_saturates() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        let tiny = sigmoid(-800.0);
        assert!(tiny >= 0.0 && tiny <= 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn log1p_exp_matches_naive_in_safe_range() {
        for z in [-30.0, -2.0, 0.0, 1.5, 20.0] {
            let naive = (1.0 + f64::exp(z)).ln();
            assert!((log1p_exp(z) - naive).abs() < 1e-12);
        }
        assert!((log1p_exp(1000.0) - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut values = vec![1e16];
        values.extend(std::iter::repeat(1.0).take(1000));
        values.push(-1e16);
        assert_eq!(stable_sum(values), 1000.0);
    }

    #[test]
    fn log_space_endpoints() {
        let g = log_space(1e-4, 1e4, 17);
        assert_eq!(g.len(), 17);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[16] - 1e4).abs() < 1e-8);
        assert!((g[8] - 1.0).abs() < 1e-12);
    }
}
