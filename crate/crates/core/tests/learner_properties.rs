use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use repscope::embedding::EmbeddingMatrix;
use repscope::learners::logistic::logistic_objective;
use repscope::learners::rollout::{category_rollout, reward_rollout, task_features};
use repscope::learners::*;
use repscope::rng::rng_from_seed;
use repscope::task::{generate_task, TaskKind};

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

fn labels(x: &DMatrix<f64>, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..x.nrows())
        .map(|i| if x[(i, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal) > 0.0 { 1.0 } else { 0.0 })
        .collect()
}

fn embedding(n: usize, p: usize, seed: u64) -> EmbeddingMatrix {
    EmbeddingMatrix::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        (0..p).map(|j| format!("f{j}")).collect(),
        gaussian(n, p, seed),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn l1_is_at_least_as_sparse_as_l2(seed in 0u64..10_000, alpha in 0.5f64..20.0) {
        let x = gaussian(40, 8, seed);
        let y = labels(&x, seed + 1);
        let opts = LogisticOptions::default();
        let l1 = fit_logistic(&x, &y, alpha, Penalty::L1, &opts, None).unwrap();
        let l2 = fit_logistic(&x, &y, alpha, Penalty::L2, &opts, None).unwrap();
        let nnz = |b: &DVector<f64>| b.iter().filter(|v| v.abs() > 1e-10).count();
        prop_assert!(nnz(&l1.beta) <= nnz(&l2.beta));
    }

    #[test]
    fn l2_fit_is_stationary(seed in 0u64..10_000, alpha in 1e-3f64..100.0) {
        let x = gaussian(30, 5, seed);
        let y = labels(&x, seed + 7);
        let fit = fit_logistic(&x, &y, alpha, Penalty::L2, &LogisticOptions::default(), None).unwrap();
        prop_assert!(fit.converged);
        let f0 = logistic_objective(&x, &y, &fit.beta, alpha, Penalty::L2);
        for j in 0..5 {
            for h in [1e-4, -1e-4] {
                let mut b = fit.beta.clone();
                b[j] += h;
                prop_assert!(f0 <= logistic_objective(&x, &y, &b, alpha, Penalty::L2) + 1e-12);
            }
        }
    }

    #[test]
    fn bayes_low_lambda_is_least_squares(seed in 0u64..10_000) {
        let x = gaussian(20, 3, seed);
        let r = gaussian(20, 1, seed + 3).column(0).into_owned();
        let qr = x.clone().qr();
        let ols = qr.r().solve_upper_triangular(&(qr.q().transpose() * &r)).unwrap();
        let w = bayes_ridge_weights(&x, &r, 1e-12, 1.0).unwrap();
        prop_assert!((w - ols).norm() < 1e-6);
    }

    #[test]
    fn ard_evidence_is_monotone(seed in 0u64..10_000, noise in 0.01f64..2.0) {
        let x = gaussian(40, 6, seed);
        let e = gaussian(40, 1, seed + 11);
        let r = DVector::from_fn(40, |i, _| 2.0 * x[(i, 0)] - x[(i, 4)] + noise * e[(i, 0)]);
        let fit = ard_fit(&x, &r, &ArdOptions::default()).unwrap();
        for w in fit.evidence_trace.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn category_rollout_is_causal(seed in 0u64..1000, cut in 1usize..118) {
        let emb = embedding(160, 5, 42);
        let task = generate_task(&emb, "f0", TaskKind::Category, seed).unwrap();
        let config = LearnerConfig::default();
        let base = category_rollout(&task, &task_features(&task, &emb, &config).unwrap(), &config, 0.1).unwrap();
        let mut altered = task.clone();
        let mut rng = rng_from_seed(seed);
        for t in altered.trials[cut + 1..].iter_mut() {
            t.label = Some(rng.random_range(0..2));
        }
        altered.trials[cut + 1..].reverse();
        let other = category_rollout(&altered, &task_features(&altered, &emb, &config).unwrap(), &config, 0.1).unwrap();
        prop_assert_eq!(&base.trials[..=cut], &other.trials[..=cut]);
    }

    #[test]
    fn reward_rollout_is_causal(seed in 0u64..1000, cut in 1usize..58) {
        let emb = embedding(160, 4, 43);
        let task = generate_task(&emb, "f1", TaskKind::Reward, seed).unwrap();
        let config = LearnerConfig { kind: LearnerKind::BayesRidge, ..Default::default() };
        let base = reward_rollout(&task, &task_features(&task, &emb, &config).unwrap(), &config).unwrap();
        let mut altered = task.clone();
        altered.trials[cut + 1..].rotate_left(1);
        for t in altered.trials[cut + 1..].iter_mut() {
            t.rewards = Some(vec![100.0, 0.0]);
        }
        let other = reward_rollout(&altered, &task_features(&altered, &emb, &config).unwrap(), &config).unwrap();
        prop_assert_eq!(&base.trials[..=cut], &other.trials[..=cut]);
    }
}
