use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use repscope::glmm::{fit_glmm, DesignTable, GlmmSpec};
use repscope::learners::{fit_logistic, LearnerConfig, LearnerKind, LogisticOptions, Penalty};
use repscope::numeric::sigmoid;
use repscope::policy::{compare_representations, score_policy, LooEngine, PolicyData, PolicyOptions};
use repscope::rng::rng_from_seed;
use repscope::simulator::{simulate_agents, synthetic_candidates, RecoveryConfig};
use repscope::task::TaskKind;

fn policy_data(groups: usize, per: usize, slope: f64, sd: f64, seed: u64) -> PolicyData {
    let mut rng = rng_from_seed(seed);
    let (mut predictor, mut response, mut group) = (Vec::new(), Vec::new(), Vec::new());
    for g in 0..groups {
        let b = slope + sd * rng.sample::<f64, _>(StandardNormal);
        for _ in 0..per {
            let x: f64 = rng.sample(StandardNormal);
            predictor.push(x);
            response.push(f64::from(u8::from(rng.random::<f64>() < sigmoid(b * x))));
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn constant_predictor_gives_n_ln2(seed in any::<u64>(), groups in 2usize..8, per in 5usize..40) {
        let mut data = policy_data(groups, per, 1.0, 0.3, seed);
        data.predictor.iter_mut().for_each(|v| *v = 0.0);
        let n = (groups * per) as f64;
        let s = score_policy(&data, LearnerKind::LogisticL2, &PolicyOptions::default()).unwrap();
        prop_assert!((s.total_nll - n * std::f64::consts::LN_2).abs() < 1e-6 * n);
        prop_assert_eq!(s.chance_nll, n * std::f64::consts::LN_2);
    }

    #[test]
    fn heldout_response_never_enters_its_fold(seed in any::<u64>(), row_frac in 0.0f64..1.0) {
        let data = policy_data(4, 25, 1.2, 0.4, seed);
        let row = ((row_frac * 100.0) as usize).min(99);
        let mut flipped = data.clone();
        flipped.response[row] = 1.0 - flipped.response[row];
        let (m1, m2) = (data.model(true).unwrap(), flipped.model(true).unwrap());
        let e1 = LooEngine::new(&m1, data.model(false).unwrap()).unwrap();
        let e2 = LooEngine::new(&m2, flipped.model(false).unwrap()).unwrap();
        let j = data.group[row];
        let i = m1.groups[j].rows.iter().position(|&r| r == row).unwrap();
        if let (Some(c1), Some(c2)) = (e1.cold_fold(j, i), e2.cold_fold(j, i)) {
            prop_assert!((c1.p_one - c2.p_one).abs() < 1e-9, "cold {} vs {}", c1.p_one, c2.p_one);
        }
        // warm starts come from full fits that did see the row; they agree to
        // optimizer tolerance
        let (f1, f2) = (e1.fold(j, i), e2.fold(j, i));
        prop_assert!((f1.p_one - f2.p_one).abs() < 1e-5, "{} vs {}", f1.p_one, f2.p_one);
        prop_assert!((f1.params[0] - f2.params[0]).abs() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn zero_variance_glmm_reduces_to_pooled_fit(seed in any::<u64>()) {
        let (groups, per) = (50, 40);
        let mut rng = rng_from_seed(seed);
        let x: Vec<f64> = (0..groups * per).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|&v| f64::from(u8::from(rng.random::<f64>() < sigmoid(0.3 + 1.0 * v)))).collect();
        let mut table = DesignTable::new(x.len());
        table.add_numeric("x", x.clone()).unwrap();
        table.add_numeric("y", y.clone()).unwrap();
        table.add_factor("g", (0..x.len()).map(|r| format!("g{}", r / per)).collect()).unwrap();
        let fit = fit_glmm(&table, &GlmmSpec::new("y", "g").fixed(&["x"]).random(&[]).standardized(false)).unwrap();
        let design = nalgebra::DMatrix::from_fn(x.len(), 2, |r, c| if c == 0 { 1.0 } else { x[r] });
        let pooled = fit_logistic(&design, &y, 1e-10, Penalty::L2, &LogisticOptions::default(), None).unwrap();
        let est = |name: &str| fit.coefficient(name).unwrap().estimate;
        prop_assert!((est("(Intercept)") - pooled.beta[0]).abs() < 0.02);
        prop_assert!((est("x") - pooled.beta[1]).abs() < 0.02);
    }

    #[test]
    fn standardizing_keeps_sign_and_fitted_order(seed in any::<u64>(), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
        let (groups, per) = (10, 30);
        let mut rng = rng_from_seed(seed);
        let x: Vec<f64> = (0..groups * per).map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&v| f64::from(u8::from(rng.random::<f64>() < sigmoid(0.8 * (v - shift) / scale))))
            .collect();
        let mut table = DesignTable::new(x.len());
        table.add_numeric("x", x).unwrap();
        table.add_numeric("y", y).unwrap();
        table.add_factor("g", (0..groups * per).map(|r| format!("g{}", r / per)).collect()).unwrap();
        let spec = GlmmSpec::new("y", "g").fixed(&["x"]);
        let raw = fit_glmm(&table, &spec.clone().standardized(false)).unwrap();
        let std = fit_glmm(&table, &spec.standardized(true)).unwrap();
        let slope = |f: &repscope::glmm::GlmmFit| f.coefficient("x").unwrap().estimate;
        prop_assert_eq!(slope(&raw).signum(), slope(&std).signum());
        let order = |f: &repscope::glmm::GlmmFit| {
            let mut idx: Vec<usize> = (0..f.fitted.len()).collect();
            idx.sort_by(|&a, &b| f.fitted[a].total_cmp(&f.fitted[b]));
            idx
        };
        // both fits sit within optimizer tolerance of the same optimum, so rows
        // closer than twice that gap may swap places
        let tol = 1e-4;
        let a = order(&raw);
        let pa = DVector::from_iterator(a.len(), a.iter().map(|&r| raw.fitted[r]));
        let pb = DVector::from_iterator(a.len(), a.iter().map(|&r| std.fitted[r]));
        prop_assert!((&pa - &pb).abs().max() < tol);
        for k in 1..pb.len() {
            prop_assert!(pb[k] >= pb[k - 1] - 2.0 * tol, "order differs at {}: {} < {}", k, pb[k], pb[k - 1]);
        }
    }
}

#[test]
fn ranking_is_deterministic() {
    let reps = synthetic_candidates(150, 8, 3, 11).unwrap();
    let cfg = RecoveryConfig::new(TaskKind::Reward, 2);
    let logs = simulate_agents(&reps[0], 3, &cfg).unwrap();
    let learner = LearnerConfig::for_task(TaskKind::Reward);
    let a = compare_representations(&reps, &logs, &learner, &PolicyOptions::default()).unwrap();
    let b = compare_representations(&reps, &logs, &learner, &PolicyOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        repscope::policy::scores_to_csv(&a).unwrap(),
        repscope::policy::scores_to_csv(&b).unwrap()
    );
}
