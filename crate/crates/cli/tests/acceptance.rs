//! Acceptance harness. Prints one line per criterion and exits nonzero when
//! any criterion fails. Oracles here are computed independently of the
//! library code they check.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use repscope::choice::{ChoiceLog, ChoiceRecord, SessionStatus};
use repscope::embedding::{EmbeddingFormat, EmbeddingMatrix};
use repscope::glmm::{fit_glmm, DesignTable, GlmmSpec};
use repscope::learners::logistic::{cross_entropy, cross_entropy_gradient, l2_objective_gradient, logistic_objective};
use repscope::learners::{
    ard_fit, bayes_ridge_predict, fit_logistic, ArdOptions, LearnerKind, LogisticOptions, Penalty, TrajectoryPrediction,
    TrialPrediction,
};
use repscope::numeric::sigmoid;
use repscope::policy::{loo_cv_nll, PolicyOptions};
use repscope::rng::{child_seed, rng_from_seed};
use repscope::rsa::{linear_cka, linear_cka_direct, linear_cka_gram, pairwise_cka};
use repscope::simulator::{recovery_experiment, simulate_participant, synthetic_candidates, AgentConfig, RecoveryConfig};
use repscope::stats::{kendall_tau_b, learning_onset, t_test_one_sided, AccuracyTable};
use repscope::task::{generate_task, TaskKind};
use tempfile::TempDir;

type Outcome = Result<String, String>;

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cka_suite() -> Outcome {
    let mut worst = [0.0f64; 5];
    for pair in 0..1000u64 {
        let mut rng = rng_from_seed(child_seed(1, pair));
        let n = rng.random_range(8..60);
        let (p, q) = (rng.random_range(1..12), rng.random_range(1..12));
        let a = gaussian(n, p, &mut rng);
        let b = gaussian(n, q, &mut rng);
        let e = |r: repscope::error::Result<f64>| r.map_err(|e| format!("pair {pair}: {e}"));
        let ab = e(linear_cka(&a, &b))?;
        let ba = e(linear_cka(&b, &a))?;
        worst[0] = worst[0].max((ab - ba).abs());
        ensure((0.0..=1.0 + 1e-10).contains(&ab), || format!("pair {pair}: CKA {ab} out of bounds"))?;
        worst[1] = worst[1].max((e(linear_cka(&a, &a))? - 1.0).abs());
        let rot = gaussian(q, q, &mut rng).qr().q();
        let c: f64 = rng.random_range(0.1..10.0);
        let moved = e(linear_cka(&(&a * c), &(&b * &rot)))?;
        worst[2] = worst[2].max((moved - ab).abs());
        let gram = e(linear_cka_gram(&a, &b))?;
        let direct = e(linear_cka_direct(&a, &b))?;
        worst[3] = worst[3].max((gram - direct).abs());
        worst[4] = worst[4].max(ab);
    }
    ensure(worst[0] < 1e-12, || format!("asymmetry {:.1e}", worst[0]))?;
    ensure(worst[1] < 1e-12, || format!("self-CKA error {:.1e}", worst[1]))?;
    ensure(worst[2] < 1e-10, || format!("invariance error {:.1e}", worst[2]))?;
    ensure(worst[3] < 1e-10, || format!("gram vs direct {:.1e}", worst[3]))?;
    Ok(format!(
        "1000 pairs, asymmetry {:.1e}, self {:.1e}, invariance {:.1e}, forms {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    ))
}

fn bayes_ridge() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = rng_from_seed(seed);
        let x = gaussian(30, 5, &mut rng);
        let r = DVector::from_iterator(30, (0..30).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x_new = DVector::from_iterator(5, (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let ls = x.clone().svd(true, true).solve(&r, 1e-14).map_err(|e| e.to_string())?;
        let got = bayes_ridge_predict(&x, &r, &x_new, 1e-12, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max((got - ls.dot(&x_new)).abs());
    }
    ensure(worst < 1e-6, || format!("least-squares gap {worst:.1e}"))?;
    let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
    let r = DVector::from_vec(vec![1.0, 2.0]);
    let hand = bayes_ridge_predict(&x, &r, &DVector::from_vec(vec![3.0]), 1.0, 1.0).map_err(|e| e.to_string())?;
    ensure((hand - 2.5).abs() < 1e-9, || format!("hand case gave {hand}"))?;
    Ok(format!("least-squares gap {worst:.1e}, hand case {hand}"))
}

fn relative_error(analytic: &DVector<f64>, numeric: &DVector<f64>) -> f64 {
    (analytic - numeric).norm() / analytic.norm().max(numeric.norm()).max(1e-8)
}

fn central_difference(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>) -> DVector<f64> {
    let h = 1e-5;
    DVector::from_iterator(
        at.len(),
        (0..at.len()).map(|j| {
            let (mut up, mut down) = (at.clone(), at.clone());
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        }),
    )
}

fn gradient_check() -> Outcome {
    let (mut l2, mut smooth) = (0.0f64, 0.0f64);
    for point in 0..20 {
        let mut rng = rng_from_seed(child_seed(3, point));
        let x = gaussian(40, 6, &mut rng);
        let y: Vec<f64> = (0..40).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
        let beta = DVector::from_iterator(6, (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let alpha = rng.random_range(0.01..10.0);
        let fd = central_difference(|b| logistic_objective(&x, &y, b, alpha, Penalty::L2), &beta);
        l2 = l2.max(relative_error(&l2_objective_gradient(&x, &y, &beta, alpha), &fd));
        let fd = central_difference(|b| cross_entropy(&x, &y, b), &beta);
        smooth = smooth.max(relative_error(&cross_entropy_gradient(&x, &y, &beta), &fd));
    }
    ensure(l2 < 1e-5 && smooth < 1e-5, || format!("relative errors {l2:.1e} (L2), {smooth:.1e} (L1 smooth part)"))?;
    Ok(format!("20 points, worst relative error {l2:.1e} (L2), {smooth:.1e} (L1 smooth part)"))
}

fn category_logs(n_choices: usize, seed: u64) -> Result<Vec<ChoiceLog>, String> {
    let reps = synthetic_candidates(200, 2, 1, seed).map_err(|e| e.to_string())?;
    let rep = &reps[0].1;
    let mut rng = rng_from_seed(seed);
    let mut logs = Vec::new();
    let mut left = n_choices;
    while left > 0 {
        let task = generate_task(rep, "f0", TaskKind::Category, child_seed(seed, logs.len() as u64)).map_err(|e| e.to_string())?;
        let take = left.min(task.trials.len());
        let mut log = ChoiceLog::new(&format!("s{}", logs.len()), &format!("p{}", logs.len()), task);
        for t in 0..take {
            let rec = ChoiceRecord::from_task(&log.task, t, rng.random_range(0..2), "f", 0.0, "2026-01-01T00:00:00.000Z".into())
                .map_err(|e| e.to_string())?;
            log.records.push(rec);
        }
        if take == log.task.trials.len() {
            log.status = SessionStatus::Completed;
        }
        left -= take;
        logs.push(log);
    }
    Ok(logs)
}

fn chance_identity() -> Outcome {
    let mut parts = Vec::new();
    for n in [60usize, 120, 4920, 10920] {
        let logs = category_logs(n, n as u64)?;
        let preds: Vec<TrajectoryPrediction> = logs
            .iter()
            .map(|log| TrajectoryPrediction {
                task_kind: TaskKind::Category,
                learner: LearnerKind::LogisticL2,
                alpha: None,
                trials: (0..log.task.trials.len())
                    .map(|trial| TrialPrediction {
                        trial,
                        p_one: Some(0.5),
                        values: None,
                        model_choice: 0,
                        model_correct: false,
                        converged: true,
                        hyperparams: None,
                    })
                    .collect(),
                accuracy: 0.5,
                converged: true,
            })
            .collect();
        let score = loo_cv_nll(&preds, &logs, &PolicyOptions::default()).map_err(|e| e.to_string())?;
        let expected = n as f64 * std::f64::consts::LN_2;
        ensure((score.total_nll - expected).abs() <= 1e-6 * n as f64, || {
            format!("n={n}: {} vs {expected}", score.total_nll)
        })?;
        parts.push(format!("n={n}: {:.1}", score.total_nll));
    }
    Ok(parts.join(", "))
}

fn glmm_recovery() -> Outcome {
    let (groups, per) = (100, 100);
    let mut good = 0;
    let mut slopes = Vec::new();
    for seed in 0..20 {
        let mut rng = rng_from_seed(child_seed(5, seed));
        let intercepts: Vec<f64> = (0..groups).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let x: Vec<f64> = (0..groups * per).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| f64::from(u8::from(rng.random::<f64>() < sigmoid(intercepts[i / per] + v))))
            .collect();
        let mut table = DesignTable::new(x.len());
        table.add_numeric("x", x).map_err(|e| e.to_string())?;
        table.add_numeric("y", y).map_err(|e| e.to_string())?;
        table
            .add_factor("g", (0..groups * per).map(|r| format!("g{}", r / per)).collect())
            .map_err(|e| e.to_string())?;
        let fit = fit_glmm(&table, &GlmmSpec::new("y", "g").fixed(&["x"]).random(&[]).standardized(false))
            .map_err(|e| e.to_string())?;
        let slope = fit.coefficient("x").ok_or("no slope")?.estimate;
        slopes.push(slope);
        if (slope - 1.0).abs() <= 0.15 {
            good += 1;
        }
    }

    let mut rng = rng_from_seed(77);
    let (groups, per) = (50, 40);
    let x: Vec<f64> = (0..groups * per).map(|_| rng.sample(StandardNormal)).collect();
    let y: Vec<f64> = x.iter().map(|&v| f64::from(u8::from(rng.random::<f64>() < sigmoid(0.3 + v)))).collect();
    let mut table = DesignTable::new(x.len());
    table.add_numeric("x", x.clone()).map_err(|e| e.to_string())?;
    table.add_numeric("y", y.clone()).map_err(|e| e.to_string())?;
    table
        .add_factor("g", (0..x.len()).map(|r| format!("g{}", r / per)).collect())
        .map_err(|e| e.to_string())?;
    let fit = fit_glmm(&table, &GlmmSpec::new("y", "g").fixed(&["x"]).random(&[]).standardized(false))
        .map_err(|e| e.to_string())?;
    let design = DMatrix::from_fn(x.len(), 2, |r, c| if c == 0 { 1.0 } else { x[r] });
    let pooled = fit_logistic(&design, &y, 1e-10, Penalty::L2, &LogisticOptions::default(), None).map_err(|e| e.to_string())?;
    let gap = (fit.coefficient("(Intercept)").ok_or("no intercept")?.estimate - pooled.beta[0])
        .abs()
        .max((fit.coefficient("x").ok_or("no slope")?.estimate - pooled.beta[1]).abs());

    let (lo, hi) = slopes.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
    let detail = format!("{good}/20 slopes within 0.15 (range {lo:.3}..{hi:.3}), pooled gap {gap:.1e}");
    ensure(good >= 18 && gap < 0.02, || detail.clone())?;
    Ok(detail)
}

fn ard_sparse() -> Outcome {
    let mut good = 0;
    for seed in 0..20 {
        let mut rng = rng_from_seed(child_seed(6, seed));
        let x = gaussian(50, 10, &mut rng);
        let r = DVector::from_iterator(50, (0..50).map(|i| 3.0 * x[(i, 1)] + 0.01 * rng.sample::<f64, _>(StandardNormal)));
        let fit = ard_fit(&x, &r, &ArdOptions::default()).map_err(|e| e.to_string())?;
        if fit.support() == vec![1] && (fit.weights[1] - 3.0).abs() <= 0.1 {
            good += 1;
        }
    }
    let detail = format!("{good}/20 seeds with support {{1}} and weight 3 +- 0.1");
    ensure(good >= 19, || detail.clone())?;
    Ok(detail)
}

fn representation_recovery() -> Outcome {
    let runs = 40u64;
    let mut parts = Vec::new();
    let mut all_ok = true;
    for kind in [TaskKind::Category, TaskKind::Reward] {
        let mut first = 0;
        let mut max_cka = 0.0f64;
        for run in 0..runs {
            let seed = child_seed(7, run);
            let candidates = synthetic_candidates(300, 50, 4, seed).map_err(|e| e.to_string())?;
            let cka = pairwise_cka(&candidates).map_err(|e| e.to_string())?;
            for i in 0..4 {
                for j in 0..i {
                    max_cka = max_cka.max(cka.get(&candidates[i].0, &candidates[j].0).ok_or("missing CKA")?);
                }
            }
            let mut config = RecoveryConfig::new(kind, seed);
            config.policy.audit_rate = 0.0;
            if kind == TaskKind::Category {
                config.learner.alpha_grid = vec![1.0];
            }
            let report = recovery_experiment("rep0", &candidates, 20, &config).map_err(|e| e.to_string())?;
            if report.recovered() {
                first += 1;
            }
        }
        let ok = first * 100 >= 95 * runs as usize && max_cka < 0.3;
        all_ok &= ok;
        parts.push(format!("{kind}: rank 1 in {first}/{runs} (max pairwise CKA {max_cka:.3})"));
    }
    let detail = parts.join(", ");
    ensure(all_ok, || detail.clone())?;
    Ok(detail)
}

fn onset_logs(kind: TaskKind, n_agents: usize, greedy: bool, lapse: f64, seed: u64) -> Result<Vec<ChoiceLog>, String> {
    let mut rng = rng_from_seed(seed);
    let ids: Vec<String> = (0..200).map(|i| format!("s{i:03}")).collect();
    let rep = EmbeddingMatrix::new(ids, vec!["f0".into()], gaussian(200, 1, &mut rng)).map_err(|e| e.to_string())?;
    (0..n_agents)
        .map(|a| {
            let agent_seed = child_seed(seed, a as u64 + 1);
            let task = generate_task(&rep, "f0", kind, child_seed(agent_seed, 0)).map_err(|e| e.to_string())?;
            let mut agent = AgentConfig::new("f0-only", kind, agent_seed);
            agent.greedy = greedy;
            agent.lapse = lapse;
            if kind == TaskKind::Category {
                agent.learner.alpha_grid = vec![1.0];
            }
            simulate_participant(&task, &rep, &agent).map_err(|e| e.to_string())
        })
        .collect()
}

fn onset_of(logs: &[ChoiceLog], alpha: f64) -> Result<(Option<usize>, usize), String> {
    let table = AccuracyTable::from_logs(logs).map_err(|e| e.to_string())?;
    Ok((learning_onset(&table, 0.5, alpha).map_err(|e| e.to_string())?, table.n_trials()))
}

fn learning_onset_analogue() -> Outcome {
    let mut greedy = Vec::new();
    for run in 0..10 {
        for kind in [TaskKind::Category, TaskKind::Reward] {
            let logs = onset_logs(kind, 20, true, 0.0, child_seed(8, run))?;
            let (onset, _) = onset_of(&logs, 0.05)?;
            greedy.push(onset.map(|t| t + 1));
        }
    }
    let greedy_ok = greedy.iter().all(|o| o.is_some_and(|t| t <= 10));
    let latest = greedy.iter().map(|o| o.unwrap_or(usize::MAX)).max().unwrap_or(0);

    let runs = 20;
    let (mut none_corrected, mut none_raw) = (0, 0);
    for run in 0..runs {
        let logs = onset_logs(TaskKind::Category, 20, false, 1.0, child_seed(9, run))?;
        let n_trials = logs[0].task.trials.len();
        if onset_of(&logs, 0.05 / n_trials as f64)?.0.is_none() {
            none_corrected += 1;
        }
        if onset_of(&logs, 0.05)?.0.is_none() {
            none_raw += 1;
        }
    }
    let lapse_ok = none_corrected * 10 >= 9 * runs;
    let detail = format!(
        "greedy onset <= trial {latest} in 20/20 runs; pure-lapse none found in {none_corrected}/{runs} runs at \
         familywise alpha .05 ({none_raw}/{runs} at per-trial alpha .05)"
    );
    ensure(greedy_ok && lapse_ok, || detail.clone())?;
    Ok(detail)
}

fn pair_count_tau(x: &[f64], y: &[f64]) -> (i64, f64) {
    let (mut s, mut tx, mut ty, mut pairs) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            pairs += 1;
            let dx = (x[i] - x[j]).signum() as i64 * i64::from(x[i] != x[j]);
            let dy = (y[i] - y[j]).signum() as i64 * i64::from(y[i] != y[j]);
            s += dx * dy;
            tx += i64::from(dx == 0);
            ty += i64::from(dy == 0);
        }
    }
    (s, s as f64 / (((pairs - tx) * (pairs - ty)) as f64).sqrt())
}

fn statistics_oracles() -> Outcome {
    let t = t_test_one_sided(&[1.0, 2.0, 3.0], 0.0).map_err(|e| e.to_string())?;
    ensure((t.t - 3.464).abs() < 1e-3 && t.df == 2 && (t.p - 0.0371).abs() < 1e-3, || {
        format!("t={} df={} p={}", t.t, t.df, t.p)
    })?;
    let mut worst = 0.0f64;
    for v in 0..100 {
        let mut rng = rng_from_seed(child_seed(10, v));
        let n = rng.random_range(5..80);
        let levels = rng.random_range(2..12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let (s, tau) = pair_count_tau(&x, &y);
        let got = kendall_tau_b(&x, &y).map_err(|e| format!("vector {v}: {e}"))?;
        ensure(got.concordant_minus_discordant == s, || {
            format!("vector {v}: S {} vs oracle {s}", got.concordant_minus_discordant)
        })?;
        worst = worst.max((got.tau_b - tau).abs());
    }
    ensure(worst < 1e-12, || format!("tau-b gap {worst:.1e}"))?;
    Ok(format!("t={:.4} df={} p={:.4}; 100 vectors, S exact, tau-b gap {worst:.1e}", t.t, t.df, t.p))
}

fn task_contracts() -> Outcome {
    let reps = synthetic_candidates(300, 3, 1, 11).map_err(|e| e.to_string())?;
    let rep = &reps[0].1;
    for seed in 0..20 {
        let cat = generate_task(rep, "f1", TaskKind::Category, seed).map_err(|e| e.to_string())?;
        let ones = cat.trials.iter().filter(|t| t.label == Some(1)).count();
        ensure(ones == 60 && cat.trials.len() == 120, || format!("seed {seed}: {ones}/{} in class 1", cat.trials.len()))?;
        let reward = generate_task(rep, "f1", TaskKind::Reward, seed).map_err(|e| e.to_string())?;
        let all: Vec<f64> = reward.trials.iter().flat_map(|t| t.rewards.clone().unwrap_or_default()).collect();
        let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        ensure(lo == 0.0 && hi == 100.0, || format!("seed {seed}: rewards span {lo}..{hi}"))?;
        for task in [&cat, &reward] {
            let again = generate_task(rep, "f1", task.kind, seed).map_err(|e| e.to_string())?;
            ensure(again.to_json().map_err(|e| e.to_string())? == task.to_json().map_err(|e| e.to_string())?, || {
                format!("seed {seed}: {} task differs on regeneration", task.kind)
            })?;
        }
    }
    Ok("20 seeds: 60/60 category split, rewards attain 0 and 100, regeneration byte-identical".into())
}

fn repscope(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_repscope"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("repscope {} failed: {}", args.first().unwrap_or(&""), String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(bytes) = fs::read(&p) {
                out.insert(p.strip_prefix(dir).unwrap_or(&p).display().to_string(), bytes);
            }
        }
    }
    out
}

fn pipeline(root: &Path, inputs: &Path) -> Result<(), String> {
    let p = |path: &Path| path.to_str().unwrap_or_default().to_string();
    let (sim, cmp, rsa, stats) = (root.join("simulate"), root.join("compare"), root.join("rsa"), root.join("stats"));
    let manifest = p(&inputs.join("reps.json"));
    repscope(&[
        "simulate", "--embedding", &p(&inputs.join("rep0.csv")), "--task-kind", "category", "--agents", "6",
        "--alpha-grid", "1", "--seed", "21", "--out", &p(&sim),
    ])?;
    repscope(&["compare", "--manifest", &manifest, "--logs", &p(&sim.join("logs")), "--alpha-grid", "1", "--out", &p(&cmp)])?;
    repscope(&["rsa", "--manifest", &manifest, "--anchor", "rep0", "--references", "rep1,rep2", "--out", &p(&rsa)])?;
    repscope(&[
        "stats", "--logs", &p(&sim.join("logs")), "--manifest", &manifest, "--scores", &p(&cmp.join("compare.json")),
        "--out", &p(&stats),
    ])?;
    for dir in [&sim, &cmp, &rsa, &stats] {
        repscope(&["--verify", &p(dir)])?;
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let inputs = dir.path().join("inputs");
    fs::create_dir_all(&inputs).map_err(|e| e.to_string())?;
    let mut manifest = BTreeMap::new();
    for (i, width) in [4usize, 8, 12].into_iter().enumerate() {
        let (_, emb) = synthetic_candidates(150, width, 1, i as u64).map_err(|e| e.to_string())?.remove(0);
        let name = format!("rep{i}");
        emb.save(&inputs.join(format!("{name}.csv")), EmbeddingFormat::Csv).map_err(|e| e.to_string())?;
        manifest.insert(name.clone(), format!("{name}.csv"));
    }
    fs::write(inputs.join("reps.json"), serde_json::to_string(&manifest).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    pipeline(&out, &inputs)?;
    let ta = tree(&out);
    fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
    pipeline(&out, &inputs)?;
    let tb = tree(&out);
    ensure(ta == tb, || {
        let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
        format!("rerun differs in {differing:?}")
    })?;
    Ok(format!("{} artifacts verified and byte-identical on rerun", ta.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 11] = [
        ("CKA suite", cka_suite, Some(Duration::from_secs(30))),
        ("Bayesian ridge prediction", bayes_ridge, None),
        ("logistic gradient check", gradient_check, None),
        ("chance identity", chance_identity, None),
        ("GLMM recovery", glmm_recovery, Some(Duration::from_secs(300))),
        ("ARD sparse recovery", ard_sparse, None),
        ("representation recovery", representation_recovery, Some(Duration::from_secs(600))),
        ("learning onset", learning_onset_analogue, None),
        ("statistics oracles", statistics_oracles, None),
        ("task generation contracts", task_contracts, None),
        ("end-to-end CLI pipeline", end_to_end, None),
    ];
    // REPSCOPE_ACCEPTANCE=4,11 runs a subset while iterating
    let only: Option<Vec<usize>> = std::env::var("REPSCOPE_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        let start = Instant::now();
        let mut outcome = check();
        let elapsed = start.elapsed();
        if let (Ok(detail), Some(limit)) = (&outcome, budget) {
            if elapsed > *limit {
                outcome = Err(format!("{detail}; took {elapsed:.1?}, budget {limit:?}"));
            }
        }
        let (verdict, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {}: {verdict} {name} ({detail}; {:.1}s)", i + 1, elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
