use std::path::{Path, PathBuf};

use rayon::prelude::*;
use repscope::choice::{load_logs, ChoiceLog};
use repscope::embedding::{EmbeddingFormat, EmbeddingMatrix, RepresentationManifest};
use repscope::learners::{sequential_rollout, LearnerConfig};
use repscope::policy::{compare_representations, participants_to_csv, score_predictions, scores_to_csv, NllScore, PolicyOptions};
use repscope::rng::child_seed;
use repscope::rsa::{cka_difference, differences_to_csv, pairwise_cka};
use repscope::simulator::{
    default_temperature, recovery_experiment, simulate_with_trajectory, synthetic_candidates, AgentConfig,
    RecoveryConfig,
};
use repscope::stats::{
    category_learning_glmm, kendall_tau_b, learning_onset, reward_learning_glmm, summary_to_csv, AccuracyTable,
};
use repscope::task::{generate_task_with, ImageManifest, TaskKind, TaskSpec};
use repscope_server::model::{BonusFormula, ComprehensionCheck};
use serde_json::json;

use crate::run::Run;
use crate::settings::{required, Settings};
use crate::CliError;

const DEFAULT_SEED: u64 = 0;
const DEFAULT_AGENTS: usize = 20;
const DEFAULT_CANDIDATES: usize = 4;
const SYNTHETIC_STIMULI: usize = 200;
const SYNTHETIC_FEATURES: usize = 20;
const CHANCE: f64 = 0.5;

fn ensure_exists(path: &Path, flag: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{flag} {} does not exist", path.display())))
    }
}

fn input(value: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    let p = required(value, flag)?;
    ensure_exists(&p, flag)?;
    Ok(p)
}

fn optional_input(value: &Option<PathBuf>, flag: &str) -> Result<Option<PathBuf>, CliError> {
    value.as_ref().map(|p| ensure_exists(p, flag).map(|_| p.clone())).transpose()
}

fn load_embedding(path: &Path) -> Result<(String, EmbeddingMatrix), CliError> {
    let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let emb = EmbeddingMatrix::load(path, EmbeddingFormat::from_path(path)).map_err(|e| e.in_file(path))?;
    Ok((name, emb))
}

fn load_manifest(path: &Path) -> Result<Vec<(String, EmbeddingMatrix)>, CliError> {
    Ok(RepresentationManifest::load(path)?.load_all()?)
}

/// Logs of a single task kind.
fn load_kind_logs(path: &Path) -> Result<(TaskKind, Vec<ChoiceLog>), CliError> {
    let logs = load_logs(path)?;
    let Some(first) = logs.first() else {
        return Err(CliError::Usage(format!("no choice logs in {}", path.display())));
    };
    let kind = first.kind();
    if let Some(other) = logs.iter().find(|l| l.kind() != kind) {
        return Err(CliError::Usage(format!(
            "logs mix task kinds ({} in {}, {} in {})",
            kind,
            first.session_id,
            other.kind(),
            other.session_id
        )));
    }
    Ok((kind, logs))
}

fn learner_config(s: &Settings, kind: TaskKind) -> Result<LearnerConfig, CliError> {
    let mut c = LearnerConfig::for_task(kind);
    if let Some(l) = s.learner {
        c.kind = l;
    }
    if let Some(g) = &s.alpha_grid {
        c.alpha_grid = g.clone();
    }
    c.pca_components = s.pca_k.or(c.pca_components);
    c.validate()?;
    Ok(c)
}

fn policy_options(s: &Settings) -> PolicyOptions {
    let mut o = PolicyOptions::default();
    if let Some(r) = s.random_effects {
        o.random_effects = r;
    }
    o
}

/// Run `f` on a pool of `--workers` threads (default: all cores).
fn with_workers<T: Send>(s: &Settings, f: impl FnOnce() -> Result<T, CliError> + Send) -> Result<T, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = s.workers {
        if w == 0 {
            return Err(CliError::Usage("--workers must be positive".into()));
        }
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn n_stimuli(kind: TaskKind, trials: Option<usize>) -> Result<usize, CliError> {
    let trials = trials.unwrap_or_else(|| kind.standard_trials());
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    Ok(trials * kind.stimuli_per_trial())
}

trait InFile {
    fn in_file(self, path: &Path) -> repscope::error::Error;
}

impl InFile for repscope::error::Error {
    fn in_file(self, path: &Path) -> repscope::error::Error {
        use repscope::error::Error as E;
        match self {
            E::Validation(m) => E::Validation(format!("{}: {m}", path.display())),
            E::Io(io) => E::Parse {
                location: path.display().to_string(),
                message: io.to_string(),
            },
            other => other,
        }
    }
}

pub fn gen_task(s: Settings) -> Result<(), CliError> {
    s.check_allowed("gen-task", &["embedding", "feature", "task_kind", "trials", "seed", "out"])?;
    let emb_path = input(&s.embedding, "embedding")?;
    let feature = required(&s.feature, "feature")?;
    let kind = required(&s.task_kind, "task-kind")?;
    let seed = s.seed.unwrap_or(DEFAULT_SEED);
    let n = n_stimuli(kind, s.trials)?;
    let (_, emb) = load_embedding(&emb_path)?;
    let task = generate_task_with(&emb, &feature, kind, seed, n)?;

    let config = json!({"feature": feature, "task_kind": kind, "trials": task.trials.len()});
    let mut run = Run::start(&s.out()?, "gen-task", Some(seed), config, &[("embedding", &emb_path)])?;
    run.json("task.json", &task)?;
    run.finish()?;
    println!("{kind} task on '{feature}': {} trials", task.trials.len());
    Ok(())
}

pub fn simulate(s: Settings) -> Result<(), CliError> {
    s.check_allowed(
        "simulate",
        &[
            "embedding", "task", "feature", "task_kind", "trials", "seed", "learner", "alpha_grid", "pca_k", "agents",
            "temperature", "lapse", "greedy", "workers", "out",
        ],
    )?;
    let emb_path = input(&s.embedding, "embedding")?;
    let task_path = optional_input(&s.task, "task")?;
    let explicit: Option<TaskSpec> = match &task_path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Some(TaskSpec::from_json(&text).map_err(|e| e.in_file(p))?)
        }
        None => None,
    };
    if explicit.is_some() && (s.feature.is_some() || s.trials.is_some() || s.task_kind.is_some()) {
        return Err(CliError::Usage("--task fixes the task; drop --feature, --trials and --task-kind".into()));
    }
    let kind = match &explicit {
        Some(t) => t.kind,
        None => required(&s.task_kind, "task-kind")?,
    };
    let (name, emb) = load_embedding(&emb_path)?;
    if let Some(f) = &s.feature {
        if emb.feature_index(f).is_none() {
            return Err(CliError::Usage(format!("--feature '{f}' is not a column of {}", emb_path.display())));
        }
    }
    let seed = s.seed.unwrap_or(DEFAULT_SEED);
    let agents = s.agents.unwrap_or(DEFAULT_AGENTS);
    if agents == 0 {
        return Err(CliError::Usage("--agents must be positive".into()));
    }
    let learner = learner_config(&s, kind)?;
    let temperature = s.temperature.unwrap_or_else(|| default_temperature(kind));
    let lapse = s.lapse.unwrap_or(0.0);
    let greedy = s.greedy.unwrap_or(false);
    let n = n_stimuli(kind, s.trials)?;
    let width = agents.to_string().len().max(3);

    let logs = with_workers(&s, || {
        (0..agents)
            .into_par_iter()
            .map(|a| {
                let agent_seed = child_seed(seed, a as u64);
                let task = match &explicit {
                    Some(t) => t.clone(),
                    None => {
                        let features = emb.feature_names();
                        let feature = s.feature.clone().unwrap_or_else(|| features[a % features.len()].clone());
                        generate_task_with(&emb, &feature, kind, child_seed(agent_seed, 0), n)?
                    }
                };
                let agent = AgentConfig {
                    representation: name.clone(),
                    learner: learner.clone(),
                    temperature,
                    greedy,
                    lapse,
                    seed: agent_seed,
                };
                let (log, _) = simulate_with_trajectory(
                    &task,
                    &emb,
                    &agent,
                    &format!("sim-{a:0width$}"),
                    &format!("agent-{a:0width$}"),
                )?;
                Ok(log)
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let config = json!({
        "representation": name,
        "task_kind": kind,
        "feature": s.feature,
        "trials": logs[0].task.trials.len(),
        "agents": agents,
        "learner": learner,
        "temperature": temperature,
        "lapse": lapse,
        "greedy": greedy,
    });
    let mut inputs: Vec<(&str, &Path)> = vec![("embedding", &emb_path)];
    if let Some(p) = &task_path {
        inputs.push(("task", p));
    }
    let mut run = Run::start(&s.out()?, "simulate", Some(seed), config, &inputs)?;
    let mut summary = Vec::new();
    for log in &logs {
        run.json(&format!("logs/{}.json", log.session_id), log)?;
        let acc = log.correctness().iter().filter(|c| **c).count() as f64 / log.records.len() as f64;
        summary.push(json!({
            "session_id": log.session_id,
            "participant_id": log.participant_id,
            "feature": log.task.condition_feature,
            "accuracy": acc,
        }));
    }
    let mean = summary.iter().map(|v| v["accuracy"].as_f64().unwrap_or(0.0)).sum::<f64>() / logs.len() as f64;
    run.json("simulate.json", &json!({"agents": summary, "mean_accuracy": mean}))?;
    run.finish()?;
    println!("simulated {agents} {kind} agents on '{name}': mean accuracy {mean:.3}");
    Ok(())
}

fn print_scores(scores: &[NllScore]) {
    println!("{:<24} {:>12} {:>12} {:>8}", "representation", "total_nll", "chance_nll", "choices");
    for sc in scores {
        println!(
            "{:<24} {:>12.3} {:>12.3} {:>8}",
            sc.representation, sc.total_nll, sc.chance_nll, sc.n_choices
        );
    }
}

pub fn fit(s: Settings) -> Result<(), CliError> {
    s.check_allowed(
        "fit",
        &["embedding", "logs", "learner", "alpha_grid", "pca_k", "random_effects", "workers", "out"],
    )?;
    let emb_path = input(&s.embedding, "embedding")?;
    let logs_path = input(&s.logs, "logs")?;
    let (name, emb) = load_embedding(&emb_path)?;
    let (kind, logs) = load_kind_logs(&logs_path)?;
    let learner = learner_config(&s, kind)?;
    let options = policy_options(&s);
    let (preds, score) = with_workers(&s, || {
        let preds = logs
            .par_iter()
            .map(|log| {
                sequential_rollout(&log.task, &emb, &learner).map_err(|e| repscope::error::Error::InRepresentation {
                    representation: name.clone(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let score = score_predictions(&name, &preds, &logs, &options)?;
        Ok((preds, score))
    })?;

    let config = json!({"representation": name, "task_kind": kind, "learner": learner, "policy": options});
    let mut run = Run::start(&s.out()?, "fit", None, config, &[("embedding", &emb_path), ("logs", &logs_path)])?;
    run.json("fit.json", &score)?;
    run.json("trajectories.json", &json!({"trajectories": preds}))?;
    run.csv("fit_participants.csv", &participants_to_csv(std::slice::from_ref(&score))?)?;
    run.finish()?;
    print_scores(std::slice::from_ref(&score));
    Ok(())
}

pub fn compare(s: Settings) -> Result<(), CliError> {
    s.check_allowed(
        "compare",
        &["manifest", "logs", "learner", "alpha_grid", "pca_k", "random_effects", "workers", "out"],
    )?;
    let manifest_path = input(&s.manifest, "manifest")?;
    let logs_path = input(&s.logs, "logs")?;
    let reps = load_manifest(&manifest_path)?;
    let (kind, logs) = load_kind_logs(&logs_path)?;
    let learner = learner_config(&s, kind)?;
    let options = policy_options(&s);
    let scores = with_workers(&s, || Ok(compare_representations(&reps, &logs, &learner, &options)?))?;

    let config = json!({"task_kind": kind, "learner": learner, "policy": options});
    let mut run = Run::start(
        &s.out()?,
        "compare",
        None,
        config,
        &[("manifest", &manifest_path), ("logs", &logs_path)],
    )?;
    run.json("compare.json", &json!({"scores": scores}))?;
    run.csv("nll_table.csv", &scores_to_csv(&scores)?)?;
    run.csv("nll_participants.csv", &participants_to_csv(&scores)?)?;
    run.finish()?;
    print_scores(&scores);
    Ok(())
}

pub fn rsa(s: Settings) -> Result<(), CliError> {
    s.check_allowed("rsa", &["manifest", "anchor", "references", "workers", "out"])?;
    let manifest_path = input(&s.manifest, "manifest")?;
    let reps = load_manifest(&manifest_path)?;
    let find = |n: &str| {
        reps.iter()
            .find(|(name, _)| name == n)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("'{n}' is not in the manifest")))
    };
    let (matrix, differences) = with_workers(&s, || {
        let matrix = pairwise_cka(&reps)?;
        let differences = match (&s.anchor, &s.references) {
            (None, None) => None,
            (Some(anchor), Some(refs)) if !refs.is_empty() => {
                let anchor = find(anchor)?;
                let references = refs.iter().map(|r| find(r)).collect::<Result<Vec<_>, _>>()?;
                let others: Vec<_> = reps
                    .iter()
                    .filter(|(n, _)| *n != anchor.0 && !refs.contains(n))
                    .cloned()
                    .collect();
                Some(cka_difference(&anchor, &references, &others)?)
            }
            _ => return Err(CliError::Usage("--anchor and --references go together".into())),
        };
        Ok((matrix, differences))
    })?;

    let config = json!({"anchor": s.anchor, "references": s.references});
    let mut run = Run::start(&s.out()?, "rsa", None, config, &[("manifest", &manifest_path)])?;
    run.csv("cka_matrix.csv", &matrix.to_csv()?)?;
    if let Some(d) = &differences {
        run.csv("cka_difference.csv", &differences_to_csv(d)?)?;
    }
    run.json(
        "rsa.json",
        &json!({"names": matrix.names, "cka": matrix.values, "pairs": matrix.results(), "differences": differences}),
    )?;
    run.finish()?;
    for r in matrix.results().iter().filter(|r| r.a != r.b) {
        println!("{:<20} {:<20} {:.4}", r.a, r.b, r.cka);
    }
    Ok(())
}

pub fn stats(s: Settings) -> Result<(), CliError> {
    s.check_allowed("stats", &["logs", "onset_alpha", "manifest", "scores", "out"])?;
    let logs_path = input(&s.logs, "logs")?;
    let manifest_path = optional_input(&s.manifest, "manifest")?;
    let scores_path = optional_input(&s.scores, "scores")?;
    if manifest_path.is_some() != scores_path.is_some() {
        return Err(CliError::Usage("--manifest and --scores go together".into()));
    }
    let onset_alpha = s.onset_alpha.unwrap_or(0.05);
    if !(onset_alpha > 0.0 && onset_alpha < 1.0) {
        return Err(CliError::Usage("--onset-alpha must lie in (0, 1)".into()));
    }
    let (kind, logs) = load_kind_logs(&logs_path)?;
    let table = AccuracyTable::from_logs(&logs)?;
    let summary = table.summarize(CHANCE)?;
    let onset = learning_onset(&table, CHANCE, onset_alpha)?;
    let glmm = match kind {
        TaskKind::Category => category_learning_glmm(&logs),
        TaskKind::Reward => reward_learning_glmm(&logs),
    };
    let (glmm, glmm_error) = match glmm {
        Ok(fit) => (Some(fit), None),
        Err(e) => {
            log::warn!("behavioral mixed model failed: {e}");
            (None, Some(e.to_string()))
        }
    };
    let feature_count = match (&manifest_path, &scores_path) {
        (Some(m), Some(sc)) => {
            let counts: std::collections::BTreeMap<String, usize> = load_manifest(m)?
                .into_iter()
                .map(|(n, e)| (n, e.n_features()))
                .collect();
            let scores: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sc)?)?;
            let scores: Vec<NllScore> = serde_json::from_value(scores["scores"].clone())?;
            let (x, y): (Vec<f64>, Vec<f64>) = scores
                .iter()
                .map(|sc| {
                    counts
                        .get(&sc.representation)
                        .map(|&c| (c as f64, sc.total_nll))
                        .ok_or_else(|| CliError::Usage(format!("'{}' is not in the manifest", sc.representation)))
                })
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .unzip();
            Some(kendall_tau_b(&x, &y)?)
        }
        _ => None,
    };

    let config = json!({"task_kind": kind, "chance": CHANCE, "onset_alpha": onset_alpha});
    let mut inputs: Vec<(&str, &Path)> = vec![("logs", &logs_path)];
    if let (Some(m), Some(sc)) = (&manifest_path, &scores_path) {
        inputs.push(("manifest", m));
        inputs.push(("scores", sc));
    }
    let mut run = Run::start(&s.out()?, "stats", None, config, &inputs)?;
    run.csv("accuracy_curve.csv", &summary_to_csv(&summary)?)?;
    let means = table.trial_means();
    run.json(
        "stats.json",
        &json!({
            "task_kind": kind,
            "n_participants": table.n_participants(),
            "n_trials": table.n_trials(),
            "mean_accuracy": means.iter().sum::<f64>() / means.len() as f64,
            "learning_onset": onset,
            "glmm": glmm,
            "glmm_error": glmm_error,
            "feature_count_vs_nll": feature_count,
        }),
    )?;
    run.finish()?;
    match onset {
        Some(t) => println!("learning onset: trial {t} (alpha {onset_alpha})"),
        None => println!("learning onset: none found (alpha {onset_alpha})"),
    }
    Ok(())
}

pub fn recover(s: Settings) -> Result<(), CliError> {
    s.check_allowed(
        "recover",
        &[
            "manifest", "generating", "candidates", "task_kind", "agents", "seed", "learner", "alpha_grid", "pca_k",
            "temperature", "lapse", "greedy", "random_effects", "workers", "out",
        ],
    )?;
    let manifest_path = optional_input(&s.manifest, "manifest")?;
    if manifest_path.is_some() && s.candidates.is_some() {
        return Err(CliError::Usage("--candidates only applies without --manifest".into()));
    }
    let seed = s.seed.unwrap_or(DEFAULT_SEED);
    let agents = s.agents.unwrap_or(DEFAULT_AGENTS);
    if agents == 0 {
        return Err(CliError::Usage("--agents must be positive".into()));
    }
    let candidates = match &manifest_path {
        Some(m) => load_manifest(m)?,
        None => {
            let n = s.candidates.unwrap_or(DEFAULT_CANDIDATES);
            if n < 2 {
                return Err(CliError::Usage("--candidates must be at least 2".into()));
            }
            synthetic_candidates(SYNTHETIC_STIMULI, SYNTHETIC_FEATURES, n, seed)?
        }
    };
    let generating = match &s.generating {
        Some(g) if candidates.iter().any(|(n, _)| n == g) => g.clone(),
        Some(g) => return Err(CliError::Usage(format!("--generating '{g}' is not a candidate"))),
        None => candidates[0].0.clone(),
    };
    let kinds = match s.task_kind {
        Some(k) => vec![k],
        None => vec![TaskKind::Category, TaskKind::Reward],
    };
    let configs = kinds
        .iter()
        .map(|&kind| {
            let mut c = RecoveryConfig::new(kind, seed);
            c.learner = learner_config(&s, kind)?;
            c.policy = policy_options(&s);
            if let Some(t) = s.temperature {
                c.temperature = t;
            }
            c.lapse = s.lapse.unwrap_or(c.lapse);
            c.greedy = s.greedy.unwrap_or(c.greedy);
            Ok(c)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let reports = with_workers(&s, || {
        configs
            .iter()
            .map(|c| Ok(recovery_experiment(&generating, &candidates, agents, c)?))
            .collect::<Result<Vec<_>, CliError>>()
    })?;

    let config = json!({
        "generating": generating,
        "candidates": candidates.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "synthetic": manifest_path.is_none().then_some(json!({"stimuli": SYNTHETIC_STIMULI, "features": SYNTHETIC_FEATURES})),
        "agents": agents,
        "runs": configs,
    });
    let inputs: Vec<(&str, &Path)> = manifest_path.iter().map(|p| ("manifest", p.as_path())).collect();
    let mut run = Run::start(&s.out()?, "recover", Some(seed), config, &inputs)?;
    let mut csv = String::from("task_kind,representation,position,total_nll,margin\n");
    let mut out = Vec::new();
    for (c, r) in configs.iter().zip(&reports) {
        let gen_nll = r.scores[r.rank - 1].total_nll;
        for (i, sc) in r.scores.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                c.task_kind,
                sc.representation,
                i + 1,
                sc.total_nll,
                sc.total_nll - gen_nll
            ));
        }
        out.push(json!({"task_kind": c.task_kind, "report": r}));
        println!(
            "{}: generating '{}' ranked {}/{} (min margin {:.3} nats, mean {:.3})",
            c.task_kind,
            generating,
            r.rank,
            r.scores.len(),
            r.min_margin().unwrap_or(f64::NAN),
            r.mean_margin().unwrap_or(f64::NAN)
        );
    }
    run.json("recovery.json", &json!({"runs": out}))?;
    run.csv("recovery.csv", &csv)?;
    run.finish()?;
    Ok(())
}

pub fn serve(s: Settings) -> Result<(), CliError> {
    s.check_allowed(
        "serve",
        &[
            "out", "serve_addr", "embedding", "image_manifest", "comprehension", "bonus_base", "bonus_per_correct",
            "bonus_per_point", "require_comprehension",
        ],
    )?;
    let out = s.out()?;
    let addr = s.serve_addr.unwrap_or_else(|| ([127, 0, 0, 1], 8080).into());
    let mut config = repscope_server::ServerConfig::new(&out);
    let emb_path = optional_input(&s.embedding, "embedding")?;
    let image_path = optional_input(&s.image_manifest, "image-manifest")?;
    let comprehension_path = optional_input(&s.comprehension, "comprehension")?;
    if let Some(p) = &emb_path {
        config.embedding = Some(load_embedding(p)?.1);
    }
    if let Some(p) = &image_path {
        config.manifest = Some(ImageManifest::load(p)?);
        config.manifest_root = p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    }
    if let Some(p) = &comprehension_path {
        config.comprehension = serde_json::from_str::<ComprehensionCheck>(&std::fs::read_to_string(p)?)?;
    }
    let d = BonusFormula::default();
    config.bonus = BonusFormula {
        base: s.bonus_base.unwrap_or(d.base),
        per_correct: s.bonus_per_correct.unwrap_or(d.per_correct),
        per_reward_point: s.bonus_per_point.unwrap_or(d.per_reward_point),
    };
    config.require_comprehension = s.require_comprehension.unwrap_or(true);

    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    for (role, p) in [("embedding", &emb_path), ("image_manifest", &image_path), ("comprehension", &comprehension_path)] {
        if let Some(p) = p {
            inputs.push((role, p));
        }
    }
    let run_config = json!({
        "serve_addr": addr.to_string(),
        "bonus": config.bonus,
        "require_comprehension": config.require_comprehension,
    });
    Run::start(&out, "serve", None, run_config, &inputs)?.finish()?;

    let state = repscope_server::AppState::open(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    println!("serving on http://{addr} (data in {})", out.display());
    runtime.block_on(repscope_server::serve(addr, state))?;
    Ok(())
}
