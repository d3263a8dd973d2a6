//! Command implementations. Each returns `Ok(())` or a `CliError` whose
//! variant fixes the process exit code.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use guilearn_core::autodiff::sha256_hex;
use guilearn_core::diagnostics::{run_gradient_checks, run_oracle_checks, CheckOutcome};
use guilearn_core::env::{load_app_spec, load_task_instance, AppSpec, TaskInstance};
use guilearn_core::eval::{
    build_report, generalization_score, mean_stddev, optimal_lengths, render_gs_table,
    render_sr_table, run_eval, run_eval_with, success_rate, EpisodeResult, MetricsReport,
};
use guilearn_core::oracle::{gen_expert_dataset, OracleError, PlanPolicy};
use guilearn_core::perception::{Vocab, MAX_ELEMENT_IDS};
use guilearn_core::policy::{init_params, PolicyConfig};
use guilearn_core::rng::split_seed;
use guilearn_core::suite::{BuiltinSuite, DEMO_TASK_IDS};
use guilearn_core::trainer::{
    load_dataset, load_policy, run_hybrid, Dataset, EncodeContext, TrainError,
};

use crate::config::{resolve, Overrides, ResolvedConfig, SuiteSection};
use crate::{CliError, ConfigFlags};

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl ConfigFlags {
    fn overrides(&self, demos: Option<PathBuf>) -> Overrides {
        Overrides {
            preset: self.preset.clone(),
            seed: self.seed,
            out_dir: self.out.clone(),
            demos,
            set: self.set.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Suite loading

struct LoadedSuite {
    train: Vec<(AppSpec, TaskInstance)>,
    heldout: Vec<(AppSpec, TaskInstance)>,
    vocab: Vocab,
    train_apps: BTreeSet<String>,
    heldout_apps: BTreeSet<String>,
    /// Default demo-task selection (built-in suite only).
    demo_ids: Vec<String>,
}

fn sorted_json_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| validation(format!("cannot read directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(validation(format!(
            "no .json files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn load_custom_suite(
    apps_dir: &Path,
    tasks_dir: &Path,
    heldout_names: &[String],
) -> Result<LoadedSuite, CliError> {
    let mut apps = Vec::new();
    for path in sorted_json_files(apps_dir)? {
        apps.push(load_app_spec(&path).map_err(validation)?);
    }
    let heldout_set: BTreeSet<&str> = heldout_names.iter().map(String::as_str).collect();
    for name in &heldout_set {
        if !apps.iter().any(|a| a.app_name == *name) {
            return Err(validation(format!(
                "held-out app '{name}' does not exist in {}",
                apps_dir.display()
            )));
        }
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for path in sorted_json_files(tasks_dir)? {
        let task = load_task_instance(&path).map_err(validation)?;
        let app = apps
            .iter()
            .find(|a| a.app_name == task.app_name)
            .ok_or_else(|| {
                validation(format!(
                    "task '{}' names app '{}' which is not in {}",
                    task.task_id,
                    task.app_name,
                    apps_dir.display()
                ))
            })?
            .clone();
        if heldout_set.contains(task.app_name.as_str()) {
            heldout.push((app, task));
        } else {
            train.push((app, task));
        }
    }
    if train.is_empty() {
        return Err(validation("the training partition has no tasks"));
    }
    let (vocab, train_apps, heldout_apps) = vocab_and_partitions(&train, &heldout);
    Ok(LoadedSuite {
        train,
        heldout,
        vocab,
        train_apps,
        heldout_apps,
        demo_ids: Vec::new(),
    })
}

fn vocab_and_partitions(
    train: &[(AppSpec, TaskInstance)],
    heldout: &[(AppSpec, TaskInstance)],
) -> (Vocab, BTreeSet<String>, BTreeSet<String>) {
    let mut apps = Vec::new();
    let mut tasks = Vec::new();
    for (a, t) in train.iter().chain(heldout) {
        apps.push(a);
        tasks.push(t);
    }
    let vocab = Vocab::build(&apps, &tasks, MAX_ELEMENT_IDS);
    let train_apps = train.iter().map(|(a, _)| a.app_name.clone()).collect();
    let heldout_apps = heldout.iter().map(|(a, _)| a.app_name.clone()).collect();
    (vocab, train_apps, heldout_apps)
}

fn load_suite(resolved: &ResolvedConfig) -> Result<LoadedSuite, CliError> {
    match &resolved.suite {
        Some(SuiteSection {
            apps_dir,
            tasks_dir,
            heldout_apps,
        }) => load_custom_suite(apps_dir, tasks_dir, heldout_apps),
        None => {
            let suite = BuiltinSuite::load().map_err(runtime)?;
            let (vocab, train_apps, heldout_apps) =
                vocab_and_partitions(&suite.train, &suite.heldout);
            Ok(LoadedSuite {
                train: suite.train,
                heldout: suite.heldout,
                vocab,
                train_apps,
                heldout_apps,
                demo_ids: DEMO_TASK_IDS.iter().map(|s| s.to_string()).collect(),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// gen-demos

#[allow(clippy::too_many_arguments)]
pub fn gen_demos(
    apps_dir: Option<&Path>,
    tasks_dir: Option<&Path>,
    task_ids: Option<Vec<String>>,
    per_task: usize,
    seed: u64,
    depth_bound: usize,
    out: &Path,
    preset: &str,
) -> Result<(), CliError> {
    let suite = match (apps_dir, tasks_dir) {
        (Some(a), Some(t)) => load_custom_suite(a, t, &[])?,
        (None, None) => {
            let builtin = BuiltinSuite::load().map_err(runtime)?;
            let (vocab, train_apps, heldout_apps) =
                vocab_and_partitions(&builtin.train, &builtin.heldout);
            LoadedSuite {
                train: builtin.train,
                heldout: builtin.heldout,
                vocab,
                train_apps,
                heldout_apps,
                demo_ids: DEMO_TASK_IDS.iter().map(|s| s.to_string()).collect(),
            }
        }
        // clap's `requires` already enforces both-or-neither.
        _ => unreachable!("clap enforces --apps and --tasks together"),
    };

    let wanted: Vec<String> = match task_ids {
        Some(ids) => ids,
        None if !suite.demo_ids.is_empty() => suite.demo_ids.clone(),
        None => suite
            .train
            .iter()
            .map(|(_, t)| t.task_id.clone())
            .collect(),
    };
    let mut pairs: Vec<(&AppSpec, &TaskInstance)> = Vec::with_capacity(wanted.len());
    for id in &wanted {
        let hit = suite
            .train
            .iter()
            .chain(&suite.heldout)
            .find(|(_, t)| &t.task_id == id)
            .ok_or_else(|| validation(format!("unknown task id '{id}'")))?;
        pairs.push((&hit.0, &hit.1));
    }

    let policy = PolicyConfig::preset(preset, suite.vocab.len()).map_err(validation)?;
    let ctx = EncodeContext {
        vocab: &suite.vocab,
        policy: &policy,
    };
    let dataset = gen_expert_dataset(&ctx, &pairs, per_task, seed, depth_bound).map_err(|e| {
        match &e {
            TrainError::Oracle(OracleError::Unreachable { .. }) => validation(&e),
            TrainError::Oracle(_) | TrainError::Env(_) => validation(&e),
            _ => runtime(&e),
        }
    })?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(runtime)?;
        }
    }
    guilearn_core::trainer::save_dataset(&dataset, out).map_err(runtime)?;
    println!(
        "wrote {} expert records ({} tasks x {} demos) to {}",
        dataset.len(),
        pairs.len(),
        per_task,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn train(flags: &ConfigFlags, demos: Option<PathBuf>, ablation: &str) -> Result<(), CliError> {
    let mut resolved = resolve(flags.config.as_deref(), &flags.overrides(demos))?;
    let mut cfg = resolved.train.clone();
    match ablation {
        "none" => {}
        "no-rl" => cfg.rl_episodes = 0,
        "no-bc" => cfg.bc_epochs = 0,
        other => {
            return Err(validation(format!(
                "unknown ablation '{other}' (valid: none, no-rl, no-bc)"
            )))
        }
    }
    resolved.train = cfg.clone();

    let suite = load_suite(&resolved)?;
    let policy_config =
        PolicyConfig::preset(&resolved.preset, suite.vocab.len()).map_err(validation)?;
    let ctx = EncodeContext {
        vocab: &suite.vocab,
        policy: &policy_config,
    };

    let expert: Option<Dataset> = if cfg.bc_epochs == 0 {
        None
    } else {
        let path = resolved.demos.clone().ok_or_else(|| {
            validation("an expert dataset is required: pass --demos or set `demos` in the config (or use --ablation no-bc)")
        })?;
        if !path.exists() {
            return Err(validation(format!(
                "expert dataset {} does not exist",
                path.display()
            )));
        }
        Some(load_dataset(&path, &suite.train, &ctx).map_err(runtime)?)
    };

    std::fs::create_dir_all(&resolved.out_dir).map_err(runtime)?;
    let echo_path = resolved.out_dir.join("run-config.json");
    std::fs::write(
        &echo_path,
        serde_json::to_string_pretty(&resolved).map_err(runtime)?,
    )
    .map_err(runtime)?;

    let mut params = init_params(&policy_config, split_seed(resolved.seed, "init", 0))
        .map_err(runtime)?;
    let report = run_hybrid(
        &mut params,
        expert.as_ref(),
        &suite.train,
        &ctx,
        &cfg,
        resolved.seed,
        &resolved.out_dir,
    )
    .map_err(|e| match e {
        TrainError::MissingExpertData => validation(e),
        other => runtime(other),
    })?;

    if let Some(bc) = &report.bc {
        println!(
            "cloning: {} steps, epoch loss {:.4} -> {:.4}",
            bc.steps,
            bc.epoch_losses.first().copied().unwrap_or(f64::NAN),
            bc.epoch_losses.last().copied().unwrap_or(f64::NAN),
        );
    }
    if let Some(c) = &report.collect {
        println!(
            "collection: {}/{} episodes succeeded",
            c.successes, c.completed
        );
    }
    if let Some(qv) = &report.qv {
        println!(
            "value fit: V loss {:.4} -> {:.4}, Q loss {:.4} -> {:.4}",
            qv.v_losses.first().copied().unwrap_or(f64::NAN),
            qv.v_losses.last().copied().unwrap_or(f64::NAN),
            qv.q_losses.first().copied().unwrap_or(f64::NAN),
            qv.q_losses.last().copied().unwrap_or(f64::NAN),
        );
    }
    if let Some(pp) = &report.policy_phase {
        println!(
            "extraction: {} steps, mean weight {:.3}, max weight {:.3}",
            pp.steps, pp.mean_weight, pp.max_weight
        );
    }
    println!("run artifacts in {}", resolved.out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Serialize, Deserialize)]
pub struct SeedStat {
    pub seed: u64,
    pub success_rate: f64,
}

/// The on-disk evaluation document: the metrics report plus per-seed
/// aggregation and the fully resolved configuration (no silent defaults).
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalDocument {
    pub report: MetricsReport,
    pub per_seed: Vec<SeedStat>,
    pub success_rate_mean: f64,
    pub success_rate_stddev: f64,
    pub resolved_config: serde_json::Value,
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    flags: &ConfigFlags,
    checkpoint: &str,
    partition: &str,
    seeds: &[u64],
    model: Option<String>,
    depth_bound: usize,
    report_out: Option<PathBuf>,
) -> Result<(), CliError> {
    if seeds.is_empty() {
        return Err(validation("--seeds must name at least one seed"));
    }
    let resolved = resolve(flags.config.as_deref(), &flags.overrides(None))?;
    let suite = load_suite(&resolved)?;
    let pairs: &[(AppSpec, TaskInstance)] = match partition {
        "train" => &suite.train,
        "heldout" => {
            if suite.heldout.is_empty() {
                return Err(validation("the held-out partition has no tasks"));
            }
            &suite.heldout
        }
        other => {
            return Err(validation(format!(
                "unknown partition '{other}' (valid: train, heldout)"
            )))
        }
    };
    let lengths = optimal_lengths(pairs, depth_bound).map_err(validation)?;

    let model_name = model.unwrap_or_else(|| {
        if checkpoint == "oracle" {
            "oracle".to_string()
        } else {
            Path::new(checkpoint)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".to_string())
        }
    });

    let results: Vec<EpisodeResult> = if checkpoint == "oracle" {
        let mut policy = PlanPolicy::new(depth_bound);
        run_eval_with(
            &mut policy,
            pairs,
            &lengths,
            seeds,
            resolved.train.t_max,
            resolved.train.gamma,
        )
        .map_err(runtime)?
    } else {
        let path = Path::new(checkpoint);
        if !path.exists() {
            return Err(validation(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        let params = load_policy(path).map_err(runtime)?;
        run_eval(
            &params,
            &suite.vocab,
            pairs,
            &lengths,
            seeds,
            resolved.train.t_max,
            resolved.train.gamma,
        )
        .map_err(runtime)?
    };

    let generalization = if partition == "heldout" {
        Some(
            generalization_score(&results, &suite.heldout_apps, &suite.train_apps)
                .map_err(runtime)?,
        )
    } else {
        None
    };

    let resolved_json = serde_json::to_value(&resolved).map_err(runtime)?;
    let config_digest = sha256_hex(resolved_json.to_string().as_bytes());
    let report = build_report(
        &model_name,
        partition,
        &results,
        seeds,
        &config_digest,
        generalization,
    )
    .map_err(runtime)?;

    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let subset: Vec<EpisodeResult> = results.iter().filter(|r| r.seed == seed).cloned().collect();
        per_seed.push(SeedStat {
            seed,
            success_rate: success_rate(&subset).map_err(runtime)?,
        });
    }
    let rates: Vec<f64> = per_seed.iter().map(|s| s.success_rate).collect();
    let (mean, stddev) = mean_stddev(&rates);

    let doc = EvalDocument {
        report: report.clone(),
        per_seed,
        success_rate_mean: mean,
        success_rate_stddev: stddev,
        resolved_config: resolved_json,
    };
    let out_path = report_out.unwrap_or_else(|| {
        resolved
            .out_dir
            .join(format!("eval-{model_name}-{partition}.json"))
    });
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(runtime)?;
        }
    }
    std::fs::write(
        &out_path,
        serde_json::to_string_pretty(&doc).map_err(runtime)?,
    )
    .map_err(runtime)?;

    print!("{}", render_sr_table(std::slice::from_ref(&report)));
    if partition == "heldout" {
        print!("{}", render_gs_table(std::slice::from_ref(&report)));
    }
    println!(
        "success rate over {} seeds: mean {:.1}, stddev {:.1}",
        seeds.len(),
        mean,
        stddev
    );
    println!("wrote {}", out_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnostics

fn print_outcomes(outcomes: &[CheckOutcome]) -> usize {
    let mut failures = 0;
    for o in outcomes {
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {} (measured {:.3e}, tolerance {:.0e})",
            o.name, o.measured, o.tolerance
        );
        if !o.pass {
            failures += 1;
        }
    }
    failures
}

pub fn grad_check(only: Option<&str>) -> Result<(), CliError> {
    let selection: Option<Vec<String>> = only.map(|csv| {
        csv.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    });
    let outcomes = run_gradient_checks(selection.as_deref()).map_err(|e| match e {
        guilearn_core::diagnostics::DiagnosticsError::UnknownCheck(_) => validation(e),
        other => runtime(other),
    })?;
    if outcomes.is_empty() {
        println!("no checks selected");
        return Ok(());
    }
    let failures = print_outcomes(&outcomes);
    if failures > 0 {
        return Err(runtime(format!("{failures} gradient check(s) failed")));
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

pub fn oracle_check() -> Result<(), CliError> {
    let outcomes = run_oracle_checks().map_err(runtime)?;
    let failures = print_outcomes(&outcomes);
    if failures > 0 {
        return Err(runtime(format!("{failures} oracle check(s) failed")));
    }
    println!("all {} oracle checks passed", outcomes.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut reports: Vec<MetricsReport> = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .map_err(|e| validation(format!("cannot read {}: {e}", path.display())))?;
        let doc: EvalDocument = serde_json::from_str(&text)
            .map_err(|e| validation(format!("{} is not an evaluation document: {e}", path.display())))?;
        reports.push(doc.report);
    }
    let mut text = render_sr_table(&reports);
    let gs = render_gs_table(&reports);
    // Only include the generalization table when some row carries a score.
    if gs.lines().count() > 1 {
        text.push('\n');
        text.push_str(&gs);
    }
    match out {
        None => print!("{text}"),
        Some(path) => {
            std::fs::write(path, &text).map_err(runtime)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}
