//! Frozen-policy evaluation: greedy rollouts over a task suite and the
//! three headline metrics — success rate (SR, percent of episodes that
//! finish in a satisfied state), action efficiency (AE, mean ratio of the
//! optimal plan length to the agent's length over successful episodes),
//! and generalization score (GS, the success rate restricted to a held-out
//! app partition disjoint from everything trained on).


use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::sha256_hex;
use crate::env::{AppSpec, Episode, EnvError, TaskInstance};
use crate::oracle::{bfs_plan, OracleError};
use crate::perception::Vocab;
use crate::policy::PolicyParams;
use crate::trainer::{rewards_vector, Decode, NetPolicy, RolloutPolicy, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation results to aggregate")]
    EmptyResults,
    #[error("no optimal length known for task '{0}'")]
    MissingOptimalLength(String),
    #[error("app '{0}' appears in both the training and held-out partitions")]
    PartitionOverlap(String),
    #[error("held-out evaluation produced no results")]
    EmptyHeldout,
    #[error("result for app '{0}' is not part of the held-out partition")]
    ForeignApp(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type EvalResult<T> = Result<T, EvalError>;

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub app: String,
    pub success: bool,
    /// Actions the agent spent, FINISH included; equals the step cap when
    /// the episode timed out.
    pub agent_length: usize,
    /// Length of the shortest success plan (L*), FINISH included.
    pub optimal_length: usize,
    pub seed: u64,
    /// Sum of gamma^t times the episode's labeled rewards.
    pub discounted_return: f64,
}

/// Per-app slice of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppBreakdown {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
}

/// Aggregated evaluation metrics for one model on one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub partition: String,
    pub episodes: usize,
    /// Percent of episodes that finished in a satisfied state; in [0, 100].
    pub success_rate: f64,
    /// Mean L*/L^A over successful episodes; absent when nothing succeeded.
    pub action_efficiency: Option<f64>,
    /// Success rate over the held-out partition; present on held-out runs.
    pub generalization_score: Option<f64>,
    pub per_app: BTreeMap<String, AppBreakdown>,
    pub seeds: Vec<u64>,
    /// Digest of the resolved configuration the run used.
    pub config_digest: String,
}

impl MetricsReport {
    /// Content digest of the report itself; identical runs produce
    /// identical digests.
    pub fn digest(&self) -> EvalResult<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

/// Shortest-plan length per task id, from exhaustive search.
pub fn optimal_lengths(
    suite: &[(AppSpec, TaskInstance)],
    depth_bound: usize,
) -> EvalResult<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for (app, task) in suite {
        let plan = bfs_plan(app, task, depth_bound)?;
        if !plan.reachable {
            return Err(EvalError::Oracle(OracleError::Unreachable {
                task: task.task_id.clone(),
                depth: depth_bound,
            }));
        }
        out.insert(task.task_id.clone(), plan.length);
    }
    Ok(out)
}

/// Rolls one evaluation episode per (task, seed) pair, in suite then seed
/// order. An episode succeeds only if the policy declared FINISH and the
/// task predicate holds; hitting the step cap counts as a failure with the
/// agent length pinned at the cap. The discounted return applies the
/// labeling rule to the finished episode.
pub fn run_eval_with(
    policy: &mut dyn RolloutPolicy,
    suite: &[(AppSpec, TaskInstance)],
    lengths: &BTreeMap<String, usize>,
    seeds: &[u64],
    t_max: usize,
    gamma: f64,
) -> EvalResult<Vec<EpisodeResult>> {
    let mut results = Vec::with_capacity(suite.len() * seeds.len());
    for (app, task) in suite {
        let optimal_length = *lengths
            .get(&task.task_id)
            .ok_or_else(|| EvalError::MissingOptimalLength(task.task_id.clone()))?;
        for &seed in seeds {
            policy.begin(app, task, seed)?;
            let mut ep = Episode::new(app, task, seed, t_max)?;
            while !ep.done() {
                let obs = ep.observation().clone();
                let action = policy.act(&obs, ep.step_index(), seed)?;
                ep.step(&action)?;
                policy.executed(&action);
            }
            let agent_length = ep.step_index();
            let success = ep.finished_explicitly() && ep.check_success()?;
            let discounted_return = rewards_vector(success, agent_length, gamma)
                .iter()
                .enumerate()
                .map(|(t, r)| gamma.powi(t as i32) * r)
                .sum();
            results.push(EpisodeResult {
                task_id: task.task_id.clone(),
                app: task.app_name.clone(),
                success,
                agent_length,
                optimal_length,
                seed,
                discounted_return,
            });
        }
    }
    Ok(results)
}

/// Greedy evaluation of a trained policy network.
pub fn run_eval(
    params: &PolicyParams,
    vocab: &Vocab,
    suite: &[(AppSpec, TaskInstance)],
    lengths: &BTreeMap<String, usize>,
    seeds: &[u64],
    t_max: usize,
    gamma: f64,
) -> EvalResult<Vec<EpisodeResult>> {
    let mut policy = NetPolicy::new(params, vocab, Decode::Greedy);
    run_eval_with(&mut policy, suite, lengths, seeds, t_max, gamma)
}

/// Percent of successful episodes; order-independent.
pub fn success_rate(results: &[EpisodeResult]) -> EvalResult<f64> {
    if results.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    let successes = results.iter().filter(|r| r.success).count();
    Ok(100.0 * successes as f64 / results.len() as f64)
}

/// Mean of `optimal_length / agent_length` over successful episodes;
/// `None` when no episode succeeded (undefined, never reported as zero).
pub fn action_efficiency(results: &[EpisodeResult]) -> Option<f64> {
    let ratios: Vec<f64> = results
        .iter()
        .filter(|r| r.success)
        .map(|r| r.optimal_length as f64 / r.agent_length as f64)
        .collect();
    if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    }
}

/// Success rate over held-out results only. Validates that the held-out
/// and training partitions are disjoint, that results exist, and that
/// every result belongs to the held-out partition.
pub fn generalization_score(
    results: &[EpisodeResult],
    heldout_apps: &BTreeSet<String>,
    training_apps: &BTreeSet<String>,
) -> EvalResult<f64> {
    if let Some(app) = heldout_apps.intersection(training_apps).next() {
        return Err(EvalError::PartitionOverlap(app.clone()));
    }
    if results.is_empty() {
        return Err(EvalError::EmptyHeldout);
    }
    for r in results {
        if !heldout_apps.contains(&r.app) {
            return Err(EvalError::ForeignApp(r.app.clone()));
        }
    }
    success_rate(results)
}

/// Assembles the aggregate report. `generalization_score` should be set
/// (via [`generalization_score`]) only for held-out partitions.
pub fn build_report(
    model: &str,
    partition: &str,
    results: &[EpisodeResult],
    seeds: &[u64],
    config_digest: &str,
    generalization: Option<f64>,
) -> EvalResult<MetricsReport> {
    let sr = success_rate(results)?;
    let mut per_app: BTreeMap<String, AppBreakdown> = BTreeMap::new();
    for r in results {
        let entry = per_app.entry(r.app.clone()).or_insert(AppBreakdown {
            episodes: 0,
            successes: 0,
            success_rate: 0.0,
        });
        entry.episodes += 1;
        entry.successes += r.success as usize;
    }
    for slice in per_app.values_mut() {
        slice.success_rate = 100.0 * slice.successes as f64 / slice.episodes as f64;
    }
    Ok(MetricsReport {
        model: model.to_string(),
        partition: partition.to_string(),
        episodes: results.len(),
        success_rate: sr,
        action_efficiency: action_efficiency(results),
        generalization_score: generalization,
        per_app,
        seeds: seeds.to_vec(),
        config_digest: config_digest.to_string(),
    })
}

/// Mean and population standard deviation; (x, 0) for a single value.
pub fn mean_stddev(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Success-rate / efficiency table, one row per report.
pub fn render_sr_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("Model | SR(%) | AE\n");
    for r in reports {
        let ae = r
            .action_efficiency
            .map(|v| format!("{v:.3}"))
            .unwrap_or_else(|| "-".to_string());
        out.push_str(&format!("{} | {:.1} | {}\n", r.model, r.success_rate, ae));
    }
    out
}

/// Generalization table; rows only for reports that carry a score.
pub fn render_gs_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("Model | GS\n");
    for r in reports {
        if let Some(gs) = r.generalization_score {
            out.push_str(&format!("{} | {gs:.1}\n", r.model));
        }
    }
    out
}
