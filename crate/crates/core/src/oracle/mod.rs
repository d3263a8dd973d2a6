//! Brute-force verification oracles: exhaustive shortest-path planning over
//! the environment's state graph, tabular value iteration, and an empirical
//! expectile solver. These are the independent references that training and
//! evaluation are checked against.


use std::collections::BTreeMap;

use crate::env::{
    enumerate_states, Action, AppSpec, Episode, EnvError, Observation, TaskInstance, Trajectory,
    DEFAULT_T_MAX,
};
use crate::rng::split_seed;
use crate::trainer::{Dataset, EncodeContext, RolloutPolicy, TrainResult};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("task '{task}' is unreachable within depth {depth}")]
    Unreachable { task: String, depth: usize },
    #[error("demonstration for task '{task}' (seed {seed}) replayed without success; the planner and environment disagree")]
    ReplayMismatch { task: String, seed: u64 },
    #[error("value iteration did not converge within {iters} sweeps (residual {residual})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("expectile of an empty sample set is undefined")]
    EmptySamples,
}

/// Shortest plan found by exhaustive search. `actions` ends with FINISH when
/// the task is reachable; `length` is L* (the FINISH step included).
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub actions: Vec<Action>,
    pub length: usize,
    pub reachable: bool,
}

/// Breadth-first shortest success plan, ties broken by the canonical action
/// order (CLICK < TYPE < SCROLL < FINISH, then element id, then argument).
pub fn bfs_plan(
    app: &AppSpec,
    task: &TaskInstance,
    depth_bound: usize,
) -> Result<PlanResult, OracleError> {
    let graph = enumerate_states(app, task, depth_bound)?;
    match graph.first_success() {
        Some(node) => {
            let mut actions = graph.path_to(node);
            actions.push(Action::Finish);
            Ok(PlanResult {
                length: actions.len(),
                actions,
                reachable: true,
            })
        }
        None => Ok(PlanResult {
            actions: Vec::new(),
            length: 0,
            reachable: false,
        }),
    }
}

/// Replays `plan` through a fresh episode and returns the trajectory.
/// A replay that does not end in success is an internal-consistency error.
pub fn replay_plan(
    app: &AppSpec,
    task: &TaskInstance,
    seed: u64,
    plan: &[Action],
) -> Result<Trajectory, OracleError> {
    let mut ep = Episode::new(app, task, seed, DEFAULT_T_MAX)?;
    let mut steps = Vec::with_capacity(plan.len());
    for action in plan {
        let obs = ep.observation().clone();
        ep.step(action)?;
        steps.push((obs, action.clone()));
    }
    let success = ep.check_success()?;
    if !success {
        return Err(OracleError::ReplayMismatch {
            task: task.task_id.clone(),
            seed,
        });
    }
    Ok(Trajectory {
        steps,
        success,
        task: task.clone(),
        seed,
    })
}

/// Optimal demonstrations: `per_task` replays of each task's BFS plan under
/// distinct seeds. Every trajectory is verified to reach success.
pub fn expert_trajectories(
    suite: &[(&AppSpec, &TaskInstance)],
    per_task: usize,
    master_seed: u64,
    depth_bound: usize,
) -> Result<Vec<Trajectory>, OracleError> {
    let mut out = Vec::with_capacity(suite.len() * per_task);
    for (app, task) in suite {
        let plan = bfs_plan(app, task, depth_bound)?;
        if !plan.reachable {
            return Err(OracleError::Unreachable {
                task: task.task_id.clone(),
                depth: depth_bound,
            });
        }
        for k in 0..per_task {
            let seed = split_seed(master_seed, &format!("demo:{}", task.task_id), k as u64);
            out.push(replay_plan(app, task, seed, &plan.actions)?);
        }
    }
    Ok(out)
}

/// Expert demonstrations packaged as a training dataset: `per_task` replays
/// of every task's shortest plan, serialized with full provenance. The
/// replay check inside [`expert_trajectories`] guarantees that no record
/// carries an action its observation could not express.
pub fn gen_expert_dataset(
    ctx: &EncodeContext,
    suite: &[(&AppSpec, &TaskInstance)],
    per_task: usize,
    master_seed: u64,
    depth_bound: usize,
) -> TrainResult<Dataset> {
    let trajectories = expert_trajectories(suite, per_task, master_seed, depth_bound)?;
    Dataset::expert(ctx, &trajectories, "demo")
}

/// Drives episodes by replaying each task's shortest plan; the reference
/// policy for evaluation (success rate 100, action efficiency exactly 1).
/// Plans are computed on first use and cached per task id. Past the end of
/// its plan the policy emits FINISH.
pub struct PlanPolicy {
    depth_bound: usize,
    plans: BTreeMap<String, Vec<Action>>,
    current: Vec<Action>,
    cursor: usize,
}

impl PlanPolicy {
    pub fn new(depth_bound: usize) -> Self {
        Self {
            depth_bound,
            plans: BTreeMap::new(),
            current: Vec::new(),
            cursor: 0,
        }
    }
}

impl RolloutPolicy for PlanPolicy {
    fn begin(&mut self, app: &AppSpec, task: &TaskInstance, _seed: u64) -> TrainResult<()> {
        if !self.plans.contains_key(&task.task_id) {
            let plan = bfs_plan(app, task, self.depth_bound)?;
            if !plan.reachable {
                return Err(OracleError::Unreachable {
                    task: task.task_id.clone(),
                    depth: self.depth_bound,
                }
                .into());
            }
            self.plans.insert(task.task_id.clone(), plan.actions);
        }
        self.current = self.plans[&task.task_id].clone();
        self.cursor = 0;
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, _t: usize, _seed: u64) -> TrainResult<Action> {
        let action = self
            .current
            .get(self.cursor)
            .cloned()
            .unwrap_or(Action::Finish);
        self.cursor += 1;
        Ok(action)
    }

    fn executed(&mut self, _action: &Action) {}
}

/// Explicit deterministic MDP for verification fixtures.
#[derive(Debug, Clone)]
pub struct MDPModel {
    /// Per state, the available (next_state, reward) actions.
    pub transitions: Vec<Vec<(usize, f64)>>,
    /// Terminal states contribute no continuation value.
    pub terminal: Vec<bool>,
}

impl MDPModel {
    pub fn n_states(&self) -> usize {
        self.transitions.len()
    }
}

/// Bellman-optimal state and action values, iterated to `tol`.
pub fn value_iteration(
    m: &MDPModel,
    gamma: f64,
    tol: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), OracleError> {
    const MAX_SWEEPS: usize = 1_000_000;
    let n = m.n_states();
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0;
        for s in 0..n {
            if m.terminal[s] || m.transitions[s].is_empty() {
                continue;
            }
            let best = m.transitions[s]
                .iter()
                .map(|&(next, r)| r + gamma * v[next])
                .fold(f64::NEG_INFINITY, f64::max);
            residual = residual.max((best - v[s]).abs());
            v[s] = best;
        }
        if residual < tol {
            let q = (0..n)
                .map(|s| {
                    m.transitions[s]
                        .iter()
                        .map(|&(next, r)| if m.terminal[s] { 0.0 } else { r + gamma * v[next] })
                        .collect()
                })
                .collect();
            return Ok((v, q));
        }
    }
    Err(OracleError::NonConvergence {
        iters: MAX_SWEEPS,
        residual,
    })
}

/// The τ-expectile of `samples`: the argmin of the asymmetric squared loss,
/// located by bisecting its (monotone) derivative to 1e-10.
pub fn empirical_expectile(samples: &[f64], tau: f64) -> Result<f64, OracleError> {
    if samples.is_empty() {
        return Err(OracleError::EmptySamples);
    }
    let (mut lo, mut hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    // d/de of the loss is proportional to -(sum of weighted residuals);
    // positive residual mass means the expectile lies above `e`.
    let weighted_residual = |e: f64| -> f64 {
        samples
            .iter()
            .map(|&x| {
                let w = if x > e { tau } else { 1.0 - tau };
                w * (x - e)
            })
            .sum()
    };
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if weighted_residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
