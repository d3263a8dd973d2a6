//! The three training phases and their end-to-end orchestration.
//!
//! Cloning and policy extraction share one weighted-likelihood step so that
//! a zero-advantage extraction step is literally the same computation as a
//! cloning step (same graph, same weights, same optimizer update).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, ParameterStore, Tape};
use crate::env::{AppSpec, Episode, TaskInstance, Trajectory};
use crate::perception::Vocab;
use crate::policy::net::{nll_node, q_node, v_node};
use crate::policy::{EncodedInput, PolicyConfig, PolicyError, PolicyParams};
use crate::rng::{split_seed, stream_rng};

use super::io::{save_dataset, save_policy};
use super::{
    advantage_weight, Dataset, DatasetKind, Decode, EncodeContext, LabeledTransition, NetPolicy,
    RolloutPolicy, TrainConfig, TrainError, TrainResult,
};

/// Shuffled record order for one epoch. The `tag` separates the batch
/// streams of unrelated phases while keeping phases that must see identical
/// batches (cloning and policy extraction) on the same stream.
fn epoch_order(n: usize, seed: u64, tag: &str, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, tag, epoch);
    order.shuffle(&mut rng);
    order
}

/// Deterministic minibatch stream: shuffles the dataset each epoch and
/// hands out consecutive chunks, reshuffling at each epoch boundary.
struct BatchSchedule {
    n: usize,
    batch: usize,
    seed: u64,
    tag: &'static str,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSchedule {
    fn new(n: usize, batch: usize, seed: u64, tag: &'static str) -> Self {
        Self {
            n,
            batch,
            seed,
            tag,
            epoch: 0,
            order: epoch_order(n, seed, tag, 0),
            cursor: 0,
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.n, self.seed, self.tag, self.epoch);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

fn corrupt_err(rec: &LabeledTransition, e: PolicyError) -> TrainError {
    match e {
        PolicyError::MaskedAction(_) | PolicyError::UnknownSlotValue(_) => {
            TrainError::CorruptRecord {
                episode_id: rec.provenance.episode_id.clone(),
                t: rec.t,
                message: e.to_string(),
            }
        }
        other => TrainError::Policy(other),
    }
}

fn optimizer(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    }
}

/// One optimizer step on the policy network: mean over the batch of
/// per-record weight times negative log-likelihood. Cloning passes weight
/// 1.0; policy extraction passes the advantage weight. Returns the batch
/// loss as optimized.
fn weighted_nll_step(
    params: &mut PolicyParams,
    items: &[(usize, f64)],
    data: &Dataset,
    cfg: &TrainConfig,
    phase: &'static str,
    step: usize,
) -> TrainResult<f64> {
    debug_assert!(!items.is_empty());
    let cfgp = params.config.clone();
    let mut tape = Tape::new();
    let bound = tape.bind_store(&params.pi);
    let mut sum = None;
    for &(idx, w) in items {
        let rec = &data.records[idx];
        let enc = rec.encode(&cfgp)?;
        let nll = nll_node(&mut tape, &bound, &cfgp, &enc, &rec.action)
            .map_err(|e| corrupt_err(rec, e))?;
        let weighted = tape.scale(nll, w);
        sum = Some(match sum {
            None => weighted,
            Some(s) => tape.add(s, weighted)?,
        });
    }
    let mean = tape.scale(sum.expect("non-empty batch"), 1.0 / items.len() as f64);
    let loss = tape.scalar(mean);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { phase, step });
    }
    let grads = tape.backward(mean)?;
    params.pi.adamw_step(&grads, &optimizer(cfg))?;
    Ok(loss)
}

/// Q network forward pass against an explicit parameter store (used both
/// for the online network and the lagged target copy).
fn q_scalar(
    store: &ParameterStore,
    cfgp: &PolicyConfig,
    enc: &EncodedInput,
    action: &crate::env::Action,
) -> TrainResult<f64> {
    let mut tape = Tape::new();
    let bound = tape.bind_store(store);
    let node = q_node(&mut tape, &bound, cfgp, enc, action)?;
    Ok(tape.scalar(node))
}

fn v_scalar(store: &ParameterStore, cfgp: &PolicyConfig, enc: &EncodedInput) -> TrainResult<f64> {
    let mut tape = Tape::new();
    let bound = tape.bind_store(store);
    let node = v_node(&mut tape, &bound, cfgp, enc)?;
    Ok(tape.scalar(node))
}

/// In-place lagged update: `target += rho * (online - target)` per tensor.
fn polyak_update(target: &mut ParameterStore, online: &ParameterStore, rho: f64) {
    for (name, src) in online.iter() {
        let dst = target
            .get_mut(name)
            .expect("target store mirrors online store");
        ndarray::Zip::from(dst).and(src).for_each(|t, &q| *t += rho * (q - *t));
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BcReport {
    /// Mean per-example loss of each epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Phase 1: behavioral cloning. Epochs of shuffled minibatches minimizing
/// the mean action negative log-likelihood over the expert dataset.
pub fn bc_train(
    params: &mut PolicyParams,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> TrainResult<BcReport> {
    cfg.validate()?;
    if data.kind != DatasetKind::Expert {
        return Err(TrainError::WrongKind {
            expected: "expert",
            got: data.kind.name(),
        });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = data.len();
    let mut epoch_losses = Vec::with_capacity(cfg.bc_epochs);
    let mut steps = 0usize;
    for epoch in 0..cfg.bc_epochs {
        let order = epoch_order(n, seed, "pi-batch", epoch as u64);
        let mut weighted_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<(usize, f64)> = chunk.iter().map(|&i| (i, 1.0)).collect();
            let loss = weighted_nll_step(params, &items, data, cfg, "bc", steps)?;
            weighted_sum += loss * chunk.len() as f64;
            steps += 1;
        }
        epoch_losses.push(weighted_sum / n as f64);
    }
    Ok(BcReport {
        epoch_losses,
        steps,
    })
}

/// Outcome of a collection phase: finished episodes plus a log line for
/// every episode that was abandoned because the environment or the policy
/// errored mid-flight.
#[derive(Debug, Clone)]
pub struct CollectReport {
    pub trajectories: Vec<Trajectory>,
    pub aborted: Vec<String>,
}

impl CollectReport {
    pub fn successes(&self) -> usize {
        self.trajectories.iter().filter(|t| t.success).count()
    }
}

fn roll_one(
    policy: &mut dyn RolloutPolicy,
    app: &AppSpec,
    task: &TaskInstance,
    seed: u64,
    t_max: usize,
) -> TrainResult<Trajectory> {
    policy.begin(app, task, seed)?;
    let mut ep = Episode::new(app, task, seed, t_max)?;
    let mut steps = Vec::new();
    while !ep.done() {
        let t = ep.step_index();
        let obs = ep.observation().clone();
        let action = policy.act(&obs, t, seed)?;
        ep.step(&action)?;
        policy.executed(&action);
        steps.push((obs, action));
    }
    let success = ep.check_success()?;
    Ok(Trajectory {
        steps,
        success,
        task: task.clone(),
        seed,
    })
}

/// Phase 2 driver over an arbitrary rollout policy. Episodes cycle through
/// the suite round-robin; each gets its own derived seed. An error inside
/// one episode abandons only that episode and is recorded, never propagated.
pub fn collect_episodes_with(
    policy: &mut dyn RolloutPolicy,
    suite: &[(AppSpec, TaskInstance)],
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> TrainResult<CollectReport> {
    cfg.validate()?;
    if n > 0 && suite.is_empty() {
        return Err(TrainError::InvalidConfig(
            "episode collection requested on an empty suite".into(),
        ));
    }
    let mut trajectories = Vec::new();
    let mut aborted = Vec::new();
    for i in 0..n {
        let (app, task) = &suite[i % suite.len()];
        let ep_seed = split_seed(seed, &format!("collect:{}", task.task_id), i as u64);
        match roll_one(policy, app, task, ep_seed, cfg.t_max) {
            Ok(traj) => trajectories.push(traj),
            Err(e) => aborted.push(format!("episode {i} ({}): {e}", task.task_id)),
        }
    }
    Ok(CollectReport {
        trajectories,
        aborted,
    })
}

/// Phase 2 with the current policy network, sampling at the configured
/// temperature and epsilon.
pub fn collect_episodes(
    params: &PolicyParams,
    vocab: &Vocab,
    suite: &[(AppSpec, TaskInstance)],
    n: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> TrainResult<CollectReport> {
    let mut policy = NetPolicy::new(
        params,
        vocab,
        Decode::Sampled {
            temperature: cfg.temperature,
            epsilon: cfg.epsilon,
        },
    );
    collect_episodes_with(&mut policy, suite, n, cfg, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QvReport {
    /// Mean expectile loss of each V update, in step order.
    pub v_losses: Vec<f64>,
    /// Mean squared TD error of each Q update, in step order.
    pub q_losses: Vec<f64>,
}

/// Phase 3a: alternating value fits on the offline dataset.
///
/// Each step first updates V toward the expectile of the lagged target
/// network's Q values, then updates Q toward the one-step TD target
/// `r + gamma * V(s')` (just `r` on terminal records), and finally nudges
/// the lagged target toward the online Q.
pub fn fit_q_v(
    params: &mut PolicyParams,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> TrainResult<QvReport> {
    cfg.validate()?;
    if data.kind != DatasetKind::Offline {
        return Err(TrainError::WrongKind {
            expected: "offline",
            got: data.kind.name(),
        });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfgp = params.config.clone();
    let opt = optimizer(cfg);
    let mut target_q = params.q.clone();
    let mut schedule = BatchSchedule::new(data.len(), cfg.batch_size, seed, "qv-batch");
    let mut v_losses = Vec::with_capacity(cfg.grad_steps);
    let mut q_losses = Vec::with_capacity(cfg.grad_steps);

    for step in 0..cfg.grad_steps {
        let batch = schedule.next_batch();

        // V update: expectile regression of V(s) onto the lagged Q(s, a).
        let mut v_tape = Tape::new();
        let bound_v = v_tape.bind_store(&params.v);
        let mut v_sum = None;
        for &idx in &batch {
            let rec = &data.records[idx];
            let enc = rec.encode(&cfgp)?;
            let qbar = q_scalar(&target_q, &cfgp, &enc, &rec.action)?;
            let v = v_node(&mut v_tape, &bound_v, &cfgp, &enc)?;
            let neg_v = v_tape.scale(v, -1.0);
            let u = v_tape.add_scalar(neg_v, qbar);
            let w = if v_tape.scalar(u) < 0.0 {
                1.0 - cfg.tau_exp
            } else {
                cfg.tau_exp
            };
            let sq = v_tape.mul(u, u)?;
            let term = v_tape.scale(sq, w);
            v_sum = Some(match v_sum {
                None => term,
                Some(s) => v_tape.add(s, term)?,
            });
        }
        let v_mean = v_tape.scale(v_sum.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let v_loss = v_tape.scalar(v_mean);
        if !v_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "v-fit",
                step,
            });
        }
        let grads = v_tape.backward(v_mean)?;
        params.v.adamw_step(&grads, &opt)?;
        v_losses.push(v_loss);

        // Q update: squared TD error toward r + gamma * V(s').
        let mut q_tape = Tape::new();
        let bound_q = q_tape.bind_store(&params.q);
        let mut q_sum = None;
        for &idx in &batch {
            let rec = &data.records[idx];
            let enc = rec.encode(&cfgp)?;
            let target = if rec.terminal {
                rec.reward
            } else {
                let next = rec.encode_next(&cfgp)?.ok_or_else(|| {
                    TrainError::CorruptRecord {
                        episode_id: rec.provenance.episode_id.clone(),
                        t: rec.t,
                        message: "non-terminal record lacks a successor observation".into(),
                    }
                })?;
                rec.reward + cfg.gamma * v_scalar(&params.v, &cfgp, &next)?
            };
            let q = q_node(&mut q_tape, &bound_q, &cfgp, &enc, &rec.action)?;
            let diff = q_tape.add_scalar(q, -target);
            let sq = q_tape.mul(diff, diff)?;
            q_sum = Some(match q_sum {
                None => sq,
                Some(s) => q_tape.add(s, sq)?,
            });
        }
        let q_mean = q_tape.scale(q_sum.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let q_loss = q_tape.scalar(q_mean);
        if !q_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "q-fit",
                step,
            });
        }
        let grads = q_tape.backward(q_mean)?;
        params.q.adamw_step(&grads, &opt)?;
        q_losses.push(q_loss);

        polyak_update(&mut target_q, &params.q, cfg.polyak);
    }
    Ok(QvReport { v_losses, q_losses })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyPhaseReport {
    /// Mean weighted loss of each step, in step order.
    pub losses: Vec<f64>,
    pub mean_weight: f64,
    pub max_weight: f64,
    pub steps: usize,
}

/// Phase 3b: advantage-weighted policy extraction. Each record's likelihood
/// is weighted by `min(exp(beta * (Q - V)), weight_clip)` with Q and V read
/// as constants — no gradient flows into the value networks.
pub fn iql_policy_update(
    params: &mut PolicyParams,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> TrainResult<PolicyPhaseReport> {
    cfg.validate()?;
    if data.kind != DatasetKind::Offline {
        return Err(TrainError::WrongKind {
            expected: "offline",
            got: data.kind.name(),
        });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfgp = params.config.clone();
    let mut schedule = BatchSchedule::new(data.len(), cfg.batch_size, seed, "pi-batch");
    let mut losses = Vec::with_capacity(cfg.grad_steps);
    let mut weight_sum = 0.0;
    let mut weight_count = 0usize;
    let mut max_weight = 0.0f64;

    for step in 0..cfg.grad_steps {
        let batch = schedule.next_batch();
        let mut items = Vec::with_capacity(batch.len());
        for &idx in &batch {
            let rec = &data.records[idx];
            let enc = rec.encode(&cfgp)?;
            let q = q_scalar(&params.q, &cfgp, &enc, &rec.action)?;
            let v = v_scalar(&params.v, &cfgp, &enc)?;
            let w = advantage_weight(q - v, cfg.beta, cfg.weight_clip);
            weight_sum += w;
            weight_count += 1;
            max_weight = max_weight.max(w);
            items.push((idx, w));
        }
        let loss = weighted_nll_step(params, &items, data, cfg, "policy-extraction", step)?;
        losses.push(loss);
    }
    Ok(PolicyPhaseReport {
        losses,
        mean_weight: if weight_count == 0 {
            0.0
        } else {
            weight_sum / weight_count as f64
        },
        max_weight,
        steps: cfg.grad_steps,
    })
}

/// Serializable digest of a collection phase for the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectSummary {
    pub requested: usize,
    pub completed: usize,
    pub successes: usize,
    pub aborted: Vec<String>,
    /// Mean over completed episodes of the discounted sum of labeled
    /// rewards; absent when nothing completed.
    pub mean_return: Option<f64>,
}

impl CollectSummary {
    fn new(report: &CollectReport, requested: usize, gamma: f64) -> Self {
        let returns: Vec<f64> = report
            .trajectories
            .iter()
            .map(|traj| {
                super::rewards_vector(traj.success, traj.steps.len(), gamma)
                    .iter()
                    .enumerate()
                    .map(|(t, r)| gamma.powi(t as i32) * r)
                    .sum()
            })
            .collect();
        let mean_return = if returns.is_empty() {
            None
        } else {
            Some(returns.iter().sum::<f64>() / returns.len() as f64)
        };
        Self {
            requested,
            completed: report.trajectories.len(),
            successes: report.successes(),
            aborted: report.aborted.clone(),
            mean_return,
        }
    }
}

/// Machine-readable record of a full hybrid run: configuration echo, phase
/// statistics, artifact digests, and the error that stopped the run if one
/// did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridReport {
    pub config: TrainConfig,
    pub policy_config: PolicyConfig,
    pub seed: u64,
    pub expert_records: usize,
    pub offline_records: usize,
    pub bc: Option<BcReport>,
    pub collect: Option<CollectSummary>,
    pub qv: Option<QvReport>,
    pub policy_phase: Option<PolicyPhaseReport>,
    /// Phase tag -> SHA-256 of the checkpoint file.
    pub checkpoints: BTreeMap<String, String>,
    pub error: Option<String>,
}

/// Runs the full two-phase pipeline into `run_dir`:
///
/// 1. behavioral cloning on the expert dataset (skipped when `bc_epochs`
///    is 0), checkpointed as `bc.ckpt`;
/// 2. on-policy collection and post-hoc labeling into `offline.jsonl`
///    (skipped when `rl_episodes` is 0);
/// 3. Q/V fitting (checkpointed as `qv.ckpt`) followed by advantage-weighted
///    policy extraction; the end state is checkpointed as `final.ckpt`.
///
/// `report.json` is always written, also when a phase fails — in that case
/// it records the error and every artifact produced up to that point stays
/// on disk.
pub fn run_hybrid(
    params: &mut PolicyParams,
    expert: Option<&Dataset>,
    suite: &[(AppSpec, TaskInstance)],
    ctx: &EncodeContext,
    cfg: &TrainConfig,
    seed: u64,
    run_dir: &Path,
) -> TrainResult<HybridReport> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir)?;
    let mut report = HybridReport {
        config: cfg.clone(),
        policy_config: params.config.clone(),
        seed,
        expert_records: expert.map(Dataset::len).unwrap_or(0),
        offline_records: 0,
        bc: None,
        collect: None,
        qv: None,
        policy_phase: None,
        checkpoints: BTreeMap::new(),
        error: None,
    };

    let outcome = run_phases(params, expert, suite, ctx, cfg, seed, run_dir, &mut report);
    if let Err(e) = &outcome {
        report.error = Some(e.to_string());
    } else {
        let digest = save_policy(&run_dir.join("final.ckpt"), params)?;
        report.checkpoints.insert("final".into(), digest);
    }
    std::fs::write(
        run_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    outcome.map(|()| report)
}

#[allow(clippy::too_many_arguments)]
fn run_phases(
    params: &mut PolicyParams,
    expert: Option<&Dataset>,
    suite: &[(AppSpec, TaskInstance)],
    ctx: &EncodeContext,
    cfg: &TrainConfig,
    seed: u64,
    run_dir: &Path,
    report: &mut HybridReport,
) -> TrainResult<()> {
    // Phase 1: cloning.
    if cfg.bc_epochs > 0 {
        let d_e = expert.ok_or(TrainError::MissingExpertData)?;
        report.bc = Some(bc_train(params, d_e, cfg, split_seed(seed, "phase-bc", 0))?);
    }
    let digest = save_policy(&run_dir.join("bc.ckpt"), params)?;
    report.checkpoints.insert("bc".into(), digest);

    // Phase 2: collection and post-hoc labeling.
    let mut offline: Option<Dataset> = None;
    if cfg.rl_episodes > 0 {
        let col = collect_episodes(
            params,
            ctx.vocab,
            suite,
            cfg.rl_episodes,
            cfg,
            split_seed(seed, "phase-collect", 0),
        )?;
        let d_o = Dataset::offline(ctx, &col.trajectories, cfg.gamma, "rl")?;
        save_dataset(&d_o, &run_dir.join("offline.jsonl"))?;
        report.collect = Some(CollectSummary::new(&col, cfg.rl_episodes, cfg.gamma));
        report.offline_records = d_o.len();
        offline = Some(d_o);
    }

    // Phase 3: offline actor-critic on the labeled data.
    if let Some(d_o) = offline.filter(|d| !d.is_empty()) {
        report.qv = Some(fit_q_v(
            params,
            &d_o,
            cfg,
            split_seed(seed, "phase-qv", 0),
        )?);
        let digest = save_policy(&run_dir.join("qv.ckpt"), params)?;
        report.checkpoints.insert("qv".into(), digest);
        report.policy_phase = Some(iql_policy_update(
            params,
            &d_o,
            cfg,
            split_seed(seed, "phase-iql", 0),
        )?);
    }
    Ok(())
}
