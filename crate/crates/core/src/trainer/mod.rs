//! Two-phase hybrid training: behavioral cloning on expert demonstrations,
//! then on-policy collection with post-hoc reward labeling feeding an
//! offline actor-critic update (expectile-fitted Q/V plus an
//! advantage-weighted policy step).
//!
//! The module owns the dataset representation (labeled transitions with
//! full provenance), the reward labeling rule, the three training phases,
//! and the orchestration that runs them end-to-end into a run directory.

mod io;
mod phases;
#[cfg(test)]
mod tests;

pub use io::{load_dataset, load_policy, save_dataset, save_policy};
pub use phases::{
    bc_train, collect_episodes, collect_episodes_with, fit_q_v, iql_policy_update, run_hybrid,
    BcReport, CollectReport, HybridReport, PolicyPhaseReport, QvReport,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, StoreError};
use crate::env::{Action, AppSpec, EnvError, Observation, TaskInstance, Trajectory};
use crate::perception::{
    extract, serialize, update_history, HistorySummary, PerceptionError, StructuredUI,
    TokenSequence, Vocab,
};
use crate::policy::{
    encode_input, EncodedInput, PolicyConfig, PolicyError, T_CLICK, T_SCROLL, T_TYPE,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trajectory has no steps")]
    EmptyTrajectory,
    #[error("expected {expected} dataset, got {got}")]
    WrongKind {
        expected: &'static str,
        got: &'static str,
    },
    #[error("behavioral cloning requested but no expert dataset was provided")]
    MissingExpertData,
    #[error("non-finite loss in {phase} phase at gradient step {step}")]
    NonFiniteLoss { phase: &'static str, step: usize },
    #[error("corrupt dataset record (episode {episode_id}, t={t}): {message}")]
    CorruptRecord {
        episode_id: String,
        t: usize,
        message: String,
    },
    #[error("dataset file format: {0}")]
    Format(String),
    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Every knob of the two-phase pipeline. `desk` is sized so a full hybrid
/// run finishes in minutes on one CPU core; `paper` mirrors the large-scale
/// settings and is not meant to run inside the test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Discount used both for reward labeling and TD targets; in (0, 1].
    pub gamma: f64,
    /// Inverse temperature of the advantage weight exp(beta * (Q - V)); >= 0.
    pub beta: f64,
    /// Expectile level for the V fit; in (0, 1).
    pub tau_exp: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Behavioral-cloning epochs over the expert dataset (0 skips Phase 1).
    pub bc_epochs: usize,
    /// Episodes to collect in Phase 2 (0 skips collection and the RL phase).
    pub rl_episodes: usize,
    /// Gradient steps for each of the Q/V fit and the policy extraction.
    pub grad_steps: usize,
    /// Episode step cap during collection and evaluation.
    pub t_max: usize,
    /// Sampling temperature during collection; > 0.
    pub temperature: f64,
    /// Epsilon-uniform exploration mix during collection; in [0, 1].
    pub epsilon: f64,
    /// Coefficient of the lagged target-Q update; in (0, 1].
    pub polyak: f64,
    /// Upper bound on the advantage weight; > 0.
    pub weight_clip: f64,
}

impl TrainConfig {
    /// Single-core desk-scale preset: finishes a full hybrid run on the
    /// built-in suite in minutes. The advantage temperature is far softer
    /// than the paper run's because the value networks get only a few
    /// hundred fitting steps here; a large `beta` would amplify their
    /// residual error into destructive policy-extraction weights.
    pub fn desk() -> Self {
        Self {
            gamma: 0.99,
            beta: 1.0,
            tau_exp: 0.7,
            lr: 3e-3,
            batch_size: 8,
            bc_epochs: 60,
            rl_episodes: 200,
            grad_steps: 350,
            t_max: 30,
            temperature: 1.0,
            epsilon: 0.2,
            polyak: 0.01,
            weight_clip: 100.0,
        }
    }

    /// Published-run scale: the hyperparameters reported for the original
    /// experiments. Far too slow for a laptop-class smoke run.
    pub fn paper() -> Self {
        Self {
            beta: 10.0,
            lr: 3e-4,
            batch_size: 64,
            bc_epochs: 10,
            rl_episodes: 2000,
            grad_steps: 50_000,
            epsilon: 0.1,
            polyak: 0.005,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> TrainResult<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(TrainError::InvalidConfig(format!(
                "unknown preset '{other}' (expected 'desk' or 'paper')"
            ))),
        }
    }

    pub fn validate(&self) -> TrainResult<()> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.tau_exp > 0.0 && self.tau_exp < 1.0) {
            return fail(format!("tau_exp must be in (0, 1), got {}", self.tau_exp));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.t_max == 0 {
            return fail("t_max must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return fail(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return fail(format!("polyak must be in (0, 1], got {}", self.polyak));
        }
        if !(self.weight_clip > 0.0) {
            return fail(format!(
                "weight_clip must be > 0, got {}",
                self.weight_clip
            ));
        }
        Ok(())
    }
}

/// Borrowed handles needed to turn raw observations into network inputs.
#[derive(Clone, Copy)]
pub struct EncodeContext<'a> {
    pub vocab: &'a Vocab,
    pub policy: &'a PolicyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Demonstrations: actions are ground truth, rewards are zero.
    Expert,
    /// Collected episodes with post-hoc labeled rewards.
    Offline,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Expert => "expert",
            DatasetKind::Offline => "offline",
        }
    }
}

/// Where a transition came from, kept on every record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub app: String,
    pub task_id: String,
    pub seed: u64,
    pub episode_id: String,
}

/// One step of a finished episode, fully prepared for training: the raw
/// observation, its structured/serialized forms, the action taken, the
/// labeled reward, and the successor observation (absent on the terminal
/// step).
#[derive(Debug, Clone)]
pub struct LabeledTransition {
    pub provenance: Provenance,
    pub t: usize,
    pub task: TaskInstance,
    pub obs: Observation,
    pub ui: StructuredUI,
    pub tokens: TokenSequence,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Option<Observation>,
    pub next_ui: Option<StructuredUI>,
    pub next_tokens: Option<TokenSequence>,
    pub terminal: bool,
}

impl LabeledTransition {
    /// Packs the stored serialization for the network.
    pub fn encode(&self, config: &PolicyConfig) -> Result<EncodedInput, PolicyError> {
        encode_input(
            config,
            &self.tokens,
            &self.ui,
            &self.task,
            self.obs.scrollable(),
        )
    }

    /// Packs the successor observation; `None` on terminal records.
    pub fn encode_next(&self, config: &PolicyConfig) -> Result<Option<EncodedInput>, PolicyError> {
        match (&self.next_obs, &self.next_ui, &self.next_tokens) {
            (Some(obs), Some(ui), Some(tokens)) => Ok(Some(encode_input(
                config,
                tokens,
                ui,
                &self.task,
                obs.scrollable(),
            )?)),
            _ => Ok(None),
        }
    }
}

/// A set of labeled transitions of one kind, in stable episode/step order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub records: Vec<LabeledTransition>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Demonstration dataset: every step keeps its expert action; rewards
    /// are zero (cloning never reads them). Episode ids are
    /// `{prefix}-{index:05}`.
    pub fn expert(
        ctx: &EncodeContext,
        trajectories: &[Trajectory],
        prefix: &str,
    ) -> TrainResult<Self> {
        let mut records = Vec::new();
        for (i, traj) in trajectories.iter().enumerate() {
            let rewards = vec![0.0; traj.steps.len()];
            let episode_id = format!("{prefix}-{i:05}");
            records.extend(episode_transitions(ctx, traj, &rewards, &episode_id)?);
        }
        Ok(Self {
            kind: DatasetKind::Expert,
            records,
        })
    }

    /// Collected dataset: every episode is labeled post hoc from its
    /// terminal outcome.
    pub fn offline(
        ctx: &EncodeContext,
        trajectories: &[Trajectory],
        gamma: f64,
        prefix: &str,
    ) -> TrainResult<Self> {
        let mut records = Vec::new();
        for (i, traj) in trajectories.iter().enumerate() {
            let episode_id = format!("{prefix}-{i:05}");
            records.extend(label_rewards(ctx, traj, gamma, &episode_id)?);
        }
        Ok(Self {
            kind: DatasetKind::Offline,
            records,
        })
    }

    /// Records grouped by episode id, in first-appearance order.
    pub fn episodes(&self) -> Vec<(&str, Vec<&LabeledTransition>)> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&LabeledTransition>> = BTreeMap::new();
        for rec in &self.records {
            let id = rec.provenance.episode_id.as_str();
            if !groups.contains_key(id) {
                order.push(id);
            }
            groups.entry(id).or_default().push(rec);
        }
        order
            .into_iter()
            .map(|id| (id, groups.remove(id).expect("grouped")))
            .collect()
    }
}

/// The per-step labels of a finished episode: the terminal step earns the
/// full outcome (+1 success / -1 failure) and earlier steps receive the
/// outcome discounted by their distance from the end.
pub(crate) fn rewards_vector(success: bool, len: usize, gamma: f64) -> Vec<f64> {
    let r_final = if success { 1.0 } else { -1.0 };
    let last = len - 1;
    (0..len)
        .map(|t| r_final * gamma.powi((last - t) as i32))
        .collect()
}

/// Labels every step of a finished trajectory from its terminal outcome and
/// packages the steps as training records. The final executed action gets
/// reward +1 (success) or -1 (failure) exactly; step `t` of an episode whose
/// last step is `T` gets that outcome times `gamma^(T-t)`.
pub fn label_rewards(
    ctx: &EncodeContext,
    traj: &Trajectory,
    gamma: f64,
    episode_id: &str,
) -> TrainResult<Vec<LabeledTransition>> {
    if traj.steps.is_empty() {
        return Err(TrainError::EmptyTrajectory);
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TrainError::InvalidConfig(format!(
            "gamma must be in (0, 1], got {gamma}"
        )));
    }
    let rewards = rewards_vector(traj.success, traj.steps.len(), gamma);
    episode_transitions(ctx, traj, &rewards, episode_id)
}

/// Shared record builder: walks the trajectory once, maintaining the rolling
/// action history that the serialized form embeds, and attaches the
/// caller-supplied per-step rewards. The successor fields of step `t` reuse
/// the serialization of step `t+1`; the last step is terminal and has none.
fn episode_transitions(
    ctx: &EncodeContext,
    traj: &Trajectory,
    rewards: &[f64],
    episode_id: &str,
) -> TrainResult<Vec<LabeledTransition>> {
    if traj.steps.is_empty() {
        return Err(TrainError::EmptyTrajectory);
    }
    debug_assert_eq!(rewards.len(), traj.steps.len());

    // Serialize every observation in order, rolling the history forward.
    let mut hist = HistorySummary::new();
    let mut serialized: Vec<(StructuredUI, TokenSequence)> =
        Vec::with_capacity(traj.steps.len());
    for (obs, action) in &traj.steps {
        let ui = extract(obs, &obs.goal_text);
        let tokens = serialize(ctx.vocab, &ui, &obs.goal_text, &hist, ctx.policy.max_seq_len)?;
        serialized.push((ui, tokens));
        hist = update_history(&hist, action);
    }

    let last = traj.steps.len() - 1;
    let mut out = Vec::with_capacity(traj.steps.len());
    for (t, (obs, action)) in traj.steps.iter().enumerate() {
        let (ui, tokens) = serialized[t].clone();
        let terminal = t == last;
        let (next_obs, next_ui, next_tokens) = if terminal {
            (None, None, None)
        } else {
            let (nui, ntok) = serialized[t + 1].clone();
            (Some(traj.steps[t + 1].0.clone()), Some(nui), Some(ntok))
        };
        out.push(LabeledTransition {
            provenance: Provenance {
                app: traj.task.app_name.clone(),
                task_id: traj.task.task_id.clone(),
                seed: traj.seed,
                episode_id: episode_id.to_string(),
            },
            t,
            task: traj.task.clone(),
            obs: obs.clone(),
            ui,
            tokens,
            action: action.clone(),
            reward: rewards[t],
            next_obs,
            next_ui,
            next_tokens,
            terminal,
        });
    }
    Ok(out)
}

/// Rebuilds records from a loaded episode; rewards are attached afterwards
/// from the stored labels, so they start at zero here.
pub(crate) fn episode_transitions_for_load(
    ctx: &EncodeContext,
    traj: &Trajectory,
    episode_id: &str,
) -> TrainResult<Vec<LabeledTransition>> {
    let rewards = vec![0.0; traj.steps.len()];
    episode_transitions(ctx, traj, &rewards, episode_id)
}

/// Asymmetric squared residual: `|tau - 1[u < 0]| * u^2`. At tau = 0.5 this
/// is half the squared error; larger tau penalizes under-estimation more.
pub fn expectile_loss(u: f64, tau: f64) -> f64 {
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    w * u * u
}

/// Per-sample likelihood weight of the offline policy update:
/// `min(exp(beta * advantage), clip)`. Always positive; exactly 1 when
/// beta = 0, which reduces the update to plain cloning.
pub fn advantage_weight(advantage: f64, beta: f64, clip: f64) -> f64 {
    (beta * advantage).exp().min(clip)
}

/// True when `action` is expressible under the encoded observation's masks:
/// the type is available and any element/slot argument refers to a present,
/// compatible target. Dataset validation uses this to catch records whose
/// action could never have been produced under the recorded observation.
pub fn action_is_encodable(enc: &EncodedInput, action: &Action) -> bool {
    let mask = enc.type_mask();
    let find = |id: usize| enc.elements.iter().find(|e| e.elem_id == id);
    match action {
        Action::Click { elem_id } => mask[T_CLICK] && find(*elem_id).is_some(),
        Action::Type { elem_id, text } => {
            mask[T_TYPE]
                && find(*elem_id).is_some_and(|e| e.textbox)
                && enc.slot_values.iter().any(|v| v == text)
        }
        Action::Scroll { amount, .. } => mask[T_SCROLL] && (1..=3).contains(amount),
        Action::Finish => true,
    }
}

/// A policy that can drive episodes: called once per step with the current
/// observation. Implementations keep whatever per-episode state they need
/// (history, plan cursors) between `begin` and the episode's end.
pub trait RolloutPolicy {
    /// Resets per-episode state before the first step.
    fn begin(&mut self, app: &AppSpec, task: &TaskInstance, episode_seed: u64)
        -> TrainResult<()>;
    /// Chooses the action for the current observation at step `t`.
    fn act(&mut self, obs: &Observation, t: usize, episode_seed: u64) -> TrainResult<Action>;
    /// Informs the policy that `action` was executed (history upkeep).
    fn executed(&mut self, action: &Action);
}

/// How a [`NetPolicy`] turns the action distribution into an action.
#[derive(Debug, Clone, Copy)]
pub enum Decode {
    /// Temperature-scaled factorized sampling with an epsilon-uniform mix;
    /// step-level seeds derive from the episode seed.
    Sampled { temperature: f64, epsilon: f64 },
    /// Component-wise argmax; fully deterministic.
    Greedy,
}

/// Drives episodes with the policy network: encodes each observation with
/// the rolling action history and decodes an action per [`Decode`].
pub struct NetPolicy<'a> {
    params: &'a crate::policy::PolicyParams,
    vocab: &'a Vocab,
    decode: Decode,
    task: Option<TaskInstance>,
    hist: HistorySummary,
}

impl<'a> NetPolicy<'a> {
    pub fn new(
        params: &'a crate::policy::PolicyParams,
        vocab: &'a Vocab,
        decode: Decode,
    ) -> Self {
        Self {
            params,
            vocab,
            decode,
            task: None,
            hist: HistorySummary::new(),
        }
    }
}

impl RolloutPolicy for NetPolicy<'_> {
    fn begin(&mut self, _app: &AppSpec, task: &TaskInstance, _seed: u64) -> TrainResult<()> {
        self.task = Some(task.clone());
        self.hist = HistorySummary::new();
        Ok(())
    }

    fn act(&mut self, obs: &Observation, t: usize, episode_seed: u64) -> TrainResult<Action> {
        let task = self
            .task
            .as_ref()
            .ok_or_else(|| TrainError::InvalidConfig("rollout policy used before begin".into()))?;
        let (enc, _) = crate::policy::encode_observation(
            &self.params.config,
            self.vocab,
            obs,
            task,
            &self.hist,
        )?;
        let dist = crate::policy::action_distribution(self.params, &enc)?;
        let action = match self.decode {
            Decode::Sampled {
                temperature,
                epsilon,
            } => {
                let step_seed = crate::rng::split_seed(episode_seed, "step", t as u64);
                crate::policy::sample_action(&dist, step_seed, temperature, epsilon)?
            }
            Decode::Greedy => crate::policy::greedy_action(&dist),
        };
        Ok(action)
    }

    fn executed(&mut self, action: &Action) {
        self.hist = update_history(&self.hist, action);
    }
}
