//! Self-check suites runnable from tests and the command line:
//! finite-difference validation of every tape primitive plus the full
//! policy loss, and closed-form validation of the planning/value oracles.


use ndarray::ArrayD;
use rand::Rng;
use thiserror::Error;

use crate::autodiff::{grad_check, AdError, AdResult, BoundStore, NodeId, ParameterStore, Tape};
use crate::env::{
    parse_app_spec, parse_task_instance, Action, AppSpec, EnvError, Episode, ScrollDirection,
    TaskInstance,
};
use crate::oracle::{
    bfs_plan, empirical_expectile, replay_plan, value_iteration, MDPModel, OracleError,
};
use crate::perception::{
    extract, serialize, HistorySummary, PerceptionError, Vocab, MAX_ELEMENT_IDS,
};
use crate::policy::{
    encode_input, init_params,
    net::{nll_node, q_node, v_node},
    EncodedInput, PolicyConfig, PolicyError,
};
use crate::rng::stream_rng;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("unknown check: {0}")]
    UnknownCheck(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// Measured deviation: maximum relative error for gradient checks,
    /// maximum absolute deviation from the closed form for oracle checks.
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn new(name: &'static str, measured: f64, tolerance: f64) -> Self {
        Self {
            name,
            measured,
            tolerance,
            pass: measured <= tolerance,
        }
    }
}

/// Relative-error bound every gradient check must meet.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Seeded sample points per parameter tensor in each gradient check.
pub const GRAD_POINTS: usize = 10;

const FD_EPS: f64 = 1e-5;
const CHECK_SEED: u64 = 0x5e1f_c4ec;

type CheckFn = fn() -> Result<f64, DiagnosticsError>;

const GRADIENT_CHECKS: &[(&str, CheckFn)] = &[
    ("matmul", check_matmul),
    ("add", check_add),
    ("mul", check_mul),
    ("exp", check_exp),
    ("ln", check_ln),
    ("tanh", check_tanh),
    ("relu", check_relu),
    ("softmax", check_softmax),
    ("log_softmax", check_log_softmax),
    ("layer_norm", check_layer_norm),
    ("embedding_lookup", check_embedding_lookup),
    ("concat", check_concat),
    ("slice", check_slice),
    ("reduce_sum", check_reduce_sum),
    ("reduce_mean", check_reduce_mean),
    ("cross_entropy", check_cross_entropy),
    ("transpose", check_transpose),
    ("reshape", check_reshape),
    ("scale", check_scale),
    ("add_scalar", check_add_scalar),
    ("pick", check_pick),
    ("mean_rows", check_mean_rows),
    ("policy_nll", check_policy_nll),
    ("q_head", check_q_head),
    ("v_head", check_v_head),
];

/// Names of every gradient check, in execution order.
pub fn gradient_check_names() -> Vec<&'static str> {
    GRADIENT_CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs the finite-difference suite. `only` restricts the run to the named
/// checks (an empty list is an explicit no-op); `None` runs everything.
/// Unknown names are rejected before anything runs.
pub fn run_gradient_checks(
    only: Option<&[String]>,
) -> Result<Vec<CheckOutcome>, DiagnosticsError> {
    let selected: Vec<&(&str, CheckFn)> = match only {
        None => GRADIENT_CHECKS.iter().collect(),
        Some(names) => {
            let mut picked = Vec::new();
            for want in names {
                let hit = GRADIENT_CHECKS
                    .iter()
                    .find(|(n, _)| n == want)
                    .ok_or_else(|| DiagnosticsError::UnknownCheck(want.clone()))?;
                picked.push(hit);
            }
            picked
        }
    };
    let mut out = Vec::with_capacity(selected.len());
    for (name, f) in selected {
        let measured = f()?;
        out.push(CheckOutcome::new(name, measured, GRAD_TOLERANCE));
    }
    Ok(out)
}

/// Runs the oracle suite: value iteration, expectile regression, and
/// search-plan replay against closed forms.
pub fn run_oracle_checks() -> Result<Vec<CheckOutcome>, DiagnosticsError> {
    Ok(vec![
        check_value_iteration()?,
        check_expectile()?,
        check_plan_replay()?,
    ])
}

// ---------------------------------------------------------------------------
// Gradient checks: one per tape primitive, each scalarized through a fixed
// random weighting so every output coordinate contributes to the loss.

/// Fills named parameters with `stream_rng`-seeded uniforms in `[lo, hi)`.
fn filled(entries: &[(&str, &[usize], f64, f64)]) -> ParameterStore {
    let mut store = ParameterStore::new();
    for (i, (name, shape, lo, hi)) in entries.iter().enumerate() {
        let n: usize = shape.iter().product();
        let mut rng = stream_rng(CHECK_SEED, "check-fill", i as u64);
        let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(*lo..*hi)).collect();
        store
            .insert(name, ArrayD::from_shape_vec(shape.to_vec(), vals).unwrap())
            .expect("fresh name");
    }
    store
}

/// Weighted sum with fixed pseudo-random positive weights, so the loss is
/// sensitive to every coordinate of `x`.
fn weighted_scalar(tape: &mut Tape, x: NodeId) -> AdResult<NodeId> {
    let shape = tape.value(x).raw_dim();
    let n = tape.value(x).len();
    let mut rng = stream_rng(CHECK_SEED, "check-weights", 0);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.25..1.75)).collect();
    let w = tape.constant(ArrayD::from_shape_vec(shape, w).unwrap());
    let prod = tape.mul(x, w)?;
    tape.reduce_sum(prod, None)
}

fn fd(
    point: &ParameterStore,
    f: impl Fn(&mut Tape, &BoundStore) -> AdResult<NodeId>,
) -> Result<f64, DiagnosticsError> {
    Ok(grad_check(f, point, FD_EPS, GRAD_POINTS, CHECK_SEED)?)
}

fn check_matmul() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("a", &[3, 4], -1.0, 1.0), ("b", &[4, 2], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.matmul(bs.get("a"), bs.get("b"))?;
        weighted_scalar(t, y)
    })
}

fn check_add() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("a", &[3, 4], -1.0, 1.0), ("b", &[3, 4], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.add(bs.get("a"), bs.get("b"))?;
        weighted_scalar(t, y)
    })
}

fn check_mul() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("a", &[3, 4], -1.0, 1.0), ("b", &[3, 4], 0.5, 1.5)]);
    fd(&p, |t, bs| {
        let y = t.mul(bs.get("a"), bs.get("b"))?;
        weighted_scalar(t, y)
    })
}

fn check_exp() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[2, 5], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.exp(bs.get("x"));
        weighted_scalar(t, y)
    })
}

fn check_ln() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[2, 5], 0.5, 2.0)]);
    fd(&p, |t, bs| {
        let y = t.ln(bs.get("x"));
        weighted_scalar(t, y)
    })
}

fn check_tanh() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[2, 5], -2.0, 2.0)]);
    fd(&p, |t, bs| {
        let y = t.tanh(bs.get("x"));
        weighted_scalar(t, y)
    })
}

fn check_relu() -> Result<f64, DiagnosticsError> {
    // Keep every coordinate well away from the kink at zero: magnitudes in
    // [0.3, 1.3) with deterministic alternating signs.
    let mut p = filled(&[("x", &[2, 6], 0.3, 1.3)]);
    let x = p.get_mut("x").unwrap();
    for (i, v) in x.iter_mut().enumerate() {
        if i % 2 == 1 {
            *v = -*v;
        }
    }
    fd(&p, |t, bs| {
        let y = t.relu(bs.get("x"));
        weighted_scalar(t, y)
    })
}

fn check_softmax() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[3, 5], -2.0, 2.0)]);
    fd(&p, |t, bs| {
        let y = t.softmax(bs.get("x"), 1)?;
        weighted_scalar(t, y)
    })
}

fn check_log_softmax() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[9], -2.0, 2.0)]);
    fd(&p, |t, bs| {
        let y = t.log_softmax(bs.get("x"))?;
        weighted_scalar(t, y)
    })
}

fn check_layer_norm() -> Result<f64, DiagnosticsError> {
    let p = filled(&[
        ("x", &[2, 8], -1.0, 1.0),
        ("gain", &[8], 0.5, 1.5),
        ("bias", &[8], -0.5, 0.5),
    ]);
    fd(&p, |t, bs| {
        let y = t.layer_norm(bs.get("x"), bs.get("gain"), bs.get("bias"))?;
        weighted_scalar(t, y)
    })
}

fn check_embedding_lookup() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("table", &[6, 4], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        // A repeated id exercises gradient accumulation into one row.
        let y = t.embedding_lookup(bs.get("table"), &[0, 2, 5, 2])?;
        weighted_scalar(t, y)
    })
}

fn check_concat() -> Result<f64, DiagnosticsError> {
    let p = filled(&[
        ("a", &[2, 3], -1.0, 1.0),
        ("b", &[2, 3], -1.0, 1.0),
        ("c", &[1, 3], -1.0, 1.0),
    ]);
    fd(&p, |t, bs| {
        let y = t.concat(&[bs.get("a"), bs.get("b"), bs.get("c")], 0)?;
        weighted_scalar(t, y)
    })
}

fn check_slice() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[4, 6], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.slice(bs.get("x"), 1, 1, 4)?;
        weighted_scalar(t, y)
    })
}

fn check_reduce_sum() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[3, 4], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.reduce_sum(bs.get("x"), Some(0))?;
        weighted_scalar(t, y)
    })
}

fn check_reduce_mean() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[3, 4], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.reduce_mean(bs.get("x"), Some(1))?;
        weighted_scalar(t, y)
    })
}

fn check_cross_entropy() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("logits", &[6], -2.0, 2.0)]);
    fd(&p, |t, bs| t.cross_entropy(bs.get("logits"), 3))
}

fn check_transpose() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[3, 4], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.transpose(bs.get("x"))?;
        weighted_scalar(t, y)
    })
}

fn check_reshape() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[3, 4], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.reshape(bs.get("x"), &[2, 6])?;
        weighted_scalar(t, y)
    })
}

fn check_scale() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[2, 5], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.scale(bs.get("x"), 1.7);
        weighted_scalar(t, y)
    })
}

fn check_add_scalar() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[2, 5], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.add_scalar(bs.get("x"), -0.3);
        weighted_scalar(t, y)
    })
}

fn check_pick() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[7], -1.0, 1.0)]);
    fd(&p, |t, bs| t.pick(bs.get("x"), 4))
}

fn check_mean_rows() -> Result<f64, DiagnosticsError> {
    let p = filled(&[("x", &[5, 4], -1.0, 1.0)]);
    fd(&p, |t, bs| {
        let y = t.mean_rows(bs.get("x"), 1, 4)?;
        weighted_scalar(t, y)
    })
}

// ---------------------------------------------------------------------------
// End-to-end checks through the policy network on a real encoded screen.

/// A minimal app with a textbox, a guarded button, and scrollable content,
/// so that every action type is available from the very first observation.
const CHECK_APP: &str = r#"{
  "format_version": 1,
  "app": "selfcheck",
  "content_height": 2240,
  "initial": {"screen": "main", "query": "", "sent": "0"},
  "screens": [
    {
      "name": "main",
      "when": [["eq", "screen", "main"]],
      "elements": [
        {"key": "query_box", "type": "Textbox", "text": "Query: {query}", "bbox": [120, 140, 560, 200]},
        {"key": "send_btn", "type": "Button", "text": "Search", "bbox": [120, 260, 280, 320]}
      ]
    }
  ],
  "transitions": [
    {"on": {"action": "type", "element": "query_box"}, "effects": [["set", "query", "{text}"]]},
    {"on": {"action": "click", "element": "send_btn"}, "when": [["ne", "query", ""]], "effects": [["set", "sent", "1"]]}
  ]
}"#;

const CHECK_TASK: &str = r#"{
  "format_version": 1,
  "task_id": "selfcheck_search",
  "app": "selfcheck",
  "goal_template": "Search for {q}",
  "slots": [["q", "widgets"]],
  "success": [["eq", "sent", "1"], ["eq", "query", "{q}"]]
}"#;

/// Expected optimal plan length for the self-check task: type, click, finish.
const CHECK_PLAN_LEN: usize = 3;

fn check_fixture() -> Result<(AppSpec, TaskInstance), DiagnosticsError> {
    let app = parse_app_spec(CHECK_APP, "selfcheck-app")?;
    let task = parse_task_instance(CHECK_TASK, "selfcheck-task")?;
    Ok((app, task))
}

/// Encodes the reset observation of the self-check app under a small policy
/// configuration; every action type is valid on this screen.
fn check_encoding() -> Result<(PolicyConfig, EncodedInput, TaskInstance), DiagnosticsError> {
    let (app, task) = check_fixture()?;
    let vocab = Vocab::build(&[&app], &[&task], MAX_ELEMENT_IDS);
    let config = PolicyConfig {
        layers: 1,
        heads: 2,
        hidden_dim: 16,
        max_seq_len: 256,
        max_local_pos: 32,
        ..PolicyConfig::desk(vocab.len())
    };
    let ep = Episode::new(&app, &task, CHECK_SEED, 10)?;
    let obs = ep.observation();
    let ui = extract(obs, &obs.goal_text);
    let tokens = serialize(&vocab, &ui, &obs.goal_text, &HistorySummary::new(), config.max_seq_len)?;
    let input = encode_input(&config, &tokens, &ui, &task, obs.scrollable())?;
    Ok((config, input, task))
}

fn policy_point(config: &PolicyConfig) -> Result<crate::policy::PolicyParams, DiagnosticsError> {
    Ok(init_params(config, CHECK_SEED)?)
}

fn ad_err(e: PolicyError) -> AdError {
    AdError::GradCheck(e.to_string())
}

fn check_policy_nll() -> Result<f64, DiagnosticsError> {
    let (config, input, _task) = check_encoding()?;
    let params = policy_point(&config)?;
    // One action per head: element click, slot-filling type, scroll, finish.
    let actions = [
        Action::Click { elem_id: 2 },
        Action::Type {
            elem_id: 1,
            text: "widgets".into(),
        },
        Action::Scroll {
            direction: ScrollDirection::Down,
            amount: 2,
        },
        Action::Finish,
    ];
    fd(&params.pi, move |t, bs| {
        let mut total: Option<NodeId> = None;
        for a in &actions {
            let nll = nll_node(t, bs, &config, &input, a).map_err(ad_err)?;
            total = Some(match total {
                None => nll,
                Some(acc) => t.add(acc, nll)?,
            });
        }
        Ok(total.expect("non-empty action list"))
    })
}

fn check_q_head() -> Result<f64, DiagnosticsError> {
    let (config, input, _task) = check_encoding()?;
    let params = policy_point(&config)?;
    let action = Action::Type {
        elem_id: 1,
        text: "widgets".into(),
    };
    fd(&params.q, move |t, bs| {
        q_node(t, bs, &config, &input, &action).map_err(ad_err)
    })
}

fn check_v_head() -> Result<f64, DiagnosticsError> {
    let (config, input, _task) = check_encoding()?;
    let params = policy_point(&config)?;
    fd(&params.v, move |t, bs| {
        v_node(t, bs, &config, &input).map_err(ad_err)
    })
}

// ---------------------------------------------------------------------------
// Oracle checks against closed forms.

fn check_value_iteration() -> Result<CheckOutcome, DiagnosticsError> {
    // s0 chooses between a detour worth gamma (via s1's terminal reward of 1)
    // and an immediate 0.5; s2 is terminal.
    let gamma = 0.9;
    let m = MDPModel {
        transitions: vec![
            vec![(1, 0.0), (2, 0.5)],
            vec![(2, 1.0)],
            vec![],
        ],
        terminal: vec![false, false, true],
    };
    let (v, _q) = value_iteration(&m, gamma, 1e-12)?;
    let expected = [gamma.max(0.5), 1.0, 0.0];
    let measured = v
        .iter()
        .zip(expected.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    Ok(CheckOutcome::new("value_iteration", measured, 1e-9))
}

fn check_expectile() -> Result<CheckOutcome, DiagnosticsError> {
    // Two-point closed form: the tau-expectile of {a, b} is
    // tau*max + (1-tau)*min.
    let mut measured = 0.0_f64;
    for (samples, tau) in [
        (vec![0.0, 1.0], 0.9),
        (vec![0.0, 1.0], 0.5),
        (vec![-1.0, 1.0], 0.7),
    ] {
        let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expected = tau * hi + (1.0 - tau) * lo;
        let got = empirical_expectile(&samples, tau)?;
        measured = measured.max((got - expected).abs());
    }
    Ok(CheckOutcome::new("expectile", measured, 1e-8))
}

fn check_plan_replay() -> Result<CheckOutcome, DiagnosticsError> {
    let (app, task) = check_fixture()?;
    let plan = bfs_plan(&app, &task, 8)?;
    let traj = replay_plan(&app, &task, CHECK_SEED, &plan.actions)?;
    let length_dev = plan.length.abs_diff(CHECK_PLAN_LEN) as f64;
    let replay_dev = if traj.success { 0.0 } else { 1.0 };
    Ok(CheckOutcome::new(
        "plan_replay",
        length_dev + replay_dev,
        0.0,
    ))
}
