use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::env::tests::login_fixture;
use crate::env::{parse_app_spec, parse_task_instance, Episode};
use crate::oracle;
use crate::perception::{Vocab, MAX_ELEMENT_IDS};
use crate::policy::{init_params, q_value, v_value, PolicyConfig};

/// Two buttons, no textbox, no scrolling: CLICK and FINISH only.
const PAIR_APP: &str = r#"{
  "format_version": 1,
  "app": "pair",
  "content_height": 1120,
  "initial": {"screen": "main", "flag": "0"},
  "screens": [
    {
      "name": "main",
      "when": [["eq", "screen", "main"]],
      "elements": [
        {"key": "go_btn", "type": "Button", "text": "Go", "bbox": [100, 100, 220, 160]},
        {"key": "halt_btn", "type": "Button", "text": "Halt", "bbox": [100, 200, 220, 260]}
      ]
    }
  ],
  "transitions": [
    {"on": {"action": "click", "element": "go_btn"}, "effects": [["set", "flag", "1"]]},
    {"on": {"action": "click", "element": "halt_btn"}, "effects": [["set", "flag", "2"]]}
  ]
}"#;

const PAIR_GO_TASK: &str = r#"{
  "format_version": 1,
  "task_id": "pair_go",
  "app": "pair",
  "goal_template": "Press the Go button",
  "slots": [],
  "success": [["eq", "flag", "1"]]
}"#;

/// Satisfied at reset: FINISH alone succeeds.
const PAIR_TRIVIAL_TASK: &str = r#"{
  "format_version": 1,
  "task_id": "pair_trivial",
  "app": "pair",
  "goal_template": "Do nothing",
  "slots": [],
  "success": [["eq", "screen", "main"]]
}"#;

/// Textbox + button + tall content + a slot: all four action types valid.
const WIDE_APP: &str = r#"{
  "format_version": 1,
  "app": "wide",
  "content_height": 2240,
  "initial": {"screen": "main", "query": "", "sent": "0"},
  "screens": [
    {
      "name": "main",
      "when": [["eq", "screen", "main"]],
      "elements": [
        {"key": "query_box", "type": "Textbox", "text": "Query: {query}", "bbox": [100, 100, 500, 160]},
        {"key": "send_btn", "type": "Button", "text": "Send", "bbox": [100, 200, 220, 260]}
      ]
    }
  ],
  "transitions": [
    {"on": {"action": "type", "element": "query_box"}, "effects": [["set", "query", "{text}"]]},
    {"on": {"action": "click", "element": "send_btn"}, "when": [["ne", "query", ""]], "effects": [["set", "sent", "1"]]}
  ]
}"#;

const WIDE_TASK: &str = r#"{
  "format_version": 1,
  "task_id": "wide_send",
  "app": "wide",
  "goal_template": "Send the query {q}",
  "slots": [["q", "hello"]],
  "success": [["eq", "sent", "1"]]
}"#;

fn fixture(app_json: &str, task_json: &str) -> (AppSpec, TaskInstance) {
    let app = parse_app_spec(app_json, "app.json").expect("app");
    let task = parse_task_instance(task_json, "task.json").expect("task");
    (app, task)
}

fn tiny_config(vocab_size: usize) -> PolicyConfig {
    PolicyConfig {
        layers: 1,
        heads: 2,
        hidden_dim: 16,
        max_seq_len: 256,
        max_local_pos: 32,
        ..PolicyConfig::desk(vocab_size)
    }
}

/// Vocab + tiny network config covering the given app/task pairs.
fn setup(pairs: &[(&AppSpec, &TaskInstance)]) -> (Vocab, PolicyConfig) {
    let apps: Vec<&AppSpec> = pairs.iter().map(|(a, _)| *a).collect();
    let tasks: Vec<&TaskInstance> = pairs.iter().map(|(_, t)| *t).collect();
    let vocab = Vocab::build(&apps, &tasks, MAX_ELEMENT_IDS);
    let config = tiny_config(vocab.len());
    (vocab, config)
}

/// Drives a fixed action sequence through a fresh episode; the sequence
/// must end the episode (FINISH or step cap).
fn run_scripted(
    app: &AppSpec,
    task: &TaskInstance,
    seed: u64,
    actions: &[Action],
    t_max: usize,
) -> Trajectory {
    let mut ep = Episode::new(app, task, seed, t_max).expect("episode");
    let mut steps = Vec::new();
    for a in actions {
        let obs = ep.observation().clone();
        ep.step(a).expect("scripted step");
        steps.push((obs, a.clone()));
    }
    assert!(ep.done(), "scripted episode must end the episode");
    let success = ep.check_success().expect("finished");
    Trajectory {
        steps,
        success,
        task: task.clone(),
        seed,
    }
}

fn login_demo_actions() -> Vec<Action> {
    vec![
        Action::Type {
            elem_id: 1,
            text: "alice".into(),
        },
        Action::Type {
            elem_id: 2,
            text: "secret123".into(),
        },
        Action::Click { elem_id: 3 },
        Action::Finish,
    ]
}

fn fill_store(store: &mut crate::autodiff::ParameterStore, value: f64) {
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        store.get_mut(&name).expect("name").fill(value);
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        bc_epochs: 2,
        rl_episodes: 3,
        grad_steps: 4,
        t_max: 6,
        lr: 1e-3,
        ..TrainConfig::desk()
    }
}

// ---------------------------------------------------------------- labeling

#[test]
fn three_step_success_labels_exact_discounted_rewards() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let actions = vec![
        Action::Type {
            elem_id: 1,
            text: "alice".into(),
        },
        Action::Type {
            elem_id: 2,
            text: "secret123".into(),
        },
        Action::Click { elem_id: 3 },
    ];
    let traj = run_scripted(&app, &task, 4, &actions, 3);
    assert!(traj.success);
    let records = label_rewards(&ctx, &traj, 0.99, "ep-0").expect("label");
    assert_eq!(records.len(), 3);
    let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
    assert!((rewards[0] - 0.9801).abs() < 1e-12);
    assert!((rewards[1] - 0.99).abs() < 1e-12);
    assert_eq!(rewards[2], 1.0, "terminal reward must be exactly +1");
    assert_eq!(
        records.iter().map(|r| r.terminal).collect::<Vec<_>>(),
        vec![false, false, true]
    );
    assert!(records[0].next_obs.is_some() && records[1].next_obs.is_some());
    assert!(records[2].next_obs.is_none(), "terminal has no successor");
    // Successor of step t is the observation of step t+1.
    assert_eq!(
        records[0].next_obs.as_ref().unwrap(),
        &records[1].obs,
        "successor chain must stitch consecutive steps"
    );
    for r in &records {
        assert_eq!(r.provenance.episode_id, "ep-0");
        assert_eq!(r.provenance.app, "login");
        assert_eq!(r.provenance.task_id, "login_alice");
    }
}

#[test]
fn two_step_failure_labels_negative_rewards() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let actions = vec![
        Action::Type {
            elem_id: 1,
            text: "alice".into(),
        },
        Action::Finish,
    ];
    let traj = run_scripted(&app, &task, 4, &actions, 8);
    assert!(!traj.success);
    let records = label_rewards(&ctx, &traj, 0.99, "ep-1").expect("label");
    let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
    assert!((rewards[0] + 0.99).abs() < 1e-12);
    assert_eq!(rewards[1], -1.0, "terminal reward must be exactly -1");
}

#[test]
fn labeling_rejects_empty_trajectory_and_bad_gamma() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let empty = Trajectory {
        steps: vec![],
        success: false,
        task: task.clone(),
        seed: 0,
    };
    assert!(matches!(
        label_rewards(&ctx, &empty, 0.99, "e"),
        Err(TrainError::EmptyTrajectory)
    ));

    let traj = run_scripted(&app, &task, 4, &[Action::Finish], 8);
    let err = label_rewards(&ctx, &traj, 1.5, "e");
    assert!(matches!(err, Err(TrainError::InvalidConfig(_))));
    let err = label_rewards(&ctx, &traj, 0.0, "e");
    assert!(matches!(err, Err(TrainError::InvalidConfig(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// |r_t| = gamma^(T-t), the terminal label is exactly +-1, and
    /// magnitudes never decrease toward the end of the episode.
    #[test]
    fn reward_labels_have_exact_magnitudes(
        len in 1usize..30,
        gamma in 0.05f64..=1.0,
        success in any::<bool>(),
    ) {
        let rewards = rewards_vector(success, len, gamma);
        prop_assert_eq!(rewards.len(), len);
        let last = len - 1;
        for (t, r) in rewards.iter().enumerate() {
            let expected = gamma.powi((last - t) as i32);
            prop_assert!((r.abs() - expected).abs() < 1e-12);
            let sign_ok = if success { *r > 0.0 } else { *r < 0.0 };
            prop_assert!(sign_ok, "labels share the outcome's sign");
        }
        prop_assert_eq!(rewards[last].abs(), 1.0);
        for t in 0..last {
            prop_assert!(rewards[t].abs() <= rewards[t + 1].abs() + 1e-15);
        }
    }

    /// Mirror symmetry of the asymmetric squared loss.
    #[test]
    fn expectile_loss_is_mirror_symmetric(
        u in -5.0f64..5.0,
        tau in 0.01f64..0.99,
    ) {
        let lhs = expectile_loss(u, tau);
        let rhs = expectile_loss(-u, 1.0 - tau);
        prop_assert!((lhs - rhs).abs() < 1e-12);
        prop_assert!(lhs >= 0.0);
    }
}

#[test]
fn expectile_loss_matches_hand_values() {
    assert!((expectile_loss(1.0, 0.9) - 0.9).abs() < 1e-15);
    assert!((expectile_loss(-1.0, 0.9) - 0.1).abs() < 1e-15);
    assert!((expectile_loss(2.0, 0.5) - 2.0).abs() < 1e-15);
    assert_eq!(expectile_loss(0.0, 0.3), 0.0);
}

#[test]
fn advantage_weight_matches_hand_values() {
    assert!((advantage_weight(0.1, 10.0, 100.0) - std::f64::consts::E).abs() < 1e-12);
    assert_eq!(advantage_weight(0.0, 0.0, 100.0), 1.0);
    assert_eq!(advantage_weight(5.0, 10.0, 100.0), 100.0, "clipped");
    assert!(advantage_weight(-50.0, 10.0, 100.0) > 0.0, "never zero");
}

// ---------------------------------------------------------------- cloning

#[test]
fn cloning_loss_starts_at_ln4_when_all_four_types_are_uniform() {
    let (app, task) = fixture(WIDE_APP, WIDE_TASK);
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let traj = run_scripted(&app, &task, 9, &[Action::Finish], 8);
    let data = Dataset::expert(&ctx, &[traj], "demo").expect("dataset");
    // Sanity: this observation offers all four action types.
    let enc = data.records[0].encode(&config).expect("encode");
    assert_eq!(enc.type_mask(), [true, true, true, true]);

    let mut params = init_params(&config, 3).expect("init");
    fill_store(&mut params.pi, 0.0);
    let cfg = TrainConfig {
        bc_epochs: 1,
        batch_size: 8,
        lr: 1e-6,
        ..TrainConfig::desk()
    };
    let report = bc_train(&mut params, &data, &cfg, 17).expect("bc");
    // All-zero weights make every head uniform; FINISH then costs exactly
    // -ln(1/4) because only the type component contributes.
    assert!((report.epoch_losses[0] - 4.0f64.ln()).abs() < 1e-9);
}

#[test]
fn cloning_overfits_one_example_below_1e3() {
    let (app, task) = fixture(PAIR_APP, PAIR_GO_TASK);
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let traj = run_scripted(&app, &task, 2, &[Action::Click { elem_id: 1 }], 1);
    assert!(traj.success);
    let data = Dataset::expert(&ctx, &[traj], "demo").expect("dataset");
    let mut params = init_params(&config, 5).expect("init");
    let cfg = TrainConfig {
        bc_epochs: 500,
        batch_size: 1,
        lr: 2e-2,
        ..TrainConfig::desk()
    };
    let report = bc_train(&mut params, &data, &cfg, 23).expect("bc");
    let first = report.epoch_losses[0];
    let last = *report.epoch_losses.last().unwrap();
    assert!(
        last < 1e-3,
        "500 steps on one example must memorize it, got {last}"
    );
    assert!(last < first);
}

#[test]
fn cloning_loss_improves_on_demonstrations() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let trajs = oracle::expert_trajectories(&[(&app, &task)], 3, 71, 8).expect("demos");
    let data = Dataset::expert(&ctx, &trajs, "demo").expect("dataset");
    let mut params = init_params(&config, 6).expect("init");
    let cfg = TrainConfig {
        bc_epochs: 6,
        batch_size: 4,
        lr: 3e-3,
        ..TrainConfig::desk()
    };
    let report = bc_train(&mut params, &data, &cfg, 29).expect("bc");
    assert_eq!(report.epoch_losses.len(), 6);
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
}

#[test]
fn cloning_rejects_wrong_kind_and_empty_dataset() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let mut params = init_params(&config, 1).expect("init");
    let cfg = quick_cfg();

    let empty = Dataset {
        kind: DatasetKind::Expert,
        records: vec![],
    };
    assert!(matches!(
        bc_train(&mut params, &empty, &cfg, 0),
        Err(TrainError::EmptyDataset)
    ));

    let traj = run_scripted(&app, &task, 4, &[Action::Finish], 8);
    let offline = Dataset::offline(&ctx, &[traj], 0.99, "rl").expect("dataset");
    let err = bc_train(&mut params, &offline, &cfg, 0);
    assert!(matches!(err, Err(TrainError::WrongKind { .. })));
}

#[test]
fn cloning_flags_masked_expert_action_as_corrupt() {
    let (app, task) = fixture(PAIR_APP, PAIR_GO_TASK);
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    // A recorded action that points at an element the observation never
    // had: the likelihood is undefined, which must surface as corruption.
    let mut ep = Episode::new(&app, &task, 1, 4).expect("episode");
    let obs = ep.observation().clone();
    ep.step(&Action::Finish).expect("step");
    let traj = Trajectory {
        steps: vec![(obs, Action::Click { elem_id: 9 })],
        success: false,
        task: task.clone(),
        seed: 1,
    };
    let data = Dataset::expert(&ctx, &[traj], "demo").expect("dataset");
    let mut params = init_params(&config, 1).expect("init");
    let err = bc_train(&mut params, &data, &quick_cfg(), 0);
    match err {
        Err(TrainError::CorruptRecord { episode_id, t, .. }) => {
            assert_eq!(episode_id, "demo-00000");
            assert_eq!(t, 0);
        }
        other => panic!("expected CorruptRecord, got {other:?}"),
    }
}

// ------------------------------------------------------------- collection

/// Replays a fixed plan; used to stand in for an optimal policy.
struct ScriptPolicy {
    plan: Vec<Action>,
    cursor: usize,
}

impl RolloutPolicy for ScriptPolicy {
    fn begin(&mut self, _app: &AppSpec, _task: &TaskInstance, _seed: u64) -> TrainResult<()> {
        self.cursor = 0;
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, _t: usize, _seed: u64) -> TrainResult<Action> {
        let a = self
            .plan
            .get(self.cursor)
            .cloned()
            .unwrap_or(Action::Finish);
        self.cursor += 1;
        Ok(a)
    }

    fn executed(&mut self, _action: &Action) {}
}

/// Errors inside selected episodes to exercise abort isolation.
struct FlakyPolicy {
    fail_on: BTreeSet<usize>,
    episode: usize,
}

impl RolloutPolicy for FlakyPolicy {
    fn begin(&mut self, _app: &AppSpec, _task: &TaskInstance, _seed: u64) -> TrainResult<()> {
        self.episode += 1;
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, _t: usize, _seed: u64) -> TrainResult<Action> {
        if self.fail_on.contains(&(self.episode - 1)) {
            return Err(TrainError::Format("injected policy fault".into()));
        }
        Ok(Action::Finish)
    }

    fn executed(&mut self, _action: &Action) {}
}

#[test]
fn collection_with_scripted_optimal_policy_always_succeeds() {
    let (app, task) = login_fixture();
    let suite = vec![(app.clone(), task.clone())];
    let mut policy = ScriptPolicy {
        plan: login_demo_actions(),
        cursor: 0,
    };
    let cfg = quick_cfg();
    let report = collect_episodes_with(&mut policy, &suite, 3, &cfg, 55).expect("collect");
    assert_eq!(report.trajectories.len(), 3);
    assert!(report.aborted.is_empty());
    assert_eq!(report.successes(), 3, "optimal plan succeeds every episode");
    for traj in &report.trajectories {
        assert_eq!(traj.steps.len(), 4);
    }
    // Identical seeds and policy reproduce identical trajectories.
    let mut policy2 = ScriptPolicy {
        plan: login_demo_actions(),
        cursor: 0,
    };
    let report2 = collect_episodes_with(&mut policy2, &suite, 3, &cfg, 55).expect("collect");
    for (a, b) in report.trajectories.iter().zip(&report2.trajectories) {
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.success, b.success);
        let ra: Vec<String> = a.steps.iter().map(|(_, act)| act.render()).collect();
        let rb: Vec<String> = b.steps.iter().map(|(_, act)| act.render()).collect();
        assert_eq!(ra, rb);
    }
}

#[test]
fn collection_with_network_policy_is_seed_deterministic() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let params = init_params(&config, 8).expect("init");
    let suite = vec![(app, task)];
    let cfg = TrainConfig {
        t_max: 5,
        ..quick_cfg()
    };
    let a = collect_episodes(&params, &vocab, &suite, 4, &cfg, 31).expect("collect");
    let b = collect_episodes(&params, &vocab, &suite, 4, &cfg, 31).expect("collect");
    assert_eq!(a.trajectories.len(), 4);
    for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
        let ra: Vec<String> = ta.steps.iter().map(|(_, act)| act.render()).collect();
        let rb: Vec<String> = tb.steps.iter().map(|(_, act)| act.render()).collect();
        assert_eq!(ra, rb, "same seed must reproduce the same episode");
    }
}

#[test]
fn collecting_zero_episodes_returns_empty() {
    let cfg = quick_cfg();
    let mut policy = ScriptPolicy {
        plan: vec![],
        cursor: 0,
    };
    let report = collect_episodes_with(&mut policy, &[], 0, &cfg, 0).expect("collect");
    assert!(report.trajectories.is_empty());
    assert!(report.aborted.is_empty());
}

#[test]
fn a_failing_episode_aborts_alone_and_is_logged() {
    let (app, task) = login_fixture();
    let suite = vec![(app, task)];
    let mut policy = FlakyPolicy {
        fail_on: [1usize, 3].into_iter().collect(),
        episode: 0,
    };
    let report = collect_episodes_with(&mut policy, &suite, 4, &quick_cfg(), 5).expect("collect");
    assert_eq!(report.trajectories.len(), 2, "two episodes survive");
    assert_eq!(report.aborted.len(), 2);
    assert!(report.aborted[0].contains("episode 1"));
    assert!(report.aborted[1].contains("episode 3"));
    assert!(report.aborted[0].contains("injected policy fault"));
}

// ------------------------------------------------------------- value fits

fn offline_pair_dataset(
    ctx: &EncodeContext,
    app: &AppSpec,
    task: &TaskInstance,
) -> Dataset {
    // Two one-step episodes from the same start state: pressing Go succeeds
    // (+1), pressing Halt fails (-1). Two-point target set {-1, +1}.
    let ok = run_scripted(app, task, 2, &[Action::Click { elem_id: 1 }], 1);
    assert!(ok.success);
    let bad = run_scripted(app, task, 2, &[Action::Click { elem_id: 2 }], 1);
    assert!(!bad.success);
    Dataset::offline(ctx, &[ok, bad], 0.99, "rl").expect("dataset")
}

#[test]
fn terminal_reward_of_one_drives_q_to_one() {
    let (app, task) = fixture(PAIR_APP, PAIR_TRIVIAL_TASK);
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let traj = run_scripted(&app, &task, 3, &[Action::Finish], 4);
    assert!(traj.success);
    let data = Dataset::offline(&ctx, &[traj], 0.99, "rl").expect("dataset");
    let mut params = init_params(&config, 11).expect("init");
    let cfg = TrainConfig {
        grad_steps: 300,
        batch_size: 1,
        lr: 5e-3,
        polyak: 0.05,
        ..TrainConfig::desk()
    };
    fit_q_v(&mut params, &data, &cfg, 41).expect("fit");
    let enc = data.records[0].encode(&config).expect("encode");
    let q = q_value(&params, &enc, &Action::Finish).expect("q");
    assert!(
        (q - 1.0).abs() < 1e-2,
        "single terminal transition with reward 1 must regress Q to 1, got {q}"
    );
}

#[test]
fn value_net_converges_to_the_expectile_of_q_targets() {
    let (app, task) = fixture(PAIR_APP, PAIR_GO_TASK);
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let data = offline_pair_dataset(&ctx, &app, &task);
    let enc = data.records[0].encode(&config).expect("encode");

    for tau in [0.9, 0.5] {
        let mut params = init_params(&config, 13).expect("init");
        let cfg = TrainConfig {
            grad_steps: 500,
            batch_size: 2,
            lr: 5e-3,
            polyak: 0.05,
            tau_exp: tau,
            ..TrainConfig::desk()
        };
        fit_q_v(&mut params, &data, &cfg, 43).expect("fit");
        let targets: Vec<f64> = data.records.iter().map(|r| r.reward).collect();
        let oracle_value = oracle::empirical_expectile(&targets, tau).expect("oracle");
        let v = v_value(&params, &enc).expect("v");
        assert!(
            (v - oracle_value).abs() < 1e-2,
            "tau={tau}: fitted V {v} vs analytic expectile {oracle_value}"
        );
        // The Q ends the fit near the terminal rewards themselves.
        let q_ok = q_value(&params, &enc, &Action::Click { elem_id: 1 }).expect("q");
        let q_bad = q_value(&params, &enc, &Action::Click { elem_id: 2 }).expect("q");
        assert!((q_ok - 1.0).abs() < 5e-2, "Q(s, Go) -> +1, got {q_ok}");
        assert!((q_bad + 1.0).abs() < 5e-2, "Q(s, Halt) -> -1, got {q_bad}");
    }
}

#[test]
fn non_finite_value_loss_aborts_with_phase_and_step() {
    let (app, task) = fixture(PAIR_APP, PAIR_GO_TASK);
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let data = offline_pair_dataset(&ctx, &app, &task);
    let mut params = init_params(&config, 17).expect("init");
    fill_store(&mut params.q, 1e200);
    let err = fit_q_v(&mut params, &data, &quick_cfg(), 47);
    match err {
        Err(TrainError::NonFiniteLoss { phase, step }) => {
            assert_eq!(phase, "v-fit");
            assert_eq!(step, 0);
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn missing_successor_on_nonterminal_record_is_corrupt() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let traj = run_scripted(
        &app,
        &task,
        4,
        &[
            Action::Type {
                elem_id: 1,
                text: "alice".into(),
            },
            Action::Finish,
        ],
        8,
    );
    let mut data = Dataset::offline(&ctx, &[traj], 0.99, "rl").expect("dataset");
    data.records[0].next_obs = None;
    data.records[0].next_ui = None;
    data.records[0].next_tokens = None;
    let mut params = init_params(&config, 19).expect("init");
    let cfg = TrainConfig {
        batch_size: 2,
        grad_steps: 1,
        ..quick_cfg()
    };
    let err = fit_q_v(&mut params, &data, &cfg, 53);
    assert!(matches!(err, Err(TrainError::CorruptRecord { .. })));
}

// -------------------------------------------------------- policy extraction

#[test]
fn beta_zero_extraction_step_is_bitwise_identical_to_cloning_step() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let traj = run_scripted(&app, &task, 4, &login_demo_actions(), 8);
    assert!(traj.success);
    let expert = Dataset::expert(&ctx, &[traj.clone()], "demo").expect("expert");
    let offline = Dataset::offline(&ctx, &[traj], 0.99, "rl").expect("offline");

    let init = init_params(&config, 21).expect("init");
    let mut bc_params = init.clone();
    let mut iql_params = init.clone();

    let cfg = TrainConfig {
        batch_size: 4,
        bc_epochs: 1,
        grad_steps: 1,
        beta: 0.0,
        lr: 1e-3,
        ..TrainConfig::desk()
    };
    bc_train(&mut bc_params, &expert, &cfg, 99).expect("bc");
    iql_policy_update(&mut iql_params, &offline, &cfg, 99).expect("iql");

    let mut moved = false;
    for ((name_a, a), (name_b, b)) in bc_params.pi.iter().zip(iql_params.pi.iter()) {
        assert_eq!(name_a, name_b);
        let init_t = init.pi.get(name_a).unwrap();
        for ((&x, &y), &z) in a.iter().zip(b.iter()).zip(init_t.iter()) {
            assert_eq!(
                x.to_bits(),
                y.to_bits(),
                "{name_a}: zero-advantage extraction must equal cloning bit for bit"
            );
            moved |= x.to_bits() != z.to_bits();
        }
    }
    assert!(moved, "the shared step must actually change parameters");
}

#[test]
fn extraction_weights_stay_positive_and_clipped() {
    let (app, task) = fixture(PAIR_APP, PAIR_GO_TASK);
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let data = offline_pair_dataset(&ctx, &app, &task);
    let mut params = init_params(&config, 23).expect("init");
    let cfg = TrainConfig {
        beta: 10.0,
        weight_clip: 2.0,
        grad_steps: 3,
        batch_size: 2,
        ..quick_cfg()
    };
    let report = iql_policy_update(&mut params, &data, &cfg, 61).expect("iql");
    assert!(report.max_weight <= 2.0, "weights clipped at weight_clip");
    assert!(report.mean_weight > 0.0);
    assert_eq!(report.losses.len(), 3);
}

// ------------------------------------------------------------ orchestration

#[test]
fn full_hybrid_run_writes_checkpoints_datasets_and_report() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let suite = vec![(app.clone(), task.clone())];
    let trajs = oracle::expert_trajectories(&[(&app, &task)], 2, 123, 8).expect("demos");
    let expert = Dataset::expert(&ctx, &trajs, "demo").expect("expert");
    let mut params = init_params(&config, 27).expect("init");
    let dir = tempfile::tempdir().expect("tempdir");

    let report = run_hybrid(
        &mut params,
        Some(&expert),
        &suite,
        &ctx,
        &quick_cfg(),
        77,
        dir.path(),
    )
    .expect("run");

    for file in [
        "bc.ckpt",
        "bc.ckpt.manifest",
        "bc.ckpt.config.json",
        "offline.jsonl",
        "offline.jsonl.obs",
        "qv.ckpt",
        "final.ckpt",
        "report.json",
    ] {
        assert!(dir.path().join(file).exists(), "missing artifact {file}");
    }
    assert!(report.bc.is_some());
    assert!(report.collect.is_some());
    assert!(report.qv.is_some());
    assert!(report.policy_phase.is_some());
    assert!(report.error.is_none());
    assert_eq!(report.checkpoints.len(), 3);
    assert_eq!(report.collect.as_ref().unwrap().completed, 3);
    assert_eq!(report.bc.as_ref().unwrap().epoch_losses.len(), 2);

    // The written report parses back and echoes the configuration.
    let text = std::fs::read_to_string(dir.path().join("report.json")).expect("read");
    let parsed: HybridReport = serde_json::from_str(&text).expect("parse");
    assert_eq!(parsed.config, quick_cfg());
    assert_eq!(parsed.seed, 77);

    // The final checkpoint loads and matches the in-memory parameters.
    let loaded = load_policy(&dir.path().join("final.ckpt")).expect("load");
    assert_eq!(loaded.config, config);
    for ((_, a), (_, b)) in loaded.pi.iter().zip(params.pi.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn skipping_collection_leaves_final_equal_to_cloning_checkpoint() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let suite = vec![(app.clone(), task.clone())];
    let trajs = oracle::expert_trajectories(&[(&app, &task)], 2, 123, 8).expect("demos");
    let expert = Dataset::expert(&ctx, &trajs, "demo").expect("expert");
    let mut params = init_params(&config, 27).expect("init");
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = TrainConfig {
        rl_episodes: 0,
        ..quick_cfg()
    };
    let report = run_hybrid(&mut params, Some(&expert), &suite, &ctx, &cfg, 7, dir.path())
        .expect("run");
    assert!(report.qv.is_none() && report.collect.is_none());
    assert_eq!(
        report.checkpoints.get("bc"),
        report.checkpoints.get("final"),
        "without an offline phase the final model is the cloned model"
    );
    assert!(!dir.path().join("offline.jsonl").exists());
    assert!(!dir.path().join("qv.ckpt").exists());
}

#[test]
fn skipping_cloning_collects_from_the_initial_policy() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let suite = vec![(app, task)];
    let mut params = init_params(&config, 29).expect("init");
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = TrainConfig {
        bc_epochs: 0,
        rl_episodes: 2,
        t_max: 4,
        ..quick_cfg()
    };
    let report =
        run_hybrid(&mut params, None, &suite, &ctx, &cfg, 9, dir.path()).expect("run");
    assert!(report.bc.is_none());
    assert_eq!(report.collect.as_ref().unwrap().completed, 2);
}

#[test]
fn cloning_without_expert_data_errors() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let suite = vec![(app, task)];
    let mut params = init_params(&config, 29).expect("init");
    let dir = tempfile::tempdir().expect("tempdir");
    let err = run_hybrid(
        &mut params,
        None,
        &suite,
        &ctx,
        &quick_cfg(),
        9,
        dir.path(),
    );
    assert!(matches!(err, Err(TrainError::MissingExpertData)));
    // The failure is still reported machine-readably.
    let text = std::fs::read_to_string(dir.path().join("report.json")).expect("report");
    let parsed: HybridReport = serde_json::from_str(&text).expect("parse");
    assert!(parsed.error.is_some());
}

#[test]
fn phase_failure_keeps_partial_artifacts_and_records_the_error() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let suite = vec![(app, task)];
    let mut params = init_params(&config, 31).expect("init");
    // Poisoned value network: the Q/V fit dies on its first step, after
    // collection already wrote the offline dataset.
    fill_store(&mut params.q, 1e200);
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = TrainConfig {
        bc_epochs: 0,
        rl_episodes: 2,
        t_max: 4,
        ..quick_cfg()
    };
    let err = run_hybrid(&mut params, None, &suite, &ctx, &cfg, 13, dir.path());
    assert!(matches!(err, Err(TrainError::NonFiniteLoss { .. })));
    assert!(dir.path().join("bc.ckpt").exists());
    assert!(dir.path().join("offline.jsonl").exists());
    assert!(!dir.path().join("final.ckpt").exists());
    let text = std::fs::read_to_string(dir.path().join("report.json")).expect("report");
    let parsed: HybridReport = serde_json::from_str(&text).expect("parse");
    assert!(parsed.error.as_ref().unwrap().contains("non-finite"));
}

// ------------------------------------------------------------------ files

#[test]
fn dataset_files_round_trip_exactly() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let trajs = oracle::expert_trajectories(&[(&app, &task)], 2, 321, 8).expect("demos");
    let collected = collect_episodes_with(
        &mut ScriptPolicy {
            plan: login_demo_actions(),
            cursor: 0,
        },
        &[(app.clone(), task.clone())],
        2,
        &quick_cfg(),
        5,
    )
    .expect("collect");
    let expert = Dataset::expert(&ctx, &trajs, "demo").expect("expert");
    let offline =
        Dataset::offline(&ctx, &collected.trajectories, 0.99, "rl").expect("offline");

    let dir = tempfile::tempdir().expect("tempdir");
    let suite = vec![(app, task)];
    for (name, data) in [("expert.jsonl", &expert), ("offline.jsonl", &offline)] {
        let path = dir.path().join(name);
        save_dataset(data, &path).expect("save");
        let loaded = load_dataset(&path, &suite, &ctx).expect("load");
        assert_eq!(loaded.kind, data.kind);
        assert_eq!(loaded.len(), data.len());
        for (a, b) in loaded.records.iter().zip(&data.records) {
            assert_eq!(a.action, b.action);
            assert_eq!(a.reward.to_bits(), b.reward.to_bits());
            assert_eq!(a.terminal, b.terminal);
            assert_eq!(a.t, b.t);
            assert_eq!(a.provenance, b.provenance);
            assert_eq!(a.tokens.token_ids, b.tokens.token_ids);
            assert_eq!(a.obs, b.obs);
            assert_eq!(a.next_obs.is_some(), b.next_obs.is_some());
            if let (Some(na), Some(nb)) = (&a.next_tokens, &b.next_tokens) {
                assert_eq!(na.token_ids, nb.token_ids);
            }
        }
    }
}

#[test]
fn corrupted_observation_archive_refuses_to_load() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let trajs = oracle::expert_trajectories(&[(&app, &task)], 1, 321, 8).expect("demos");
    let expert = Dataset::expert(&ctx, &trajs, "demo").expect("expert");
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("expert.jsonl");
    save_dataset(&expert, &path).expect("save");

    let side = dir.path().join("expert.jsonl.obs");
    let text = std::fs::read_to_string(&side).expect("sidecar");
    let tampered = text.replacen("\"step_index\":0", "\"step_index\":7", 1);
    assert_ne!(text, tampered, "tampering must hit at least one record");
    std::fs::write(&side, tampered).expect("write");

    let suite = vec![(app, task)];
    let err = load_dataset(&path, &suite, &ctx);
    match err {
        Err(TrainError::Format(msg)) => assert!(msg.contains("corrupted"), "{msg}"),
        other => panic!("expected Format error, got {other:?}"),
    }
}

#[test]
fn loading_a_dataset_with_an_unknown_task_errors() {
    let (app, task) = login_fixture();
    let (vocab, config) = setup(&[(&app, &task)]);
    let ctx = EncodeContext {
        vocab: &vocab,
        policy: &config,
    };
    let trajs = oracle::expert_trajectories(&[(&app, &task)], 1, 1, 8).expect("demos");
    let expert = Dataset::expert(&ctx, &trajs, "demo").expect("expert");
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("expert.jsonl");
    save_dataset(&expert, &path).expect("save");
    let err = load_dataset(&path, &[], &ctx);
    match err {
        Err(TrainError::Format(msg)) => assert!(msg.contains("unknown task"), "{msg}"),
        other => panic!("expected Format error, got {other:?}"),
    }
}

#[test]
fn tampered_checkpoint_refuses_to_load() {
    let (app, task) = login_fixture();
    let (_vocab, config) = setup(&[(&app, &task)]);
    let params = init_params(&config, 37).expect("init");
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("model.ckpt");
    save_policy(&path, &params).expect("save");

    let loaded = load_policy(&path).expect("clean load");
    assert_eq!(loaded.config, config);

    let mut bytes = std::fs::read(&path).expect("read");
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    std::fs::write(&path, bytes).expect("write");
    let err = load_policy(&path);
    assert!(matches!(
        err,
        Err(TrainError::Store(
            crate::autodiff::StoreError::DigestMismatch { .. }
        ))
    ));
}
