use super::*;
use crate::autodiff::{grad_check, AdError};
use crate::env::{parse_app_spec, parse_task_instance, AppSpec, Episode, DEFAULT_T_MAX};
use crate::perception::{HistorySummary, Vocab, MAX_ELEMENT_IDS};

const SINGLE_TEXTBOX_APP: &str = r#"{
  "format_version": 1,
  "app": "form",
  "content_height": 1120,
  "initial": {"screen": "main", "name": ""},
  "screens": [
    {
      "name": "main",
      "when": [["eq", "screen", "main"]],
      "elements": [
        {"key": "name_box", "type": "Textbox", "text": "Name: {name}", "bbox": [100, 200, 400, 260]}
      ]
    }
  ],
  "transitions": [
    {"on": {"action": "type", "element": "name_box"}, "effects": [["set", "name", "{text}"]]}
  ]
}"#;

const SINGLE_TEXTBOX_TASK: &str = r#"{
  "format_version": 1,
  "task_id": "enter_name",
  "app": "form",
  "goal_template": "Enter the name {name}",
  "slots": [["name", "zoe"]],
  "success": [["eq", "name", "{name}"]]
}"#;

const BUTTONS_ONLY_APP: &str = r#"{
  "format_version": 1,
  "app": "panel",
  "content_height": 1120,
  "initial": {"screen": "main", "on": "0"},
  "screens": [
    {
      "name": "main",
      "when": [["eq", "screen", "main"]],
      "elements": [
        {"key": "go_btn", "type": "Button", "text": "Go", "bbox": [100, 200, 240, 260]},
        {"key": "stop_btn", "type": "Button", "text": "Stop", "bbox": [100, 320, 240, 380]}
      ]
    }
  ],
  "transitions": [
    {"on": {"action": "click", "element": "go_btn"}, "effects": [["set", "on", "1"]]}
  ]
}"#;

const BUTTONS_ONLY_TASK: &str = r#"{
  "format_version": 1,
  "task_id": "press_go",
  "app": "panel",
  "goal_template": "Press go",
  "slots": [],
  "success": [["eq", "on", "1"]]
}"#;

const MIXED_SCROLL_APP: &str = r#"{
  "format_version": 1,
  "app": "search",
  "content_height": 2240,
  "initial": {"screen": "main", "query": ""},
  "screens": [
    {
      "name": "main",
      "when": [["eq", "screen", "main"]],
      "elements": [
        {"key": "query_box", "type": "Textbox", "text": "Query: {query}", "bbox": [100, 200, 500, 260]},
        {"key": "go_btn", "type": "Button", "text": "Search now", "bbox": [100, 320, 260, 380]},
        {"key": "help_link", "type": "Link", "text": "Help", "bbox": [100, 440, 200, 490]}
      ]
    }
  ],
  "transitions": [
    {"on": {"action": "type", "element": "query_box"}, "effects": [["set", "query", "{text}"]]}
  ]
}"#;

const MIXED_SCROLL_TASK: &str = r#"{
  "format_version": 1,
  "task_id": "search_two",
  "app": "search",
  "goal_template": "Search for {first} and then {second}",
  "slots": [["first", "red"], ["second", "blue"]],
  "success": [["eq", "query", "{first}"]]
}"#;

fn fixture(app_json: &str, task_json: &str) -> (AppSpec, crate::env::TaskInstance) {
    let app = parse_app_spec(app_json, "app.json").expect("app");
    let task = parse_task_instance(task_json, "task.json").expect("task");
    (app, task)
}

/// Fresh-episode observation encoded for the network, with its vocab/config.
fn pipeline(
    app: &AppSpec,
    task: &crate::env::TaskInstance,
    seed: u64,
) -> (PolicyConfig, Vocab, EncodedInput) {
    let ep = Episode::new(app, task, seed, DEFAULT_T_MAX).expect("episode");
    let vocab = Vocab::build(&[app], &[task], MAX_ELEMENT_IDS);
    let config = PolicyConfig::desk(vocab.len());
    let (input, _) = encode_observation(&config, &vocab, ep.observation(), task, &HistorySummary::new())
        .expect("encode");
    (config, vocab, input)
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

#[test]
fn same_config_and_seed_give_identical_parameters() {
    let (app, task) = fixture(SINGLE_TEXTBOX_APP, SINGLE_TEXTBOX_TASK);
    let (config, _, _) = pipeline(&app, &task, 0);
    let a = init_params(&config, 42).expect("init");
    let b = init_params(&config, 42).expect("init");
    for (lhs, rhs) in [(&a.pi, &b.pi), (&a.q, &b.q), (&a.v, &b.v)] {
        assert_eq!(lhs.len(), rhs.len());
        for ((an, av), (bn, bv)) in lhs.iter().zip(rhs.iter()) {
            assert_eq!(an, bn);
            assert_eq!(av, bv);
        }
    }
    let c = init_params(&config, 43).expect("init");
    let any_diff = a
        .pi
        .iter()
        .zip(c.pi.iter())
        .any(|((_, av), (_, cv))| av != cv);
    assert!(any_diff, "different seeds must give different parameters");
}

#[test]
fn desk_preset_stays_under_two_million_parameters() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let (config, _, _) = pipeline(&app, &task, 0);
    let params = init_params(&config, 1).expect("init");
    let n = params.num_scalars();
    assert!(n < 2_000_000, "parameter count {n} exceeds the budget");
    assert!(n > 50_000, "parameter count {n} suspiciously small");
}

#[test]
fn indivisible_hidden_dim_is_rejected() {
    let mut config = PolicyConfig::desk(300);
    config.hidden_dim = 65;
    assert!(matches!(
        init_params(&config, 0),
        Err(PolicyError::InvalidConfig(_))
    ));
}

#[test]
fn distribution_components_sum_to_one_and_masked_entries_are_zero() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let (config, _, input) = pipeline(&app, &task, 3);
    let params = init_params(&config, 5).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");

    let type_sum: f64 = dist.type_probs.iter().sum();
    assert!((type_sum - 1.0).abs() < 1e-6);
    assert!((dist.click_element_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((dist.type_element_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((dist.slot_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((dist.scroll_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);

    // Only the textbox may receive TYPE mass; others are exactly zero.
    for (i, e) in input.elements.iter().enumerate() {
        let p = dist.type_element_probs[e.elem_id - 1];
        if input.elements[i].textbox {
            assert!(p > 0.0);
        } else {
            assert_eq!(p, 0.0);
        }
    }
    assert!(dist.type_mask.iter().all(|&m| m), "all types valid here");
}

#[test]
fn single_textbox_screen_concentrates_element_mass() {
    let (app, task) = fixture(SINGLE_TEXTBOX_APP, SINGLE_TEXTBOX_TASK);
    let (config, _, input) = pipeline(&app, &task, 0);
    let params = init_params(&config, 9).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");
    assert_eq!(dist.click_element_probs, vec![1.0]);
    assert_eq!(dist.type_element_probs, vec![1.0]);
}

#[test]
fn type_is_masked_without_a_textbox() {
    let (app, task) = fixture(BUTTONS_ONLY_APP, BUTTONS_ONLY_TASK);
    let (config, _, input) = pipeline(&app, &task, 0);
    let params = init_params(&config, 2).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");
    assert_eq!(dist.type_probs[T_TYPE], 0.0);
    assert!(!dist.type_mask[T_TYPE]);
    assert!(!dist.type_mask[T_SCROLL], "content fits the viewport");
    let err = action_log_prob(
        &dist,
        &Action::Type {
            elem_id: 1,
            text: "anything".into(),
        },
    )
    .unwrap_err();
    assert!(matches!(err, PolicyError::MaskedAction(_)));
}

#[test]
fn log_prob_follows_the_factorization() {
    let dist = ActionDistribution {
        type_probs: [0.25; 4],
        type_mask: [true; 4],
        click_element_probs: vec![0.5, 0.5],
        click_element_mask: vec![true, true],
        type_element_probs: vec![1.0, 0.0],
        type_element_mask: vec![true, false],
        slot_probs: vec![1.0],
        slot_values: vec!["zoe".into()],
        scroll_probs: [1.0 / 6.0; 6],
    };
    let finish = action_log_prob(&dist, &Action::Finish).expect("finish");
    assert!((finish - 0.25f64.ln()).abs() < 1e-12);
    let click = action_log_prob(&dist, &Action::Click { elem_id: 1 }).expect("click");
    assert!((click - 0.25f64.ln() - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn exhaustive_action_probabilities_sum_to_one() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let (config, _, input) = pipeline(&app, &task, 1);
    let params = init_params(&config, 8).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");
    let valid = dist.valid_actions();
    // CLICK x3, TYPE 1 textbox x2 slots, SCROLL x6, FINISH.
    assert_eq!(valid.len(), 3 + 2 + 6 + 1);
    let total: f64 = valid
        .iter()
        .map(|a| action_log_prob(&dist, a).expect("valid").exp())
        .sum();
    assert!((total - 1.0).abs() < 1e-6, "total probability {total}");
}

#[test]
fn valid_actions_match_the_environment_action_space() {
    for (app_json, task_json, seed) in [
        (MIXED_SCROLL_APP, MIXED_SCROLL_TASK, 4u64),
        (SINGLE_TEXTBOX_APP, SINGLE_TEXTBOX_TASK, 1),
        (BUTTONS_ONLY_APP, BUTTONS_ONLY_TASK, 2),
    ] {
        let (app, task) = fixture(app_json, task_json);
        let ep = Episode::new(&app, &task, seed, DEFAULT_T_MAX).expect("episode");
        let (config, _, input) = pipeline(&app, &task, seed);
        let params = init_params(&config, 3).expect("init");
        let dist = action_distribution(&params, &input).expect("dist");

        let mut from_env = crate::env::graph::candidate_actions(ep.observation(), &task);
        from_env.push(Action::Finish);
        assert_eq!(dist.valid_actions(), from_env);
    }
}

#[test]
fn masked_actions_are_never_sampled() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let (config, _, input) = pipeline(&app, &task, 7);
    let params = init_params(&config, 13).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");
    let valid = dist.valid_actions();
    for seed in 0..100_000u64 {
        let a = sample_action(&dist, seed, 1.0, 0.1).expect("sample");
        debug_assert!(valid.contains(&a));
        if seed % 4096 == 0 {
            assert!(valid.contains(&a), "sampled masked action {}", a.render());
        }
        if let Action::Type { elem_id, .. } = &a {
            assert!(input.elements.iter().any(|e| e.elem_id == *elem_id && e.textbox));
        }
    }
    // Exhaustive membership on a smaller prefix (the debug_assert covers all
    // draws in debug builds).
    for seed in 0..5_000u64 {
        let a = sample_action(&dist, seed, 1.0, 0.1).expect("sample");
        assert!(valid.contains(&a));
    }
}

#[test]
fn epsilon_one_sampling_is_uniform_within_three_sigma() {
    let (app, task) = fixture(SINGLE_TEXTBOX_APP, SINGLE_TEXTBOX_TASK);
    let (config, _, input) = pipeline(&app, &task, 0);
    let params = init_params(&config, 21).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");
    let valid = dist.valid_actions();
    let k = valid.len();
    let n = 10_000u64;
    let mut counts = vec![0usize; k];
    for seed in 0..n {
        let a = sample_action(&dist, seed, 1.0, 1.0).expect("sample");
        let idx = valid.iter().position(|v| *v == a).expect("valid action");
        counts[idx] += 1;
    }
    let p = 1.0 / k as f64;
    let expected = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        let dev = (c as f64 - expected).abs();
        assert!(
            dev <= 3.0 * sigma,
            "action {} drawn {c} times, expected {expected:.0} +/- {:.0}",
            valid[i].render(),
            3.0 * sigma
        );
    }
}

#[test]
fn same_seed_gives_the_same_action() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let (config, _, input) = pipeline(&app, &task, 2);
    let params = init_params(&config, 17).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");
    for seed in [0u64, 9, 1234] {
        let a = sample_action(&dist, seed, 1.0, 0.1).expect("sample");
        let b = sample_action(&dist, seed, 1.0, 0.1).expect("sample");
        assert_eq!(a, b);
    }
}

#[test]
fn low_temperature_sampling_matches_greedy() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let (config, _, input) = pipeline(&app, &task, 5);
    let params = init_params(&config, 29).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");
    let greedy = greedy_action(&dist);
    for seed in 0..20u64 {
        let a = sample_action(&dist, seed, 1e-3, 0.0).expect("sample");
        assert_eq!(a, greedy);
    }
    assert!(matches!(
        sample_action(&dist, 0, 0.0, 0.0),
        Err(PolicyError::InvalidTemperature(_))
    ));
}

#[test]
fn nll_gradient_passes_finite_difference_check() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let vocab = Vocab::build(&[&app], &[&task], MAX_ELEMENT_IDS);
    let config = tiny_config(vocab.len());
    let ep = Episode::new(&app, &task, 0, DEFAULT_T_MAX).expect("episode");
    let (input, _) =
        encode_observation(&config, &vocab, ep.observation(), &task, &HistorySummary::new())
            .expect("encode");
    let params = init_params(&config, 77).expect("init");

    let type_action = Action::Type {
        elem_id: 1,
        text: "red".into(),
    };
    let click_action = Action::Click { elem_id: 2 };
    let max_rel = grad_check(
        |tape, bs| {
            let a = net::nll_node(tape, bs, &config, &input, &type_action)
                .map_err(|e| AdError::GradCheck(e.to_string()))?;
            let b = net::nll_node(tape, bs, &config, &input, &click_action)
                .map_err(|e| AdError::GradCheck(e.to_string()))?;
            let s = tape.add(a, b)?;
            Ok(tape.scale(s, 0.5))
        },
        &params.pi,
        1e-5,
        2,
        11,
    )
    .expect("grad check");
    assert!(max_rel < 1e-4, "max relative error {max_rel}");
}

#[test]
fn q_and_v_values_are_finite_and_deterministic() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let (config, _, input) = pipeline(&app, &task, 6);
    let params = init_params(&config, 31).expect("init");
    let dist = action_distribution(&params, &input).expect("dist");
    for a in dist.valid_actions() {
        let q1 = q_value(&params, &input, &a).expect("q");
        let q2 = q_value(&params, &input, &a).expect("q");
        assert!(q1.is_finite());
        assert_eq!(q1, q2);
    }
    let v1 = v_value(&params, &input).expect("v");
    let v2 = v_value(&params, &input).expect("v");
    assert!(v1.is_finite());
    assert_eq!(v1, v2);

    // Q distinguishes actions through its action encoding.
    let q_click = q_value(&params, &input, &Action::Click { elem_id: 1 }).expect("q");
    let q_finish = q_value(&params, &input, &Action::Finish).expect("q");
    assert_ne!(q_click, q_finish);
}

const SWAP_APP_A: &str = r#"{
  "format_version": 1,
  "app": "swap",
  "content_height": 1120,
  "initial": {"screen": "main", "field": ""},
  "screens": [
    {
      "name": "main",
      "when": [["eq", "screen", "main"]],
      "elements": [
        {"key": "first_box", "type": "Textbox", "text": "Alpha", "bbox": [100, 200, 400, 260]},
        {"key": "second_box", "type": "Textbox", "text": "Beta", "bbox": [100, 400, 400, 460]}
      ]
    }
  ],
  "transitions": [
    {"on": {"action": "type", "element": "first_box"}, "effects": [["set", "field", "{text}"]]}
  ]
}"#;

const SWAP_APP_B: &str = r#"{
  "format_version": 1,
  "app": "swap",
  "content_height": 1120,
  "initial": {"screen": "main", "field": ""},
  "screens": [
    {
      "name": "main",
      "when": [["eq", "screen", "main"]],
      "elements": [
        {"key": "first_box", "type": "Textbox", "text": "Beta", "bbox": [100, 200, 400, 260]},
        {"key": "second_box", "type": "Textbox", "text": "Alpha", "bbox": [100, 400, 400, 460]}
      ]
    }
  ],
  "transitions": [
    {"on": {"action": "type", "element": "first_box"}, "effects": [["set", "field", "{text}"]]}
  ]
}"#;

const SWAP_TASK: &str = r#"{
  "format_version": 1,
  "task_id": "fill_alpha",
  "app": "swap",
  "goal_template": "Put {word} into the alpha field",
  "slots": [["word", "alpha"]],
  "success": [["eq", "field", "{word}"]]
}"#;

/// Swapping two elements' on-screen order (their rendered strings trade
/// places between ranks) permutes their element probabilities. The network
/// earns this by using only segment-local positions and pooling each
/// element's own text rows.
#[test]
fn swapped_elements_swap_their_element_probabilities() {
    let (app_a, task) = fixture(SWAP_APP_A, SWAP_TASK);
    let app_b = parse_app_spec(SWAP_APP_B, "swap_b.json").expect("app");
    let vocab = Vocab::build(&[&app_a, &app_b], &[&task], MAX_ELEMENT_IDS);
    let config = PolicyConfig::desk(vocab.len());
    let params = init_params(&config, 55).expect("init");

    let encode = |app: &AppSpec| {
        let ep = Episode::new(app, &task, 12, DEFAULT_T_MAX).expect("episode");
        let (input, _) =
            encode_observation(&config, &vocab, ep.observation(), &task, &HistorySummary::new())
                .expect("encode");
        action_distribution(&params, &input).expect("dist")
    };
    let da = encode(&app_a);
    let db = encode(&app_b);

    let tol = 1e-9;
    // Alpha sits at rank 1 in screen A and rank 2 in screen B; its selection
    // probability must travel with it.
    assert!((da.click_element_probs[0] - db.click_element_probs[1]).abs() < tol);
    assert!((da.click_element_probs[1] - db.click_element_probs[0]).abs() < tol);
    assert!((da.type_element_probs[0] - db.type_element_probs[1]).abs() < tol);
    assert!((da.type_element_probs[1] - db.type_element_probs[0]).abs() < tol);
    for t in 0..N_TYPES {
        assert!((da.type_probs[t] - db.type_probs[t]).abs() < tol);
    }
    // The swap is non-trivial: the two elements score differently.
    assert!((da.click_element_probs[0] - da.click_element_probs[1]).abs() > 1e-12);
}

/// Manual timing probe for sizing training budgets; run with
/// `cargo test -p guilearn-core timing_probe -- --ignored --nocapture`.
#[test]
#[ignore]
fn timing_probe() {
    use std::time::Instant;
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let mut ep = Episode::new(&app, &task, 0, DEFAULT_T_MAX).expect("episode");
    let vocab = Vocab::build(&[&app], &[&task], MAX_ELEMENT_IDS);
    let config = PolicyConfig::desk(vocab.len());
    let params = init_params(&config, 0).expect("init");

    // A mid-episode observation with populated history, the realistic shape.
    let mut hist = HistorySummary::new();
    for a in [
        Action::Type { elem_id: 1, text: "red".into() },
        Action::Click { elem_id: 2 },
        Action::Scroll { direction: crate::env::ScrollDirection::Down, amount: 1 },
    ] {
        ep.step(&a).expect("step");
        hist = crate::perception::update_history(&hist, &a);
    }
    let (input, _) =
        encode_observation(&config, &vocab, ep.observation(), &task, &hist).expect("encode");
    println!("sequence length: {}", input.seq_len());

    let action = Action::Click { elem_id: 1 };
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = crate::autodiff::Tape::new();
        let bs = tape.bind_store(&params.pi);
        let nll = net::nll_node(&mut tape, &bs, &config, &input, &action).expect("nll");
        let grads = tape.backward(nll).expect("backward");
        assert!(grads.len() > 0);
    }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("policy forward+backward: {:.1} ms/example", per * 1e3);

    let t1 = Instant::now();
    for _ in 0..reps {
        let mut tape = crate::autodiff::Tape::new();
        let bs = tape.bind_store(&params.pi);
        let nll = net::nll_node(&mut tape, &bs, &config, &input, &action).expect("nll");
        let _ = tape.scalar(nll);
    }
    let fwd = t1.elapsed().as_secs_f64() / reps as f64;
    println!("policy forward only:     {:.1} ms/example", fwd * 1e3);
}

#[test]
fn inconsistent_spans_are_rejected() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let ep = Episode::new(&app, &task, 0, DEFAULT_T_MAX).expect("episode");
    let vocab = Vocab::build(&[&app], &[&task], MAX_ELEMENT_IDS);
    let config = PolicyConfig::desk(vocab.len());
    let obs = ep.observation();
    let u = crate::perception::extract(obs, &obs.goal_text);
    let mut tokens = crate::perception::serialize(
        &vocab,
        &u,
        &obs.goal_text,
        &HistorySummary::new(),
        config.max_seq_len,
    )
    .expect("serialize");
    tokens.element_spans.remove(&2);
    let err = encode_input(&config, &tokens, &u, &task, obs.scrollable()).unwrap_err();
    assert!(matches!(err, PolicyError::InconsistentSpans(_)));
}

#[test]
fn sequences_beyond_the_window_are_rejected() {
    let (app, task) = fixture(MIXED_SCROLL_APP, MIXED_SCROLL_TASK);
    let ep = Episode::new(&app, &task, 0, DEFAULT_T_MAX).expect("episode");
    let vocab = Vocab::build(&[&app], &[&task], MAX_ELEMENT_IDS);
    let mut config = PolicyConfig::desk(vocab.len());
    let obs = ep.observation();
    let u = crate::perception::extract(obs, &obs.goal_text);
    let tokens = crate::perception::serialize(
        &vocab,
        &u,
        &obs.goal_text,
        &HistorySummary::new(),
        config.max_seq_len,
    )
    .expect("serialize");
    config.max_seq_len = 16;
    let err = encode_input(&config, &tokens, &u, &task, obs.scrollable()).unwrap_err();
    assert!(matches!(err, PolicyError::SequenceTooLong { .. }));
}
