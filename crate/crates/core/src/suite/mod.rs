//! The built-in application suite: six small apps with twelve tasks,
//! split into a training partition and a held-out partition that no
//! training phase ever touches. Demonstrations cover only a subset of the
//! training tasks; the remaining training tasks are reachable only through
//! the on-policy collection phase, and the held-out apps only through
//! evaluation.
//!
//! The app/task sources are embedded in the library so every consumer
//! (trainer, evaluator, command-line tools, tests) sees one identical
//! suite.


use std::collections::BTreeSet;

use crate::env::{parse_app_spec, parse_task_instance, AppSpec, EnvError, TaskInstance};
use crate::perception::{Vocab, MAX_ELEMENT_IDS};

/// (file name, JSON source) for every app in the suite.
pub const APP_SOURCES: &[(&str, &str)] = &[
    ("login.json", include_str!("../../suite/apps/login.json")),
    ("settings.json", include_str!("../../suite/apps/settings.json")),
    ("mailer.json", include_str!("../../suite/apps/mailer.json")),
    ("shop.json", include_str!("../../suite/apps/shop.json")),
    ("signup.json", include_str!("../../suite/apps/signup.json")),
    ("tracker.json", include_str!("../../suite/apps/tracker.json")),
];

/// (file name, JSON source) for every task in the suite.
pub const TASK_SOURCES: &[(&str, &str)] = &[
    ("login_alice.json", include_str!("../../suite/tasks/login_alice.json")),
    ("login_bob.json", include_str!("../../suite/tasks/login_bob.json")),
    ("save_wifi.json", include_str!("../../suite/tasks/save_wifi.json")),
    ("save_dark.json", include_str!("../../suite/tasks/save_dark.json")),
    ("mail_carol.json", include_str!("../../suite/tasks/mail_carol.json")),
    ("mail_dave.json", include_str!("../../suite/tasks/mail_dave.json")),
    ("buy_lamp.json", include_str!("../../suite/tasks/buy_lamp.json")),
    ("buy_mug.json", include_str!("../../suite/tasks/buy_mug.json")),
    ("signup_erin.json", include_str!("../../suite/tasks/signup_erin.json")),
    ("signup_frank.json", include_str!("../../suite/tasks/signup_frank.json")),
    ("track_steps.json", include_str!("../../suite/tasks/track_steps.json")),
    ("track_sleep.json", include_str!("../../suite/tasks/track_sleep.json")),
];

/// Apps reserved for generalization measurement; never trained on.
pub const HELDOUT_APPS: &[&str] = &["signup", "tracker"];

/// Training tasks covered by expert demonstrations. The remaining training
/// tasks (`login_bob`, `save_dark`, `mail_dave`, `buy_mug`) are learned, if
/// at all, from the policy's own collected experience.
pub const DEMO_TASK_IDS: &[&str] = &["login_alice", "save_wifi", "mail_carol", "buy_lamp"];

/// Exhaustive-search depth sufficient for every task in the suite (the
/// longest optimal plan has five steps).
pub const SUITE_DEPTH_BOUND: usize = 8;

/// The parsed suite, partitioned for training and generalization runs.
#[derive(Debug, Clone)]
pub struct BuiltinSuite {
    /// (app, task) pairs of the training partition.
    pub train: Vec<(AppSpec, TaskInstance)>,
    /// (app, task) pairs of the held-out partition.
    pub heldout: Vec<(AppSpec, TaskInstance)>,
}

impl BuiltinSuite {
    pub fn load() -> Result<Self, EnvError> {
        let heldout_apps: BTreeSet<&str> = HELDOUT_APPS.iter().copied().collect();
        let mut apps = Vec::new();
        for (name, source) in APP_SOURCES {
            apps.push(parse_app_spec(source, name)?);
        }
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for (name, source) in TASK_SOURCES {
            let task = parse_task_instance(source, name)?;
            let app = apps
                .iter()
                .find(|a| a.app_name == task.app_name)
                .unwrap_or_else(|| panic!("task {name} names an app outside the suite"))
                .clone();
            if heldout_apps.contains(task.app_name.as_str()) {
                heldout.push((app, task));
            } else {
                train.push((app, task));
            }
        }
        Ok(Self { train, heldout })
    }

    /// Training (app, task) pairs that have expert demonstrations.
    pub fn demo_pairs(&self) -> Vec<(&AppSpec, &TaskInstance)> {
        let demoed: BTreeSet<&str> = DEMO_TASK_IDS.iter().copied().collect();
        self.train
            .iter()
            .filter(|(_, t)| demoed.contains(t.task_id.as_str()))
            .map(|(a, t)| (a, t))
            .collect()
    }

    pub fn train_apps(&self) -> BTreeSet<String> {
        self.train.iter().map(|(a, _)| a.app_name.clone()).collect()
    }

    pub fn heldout_apps(&self) -> BTreeSet<String> {
        self.heldout
            .iter()
            .map(|(a, _)| a.app_name.clone())
            .collect()
    }

    /// Token vocabulary over the whole suite, both partitions. This mirrors
    /// a deployed agent whose pretrained tokenizer covers unseen apps; the
    /// held-out partition stays unseen by every *training* phase, only its
    /// words are representable.
    pub fn vocab(&self) -> Vocab {
        let mut apps: Vec<&AppSpec> = Vec::new();
        let mut tasks: Vec<&TaskInstance> = Vec::new();
        for (a, t) in self.train.iter().chain(&self.heldout) {
            apps.push(a);
            tasks.push(t);
        }
        Vocab::build(&apps, &tasks, MAX_ELEMENT_IDS)
    }
}
