//! Run configuration: a TOML file with optional sections, overridden by
//! command-line flags, with `GUILEARN_RUN_DIR` taking final precedence for
//! the output directory.
//!
//! Schema (all fields optional):
//!
//! ```toml
//! preset = "desk"            # desk | paper
//! seed = 1
//! out_dir = "runs/exp1"      # overridden by GUILEARN_RUN_DIR
//! demos = "demos.jsonl"      # expert dataset for the cloning phase
//! parallelism = 1            # only 1 is supported (bit-reproducibility)
//!
//! [suite]                    # omit to use the built-in suite
//! apps_dir = "apps"          # directory of app-spec JSON files
//! tasks_dir = "tasks"        # directory of task JSON files
//! heldout_apps = ["beta"]    # app names reserved for generalization
//!
//! [train]                    # overrides applied on top of the preset
//! gamma = 0.99
//! beta = 1.0
//! tau_exp = 0.7
//! lr = 0.003
//! batch_size = 8
//! bc_epochs = 60
//! rl_episodes = 200
//! grad_steps = 350
//! t_max = 30
//! temperature = 1.0
//! epsilon = 0.2
//! polyak = 0.01
//! weight_clip = 100.0
//! ```

use std::path::{Path, PathBuf};

use guilearn_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    preset: Option<String>,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    demos: Option<PathBuf>,
    parallelism: Option<usize>,
    suite: Option<SuiteSection>,
    train: Option<TrainSection>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub apps_dir: PathBuf,
    pub tasks_dir: PathBuf,
    pub heldout_apps: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    gamma: Option<f64>,
    beta: Option<f64>,
    tau_exp: Option<f64>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    bc_epochs: Option<usize>,
    rl_episodes: Option<usize>,
    grad_steps: Option<usize>,
    t_max: Option<usize>,
    temperature: Option<f64>,
    epsilon: Option<f64>,
    polyak: Option<f64>,
    weight_clip: Option<f64>,
}

impl TrainSection {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        take!(
            gamma, beta, tau_exp, lr, batch_size, bc_epochs, rl_episodes, grad_steps, t_max,
            temperature, epsilon, polyak, weight_clip
        );
    }
}

/// The fully resolved configuration every command echoes into its outputs:
/// no silent defaults.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub preset: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub demos: Option<PathBuf>,
    pub parallelism: usize,
    /// `None` selects the built-in suite.
    pub suite: Option<SuiteSection>,
    pub train: TrainConfig,
}

/// Flag-level overrides shared by the commands that take a config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub demos: Option<PathBuf>,
    /// `key=value` pairs targeting TrainConfig fields.
    pub set: Vec<String>,
}

fn set_train_field(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), CliError> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
        value.parse().map_err(|_| {
            CliError::Validation(format!("invalid value '{value}' for train field '{key}'"))
        })
    }
    match key {
        "gamma" => cfg.gamma = parse(key, value)?,
        "beta" => cfg.beta = parse(key, value)?,
        "tau_exp" => cfg.tau_exp = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "bc_epochs" => cfg.bc_epochs = parse(key, value)?,
        "rl_episodes" => cfg.rl_episodes = parse(key, value)?,
        "grad_steps" => cfg.grad_steps = parse(key, value)?,
        "t_max" => cfg.t_max = parse(key, value)?,
        "temperature" => cfg.temperature = parse(key, value)?,
        "epsilon" => cfg.epsilon = parse(key, value)?,
        "polyak" => cfg.polyak = parse(key, value)?,
        "weight_clip" => cfg.weight_clip = parse(key, value)?,
        other => {
            return Err(CliError::Validation(format!(
                "unknown train field '{other}' (valid: gamma, beta, tau_exp, lr, batch_size, \
                 bc_epochs, rl_episodes, grad_steps, t_max, temperature, epsilon, polyak, \
                 weight_clip)"
            )))
        }
    }
    Ok(())
}

/// Loads the optional file, layers flag overrides on top, applies the
/// `GUILEARN_RUN_DIR` environment override, and validates the result.
pub fn resolve(config_path: Option<&Path>, flags: &Overrides) -> Result<ResolvedConfig, CliError> {
    let file: FileConfig = match config_path {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", p.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?
        }
    };

    let preset = flags
        .preset
        .clone()
        .or(file.preset)
        .unwrap_or_else(|| "desk".to_string());
    let mut train = TrainConfig::preset(&preset)
        .map_err(|e| CliError::Validation(format!("unknown preset '{preset}': {e}")))?;
    if let Some(section) = &file.train {
        section.apply(&mut train);
    }
    for pair in &flags.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("--set expects key=value, got '{pair}'"))
        })?;
        set_train_field(&mut train, key.trim(), value.trim())?;
    }
    train
        .validate()
        .map_err(|e| CliError::Validation(format!("train config: {e}")))?;

    let parallelism = file.parallelism.unwrap_or(1);
    if parallelism != 1 {
        return Err(CliError::Validation(format!(
            "parallelism {parallelism} is not supported: only 1 preserves bit-reproducible runs"
        )));
    }

    let out_dir = match std::env::var_os("GUILEARN_RUN_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => flags
            .out_dir
            .clone()
            .or(file.out_dir)
            .unwrap_or_else(|| PathBuf::from("guilearn-run")),
    };

    Ok(ResolvedConfig {
        preset,
        seed: flags.seed.or(file.seed).unwrap_or(0),
        out_dir,
        demos: flags.demos.clone().or(file.demos),
        parallelism,
        suite: file.suite,
        train,
    })
}
