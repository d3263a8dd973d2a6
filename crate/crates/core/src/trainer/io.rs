//! Dataset and checkpoint file formats.
//!
//! A dataset is a JSONL file: one header line, then one line per
//! transition carrying provenance, the action, the labeled reward and a
//! digest of the observation. The observations themselves live in a
//! `<file>.obs` sidecar keyed by digest (deduplicated), so the main file
//! stays scannable while episodes remain fully reconstructible.
//!
//! A policy checkpoint is the binary parameter file (with its digest
//! manifest) plus a `<file>.config.json` sidecar carrying the network
//! configuration needed to rebuild the model.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, sha256_hex, ParameterStore};
use crate::env::{Action, AppSpec, Observation, TaskInstance, Trajectory};
use crate::policy::{PolicyConfig, PolicyParams};

use super::{Dataset, DatasetKind, EncodeContext, TrainError, TrainResult};

const DATASET_FORMAT: &str = "gui-learner-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    kind: DatasetKind,
    records: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    episode_id: String,
    t: usize,
    app: String,
    task_id: String,
    seed: u64,
    serialized_obs_digest: String,
    action: Action,
    reward: f64,
    terminal: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObsLine {
    digest: String,
    observation: Observation,
}

fn obs_sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".obs");
    PathBuf::from(p)
}

fn config_sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".config.json");
    PathBuf::from(p)
}

/// Canonical digest of one observation (SHA-256 of its JSON form).
pub(crate) fn obs_digest(obs: &Observation) -> TrainResult<String> {
    Ok(sha256_hex(serde_json::to_string(obs)?.as_bytes()))
}

/// Writes `data` as a JSONL file plus the observation sidecar.
pub fn save_dataset(data: &Dataset, path: &Path) -> TrainResult<()> {
    let mut out = String::new();
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        kind: data.kind,
        records: data.len(),
    };
    out.push_str(&serde_json::to_string(&header)?);
    out.push('\n');

    let mut archive: BTreeMap<String, &Observation> = BTreeMap::new();
    for rec in &data.records {
        let digest = obs_digest(&rec.obs)?;
        archive.entry(digest.clone()).or_insert(&rec.obs);
        let line = RecordLine {
            episode_id: rec.provenance.episode_id.clone(),
            t: rec.t,
            app: rec.provenance.app.clone(),
            task_id: rec.provenance.task_id.clone(),
            seed: rec.provenance.seed,
            serialized_obs_digest: digest,
            action: rec.action.clone(),
            reward: rec.reward,
            terminal: rec.terminal,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;

    let mut side = String::new();
    for (digest, obs) in archive {
        let line = ObsLine {
            digest,
            observation: (*obs).clone(),
        };
        side.push_str(&serde_json::to_string(&line)?);
        side.push('\n');
    }
    std::fs::write(obs_sidecar(path), side)?;
    Ok(())
}

/// Reads a dataset back, reconstructing full training records.
///
/// Observations come from the sidecar (verified against their digests);
/// structured/serialized forms are recomputed, which is deterministic for a
/// fixed vocabulary; successor observations are stitched from the next
/// record of the same episode. `suite` resolves task ids to task
/// definitions.
pub fn load_dataset(
    path: &Path,
    suite: &[(AppSpec, TaskInstance)],
    ctx: &EncodeContext,
) -> TrainResult<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: DatasetHeader = match lines.next() {
        Some(first) => serde_json::from_str(first)
            .map_err(|e| TrainError::Format(format!("bad dataset header: {e}")))?,
        None => return Err(TrainError::Format("dataset file is empty".into())),
    };
    if header.format != DATASET_FORMAT {
        return Err(TrainError::Format(format!(
            "unexpected dataset format '{}'",
            header.format
        )));
    }
    if header.version != DATASET_VERSION {
        return Err(TrainError::Format(format!(
            "unsupported dataset version {}",
            header.version
        )));
    }

    let mut records = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(line)
            .map_err(|e| TrainError::Format(format!("record line {}: {e}", no + 2)))?;
        records.push(rec);
    }
    if records.len() != header.records {
        return Err(TrainError::Format(format!(
            "header promises {} records, file has {}",
            header.records,
            records.len()
        )));
    }

    let side_text = std::fs::read_to_string(obs_sidecar(path))?;
    let mut archive: BTreeMap<String, Observation> = BTreeMap::new();
    for (no, line) in side_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ObsLine = serde_json::from_str(line)
            .map_err(|e| TrainError::Format(format!("observation archive line {}: {e}", no + 1)))?;
        let recomputed = obs_digest(&entry.observation)?;
        if recomputed != entry.digest {
            return Err(TrainError::Format(format!(
                "observation archive corrupted: digest {} does not match its content",
                entry.digest
            )));
        }
        archive.insert(entry.digest, entry.observation);
    }

    let tasks: BTreeMap<&str, &TaskInstance> = suite
        .iter()
        .map(|(_, task)| (task.task_id.as_str(), task))
        .collect();

    // Group by episode in first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<RecordLine>> = BTreeMap::new();
    for rec in records {
        if !groups.contains_key(&rec.episode_id) {
            order.push(rec.episode_id.clone());
        }
        groups.entry(rec.episode_id.clone()).or_default().push(rec);
    }

    let mut out = Vec::new();
    for episode_id in order {
        let mut lines = groups.remove(&episode_id).expect("grouped");
        lines.sort_by_key(|r| r.t);
        let last = lines.len() - 1;
        let mut steps = Vec::with_capacity(lines.len());
        let first = &lines[0];
        let task = *tasks.get(first.task_id.as_str()).ok_or_else(|| {
            TrainError::Format(format!(
                "episode {episode_id} references unknown task '{}'",
                first.task_id
            ))
        })?;
        if task.app_name != first.app {
            return Err(TrainError::Format(format!(
                "episode {episode_id} claims app '{}' but task '{}' belongs to '{}'",
                first.app, first.task_id, task.app_name
            )));
        }
        for (i, rec) in lines.iter().enumerate() {
            if rec.t != i {
                return Err(TrainError::Format(format!(
                    "episode {episode_id} has a gap: expected t={i}, found t={}",
                    rec.t
                )));
            }
            if rec.terminal != (i == last) {
                return Err(TrainError::Format(format!(
                    "episode {episode_id} marks t={} terminal={}, but only the last step may be terminal",
                    rec.t, rec.terminal
                )));
            }
            if rec.task_id != first.task_id || rec.app != first.app || rec.seed != first.seed {
                return Err(TrainError::Format(format!(
                    "episode {episode_id} mixes records from different episodes at t={}",
                    rec.t
                )));
            }
            let obs = archive.get(&rec.serialized_obs_digest).ok_or_else(|| {
                TrainError::Format(format!(
                    "episode {episode_id} t={} references missing observation {}",
                    rec.t, rec.serialized_obs_digest
                ))
            })?;
            steps.push((obs.clone(), rec.action.clone()));
        }
        // Rebuild the full records through the same path used at capture
        // time, then overwrite the rewards with the stored labels.
        let traj = Trajectory {
            steps,
            success: false, // not recorded in the file; rewards are
            task: task.clone(),
            seed: first.seed,
        };
        let mut rebuilt = super::episode_transitions_for_load(ctx, &traj, &episode_id)?;
        for (rec, line) in rebuilt.iter_mut().zip(&lines) {
            rec.reward = line.reward;
        }
        out.extend(rebuilt);
    }

    Ok(Dataset {
        kind: header.kind,
        records: out,
    })
}

/// Saves all three parameter groups plus the network-config sidecar.
/// Returns the SHA-256 of the written parameter file.
pub fn save_policy(path: &Path, params: &PolicyParams) -> TrainResult<String> {
    save_checkpoint(
        path,
        &[
            ("pi", &params.pi),
            ("q", &params.q),
            ("v", &params.v),
        ],
    )?;
    std::fs::write(
        config_sidecar(path),
        serde_json::to_string_pretty(&params.config)?,
    )?;
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint written by [`save_policy`]. The parameter file's
/// digest is verified against its manifest; a tampered file refuses to
/// load.
pub fn load_policy(path: &Path) -> TrainResult<PolicyParams> {
    let groups = load_checkpoint(path)?;
    let config: PolicyConfig =
        serde_json::from_str(&std::fs::read_to_string(config_sidecar(path))?)?;
    config.validate()?;
    let mut pi: Option<ParameterStore> = None;
    let mut q: Option<ParameterStore> = None;
    let mut v: Option<ParameterStore> = None;
    for (name, store) in groups {
        match name.as_str() {
            "pi" => pi = Some(store),
            "q" => q = Some(store),
            "v" => v = Some(store),
            other => {
                return Err(TrainError::Format(format!(
                    "unexpected parameter group '{other}' in checkpoint"
                )))
            }
        }
    }
    let missing = |g: &'static str| TrainError::Format(format!("checkpoint lacks group '{g}'"));
    Ok(PolicyParams {
        pi: pi.ok_or_else(|| missing("pi"))?,
        q: q.ok_or_else(|| missing("q"))?,
        v: v.ok_or_else(|| missing("v"))?,
        config,
    })
}
