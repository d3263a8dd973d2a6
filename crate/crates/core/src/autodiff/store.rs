//! Named parameter storage, the AdamW update, and binary checkpoints.

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("parameter already exists: {0}")]
    Duplicate(String),
    #[error("no gradient supplied for parameter {0}")]
    MissingGradient(String),
    #[error("gradient shape {got:?} does not match parameter {name} shape {expected:?}")]
    GradientShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint digest mismatch: manifest says {expected}, file hashes to {got}")]
    DigestMismatch { expected: String, got: String },
    #[error("manifest missing for checkpoint {0}")]
    ManifestMissing(String),
}

/// Gradients keyed by parameter name.
#[derive(Default, Debug, Clone)]
pub struct Gradients {
    entries: BTreeMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn insert(&mut self, name: String, grad: ArrayD<f64>) {
        self.entries.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest absolute entry across all gradients.
    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; applied as `p -= lr * wd * p` before the
    /// moment update, so decay is independent of gradient scale.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone)]
struct Slot {
    value: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

/// Ordered collection of named parameters plus Adam moments and step count.
/// Iteration order is the lexicographic name order, which keeps every
/// consumer (tape binding, checkpoints, digests) deterministic.
#[derive(Default, Clone)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) -> Result<(), StoreError> {
        if self.slots.contains_key(name) {
            return Err(StoreError::Duplicate(name.to_string()));
        }
        let dim = value.raw_dim();
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                m: ArrayD::zeros(dim.clone()),
                v: ArrayD::zeros(dim),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.slots.iter().map(|(k, s)| (k, &s.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.slots.keys()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// One AdamW update over every parameter. Requires a gradient for each
    /// parameter in the store; a missing name is an error, not a skip.
    pub fn adamw_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<(), StoreError> {
        for (name, slot) in &self.slots {
            let g = grads
                .get(name)
                .ok_or_else(|| StoreError::MissingGradient(name.clone()))?;
            if g.shape() != slot.value.shape() {
                return Err(StoreError::GradientShape {
                    name: name.clone(),
                    expected: slot.value.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, slot) in self.slots.iter_mut() {
            let g = grads.get(name).unwrap();
            if cfg.weight_decay != 0.0 {
                slot.value.mapv_inplace(|p| p - cfg.lr * cfg.weight_decay * p);
            }
            ndarray::Zip::from(&mut slot.m)
                .and(g)
                .for_each(|m, &gv| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv);
            ndarray::Zip::from(&mut slot.v)
                .and(g)
                .for_each(|v, &gv| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv);
            ndarray::Zip::from(&mut slot.value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                });
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 4] = b"GLN1";

fn write_array(buf: &mut Vec<u8>, a: &ArrayD<f64>) {
    buf.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_array(cur: &mut &[u8]) -> Result<ArrayD<f64>, StoreError> {
    let ndim = read_u32(cur)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u64(cur)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_le_bytes(read_bytes::<8>(cur)?));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| StoreError::Format(format!("array shape: {e}")))
}

fn read_bytes<const N: usize>(cur: &mut &[u8]) -> Result<[u8; N], StoreError> {
    if cur.len() < N {
        return Err(StoreError::Format("unexpected end of checkpoint".into()));
    }
    let mut out = [0u8; N];
    out.copy_from_slice(&cur[..N]);
    *cur = &cur[N..];
    Ok(out)
}

fn read_u32(cur: &mut &[u8]) -> Result<u32, StoreError> {
    Ok(u32::from_le_bytes(read_bytes::<4>(cur)?))
}

fn read_u64(cur: &mut &[u8]) -> Result<u64, StoreError> {
    Ok(u64::from_le_bytes(read_bytes::<8>(cur)?))
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn read_str(cur: &mut &[u8]) -> Result<String, StoreError> {
    let len = read_u32(cur)? as usize;
    if cur.len() < len {
        return Err(StoreError::Format("unexpected end of checkpoint".into()));
    }
    let s = std::str::from_utf8(&cur[..len])
        .map_err(|e| StoreError::Format(format!("utf8: {e}")))?
        .to_string();
    *cur = &cur[len..];
    Ok(s)
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    std::path::PathBuf::from(p)
}

/// Serializes named parameter groups (values plus optimizer moments) to a
/// binary file, and writes a `<path>.manifest` sidecar that lists every
/// tensor with its shape and pins the file's SHA-256 digest.
pub fn save_checkpoint(
    path: &Path,
    groups: &[(&str, &ParameterStore)],
) -> Result<(), StoreError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (gname, store) in groups {
        write_str(&mut buf, gname);
        buf.extend_from_slice(&store.step.to_le_bytes());
        buf.extend_from_slice(&(store.slots.len() as u32).to_le_bytes());
        for (pname, slot) in &store.slots {
            write_str(&mut buf, pname);
            write_array(&mut buf, &slot.value);
            write_array(&mut buf, &slot.m);
            write_array(&mut buf, &slot.v);
        }
    }
    let digest = sha256_hex(&buf);
    std::fs::File::create(path)?.write_all(&buf)?;

    let mut manifest = String::new();
    manifest.push_str(&format!("sha256 {digest}\n"));
    for (gname, store) in groups {
        manifest.push_str(&format!("group {gname} step={}\n", store.step));
        for (pname, slot) in &store.slots {
            manifest.push_str(&format!(
                "tensor {gname}.{pname} shape={:?}\n",
                slot.value.shape()
            ));
        }
    }
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`]. Verifies the file's
/// SHA-256 digest against the manifest sidecar and refuses to load on any
/// mismatch or if the manifest is absent.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, ParameterStore)>, StoreError> {
    let mpath = manifest_path(path);
    let manifest = std::fs::read_to_string(&mpath)
        .map_err(|_| StoreError::ManifestMissing(mpath.display().to_string()))?;
    let expected = manifest
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("sha256 "))
        .ok_or_else(|| StoreError::Format("manifest missing sha256 header".into()))?
        .trim()
        .to_string();

    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let got = sha256_hex(&buf);
    if got != expected {
        return Err(StoreError::DigestMismatch { expected, got });
    }

    let mut cur = buf.as_slice();
    let magic = read_bytes::<4>(&mut cur)?;
    if &magic != CKPT_MAGIC {
        return Err(StoreError::Format("bad magic".into()));
    }
    let ngroups = read_u32(&mut cur)? as usize;
    let mut out = Vec::with_capacity(ngroups);
    for _ in 0..ngroups {
        let gname = read_str(&mut cur)?;
        let step = read_u64(&mut cur)?;
        let nparams = read_u32(&mut cur)? as usize;
        let mut store = ParameterStore::new();
        store.step = step;
        for _ in 0..nparams {
            let pname = read_str(&mut cur)?;
            let value = read_array(&mut cur)?;
            let m = read_array(&mut cur)?;
            let v = read_array(&mut cur)?;
            if store.slots.contains_key(&pname) {
                return Err(StoreError::Duplicate(pname));
            }
            store.slots.insert(pname, Slot { value, m, v });
        }
        out.push((gname, store));
    }
    if !cur.is_empty() {
        return Err(StoreError::Format("trailing bytes in checkpoint".into()));
    }
    Ok(out)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
