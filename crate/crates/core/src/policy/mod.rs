//! The decision network: an attention trunk over the serialized observation
//! producing a factorized, validity-masked distribution over the compositional
//! action space, plus separately-parameterized Q and V value heads.

pub(crate) mod net;
#[cfg(test)]
mod tests;

use crate::autodiff::{AdError, ParameterStore, Tape};
use crate::env::{Action, ScrollDirection, TaskInstance};
use crate::perception::{StructuredUI, TokenSequence, D_F};
use crate::rng::stream_rng;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("element spans disagree with the structured UI: {0}")]
    InconsistentSpans(String),
    #[error("sequence of {got} tokens exceeds the configured maximum {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("token id {0} is outside the configured vocabulary")]
    TokenOutOfVocab(u32),
    #[error("task has {got} slots but the network supports at most {max}")]
    TooManySlots { got: usize, max: usize },
    #[error("action {0} is masked out under the current observation")]
    MaskedAction(String),
    #[error("TYPE text {0:?} matches no task slot value")]
    UnknownSlotValue(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("feature vectors have width {got}, expected {want}")]
    FeatureWidth { got: usize, want: usize },
    #[error(transparent)]
    Perception(#[from] crate::perception::PerceptionError),
}

/// Canonical action-type indices used across all heads.
pub const T_CLICK: usize = 0;
pub const T_TYPE: usize = 1;
pub const T_SCROLL: usize = 2;
pub const T_FINISH: usize = 3;
pub const N_TYPES: usize = 4;
/// Scroll head order: (Down,1..3) then (Up,1..3).
pub const N_SCROLL: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PolicyConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub max_seq_len: usize,
    pub d_f: usize,
    pub k_hist: usize,
    pub vocab_size: usize,
    /// Capacity of the element-id token block; element ids run 1..=this.
    pub max_element_ids: usize,
    /// Capacity of the slot head (tasks may declare at most this many slots).
    pub max_slots: usize,
    /// Size of the segment-local positional table; offsets clamp here.
    pub max_local_pos: usize,
    /// Feed-forward width multiplier.
    pub ffn_mult: usize,
}

impl PolicyConfig {
    /// Small preset sized for CPU experiments.
    pub fn desk(vocab_size: usize) -> Self {
        PolicyConfig {
            layers: 2,
            heads: 4,
            hidden_dim: 64,
            max_seq_len: 512,
            d_f: D_F,
            k_hist: crate::perception::K_HIST,
            vocab_size,
            max_element_ids: crate::perception::MAX_ELEMENT_IDS,
            max_slots: 8,
            max_local_pos: 64,
            ffn_mult: 2,
        }
    }

    /// Full-scale preset matching the published architecture.
    pub fn paper(vocab_size: usize) -> Self {
        PolicyConfig {
            layers: 6,
            heads: 8,
            hidden_dim: 768,
            max_seq_len: 1024,
            ..Self::desk(vocab_size)
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self, PolicyError> {
        match name {
            "desk" => Ok(Self::desk(vocab_size)),
            "paper" => Ok(Self::paper(vocab_size)),
            other => Err(PolicyError::InvalidConfig(format!(
                "unknown preset '{other}' (expected 'desk' or 'paper')"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.hidden_dim == 0 || self.heads == 0 || self.layers == 0 {
            return Err(PolicyError::InvalidConfig(
                "layers, heads and hidden_dim must be positive".into(),
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(PolicyError::InvalidConfig(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.vocab_size < crate::perception::vocab::ELEM as usize + 1 {
            return Err(PolicyError::InvalidConfig(format!(
                "vocab_size {} smaller than the reserved token block",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 16
            || self.d_f == 0
            || self.max_slots == 0
            || self.max_local_pos < 8
            || self.ffn_mult == 0
            || self.max_element_ids == 0
        {
            return Err(PolicyError::InvalidConfig(
                "sequence, feature, slot and positional capacities must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parameters for the three networks. The policy, Q and V trunks share an
/// architecture but never share weights.
#[derive(Clone)]
pub struct PolicyParams {
    pub pi: ParameterStore,
    pub q: ParameterStore,
    pub v: ParameterStore,
    pub config: PolicyConfig,
}

impl PolicyParams {
    pub fn num_scalars(&self) -> usize {
        self.pi.num_scalars() + self.q.num_scalars() + self.v.num_scalars()
    }
}

/// Seeded scaled-uniform initialization of all three parameter groups.
pub fn init_params(config: &PolicyConfig, seed: u64) -> Result<PolicyParams, PolicyError> {
    config.validate()?;
    Ok(PolicyParams {
        pi: net::init_group(config, seed, "pi")?,
        q: net::init_group(config, seed, "q")?,
        v: net::init_group(config, seed, "v")?,
        config: config.clone(),
    })
}

/// One on-screen element as the network sees it: where its text tokens live
/// in the sequence and whether it accepts typed input.
#[derive(Debug, Clone)]
pub(crate) struct ElemInfo {
    pub elem_id: usize,
    pub text_rows: (usize, usize),
    pub textbox: bool,
}

/// A serialized observation prepared for the network: token ids, segment-local
/// positions, the per-row feature injection matrix, and action-space metadata.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    pub(crate) token_ids: Vec<usize>,
    pub(crate) local_pos: Vec<usize>,
    pub(crate) feature_matrix: Array2<f64>,
    /// Elements represented in the sequence, ascending by id.
    pub(crate) elements: Vec<ElemInfo>,
    /// Total elements on screen (present or truncated away).
    pub(crate) n_elements: usize,
    pub(crate) slot_values: Vec<String>,
    pub(crate) scrollable: bool,
}

impl EncodedInput {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Which action types are selectable: [CLICK, TYPE, SCROLL, FINISH].
    pub fn type_mask(&self) -> [bool; N_TYPES] {
        let click = !self.elements.is_empty();
        let typ = self.elements.iter().any(|e| e.textbox) && !self.slot_values.is_empty();
        [click, typ, self.scrollable, true]
    }

}

/// Validates a (tokens, UI, task) triple against the config and packs it for
/// the network. `scrollable` states whether the app content extends past the
/// viewport (the UI alone cannot witness that).
pub fn encode_input(
    config: &PolicyConfig,
    tokens: &TokenSequence,
    u: &StructuredUI,
    task: &TaskInstance,
    scrollable: bool,
) -> Result<EncodedInput, PolicyError> {
    let len = tokens.token_ids.len();
    if len == 0 {
        return Err(PolicyError::InconsistentSpans("empty token sequence".into()));
    }
    if len > config.max_seq_len {
        return Err(PolicyError::SequenceTooLong {
            got: len,
            max: config.max_seq_len,
        });
    }
    if u.features.len() != u.elements.len() {
        return Err(PolicyError::InconsistentSpans(format!(
            "{} feature rows for {} elements",
            u.features.len(),
            u.elements.len()
        )));
    }
    if D_F != config.d_f {
        return Err(PolicyError::FeatureWidth {
            got: D_F,
            want: config.d_f,
        });
    }
    let n = u.elements.len();
    for (k, e) in u.elements.iter().enumerate() {
        if e.elem_id != k + 1 {
            return Err(PolicyError::InconsistentSpans(format!(
                "element at index {k} carries id {}",
                e.elem_id
            )));
        }
    }
    if n > config.max_element_ids {
        return Err(PolicyError::InconsistentSpans(format!(
            "{n} elements exceed the id capacity {}",
            config.max_element_ids
        )));
    }
    if task.slots.len() > config.max_slots {
        return Err(PolicyError::TooManySlots {
            got: task.slots.len(),
            max: config.max_slots,
        });
    }

    let mut token_ids = Vec::with_capacity(len);
    for &t in &tokens.token_ids {
        if t as usize >= config.vocab_size {
            return Err(PolicyError::TokenOutOfVocab(t));
        }
        token_ids.push(t as usize);
    }
    let local_pos = local_positions(&token_ids, config.max_local_pos);

    // Every on-screen element must be accounted for: either its segment is in
    // the sequence or it was explicitly dropped by the length cap.
    let mut elements = Vec::new();
    let mut feature_matrix = Array2::zeros((len, config.d_f));
    for e in &u.elements {
        let id = e.elem_id;
        match tokens.element_spans.get(&id) {
            Some(&(a, b)) => {
                if a >= b || b > len {
                    return Err(PolicyError::InconsistentSpans(format!(
                        "segment span [{a}, {b}) for element {id} is out of bounds"
                    )));
                }
                let &(ta, tb) = tokens.text_spans.get(&id).ok_or_else(|| {
                    PolicyError::InconsistentSpans(format!("element {id} has no text span"))
                })?;
                if ta < a || tb > b || ta >= tb {
                    return Err(PolicyError::InconsistentSpans(format!(
                        "text span [{ta}, {tb}) for element {id} escapes its segment [{a}, {b})"
                    )));
                }
                let feat = &u.features[id - 1];
                for row in ta..tb {
                    for (j, &f) in feat.iter().enumerate() {
                        feature_matrix[[row, j]] = f;
                    }
                }
                elements.push(ElemInfo {
                    elem_id: id,
                    text_rows: (ta, tb),
                    textbox: e.elem_type == crate::env::ElemType::Textbox,
                });
            }
            None => {
                if !tokens.truncated_elems.contains(&id) {
                    return Err(PolicyError::InconsistentSpans(format!(
                        "element {id} is neither serialized nor marked truncated"
                    )));
                }
            }
        }
    }
    for &id in tokens.element_spans.keys() {
        if id == 0 || id > n {
            return Err(PolicyError::InconsistentSpans(format!(
                "span for element {id} has no matching UI element"
            )));
        }
    }

    Ok(EncodedInput {
        token_ids,
        local_pos,
        feature_matrix,
        elements,
        n_elements: n,
        slot_values: task.slot_values().into_iter().map(String::from).collect(),
        scrollable,
    })
}

/// Full perception-to-network pipeline for one observation: structure the
/// visible elements, serialize with the history, and pack for the network.
pub fn encode_observation(
    config: &PolicyConfig,
    vocab: &crate::perception::Vocab,
    obs: &crate::env::Observation,
    task: &TaskInstance,
    hist: &crate::perception::HistorySummary,
) -> Result<(EncodedInput, StructuredUI), PolicyError> {
    let u = crate::perception::extract(obs, &obs.goal_text);
    let tokens =
        crate::perception::serialize(vocab, &u, &obs.goal_text, hist, config.max_seq_len)?;
    let input = encode_input(config, &tokens, &u, task, obs.scrollable())?;
    Ok((input, u))
}

/// Segment-local positions: a structural marker token restarts the counter at
/// 0 and every following token increments it, clamped to the table size.
/// Keeping positions local to their segment (instead of global) is what makes
/// the network indifferent to the order element segments appear in.
fn local_positions(token_ids: &[usize], max_local_pos: usize) -> Vec<usize> {
    use crate::perception::vocab::{ELEM, GOAL, HIST, SEP};
    let structural = [GOAL as usize, HIST as usize, SEP as usize, ELEM as usize];
    let mut out = Vec::with_capacity(token_ids.len());
    let mut counter = 0usize;
    for &t in token_ids {
        if structural.contains(&t) {
            counter = 0;
        }
        out.push(counter.min(max_local_pos - 1));
        counter += 1;
    }
    out
}

/// The factorized action distribution after masking. Component vectors are
/// indexed by element id minus one; masked entries hold probability exactly 0.
#[derive(Debug, Clone)]
pub struct ActionDistribution {
    /// [CLICK, TYPE, SCROLL, FINISH].
    pub type_probs: [f64; N_TYPES],
    pub type_mask: [bool; N_TYPES],
    /// Element choice given CLICK; length = number of on-screen elements.
    pub click_element_probs: Vec<f64>,
    pub click_element_mask: Vec<bool>,
    /// Element choice given TYPE (textboxes only).
    pub type_element_probs: Vec<f64>,
    pub type_element_mask: Vec<bool>,
    /// Slot choice given TYPE, parallel to `slot_values`.
    pub slot_probs: Vec<f64>,
    pub slot_values: Vec<String>,
    /// (Down,1),(Down,2),(Down,3),(Up,1),(Up,2),(Up,3).
    pub scroll_probs: [f64; N_SCROLL],
}

pub(crate) fn scroll_index(direction: ScrollDirection, amount: u32) -> Option<usize> {
    if !(1..=3).contains(&amount) {
        return None;
    }
    let base = match direction {
        ScrollDirection::Down => 0,
        ScrollDirection::Up => 3,
    };
    Some(base + (amount as usize - 1))
}

pub(crate) fn scroll_action(index: usize) -> Action {
    let direction = if index < 3 {
        ScrollDirection::Down
    } else {
        ScrollDirection::Up
    };
    Action::Scroll {
        direction,
        amount: (index % 3) as u32 + 1,
    }
}

impl ActionDistribution {
    /// All currently-valid actions in canonical order (CLICK by element id,
    /// TYPE by element id then slot, SCROLL down then up by amount, FINISH).
    pub fn valid_actions(&self) -> Vec<Action> {
        let mut out = Vec::new();
        if self.type_mask[T_CLICK] {
            for (i, &ok) in self.click_element_mask.iter().enumerate() {
                if ok {
                    out.push(Action::Click { elem_id: i + 1 });
                }
            }
        }
        if self.type_mask[T_TYPE] {
            for (i, &ok) in self.type_element_mask.iter().enumerate() {
                if !ok {
                    continue;
                }
                for value in &self.slot_values {
                    out.push(Action::Type {
                        elem_id: i + 1,
                        text: value.clone(),
                    });
                }
            }
        }
        if self.type_mask[T_SCROLL] {
            for idx in 0..N_SCROLL {
                out.push(scroll_action(idx));
            }
        }
        out.push(Action::Finish);
        out
    }

    fn slot_probability(&self, text: &str) -> Result<f64, PolicyError> {
        let mut p = 0.0;
        let mut found = false;
        for (value, prob) in self.slot_values.iter().zip(&self.slot_probs) {
            if value == text {
                p += prob;
                found = true;
            }
        }
        if !found {
            return Err(PolicyError::UnknownSlotValue(text.to_string()));
        }
        Ok(p)
    }
}

/// Log-probability of `a` under the factorized distribution: the sum of the
/// chosen component log-probabilities. A masked action is an error — it
/// signals a dataset recorded under a different observation.
pub fn action_log_prob(dist: &ActionDistribution, a: &Action) -> Result<f64, PolicyError> {
    let masked = || PolicyError::MaskedAction(a.render());
    match a {
        Action::Click { elem_id } => {
            if !dist.type_mask[T_CLICK] {
                return Err(masked());
            }
            let i = elem_id.checked_sub(1).ok_or_else(masked)?;
            if i >= dist.click_element_probs.len() || !dist.click_element_mask[i] {
                return Err(masked());
            }
            Ok(dist.type_probs[T_CLICK].ln() + dist.click_element_probs[i].ln())
        }
        Action::Type { elem_id, text } => {
            if !dist.type_mask[T_TYPE] {
                return Err(masked());
            }
            let i = elem_id.checked_sub(1).ok_or_else(masked)?;
            if i >= dist.type_element_probs.len() || !dist.type_element_mask[i] {
                return Err(masked());
            }
            let slot_p = dist.slot_probability(text)?;
            Ok(dist.type_probs[T_TYPE].ln() + dist.type_element_probs[i].ln() + slot_p.ln())
        }
        Action::Scroll { direction, amount } => {
            if !dist.type_mask[T_SCROLL] {
                return Err(masked());
            }
            let idx = scroll_index(*direction, *amount).ok_or_else(masked)?;
            Ok(dist.type_probs[T_SCROLL].ln() + dist.scroll_probs[idx].ln())
        }
        Action::Finish => Ok(dist.type_probs[T_FINISH].ln()),
    }
}

fn temperature_scaled(probs: &[f64], temperature: f64) -> Vec<f64> {
    let inv = 1.0 / temperature;
    let scaled: Vec<f64> = probs
        .iter()
        .map(|&p| if p > 0.0 { p.powf(inv) } else { 0.0 })
        .collect();
    let z: f64 = scaled.iter().sum();
    if z > 0.0 && z.is_finite() {
        scaled.iter().map(|&w| w / z).collect()
    } else {
        // Degenerate scaling (deep underflow): collapse on the argmax.
        let best = argmax(probs);
        let mut out = vec![0.0; probs.len()];
        out[best] = 1.0;
        out
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if r < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Epsilon-mixed, temperature-scaled factorized sampling. Deterministic in
/// `rng_seed`; masked actions carry zero probability and are never produced.
pub fn sample_action(
    dist: &ActionDistribution,
    rng_seed: u64,
    temperature: f64,
    epsilon: f64,
) -> Result<Action, PolicyError> {
    if temperature <= 0.0 {
        return Err(PolicyError::InvalidTemperature(temperature));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(PolicyError::InvalidConfig(format!(
            "epsilon must be in [0, 1], got {epsilon}"
        )));
    }
    let mut rng = stream_rng(rng_seed, "sample-action", 0);
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        let valid = dist.valid_actions();
        let i = rng.gen_range(0..valid.len());
        return Ok(valid[i].clone());
    }
    let type_probs = temperature_scaled(&dist.type_probs, temperature);
    let t = sample_index(&mut rng, &type_probs);
    Ok(match t {
        T_CLICK => {
            let p = temperature_scaled(&dist.click_element_probs, temperature);
            Action::Click {
                elem_id: sample_index(&mut rng, &p) + 1,
            }
        }
        T_TYPE => {
            let pe = temperature_scaled(&dist.type_element_probs, temperature);
            let elem_id = sample_index(&mut rng, &pe) + 1;
            let ps = temperature_scaled(&dist.slot_probs, temperature);
            let s = sample_index(&mut rng, &ps);
            Action::Type {
                elem_id,
                text: dist.slot_values[s].clone(),
            }
        }
        T_SCROLL => {
            let p = temperature_scaled(&dist.scroll_probs, temperature);
            scroll_action(sample_index(&mut rng, &p))
        }
        _ => Action::Finish,
    })
}

/// The zero-temperature limit of [`sample_action`]: component-wise argmax.
pub fn greedy_action(dist: &ActionDistribution) -> Action {
    match argmax(&dist.type_probs) {
        T_CLICK => Action::Click {
            elem_id: argmax(&dist.click_element_probs) + 1,
        },
        T_TYPE => {
            let elem_id = argmax(&dist.type_element_probs) + 1;
            let s = argmax(&dist.slot_probs);
            Action::Type {
                elem_id,
                text: dist.slot_values[s].clone(),
            }
        }
        T_SCROLL => scroll_action(argmax(&dist.scroll_probs)),
        _ => Action::Finish,
    }
}

/// Runs the policy network and reads out the masked action distribution.
pub fn action_distribution(
    params: &PolicyParams,
    input: &EncodedInput,
) -> Result<ActionDistribution, PolicyError> {
    let mut tape = Tape::new();
    let bound = tape.bind_store(&params.pi);
    net::distribution(&mut tape, &bound, &params.config, input)
}

/// Q_φ(s, a): scalar value of taking `a` in the encoded observation.
pub fn q_value(
    params: &PolicyParams,
    input: &EncodedInput,
    a: &Action,
) -> Result<f64, PolicyError> {
    let mut tape = Tape::new();
    let bound = tape.bind_store(&params.q);
    let node = net::q_node(&mut tape, &bound, &params.config, input, a)?;
    Ok(tape.scalar(node))
}

/// V_ψ(s): scalar state value of the encoded observation.
pub fn v_value(params: &PolicyParams, input: &EncodedInput) -> Result<f64, PolicyError> {
    let mut tape = Tape::new();
    let bound = tape.bind_store(&params.v);
    let node = net::v_node(&mut tape, &bound, &params.config, input)?;
    Ok(tape.scalar(node))
}
