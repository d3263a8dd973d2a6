//! Structured-screen perception: element id assignment, feature hashing,
//! canonical text rendering, and serialization into the policy's token
//! sequence.

pub(crate) mod vocab;

pub use vocab::{Vocab, ELEM, GOAL, HIST, PAD, SEP, UNK};

use crate::env::{Action, BBox, ElemType, Observation, UIElement};
use crate::rng::fnv1a64;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Feature vector dimension d_f.
pub const D_F: usize = 32;
/// History summary capacity.
pub const K_HIST: usize = 5;
/// Largest element id with a dedicated `[IDk]` token.
pub const MAX_ELEMENT_IDS: usize = 64;

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("goal segment alone occupies {got} tokens, exceeding max_seq_len {max}")]
    GoalTooLong { got: usize, max: usize },
    #[error("element id {elem_id} exceeds the vocabulary's id-token range 1..={max}")]
    ElementIdOutOfRange { elem_id: usize, max: usize },
    #[error("vocabulary file {path}: {message}")]
    VocabIo { path: String, message: String },
    #[error("vocabulary file {path} is malformed: {message}")]
    VocabFormat { path: String, message: String },
    #[error("vocabulary file {path} failed its checksum: header says {expected}, content hashes to {got}")]
    VocabChecksum {
        path: String,
        expected: String,
        got: String,
    },
}

/// The per-step structured screen: elements with reading-order ids 1..N and
/// a fixed-dimension feature vector per element.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredUI {
    pub elements: Vec<UIElement>,
    pub features: Vec<[f64; D_F]>,
}

impl StructuredUI {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// Rolling record of the last `K_HIST` actions, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistorySummary {
    recent_actions: Vec<String>,
}

impl HistorySummary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[String] {
        &self.recent_actions
    }
}

/// Appends the rendered action, evicting the oldest entry past `K_HIST`.
pub fn update_history(hist: &HistorySummary, action: &Action) -> HistorySummary {
    let mut recent = hist.recent_actions.clone();
    recent.push(action.render());
    while recent.len() > K_HIST {
        recent.remove(0);
    }
    HistorySummary { recent_actions: recent }
}

/// Serialized policy input. Token ids only; spans index back into the
/// element list so the network can pool per-element scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    /// elem_id -> [start, end) range of that element's whole segment.
    pub element_spans: BTreeMap<usize, (usize, usize)>,
    /// elem_id -> [start, end) range of its quoted text tokens; falls back
    /// to the `[IDk]` token when the text is empty.
    pub text_spans: BTreeMap<usize, (usize, usize)>,
    /// Elements dropped by the length cap, in reading order.
    pub truncated_elems: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Splits text into lowercase tokens: bracketed ids (`[id3]`) as single
/// tokens, alphabetic runs as words, each digit separately, every other
/// non-space character on its own. Deterministic and vocabulary-free.
pub fn split_tokens(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '[' {
            // Try a bracketed alphanumeric token.
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_ascii_alphanumeric() {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && chars[j] == ']' {
                out.push(chars[i..=j].iter().collect());
                i = j + 1;
            } else {
                out.push("[".to_string());
                i += 1;
            }
        } else if c.is_ascii_digit() {
            out.push(c.to_string());
            i += 1;
        } else if c.is_alphabetic() {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_alphabetic() {
                j += 1;
            }
            out.push(chars[i..j].iter().collect());
            i = j;
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

/// Word-like tokens (alphabetic runs and digits, no punctuation).
fn word_tokens(text: &str) -> Vec<String> {
    split_tokens(text)
        .into_iter()
        .filter(|t| t.chars().next().is_some_and(|c| c.is_alphanumeric()))
        .collect()
}

/// Canonical one-line rendering of an element.
pub fn render_element(e: &UIElement) -> String {
    format!(
        "[ID{}] {} '{}' at ({}, {}, {}, {})",
        e.elem_id, e.elem_type, e.text, e.bbox.x_min, e.bbox.y_min, e.bbox.x_max, e.bbox.y_max
    )
}

/// Inverse of [`render_element`]; `None` when the line is not in canonical
/// form. Texts containing the infix `' at (` are not recoverable.
pub fn parse_element(line: &str) -> Option<UIElement> {
    let rest = line.strip_prefix("[ID")?;
    let close = rest.find(']')?;
    let elem_id: usize = rest[..close].parse().ok()?;
    let rest = rest[close + 1..].strip_prefix(' ')?;
    let space = rest.find(' ')?;
    let elem_type: ElemType = rest[..space].parse().ok()?;
    let rest = rest[space + 1..].strip_prefix('\'')?;
    let text_end = rest.rfind("' at (")?;
    let text = rest[..text_end].to_string();
    let coords = rest[text_end + "' at (".len()..].strip_suffix(')')?;
    let parts: Vec<&str> = coords.split(", ").collect();
    if parts.len() != 4 {
        return None;
    }
    let nums: Vec<i64> = parts.iter().map(|p| p.parse().ok()).collect::<Option<_>>()?;
    Some(UIElement {
        elem_id,
        bbox: BBox::new(nums[0], nums[1], nums[2], nums[3]),
        elem_type,
        text,
        feature_key: String::new(),
    })
}

/// Hashed bag-of-features for one element. Component 0 counts distinct
/// word tokens shared between the element text and the goal; the remaining
/// components accumulate hashed type/unigram/bigram indicators.
fn features_for(e: &UIElement, goal_words: &BTreeSet<String>) -> [f64; D_F] {
    let mut f = [0.0; D_F];
    let words = word_tokens(&e.text);
    let distinct: BTreeSet<&String> = words.iter().collect();
    f[0] = distinct.iter().filter(|w| goal_words.contains(w.as_str())).count() as f64;

    let mut bump = |s: String| {
        let bucket = 1 + (fnv1a64(&s) % (D_F as u64 - 1)) as usize;
        f[bucket] += 1.0;
    };
    bump(format!("t:{}", e.elem_type));
    for w in &words {
        bump(format!("u:{w}"));
    }
    for pair in words.windows(2) {
        bump(format!("b:{}_{}", pair[0], pair[1]));
    }
    f
}

/// Builds the structured screen: ids reassigned 1..N in reading order
/// (top-to-bottom, left-to-right, then declaration key) and features
/// computed per element.
pub fn extract(obs: &Observation, goal: &str) -> StructuredUI {
    let mut ordered: Vec<&UIElement> = obs.visible_elements.iter().collect();
    ordered.sort_by(|a, b| {
        (a.bbox.y_min, a.bbox.x_min, &a.feature_key)
            .cmp(&(b.bbox.y_min, b.bbox.x_min, &b.feature_key))
    });
    let goal_words: BTreeSet<String> = word_tokens(goal).into_iter().collect();
    let mut elements = Vec::with_capacity(ordered.len());
    let mut features = Vec::with_capacity(ordered.len());
    for (i, e) in ordered.into_iter().enumerate() {
        let mut owned = e.clone();
        owned.elem_id = i + 1;
        features.push(features_for(&owned, &goal_words));
        elements.push(owned);
    }
    StructuredUI { elements, features }
}

/// Flattens (screen, goal, history) into one token sequence:
/// `[GOAL] goal.. [HIST] (action.. [SEP])* ([ELEM] element-line..)*`.
///
/// When the cap is tight, whole trailing element segments are dropped first,
/// then oldest history entries; the goal segment is never cut, and a goal
/// that alone exceeds the cap is an error.
pub fn serialize(
    vocab: &Vocab,
    u: &StructuredUI,
    goal: &str,
    hist: &HistorySummary,
    max_seq_len: usize,
) -> Result<TokenSequence, PerceptionError> {
    let mut goal_ids = vec![GOAL];
    goal_ids.extend(vocab.encode(goal));
    if goal_ids.len() + 1 > max_seq_len {
        return Err(PerceptionError::GoalTooLong {
            got: goal_ids.len() + 1,
            max: max_seq_len,
        });
    }

    let hist_segments: Vec<Vec<u32>> = hist
        .entries()
        .iter()
        .map(|line| {
            let mut ids = vocab.encode(line);
            ids.push(SEP);
            ids
        })
        .collect();

    struct ElemSegment {
        elem_id: usize,
        ids: Vec<u32>,
        /// Text token range relative to the segment start.
        text_rel: (usize, usize),
    }
    let mut elem_segments = Vec::with_capacity(u.elements.len());
    for e in &u.elements {
        let mut ids = vec![ELEM, vocab.element_id_token(e.elem_id)?];
        ids.extend(vocab.encode(&e.elem_type.to_string()));
        let quote = vocab.id("'");
        ids.push(quote);
        let text_start = ids.len();
        ids.extend(vocab.encode(&e.text));
        let text_end = ids.len();
        ids.push(quote);
        ids.extend(vocab.encode(&format!(
            "at ({}, {}, {}, {})",
            e.bbox.x_min, e.bbox.y_min, e.bbox.x_max, e.bbox.y_max
        )));
        // Empty text pools from the [IDk] token instead.
        let text_rel = if text_start == text_end { (1, 2) } else { (text_start, text_end) };
        elem_segments.push(ElemSegment { elem_id: e.elem_id, ids, text_rel });
    }

    // Fit: drop trailing elements, then oldest history.
    let total = |hist_from: usize, elems: usize| -> usize {
        goal_ids.len()
            + 1
            + hist_segments[hist_from..].iter().map(Vec::len).sum::<usize>()
            + elem_segments[..elems].iter().map(|s| s.ids.len()).sum::<usize>()
    };
    let mut hist_from = 0;
    let mut n_elems = elem_segments.len();
    while total(hist_from, n_elems) > max_seq_len && n_elems > 0 {
        n_elems -= 1;
    }
    while total(hist_from, n_elems) > max_seq_len && hist_from < hist_segments.len() {
        hist_from += 1;
    }
    debug_assert!(total(hist_from, n_elems) <= max_seq_len);

    let mut token_ids = goal_ids;
    token_ids.push(HIST);
    for seg in &hist_segments[hist_from..] {
        token_ids.extend(seg);
    }
    let mut element_spans = BTreeMap::new();
    let mut text_spans = BTreeMap::new();
    for seg in &elem_segments[..n_elems] {
        let start = token_ids.len();
        token_ids.extend(&seg.ids);
        element_spans.insert(seg.elem_id, (start, start + seg.ids.len()));
        text_spans.insert(seg.elem_id, (start + seg.text_rel.0, start + seg.text_rel.1));
    }
    let truncated_elems = elem_segments[n_elems..].iter().map(|s| s.elem_id).collect();

    Ok(TokenSequence {
        token_ids,
        element_spans,
        text_spans,
        truncated_elems,
    })
}
