//! Token vocabulary: reserved structural tokens first, then corpus words.
//!
//! The vocabulary is built once from the training applications and persisted
//! as a text file (one token per line) behind a checksum header, so held-out
//! apps tokenize through the same table with UNK fallback.

use super::{split_tokens, PerceptionError};
use crate::autodiff;
use crate::env::{AppSpec, TaskInstance};
use std::collections::{BTreeSet, HashMap};
use std::path::Path;

/// Structural token ids, fixed for every vocabulary.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const GOAL: u32 = 2;
pub const HIST: u32 = 3;
pub const SEP: u32 = 4;
pub const ELEM: u32 = 5;

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    max_element_ids: usize,
}

impl Vocab {
    /// Reserved block: structural markers, element-id tokens, action and
    /// element-type words, digits, punctuation.
    fn reserved(max_element_ids: usize) -> Vec<String> {
        let mut out: Vec<String> = ["[pad]", "[unk]", "[goal]", "[hist]", "[sep]", "[elem]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for k in 1..=max_element_ids {
            out.push(format!("[id{k}]"));
        }
        for w in [
            "click", "type", "scroll", "finish", "up", "down", "at", "button", "textbox",
            "checkbox", "link", "label", "menuitem",
        ] {
            out.push(w.to_string());
        }
        for d in 0..10 {
            out.push(d.to_string());
        }
        for p in ["'", "(", ")", ",", ".", ":", ";", "!", "?", "-", "_", "/", "\"", "[", "]"] {
            out.push(p.to_string());
        }
        out
    }

    /// Collects every word that can appear on a training screen or in a
    /// training goal: element templates (with `{var}` holes removed), state
    /// values, effect literals, goal texts, slot values.
    pub fn build(apps: &[&AppSpec], tasks: &[&TaskInstance], max_element_ids: usize) -> Vocab {
        let mut corpus: BTreeSet<String> = BTreeSet::new();
        let mut feed = |text: &str| {
            // Strip template holes: their runtime fillers are covered by
            // state values and slot values fed separately.
            let mut cleaned = String::with_capacity(text.len());
            let mut rest = text;
            while let Some(open) = rest.find('{') {
                cleaned.push_str(&rest[..open]);
                cleaned.push(' ');
                match rest[open..].find('}') {
                    Some(close) => rest = &rest[open + close + 1..],
                    None => {
                        rest = "";
                        break;
                    }
                }
            }
            cleaned.push_str(rest);
            for tok in split_tokens(&cleaned) {
                corpus.insert(tok);
            }
        };

        for app in apps {
            for value in app.initial_state.values() {
                feed(value);
            }
            for screen in &app.screens {
                for def in &screen.elements {
                    feed(&def.text_template);
                }
            }
            for rule in &app.transition_rules {
                for eff in &rule.effects {
                    feed(&eff.value_template);
                }
                for cond in &rule.when {
                    feed(&cond.value);
                }
            }
        }
        for task in tasks {
            feed(&task.goal_text);
            for (_, value) in &task.slots {
                feed(value);
            }
        }

        let mut tokens = Self::reserved(max_element_ids);
        let reserved: BTreeSet<&str> = tokens.iter().map(|s| s.as_str()).collect();
        let fresh: Vec<String> = corpus
            .into_iter()
            .filter(|t| !reserved.contains(t.as_str()))
            .collect();
        tokens.extend(fresh);

        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab {
            tokens,
            index,
            max_element_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_element_ids(&self) -> usize {
        self.max_element_ids
    }

    /// Id of a single token string, with UNK fallback.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Id of the `[IDk]` token, or an error when k exceeds the table.
    pub fn element_id_token(&self, k: usize) -> Result<u32, PerceptionError> {
        if k == 0 || k > self.max_element_ids {
            return Err(PerceptionError::ElementIdOutOfRange {
                elem_id: k,
                max: self.max_element_ids,
            });
        }
        Ok(self.id(&format!("[id{k}]")))
    }

    /// Splits text and maps every piece through the table.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_tokens(text).iter().map(|t| self.id(t)).collect()
    }

    /// Writes the table: a checksum header line, then one token per line.
    pub fn save(&self, path: &Path) -> Result<(), PerceptionError> {
        let body = self.tokens.join("\n");
        let digest = autodiff::sha256_hex(body.as_bytes());
        let content = format!("# sha256 {digest} max_ids {}\n{body}\n", self.max_element_ids);
        std::fs::write(path, content).map_err(|e| PerceptionError::VocabIo {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Loads a table written by [`Vocab::save`], verifying the checksum.
    pub fn load(path: &Path) -> Result<Vocab, PerceptionError> {
        let content = std::fs::read_to_string(path).map_err(|e| PerceptionError::VocabIo {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let (header, body) = content.split_once('\n').ok_or_else(|| {
            PerceptionError::VocabFormat {
                path: path.display().to_string(),
                message: "missing header line".into(),
            }
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (expected, max_ids) = match fields.as_slice() {
            ["#", "sha256", digest, "max_ids", n] => {
                let max_ids = n.parse::<usize>().map_err(|_| PerceptionError::VocabFormat {
                    path: path.display().to_string(),
                    message: format!("bad max_ids '{n}'"),
                })?;
                (digest.to_string(), max_ids)
            }
            _ => {
                return Err(PerceptionError::VocabFormat {
                    path: path.display().to_string(),
                    message: "header is not '# sha256 <hex> max_ids <n>'".into(),
                })
            }
        };
        let body = body.strip_suffix('\n').unwrap_or(body);
        let digest = autodiff::sha256_hex(body.as_bytes());
        if digest != expected {
            return Err(PerceptionError::VocabChecksum {
                path: path.display().to_string(),
                expected,
                got: digest,
            });
        }
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab {
            tokens,
            index,
            max_element_ids: max_ids,
        })
    }
}
