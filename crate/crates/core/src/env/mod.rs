//! Deterministic windowed GUI environment.
//!
//! Applications are declared as data: screens of positioned elements,
//! guard/effect transition rules over a string-valued hidden state, and a
//! scrollable content column. The environment is a POMDP: the agent sees
//! only the elements intersecting the current viewport, never the hidden
//! state. All randomness is cosmetic (a seeded per-screen vertical jitter),
//! so the reachable state graph is identical across seeds.

mod app;
mod episode;
pub(crate) mod graph;

pub use app::{load_app_spec, load_task_instance, parse_app_spec, parse_task_instance};
pub use episode::Episode;
pub use graph::{enumerate_states, GraphNode, StateGraph};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Square screen edge in pixels.
pub const SCREEN_SIZE: i64 = 1120;
/// Pixels scrolled per unit of `Scroll` amount.
pub const SCROLL_STRIDE: i64 = 280;
/// Hard episode length bound.
pub const DEFAULT_T_MAX: usize = 30;
/// Scroll amounts the action space exposes.
pub const SCROLL_AMOUNTS: [u32; 3] = [1, 2, 3];
/// Largest magnitude of the seeded cosmetic y-offset.
pub const JITTER_RANGE: i64 = 20;
/// Reachable-state cap for exhaustive enumeration.
pub const STATE_NODE_CAP: usize = 50_000;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid definition in {path}: {message}")]
    Validation { path: String, message: String },
    #[error("task '{task}' targets app '{task_app}' but environment hosts '{app}'")]
    AppMismatch {
        task: String,
        task_app: String,
        app: String,
    },
    #[error("action references element id {elem_id} absent from the last observation")]
    InvalidElementReference { elem_id: usize },
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("episode still running; success is defined only after termination")]
    EpisodeNotFinished,
    #[error("no screen guard matches hidden state {state:?}")]
    NoActiveScreen { state: BTreeMap<String, String> },
    #[error("multiple screen guards ({first} and {second}) match the same hidden state")]
    AmbiguousScreen { first: String, second: String },
    #[error("template references undefined variable '{{{name}}}'")]
    UnknownTemplateVar { name: String },
    #[error("state enumeration exceeded the {cap}-node cap")]
    GraphOverflow { cap: usize },
}

/// Interactable element kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ElemType {
    Button,
    Textbox,
    Checkbox,
    Link,
    Label,
    MenuItem,
}

impl std::fmt::Display for ElemType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ElemType::Button => "Button",
            ElemType::Textbox => "Textbox",
            ElemType::Checkbox => "Checkbox",
            ElemType::Link => "Link",
            ElemType::Label => "Label",
            ElemType::MenuItem => "MenuItem",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ElemType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Button" => Ok(ElemType::Button),
            "Textbox" => Ok(ElemType::Textbox),
            "Checkbox" => Ok(ElemType::Checkbox),
            "Link" => Ok(ElemType::Link),
            "Label" => Ok(ElemType::Label),
            "MenuItem" => Ok(ElemType::MenuItem),
            other => Err(format!("unknown element type '{other}'")),
        }
    }
}

/// Half-open pixel rectangle: x in [x_min, x_max), y in [y_min, y_max).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl BBox {
    pub fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn center(&self) -> (i64, i64) {
        ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)
    }
}

/// One on-screen element as the agent sees it: ids are assigned per step in
/// reading order (top-to-bottom, then left-to-right), bbox is in screen
/// coordinates after viewport shift and clipping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UIElement {
    pub elem_id: usize,
    pub bbox: BBox,
    pub elem_type: ElemType,
    pub text: String,
    /// Stable declaration key; perception derives features from it, the
    /// environment resolves actions through it.
    pub feature_key: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScrollDirection {
    Down,
    Up,
}

impl std::fmt::Display for ScrollDirection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScrollDirection::Down => f.write_str("down"),
            ScrollDirection::Up => f.write_str("up"),
        }
    }
}

/// Compositional agent action. Ordering is the canonical planning order:
/// Click < Type < Scroll < Finish, then element id, then argument.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Click { elem_id: usize },
    Type { elem_id: usize, text: String },
    Scroll { direction: ScrollDirection, amount: u32 },
    Finish,
}

impl Action {
    /// Compact single-line rendering used in history summaries and reports.
    pub fn render(&self) -> String {
        match self {
            Action::Click { elem_id } => format!("CLICK [ID{elem_id}]"),
            Action::Type { elem_id, text } => format!("TYPE [ID{elem_id}] '{text}'"),
            Action::Scroll { direction, amount } => format!("SCROLL {direction} {amount}"),
            Action::Finish => "FINISH".to_string(),
        }
    }
}

/// Guard or success condition over the hidden state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub op: CondOp,
    pub var: String,
    /// May contain `{slot}` references in task predicates.
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondOp {
    Eq,
    Ne,
}

/// Element template inside a screen definition. `bbox` is in content
/// coordinates (y may exceed the screen when the app scrolls).
#[derive(Debug, Clone)]
pub struct ElementDef {
    pub key: String,
    pub elem_type: ElemType,
    /// May reference hidden variables as `{var}`.
    pub text_template: String,
    pub bbox: BBox,
    pub visible_when: Vec<Condition>,
}

#[derive(Debug, Clone)]
pub struct ScreenDef {
    pub name: String,
    pub when: Vec<Condition>,
    pub elements: Vec<ElementDef>,
}

/// Action pattern a transition rule listens for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionPattern {
    Click { element: String },
    Type { element: String },
}

#[derive(Debug, Clone)]
pub struct Effect {
    pub var: String,
    /// May reference hidden variables as `{var}` and the typed text as `{text}`.
    pub value_template: String,
}

#[derive(Debug, Clone)]
pub struct TransitionRule {
    pub on: ActionPattern,
    pub when: Vec<Condition>,
    pub effects: Vec<Effect>,
}

/// Declarative application: screens, transition rules, initial hidden state.
#[derive(Debug, Clone)]
pub struct AppSpec {
    pub app_name: String,
    pub screens: Vec<ScreenDef>,
    pub transition_rules: Vec<TransitionRule>,
    pub initial_state: BTreeMap<String, String>,
    pub content_height: i64,
}

/// A concrete goal: template text, ordered named slots, success predicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub app_name: String,
    pub goal_text: String,
    /// Ordered (name, value) pairs; the order defines TYPE slot indices.
    pub slots: Vec<(String, String)>,
    pub success_predicates: Vec<Condition>,
}

impl TaskInstance {
    pub fn slot_values(&self) -> Vec<&str> {
        self.slots.iter().map(|(_, v)| v.as_str()).collect()
    }

    /// Index of the first slot whose value equals `text`.
    pub fn slot_index_of(&self, text: &str) -> Option<usize> {
        self.slots.iter().position(|(_, v)| v == text)
    }
}

/// What the agent observes each step: viewport-filtered elements plus goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub visible_elements: Vec<UIElement>,
    pub goal_text: String,
    pub step_index: usize,
    pub viewport_offset: i64,
    /// Total scrollable height; lets consumers decide whether scrolling is
    /// meaningful without peeking at the app definition.
    pub content_height: i64,
}

impl Observation {
    pub fn element(&self, elem_id: usize) -> Option<&UIElement> {
        self.visible_elements.iter().find(|e| e.elem_id == elem_id)
    }

    /// Ids of visible Textbox elements (TYPE targets).
    pub fn textbox_ids(&self) -> Vec<usize> {
        self.visible_elements
            .iter()
            .filter(|e| e.elem_type == ElemType::Textbox)
            .map(|e| e.elem_id)
            .collect()
    }

    pub fn scrollable(&self) -> bool {
        self.content_height > SCREEN_SIZE
    }
}

/// One finished episode: the observation/action record plus its outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<(Observation, Action)>,
    pub success: bool,
    pub task: TaskInstance,
    pub seed: u64,
}

/// Substitutes `{name}` occurrences via `lookup`. Unknown names error;
/// literal braces are not escapable (declaration formats never need them).
pub(crate) fn substitute(
    template: &str,
    lookup: &dyn Fn(&str) -> Option<String>,
) -> Result<String, EnvError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or_else(|| EnvError::UnknownTemplateVar {
            name: after.to_string(),
        })?;
        let name = &after[..close];
        let value = lookup(name).ok_or_else(|| EnvError::UnknownTemplateVar {
            name: name.to_string(),
        })?;
        out.push_str(&value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Names referenced as `{name}` in a template.
pub(crate) fn template_vars(template: &str) -> Vec<String> {
    let mut vars = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                vars.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    vars
}

pub(crate) fn eval_conditions(
    conds: &[Condition],
    state: &BTreeMap<String, String>,
    slots: Option<&TaskInstance>,
) -> Result<bool, EnvError> {
    for c in conds {
        let expected = match slots {
            Some(task) => substitute(&c.value, &|name| {
                task.slots
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, v)| v.clone())
            })?,
            None => c.value.clone(),
        };
        let actual = state
            .get(&c.var)
            .ok_or_else(|| EnvError::UnknownTemplateVar { name: c.var.clone() })?;
        let holds = match c.op {
            CondOp::Eq => *actual == expected,
            CondOp::Ne => *actual != expected,
        };
        if !holds {
            return Ok(false);
        }
    }
    Ok(true)
}

/// True iff every success predicate of `task` holds on `state`.
pub fn success_on_state(
    task: &TaskInstance,
    state: &BTreeMap<String, String>,
) -> Result<bool, EnvError> {
    eval_conditions(&task.success_predicates, state, Some(task))
}
