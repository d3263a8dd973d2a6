//! Exhaustive enumeration of the reachable state graph.
//!
//! Nodes are (hidden state, viewport offset) pairs; the candidate action set
//! at each node is exactly the policy's valid action set, so plans found on
//! this graph are executable verbatim and provably optimal within the bound.

use super::episode::{observe, transition_once};
use super::*;
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub hidden: BTreeMap<String, String>,
    pub viewport_offset: i64,
    pub depth: usize,
    /// Task success predicates hold on this hidden state.
    pub success: bool,
    /// First-discovered predecessor and the action that reached this node;
    /// `None` for the root.
    pub parent: Option<(usize, Action)>,
}

#[derive(Debug, Clone)]
pub struct StateGraph {
    /// Breadth-first discovery order; index 0 is the reset state.
    pub nodes: Vec<GraphNode>,
    /// Outgoing edges per node in canonical action order.
    pub edges: Vec<Vec<(Action, usize)>>,
}

impl StateGraph {
    /// Index of the shallowest success node, by discovery order.
    pub fn first_success(&self) -> Option<usize> {
        self.nodes.iter().position(|n| n.success)
    }

    /// Actions from the root to `node`, excluding any terminal FINISH.
    pub fn path_to(&self, node: usize) -> Vec<Action> {
        let mut actions = Vec::new();
        let mut cur = node;
        while let Some((parent, action)) = &self.nodes[cur].parent {
            actions.push(action.clone());
            cur = *parent;
        }
        actions.reverse();
        actions
    }
}

/// Non-FINISH candidate actions at a node, in canonical order: CLICK per
/// visible element, TYPE per visible textbox and slot, then SCROLL when the
/// content exceeds the viewport.
pub(crate) fn candidate_actions(obs: &Observation, task: &TaskInstance) -> Vec<Action> {
    let mut out = Vec::new();
    for e in &obs.visible_elements {
        out.push(Action::Click { elem_id: e.elem_id });
    }
    for id in obs.textbox_ids() {
        for (_, value) in &task.slots {
            out.push(Action::Type {
                elem_id: id,
                text: value.clone(),
            });
        }
    }
    if obs.scrollable() {
        for direction in [ScrollDirection::Down, ScrollDirection::Up] {
            for amount in SCROLL_AMOUNTS {
                out.push(Action::Scroll { direction, amount });
            }
        }
    }
    out
}

/// Breadth-first expansion of every reachable (hidden state, viewport) node
/// up to `depth_bound` action applications, with success marking. Errors if
/// the graph exceeds [`STATE_NODE_CAP`] nodes.
pub fn enumerate_states(
    app: &AppSpec,
    task: &TaskInstance,
    depth_bound: usize,
) -> Result<StateGraph, EnvError> {
    let root_key = (app.initial_state.clone(), 0_i64);
    let mut index: HashMap<(BTreeMap<String, String>, i64), usize> = HashMap::new();
    index.insert(root_key, 0);
    let mut nodes = vec![GraphNode {
        hidden: app.initial_state.clone(),
        viewport_offset: 0,
        depth: 0,
        success: success_on_state(task, &app.initial_state)?,
        parent: None,
    }];
    let mut edges: Vec<Vec<(Action, usize)>> = vec![Vec::new()];
    let max_offset = (app.content_height - SCREEN_SIZE).max(0);

    let mut cursor = 0;
    while cursor < nodes.len() {
        let depth = nodes[cursor].depth;
        if depth >= depth_bound {
            cursor += 1;
            continue;
        }
        let hidden = nodes[cursor].hidden.clone();
        let viewport = nodes[cursor].viewport_offset;
        // Jitter never affects ids or visibility, so any seed describes the
        // same candidate set; 0 keeps the graph seed-free.
        let obs = observe(app, task, &hidden, viewport, 0, 0)?;

        for action in candidate_actions(&obs, task) {
            let (next_hidden, next_viewport) = match &action {
                Action::Click { elem_id } => {
                    let key = &obs.element(*elem_id).expect("candidate id").feature_key;
                    let next = transition_once(app, &hidden, key, None)?;
                    (next.unwrap_or_else(|| hidden.clone()), viewport)
                }
                Action::Type { elem_id, text } => {
                    let key = &obs.element(*elem_id).expect("candidate id").feature_key;
                    let next = transition_once(app, &hidden, key, Some(text))?;
                    (next.unwrap_or_else(|| hidden.clone()), viewport)
                }
                Action::Scroll { direction, amount } => {
                    let delta = SCROLL_STRIDE * i64::from(*amount);
                    let vp = match direction {
                        ScrollDirection::Down => (viewport + delta).min(max_offset),
                        ScrollDirection::Up => (viewport - delta).max(0),
                    };
                    (hidden.clone(), vp)
                }
                Action::Finish => unreachable!("candidates exclude FINISH"),
            };
            let key = (next_hidden.clone(), next_viewport);
            let target = match index.get(&key) {
                Some(&i) => i,
                None => {
                    if nodes.len() >= STATE_NODE_CAP {
                        return Err(EnvError::GraphOverflow { cap: STATE_NODE_CAP });
                    }
                    let i = nodes.len();
                    index.insert(key, i);
                    nodes.push(GraphNode {
                        success: success_on_state(task, &next_hidden)?,
                        hidden: next_hidden,
                        viewport_offset: next_viewport,
                        depth: depth + 1,
                        parent: Some((cursor, action.clone())),
                    });
                    edges.push(Vec::new());
                    i
                }
            };
            edges[cursor].push((action, target));
        }
        cursor += 1;
    }

    Ok(StateGraph { nodes, edges })
}
