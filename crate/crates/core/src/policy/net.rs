//! Computation-graph builders for the policy, Q and V networks. All three
//! share one trunk architecture: token + segment-local position embeddings
//! (plus element-feature injection on text rows), a stack of bidirectional
//! attention blocks with pre-norm residuals, and a final layer norm.

use super::{
    scroll_index, ActionDistribution, EncodedInput, PolicyConfig, PolicyError, N_SCROLL, N_TYPES,
    T_CLICK, T_FINISH, T_SCROLL, T_TYPE,
};
use crate::autodiff::{AdResult, BoundStore, NodeId, ParameterStore, Tape};
use crate::env::Action;
use crate::rng::stream_rng;
use ndarray::{Array1, Array2};
use rand::Rng;

/// Slot-embedding row used when the action carries no slot argument.
fn no_slot_row(cfg: &PolicyConfig) -> usize {
    cfg.max_slots
}

fn xavier(rows: usize, cols: usize, seed: u64, tag: &str) -> Array2<f64> {
    let mut rng = stream_rng(seed, tag, 0);
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen::<f64>() * 2.0 * s - s)
}

/// Builds one named parameter group ("pi", "q" or "v"): the shared trunk
/// shapes plus that group's own heads. Initialization is keyed by
/// (seed, group, tensor name), so it is independent of insertion order.
pub(crate) fn init_group(
    cfg: &PolicyConfig,
    seed: u64,
    group: &str,
) -> Result<ParameterStore, PolicyError> {
    let h = cfg.hidden_dim;
    let f = h * cfg.ffn_mult;
    let mut store = ParameterStore::default();
    let mat = |store: &mut ParameterStore, name: &str, rows: usize, cols: usize| {
        let tag = format!("init:{group}:{name}");
        store
            .insert(name, xavier(rows, cols, seed, &tag).into_dyn())
            .expect("unique parameter name");
    };
    let vec_of = |store: &mut ParameterStore, name: &str, len: usize, fill: f64| {
        store
            .insert(name, Array1::from_elem(len, fill).into_dyn())
            .expect("unique parameter name");
    };

    mat(&mut store, "emb.token", cfg.vocab_size, h);
    mat(&mut store, "emb.pos", cfg.max_local_pos, h);
    mat(&mut store, "emb.feat", cfg.d_f, h);
    for l in 0..cfg.layers {
        vec_of(&mut store, &format!("layer{l}.ln1.gain"), h, 1.0);
        vec_of(&mut store, &format!("layer{l}.ln1.bias"), h, 0.0);
        for w in ["wq", "wk", "wv", "wo"] {
            mat(&mut store, &format!("layer{l}.attn.{w}"), h, h);
        }
        vec_of(&mut store, &format!("layer{l}.ln2.gain"), h, 1.0);
        vec_of(&mut store, &format!("layer{l}.ln2.bias"), h, 0.0);
        mat(&mut store, &format!("layer{l}.ffn.w1"), h, f);
        vec_of(&mut store, &format!("layer{l}.ffn.b1"), f, 0.0);
        mat(&mut store, &format!("layer{l}.ffn.w2"), f, h);
        vec_of(&mut store, &format!("layer{l}.ffn.b2"), h, 0.0);
    }
    vec_of(&mut store, "final.gain", h, 1.0);
    vec_of(&mut store, "final.bias", h, 0.0);

    match group {
        "pi" => {
            mat(&mut store, "head.type.w", h, N_TYPES);
            vec_of(&mut store, "head.type.b", N_TYPES, 0.0);
            mat(&mut store, "head.click.w", h, 1);
            mat(&mut store, "head.type_elem.w", h, 1);
            mat(&mut store, "head.slot.w", h, cfg.max_slots);
            vec_of(&mut store, "head.slot.b", cfg.max_slots, 0.0);
            mat(&mut store, "head.scroll.w", h, N_SCROLL);
            vec_of(&mut store, "head.scroll.b", N_SCROLL, 0.0);
        }
        "q" => {
            mat(&mut store, "act.type_w", N_TYPES, h);
            mat(&mut store, "act.slot_emb", cfg.max_slots + 1, h);
            mat(&mut store, "head.val.w1", 2 * h, h);
            vec_of(&mut store, "head.val.b1", h, 0.0);
            mat(&mut store, "head.val.w2", h, 1);
            vec_of(&mut store, "head.val.b2", 1, 0.0);
        }
        "v" => {
            mat(&mut store, "head.val.w1", h, h);
            vec_of(&mut store, "head.val.b1", h, 0.0);
            mat(&mut store, "head.val.w2", h, 1);
            vec_of(&mut store, "head.val.b2", 1, 0.0);
        }
        other => {
            return Err(PolicyError::InvalidConfig(format!(
                "unknown parameter group '{other}'"
            )))
        }
    }
    Ok(store)
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: Option<NodeId>) -> AdResult<NodeId> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Encoder over the token sequence; returns the final `(L, H)` row states.
pub(crate) fn trunk(
    tape: &mut Tape,
    bs: &BoundStore,
    cfg: &PolicyConfig,
    inp: &EncodedInput,
) -> AdResult<NodeId> {
    let tok = tape.embedding_lookup(bs.get("emb.token"), &inp.token_ids)?;
    let pos = tape.embedding_lookup(bs.get("emb.pos"), &inp.local_pos)?;
    let mut x = tape.add(tok, pos)?;
    if inp.feature_matrix.iter().any(|&v| v != 0.0) {
        let fc = tape.constant(inp.feature_matrix.clone().into_dyn());
        let fp = tape.matmul(fc, bs.get("emb.feat"))?;
        x = tape.add(x, fp)?;
    }
    let dh = cfg.hidden_dim / cfg.heads;
    let att_scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.layers {
        let h = tape.layer_norm(
            x,
            bs.get(&format!("layer{l}.ln1.gain")),
            bs.get(&format!("layer{l}.ln1.bias")),
        )?;
        let q = tape.matmul(h, bs.get(&format!("layer{l}.attn.wq")))?;
        let k = tape.matmul(h, bs.get(&format!("layer{l}.attn.wk")))?;
        let v = tape.matmul(h, bs.get(&format!("layer{l}.attn.wv")))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let (a, b) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice(q, 1, a, b)?;
            let kh = tape.slice(k, 1, a, b)?;
            let vh = tape.slice(v, 1, a, b)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, att_scale);
            let att = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        let proj = tape.matmul(cat, bs.get(&format!("layer{l}.attn.wo")))?;
        x = tape.add(x, proj)?;

        let h2 = tape.layer_norm(
            x,
            bs.get(&format!("layer{l}.ln2.gain")),
            bs.get(&format!("layer{l}.ln2.bias")),
        )?;
        let a1 = linear(
            tape,
            h2,
            bs.get(&format!("layer{l}.ffn.w1")),
            Some(bs.get(&format!("layer{l}.ffn.b1"))),
        )?;
        let r = tape.relu(a1);
        let o = linear(
            tape,
            r,
            bs.get(&format!("layer{l}.ffn.w2")),
            Some(bs.get(&format!("layer{l}.ffn.b2"))),
        )?;
        x = tape.add(x, o)?;
    }
    tape.layer_norm(x, bs.get("final.gain"), bs.get("final.bias"))
}

/// Masked log-probability nodes for every head the current mask allows.
/// Element heads are indexed by position in `inp.elements` (present elements).
pub(crate) struct PiNodes {
    pub type_log_probs: NodeId,
    pub click_log_probs: Option<NodeId>,
    pub type_elem_log_probs: Option<NodeId>,
    pub slot_log_probs: Option<NodeId>,
    pub scroll_log_probs: Option<NodeId>,
}

pub(crate) fn pi_nodes(
    tape: &mut Tape,
    bs: &BoundStore,
    cfg: &PolicyConfig,
    inp: &EncodedInput,
) -> Result<PiNodes, PolicyError> {
    let rows = trunk(tape, bs, cfg, inp)?;
    let len = inp.seq_len();
    let g = tape.mean_rows(rows, 0, len)?;
    let mask = inp.type_mask();

    let type_lin = linear(tape, g, bs.get("head.type.w"), Some(bs.get("head.type.b")))?;
    let type_mask_row = Array2::from_shape_fn((1, N_TYPES), |(_, j)| {
        if mask[j] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    });
    let mask_c = tape.constant(type_mask_row.into_dyn());
    let type_masked = tape.add(type_lin, mask_c)?;
    let type_flat = tape.reshape(type_masked, &[N_TYPES])?;
    let type_log_probs = tape.log_softmax(type_flat)?;

    let m = inp.elements.len();
    let pooled: Vec<NodeId> = inp
        .elements
        .iter()
        .map(|e| tape.mean_rows(rows, e.text_rows.0, e.text_rows.1))
        .collect::<AdResult<_>>()?;
    let stack = if m > 0 {
        Some(tape.concat(&pooled, 0)?)
    } else {
        None
    };

    let click_log_probs = if mask[T_CLICK] {
        let stack = stack.expect("CLICK unmasked implies elements present");
        let scores = tape.matmul(stack, bs.get("head.click.w"))?;
        let flat = tape.reshape(scores, &[m])?;
        Some(tape.log_softmax(flat)?)
    } else {
        None
    };

    let type_elem_log_probs = if mask[T_TYPE] {
        let stack = stack.expect("TYPE unmasked implies elements present");
        let scores = tape.matmul(stack, bs.get("head.type_elem.w"))?;
        let flat = tape.reshape(scores, &[m])?;
        let textbox_mask = Array1::from_shape_fn(m, |i| {
            if inp.elements[i].textbox {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        });
        let tm = tape.constant(textbox_mask.into_dyn());
        let masked = tape.add(flat, tm)?;
        Some(tape.log_softmax(masked)?)
    } else {
        None
    };

    let slot_log_probs = if mask[T_TYPE] {
        let n_slots = inp.slot_values.len();
        let lin = linear(tape, g, bs.get("head.slot.w"), Some(bs.get("head.slot.b")))?;
        let used = tape.slice(lin, 1, 0, n_slots)?;
        let flat = tape.reshape(used, &[n_slots])?;
        Some(tape.log_softmax(flat)?)
    } else {
        None
    };

    let scroll_log_probs = if mask[T_SCROLL] {
        let lin = linear(
            tape,
            g,
            bs.get("head.scroll.w"),
            Some(bs.get("head.scroll.b")),
        )?;
        let flat = tape.reshape(lin, &[N_SCROLL])?;
        Some(tape.log_softmax(flat)?)
    } else {
        None
    };

    Ok(PiNodes {
        type_log_probs,
        click_log_probs,
        type_elem_log_probs,
        slot_log_probs,
        scroll_log_probs,
    })
}

/// Runs the policy heads and reads the masked probabilities out of the tape.
pub(crate) fn distribution(
    tape: &mut Tape,
    bs: &BoundStore,
    cfg: &PolicyConfig,
    inp: &EncodedInput,
) -> Result<ActionDistribution, PolicyError> {
    let nodes = pi_nodes(tape, bs, cfg, inp)?;
    let mask = inp.type_mask();

    let tv = tape.value(nodes.type_log_probs);
    let mut type_probs = [0.0; N_TYPES];
    for (i, p) in type_probs.iter_mut().enumerate() {
        *p = tv[[i]].exp();
    }

    let n = inp.n_elements;
    let mut click_element_probs = vec![0.0; n];
    let mut click_element_mask = vec![false; n];
    if let Some(node) = nodes.click_log_probs {
        let v = tape.value(node);
        for (i, e) in inp.elements.iter().enumerate() {
            click_element_probs[e.elem_id - 1] = v[[i]].exp();
            click_element_mask[e.elem_id - 1] = true;
        }
    }
    let mut type_element_probs = vec![0.0; n];
    let mut type_element_mask = vec![false; n];
    if let Some(node) = nodes.type_elem_log_probs {
        let v = tape.value(node);
        for (i, e) in inp.elements.iter().enumerate() {
            if e.textbox {
                type_element_probs[e.elem_id - 1] = v[[i]].exp();
                type_element_mask[e.elem_id - 1] = true;
            }
        }
    }
    let mut slot_probs = vec![0.0; inp.slot_values.len()];
    if let Some(node) = nodes.slot_log_probs {
        let v = tape.value(node);
        for (i, p) in slot_probs.iter_mut().enumerate() {
            *p = v[[i]].exp();
        }
    }
    let mut scroll_probs = [0.0; N_SCROLL];
    if let Some(node) = nodes.scroll_log_probs {
        let v = tape.value(node);
        for (i, p) in scroll_probs.iter_mut().enumerate() {
            *p = v[[i]].exp();
        }
    }

    Ok(ActionDistribution {
        type_probs,
        type_mask: mask,
        click_element_probs,
        click_element_mask,
        type_element_probs,
        type_element_mask,
        slot_probs,
        slot_values: inp.slot_values.clone(),
        scroll_probs,
    })
}

fn present_index(inp: &EncodedInput, elem_id: usize) -> Option<usize> {
    inp.elements.iter().position(|e| e.elem_id == elem_id)
}

/// Negative log-likelihood node of `action` under the policy — the training
/// loss for one example. Masked actions are an error (corrupt dataset).
pub(crate) fn nll_node(
    tape: &mut Tape,
    bs: &BoundStore,
    cfg: &PolicyConfig,
    inp: &EncodedInput,
    action: &Action,
) -> Result<NodeId, PolicyError> {
    let nodes = pi_nodes(tape, bs, cfg, inp)?;
    let mask = inp.type_mask();
    let masked = || PolicyError::MaskedAction(action.render());

    let log_prob = match action {
        Action::Click { elem_id } => {
            if !mask[T_CLICK] {
                return Err(masked());
            }
            let i = present_index(inp, *elem_id).ok_or_else(masked)?;
            let lt = tape.pick(nodes.type_log_probs, T_CLICK)?;
            let le = tape.pick(nodes.click_log_probs.expect("unmasked"), i)?;
            tape.add(lt, le)?
        }
        Action::Type { elem_id, text } => {
            if !mask[T_TYPE] {
                return Err(masked());
            }
            let i = present_index(inp, *elem_id).ok_or_else(masked)?;
            if !inp.elements[i].textbox {
                return Err(masked());
            }
            let slots: Vec<usize> = inp
                .slot_values
                .iter()
                .enumerate()
                .filter(|(_, v)| *v == text)
                .map(|(s, _)| s)
                .collect();
            if slots.is_empty() {
                return Err(PolicyError::UnknownSlotValue(text.clone()));
            }
            let lt = tape.pick(nodes.type_log_probs, T_TYPE)?;
            let le = tape.pick(nodes.type_elem_log_probs.expect("unmasked"), i)?;
            let slot_lp = nodes.slot_log_probs.expect("unmasked");
            let ls = if slots.len() == 1 {
                tape.pick(slot_lp, slots[0])?
            } else {
                // Duplicate slot values: the likelihood of producing this
                // text is the sum of the matching slots' probabilities.
                let mut total = None;
                for &s in &slots {
                    let lp = tape.pick(slot_lp, s)?;
                    let p = tape.exp(lp);
                    total = Some(match total {
                        None => p,
                        Some(t) => tape.add(t, p)?,
                    });
                }
                tape.ln(total.expect("nonempty"))
            };
            let te = tape.add(lt, le)?;
            tape.add(te, ls)?
        }
        Action::Scroll { direction, amount } => {
            if !mask[T_SCROLL] {
                return Err(masked());
            }
            let idx = scroll_index(*direction, *amount).ok_or_else(masked)?;
            let lt = tape.pick(nodes.type_log_probs, T_SCROLL)?;
            let ls = tape.pick(nodes.scroll_log_probs.expect("unmasked"), idx)?;
            tape.add(lt, ls)?
        }
        Action::Finish => tape.pick(nodes.type_log_probs, T_FINISH)?,
    };
    Ok(tape.scale(log_prob, -1.0))
}

fn value_mlp(
    tape: &mut Tape,
    bs: &BoundStore,
    x: NodeId,
) -> AdResult<NodeId> {
    let a1 = linear(tape, x, bs.get("head.val.w1"), Some(bs.get("head.val.b1")))?;
    let r = tape.relu(a1);
    let out = linear(tape, r, bs.get("head.val.w2"), Some(bs.get("head.val.b2")))?;
    let flat = tape.reshape(out, &[1])?;
    tape.pick(flat, 0)
}

/// Scalar Q node: trunk pooled state combined with the encoded action
/// (type one-hot, chosen-element pooled embedding, slot index).
pub(crate) fn q_node(
    tape: &mut Tape,
    bs: &BoundStore,
    cfg: &PolicyConfig,
    inp: &EncodedInput,
    action: &Action,
) -> Result<NodeId, PolicyError> {
    let mask = inp.type_mask();
    let masked = || PolicyError::MaskedAction(action.render());

    let (type_idx, elem_id, slot_idx) = match action {
        Action::Click { elem_id } => {
            if !mask[T_CLICK] {
                return Err(masked());
            }
            (T_CLICK, Some(*elem_id), None)
        }
        Action::Type { elem_id, text } => {
            if !mask[T_TYPE] {
                return Err(masked());
            }
            let s = inp
                .slot_values
                .iter()
                .position(|v| v == text)
                .ok_or_else(|| PolicyError::UnknownSlotValue(text.clone()))?;
            (T_TYPE, Some(*elem_id), Some(s))
        }
        Action::Scroll { direction, amount } => {
            if !mask[T_SCROLL] {
                return Err(masked());
            }
            scroll_index(*direction, *amount).ok_or_else(masked)?;
            (T_SCROLL, None, None)
        }
        Action::Finish => (T_FINISH, None, None),
    };

    let rows = trunk(tape, bs, cfg, inp)?;
    let g = tape.mean_rows(rows, 0, inp.seq_len())?;

    let mut onehot = Array2::zeros((1, N_TYPES));
    onehot[[0, type_idx]] = 1.0;
    let oh = tape.constant(onehot.into_dyn());
    let t_enc = tape.matmul(oh, bs.get("act.type_w"))?;

    let elem_enc = match elem_id {
        Some(id) => {
            let i = present_index(inp, id).ok_or_else(masked)?;
            if type_idx == T_TYPE && !inp.elements[i].textbox {
                return Err(masked());
            }
            let (a, b) = inp.elements[i].text_rows;
            tape.mean_rows(rows, a, b)?
        }
        None => tape.constant(Array2::zeros((1, cfg.hidden_dim)).into_dyn()),
    };
    let slot_row = slot_idx.unwrap_or_else(|| no_slot_row(cfg));
    let s_enc = tape.embedding_lookup(bs.get("act.slot_emb"), &[slot_row])?;

    let te = tape.add(t_enc, elem_enc)?;
    let a_enc = tape.add(te, s_enc)?;
    let qin = tape.concat(&[g, a_enc], 1)?;
    Ok(value_mlp(tape, bs, qin)?)
}

/// Scalar V node over the pooled trunk state.
pub(crate) fn v_node(
    tape: &mut Tape,
    bs: &BoundStore,
    cfg: &PolicyConfig,
    inp: &EncodedInput,
) -> Result<NodeId, PolicyError> {
    let rows = trunk(tape, bs, cfg, inp)?;
    let g = tape.mean_rows(rows, 0, inp.seq_len())?;
    Ok(value_mlp(tape, bs, g)?)
}
