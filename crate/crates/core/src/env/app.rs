//! Loading and validation of application and task declaration files.
//!
//! Both formats are JSON with an explicit `format_version`. Conditions are
//! `["eq"|"ne", var, value]` triples; effects are `["set", var, value]`
//! triples. Validation rejects any reference to an undeclared variable or
//! element so that runtime template substitution cannot fail on valid files.

use super::*;
use serde::Deserialize;
use std::collections::BTreeSet;
use std::path::Path;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Deserialize)]
struct RawApp {
    format_version: u64,
    app: String,
    content_height: i64,
    initial: BTreeMap<String, String>,
    screens: Vec<RawScreen>,
    transitions: Vec<RawTransition>,
}

#[derive(Deserialize)]
struct RawScreen {
    name: String,
    when: Vec<(String, String, String)>,
    elements: Vec<RawElement>,
}

#[derive(Deserialize)]
struct RawElement {
    key: String,
    #[serde(rename = "type")]
    elem_type: String,
    text: String,
    bbox: (i64, i64, i64, i64),
    #[serde(default)]
    visible_when: Vec<(String, String, String)>,
}

#[derive(Deserialize)]
struct RawTransition {
    on: RawPattern,
    #[serde(default)]
    when: Vec<(String, String, String)>,
    effects: Vec<(String, String, String)>,
}

#[derive(Deserialize)]
struct RawPattern {
    action: String,
    element: String,
}

#[derive(Deserialize)]
struct RawTask {
    format_version: u64,
    task_id: String,
    app: String,
    goal_template: String,
    slots: Vec<(String, String)>,
    success: Vec<(String, String, String)>,
}

fn invalid(path: &str, message: impl Into<String>) -> EnvError {
    EnvError::Validation {
        path: path.to_string(),
        message: message.into(),
    }
}

fn parse_json<'a, T: Deserialize<'a>>(text: &'a str, path: &str) -> Result<T, EnvError> {
    serde_json::from_str(text).map_err(|e| EnvError::Parse {
        path: path.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn parse_conditions(
    raw: &[(String, String, String)],
    path: &str,
) -> Result<Vec<Condition>, EnvError> {
    raw.iter()
        .map(|(op, var, value)| {
            let op = match op.as_str() {
                "eq" => CondOp::Eq,
                "ne" => CondOp::Ne,
                other => return Err(invalid(path, format!("unknown condition op '{other}'"))),
            };
            Ok(Condition {
                op,
                var: var.clone(),
                value: value.clone(),
            })
        })
        .collect()
}

pub fn parse_app_spec(text: &str, path: &str) -> Result<AppSpec, EnvError> {
    let raw: RawApp = parse_json(text, path)?;
    if raw.format_version != FORMAT_VERSION {
        return Err(invalid(
            path,
            format!("unsupported format_version {}", raw.format_version),
        ));
    }
    if raw.app.is_empty() {
        return Err(invalid(path, "app name is empty"));
    }
    if raw.content_height < SCREEN_SIZE {
        return Err(invalid(
            path,
            format!("content_height {} is below the screen height {SCREEN_SIZE}", raw.content_height),
        ));
    }
    if raw.screens.is_empty() {
        return Err(invalid(path, "app declares no screens"));
    }

    let declared: BTreeSet<&str> = raw.initial.keys().map(|s| s.as_str()).collect();
    let check_vars = |conds: &[Condition], ctx: &str| -> Result<(), EnvError> {
        for c in conds {
            if !declared.contains(c.var.as_str()) {
                return Err(invalid(
                    path,
                    format!("{ctx} references undeclared variable '{}'", c.var),
                ));
            }
        }
        Ok(())
    };

    let mut screens = Vec::with_capacity(raw.screens.len());
    let mut screen_names = BTreeSet::new();
    let mut all_keys = BTreeSet::new();
    let mut textbox_keys = BTreeSet::new();
    for rs in &raw.screens {
        if !screen_names.insert(rs.name.clone()) {
            return Err(invalid(path, format!("duplicate screen name '{}'", rs.name)));
        }
        let when = parse_conditions(&rs.when, path)?;
        check_vars(&when, &format!("screen '{}' guard", rs.name))?;
        if when.is_empty() {
            return Err(invalid(path, format!("screen '{}' has an empty guard", rs.name)));
        }
        let mut keys_here = BTreeSet::new();
        let mut elements = Vec::with_capacity(rs.elements.len());
        for re in &rs.elements {
            if re.key.is_empty() {
                return Err(invalid(path, format!("screen '{}' has an element with empty key", rs.name)));
            }
            if !keys_here.insert(re.key.clone()) {
                return Err(invalid(
                    path,
                    format!("duplicate element key '{}' in screen '{}'", re.key, rs.name),
                ));
            }
            let elem_type: ElemType = re
                .elem_type
                .parse()
                .map_err(|e: String| invalid(path, e))?;
            let (x_min, y_min, x_max, y_max) = re.bbox;
            if !(0 <= x_min && x_min < x_max && x_max <= SCREEN_SIZE) {
                return Err(invalid(
                    path,
                    format!("element '{}' x-range [{x_min}, {x_max}) outside [0, {SCREEN_SIZE})", re.key),
                ));
            }
            if !(0 <= y_min && y_min < y_max && y_max <= raw.content_height) {
                return Err(invalid(
                    path,
                    format!(
                        "element '{}' y-range [{y_min}, {y_max}) outside [0, {})",
                        re.key, raw.content_height
                    ),
                ));
            }
            for var in template_vars(&re.text) {
                if !declared.contains(var.as_str()) {
                    return Err(invalid(
                        path,
                        format!("element '{}' text references undeclared variable '{var}'", re.key),
                    ));
                }
            }
            let visible_when = parse_conditions(&re.visible_when, path)?;
            check_vars(&visible_when, &format!("element '{}' visibility", re.key))?;
            all_keys.insert(re.key.clone());
            if elem_type == ElemType::Textbox {
                textbox_keys.insert(re.key.clone());
            }
            elements.push(ElementDef {
                key: re.key.clone(),
                elem_type,
                text_template: re.text.clone(),
                bbox: BBox::new(x_min, y_min, x_max, y_max),
                visible_when,
            });
        }
        screens.push(ScreenDef {
            name: rs.name.clone(),
            when,
            elements,
        });
    }

    let mut transition_rules = Vec::with_capacity(raw.transitions.len());
    for (i, rt) in raw.transitions.iter().enumerate() {
        if !all_keys.contains(&rt.on.element) {
            return Err(invalid(
                path,
                format!("transition {i} references undeclared element '{}'", rt.on.element),
            ));
        }
        let on = match rt.on.action.as_str() {
            "click" => ActionPattern::Click {
                element: rt.on.element.clone(),
            },
            "type" => {
                if !textbox_keys.contains(&rt.on.element) {
                    return Err(invalid(
                        path,
                        format!("transition {i} types into non-Textbox element '{}'", rt.on.element),
                    ));
                }
                ActionPattern::Type {
                    element: rt.on.element.clone(),
                }
            }
            other => {
                return Err(invalid(path, format!("transition {i} has unknown action '{other}'")))
            }
        };
        let when = parse_conditions(&rt.when, path)?;
        check_vars(&when, &format!("transition {i} guard"))?;
        let mut effects = Vec::with_capacity(rt.effects.len());
        for (op, var, value) in &rt.effects {
            if op != "set" {
                return Err(invalid(path, format!("transition {i} has unknown effect op '{op}'")));
            }
            if !declared.contains(var.as_str()) {
                return Err(invalid(
                    path,
                    format!("transition {i} sets undeclared variable '{var}'"),
                ));
            }
            for v in template_vars(value) {
                if v != "text" && !declared.contains(v.as_str()) {
                    return Err(invalid(
                        path,
                        format!("transition {i} effect references undeclared variable '{v}'"),
                    ));
                }
            }
            effects.push(Effect {
                var: var.clone(),
                value_template: value.clone(),
            });
        }
        transition_rules.push(TransitionRule { on, when, effects });
    }

    let app = AppSpec {
        app_name: raw.app,
        screens,
        transition_rules,
        initial_state: raw.initial,
        content_height: raw.content_height,
    };

    // Exactly one screen guard must hold on the initial state.
    let mut active = None;
    for s in &app.screens {
        if eval_conditions(&s.when, &app.initial_state, None)? {
            if let Some(first) = active {
                return Err(EnvError::AmbiguousScreen {
                    first,
                    second: s.name.clone(),
                });
            }
            active = Some(s.name.clone());
        }
    }
    if active.is_none() {
        return Err(invalid(path, "no screen guard matches the initial state"));
    }
    Ok(app)
}

pub fn parse_task_instance(text: &str, path: &str) -> Result<TaskInstance, EnvError> {
    let raw: RawTask = parse_json(text, path)?;
    if raw.format_version != FORMAT_VERSION {
        return Err(invalid(
            path,
            format!("unsupported format_version {}", raw.format_version),
        ));
    }
    if raw.task_id.is_empty() || raw.app.is_empty() {
        return Err(invalid(path, "task_id and app must be non-empty"));
    }
    let mut names = BTreeSet::new();
    for (name, value) in &raw.slots {
        if name.is_empty() || value.is_empty() {
            return Err(invalid(path, "slot names and values must be non-empty"));
        }
        if !names.insert(name.clone()) {
            return Err(invalid(path, format!("duplicate slot name '{name}'")));
        }
    }
    let goal_vars = template_vars(&raw.goal_template);
    for v in &goal_vars {
        if !names.contains(v) {
            return Err(invalid(path, format!("goal references undeclared slot '{v}'")));
        }
    }
    for name in &names {
        if !goal_vars.contains(name) {
            return Err(invalid(path, format!("slot '{name}' does not appear in the goal")));
        }
    }
    if raw.success.is_empty() {
        return Err(invalid(path, "success predicates must be non-empty"));
    }
    let success_predicates = parse_conditions(&raw.success, path)?;
    for p in &success_predicates {
        for v in template_vars(&p.value) {
            if !names.contains(&v) {
                return Err(invalid(
                    path,
                    format!("success predicate references undeclared slot '{v}'"),
                ));
            }
        }
    }
    let goal_text = substitute(&raw.goal_template, &|name| {
        raw.slots
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
    })?;
    Ok(TaskInstance {
        task_id: raw.task_id,
        app_name: raw.app,
        goal_text,
        slots: raw.slots,
        success_predicates,
    })
}

pub fn load_app_spec(path: &Path) -> Result<AppSpec, EnvError> {
    let label = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| EnvError::Validation {
        path: label.clone(),
        message: format!("cannot read file: {e}"),
    })?;
    parse_app_spec(&text, &label)
}

pub fn load_task_instance(path: &Path) -> Result<TaskInstance, EnvError> {
    let label = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| EnvError::Validation {
        path: label.clone(),
        message: format!("cannot read file: {e}"),
    })?;
    parse_task_instance(&text, &label)
}
