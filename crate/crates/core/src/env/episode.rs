//! Episode lifecycle: reset, step, termination, success checking.

use super::*;
use crate::rng::split_seed;

/// A running episode. Owns cloned app/task definitions so trajectories can
/// outlive the suite that spawned them.
#[derive(Debug, Clone)]
pub struct Episode {
    app: AppSpec,
    task: TaskInstance,
    seed: u64,
    hidden: BTreeMap<String, String>,
    viewport_offset: i64,
    step_index: usize,
    t_max: usize,
    done: bool,
    finished_explicitly: bool,
    last_obs: Observation,
}

impl Episode {
    /// Resets the environment to the app's initial state and produces o_0.
    pub fn new(
        app: &AppSpec,
        task: &TaskInstance,
        seed: u64,
        t_max: usize,
    ) -> Result<Self, EnvError> {
        if app.app_name != task.app_name {
            return Err(EnvError::AppMismatch {
                task: task.task_id.clone(),
                task_app: task.app_name.clone(),
                app: app.app_name.clone(),
            });
        }
        for p in &task.success_predicates {
            if !app.initial_state.contains_key(&p.var) {
                return Err(EnvError::Validation {
                    path: task.task_id.clone(),
                    message: format!("success predicate references unknown variable '{}'", p.var),
                });
            }
        }
        let hidden = app.initial_state.clone();
        let last_obs = observe(app, task, &hidden, 0, seed, 0)?;
        Ok(Self {
            app: app.clone(),
            task: task.clone(),
            seed,
            hidden,
            viewport_offset: 0,
            step_index: 0,
            t_max,
            done: false,
            finished_explicitly: false,
            last_obs,
        })
    }

    pub fn observation(&self) -> &Observation {
        &self.last_obs
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn task(&self) -> &TaskInstance {
        &self.task
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hidden_state(&self) -> &BTreeMap<String, String> {
        &self.hidden
    }

    /// True when the episode ended because the agent chose FINISH rather
    /// than running out of steps.
    pub fn finished_explicitly(&self) -> bool {
        self.finished_explicitly
    }

    /// Executes one action. Element references must point into the last
    /// observation; well-formed actions with no matching transition rule are
    /// no-ops that still consume a step.
    pub fn step(&mut self, action: &Action) -> Result<(Observation, bool), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        match action {
            Action::Finish => {
                self.done = true;
                self.finished_explicitly = true;
            }
            Action::Scroll { direction, amount } => {
                if *amount == 0 {
                    return Err(EnvError::InvalidAction("SCROLL amount must be >= 1".into()));
                }
                let max_offset = (self.app.content_height - SCREEN_SIZE).max(0);
                let delta = SCROLL_STRIDE * i64::from(*amount);
                self.viewport_offset = match direction {
                    ScrollDirection::Down => (self.viewport_offset + delta).min(max_offset),
                    ScrollDirection::Up => (self.viewport_offset - delta).max(0),
                };
            }
            Action::Click { elem_id } => {
                let key = self.resolve(*elem_id)?;
                self.fire_transition(&key, None)?;
            }
            Action::Type { elem_id, text } => {
                if text.is_empty() {
                    return Err(EnvError::InvalidAction("TYPE text must be non-empty".into()));
                }
                let key = self.resolve(*elem_id)?;
                self.fire_transition(&key, Some(text))?;
            }
        }
        self.step_index += 1;
        if self.step_index >= self.t_max {
            self.done = true;
        }
        let obs = observe(
            &self.app,
            &self.task,
            &self.hidden,
            self.viewport_offset,
            self.seed,
            self.step_index,
        )?;
        self.last_obs = obs.clone();
        Ok((obs, self.done))
    }

    /// Success of the finished episode: every task predicate holds on the
    /// final hidden state.
    pub fn check_success(&self) -> Result<bool, EnvError> {
        if !self.done {
            return Err(EnvError::EpisodeNotFinished);
        }
        success_on_state(&self.task, &self.hidden)
    }

    fn resolve(&self, elem_id: usize) -> Result<String, EnvError> {
        self.last_obs
            .element(elem_id)
            .map(|e| e.feature_key.clone())
            .ok_or(EnvError::InvalidElementReference { elem_id })
    }

    fn fire_transition(&mut self, key: &str, typed: Option<&str>) -> Result<(), EnvError> {
        if let Some(next) = transition_once(&self.app, &self.hidden, key, typed)? {
            self.hidden = next;
        }
        Ok(())
    }
}

/// Applies the first transition rule matching (action kind, element key,
/// guard) and returns the successor state, or `None` when no rule matches
/// (a no-op). `typed` carries the TYPE argument for `{text}` substitution.
/// Effects read the pre-transition state, then commit atomically.
pub(crate) fn transition_once(
    app: &AppSpec,
    state: &BTreeMap<String, String>,
    key: &str,
    typed: Option<&str>,
) -> Result<Option<BTreeMap<String, String>>, EnvError> {
    for rule in &app.transition_rules {
        let pattern_hit = match (&rule.on, typed) {
            (ActionPattern::Click { element }, None) => element == key,
            (ActionPattern::Type { element }, Some(_)) => element == key,
            _ => false,
        };
        if !pattern_hit {
            continue;
        }
        if !eval_conditions(&rule.when, state, None)? {
            continue;
        }
        let mut next = state.clone();
        for eff in &rule.effects {
            let value = substitute(&eff.value_template, &|name| {
                if name == "text" {
                    typed.map(str::to_string)
                } else {
                    state.get(name).cloned()
                }
            })?;
            next.insert(eff.var.clone(), value);
        }
        return Ok(Some(next));
    }
    Ok(None)
}

/// The unique screen whose guard holds on `state`.
pub(crate) fn active_screen<'a>(
    app: &'a AppSpec,
    state: &BTreeMap<String, String>,
) -> Result<&'a ScreenDef, EnvError> {
    let mut found: Option<&ScreenDef> = None;
    for s in &app.screens {
        if eval_conditions(&s.when, state, None)? {
            if let Some(first) = found {
                return Err(EnvError::AmbiguousScreen {
                    first: first.name.clone(),
                    second: s.name.clone(),
                });
            }
            found = Some(s);
        }
    }
    found.ok_or_else(|| EnvError::NoActiveScreen { state: state.clone() })
}

/// Seeded cosmetic y-offset, constant for a whole screen so that reading
/// order and the reachable state graph never depend on the seed.
fn jitter_offset(seed: u64, app_name: &str, screen_name: &str) -> i64 {
    let tag = format!("jitter:{app_name}:{screen_name}");
    let raw = split_seed(seed, &tag, 0);
    (raw % (2 * JITTER_RANGE as u64 + 1)) as i64 - JITTER_RANGE
}

/// Renders the agent-visible element list for a hidden state and viewport.
///
/// Visibility and reading order are computed on unjittered content
/// coordinates; the jitter offset only moves the displayed boxes, clipped
/// back into the screen (falling back to the unjittered box when jitter
/// would push an element fully outside).
pub(crate) fn observe(
    app: &AppSpec,
    task: &TaskInstance,
    state: &BTreeMap<String, String>,
    viewport_offset: i64,
    seed: u64,
    step_index: usize,
) -> Result<Observation, EnvError> {
    let screen = active_screen(app, state)?;
    let dy = jitter_offset(seed, &app.app_name, &screen.name);

    let mut rows: Vec<(i64, i64, &ElementDef)> = Vec::new();
    for def in &screen.elements {
        if !eval_conditions(&def.visible_when, state, None)? {
            continue;
        }
        let b = def.bbox;
        let visible = b.y_min < viewport_offset + SCREEN_SIZE && b.y_max > viewport_offset;
        if visible {
            rows.push((b.y_min, b.x_min, def));
        }
    }
    rows.sort_by(|a, b| (a.0, a.1, &a.2.key).cmp(&(b.0, b.1, &b.2.key)));

    let clip_y = |y0: i64, y1: i64| -> Option<(i64, i64)> {
        if y1 <= 0 || y0 >= SCREEN_SIZE {
            return None;
        }
        Some((y0.max(0), y1.min(SCREEN_SIZE)))
    };

    let mut visible_elements = Vec::with_capacity(rows.len());
    for (idx, (_, _, def)) in rows.iter().enumerate() {
        let text = substitute(&def.text_template, &|name| state.get(name).cloned())?;
        let base_y0 = def.bbox.y_min - viewport_offset;
        let base_y1 = def.bbox.y_max - viewport_offset;
        let (y0, y1) = clip_y(base_y0 + dy, base_y1 + dy)
            .or_else(|| clip_y(base_y0, base_y1))
            .expect("visible element clips to a non-empty screen box");
        visible_elements.push(UIElement {
            elem_id: idx + 1,
            bbox: BBox::new(def.bbox.x_min, y0, def.bbox.x_max, y1),
            elem_type: def.elem_type,
            text,
            feature_key: def.key.clone(),
        });
    }

    Ok(Observation {
        visible_elements,
        goal_text: task.goal_text.clone(),
        step_index,
        viewport_offset,
        content_height: app.content_height,
    })
}
