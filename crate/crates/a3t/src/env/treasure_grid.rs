//! TreasureGrid: a single-room household text world with binary rewards.
//!
//! A layout scatters objects over named receptacles, some of which start
//! closed. The goal is always "put some <object type> in/on <receptacle>".
//! The reward is 1 exactly when a goal-typed object ends up at the target
//! receptacle, otherwise 0 (forced to 0 on step-budget truncation).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ActionOutcome, EnvError, EnvObservation, Environment, OracleMode, THINK_ACTION,
};
use crate::trajectory::TaskSpec;

const RECEPTACLE_TYPES: [&str; 8] = [
    "cabinet",
    "shelf",
    "table",
    "countertop",
    "box",
    "drawer",
    "desk",
    "bed",
];
const CLOSABLE_TYPES: [&str; 3] = ["cabinet", "box", "drawer"];
const OBJECT_TYPES: [&str; 8] = [
    "key", "book", "mug", "coin", "cloth", "pen", "apple", "candle",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TreasureGridConfig {
    /// Receptacles per layout (2..=8).
    pub receptacle_count: usize,
    /// Objects per layout (1..=8); one is the goal object, the rest distract.
    pub object_count: usize,
    /// Probability that a closable receptacle starts closed.
    pub closed_fraction: f64,
    /// Whether the initial observation lists visible contents and closed
    /// receptacles. Hidden-content layouts are markedly harder.
    pub reveal_initial: bool,
    /// Episode step budget; truncation forces reward 0.
    pub max_steps: u32,
}

impl Default for TreasureGridConfig {
    fn default() -> Self {
        Self {
            receptacle_count: 4,
            object_count: 3,
            closed_fraction: 0.25,
            reveal_initial: true,
            max_steps: 30,
        }
    }
}

#[derive(Debug, Clone)]
struct Receptacle {
    name: String,
    closed: bool,
}

#[derive(Debug, Clone)]
struct Object {
    name: String,
    ty: &'static str,
    at: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    receptacles: Vec<Receptacle>,
    objects: Vec<Object>,
    goal_object: usize,
    target_recep: usize,
}

impl Layout {
    fn generate(cfg: &TreasureGridConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.receptacle_count.clamp(2, RECEPTACLE_TYPES.len());
        let m = cfg.object_count.clamp(1, OBJECT_TYPES.len());

        let mut recep_types: Vec<&'static str> = RECEPTACLE_TYPES.to_vec();
        recep_types.shuffle(&mut rng);
        let receptacles: Vec<Receptacle> = recep_types[..k]
            .iter()
            .map(|ty| {
                let closable = CLOSABLE_TYPES.contains(ty);
                Receptacle {
                    name: format!("{ty} 1"),
                    closed: closable && rng.gen::<f64>() < cfg.closed_fraction,
                }
            })
            .collect();

        let mut obj_types: Vec<&'static str> = OBJECT_TYPES.to_vec();
        obj_types.shuffle(&mut rng);
        let objects: Vec<Object> = obj_types[..m]
            .iter()
            .map(|ty| Object {
                name: format!("{ty} 1"),
                ty,
                at: rng.gen_range(0..k),
            })
            .collect();

        let goal_object = rng.gen_range(0..m);
        let mut target_recep = rng.gen_range(0..k);
        while target_recep == objects[goal_object].at {
            target_recep = rng.gen_range(0..k);
        }
        Layout {
            receptacles,
            objects,
            goal_object,
            target_recep,
        }
    }

    fn goal_text(&self) -> String {
        format!(
            "put some {} in/on {}",
            self.objects[self.goal_object].ty,
            self.receptacles[self.target_recep].name
        )
    }

    fn task_type(&self) -> &'static str {
        if self.receptacles[self.objects[self.goal_object].at].closed {
            "uncover"
        } else if self.receptacles[self.target_recep].closed {
            "stash"
        } else {
            "fetch"
        }
    }

    fn recep_index(&self, name: &str) -> Option<usize> {
        self.receptacles.iter().position(|r| r.name == name)
    }

    fn objects_at(&self, recep: usize) -> Vec<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.at == recep)
            .map(|(i, _)| i)
            .collect()
    }

    fn contents_phrase(&self, recep: usize) -> String {
        let names: Vec<String> = self
            .objects_at(recep)
            .into_iter()
            .map(|i| format!("a {}", self.objects[i].name))
            .collect();
        if names.is_empty() {
            "nothing".to_string()
        } else {
            join_list(&names)
        }
    }
}

fn join_list(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        2 => format!("{} and {}", items[0], items[1]),
        _ => format!(
            "{}, and {}",
            items[..items.len() - 1].join(", "),
            items[items.len() - 1]
        ),
    }
}

/// Goal text and task type for a layout seed, used at task-generation time.
pub(super) fn describe_task(cfg: &TreasureGridConfig, seed: u64) -> (String, String) {
    let layout = Layout::generate(cfg, seed);
    (layout.goal_text(), layout.task_type().to_string())
}

#[derive(Debug, Clone)]
pub struct TreasureGrid {
    cfg: TreasureGridConfig,
    layout: Option<Layout>,
    at: Option<usize>,
    carrying: Option<usize>,
    steps_taken: u32,
    terminal: bool,
}

impl TreasureGrid {
    pub fn new(cfg: TreasureGridConfig) -> Self {
        Self {
            cfg,
            layout: None,
            at: None,
            carrying: None,
            steps_taken: 0,
            terminal: false,
        }
    }

    fn layout(&self) -> &Layout {
        self.layout.as_ref().expect("environment was reset")
    }

    fn initial_observation(&self) -> String {
        let layout = self.layout();
        let receps: Vec<String> = layout
            .receptacles
            .iter()
            .map(|r| format!("a {}", r.name))
            .collect();
        let mut text = format!(
            "Your task is to: {}. You are in the middle of a room. Looking quickly around you, you see {}.",
            layout.goal_text(),
            join_list(&receps)
        );
        if self.cfg.reveal_initial {
            for (i, r) in layout.receptacles.iter().enumerate() {
                if r.closed {
                    text.push_str(&format!(" The {} is closed.", r.name));
                } else if !layout.objects_at(i).is_empty() {
                    text.push_str(&format!(
                        " On the {}, you see {}.",
                        r.name,
                        layout.contents_phrase(i)
                    ));
                }
            }
        }
        text
    }

    /// Hand contents, spelled out so that arrive/examine observations fully
    /// describe the agent's state.
    fn inventory_phrase(&self) -> String {
        match self.carrying {
            Some(oi) => format!("You are carrying the {}.", self.layout().objects[oi].name),
            None => "You are carrying nothing.".to_string(),
        }
    }

    fn apply(&mut self, action: &str) -> (String, bool, bool) {
        // Returns (observation text, valid, success-terminal).
        if action.starts_with("think[") && action.ends_with(']') {
            return ("OK.".into(), true, false);
        }
        if let Some(name) = action.strip_prefix("go to ") {
            if let Some(idx) = self.layout().recep_index(name) {
                self.at = Some(idx);
                let r = &self.layout().receptacles[idx];
                let text = if r.closed {
                    format!(
                        "You arrive at {0}. The {0} is closed. {1}",
                        r.name,
                        self.inventory_phrase()
                    )
                } else {
                    format!(
                        "You arrive at {}. On the {}, you see {}. {}",
                        r.name,
                        r.name,
                        self.layout().contents_phrase(idx),
                        self.inventory_phrase()
                    )
                };
                return (text, true, false);
            }
        }
        if let Some(name) = action.strip_prefix("open ") {
            if let Some(idx) = self.layout().recep_index(name) {
                if self.at == Some(idx) && self.layout().receptacles[idx].closed {
                    self.layout.as_mut().unwrap().receptacles[idx].closed = false;
                    let text = format!(
                        "You open the {}. In it, you see {}.",
                        name,
                        self.layout().contents_phrase(idx)
                    );
                    return (text, true, false);
                }
            }
        }
        if let Some(name) = action.strip_prefix("examine ") {
            if let Some(idx) = self.layout().recep_index(name) {
                if self.at == Some(idx) {
                    let r = &self.layout().receptacles[idx];
                    let text = if r.closed {
                        format!("The {} is closed. {}", r.name, self.inventory_phrase())
                    } else {
                        format!(
                            "On the {}, you see {}. {}",
                            r.name,
                            self.layout().contents_phrase(idx),
                            self.inventory_phrase()
                        )
                    };
                    return (text, true, false);
                }
            }
        }
        if let Some(rest) = action.strip_prefix("take ") {
            if let Some((obj_name, recep_name)) = rest.split_once(" from ") {
                let layout = self.layout();
                if let (Some(oi), Some(ri)) = (
                    layout.objects.iter().position(|o| o.name == obj_name),
                    layout.recep_index(recep_name),
                ) {
                    let ok = self.at == Some(ri)
                        && !layout.receptacles[ri].closed
                        && layout.objects[oi].at == ri
                        && self.carrying.is_none();
                    if ok {
                        self.carrying = Some(oi);
                        // Carried objects sit off-grid until put back.
                        self.layout.as_mut().unwrap().objects[oi].at = usize::MAX;
                        return (
                            format!("You pick up the {obj_name} from the {recep_name}."),
                            true,
                            false,
                        );
                    }
                }
            }
        }
        if let Some(rest) = action.strip_prefix("put ") {
            if let Some((obj_name, recep_name)) = rest.split_once(" in/on ") {
                let layout = self.layout();
                if let (Some(oi), Some(ri)) = (
                    layout.objects.iter().position(|o| o.name == obj_name),
                    layout.recep_index(recep_name),
                ) {
                    let ok = self.carrying == Some(oi)
                        && self.at == Some(ri)
                        && !layout.receptacles[ri].closed;
                    if ok {
                        self.carrying = None;
                        self.layout.as_mut().unwrap().objects[oi].at = ri;
                        let layout = self.layout();
                        let solved = layout.objects[oi].ty
                            == layout.objects[layout.goal_object].ty
                            && ri == layout.target_recep;
                        let text = if solved {
                            format!(
                                "You put the {obj_name} in/on the {recep_name}. Task accomplished."
                            )
                        } else {
                            format!("You put the {obj_name} in/on the {recep_name}.")
                        };
                        return (text, true, solved);
                    }
                }
            }
        }
        ("Nothing happens.".into(), false, false)
    }
}

impl Environment for TreasureGrid {
    fn reset(&mut self, task: &TaskSpec, layout_seed: u64) -> Result<EnvObservation, EnvError> {
        if task.env_id != "treasure_grid" {
            return Err(EnvError::TaskMismatch {
                task_id: task.task_id.clone(),
                env_id: task.env_id.clone(),
            });
        }
        let layout = Layout::generate(&self.cfg, layout_seed);
        if layout.goal_text() != task.goal_text {
            return Err(EnvError::GoalDrift {
                task_id: task.task_id.clone(),
            });
        }
        self.layout = Some(layout);
        self.at = None;
        self.carrying = None;
        self.steps_taken = 0;
        self.terminal = false;
        Ok(EnvObservation::ongoing(self.initial_observation()))
    }

    fn step(&mut self, action_text: &str) -> Result<ActionOutcome, EnvError> {
        if self.layout.is_none() {
            return Err(EnvError::NotReset);
        }
        if self.terminal {
            return Err(EnvError::EpisodeOver);
        }
        self.steps_taken += 1;
        let (text, valid, solved) = self.apply(action_text);
        if solved {
            self.terminal = true;
            return Ok(ActionOutcome {
                observation: EnvObservation::terminal(text, 1.0),
                action_valid: valid,
            });
        }
        if self.steps_taken >= self.cfg.max_steps {
            self.terminal = true;
            return Ok(ActionOutcome {
                observation: EnvObservation::terminal("Time is up.", 0.0),
                action_valid: valid,
            });
        }
        Ok(ActionOutcome {
            observation: EnvObservation::ongoing(text),
            action_valid: valid,
        })
    }

    fn action_space(&self) -> Vec<String> {
        if self.terminal || self.layout.is_none() {
            return Vec::new();
        }
        let layout = self.layout();
        let mut actions = Vec::new();
        for r in &layout.receptacles {
            actions.push(format!("go to {}", r.name));
        }
        if let Some(idx) = self.at {
            let r = &layout.receptacles[idx];
            if r.closed {
                actions.push(format!("open {}", r.name));
            } else {
                actions.push(format!("examine {}", r.name));
                if self.carrying.is_none() {
                    for oi in layout.objects_at(idx) {
                        actions.push(format!(
                            "take {} from {}",
                            layout.objects[oi].name, r.name
                        ));
                    }
                }
                if let Some(ci) = self.carrying {
                    actions.push(format!(
                        "put {} in/on {}",
                        layout.objects[ci].name, r.name
                    ));
                }
            }
        }
        actions.push(THINK_ACTION.to_string());
        actions
    }

    fn is_terminal(&self) -> bool {
        self.terminal
    }

    fn oracle_action(&self, mode: OracleMode) -> Option<String> {
        if self.terminal || self.layout.is_none() {
            return None;
        }
        let layout = self.layout();
        let target_obj = match mode {
            OracleMode::Perfect => layout.goal_object,
            OracleMode::Decoy => {
                match (0..layout.objects.len()).find(|&i| {
                    layout.objects[i].ty != layout.objects[layout.goal_object].ty
                }) {
                    Some(i) => i,
                    None => return Some(THINK_ACTION.to_string()),
                }
            }
        };
        let obj = &layout.objects[target_obj];
        if self.carrying == Some(target_obj) {
            let target = &layout.receptacles[layout.target_recep];
            if self.at == Some(layout.target_recep) {
                if target.closed {
                    return Some(format!("open {}", target.name));
                }
                return Some(format!("put {} in/on {}", obj.name, target.name));
            }
            return Some(format!("go to {}", target.name));
        }
        if obj.at != usize::MAX {
            let holder = &layout.receptacles[obj.at];
            if self.at == Some(obj.at) {
                if holder.closed {
                    return Some(format!("open {}", holder.name));
                }
                return Some(format!("take {} from {}", obj.name, holder.name));
            }
            return Some(format!("go to {}", holder.name));
        }
        // Decoy already delivered its object; stall until truncation.
        Some(THINK_ACTION.to_string())
    }
}

/// Every ground action any layout under this configuration can offer.
pub(super) fn action_namespace(_cfg: &TreasureGridConfig) -> Vec<String> {
    let mut actions = Vec::new();
    for rt in RECEPTACLE_TYPES {
        actions.push(format!("go to {rt} 1"));
        actions.push(format!("open {rt} 1"));
        actions.push(format!("examine {rt} 1"));
        for ot in OBJECT_TYPES {
            actions.push(format!("take {ot} 1 from {rt} 1"));
            actions.push(format!("put {ot} 1 in/on {rt} 1"));
        }
    }
    actions
}

/// Every observation template the emitter can produce.
pub(super) fn observation_namespace(_cfg: &TreasureGridConfig) -> Vec<String> {
    let mut obs = vec![
        "obs::task_start".to_string(),
        "obs::done".to_string(),
        "obs::nothing".to_string(),
    ];
    for rt in RECEPTACLE_TYPES {
        obs.push(format!("obs::at {rt} 1"));
        obs.push(format!("obs::closed {rt} 1"));
        obs.push(format!("obs::open {rt} 1"));
        obs.push(format!("obs::look {rt} 1"));
        obs.push(format!("obs::put {rt} 1"));
    }
    for ot in OBJECT_TYPES {
        obs.push(format!("obs::took {ot} 1"));
    }
    obs
}

/// Map an emitted observation back onto its template token.
pub(super) fn observation_token(text: &str) -> Option<String> {
    if text.starts_with("Your task is to:") {
        return Some("obs::task_start".into());
    }
    if text == "Nothing happens." {
        return Some("obs::nothing".into());
    }
    if let Some(rest) = text.strip_prefix("You arrive at ") {
        let name = rest.split('.').next()?;
        if text.contains("is closed.") {
            return Some(format!("obs::closed {name}"));
        }
        return Some(format!("obs::at {name}"));
    }
    if let Some(rest) = text.strip_prefix("The ") {
        if text.contains("is closed.") {
            let name = rest.split(" is closed").next()?;
            return Some(format!("obs::closed {name}"));
        }
    }
    if let Some(rest) = text.strip_prefix("You open the ") {
        let name = rest.split('.').next()?;
        return Some(format!("obs::open {name}"));
    }
    if let Some(rest) = text.strip_prefix("On the ") {
        let name = rest.split(',').next()?;
        return Some(format!("obs::look {name}"));
    }
    if text.starts_with("You pick up the ") {
        let rest = text.strip_prefix("You pick up the ")?;
        let name = rest.split(" from").next()?;
        return Some(format!("obs::took {name}"));
    }
    if text.starts_with("You put the ") {
        if text.contains("Task accomplished.") {
            return Some("obs::done".into());
        }
        let name = text.split(" in/on the ").nth(1)?.split('.').next()?;
        return Some(format!("obs::put {name}"));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_tasks, EnvConfig};
    use crate::trajectory::Split;

    fn fixture() -> (TreasureGrid, TaskSpec, u64) {
        let cfg = TreasureGridConfig {
            receptacle_count: 2,
            object_count: 1,
            closed_fraction: 0.0,
            reveal_initial: true,
            max_steps: 30,
        };
        let tasks = generate_tasks(&EnvConfig::TreasureGrid(cfg.clone()), Split::Train, 1, 7);
        let env = TreasureGrid::new(cfg);
        (env, tasks[0].spec.clone(), tasks[0].layout_seed)
    }

    #[test]
    fn reset_is_deterministic() {
        let (mut env, task, seed) = fixture();
        let a = env.reset(&task, seed).unwrap();
        let b = env.reset(&task, seed).unwrap();
        assert_eq!(a, b);
        assert!(a.text.starts_with("Your task is to:"));
        assert!(!a.terminal);
    }

    #[test]
    fn two_room_start_lists_both_go_actions() {
        let (mut env, task, seed) = fixture();
        env.reset(&task, seed).unwrap();
        let space = env.action_space();
        let gos: Vec<_> = space.iter().filter(|a| a.starts_with("go to ")).collect();
        assert_eq!(gos.len(), 2);
        assert!(space.contains(&THINK_ACTION.to_string()));
    }

    #[test]
    fn oracle_solves_and_reward_is_binary() {
        let (mut env, task, seed) = fixture();
        env.reset(&task, seed).unwrap();
        let mut reward = None;
        for _ in 0..20 {
            let action = env.oracle_action(OracleMode::Perfect).unwrap();
            let out = env.step(&action).unwrap();
            assert!(out.action_valid, "oracle action {action} was invalid");
            if out.observation.terminal {
                reward = out.observation.reward_if_terminal;
                break;
            }
        }
        assert_eq!(reward, Some(1.0));
        assert!(env.action_space().is_empty());
        assert!(matches!(env.step("think[x]"), Err(EnvError::EpisodeOver)));
    }

    #[test]
    fn decoy_oracle_fails_with_zero_reward() {
        let cfg = TreasureGridConfig {
            receptacle_count: 3,
            object_count: 2,
            closed_fraction: 0.0,
            reveal_initial: true,
            max_steps: 12,
        };
        let tasks = generate_tasks(&EnvConfig::TreasureGrid(cfg.clone()), Split::Train, 1, 3);
        let mut env = TreasureGrid::new(cfg);
        env.reset(&tasks[0].spec, tasks[0].layout_seed).unwrap();
        let mut reward = None;
        for _ in 0..20 {
            let action = env.oracle_action(OracleMode::Decoy).unwrap();
            let out = env.step(&action).unwrap();
            if out.observation.terminal {
                reward = out.observation.reward_if_terminal;
                break;
            }
        }
        assert_eq!(reward, Some(0.0));
    }

    #[test]
    fn listed_actions_are_valid_and_others_are_not() {
        let (mut env, task, seed) = fixture();
        env.reset(&task, seed).unwrap();
        // Walk a few states, checking the validity contract at each.
        for _ in 0..4 {
            for action in env.action_space() {
                let mut probe = env.clone();
                let out = probe.step(&action).unwrap();
                assert!(out.action_valid, "listed action {action} was invalid");
            }
            let mut probe = env.clone();
            let out = probe.step("open the pod bay doors").unwrap();
            assert!(!out.action_valid);
            assert_eq!(out.observation.text, "Nothing happens.");
            assert!(!out.observation.terminal);

            let next = env.oracle_action(OracleMode::Perfect).unwrap();
            if env.step(&next).unwrap().observation.terminal {
                break;
            }
        }
    }

    #[test]
    fn truncation_forces_zero_reward() {
        let cfg = TreasureGridConfig {
            max_steps: 3,
            ..TreasureGridConfig::default()
        };
        let tasks = generate_tasks(&EnvConfig::TreasureGrid(cfg.clone()), Split::Train, 1, 11);
        let mut env = TreasureGrid::new(cfg);
        env.reset(&tasks[0].spec, tasks[0].layout_seed).unwrap();
        let mut last = None;
        for _ in 0..3 {
            last = Some(env.step(THINK_ACTION).unwrap());
        }
        let out = last.unwrap();
        assert!(out.observation.terminal);
        assert_eq!(out.observation.reward_if_terminal, Some(0.0));
        assert_eq!(out.observation.text, "Time is up.");
    }

    #[test]
    fn emitted_observations_all_tokenize() {
        let (mut env, task, seed) = fixture();
        let first = env.reset(&task, seed).unwrap();
        assert_eq!(
            observation_token(&first.text).as_deref(),
            Some("obs::task_start")
        );
        loop {
            let action = env.oracle_action(OracleMode::Perfect).unwrap();
            let out = env.step(&action).unwrap();
            let tok = super::super::SegmentTokenizer::for_config(&EnvConfig::TreasureGrid(
                TreasureGridConfig::default(),
            ))
            .token_for(crate::trajectory::SegmentKind::Observation, &out.observation.text);
            assert!(tok.is_some(), "no token for: {}", out.observation.text);
            if out.observation.terminal {
                break;
            }
        }
    }
}
