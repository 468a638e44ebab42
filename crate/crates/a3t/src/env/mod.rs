//! Environment contract plus the two bundled desk-scale reference
//! environments: [`TreasureGrid`] (binary reward, household text world) and
//! [`MiniShop`] (graded reward, shopping world).
//!
//! Environments are single-threaded deterministic state machines: the full
//! observation/reward sequence is a pure function of (task, seed, action
//! sequence). Concurrency comes from running independent instances per task.

mod mini_shop;
mod treasure_grid;

pub use mini_shop::{Catalog, MiniShop, MiniShopConfig, Product};
pub use treasure_grid::{TreasureGrid, TreasureGridConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Split, TaskSpec};
use crate::util::stable_seed;

/// Canonical think action. Accepted by both environments: it returns "OK.",
/// never changes state, and counts as a valid action.
pub const THINK_ACTION: &str = "think[I consider what to do next.]";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment id: {0}")]
    UnknownEnv(String),
    #[error("task {task_id} does not belong to environment {env_id}")]
    TaskMismatch { task_id: String, env_id: String },
    #[error("task {task_id} does not match its layout seed (goal drift)")]
    GoalDrift { task_id: String },
    #[error("episode is already terminal; reset before stepping")]
    EpisodeOver,
    #[error("environment was stepped before reset")]
    NotReset,
}

/// One environment emission. The reward is present exactly when the episode
/// terminated on this emission.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvObservation {
    pub text: String,
    pub terminal: bool,
    pub reward_if_terminal: Option<f64>,
}

impl EnvObservation {
    pub fn ongoing(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            terminal: false,
            reward_if_terminal: None,
        }
    }

    pub fn terminal(text: impl Into<String>, reward: f64) -> Self {
        Self {
            text: text.into(),
            terminal: true,
            reward_if_terminal: Some(reward),
        }
    }
}

/// Result of executing one action.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionOutcome {
    pub observation: EnvObservation,
    pub action_valid: bool,
}

/// Scripted-prompting oracle behavior, used to build the bootstrap backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Solves the task outright.
    Perfect,
    /// Pursues a plausible but wrong goal (wrong object / hasty purchase).
    Decoy,
}

pub trait Environment: Send {
    /// Start an episode for `task`. Layout and dynamics are fully determined
    /// by `layout_seed`; the same (task, seed) always yields the same episode.
    fn reset(&mut self, task: &TaskSpec, layout_seed: u64) -> Result<EnvObservation, EnvError>;

    /// Execute one action. Unparseable or inapplicable actions yield an
    /// invalid-action observation and do not change state.
    fn step(&mut self, action_text: &str) -> Result<ActionOutcome, EnvError>;

    /// All currently valid action strings. Empty exactly when terminal.
    fn action_space(&self) -> Vec<String>;

    fn is_terminal(&self) -> bool;

    /// Next action a scripted prompting agent would take from the current
    /// state, or `None` when terminal.
    fn oracle_action(&self, mode: OracleMode) -> Option<String>;
}

/// Generator settings for one environment family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "env_id", rename_all = "snake_case")]
pub enum EnvConfig {
    TreasureGrid(TreasureGridConfig),
    MiniShop(MiniShopConfig),
}

impl EnvConfig {
    pub fn env_id(&self) -> &'static str {
        match self {
            EnvConfig::TreasureGrid(_) => "treasure_grid",
            EnvConfig::MiniShop(_) => "mini_shop",
        }
    }

    pub fn max_steps(&self) -> u32 {
        match self {
            EnvConfig::TreasureGrid(c) => c.max_steps,
            EnvConfig::MiniShop(c) => c.max_steps,
        }
    }
}

/// A task together with the seed that regenerates its layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeededTask {
    pub spec: TaskSpec,
    pub layout_seed: u64,
}

/// Build a fresh environment instance for `env_id`.
pub fn make_env(env_id: &str, cfg: &EnvConfig) -> Result<Box<dyn Environment>, EnvError> {
    if env_id != cfg.env_id() {
        return Err(EnvError::UnknownEnv(env_id.to_string()));
    }
    Ok(match cfg {
        EnvConfig::TreasureGrid(c) => Box::new(TreasureGrid::new(c.clone())),
        EnvConfig::MiniShop(c) => Box::new(MiniShop::new(c.clone())),
    })
}

/// Reset a fresh instance for (env_id, task, seed). Convenience wrapper over
/// the factory; unknown env ids are a configuration error.
pub fn env_reset(
    env_id: &str,
    cfg: &EnvConfig,
    task: &TaskSpec,
    seed: u64,
) -> Result<(Box<dyn Environment>, EnvObservation), EnvError> {
    let mut env = make_env(env_id, cfg)?;
    let obs = env.reset(task, seed)?;
    Ok((env, obs))
}

/// Generate `count` tasks for a split. Layout seeds derive from `split_seed`
/// and the task index, so the same inputs always produce the same tasks.
pub fn generate_tasks(
    cfg: &EnvConfig,
    split: Split,
    count: usize,
    split_seed: u64,
) -> Vec<SeededTask> {
    (0..count)
        .map(|idx| {
            let layout_seed = stable_seed(&[
                "layout",
                cfg.env_id(),
                split.as_str(),
                &split_seed.to_string(),
                &idx.to_string(),
            ]);
            let task_id = format!("{}-{}-{:03}", cfg.env_id(), split.as_str(), idx);
            let (goal_text, task_type) = match cfg {
                EnvConfig::TreasureGrid(c) => treasure_grid::describe_task(c, layout_seed),
                EnvConfig::MiniShop(c) => mini_shop::describe_task(c, layout_seed),
            };
            SeededTask {
                spec: TaskSpec {
                    task_id,
                    env_id: cfg.env_id().to_string(),
                    goal_text,
                    task_type,
                    split,
                },
                layout_seed,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Template vocabulary and segment tokenization
// ---------------------------------------------------------------------------

use crate::trajectory::SegmentKind;

/// Prefix conventions for template tokens.
pub const ACT_PREFIX: &str = "act::";
pub const RSN_PREFIX: &str = "rsn::";
pub const OBS_PREFIX: &str = "obs::";
/// Catch-all for action texts outside the environment grammar.
pub const UNKNOWN_ACTION_TOKEN: &str = "act::unknown";
/// Catch-all for reasoning texts that did not parse.
pub const UNPARSED_REASONING_TOKEN: &str = "rsn::unparsed";
pub const THINK_ACTION_TOKEN: &str = "act::think";
pub const THINK_REASONING_TOKEN: &str = "rsn::think";
/// All search queries collapse to one template token; the surface query is
/// derived from the task goal at generation time.
pub const SEARCH_ACTION_TOKEN: &str = "act::search";
pub const SEARCH_REASONING_TOKEN: &str = "rsn::search";

/// Maps rendered segment texts onto template tokens. Action and reasoning
/// normalization is shared; observation normalization is environment-specific.
#[derive(Debug, Clone)]
pub struct SegmentTokenizer {
    env: TokenizerEnv,
}

#[derive(Debug, Clone)]
enum TokenizerEnv {
    TreasureGrid,
    MiniShop,
}

impl SegmentTokenizer {
    pub fn for_config(cfg: &EnvConfig) -> Self {
        let env = match cfg {
            EnvConfig::TreasureGrid(_) => TokenizerEnv::TreasureGrid,
            EnvConfig::MiniShop(_) => TokenizerEnv::MiniShop,
        };
        Self { env }
    }

    /// Normalize a segment text into its template token. `None` means the
    /// text is outside every known template.
    pub fn token_for(&self, kind: SegmentKind, text: &str) -> Option<String> {
        match kind {
            SegmentKind::Action => Some(action_token(text)),
            SegmentKind::Reasoning => Some(reasoning_token(text)),
            SegmentKind::Observation => {
                if let Some(shared) = shared_observation_token(text) {
                    return Some(shared);
                }
                match self.env {
                    TokenizerEnv::TreasureGrid => treasure_grid::observation_token(text),
                    TokenizerEnv::MiniShop => mini_shop::observation_token(text),
                }
            }
        }
    }
}

/// Action text -> token. Think and search forms collapse to one token each;
/// everything else keys on the exact action string.
pub fn action_token(text: &str) -> String {
    if text.starts_with("think[") {
        THINK_ACTION_TOKEN.to_string()
    } else if text.starts_with("search[") {
        SEARCH_ACTION_TOKEN.to_string()
    } else {
        format!("{ACT_PREFIX}{text}")
    }
}

/// Surface text of an action token. Search tokens have no fixed surface (the
/// query is goal-dependent) and return `None` here.
pub fn action_surface(token: &str) -> Option<String> {
    if token == THINK_ACTION_TOKEN {
        Some(THINK_ACTION.to_string())
    } else if token == SEARCH_ACTION_TOKEN {
        None
    } else {
        token.strip_prefix(ACT_PREFIX).map(str::to_string)
    }
}

/// Derive a search query from a goal phrase: the product description between
/// the leading request formula and the option/price clauses, or the first
/// content words as a fallback.
pub fn canonical_query(goal: &str) -> String {
    let s = goal.strip_prefix("i need a ").unwrap_or(goal);
    let end = s
        .find(" with ")
        .or_else(|| s.find(", and price"))
        .unwrap_or(s.len());
    let head = s[..end].trim();
    if !head.is_empty() {
        return head.to_string();
    }
    goal.split_whitespace().take(4).collect::<Vec<_>>().join(" ")
}

/// Template rationale for an action. The goal phrase keeps the text grounded
/// in the task; tokenization keys only on the action.
pub fn rationale_text(action: &str, goal: &str) -> String {
    format!("I should {action} because the goal is: {goal}")
}

/// Reasoning text -> token. Rationales of the `I should <action> because ...`
/// family key on the embedded action; anything else is the unparsed token.
pub fn reasoning_token(text: &str) -> String {
    if let Some(rest) = text.strip_prefix("I should ") {
        if let Some(pos) = rest.find(" because") {
            let action = &rest[..pos];
            return if action.starts_with("think[") {
                THINK_REASONING_TOKEN.to_string()
            } else if action.starts_with("search[") {
                SEARCH_REASONING_TOKEN.to_string()
            } else {
                format!("{RSN_PREFIX}{action}")
            };
        }
    }
    UNPARSED_REASONING_TOKEN.to_string()
}

fn shared_observation_token(text: &str) -> Option<String> {
    match text {
        "OK." => Some("obs::ok".into()),
        "Time is up." => Some("obs::timeout".into()),
        "Success." => Some("obs::label_success".into()),
        "Fail." => Some("obs::label_fail".into()),
        _ => None,
    }
}

fn shared_tokens() -> Vec<String> {
    vec![
        UNKNOWN_ACTION_TOKEN.into(),
        THINK_ACTION_TOKEN.into(),
        UNPARSED_REASONING_TOKEN.into(),
        THINK_REASONING_TOKEN.into(),
        "obs::ok".into(),
        "obs::timeout".into(),
        "obs::label_success".into(),
        "obs::label_fail".into(),
    ]
}

/// Enumerate the full template vocabulary for a generator configuration:
/// every action string the environment grammar can produce, the matching
/// rationale templates, and the observation templates.
pub fn build_vocabulary(cfg: &EnvConfig, _tasks: &[SeededTask]) -> Vec<String> {
    let mut tokens = shared_tokens();
    let actions = match cfg {
        EnvConfig::TreasureGrid(c) => treasure_grid::action_namespace(c),
        EnvConfig::MiniShop(c) => mini_shop::action_namespace(c),
    };
    for a in &actions {
        tokens.push(format!("{ACT_PREFIX}{a}"));
        tokens.push(format!("{RSN_PREFIX}{a}"));
    }
    if matches!(cfg, EnvConfig::MiniShop(_)) {
        tokens.push(SEARCH_ACTION_TOKEN.to_string());
        tokens.push(SEARCH_REASONING_TOKEN.to_string());
    }
    let obs = match cfg {
        EnvConfig::TreasureGrid(c) => treasure_grid::observation_namespace(c),
        EnvConfig::MiniShop(c) => mini_shop::observation_namespace(c),
    };
    tokens.extend(obs);
    tokens.sort();
    tokens.dedup();
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reasoning_token_extracts_action() {
        let goal = "put some key in/on table 1";
        let text = rationale_text("take key 1 from box 1", goal);
        assert_eq!(reasoning_token(&text), "rsn::take key 1 from box 1");
        assert_eq!(reasoning_token("free-form musing"), UNPARSED_REASONING_TOKEN);
        let think = rationale_text(THINK_ACTION, goal);
        assert_eq!(reasoning_token(&think), THINK_REASONING_TOKEN);
    }

    #[test]
    fn action_token_collapses_think_forms() {
        assert_eq!(action_token("think[anything at all]"), THINK_ACTION_TOKEN);
        assert_eq!(action_token("go to shelf 1"), "act::go to shelf 1");
        assert_eq!(
            action_surface("act::go to shelf 1").unwrap(),
            "go to shelf 1"
        );
        assert_eq!(action_surface(THINK_ACTION_TOKEN).unwrap(), THINK_ACTION);
    }

    #[test]
    fn unknown_env_id_is_rejected() {
        let cfg = EnvConfig::TreasureGrid(TreasureGridConfig::default());
        assert!(matches!(
            make_env("no_such_env", &cfg),
            Err(EnvError::UnknownEnv(_))
        ));
    }

    #[test]
    fn task_generation_is_deterministic() {
        let cfg = EnvConfig::TreasureGrid(TreasureGridConfig::default());
        let a = generate_tasks(&cfg, Split::Train, 5, 42);
        let b = generate_tasks(&cfg, Split::Train, 5, 42);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.spec.goal_text, y.spec.goal_text);
            assert_eq!(x.layout_seed, y.layout_seed);
        }
        let c = generate_tasks(&cfg, Split::Train, 5, 43);
        assert!(a
            .iter()
            .zip(&c)
            .any(|(x, y)| x.spec.goal_text != y.spec.goal_text));
    }
}
