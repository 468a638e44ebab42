//! The autonomous trajectory-annotation loop: policy rollouts that, with
//! probability `p` per step, swap the policy's action for a uniformly sampled
//! one, query the annotator for its rationale, and splice the pair back into
//! the reason-then-act trajectory. Failed tasks are explored under a per-task
//! budget, and the filter keeps only trainable material.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    actre_explain, react_propose, ActReContext, AgentContext, AgentError, DecodeParams,
    HistoryItem,
};
use crate::backend::Backend;
use crate::env::{make_env, EnvConfig, EnvError, SeededTask};
use crate::trajectory::{
    ActionSource, ExternalAction, Origin, Reasoning, ReasoningSource, Step, Trajectory,
    TrajectoryError,
};
use crate::util::stable_seed;

/// Stand-in reasoning recorded when a policy completion did not parse; keeps
/// the step structurally complete while staying visibly synthetic.
pub const FALLBACK_REASONING: &str = "(unparsed completion)";

#[derive(Debug, Error)]
pub enum ComposeError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("rollout for task {task_id} discarded after {steps_completed} step(s): {source}")]
    Discarded {
        task_id: String,
        steps_completed: usize,
        source: AgentError,
    },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid exploration config: {0}")]
    Config(String),
}

/// Per-task exploration budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BudgetMode {
    /// Always run exactly `count` rollouts.
    FixedCount { count: u32 },
    /// Run at least `force` rollouts, then stop at the first success or at
    /// `cap` rollouts total.
    ForceThenStop { force: u32, cap: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplorationConfig {
    /// Per-step probability of replacing the policy action with a sampled one.
    pub sample_probability: f64,
    /// Consecutive invalid policy actions that force the next step to sample.
    pub invalid_streak_threshold: u32,
    pub budget: BudgetMode,
    /// Episode step budget, forwarded to the environment.
    pub max_steps: u32,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            sample_probability: 0.5,
            invalid_streak_threshold: 3,
            budget: BudgetMode::FixedCount { count: 40 },
            max_steps: 30,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<(), ComposeError> {
        if !(0.0..=1.0).contains(&self.sample_probability) {
            return Err(ComposeError::Config(format!(
                "sample_probability {} outside [0,1]",
                self.sample_probability
            )));
        }
        if self.invalid_streak_threshold < 1 {
            return Err(ComposeError::Config(
                "invalid_streak_threshold must be at least 1".into(),
            ));
        }
        match self.budget {
            BudgetMode::FixedCount { count } if count < 1 => {
                Err(ComposeError::Config("budget count must be at least 1".into()))
            }
            BudgetMode::ForceThenStop { force, cap } if force < 1 || force > cap => Err(
                ComposeError::Config(format!("force {force} must be in 1..=cap {cap}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Backends and exemplars for one rollout campaign.
pub struct RolloutAgents<'a> {
    pub policy: &'a dyn Backend,
    pub actre: &'a dyn Backend,
    pub react_exemplar: &'a str,
    pub actre_exemplar: &'a str,
    /// Decoding temperature for exploration rollouts.
    pub explore_temperature: f64,
}

/// Deterministic per-rollout seed.
pub fn rollout_seed(run_seed: u64, round: u32, task_id: &str, rollout_index: u32) -> u64 {
    stable_seed(&[
        &run_seed.to_string(),
        "rollout",
        &round.to_string(),
        task_id,
        &rollout_index.to_string(),
    ])
}

fn reasoning_or_fallback(reasoning: String) -> String {
    if reasoning.is_empty() {
        FALLBACK_REASONING.to_string()
    } else {
        reasoning
    }
}

/// One policy-only rollout: plain reason-then-act prompting, no sampling.
/// Used for bootstrap gathering and for evaluation.
pub fn react_rollout(
    env_cfg: &EnvConfig,
    backend: &dyn Backend,
    react_exemplar: &str,
    task: &SeededTask,
    temperature: f64,
    rollout_seed: u64,
    round: u32,
    origin: Origin,
) -> Result<Trajectory, ComposeError> {
    let mut env = make_env(&task.spec.env_id, env_cfg)?;
    let mut obs = env.reset(&task.spec, task.layout_seed)?;
    let mut items: Vec<HistoryItem> = Vec::new();
    let mut steps: Vec<Step> = Vec::new();
    let reward = loop {
        let index = steps.len() as u32 + 1;
        let step_seed = stable_seed(&[&rollout_seed.to_string(), "step", &index.to_string()]);
        let ctx = AgentContext {
            exemplar: react_exemplar,
            goal: &task.spec.goal_text,
            items: &items,
            current_obs: &obs.text,
        };
        let proposal = react_propose(
            backend,
            &ctx,
            DecodeParams {
                temperature,
                seed: step_seed,
                max_tokens: 256,
            },
        )
        .map_err(|source| discard(task, steps.len(), source))?;
        let outcome = env.step(&proposal.action)?;
        let reasoning = reasoning_or_fallback(proposal.reasoning);
        steps.push(Step {
            index,
            observation: obs.text.clone(),
            reasoning: Some(Reasoning {
                text: reasoning.clone(),
                source: ReasoningSource::PolicySelf,
            }),
            action: Some(ExternalAction {
                text: proposal.action.clone(),
                source: ActionSource::PolicySelf,
                valid: outcome.action_valid,
            }),
        });
        items.push(HistoryItem {
            observation: obs.text.clone(),
            reasoning,
            action: proposal.action,
        });
        obs = outcome.observation;
        if obs.terminal {
            steps.push(Step {
                index: index + 1,
                observation: obs.text.clone(),
                reasoning: None,
                action: None,
            });
            break obs.reward_if_terminal.expect("terminal carries reward");
        }
    };
    let traj = Trajectory {
        task_id: task.spec.task_id.clone(),
        round,
        origin,
        seed: rollout_seed,
        terminal_reward: reward,
        success: reward == 1.0,
        steps,
    };
    traj.validate()?;
    Ok(traj)
}

fn discard(task: &SeededTask, steps_completed: usize, source: AgentError) -> ComposeError {
    log::warn!(
        "discarding partial rollout for {} after {} step(s): {}",
        task.spec.task_id,
        steps_completed,
        source
    );
    ComposeError::Discarded {
        task_id: task.spec.task_id.clone(),
        steps_completed,
        source,
    }
}

/// One exploration rollout. Each step first asks the policy for its proposal;
/// with probability `p` (or forcibly after a run of invalid policy actions)
/// the executed action is instead drawn uniformly from the action space
/// excluding the proposal, and the annotator supplies its rationale.
pub fn rollout_once(
    env_cfg: &EnvConfig,
    agents: &RolloutAgents,
    task: &SeededTask,
    cfg: &ExplorationConfig,
    rollout_seed: u64,
    round: u32,
) -> Result<Trajectory, ComposeError> {
    cfg.validate()?;
    let mut env = make_env(&task.spec.env_id, env_cfg)?;
    let mut obs = env.reset(&task.spec, task.layout_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed);
    let mut items: Vec<HistoryItem> = Vec::new();
    let mut steps: Vec<Step> = Vec::new();
    let mut invalid_streak = 0u32;
    let reward = loop {
        let index = steps.len() as u32 + 1;
        let step_seed = stable_seed(&[&rollout_seed.to_string(), "step", &index.to_string()]);
        let ctx = AgentContext {
            exemplar: agents.react_exemplar,
            goal: &task.spec.goal_text,
            items: &items,
            current_obs: &obs.text,
        };
        let proposal = react_propose(
            agents.policy,
            &ctx,
            DecodeParams {
                temperature: agents.explore_temperature,
                seed: step_seed,
                max_tokens: 256,
            },
        )
        .map_err(|source| discard(task, steps.len(), source))?;

        // The coin is drawn every step so the stream does not depend on the
        // forced-sampling state.
        let coin: f64 = rng.gen();
        let forced = invalid_streak >= cfg.invalid_streak_threshold;
        let sample = forced || coin < cfg.sample_probability;

        let (reasoning, reasoning_source, action, action_source) = if sample {
            let space = env.action_space();
            let candidates: Vec<&String> =
                space.iter().filter(|a| a.as_str() != proposal.action).collect();
            let pick = if candidates.is_empty() {
                // Degenerate space: the proposal is the only valid action.
                proposal.action.clone()
            } else {
                candidates[rng.gen_range(0..candidates.len())].clone()
            };
            let actre_ctx = ActReContext {
                exemplar: agents.actre_exemplar,
                goal: &task.spec.goal_text,
                items: &items,
                current_obs: &obs.text,
            };
            let rationale = actre_explain(
                agents.actre,
                &actre_ctx,
                &pick,
                DecodeParams {
                    temperature: agents.explore_temperature,
                    seed: stable_seed(&[&step_seed.to_string(), "actre"]),
                    max_tokens: 256,
                },
            )
            .map_err(|source| discard(task, steps.len(), source))?;
            (rationale, ReasoningSource::ActReSynthesized, pick, ActionSource::Sampled)
        } else {
            (
                reasoning_or_fallback(proposal.reasoning),
                ReasoningSource::PolicySelf,
                proposal.action,
                ActionSource::PolicySelf,
            )
        };

        let outcome = env.step(&action)?;
        steps.push(Step {
            index,
            observation: obs.text.clone(),
            reasoning: Some(Reasoning {
                text: reasoning.clone(),
                source: reasoning_source,
            }),
            action: Some(ExternalAction {
                text: action.clone(),
                source: action_source,
                valid: outcome.action_valid,
            }),
        });
        items.push(HistoryItem {
            observation: obs.text.clone(),
            reasoning,
            action,
        });

        if action_source == ActionSource::PolicySelf && !outcome.action_valid {
            invalid_streak += 1;
        } else {
            invalid_streak = 0;
        }

        obs = outcome.observation;
        if obs.terminal {
            steps.push(Step {
                index: index + 1,
                observation: obs.text.clone(),
                reasoning: None,
                action: None,
            });
            break obs.reward_if_terminal.expect("terminal carries reward");
        }
    };
    let sampled_any = steps
        .iter()
        .any(|s| matches!(&s.action, Some(a) if a.source == ActionSource::Sampled));
    let traj = Trajectory {
        task_id: task.spec.task_id.clone(),
        round,
        origin: if sampled_any {
            Origin::Composed
        } else {
            Origin::PolicyOnly
        },
        seed: rollout_seed,
        terminal_reward: reward,
        success: reward == 1.0,
        steps,
    };
    traj.validate()?;
    Ok(traj)
}

/// Explore one failed task under the configured budget. Rollout seeds derive
/// from (run seed, round, task, rollout index) so campaigns are reproducible
/// under any parallel schedule.
pub fn collect_for_task(
    env_cfg: &EnvConfig,
    agents: &RolloutAgents,
    task: &SeededTask,
    cfg: &ExplorationConfig,
    run_seed: u64,
    round: u32,
) -> Result<Vec<Trajectory>, ComposeError> {
    cfg.validate()?;
    let (min_count, cap, stop_on_success) = match cfg.budget {
        BudgetMode::FixedCount { count } => (count, count, false),
        BudgetMode::ForceThenStop { force, cap } => (force, cap, true),
    };
    let mut out = Vec::new();
    for i in 0..cap {
        let seed = rollout_seed(run_seed, round, &task.spec.task_id, i);
        out.push(rollout_once(env_cfg, agents, task, cfg, seed, round)?);
        let n = out.len() as u32;
        if n >= cap {
            break;
        }
        if n >= min_count && (!stop_on_success || out.iter().any(|t| t.success)) {
            break;
        }
    }
    log::info!(
        "collected {} trajectories for {} ({} successful)",
        out.len(),
        task.spec.task_id,
        out.iter().filter(|t| t.success).count()
    );
    Ok(out)
}

/// Keep only trainable material: all successes survive; composed failures are
/// dropped; policy-only failures survive only when the task also has at least
/// one success (the pairing guarantee); bootstrap failures never survive.
/// Tasks without a single success contribute nothing.
pub fn filter_for_training(
    groups: &BTreeMap<String, Vec<Trajectory>>,
) -> BTreeMap<String, Vec<Trajectory>> {
    let mut out = BTreeMap::new();
    for (task_id, trajs) in groups {
        if !trajs.iter().any(|t| t.success) {
            continue;
        }
        let kept: Vec<Trajectory> = trajs
            .iter()
            .filter(|t| t.success || t.origin == Origin::PolicyOnly)
            .cloned()
            .collect();
        if !kept.is_empty() {
            out.insert(task_id.clone(), kept);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, CompletionRequest};
    use crate::env::{generate_tasks, rationale_text, TreasureGridConfig};
    use crate::prompt::ACTRE_CUE;
    use crate::trajectory::Split;
    use proptest::prelude::*;

    /// Test backend: always proposes one fixed action; answers annotator
    /// queries with a template rationale.
    struct FixedBackend {
        action: String,
    }

    impl Backend for FixedBackend {
        fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
            if request.prompt.trim_end().ends_with(ACTRE_CUE) {
                let action = crate::backend::toy::parse_episode(&request.prompt).last_action;
                Ok(rationale_text(&action, "the fixture goal"))
            } else {
                Ok(format!(
                    "{}\nAction: {}",
                    rationale_text(&self.action, "the fixture goal"),
                    crate::prompt::wrap_action(&self.action)
                ))
            }
        }
    }

    fn grid_cfg() -> EnvConfig {
        EnvConfig::TreasureGrid(TreasureGridConfig {
            receptacle_count: 3,
            object_count: 2,
            closed_fraction: 0.0,
            reveal_initial: true,
            max_steps: 12,
        })
    }

    fn grid_task(seed: u64) -> SeededTask {
        generate_tasks(&grid_cfg(), Split::Train, 1, seed).remove(0)
    }

    fn agents_with<'a>(policy: &'a dyn Backend, actre: &'a dyn Backend) -> RolloutAgents<'a> {
        RolloutAgents {
            policy,
            actre,
            react_exemplar: "EXEMPLAR",
            actre_exemplar: "EXEMPLAR",
            explore_temperature: 1.0,
        }
    }

    fn cfg_with_p(p: f64) -> ExplorationConfig {
        ExplorationConfig {
            sample_probability: p,
            max_steps: 12,
            ..ExplorationConfig::default()
        }
    }

    #[test]
    fn p_zero_yields_policy_only() {
        let task = grid_task(3);
        // Use an always-valid go-to action from the fixture's own space.
        let mut env = make_env("treasure_grid", &grid_cfg()).unwrap();
        env.reset(&task.spec, task.layout_seed).unwrap();
        let go = env
            .action_space()
            .into_iter()
            .find(|a| a.starts_with("go to "))
            .unwrap();
        let backend = FixedBackend { action: go };
        let agents = agents_with(&backend, &backend);
        let traj =
            rollout_once(&grid_cfg(), &agents, &task, &cfg_with_p(0.0), 11, 1).unwrap();
        assert_eq!(traj.origin, Origin::PolicyOnly);
        assert_eq!(traj.sampled_action_count(), 0);
    }

    #[test]
    fn p_one_samples_every_step() {
        let task = grid_task(4);
        let mut env = make_env("treasure_grid", &grid_cfg()).unwrap();
        env.reset(&task.spec, task.layout_seed).unwrap();
        let go = env
            .action_space()
            .into_iter()
            .find(|a| a.starts_with("go to "))
            .unwrap();
        let backend = FixedBackend { action: go };
        let agents = agents_with(&backend, &backend);
        let traj = rollout_once(&grid_cfg(), &agents, &task, &cfg_with_p(1.0), 5, 1).unwrap();
        assert_eq!(traj.origin, Origin::Composed);
        for step in &traj.steps {
            if let Some(a) = &step.action {
                assert_eq!(a.source, ActionSource::Sampled);
                assert_eq!(
                    step.reasoning.as_ref().unwrap().source,
                    ReasoningSource::ActReSynthesized
                );
            }
        }
    }

    #[test]
    fn forced_sampling_fires_on_fourth_step_and_resets() {
        // Invalid policy action, p = 0: only forced sampling can fire.
        let backend = FixedBackend {
            action: "open the moon".into(),
        };
        let agents = agents_with(&backend, &backend);
        let cfg = ExplorationConfig {
            sample_probability: 0.0,
            max_steps: 12,
            ..ExplorationConfig::default()
        };
        let task = grid_task(5);
        let traj = rollout_once(&grid_cfg(), &agents, &task, &cfg, 17, 1).unwrap();
        let sources: Vec<ActionSource> = traj
            .steps
            .iter()
            .filter_map(|s| s.action.as_ref().map(|a| a.source))
            .collect();
        assert!(sources.len() >= 8, "episode too short: {sources:?}");
        for (i, src) in sources.iter().enumerate().take(8) {
            // Steps 4 and 8 (indices 3 and 7) are the forced samples.
            let expected = if i == 3 || i == 7 {
                ActionSource::Sampled
            } else {
                ActionSource::PolicySelf
            };
            assert_eq!(*src, expected, "step {} had {:?}", i + 1, src);
        }
    }

    #[test]
    fn sampled_share_tracks_probability() {
        let task = grid_task(6);
        let mut env = make_env("treasure_grid", &grid_cfg()).unwrap();
        env.reset(&task.spec, task.layout_seed).unwrap();
        let go = env
            .action_space()
            .into_iter()
            .find(|a| a.starts_with("go to "))
            .unwrap();
        let backend = FixedBackend { action: go };
        let agents = agents_with(&backend, &backend);
        let cfg = cfg_with_p(0.5);
        let mut sampled = 0usize;
        let mut total = 0usize;
        let mut i = 0;
        while total < 2000 {
            let traj = rollout_once(&grid_cfg(), &agents, &task, &cfg, 1000 + i, 1).unwrap();
            for s in &traj.steps {
                if let Some(a) = &s.action {
                    total += 1;
                    if a.source == ActionSource::Sampled {
                        sampled += 1;
                    }
                }
            }
            i += 1;
        }
        let frac = sampled as f64 / total as f64;
        let band = 3.0 * (0.25 / total as f64).sqrt();
        assert!(
            (frac - 0.5).abs() < band,
            "sampled fraction {frac} outside 3-sigma band {band}"
        );
    }

    #[test]
    fn rollouts_are_deterministic() {
        let task = grid_task(7);
        let mut env = make_env("treasure_grid", &grid_cfg()).unwrap();
        env.reset(&task.spec, task.layout_seed).unwrap();
        let go = env
            .action_space()
            .into_iter()
            .find(|a| a.starts_with("go to "))
            .unwrap();
        let backend = FixedBackend { action: go };
        let agents = agents_with(&backend, &backend);
        let a = collect_for_task(&grid_cfg(), &agents, &task, &cfg_with_p(0.5), 42, 1).unwrap();
        let b = collect_for_task(&grid_cfg(), &agents, &task, &cfg_with_p(0.5), 42, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_count_budget_is_exact() {
        let task = grid_task(8);
        let backend = FixedBackend {
            action: "open the moon".into(),
        };
        let agents = agents_with(&backend, &backend);
        let cfg = ExplorationConfig {
            budget: BudgetMode::FixedCount { count: 40 },
            max_steps: 6,
            ..ExplorationConfig::default()
        };
        let out = collect_for_task(&grid_cfg(), &agents, &task, &cfg, 1, 1).unwrap();
        assert_eq!(out.len(), 40);
    }

    #[test]
    fn force_then_stop_budget_cases() {
        let task = grid_task(9);
        // Never-succeeding campaign hits the cap.
        let backend = FixedBackend {
            action: "open the moon".into(),
        };
        let agents = agents_with(&backend, &backend);
        let cfg = ExplorationConfig {
            budget: BudgetMode::ForceThenStop { force: 3, cap: 20 },
            sample_probability: 0.0,
            max_steps: 5,
            ..ExplorationConfig::default()
        };
        let out = collect_for_task(&grid_cfg(), &agents, &task, &cfg, 2, 1).unwrap();
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|t| !t.success));

        // A success within the forced minimum still yields exactly `force`.
        let oracle = OracleBackend {
            env_cfg: grid_cfg(),
            task: task.clone(),
        };
        let agents = agents_with(&oracle, &oracle);
        let cfg = ExplorationConfig {
            budget: BudgetMode::ForceThenStop { force: 3, cap: 20 },
            sample_probability: 0.0,
            max_steps: 12,
            ..ExplorationConfig::default()
        };
        let out = collect_for_task(&grid_cfg(), &agents, &task, &cfg, 3, 1).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().any(|t| t.success));
    }

    /// Replays the environment to track state and always proposes the perfect
    /// oracle action for the current step.
    struct OracleBackend {
        env_cfg: EnvConfig,
        task: SeededTask,
    }

    impl Backend for OracleBackend {
        fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
            if request.prompt.trim_end().ends_with(ACTRE_CUE) {
                let action = crate::backend::toy::parse_episode(&request.prompt).last_action;
                return Ok(rationale_text(&action, "goal"));
            }
            // Replay executed actions (Action: lines of the live episode).
            let episode = request
                .prompt
                .rsplit("\n\n")
                .next()
                .unwrap_or(&request.prompt);
            let mut env = make_env(&self.task.spec.env_id, &self.env_cfg).unwrap();
            env.reset(&self.task.spec, self.task.layout_seed).unwrap();
            for line in episode.lines() {
                if let Some(rest) = line.strip_prefix("Action:") {
                    let _ = env.step(&crate::prompt::unwrap_action(rest));
                }
            }
            let action = env
                .oracle_action(crate::env::OracleMode::Perfect)
                .unwrap_or_else(|| crate::env::THINK_ACTION.to_string());
            Ok(format!(
                "{}\nAction: {}",
                rationale_text(&action, "goal"),
                crate::prompt::wrap_action(&action)
            ))
        }
    }

    fn mini_traj(task_id: &str, origin: Origin, reward: f64) -> Trajectory {
        let sampled = origin == Origin::Composed;
        Trajectory {
            task_id: task_id.into(),
            round: 1,
            origin,
            seed: 0,
            terminal_reward: reward,
            success: reward == 1.0,
            steps: vec![Step {
                index: 1,
                observation: "o".into(),
                reasoning: Some(Reasoning {
                    text: "r".into(),
                    source: if sampled {
                        ReasoningSource::ActReSynthesized
                    } else {
                        ReasoningSource::PolicySelf
                    },
                }),
                action: Some(ExternalAction {
                    text: "a".into(),
                    source: if sampled {
                        ActionSource::Sampled
                    } else {
                        ActionSource::PolicySelf
                    },
                    valid: true,
                }),
            }],
        }
    }

    #[test]
    fn filter_keeps_paired_failure_and_drops_composed_failures() {
        let mut groups = BTreeMap::new();
        groups.insert(
            "t".to_string(),
            vec![
                mini_traj("t", Origin::Composed, 0.0),
                mini_traj("t", Origin::Composed, 1.0),
                mini_traj("t", Origin::PolicyOnly, 0.0),
            ],
        );
        let out = filter_for_training(&groups);
        let kept = &out["t"];
        assert_eq!(kept.len(), 2);
        assert!(kept[0].success && kept[0].origin == Origin::Composed);
        assert!(!kept[1].success && kept[1].origin == Origin::PolicyOnly);
    }

    #[test]
    fn filter_drops_taskless_groups_and_bootstrap_failures() {
        let mut groups = BTreeMap::new();
        groups.insert(
            "all_fail".to_string(),
            vec![
                mini_traj("all_fail", Origin::Composed, 0.0),
                mini_traj("all_fail", Origin::Composed, 0.5),
                mini_traj("all_fail", Origin::Composed, 0.0),
            ],
        );
        groups.insert(
            "boot".to_string(),
            vec![
                mini_traj("boot", Origin::Bootstrap, 0.0),
                mini_traj("boot", Origin::Bootstrap, 1.0),
            ],
        );
        let out = filter_for_training(&groups);
        assert!(!out.contains_key("all_fail"));
        let boot = &out["boot"];
        assert_eq!(boot.len(), 1);
        assert!(boot[0].success);
    }

    proptest! {
        #[test]
        fn filter_output_failures_are_always_paired(
            spec in proptest::collection::vec(
                (0usize..6, 0u8..3, proptest::bool::ANY, 0u32..3),
                1..60
            )
        ) {
            let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
            for (task_n, origin_n, success, _r) in spec {
                let origin = match origin_n {
                    0 => Origin::Bootstrap,
                    1 => Origin::PolicyOnly,
                    _ => Origin::Composed,
                };
                let reward = if success { 1.0 } else { 0.25 };
                let id = format!("task-{task_n}");
                groups.entry(id.clone()).or_default().push(mini_traj(&id, origin, reward));
            }
            let out = filter_for_training(&groups);
            for (task_id, kept) in &out {
                prop_assert!(kept.iter().any(|t| t.success));
                for t in kept {
                    prop_assert!(t.success || t.origin == Origin::PolicyOnly);
                    if !t.success {
                        prop_assert!(
                            kept.iter().any(|s| s.success && &s.task_id == task_id)
                        );
                    }
                }
            }
        }
    }
}
