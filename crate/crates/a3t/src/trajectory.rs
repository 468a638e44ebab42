//! Canonical data model for tasks, steps, trajectories, and the append-only
//! trajectory store. Every other module consumes these types.
//!
//! Trajectories are persisted as JSONL, one line per trajectory, one file per
//! round (`round_<k>.traj.jsonl`) with a manifest sidecar
//! (`round_<k>.manifest.json`).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("store i/o failed for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Task split membership. Immutable after creation; trajectories from
/// `Valid`/`Test` tasks must never reach a training dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Kind of one rendered trajectory segment. Datasets, vocabularies, and the
/// training objective all slice trajectories at this granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Observation,
    Reasoning,
    Action,
}

/// One task instance of an environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub env_id: String,
    pub goal_text: String,
    pub task_type: String,
    pub split: Split,
}

/// Who produced a reasoning text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningSource {
    /// Generated by the policy agent itself, before its own action.
    PolicySelf,
    /// Synthesized a posteriori by the act-then-reason annotator.
    ActReSynthesized,
}

/// Who produced an external action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    PolicySelf,
    /// Drawn at random from the environment action space.
    Sampled,
}

/// How a trajectory came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// Initial-round prompting rollout, no exploration.
    Bootstrap,
    /// Policy-only rollout; contains no sampled actions.
    PolicyOnly,
    /// Exploration rollout containing at least one sampled, annotated action.
    Composed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reasoning {
    pub text: String,
    pub source: ReasoningSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalAction {
    pub text: String,
    pub source: ActionSource,
    /// Whether the environment accepted the action.
    pub valid: bool,
}

/// One (observation, reasoning, action) triple. The trailing step of a
/// trajectory may be observation-only (the terminal observation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: u32,
    pub observation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<Reasoning>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action: Option<ExternalAction>,
}

/// The unit of annotation, filtering, and training.
///
/// Field order matches the wire format exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub round: u32,
    pub origin: Origin,
    pub seed: u64,
    pub terminal_reward: f64,
    pub success: bool,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// Check every structural invariant. Serialization refuses trajectories
    /// that fail any of these.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.steps.is_empty() {
            return Err(TrajectoryError::Invariant(format!(
                "empty steps: trajectory for task {} has no steps",
                self.task_id
            )));
        }
        if !(0.0..=1.0).contains(&self.terminal_reward) {
            return Err(TrajectoryError::Invariant(format!(
                "reward range: terminal_reward {} outside [0,1]",
                self.terminal_reward
            )));
        }
        if self.success != (self.terminal_reward == 1.0) {
            return Err(TrajectoryError::Invariant(format!(
                "success flag: success={} but terminal_reward={}",
                self.success, self.terminal_reward
            )));
        }
        let last = self.steps.len() - 1;
        let mut sampled = 0usize;
        for (i, step) in self.steps.iter().enumerate() {
            if step.index != (i + 1) as u32 {
                return Err(TrajectoryError::Invariant(format!(
                    "step indices: expected contiguous 1..{} but step {} has index {}",
                    self.steps.len(),
                    i + 1,
                    step.index
                )));
            }
            if let Some(r) = &step.reasoning {
                if r.text.is_empty() {
                    return Err(TrajectoryError::Invariant(format!(
                        "empty reasoning: step {} has a present but empty reasoning text",
                        step.index
                    )));
                }
            }
            match &step.action {
                Some(a) => {
                    if a.source == ActionSource::Sampled {
                        sampled += 1;
                        let ok = matches!(
                            &step.reasoning,
                            Some(r) if r.source == ReasoningSource::ActReSynthesized
                        );
                        if !ok {
                            return Err(TrajectoryError::Invariant(format!(
                                "provenance mismatch: step {} has a sampled action without \
                                 annotator-synthesized reasoning",
                                step.index
                            )));
                        }
                    }
                    if step.reasoning.is_none() {
                        return Err(TrajectoryError::Invariant(format!(
                            "missing reasoning: step {} has an action but no reasoning",
                            step.index
                        )));
                    }
                }
                None => {
                    // Observation-terminal step: only allowed in last position,
                    // and then reasoning must be absent too.
                    if i != last {
                        return Err(TrajectoryError::Invariant(format!(
                            "action gap: step {} has no action but is not the terminal step",
                            step.index
                        )));
                    }
                    if step.reasoning.is_some() {
                        return Err(TrajectoryError::Invariant(format!(
                            "dangling reasoning: terminal step {} has reasoning but no action",
                            step.index
                        )));
                    }
                }
            }
        }
        match self.origin {
            Origin::Composed if sampled == 0 => Err(TrajectoryError::Invariant(
                "origin mismatch: composed trajectory contains no sampled action".into(),
            )),
            Origin::PolicyOnly | Origin::Bootstrap if sampled > 0 => {
                Err(TrajectoryError::Invariant(format!(
                    "origin mismatch: {:?} trajectory contains {} sampled action(s)",
                    self.origin, sampled
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn sampled_action_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(&s.action, Some(a) if a.source == ActionSource::Sampled))
            .count()
    }
}

/// Serialize one trajectory to a single JSONL line, refusing invariant
/// violations with a diagnostic naming the violated invariant.
pub fn serialize_trajectory(traj: &Trajectory) -> Result<String, TrajectoryError> {
    traj.validate()?;
    Ok(serde_json::to_string(traj)?)
}

/// Parse one JSONL line back into a trajectory and re-check invariants.
pub fn deserialize_trajectory(line: &str) -> Result<Trajectory, TrajectoryError> {
    let traj: Trajectory = serde_json::from_str(line)?;
    traj.validate()?;
    Ok(traj)
}

/// Per-round record written next to each round's trajectory file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundManifest {
    pub round: u32,
    pub tasks_attempted: u32,
    pub trajectories_added: u32,
    pub config_hash: String,
    pub seed: u64,
}

/// Append-only accumulated trajectory set with per-round manifests.
///
/// Appends go through a single writer; `Trajectory` values are immutable after
/// construction and safe to hand between threads.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryStore {
    entries: Vec<Trajectory>,
    manifests: Vec<RoundManifest>,
}

impl TrajectoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Trajectory] {
        &self.entries
    }

    pub fn manifests(&self) -> &[RoundManifest] {
        &self.manifests
    }

    /// Validate and append one trajectory. Entries are never mutated or
    /// removed afterwards.
    pub fn append(&mut self, traj: Trajectory) -> Result<(), TrajectoryError> {
        traj.validate()?;
        self.entries.push(traj);
        Ok(())
    }

    /// Record the manifest closing out a round. Every entry must belong to a
    /// round no later than the manifest's.
    pub fn push_manifest(&mut self, manifest: RoundManifest) -> Result<(), TrajectoryError> {
        if let Some(bad) = self.entries.iter().find(|t| t.round > manifest.round) {
            return Err(TrajectoryError::Invariant(format!(
                "round ordering: entry for task {} has round {} beyond manifest round {}",
                bad.task_id, bad.round, manifest.round
            )));
        }
        self.manifests.push(manifest);
        Ok(())
    }

    /// Group all entries by task id, preserving append order within a task.
    pub fn group_by_task(&self) -> BTreeMap<String, Vec<Trajectory>> {
        let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
        for t in &self.entries {
            groups.entry(t.task_id.clone()).or_default().push(t.clone());
        }
        groups
    }

    /// Best terminal reward accumulated for a task over rounds `0..=up_to_round`.
    /// Returns `None` when the task has no attempts in that range — explicitly
    /// distinct from a reward of zero.
    pub fn best_accumulated_reward(&self, task_id: &str, up_to_round: u32) -> Option<f64> {
        self.entries
            .iter()
            .filter(|t| t.task_id == task_id && t.round <= up_to_round)
            .map(|t| t.terminal_reward)
            .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
    }

    /// Write all entries of `round` plus its manifest into `dir` using the
    /// canonical file names. The trajectory file is written atomically.
    pub fn write_round(&self, dir: &Path, round: u32) -> Result<(), TrajectoryError> {
        let mut lines = String::new();
        for t in self.entries.iter().filter(|t| t.round == round) {
            lines.push_str(&serialize_trajectory(t)?);
            lines.push('\n');
        }
        let traj_path = dir.join(format!("round_{round}.traj.jsonl"));
        crate::util::atomic_write(&traj_path, &lines).map_err(|source| TrajectoryError::Io {
            path: traj_path.display().to_string(),
            source,
        })?;
        if let Some(m) = self.manifests.iter().find(|m| m.round == round) {
            let manifest_path = dir.join(format!("round_{round}.manifest.json"));
            let body = serde_json::to_string_pretty(m)?;
            crate::util::atomic_write(&manifest_path, &body).map_err(|source| {
                TrajectoryError::Io {
                    path: manifest_path.display().to_string(),
                    source,
                }
            })?;
        }
        Ok(())
    }

    /// Read one round's files from `dir` into this store, skipping files that
    /// do not exist yet.
    pub fn load_round_into(&mut self, dir: &Path, round: u32) -> Result<(), TrajectoryError> {
        let traj_path = dir.join(format!("round_{round}.traj.jsonl"));
        if traj_path.exists() {
            let file = fs::File::open(&traj_path).map_err(|source| TrajectoryError::Io {
                path: traj_path.display().to_string(),
                source,
            })?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|source| TrajectoryError::Io {
                    path: traj_path.display().to_string(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                self.entries.push(deserialize_trajectory(&line)?);
            }
        }
        let manifest_path = dir.join(format!("round_{round}.manifest.json"));
        if manifest_path.exists() {
            let body =
                fs::read_to_string(&manifest_path).map_err(|source| TrajectoryError::Io {
                    path: manifest_path.display().to_string(),
                    source,
                })?;
            self.manifests.push(serde_json::from_str(&body)?);
        }
        Ok(())
    }

    /// Load rounds `0..=up_to_round` from one flat directory.
    pub fn load_rounds(dir: &Path, up_to_round: u32) -> Result<Self, TrajectoryError> {
        let mut store = Self::new();
        for round in 0..=up_to_round {
            store.load_round_into(dir, round)?;
        }
        Ok(store)
    }
}

#[cfg(test)]
pub mod testutil {
    //! Randomized valid-trajectory generator shared by property tests.

    use super::*;
    use proptest::prelude::*;

    pub fn arb_reward() -> impl Strategy<Value = f64> {
        prop_oneof![
            3 => Just(1.0),
            2 => Just(0.0),
            5 => (1u32..20).prop_map(|n| n as f64 / 20.0),
        ]
    }

    prop_compose! {
        pub fn arb_step(index: u32, sampled: bool)(
            obs in "[a-z ]{1,30}",
            rs in "[a-z ]{1,20}",
            act in "[a-z ]{1,15}",
            valid in any::<bool>(),
        ) -> Step {
            let (rsource, asource) = if sampled {
                (ReasoningSource::ActReSynthesized, ActionSource::Sampled)
            } else {
                (ReasoningSource::PolicySelf, ActionSource::PolicySelf)
            };
            Step {
                index,
                observation: obs,
                reasoning: Some(Reasoning { text: rs, source: rsource }),
                action: Some(ExternalAction { text: act, source: asource, valid }),
            }
        }
    }

    pub fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        (1usize..8, any::<u64>(), 0u32..5, arb_reward(), any::<bool>()).prop_flat_map(
            |(len, seed, round, reward, terminal_obs)| {
                let masks = proptest::collection::vec(any::<bool>(), len);
                (masks, Just((seed, round, reward, terminal_obs))).prop_flat_map(
                    move |(mask, (seed, round, reward, terminal_obs))| {
                        let steps: Vec<_> = mask
                            .iter()
                            .enumerate()
                            .map(|(i, &s)| arb_step(i as u32 + 1, s))
                            .collect();
                        let any_sampled = mask.iter().any(|&s| s);
                        steps.prop_map(move |mut steps| {
                            if terminal_obs {
                                steps.push(Step {
                                    index: steps.len() as u32 + 1,
                                    observation: "episode over".into(),
                                    reasoning: None,
                                    action: None,
                                });
                            }
                            Trajectory {
                                task_id: format!("task-{:02}", seed % 40),
                                round,
                                origin: if any_sampled {
                                    Origin::Composed
                                } else {
                                    Origin::PolicyOnly
                                },
                                seed,
                                terminal_reward: reward,
                                success: reward == 1.0,
                                steps,
                            }
                        })
                    },
                )
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_step_success() -> Trajectory {
        Trajectory {
            task_id: "t1".into(),
            round: 0,
            origin: Origin::PolicyOnly,
            seed: 7,
            terminal_reward: 1.0,
            success: true,
            steps: vec![Step {
                index: 1,
                observation: "you see a key".into(),
                reasoning: Some(Reasoning {
                    text: "grab it".into(),
                    source: ReasoningSource::PolicySelf,
                }),
                action: Some(ExternalAction {
                    text: "take key".into(),
                    source: ActionSource::PolicySelf,
                    valid: true,
                }),
            }],
        }
    }

    #[test]
    fn serializes_success_fields_exactly() {
        let line = serialize_trajectory(&one_step_success()).unwrap();
        assert!(line.contains("\"terminal_reward\":1.0,\"success\":true"));
        assert!(line.starts_with("{\"task_id\":"));
    }

    #[test]
    fn provenance_mismatch_is_refused() {
        let mut t = one_step_success();
        t.origin = Origin::Composed;
        t.steps[0].action.as_mut().unwrap().source = ActionSource::Sampled;
        // Reasoning still claims the policy produced it.
        let err = serialize_trajectory(&t).unwrap_err();
        assert!(err.to_string().contains("provenance mismatch"), "{err}");
    }

    #[test]
    fn success_flag_must_match_reward() {
        let mut t = one_step_success();
        t.terminal_reward = 0.5;
        let err = t.validate().unwrap_err();
        assert!(err.to_string().contains("success flag"));
    }

    #[test]
    fn composed_requires_a_sampled_action() {
        let mut t = one_step_success();
        t.origin = Origin::Composed;
        let err = t.validate().unwrap_err();
        assert!(err.to_string().contains("origin mismatch"));
    }

    #[test]
    fn best_accumulated_reward_examples() {
        let mut store = TrajectoryStore::new();
        let mut a = one_step_success();
        a.terminal_reward = 0.4;
        a.success = false;
        a.round = 0;
        store.append(a).unwrap();
        let mut b = one_step_success();
        b.round = 1;
        store.append(b).unwrap();

        assert_eq!(store.best_accumulated_reward("t1", 1), Some(1.0));
        assert_eq!(store.best_accumulated_reward("t1", 0), Some(0.4));
        assert_eq!(store.best_accumulated_reward("missing", 3), None);
    }

    #[test]
    fn round_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = TrajectoryStore::new();
        store.append(one_step_success()).unwrap();
        store
            .push_manifest(RoundManifest {
                round: 0,
                tasks_attempted: 1,
                trajectories_added: 1,
                config_hash: "abc".into(),
                seed: 9,
            })
            .unwrap();
        store.write_round(dir.path(), 0).unwrap();

        let loaded = TrajectoryStore::load_rounds(dir.path(), 0).unwrap();
        assert_eq!(loaded.entries(), store.entries());
        assert_eq!(loaded.manifests()[0].config_hash, "abc");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn roundtrip_is_identity(traj in testutil::arb_trajectory()) {
            let line = serialize_trajectory(&traj).unwrap();
            let back = deserialize_trajectory(&line).unwrap();
            prop_assert_eq!(back, traj);
        }
    }

    proptest! {
        #[test]
        fn best_accumulated_is_monotone(trajs in proptest::collection::vec(testutil::arb_trajectory(), 1..40)) {
            let mut store = TrajectoryStore::new();
            for t in trajs {
                store.append(t).unwrap();
            }
            let task_ids: std::collections::BTreeSet<_> =
                store.entries().iter().map(|t| t.task_id.clone()).collect();
            for id in task_ids {
                let mut prev = None;
                for round in 0..6 {
                    let cur = store.best_accumulated_reward(&id, round);
                    if let (Some(p), Some(c)) = (prev, cur) {
                        prop_assert!(c >= p);
                    }
                    if prev.is_some() {
                        prop_assert!(cur.is_some());
                    }
                    prev = cur.or(prev);
                }
            }
        }
    }
}
