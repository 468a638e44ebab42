//! Multi-round closed loop: a round-0 prompting bootstrap, then rounds of
//! evaluate -> collect -> filter -> shape -> train -> evaluate, with
//! append-only accumulation, per-round reports, and stage-level checkpoints
//! so an interrupted run resumes to byte-identical outputs.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{render_react_prompt, AgentContext, HistoryItem};
use crate::backend::{Backend, HttpBackend, ScriptedBackend, ToyBackend, ToyPolicyParams};
use crate::composer::{
    collect_for_task, filter_for_training, react_rollout, ComposeError, RolloutAgents,
};
use crate::env::{
    build_vocabulary, generate_tasks, make_env, rationale_text, EnvConfig, EnvError, OracleMode,
    SeededTask, SegmentTokenizer, THINK_ACTION,
};
use crate::objective::{
    emit_dataset, load_dataset, recount_dataset, shape_rewards, train_toy, DatasetStats,
    ObjectiveError, ObjectiveOptions,
};
use crate::prompt::wrap_action;
use crate::trajectory::{
    deserialize_trajectory, serialize_trajectory, Origin, RoundManifest, Split, Trajectory,
    TrajectoryError, TrajectoryStore,
};
use crate::util::{atomic_write, stable_seed};

pub use config::{BackendSpec, OracleSettings, RunConfig, ToyBackendSettings};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition not met: {0}")]
    Precondition(String),
    #[error("bootstrap produced zero successful trajectories: {0}")]
    BootstrapEmpty(String),
    #[error("run i/o failed for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Reward summary of one evaluation: mean reward x100, success rate %, and
/// the shares at the 0.75 / 0.5 thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub mean_reward: f64,
    pub success_rate: f64,
    pub pct_reward_ge_075: f64,
    pub pct_reward_ge_05: f64,
}

pub fn metrics_from_rewards(rewards: &[f64]) -> MetricBlock {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return MetricBlock {
            mean_reward: 0.0,
            success_rate: 0.0,
            pct_reward_ge_075: 0.0,
            pct_reward_ge_05: 0.0,
        };
    }
    let count = |pred: &dyn Fn(f64) -> bool| {
        100.0 * rewards.iter().filter(|r| pred(**r)).count() as f64 / n
    };
    MetricBlock {
        mean_reward: 100.0 * rewards.iter().sum::<f64>() / n,
        success_rate: count(&|r| r == 1.0),
        pct_reward_ge_075: count(&|r| r >= 0.75),
        pct_reward_ge_05: count(&|r| r >= 0.5),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub overall: MetricBlock,
    pub by_type: BTreeMap<String, MetricBlock>,
}

/// Metrics over a full task list given one reward per task (missing = 0).
pub fn split_metrics(tasks: &[SeededTask], rewards: &BTreeMap<String, f64>) -> SplitMetrics {
    let all: Vec<f64> = tasks
        .iter()
        .map(|t| rewards.get(&t.spec.task_id).copied().unwrap_or(0.0))
        .collect();
    let mut by_type: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (task, r) in tasks.iter().zip(&all) {
        by_type
            .entry(task.spec.task_type.clone())
            .or_default()
            .push(*r);
    }
    SplitMetrics {
        overall: metrics_from_rewards(&all),
        by_type: by_type
            .into_iter()
            .map(|(ty, rs)| (ty, metrics_from_rewards(&rs)))
            .collect(),
    }
}

/// Best-of-n evaluation: per task, the best reward over the given per-round
/// reward maps (the accumulated metric when the maps span all rounds).
pub fn best_of_rewards(rounds: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for map in rounds {
        for (task, r) in map {
            let entry = best.entry(task.clone()).or_insert(*r);
            if *r > *entry {
                *entry = *r;
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub single_shot: SplitMetrics,
    pub accumulated: SplitMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    /// Keyed by split name (train / valid / test).
    pub splits: BTreeMap<String, SplitReport>,
    pub dataset: DatasetStats,
}

// ---------------------------------------------------------------------------
// Run state (stage checkpoints)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RunState {
    completed: BTreeMap<u32, Vec<String>>,
}

impl RunState {
    fn load(out: &Path) -> Self {
        fs::read_to_string(out.join("state.json"))
            .ok()
            .and_then(|body| serde_json::from_str(&body).ok())
            .unwrap_or_default()
    }

    fn save(&self, out: &Path) -> Result<(), RunError> {
        let path = out.join("state.json");
        atomic_write(&path, &serde_json::to_string_pretty(self)?).map_err(io_err(&path))
    }

    fn is_done(&self, round: u32, stage: &str) -> bool {
        self.completed
            .get(&round)
            .is_some_and(|v| v.iter().any(|s| s == stage))
    }

    fn mark(&mut self, round: u32, stage: &str) {
        let stages = self.completed.entry(round).or_default();
        if !stages.iter().any(|s| s == stage) {
            stages.push(stage.to_string());
        }
    }
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

pub struct Runner {
    cfg: RunConfig,
    env_cfg: EnvConfig,
    out: PathBuf,
    tasks: BTreeMap<Split, Vec<SeededTask>>,
    vocab: Vec<String>,
    tokenizer: SegmentTokenizer,
    react_exemplar: String,
    actre_exemplar: String,
    config_hash: String,
    pool: rayon::ThreadPool,
}

fn embedded_exemplar(env_id: &str, role: &str) -> Result<&'static str, RunError> {
    match (env_id, role) {
        ("treasure_grid", "react") => Ok(include_str!("../../prompts/treasure_grid/react.txt")),
        ("treasure_grid", "actre") => Ok(include_str!("../../prompts/treasure_grid/actre.txt")),
        ("mini_shop", "react") => Ok(include_str!("../../prompts/mini_shop/react.txt")),
        ("mini_shop", "actre") => Ok(include_str!("../../prompts/mini_shop/actre.txt")),
        _ => Err(RunError::Config(format!(
            "no bundled {role} exemplar for environment {env_id}"
        ))),
    }
}

impl Runner {
    pub fn new(cfg: RunConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let env_cfg = cfg.env.clone();
        let run_seed = cfg.run.run_seed;
        let mut tasks = BTreeMap::new();
        for (split, count) in [
            (Split::Train, cfg.run.train_tasks),
            (Split::Valid, cfg.run.valid_tasks),
            (Split::Test, cfg.run.test_tasks),
        ] {
            let split_seed = stable_seed(&[&run_seed.to_string(), "tasks", split.as_str()]);
            tasks.insert(split, generate_tasks(&env_cfg, split, count, split_seed));
        }
        let all_tasks: Vec<SeededTask> = tasks.values().flatten().cloned().collect();
        let vocab = build_vocabulary(&env_cfg, &all_tasks);
        let tokenizer = SegmentTokenizer::for_config(&env_cfg);

        let exemplar = |role: &str| -> Result<String, RunError> {
            if let Some(dir) = &cfg.run.prompts_dir {
                let path = dir.join(env_cfg.env_id()).join(format!("{role}.txt"));
                return fs::read_to_string(&path).map_err(io_err(&path));
            }
            embedded_exemplar(env_cfg.env_id(), role).map(str::to_string)
        };
        let react_exemplar = exemplar("react")?;
        let actre_exemplar = exemplar("actre")?;

        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build()
            .map_err(|e| RunError::Config(format!("worker pool: {e}")))?;

        let out = cfg.run.out.clone();
        let config_hash = cfg.config_hash();
        Ok(Self {
            cfg,
            env_cfg,
            out,
            tasks,
            vocab,
            tokenizer,
            react_exemplar,
            actre_exemplar,
            config_hash,
            pool,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn tasks(&self, split: Split) -> &[SeededTask] {
        &self.tasks[&split]
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn round_dir(&self, round: u32) -> Result<PathBuf, RunError> {
        let dir = self.out.join(format!("round_{round}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    fn toy_settings(&self) -> ToyBackendSettings {
        match &self.cfg.backends.policy {
            BackendSpec::Toy(s) => s.clone(),
            _ => ToyBackendSettings::default(),
        }
    }

    pub fn fresh_params(&self) -> ToyPolicyParams {
        ToyPolicyParams::new(self.vocab.clone(), self.toy_settings().feature_width)
    }

    fn load_params(&self, round: u32) -> Result<ToyPolicyParams, RunError> {
        let path = self.out.join(format!("round_{round}/params.json"));
        let body = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(ToyPolicyParams::from_json(&body)?)
    }

    fn make_backend(
        &self,
        spec: &BackendSpec,
        params: &Arc<ToyPolicyParams>,
    ) -> Result<Box<dyn Backend>, RunError> {
        match spec {
            BackendSpec::Toy(_) => Ok(Box::new(ToyBackend::new(params.clone()))),
            BackendSpec::Http(http) => Ok(Box::new(HttpBackend::new(http.clone()))),
            BackendSpec::OracleScripted(_) => Err(RunError::Config(
                "oracle_scripted is only valid for the bootstrap role".into(),
            )),
        }
    }

    fn bootstrap_backend(
        &self,
        params: &Arc<ToyPolicyParams>,
    ) -> Result<Box<dyn Backend>, RunError> {
        let spec = self
            .cfg
            .backends
            .bootstrap
            .clone()
            .unwrap_or_else(|| self.cfg.backends.policy.clone());
        match spec {
            BackendSpec::OracleScripted(settings) => {
                Ok(Box::new(self.build_oracle_table(settings.coverage)?))
            }
            other => self.make_backend(&other, params),
        }
    }

    /// Pre-register, for every training task, the full prompt/completion
    /// script of a prompting agent: a solving script for `coverage` of the
    /// tasks and a plausible-but-wrong script for the rest.
    fn build_oracle_table(&self, coverage: f64) -> Result<ScriptedBackend, RunError> {
        let mut backend = ScriptedBackend::new();
        for task in self.tasks(Split::Train) {
            // Expand the seed through a PRNG; raw hash bits are not uniform
            // enough across near-identical task ids.
            let mut draw_rng = ChaCha8Rng::seed_from_u64(stable_seed(&[
                &self.cfg.run.run_seed.to_string(),
                "oracle-mode",
                &task.spec.task_id,
            ]));
            let mode = if draw_rng.gen::<f64>() < coverage {
                OracleMode::Perfect
            } else {
                OracleMode::Decoy
            };
            let mut env = make_env(&task.spec.env_id, &self.env_cfg)?;
            let mut obs = env.reset(&task.spec, task.layout_seed)?;
            let mut items: Vec<HistoryItem> = Vec::new();
            loop {
                let ctx = AgentContext {
                    exemplar: &self.react_exemplar,
                    goal: &task.spec.goal_text,
                    items: &items,
                    current_obs: &obs.text,
                };
                let action = env
                    .oracle_action(mode)
                    .unwrap_or_else(|| THINK_ACTION.to_string());
                let reasoning = rationale_text(&action, &task.spec.goal_text);
                backend.register(
                    &render_react_prompt(&ctx),
                    format!("{reasoning}\nAction: {}", wrap_action(&action)),
                );
                let outcome = env.step(&action)?;
                items.push(HistoryItem {
                    observation: obs.text.clone(),
                    reasoning,
                    action,
                });
                obs = outcome.observation;
                if obs.terminal {
                    break;
                }
            }
        }
        Ok(backend)
    }

    /// One greedy-or-sampled policy rollout per task, in parallel, in task
    /// order.
    fn rollout_split(
        &self,
        backend: &dyn Backend,
        split: Split,
        round: u32,
        temperature: f64,
        seed_tag: &str,
        origin: Origin,
    ) -> Result<Vec<Trajectory>, RunError> {
        let tasks = self.tasks(split);
        let run_seed = self.cfg.run.run_seed.to_string();
        let result: Result<Vec<Trajectory>, ComposeError> = self.pool.install(|| {
            tasks
                .par_iter()
                .map(|task| {
                    let seed = stable_seed(&[
                        &run_seed,
                        seed_tag,
                        &round.to_string(),
                        &task.spec.task_id,
                    ]);
                    react_rollout(
                        &self.env_cfg,
                        backend,
                        &self.react_exemplar,
                        task,
                        temperature,
                        seed,
                        round,
                        origin,
                    )
                })
                .collect()
        });
        Ok(result?)
    }

    fn write_trajectories(&self, path: &Path, trajs: &[Trajectory]) -> Result<(), RunError> {
        let mut lines = String::new();
        for t in trajs {
            lines.push_str(&serialize_trajectory(t)?);
            lines.push('\n');
        }
        atomic_write(path, &lines).map_err(io_err(path))
    }

    fn read_trajectories(&self, path: &Path) -> Result<Vec<Trajectory>, RunError> {
        let body = fs::read_to_string(path).map_err(io_err(path))?;
        body.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| deserialize_trajectory(l).map_err(RunError::from))
            .collect()
    }

    /// Load the accumulated store over rounds `0..=up_to`.
    pub fn load_store(&self, up_to: u32) -> Result<TrajectoryStore, RunError> {
        let mut store = TrajectoryStore::new();
        for round in 0..=up_to {
            let dir = self.out.join(format!("round_{round}"));
            store.load_round_into(&dir, round)?;
        }
        Ok(store)
    }

    // -- stages --------------------------------------------------------------

    /// Round-0 bootstrap: one prompting rollout per training task; every
    /// attempt is stored (failures included, tagged by origin) and the round
    /// dataset reduces to supervised fine-tuning because bootstrap failures
    /// never pass the filter.
    pub fn run_round0(&self) -> Result<(), RunError> {
        let mut state = RunState::load(&self.out);
        fs::create_dir_all(&self.out).map_err(io_err(&self.out))?;
        let dir = self.round_dir(0)?;

        if !state.is_done(0, "bootstrap") {
            let started = Instant::now();
            let params = Arc::new(self.fresh_params());
            let backend = self.bootstrap_backend(&params)?;
            let temperature = self.toy_settings().explore_temperature;
            let rollouts = self.rollout_split(
                backend.as_ref(),
                Split::Train,
                0,
                temperature,
                "bootstrap",
                Origin::Bootstrap,
            )?;
            let successes = rollouts.iter().filter(|t| t.success).count();
            if successes == 0 {
                return Err(RunError::BootstrapEmpty(format!(
                    "all {} bootstrap rollouts failed; check the bootstrap backend",
                    rollouts.len()
                )));
            }
            log::info!(
                "bootstrap: {successes}/{} tasks solved in {:.1?}",
                rollouts.len(),
                started.elapsed()
            );
            let mut store = TrajectoryStore::new();
            for t in rollouts {
                store.append(t)?;
            }
            store.push_manifest(RoundManifest {
                round: 0,
                tasks_attempted: self.tasks(Split::Train).len() as u32,
                trajectories_added: store.entries().len() as u32,
                config_hash: self.config_hash.clone(),
                seed: self.cfg.run.run_seed,
            })?;
            store.write_round(&dir, 0)?;
            state.mark(0, "bootstrap");
            state.save(&self.out)?;
        }

        self.stage_dataset(&mut state, 0)?;
        self.stage_train(&mut state, 0)?;
        self.stage_report(&mut state, 0)?;
        Ok(())
    }

    /// One full later round against the accumulated store.
    pub fn run_round(&self, round: u32) -> Result<(), RunError> {
        if round == 0 {
            return self.run_round0();
        }
        let mut state = RunState::load(&self.out);
        if !state.is_done(round - 1, "report") {
            return Err(RunError::Precondition(format!(
                "round {} has not completed; run it first",
                round - 1
            )));
        }
        self.stage_eval_train(&mut state, round)?;
        self.stage_collect(&mut state, round)?;
        self.stage_dataset(&mut state, round)?;
        self.stage_train(&mut state, round)?;
        self.stage_report(&mut state, round)?;
        Ok(())
    }

    /// Evaluate the current (previous round's) policy on the training split.
    fn stage_eval_train(&self, state: &mut RunState, round: u32) -> Result<(), RunError> {
        if state.is_done(round, "eval_train") {
            return Ok(());
        }
        let started = Instant::now();
        let dir = self.round_dir(round)?;
        let params = Arc::new(self.load_params(round - 1)?);
        let backend = self.make_backend(&self.cfg.backends.policy, &params)?;
        let evals = self.rollout_split(
            backend.as_ref(),
            Split::Train,
            round,
            self.toy_settings().eval_temperature,
            "eval-train",
            Origin::PolicyOnly,
        )?;
        self.write_trajectories(&dir.join("eval_train.traj.jsonl"), &evals)?;
        log::info!(
            "round {round}: train evaluation done in {:.1?} ({} failures)",
            started.elapsed(),
            evals.iter().filter(|t| !t.success).count()
        );
        state.mark(round, "eval_train");
        state.save(&self.out)
    }

    /// Explore every failed task, filter, and append this round's additions
    /// to the store.
    fn stage_collect(&self, state: &mut RunState, round: u32) -> Result<(), RunError> {
        if state.is_done(round, "collect") {
            return Ok(());
        }
        let started = Instant::now();
        let dir = self.round_dir(round)?;
        let evals = self.read_trajectories(&dir.join("eval_train.traj.jsonl"))?;
        let params = Arc::new(self.load_params(round - 1)?);
        let policy = self.make_backend(&self.cfg.backends.policy, &params)?;
        let actre = self.make_backend(&self.cfg.backends.actre, &params)?;
        let agents = RolloutAgents {
            policy: policy.as_ref(),
            actre: actre.as_ref(),
            react_exemplar: &self.react_exemplar,
            actre_exemplar: &self.actre_exemplar,
            explore_temperature: self.toy_settings().explore_temperature,
        };

        let failed: Vec<&SeededTask> = self
            .tasks(Split::Train)
            .iter()
            .filter(|t| {
                evals
                    .iter()
                    .any(|e| e.task_id == t.spec.task_id && !e.success)
            })
            .collect();
        let run_seed = self.cfg.run.run_seed;
        let collections: Result<Vec<Vec<Trajectory>>, ComposeError> = self.pool.install(|| {
            failed
                .par_iter()
                .map(|task| {
                    collect_for_task(
                        &self.env_cfg,
                        &agents,
                        task,
                        &self.cfg.exploration,
                        run_seed,
                        round,
                    )
                })
                .collect()
        });
        let collections = collections?;

        let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
        for (task, collected) in failed.iter().zip(collections) {
            let mut list = Vec::with_capacity(collected.len() + 1);
            if let Some(trigger) = evals
                .iter()
                .find(|e| e.task_id == task.spec.task_id && !e.success)
            {
                list.push(trigger.clone());
            }
            list.extend(collected);
            groups.insert(task.spec.task_id.clone(), list);
        }
        let kept = filter_for_training(&groups);
        let mut store = TrajectoryStore::new();
        for trajs in kept.into_values() {
            for t in trajs {
                store.append(t)?;
            }
        }
        store.push_manifest(RoundManifest {
            round,
            tasks_attempted: self.tasks(Split::Train).len() as u32,
            trajectories_added: store.entries().len() as u32,
            config_hash: self.config_hash.clone(),
            seed: self.cfg.run.run_seed,
        })?;
        store.write_round(&dir, round)?;
        log::info!(
            "round {round}: collected for {} failed tasks, kept {} trajectories in {:.1?}",
            failed.len(),
            store.entries().len(),
            started.elapsed()
        );
        state.mark(round, "collect");
        state.save(&self.out)
    }

    /// Shape the whole accumulated store into this round's weighted dataset.
    fn stage_dataset(&self, state: &mut RunState, round: u32) -> Result<(), RunError> {
        if state.is_done(round, "dataset") {
            return Ok(());
        }
        let dir = self.round_dir(round)?;
        let store = self.load_store(round)?;
        let filtered = filter_for_training(&store.group_by_task());
        let shaped = shape_rewards(&filtered, &self.cfg.shaping)?;
        for w in &shaped.warnings {
            log::warn!("shaping: {w}");
        }
        let dataset_path = dir.join(format!("round_{round}.dataset.jsonl"));
        let stats = emit_dataset(&shaped.examples, &dataset_path)?;
        if round == 0 && stats.failed_sequences != 0 {
            return Err(RunError::Config(format!(
                "round-0 dataset must be purely supervised but has {} failed sequences",
                stats.failed_sequences
            )));
        }
        let stats_path = dir.join(format!("round_{round}.dataset.stats.json"));
        atomic_write(&stats_path, &serde_json::to_string_pretty(&stats)?)
            .map_err(io_err(&stats_path))?;
        log::info!(
            "round {round}: dataset has {} sequences ({} failed)",
            stats.total_sequences,
            stats.failed_sequences
        );
        state.mark(round, "dataset");
        state.save(&self.out)
    }

    /// Train a fresh toy policy on the round's dataset file.
    fn stage_train(&self, state: &mut RunState, round: u32) -> Result<(), RunError> {
        if state.is_done(round, "train") {
            return Ok(());
        }
        let started = Instant::now();
        let dir = self.round_dir(round)?;
        let examples = load_dataset(&dir.join(format!("round_{round}.dataset.jsonl")))?;
        let epochs = if round == 0 {
            self.cfg.trainer.epochs_round0
        } else {
            self.cfg.trainer.epochs_later
        };
        let opts = ObjectiveOptions {
            include_world_model: self.cfg.trainer.include_world_model,
            world_model_on_negative: self.cfg.trainer.world_model_on_negative,
        };
        let (params, train_report) = train_toy(
            &self.fresh_params(),
            &examples,
            &self.tokenizer,
            epochs,
            self.cfg.trainer.learning_rate,
            opts,
        )?;
        let params_path = dir.join("params.json");
        atomic_write(&params_path, &params.to_json()?).map_err(io_err(&params_path))?;
        let log_path = dir.join("train_log.json");
        atomic_write(&log_path, &serde_json::to_string_pretty(&train_report)?)
            .map_err(io_err(&log_path))?;
        log::info!(
            "round {round}: trained {epochs} epochs in {:.1?}, J {:.4} -> {:.4}",
            started.elapsed(),
            train_report.objective_per_epoch.first().unwrap_or(&0.0),
            train_report.objective_per_epoch.last().unwrap_or(&0.0)
        );
        state.mark(round, "train");
        state.save(&self.out)
    }

    fn rewards_by_task(trajs: &[Trajectory]) -> BTreeMap<String, f64> {
        let mut map = BTreeMap::new();
        for t in trajs {
            let entry = map.entry(t.task_id.clone()).or_insert(t.terminal_reward);
            if t.terminal_reward > *entry {
                *entry = t.terminal_reward;
            }
        }
        map
    }

    fn eval_split_rewards(&self, round: u32, split: Split) -> Result<BTreeMap<String, f64>, RunError> {
        if split == Split::Train {
            if round == 0 {
                let store = self.load_store(0)?;
                return Ok(Self::rewards_by_task(store.entries()));
            }
            let path = self
                .out
                .join(format!("round_{round}/eval_train.traj.jsonl"));
            return Ok(Self::rewards_by_task(&self.read_trajectories(&path)?));
        }
        let path = self.out.join(format!(
            "round_{round}/eval_{}.traj.jsonl",
            split.as_str()
        ));
        Ok(Self::rewards_by_task(&self.read_trajectories(&path)?))
    }

    /// Evaluate held-out splits with the round's freshly trained policy and
    /// assemble the round report.
    fn stage_report(&self, state: &mut RunState, round: u32) -> Result<(), RunError> {
        if state.is_done(round, "report") {
            return Ok(());
        }
        let started = Instant::now();
        let dir = self.round_dir(round)?;
        let params = Arc::new(self.load_params(round)?);
        let backend = self.make_backend(&self.cfg.backends.policy, &params)?;
        for split in [Split::Valid, Split::Test] {
            if self.tasks(split).is_empty() {
                continue;
            }
            let evals = self.rollout_split(
                backend.as_ref(),
                split,
                round,
                self.toy_settings().eval_temperature,
                &format!("eval-{}", split.as_str()),
                Origin::PolicyOnly,
            )?;
            self.write_trajectories(
                &dir.join(format!("eval_{}.traj.jsonl", split.as_str())),
                &evals,
            )?;
        }

        let mut splits = BTreeMap::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            let tasks = self.tasks(split);
            if tasks.is_empty() {
                continue;
            }
            let single = self.eval_split_rewards(round, split)?;
            let accumulated = if split == Split::Train {
                let store = self.load_store(round)?;
                tasks
                    .iter()
                    .filter_map(|t| {
                        store
                            .best_accumulated_reward(&t.spec.task_id, round)
                            .map(|r| (t.spec.task_id.clone(), r))
                    })
                    .collect()
            } else {
                let mut per_round = Vec::new();
                for r in 0..=round {
                    per_round.push(self.eval_split_rewards(r, split)?);
                }
                best_of_rewards(&per_round)
            };
            splits.insert(
                split.as_str().to_string(),
                SplitReport {
                    single_shot: split_metrics(tasks, &single),
                    accumulated: split_metrics(tasks, &accumulated),
                },
            );
        }

        let stats = recount_dataset(&dir.join(format!("round_{round}.dataset.jsonl")))?;
        let report = RoundReport {
            round,
            splits,
            dataset: stats,
        };
        let path = dir.join("report.json");
        atomic_write(&path, &serde_json::to_string_pretty(&report)?).map_err(io_err(&path))?;
        log::info!("round {round}: report written in {:.1?}", started.elapsed());
        state.mark(round, "report");
        state.save(&self.out)
    }

    // -- stage-level CLI entry points -----------------------------------------

    /// Evaluate the current policy on the train split and explore failures.
    pub fn collect_round(&self, round: u32) -> Result<(), RunError> {
        if round == 0 {
            return Err(RunError::Precondition(
                "round 0 gathers by prompting; use the bootstrap command".into(),
            ));
        }
        let mut state = RunState::load(&self.out);
        if !state.is_done(round - 1, "report") {
            return Err(RunError::Precondition(format!(
                "round {} has not completed",
                round - 1
            )));
        }
        self.stage_eval_train(&mut state, round)?;
        self.stage_collect(&mut state, round)
    }

    /// Build the round's weighted dataset from the accumulated store.
    pub fn build_dataset(&self, round: u32) -> Result<(), RunError> {
        let mut state = RunState::load(&self.out);
        let gate = if round == 0 { ("bootstrap", 0) } else { ("collect", round) };
        if !state.is_done(gate.1, gate.0) {
            return Err(RunError::Precondition(format!(
                "stage {} of round {} has not completed",
                gate.0, gate.1
            )));
        }
        self.stage_dataset(&mut state, round)
    }

    /// Train a fresh policy on the round's dataset file.
    pub fn train_round(&self, round: u32) -> Result<(), RunError> {
        let mut state = RunState::load(&self.out);
        if !state.is_done(round, "dataset") {
            return Err(RunError::Precondition(format!(
                "round {round} has no dataset yet"
            )));
        }
        self.stage_train(&mut state, round)
    }

    /// The full closed loop: bootstrap plus `rounds - 1` later rounds, then
    /// the aggregate report files.
    pub fn run_loop(&self, rounds: u32) -> Result<(), RunError> {
        let started = Instant::now();
        self.run_round0()?;
        for round in 1..rounds {
            self.run_round(round)?;
        }
        self.write_aggregate_reports()?;
        log::info!("loop of {rounds} round(s) finished in {:.1?}", started.elapsed());
        Ok(())
    }

    pub fn round_report(&self, round: u32) -> Result<RoundReport, RunError> {
        let path = self.out.join(format!("round_{round}/report.json"));
        let body = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_str(&body)?)
    }

    /// Highest round with a completed report, if any.
    pub fn last_completed_round(&self) -> Option<u32> {
        let state = RunState::load(&self.out);
        state
            .completed
            .iter()
            .filter(|(_, stages)| stages.iter().any(|s| s == "report"))
            .map(|(round, _)| *round)
            .max()
    }

    /// Write `report.md` / `report.json` aggregating all completed rounds.
    pub fn write_aggregate_reports(&self) -> Result<(), RunError> {
        let Some(last) = self.last_completed_round() else {
            return Err(RunError::Precondition(
                "no completed rounds to report".into(),
            ));
        };
        let reports: Vec<RoundReport> = (0..=last)
            .map(|r| self.round_report(r))
            .collect::<Result<_, _>>()?;
        let json_path = self.out.join("report.json");
        atomic_write(&json_path, &serde_json::to_string_pretty(&reports)?)
            .map_err(io_err(&json_path))?;
        let md = report::render_markdown(self.env_cfg.env_id(), &reports);
        let md_path = self.out.join("report.md");
        atomic_write(&md_path, &md).map_err(io_err(&md_path))?;
        Ok(())
    }

    /// Best-of-`shots` evaluation over the stored rollouts of the last
    /// `shots` rounds' policies. `shots = 1` reads the latest round alone.
    pub fn evaluate(&self, split: Split, shots: u32) -> Result<SplitMetrics, RunError> {
        let Some(last) = self.last_completed_round() else {
            return Err(RunError::Precondition(
                "no completed rounds to evaluate".into(),
            ));
        };
        let shots = shots.max(1);
        let first = last.saturating_sub(shots - 1);
        let mut per_round = Vec::new();
        for r in first..=last {
            per_round.push(self.eval_split_rewards(r, split)?);
        }
        let best = best_of_rewards(&per_round);
        let metrics = split_metrics(self.tasks(split), &best);
        let path = self
            .out
            .join(format!("evaluate_{}_shots_{shots}.json", split.as_str()));
        atomic_write(&path, &serde_json::to_string_pretty(&metrics)?).map_err(io_err(&path))?;
        Ok(metrics)
    }
}
