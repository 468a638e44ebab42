//! Run configuration: TOML sections [env], [run], [exploration], [shaping],
//! [backends.*], [trainer], plus CLI overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::HttpBackendConfig;
use crate::composer::ExplorationConfig;
use crate::env::EnvConfig;
use crate::objective::ShapingPolicy;

use super::RunError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    /// Total rounds including the bootstrap round 0.
    pub rounds: u32,
    pub train_tasks: usize,
    pub valid_tasks: usize,
    pub test_tasks: usize,
    pub run_seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    /// Optional directory of exemplar prompt overrides
    /// (`<dir>/<env_id>/react.txt`, `<dir>/<env_id>/actre.txt`).
    pub prompts_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            rounds: 4,
            train_tasks: 50,
            valid_tasks: 10,
            test_tasks: 20,
            run_seed: 17,
            workers: 2,
            out: PathBuf::from("runs/out"),
            prompts_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackendSettings {
    /// Decoding temperature for exploration and bootstrap gathering.
    pub explore_temperature: f64,
    /// Decoding temperature for evaluation rollouts.
    pub eval_temperature: f64,
    /// Hashed-feature table width.
    pub feature_width: u32,
}

impl Default for ToyBackendSettings {
    fn default() -> Self {
        Self {
            explore_temperature: 1.0,
            eval_temperature: 0.0,
            feature_width: crate::backend::toy::DEFAULT_HASH_WIDTH,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleSettings {
    /// Fraction of tasks the scripted prompting agent solves outright; the
    /// rest get a plausible-but-wrong script.
    pub coverage: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { coverage: 0.8 }
    }
}

/// One backend role assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// The trainable toy softmax policy.
    Toy(ToyBackendSettings),
    /// Table-driven scripted agent generated from the environment oracle;
    /// only valid for the bootstrap role.
    OracleScripted(OracleSettings),
    /// OpenAI-compatible completions endpoint.
    Http(HttpBackendConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Toy(ToyBackendSettings::default())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendsSection {
    pub policy: BackendSpec,
    pub actre: BackendSpec,
    /// Backend for round-0 prompting; defaults to the policy backend.
    pub bootstrap: Option<BackendSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerSection {
    pub epochs_round0: u32,
    pub epochs_later: u32,
    pub learning_rate: f64,
    /// Score observation segments (the world-modeling term).
    pub include_world_model: bool,
    /// Keep world-model terms inside negatively weighted trajectories.
    pub world_model_on_negative: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            epochs_round0: 10,
            epochs_later: 6,
            learning_rate: 0.1,
            include_world_model: true,
            world_model_on_negative: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub exploration: ExplorationConfig,
    #[serde(default)]
    pub shaping: ShapingPolicy,
    #[serde(default)]
    pub backends: BackendsSection,
    #[serde(default)]
    pub trainer: TrainerSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let body = fs::read_to_string(path).map_err(|source| RunError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&body)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.run.rounds < 1 {
            return Err(RunError::Config("run.rounds must be at least 1".into()));
        }
        if self.run.train_tasks == 0 {
            return Err(RunError::Config("run.train_tasks must be positive".into()));
        }
        if self.run.workers == 0 {
            return Err(RunError::Config("run.workers must be positive".into()));
        }
        self.exploration
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.shaping
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        for (role, spec) in [
            ("policy", &self.backends.policy),
            ("actre", &self.backends.actre),
        ] {
            if matches!(spec, BackendSpec::OracleScripted(_)) {
                return Err(RunError::Config(format!(
                    "backends.{role}: oracle_scripted is only valid for the bootstrap role"
                )));
            }
        }
        Ok(())
    }

    /// Apply CLI overrides on top of the file config.
    pub fn with_overrides(
        mut self,
        seed: Option<u64>,
        workers: Option<usize>,
        out: Option<PathBuf>,
    ) -> Self {
        if let Some(s) = seed {
            self.run.run_seed = s;
        }
        if let Some(w) = workers {
            self.run.workers = w;
        }
        if let Some(o) = out {
            self.run.out = o;
        }
        self
    }

    /// Stable digest of the effective configuration, recorded in manifests.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        crate::util::hex_digest(&canonical)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::BudgetMode;
    use crate::objective::ShapingMode;

    #[test]
    fn minimal_toml_gets_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [env]
            env_id = "treasure_grid"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.run.rounds, 4);
        assert_eq!(cfg.exploration.sample_probability, 0.5);
        assert!(matches!(cfg.shaping.mode, ShapingMode::BinarizedMinusOne));
        assert!(matches!(cfg.backends.policy, BackendSpec::Toy(_)));
        assert!(cfg.backends.bootstrap.is_none());
    }

    #[test]
    fn full_toml_roundtrip() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [env]
            env_id = "mini_shop"
            catalog_size = 20
            max_steps = 25

            [run]
            rounds = 2
            train_tasks = 12
            run_seed = 99
            workers = 3
            out = "runs/ms"

            [exploration]
            sample_probability = 0.4
            invalid_streak_threshold = 3
            max_steps = 25

            [exploration.budget]
            mode = "force_then_stop"
            force = 3
            cap = 20

            [shaping]
            mode = "fixed_small"
            value = 0.1
            success_threshold = 0.75

            [backends.policy]
            kind = "toy"
            explore_temperature = 0.9

            [backends.actre]
            kind = "toy"

            [backends.bootstrap]
            kind = "oracle_scripted"
            coverage = 0.7

            [trainer]
            epochs_round0 = 8
            learning_rate = 0.2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.env.env_id(), "mini_shop");
        assert_eq!(
            cfg.exploration.budget,
            BudgetMode::ForceThenStop { force: 3, cap: 20 }
        );
        assert!(matches!(
            cfg.shaping.mode,
            ShapingMode::FixedSmall { value } if value == 0.1
        ));
        assert_eq!(cfg.shaping.success_threshold, 0.75);
        assert!(matches!(
            cfg.backends.bootstrap,
            Some(BackendSpec::OracleScripted(OracleSettings { coverage })) if coverage == 0.7
        ));
        assert_eq!(cfg.trainer.epochs_round0, 8);
        cfg.validate().unwrap();
        // Hash is stable across identical configs.
        assert_eq!(cfg.config_hash(), cfg.clone().config_hash());
    }

    #[test]
    fn oracle_policy_role_is_rejected() {
        let cfg: RunConfig = toml::from_str(
            r#"
            [env]
            env_id = "treasure_grid"

            [backends.policy]
            kind = "oracle_scripted"
            "#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }
}
