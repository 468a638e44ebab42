//! Reward shaping, the weighted log-likelihood objective with its
//! world-modeling term, the three-term decomposition of a (K successes + 1
//! failure) task group, exact training of the toy policy, and the weighted
//! dataset emitter for external trainers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::toy::{context_features, GradTable, ToyPolicyParams};
use crate::prompt::goal_phrase;
use crate::trajectory::{SegmentKind, Trajectory};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("pairing guarantee violated upstream: task {task_id} has a failure but no success under the current threshold")]
    PairingViolated { task_id: String },
    #[error("unknown token for {kind:?} segment {text:?} of task {task_id}")]
    UnknownToken {
        kind: SegmentKind,
        text: String,
        task_id: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: objective value {value}")]
    Diverged { epoch: u32, value: f64 },
    #[error("dataset i/o failed for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Maps segment texts to template tokens. The environment tokenizer is the
/// production implementation; tests may substitute their own.
pub trait Tokenize {
    fn token_for(&self, kind: SegmentKind, text: &str) -> Option<String>;
}

impl Tokenize for crate::env::SegmentTokenizer {
    fn token_for(&self, kind: SegmentKind, text: &str) -> Option<String> {
        crate::env::SegmentTokenizer::token_for(self, kind, text)
    }
}

/// Tokenizer whose tokens are the texts themselves. Keeps small fixtures
/// independent of any environment grammar.
pub struct VerbatimTokenizer;

impl Tokenize for VerbatimTokenizer {
    fn token_for(&self, _kind: SegmentKind, text: &str) -> Option<String> {
        Some(text.to_string())
    }
}

// ---------------------------------------------------------------------------
// Reward shaping
// ---------------------------------------------------------------------------

/// How failed trajectories are weighted relative to successes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ShapingMode {
    /// Failures carry weight -1; the supervised term on them is zeroed and
    /// each success/failure pair contributes a likelihood contrast.
    BinarizedMinusOne,
    /// Failures keep their raw environment reward.
    OriginalReward,
    /// Failures carry a small fixed positive weight.
    FixedSmall { value: f64 },
    /// Failures are dropped; pure supervised fine-tuning on successes.
    SupervisedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapingPolicy {
    #[serde(flatten)]
    pub mode: ShapingMode,
    /// Reward at or above which a trajectory counts as successful.
    pub success_threshold: f64,
    /// Prepend a "Success." / "Fail." header segment instead of weighting.
    pub label_condition: bool,
}

impl Default for ShapingPolicy {
    fn default() -> Self {
        Self {
            mode: ShapingMode::BinarizedMinusOne,
            success_threshold: 1.0,
            label_condition: false,
        }
    }
}

impl ShapingPolicy {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.success_threshold > 0.0 && self.success_threshold <= 1.0) {
            return Err(ObjectiveError::Domain(format!(
                "success_threshold {} outside (0,1]",
                self.success_threshold
            )));
        }
        if let ShapingMode::FixedSmall { value } = self.mode {
            if !(value > 0.0 && value < 1.0) {
                return Err(ObjectiveError::Domain(format!(
                    "fixed_small value {value} outside (0,1)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
}

/// Provenance pointer back into the trajectory store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRef {
    pub task_id: String,
    pub round: u32,
    pub seed: u64,
}

/// One trainable sequence: the trajectory's segments in rendering order,
/// weighted as a whole.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedExample {
    pub task_id: String,
    pub trajectory: TrajectoryRef,
    pub weight: f64,
    pub segments: Vec<Segment>,
}

/// Trajectory segments in reason-then-act rendering order.
pub fn segments_of(traj: &Trajectory) -> Vec<Segment> {
    let mut out = Vec::new();
    for step in &traj.steps {
        out.push(Segment {
            kind: SegmentKind::Observation,
            text: step.observation.clone(),
        });
        if let Some(r) = &step.reasoning {
            out.push(Segment {
                kind: SegmentKind::Reasoning,
                text: r.text.clone(),
            });
        }
        if let Some(a) = &step.action {
            out.push(Segment {
                kind: SegmentKind::Action,
                text: a.text.clone(),
            });
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ShapingOutcome {
    pub examples: Vec<WeightedExample>,
    pub warnings: Vec<String>,
}

/// Weight every trajectory of every (already filtered) task group. Successes
/// are those with reward at or above the threshold and always weigh 1;
/// failures weigh per the mode. Label conditioning keeps everything at weight
/// 1 and prepends a header segment instead.
pub fn shape_rewards(
    groups: &BTreeMap<String, Vec<Trajectory>>,
    policy: &ShapingPolicy,
) -> Result<ShapingOutcome, ObjectiveError> {
    policy.validate()?;
    let mut examples = Vec::new();
    let mut warnings = Vec::new();
    for (task_id, trajs) in groups {
        let successes = trajs
            .iter()
            .filter(|t| t.terminal_reward >= policy.success_threshold)
            .count();
        let failures = trajs.len() - successes;
        if failures > 0 && successes == 0 {
            return Err(ObjectiveError::PairingViolated {
                task_id: task_id.clone(),
            });
        }
        if policy.mode == ShapingMode::BinarizedMinusOne
            && !policy.label_condition
            && failures > 0
            && successes == 1
        {
            let msg = format!(
                "task {task_id}: K=1 with a -1-weighted failure reduces to a bare \
                 likelihood contrast, which is prone to training instability; collect \
                 multiple successful trajectories so that K > 1"
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        for traj in trajs {
            let positive = traj.terminal_reward >= policy.success_threshold;
            let (weight, header) = if policy.label_condition {
                (1.0, Some(if positive { "Success." } else { "Fail." }))
            } else if positive {
                (1.0, None)
            } else {
                match policy.mode {
                    ShapingMode::BinarizedMinusOne => (-1.0, None),
                    ShapingMode::OriginalReward => (traj.terminal_reward, None),
                    ShapingMode::FixedSmall { value } => (value, None),
                    ShapingMode::SupervisedOnly => continue,
                }
            };
            let mut segments = segments_of(traj);
            if let Some(h) = header {
                segments.insert(
                    0,
                    Segment {
                        kind: SegmentKind::Observation,
                        text: h.to_string(),
                    },
                );
            }
            examples.push(WeightedExample {
                task_id: task_id.clone(),
                trajectory: TrajectoryRef {
                    task_id: traj.task_id.clone(),
                    round: traj.round,
                    seed: traj.seed,
                },
                weight,
                segments,
            });
        }
    }
    Ok(ShapingOutcome { examples, warnings })
}

// ---------------------------------------------------------------------------
// Three-term decomposition of a task group
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecompositionNote {
    /// r_f = 0: the group objective reduces to supervised fine-tuning on the
    /// successful trajectories alone.
    PureSupervised,
    /// r_f = -1: the supervised term on the failed trajectory is zeroed.
    FailTermZeroed,
    /// r_f = -1 and K = 1: only the likelihood contrast remains, which is
    /// prone to training instability.
    ContrastOnlyInstability,
}

/// Coefficients of the regrouped objective for K successes and one failure
/// with shaped reward r_f:
///   sft_success = 1 - (1 - r_f) / 2K
///   sft_fail    = (1 + r_f) / 2
///   contrast    = (1 - r_f) / 2K
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveDecomposition {
    pub k: u32,
    pub r_f: f64,
    pub sft_success_coeff: f64,
    pub sft_fail_coeff: f64,
    pub contrast_coeff: f64,
    pub notes: Vec<DecompositionNote>,
}

pub fn decompose(k: u32, r_f: f64) -> Result<ObjectiveDecomposition, ObjectiveError> {
    if k < 1 {
        return Err(ObjectiveError::Domain(format!("K must be >= 1, got {k}")));
    }
    let kf = k as f64;
    let mut notes = Vec::new();
    if r_f == 0.0 {
        notes.push(DecompositionNote::PureSupervised);
    }
    if r_f == -1.0 {
        notes.push(DecompositionNote::FailTermZeroed);
        if k == 1 {
            notes.push(DecompositionNote::ContrastOnlyInstability);
            log::warn!(
                "K=1 with r_f=-1 leaves a bare likelihood contrast; expect training instability"
            );
        }
    }
    Ok(ObjectiveDecomposition {
        k,
        r_f,
        sft_success_coeff: 1.0 - (1.0 - r_f) / (2.0 * kf),
        sft_fail_coeff: (1.0 + r_f) / 2.0,
        contrast_coeff: (1.0 - r_f) / (2.0 * kf),
        notes,
    })
}

impl ObjectiveDecomposition {
    /// Expand the three terms back into per-trajectory weights:
    /// each success receives sft_success + contrast, the failure receives
    /// sft_fail - K * contrast. These must equal {1, ..., 1, r_f}.
    pub fn recombined_weights(&self) -> (f64, f64) {
        (
            self.sft_success_coeff + self.contrast_coeff,
            self.sft_fail_coeff - self.k as f64 * self.contrast_coeff,
        )
    }
}

// ---------------------------------------------------------------------------
// Objective value and exact gradient
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveOptions {
    /// Score observation segments (the world-modeling term).
    pub include_world_model: bool,
    /// Keep observation segments inside negatively weighted examples. The
    /// default follows the objective's form; disabling it is an ablation.
    pub world_model_on_negative: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            include_world_model: true,
            world_model_on_negative: true,
        }
    }
}

struct SegmentJob {
    features: Vec<u32>,
    token_id: u32,
}

struct ExampleJob {
    weight: f64,
    segments: Vec<SegmentJob>,
}

fn example_goal(segments: &[Segment]) -> String {
    let marked = segments.iter().find(|s| {
        s.kind == SegmentKind::Observation
            && (s.text.contains("Your task is to:") || s.text.contains("Instruction:"))
    });
    let first_obs = marked.or_else(|| {
        segments
            .iter()
            .find(|s| s.kind == SegmentKind::Observation)
    });
    first_obs.map_or_else(String::new, |s| goal_phrase(&s.text))
}

/// Tokenize and featurize every scorable segment once. Zero-weight examples
/// are inert: they contribute nothing to the sum, and counting them into the
/// 1/M average would break the exact reduction to supervised fine-tuning, so
/// M counts only nonzero-weight examples.
fn prepare_jobs(
    params: &ToyPolicyParams,
    examples: &[WeightedExample],
    tokenizer: &dyn Tokenize,
    opts: ObjectiveOptions,
) -> Result<Vec<ExampleJob>, ObjectiveError> {
    let mut jobs = Vec::new();
    for ex in examples {
        if ex.weight == 0.0 {
            continue;
        }
        let goal = example_goal(&ex.segments);
        let mut last_obs = String::new();
        let mut last_action = String::new();
        let mut segments = Vec::new();
        for seg in &ex.segments {
            let unknown = || ObjectiveError::UnknownToken {
                kind: seg.kind,
                text: seg.text.chars().take(80).collect(),
                task_id: ex.task_id.clone(),
            };
            let token = tokenizer
                .token_for(seg.kind, &seg.text)
                .ok_or_else(unknown)?;
            let token_id = params.token_id(&token).ok_or_else(unknown)?;
            let skip_world_model = seg.kind == SegmentKind::Observation
                && (!opts.include_world_model
                    || (ex.weight < 0.0 && !opts.world_model_on_negative));
            if !skip_world_model {
                let features =
                    context_features(&goal, &last_obs, &last_action, params.hash_width());
                segments.push(SegmentJob { features, token_id });
            }
            match seg.kind {
                SegmentKind::Observation => last_obs = seg.text.clone(),
                SegmentKind::Action => last_action = seg.text.clone(),
                SegmentKind::Reasoning => {}
            }
        }
        jobs.push(ExampleJob {
            weight: ex.weight,
            segments,
        });
    }
    Ok(jobs)
}

/// Fixed-bracketing pairwise sum, so the reduction order never depends on
/// how work is scheduled.
fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

fn evaluate_jobs(params: &ToyPolicyParams, jobs: &[ExampleJob]) -> (f64, GradTable) {
    let mut grad = GradTable::new(params.vocab_len());
    if jobs.is_empty() {
        return (0.0, grad);
    }
    let m = jobs.len() as f64;
    let mut per_example = Vec::with_capacity(jobs.len());
    for job in jobs {
        let scale = job.weight / m;
        let mut sum_lp = 0.0;
        for seg in &job.segments {
            let scores = params.scores(&seg.features);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            sum_lp += scores[seg.token_id as usize] - max - z.ln();
            let mut delta: Vec<f64> = exps.iter().map(|e| -(e / z)).collect();
            delta[seg.token_id as usize] += 1.0;
            for f in &seg.features {
                let row = grad.row_mut(*f);
                for (r, d) in row.iter_mut().zip(&delta) {
                    *r += scale * d;
                }
            }
        }
        per_example.push(scale * sum_lp);
    }
    (pairwise_sum(&per_example), grad)
}

/// J = (1/M) sum_m w_m sum_t [ include_world_model * log p(o_t | history)
///     + log p(a_t | history) ], with both reasoning and action segments
/// counting as actions, plus its exact gradient.
pub fn objective_value_and_grad(
    params: &ToyPolicyParams,
    examples: &[WeightedExample],
    tokenizer: &dyn Tokenize,
    opts: ObjectiveOptions,
) -> Result<(f64, GradTable), ObjectiveError> {
    let jobs = prepare_jobs(params, examples, tokenizer, opts)?;
    Ok(evaluate_jobs(params, &jobs))
}

// ---------------------------------------------------------------------------
// Toy trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Objective value at the start of each epoch.
    pub objective_per_epoch: Vec<f64>,
}

/// Full-batch gradient ascent on the objective with per-cell adaptive step
/// normalization (Adagrad). The diagonal scaling makes the step size
/// invariant to the 1/M averaging and to trajectory length, which keeps one
/// learning rate stable from the first small bootstrap set through the large
/// accumulated sets of later rounds.
pub fn train_toy(
    params: &ToyPolicyParams,
    examples: &[WeightedExample],
    tokenizer: &dyn Tokenize,
    epochs: u32,
    learning_rate: f64,
    opts: ObjectiveOptions,
) -> Result<(ToyPolicyParams, TrainReport), ObjectiveError> {
    if examples.is_empty() {
        return Err(ObjectiveError::EmptyDataset);
    }
    let jobs = prepare_jobs(params, examples, tokenizer, opts)?;
    let mut params = params.clone();
    let mut cache: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut objective_per_epoch = Vec::with_capacity(epochs as usize);
    for epoch in 0..epochs {
        let (j, grad) = evaluate_jobs(&params, &jobs);
        if !j.is_finite() {
            return Err(ObjectiveError::Diverged { epoch, value: j });
        }
        log::debug!("epoch {epoch}: J = {j:.6}");
        objective_per_epoch.push(j);
        for (f, row) in &grad.rows {
            let cache_row = cache
                .entry(*f)
                .or_insert_with(|| vec![0.0; params.vocab_len()]);
            let weight_row = params.row_mut(*f);
            for ((w, g), c) in weight_row.iter_mut().zip(row).zip(cache_row.iter_mut()) {
                *c += g * g;
                if *c > 0.0 {
                    *w += learning_rate * g / (c.sqrt() + 1e-12);
                }
            }
        }
    }
    Ok((params, TrainReport { objective_per_epoch }))
}

// ---------------------------------------------------------------------------
// Dataset emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_sequences: u64,
    pub failed_sequences: u64,
    pub failed_ratio: f64,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    task_id: String,
    weight: f64,
    segments: Vec<Segment>,
}

fn stats_from(counts: (u64, u64)) -> DatasetStats {
    let (total, failed) = counts;
    DatasetStats {
        total_sequences: total,
        failed_sequences: failed,
        failed_ratio: if total > 0 {
            failed as f64 / total as f64
        } else {
            0.0
        },
    }
}

/// Write the weighted dataset as JSONL and report its sentence statistics.
/// A sequence counts as failed exactly when its example weight is below 1;
/// successes carry weight 1 in every shaping mode, so the rule is mode-free
/// and recomputable from the file alone.
pub fn emit_dataset(
    examples: &[WeightedExample],
    path: &Path,
) -> Result<DatasetStats, ObjectiveError> {
    let mut lines = String::new();
    let mut total = 0u64;
    let mut failed = 0u64;
    for ex in examples {
        total += ex.segments.len() as u64;
        if ex.weight < 1.0 {
            failed += ex.segments.len() as u64;
        }
        let record = DatasetRecord {
            task_id: ex.task_id.clone(),
            weight: ex.weight,
            segments: ex.segments.clone(),
        };
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
    }
    crate::util::atomic_write(path, &lines).map_err(|source| ObjectiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(stats_from((total, failed)))
}

/// Read an emitted dataset back into weighted examples, e.g. to train from a
/// round's dataset file. The trajectory refs carry only the task id; the file
/// format does not record store provenance.
pub fn load_dataset(path: &Path) -> Result<Vec<WeightedExample>, ObjectiveError> {
    let file = fs::File::open(path).map_err(|source| ObjectiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| ObjectiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)?;
        out.push(WeightedExample {
            trajectory: TrajectoryRef {
                task_id: record.task_id.clone(),
                round: 0,
                seed: 0,
            },
            task_id: record.task_id,
            weight: record.weight,
            segments: record.segments,
        });
    }
    Ok(out)
}

/// Recompute the statistics from an emitted file.
pub fn recount_dataset(path: &Path) -> Result<DatasetStats, ObjectiveError> {
    let file = fs::File::open(path).map_err(|source| ObjectiveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut total = 0u64;
    let mut failed = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| ObjectiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)?;
        total += record.segments.len() as u64;
        if record.weight < 1.0 {
            failed += record.segments.len() as u64;
        }
    }
    Ok(stats_from((total, failed)))
}
