//! The reason-then-act policy agent and the act-then-reason annotator.
//!
//! Both agents share one episode history; they differ only in the rendered
//! order of reasoning and action inside each item. The annotator's prompt
//! ends with the sampled action followed by the rationale cue, and its answer
//! is spliced *before* that action in the reason-then-act trajectory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CompletionRequest};
use crate::prompt::{unwrap_action, wrap_action, ACTRE_CUE, REACT_CUE};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("annotator returned an empty rationale after a retry")]
    EmptyRationale,
}

/// One completed (observation, reasoning, action) item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub observation: String,
    pub reasoning: String,
    pub action: String,
}

/// Reason-then-act view over an episode: completed items plus the pending
/// observation awaiting a (reason, action) pair.
#[derive(Debug, Clone)]
pub struct AgentContext<'a> {
    pub exemplar: &'a str,
    pub goal: &'a str,
    pub items: &'a [HistoryItem],
    pub current_obs: &'a str,
}

/// Act-then-reason view over the same episode content.
#[derive(Debug, Clone)]
pub struct ActReContext<'a> {
    pub exemplar: &'a str,
    pub goal: &'a str,
    pub items: &'a [HistoryItem],
    pub current_obs: &'a str,
}

/// Render the policy prompt: exemplar, then each item as
/// observation / reason / action, ending at the reason cue.
pub fn render_react_prompt(ctx: &AgentContext) -> String {
    let mut out = String::new();
    out.push_str(ctx.exemplar.trim_end());
    out.push_str("\n\n");
    for item in ctx.items {
        out.push_str(&format!(
            "Observation: {}\n{REACT_CUE} {}\nAction: {}\n",
            item.observation,
            item.reasoning,
            wrap_action(&item.action)
        ));
    }
    out.push_str(&format!("Observation: {}\n{REACT_CUE}", ctx.current_obs));
    out
}

/// Render the annotator prompt: same items in act-then-reason order, ending
/// with the sampled action and the rationale cue.
pub fn render_actre_prompt(ctx: &ActReContext, pending_action: &str) -> String {
    let mut out = String::new();
    out.push_str(ctx.exemplar.trim_end());
    out.push_str("\n\n");
    for item in ctx.items {
        out.push_str(&format!(
            "Observation: {}\nAction: {}\n{ACTRE_CUE} [{}]\n",
            item.observation,
            wrap_action(&item.action),
            item.reasoning
        ));
    }
    out.push_str(&format!(
        "Observation: {}\nAction: {}\n{ACTRE_CUE}",
        ctx.current_obs,
        wrap_action(pending_action)
    ));
    out
}

/// Decoding knobs for one agent call.
#[derive(Debug, Clone, Copy)]
pub struct DecodeParams {
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl DecodeParams {
    pub fn greedy(seed: u64) -> Self {
        Self {
            temperature: 0.0,
            seed,
            max_tokens: 256,
        }
    }

    pub fn sampled(seed: u64) -> Self {
        Self {
            temperature: 1.0,
            seed,
            max_tokens: 256,
        }
    }
}

/// A proposed (reasoning, action) pair. `parsed` is false when the completion
/// did not split at the action delimiter even after a retry; the raw text is
/// then passed through as the action.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactProposal {
    pub reasoning: String,
    pub action: String,
    pub parsed: bool,
}

fn parse_proposal(completion: &str) -> Option<(String, String)> {
    // The completion continues the "Reason:" line: "<reason>\nAction: <act>".
    let pos = completion.find("Action:")?;
    let reason = completion[..pos].trim().to_string();
    let action_line = completion[pos + "Action:".len()..]
        .lines()
        .next()
        .unwrap_or("")
        .trim();
    if action_line.is_empty() {
        return None;
    }
    Some((reason, unwrap_action(action_line)))
}

/// Ask the policy for the next (reasoning, action). One completion parsed at
/// the `Action:` delimiter; on a parse failure the call is retried once and
/// then the raw text is returned as the action with an empty reasoning.
pub fn react_propose(
    backend: &dyn Backend,
    ctx: &AgentContext,
    decode: DecodeParams,
) -> Result<ReactProposal, AgentError> {
    let prompt = render_react_prompt(ctx);
    let mut raw = String::new();
    for attempt in 0..2u64 {
        let req = CompletionRequest {
            prompt: prompt.clone(),
            max_tokens: decode.max_tokens,
            temperature: decode.temperature,
            stop: vec!["\nObservation:".into()],
            seed: decode.seed.wrapping_add(attempt),
        };
        raw = backend.complete(&req)?;
        if let Some((reasoning, action)) = parse_proposal(&raw) {
            return Ok(ReactProposal {
                reasoning,
                action,
                parsed: true,
            });
        }
    }
    log::warn!("unparseable policy completion, passing raw text through as action");
    Ok(ReactProposal {
        reasoning: String::new(),
        action: raw.trim().to_string(),
        parsed: false,
    })
}

/// Ask the annotator to explain `sampled_action` a posteriori. The returned
/// rationale is spliced before the action in the reason-then-act trajectory.
pub fn actre_explain(
    backend: &dyn Backend,
    ctx: &ActReContext,
    sampled_action: &str,
    decode: DecodeParams,
) -> Result<String, AgentError> {
    let prompt = render_actre_prompt(ctx, sampled_action);
    for attempt in 0..2u64 {
        let req = CompletionRequest {
            prompt: prompt.clone(),
            max_tokens: decode.max_tokens,
            temperature: decode.temperature,
            stop: vec!["\nObservation:".into(), "\nAction:".into()],
            seed: decode.seed.wrapping_add(attempt),
        };
        let raw = backend.complete(&req)?;
        let trimmed = raw.trim();
        let rationale = trimmed
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .unwrap_or(trimmed);
        if !rationale.is_empty() {
            return Ok(rationale.to_string());
        }
    }
    Err(AgentError::EmptyRationale)
}
