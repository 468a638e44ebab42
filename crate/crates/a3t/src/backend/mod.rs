//! Language-backend contract and the three implementations: a table-driven
//! scripted backend for deterministic tests and bootstrap prompting, an
//! OpenAI-compatible HTTP completion client, and a trainable toy softmax
//! policy that closes the loop at desk scale.

mod http;
mod scripted;
pub mod toy;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::ScriptedBackend;
pub use toy::{ToyBackend, ToyPolicyParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unscripted prompt: no table entry for digest {digest} (prompt head: {head:?})")]
    UnscriptedPrompt { digest: String, head: String },
    #[error("completion was empty after {attempts} attempt(s)")]
    EmptyCompletion { attempts: u32 },
    #[error("http request failed after {attempts} attempt(s), last status {status:?}: {detail}")]
    Http {
        attempts: u32,
        status: Option<u16>,
        detail: String,
    },
    #[error("missing api key: environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("unknown token {token:?} for the toy policy")]
    UnknownToken { token: String },
    #[error("toy policy has an empty candidate set for generation")]
    NoCandidates,
}

/// One completion call. The seed is honored by the scripted and toy backends
/// so that identical requests give identical outputs.
#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub seed: u64,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 256,
            temperature: 0.0,
            stop: Vec::new(),
            seed: 0,
        }
    }

    pub fn with_stop(mut self, stop: &[&str]) -> Self {
        self.stop = stop.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// A text-completion backend. Shared read-only across rollout workers.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;

    fn name(&self) -> &'static str {
        "backend"
    }
}

/// Cut `text` at the first occurrence of any stop string.
pub fn truncate_at_stop(text: &str, stop: &[String]) -> String {
    let mut cut = text.len();
    for s in stop {
        if s.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(s.as_str()) {
            cut = cut.min(pos);
        }
    }
    text[..cut].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_truncation_takes_first_match() {
        let stops = vec!["\nObservation:".to_string(), "END".to_string()];
        assert_eq!(
            truncate_at_stop("reason\nAction: go END\nObservation: x", &stops),
            "reason\nAction: go "
        );
        assert_eq!(truncate_at_stop("clean", &stops), "clean");
    }
}
