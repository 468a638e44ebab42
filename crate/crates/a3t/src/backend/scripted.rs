//! Table-driven scripted backend. Completions are keyed by a normalized
//! prompt digest; anything off-script is a hard error, never a silent
//! fallback, which keeps tests hermetic.

use std::collections::HashMap;

use super::{truncate_at_stop, Backend, BackendError, CompletionRequest};
use crate::util::hex_digest;

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    table: HashMap<String, String>,
}

/// Trim trailing whitespace per line and surrounding blank lines, so that
/// byte-equal-modulo-whitespace prompts share a digest.
pub fn normalize_prompt(prompt: &str) -> String {
    let lines: Vec<&str> = prompt.lines().map(str::trim_end).collect();
    let start = lines.iter().position(|l| !l.is_empty()).unwrap_or(0);
    let end = lines.iter().rposition(|l| !l.is_empty()).map_or(0, |i| i + 1);
    lines[start..end].join("\n")
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn digest_of(prompt: &str) -> String {
        hex_digest(&normalize_prompt(prompt))
    }

    /// Register the completion for a prompt. Later registrations overwrite.
    pub fn register(&mut self, prompt: &str, completion: impl Into<String>) {
        self.table.insert(Self::digest_of(prompt), completion.into());
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let digest = Self::digest_of(&request.prompt);
        match self.table.get(&digest) {
            Some(completion) => Ok(truncate_at_stop(completion, &request.stop)),
            None => Err(BackendError::UnscriptedPrompt {
                digest,
                head: request.prompt.chars().take(60).collect(),
            }),
        }
    }

    fn name(&self) -> &'static str {
        "scripted"
    }
}
