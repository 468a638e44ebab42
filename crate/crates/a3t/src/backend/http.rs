//! OpenAI-compatible HTTP completion client with retry and exponential
//! backoff. This is the only module that performs network I/O; it exists so a
//! real model can be slotted into either agent role without touching the loop.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{truncate_at_stop, Backend, BackendError, CompletionRequest};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "A3T_API_KEY";

#[derive(Debug, Clone, serde::Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    /// Full completions endpoint URL.
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Total tries, including the first request.
    pub max_tries: u32,
    /// Base backoff delay; doubles per retry.
    pub backoff_base_ms: u64,
    /// Name of the environment variable carrying the API key. Requests go out
    /// unauthenticated when the variable is unset and `require_key` is false.
    pub api_key_env: String,
    pub require_key: bool,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1/completions".into(),
            model: "gpt-3.5-turbo-instruct".into(),
            timeout_secs: 30,
            max_tries: 5,
            backoff_base_ms: 1000,
            api_key_env: API_KEY_ENV.into(),
            require_key: false,
        }
    }
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

#[derive(Debug, Deserialize)]
struct CompletionsResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .expect("reqwest client");
        Self { cfg, client }
    }

    fn api_key(&self) -> Result<Option<String>, BackendError> {
        match std::env::var(&self.cfg.api_key_env) {
            Ok(k) if !k.is_empty() => Ok(Some(k)),
            _ if self.cfg.require_key => {
                Err(BackendError::MissingApiKey(self.cfg.api_key_env.clone()))
            }
            _ => Ok(None),
        }
    }

    fn retryable(status: u16) -> bool {
        status == 429 || (500..600).contains(&status)
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let key = self.api_key()?;
        let body = json!({
            "model": self.cfg.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "stop": request.stop,
        });
        let mut last_status: Option<u16> = None;
        let mut last_detail = String::new();
        for attempt in 0..self.cfg.max_tries.max(1) {
            if attempt > 0 {
                let delay = self.cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let mut req = self.client.post(&self.cfg.base_url).json(&body);
            if let Some(k) = &key {
                req = req.bearer_auth(k);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    if resp.status().is_success() {
                        let parsed: CompletionsResponse = resp.json().map_err(|e| {
                            BackendError::Http {
                                attempts: attempt + 1,
                                status: Some(status),
                                detail: format!("bad response body: {e}"),
                            }
                        })?;
                        let text = parsed
                            .choices
                            .first()
                            .map(|c| c.text.clone())
                            .unwrap_or_default();
                        if text.is_empty() {
                            return Err(BackendError::EmptyCompletion {
                                attempts: attempt + 1,
                            });
                        }
                        return Ok(truncate_at_stop(&text, &request.stop));
                    }
                    last_status = Some(status);
                    last_detail = resp.text().unwrap_or_default();
                    if !Self::retryable(status) {
                        return Err(BackendError::Http {
                            attempts: attempt + 1,
                            status: last_status,
                            detail: last_detail,
                        });
                    }
                    log::warn!(
                        "completions endpoint returned {status}, retry {} of {}",
                        attempt + 1,
                        self.cfg.max_tries
                    );
                }
                Err(e) => {
                    last_status = None;
                    last_detail = e.to_string();
                    log::warn!("completions request failed ({e}), retry {}", attempt + 1);
                }
            }
        }
        Err(BackendError::Http {
            attempts: self.cfg.max_tries,
            status: last_status,
            detail: last_detail,
        })
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    /// Minimal one-thread HTTP server answering each connection from a queue
    /// of (status, body) pairs.
    fn spawn_server(responses: Vec<(u16, String)>) -> (String, Arc<AtomicU32>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicU32::new(0));
        let hits2 = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = match listener.accept() {
                    Ok(s) => s,
                    Err(_) => return,
                };
                hits2.fetch_add(1, Ordering::SeqCst);
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                let reason = if status == 200 { "OK" } else { "Error" };
                let resp = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(resp.as_bytes());
            }
        });
        (format!("http://{addr}/v1/completions"), hits)
    }

    fn fast_cfg(url: String) -> HttpBackendConfig {
        HttpBackendConfig {
            base_url: url,
            backoff_base_ms: 1,
            timeout_secs: 5,
            ..HttpBackendConfig::default()
        }
    }

    #[test]
    fn retries_on_429_then_succeeds() {
        let ok = r#"{"choices":[{"text":"hello world"}]}"#.to_string();
        let (url, hits) = spawn_server(vec![
            (429, "{}".into()),
            (503, "{}".into()),
            (200, ok),
        ]);
        let backend = HttpBackend::new(fast_cfg(url));
        let out = backend
            .complete(&CompletionRequest::new("p").with_stop(&[" world"]))
            .unwrap();
        assert_eq!(out, "hello");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn gives_up_after_max_tries_with_metadata() {
        let responses = vec![(500, "{}".to_string()); 3];
        let (url, hits) = spawn_server(responses);
        let mut cfg = fast_cfg(url);
        cfg.max_tries = 3;
        let backend = HttpBackend::new(cfg);
        let err = backend.complete(&CompletionRequest::new("p")).unwrap_err();
        match err {
            BackendError::Http {
                attempts, status, ..
            } => {
                assert_eq!(attempts, 3);
                assert_eq!(status, Some(500));
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn non_retryable_status_fails_immediately() {
        let (url, hits) = spawn_server(vec![(400, "{}".into())]);
        let backend = HttpBackend::new(fast_cfg(url));
        let err = backend.complete(&CompletionRequest::new("p")).unwrap_err();
        assert!(matches!(
            err,
            BackendError::Http {
                attempts: 1,
                status: Some(400),
                ..
            }
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_required_key_is_an_error() {
        let mut cfg = HttpBackendConfig::default();
        cfg.api_key_env = "A3T_TEST_KEY_THAT_DOES_NOT_EXIST".into();
        cfg.require_key = true;
        let backend = HttpBackend::new(cfg);
        assert!(matches!(
            backend.complete(&CompletionRequest::new("p")),
            Err(BackendError::MissingApiKey(_))
        ));
    }
}
