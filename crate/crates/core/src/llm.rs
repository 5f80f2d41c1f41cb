//! Pluggable LLM clients.
//!
//! The framework only ever prompts a frozen model. [`MockLlm`] reads the
//! prompts this crate renders and answers them deterministically, which lets
//! the whole pipeline run offline; [`HttpLlm`] talks to an OpenAI-compatible
//! chat-completions endpoint.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;

use crate::{explainer, preference};

/// Default environment variable holding the API key for [`HttpLlm`].
pub const LLM_API_KEY_ENV: &str = "LANE_LLM_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("request failed: {0}")]
    Transport(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("missing credentials: {0}")]
    Credentials(String),
    #[error("unrecognised prompt")]
    UnsupportedPrompt,
}

pub trait LlmClient: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// Spaces calls at least `interval` apart across threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    /// `per_second <= 0` disables limiting.
    pub fn per_second(per_second: f64) -> Option<Self> {
        (per_second > 0.0).then(|| Self { interval: Duration::from_secs_f64(1.0 / per_second), next: Mutex::new(None) })
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// A client plus the retry and pacing policy shared by every caller.
#[derive(Clone)]
pub struct LlmClientHandle {
    client: Arc<dyn LlmClient>,
    /// Total attempts allowed per request before giving up on a malformed answer.
    pub max_retries: u32,
    pub timeout: Duration,
    limiter: Option<Arc<RateLimiter>>,
}

impl LlmClientHandle {
    pub fn new(client: Arc<dyn LlmClient>, max_retries: u32, timeout: Duration) -> Self {
        Self { client, max_retries: max_retries.max(1), timeout, limiter: None }
    }

    pub fn mock(seed: u64) -> Self {
        Self::new(Arc::new(MockLlm::new(seed)), 2, Duration::from_secs(60))
    }

    pub fn with_rate_limit(mut self, per_second: f64) -> Self {
        self.limiter = RateLimiter::per_second(per_second).map(Arc::new);
        self
    }

    pub fn name(&self) -> &str {
        self.client.name()
    }

    pub fn is_mock(&self) -> bool {
        self.client.name() == MockLlm::NAME
    }

    pub fn call(&self, prompt: &str) -> Result<String, LlmError> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        self.client.complete(prompt)
    }
}

/// Deterministic offline model: a pure function of `(prompt, seed)`.
#[derive(Debug, Clone)]
pub struct MockLlm {
    seed: u64,
}

impl MockLlm {
    pub const NAME: &'static str = "mock";

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl LlmClient for MockLlm {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        if let Some((titles, m)) = preference::read_preference_prompt(prompt) {
            let prefs = preference::mock_preferences(&titles, m, self.seed);
            return Ok(preference::render_standard_response(&prefs));
        }
        if let Some(request) = explainer::read_cot_prompt(prompt) {
            return Ok(explainer::mock_explanation(&request, self.seed).to_response_text());
        }
        Err(LlmError::UnsupportedPrompt)
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpLlm {
    endpoint: String,
    model: String,
    api_key: String,
    timeout: Duration,
    client: reqwest::blocking::Client,
}

impl HttpLlm {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), model: model.into(), api_key: api_key.into(), timeout, client })
    }

    /// Reads the API key from the environment variable `key_env`.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>, key_env: &str, timeout: Duration) -> Result<Self, LlmError> {
        let key = std::env::var(key_env).map_err(|_| LlmError::Credentials(format!("{key_env} is not set")))?;
        Self::new(endpoint, model, key, timeout)
    }
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

impl LlmClient for HttpLlm {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| if e.is_timeout() { LlmError::Timeout(self.timeout) } else { LlmError::Transport(e.to_string()) })?
            .error_for_status()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let parsed: ChatResponse = resp.json().map_err(|e| LlmError::Transport(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| LlmError::Transport("response has no choices".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mock_rejects_foreign_prompts() {
        assert!(matches!(MockLlm::new(0).complete("hello"), Err(LlmError::UnsupportedPrompt)));
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let l = RateLimiter::per_second(200.0).unwrap();
        let t = Instant::now();
        for _ in 0..5 {
            l.acquire();
        }
        assert!(t.elapsed() >= Duration::from_millis(19));
        assert!(RateLimiter::per_second(0.0).is_none());
    }

    #[test]
    fn http_client_speaks_chat_completions() {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert_eq!(req["messages"][0]["content"], "ping");
            assert!(auth.ends_with("Bearer secret"));
            let payload = r#"{"choices":[{"message":{"role":"assistant","content":"pong"}}]}"#;
            write!(stream, "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}", payload.len(), payload).unwrap();
        });
        let llm = HttpLlm::new(format!("http://{addr}/v1/chat/completions"), "test-model", "secret", Duration::from_secs(10)).unwrap();
        assert_eq!(llm.complete("ping").unwrap(), "pong");
        server.join().unwrap();
    }
}
