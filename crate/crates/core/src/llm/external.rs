//! An HTTP chat-completion backend.
//!
//! Requests carry a single user message whose content is the instruction,
//! a blank line and the input. The reply text is read from
//! `choices[0].message.content`, falling back to `choices[0].text`.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AdapterState, InstructionSample, LLMBackend};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    /// Maximum requests in flight at once.
    #[serde(default = "default_cap")]
    pub max_concurrent: usize,
    /// Requests allowed in any sliding 60-second window.
    #[serde(default = "default_budget")]
    pub requests_per_minute: usize,
    /// Environment variable holding the bearer token, if any.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    /// First retry delay; doubled on each further retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_cap() -> usize {
    4
}
fn default_budget() -> usize {
    60
}
fn default_key_env() -> String {
    "CRS_LLM_API_KEY".to_string()
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_timeout() -> u64 {
    60
}

impl ExternalConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ExternalConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.0,
            max_concurrent: default_cap(),
            requests_per_minute: default_budget(),
            api_key_env: default_key_env(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff(),
            timeout_secs: default_timeout(),
        }
    }
}

/// Counting semaphore.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug)]
pub struct ExternalLlm {
    config: ExternalConfig,
    client: reqwest::blocking::Client,
    slots: Slots,
    window: Mutex<VecDeque<Instant>>,
}

const WINDOW: Duration = Duration::from_secs(60);

impl ExternalLlm {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        if config.max_concurrent == 0 || config.max_attempts == 0 {
            return Err(Error::Config(
                "external backend needs a positive cap and attempt count".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(ExternalLlm {
            slots: Slots {
                free: Mutex::new(config.max_concurrent),
                cv: Condvar::new(),
            },
            window: Mutex::new(VecDeque::new()),
            client,
            config,
        })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    fn take_budget(&self) -> Result<()> {
        let mut w = self.window.lock().unwrap();
        let now = Instant::now();
        while w.front().is_some_and(|t| now.duration_since(*t) >= WINDOW) {
            w.pop_front();
        }
        if w.len() >= self.config.requests_per_minute {
            return Err(Error::Throttled(format!(
                "{} requests already issued in the last minute",
                w.len()
            )));
        }
        w.push_back(now);
        Ok(())
    }

    fn body(&self, instruction: &str, input: &str) -> Value {
        json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": format!("{instruction}\n\n{input}")}],
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, (Option<u16>, String)> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| (e.status().map(|s| s.as_u16()), e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| (Some(status.as_u16()), e.to_string()))?;
        if !status.is_success() {
            return Err((Some(status.as_u16()), text));
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| (Some(status.as_u16()), e.to_string()))?;
        let choice = &v["choices"][0];
        choice["message"]["content"]
            .as_str()
            .or_else(|| choice["text"].as_str())
            .map(str::to_string)
            .ok_or_else(|| {
                (
                    Some(status.as_u16()),
                    "response carries no completion text".to_string(),
                )
            })
    }
}

impl LLMBackend for ExternalLlm {
    fn name(&self) -> &str {
        "external"
    }

    fn fine_tune(&mut self, _samples: &[InstructionSample]) -> Result<AdapterState> {
        Err(Error::Unsupported(
            "fine-tuning an external endpoint".into(),
        ))
    }

    fn complete(&self, instruction: &str, input: &str) -> Result<String> {
        self.take_budget()?;
        let body = self.body(instruction, input);
        let _slot = self.slots.acquire();
        let mut last = (None, String::new());
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("completion attempt {attempt} failed: {:?} {}", e.0, e.1);
                    last = e;
                }
            }
            if attempt < self.config.max_attempts {
                std::thread::sleep(Duration::from_millis(
                    self.config.backoff_ms << (attempt - 1),
                ));
            }
        }
        Err(Error::Transport {
            status: last.0,
            attempts: self.config.max_attempts,
            message: last.1,
        })
    }

    fn deterministic(&self) -> bool {
        false
    }
}
