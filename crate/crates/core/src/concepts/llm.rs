//! Chat-completions client with record and replay fixtures.
//!
//! Requests are keyed by a SHA-256 digest of `(system, user, model)`. A
//! generation loop sends the same request several times, so a fixture file may
//! hold several responses under one digest; replay hands them out in recorded
//! order, one per occurrence of the request.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the API key for live calls.
pub const API_KEY_ENV: &str = "CGBC_LLM_KEY";

/// Retries after the first failed attempt.
pub const DEFAULT_RETRIES: u32 = 3;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error("no fixture for request digest {digest} (occurrence {occurrence})")]
    MissingFixture { digest: String, occurrence: usize },
    #[error("replay mode requires an existing fixture file")]
    NoFixtureFile,
    #[error("live mode needs an endpoint")]
    NoEndpoint,
    #[error("fixture file {path}: {message}")]
    Fixture { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    Live,
    Record,
    #[default]
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    pub model: String,
    pub mode: LlmMode,
    pub fixture_path: Option<PathBuf>,
    /// Concepts requested per call.
    pub per_call: usize,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// First backoff delay; doubles on every retry.
    pub backoff_ms: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "gpt-4.1".to_string(),
            mode: LlmMode::Replay,
            fixture_path: None,
            per_call: super::prompts::DEFAULT_PER_CALL,
            api_key: std::env::var(API_KEY_ENV).ok(),
            max_retries: DEFAULT_RETRIES,
            timeout_secs: 120,
            backoff_ms: 500,
        }
    }
}

/// One recorded exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub digest: String,
    pub response: String,
}

/// Hex SHA-256 over the length-prefixed `(system, user, model)` triple.
pub fn request_digest(system: &str, user: &str, model: &str) -> String {
    let mut h = Sha256::new();
    for part in [system, user, model] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub system: &'a str,
    pub user: &'a str,
    pub seed: Option<u64>,
}

/// Something that can answer a chat request with text.
pub trait ChatTransport: Send + Sync {
    fn chat(&self, req: &ChatRequest<'_>) -> Result<String, LlmError>;
}

/// POSTs OpenAI-style chat-completion bodies with exponential backoff.
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    max_retries: u32,
    backoff: Duration,
}

impl HttpTransport {
    pub fn new(cfg: &LlmClientConfig) -> Result<Self, LlmError> {
        if cfg.endpoint.is_empty() {
            return Err(LlmError::NoEndpoint);
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint: cfg.endpoint.clone(),
            api_key: cfg.api_key.clone(),
            agent,
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.backoff_ms),
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, (bool, LlmError)> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| {
            (
                true,
                LlmError::Transport {
                    attempts: 1,
                    message: e.to_string(),
                },
            )
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| {
            (
                true,
                LlmError::Transport {
                    attempts: 1,
                    message: e.to_string(),
                },
            )
        })?;
        if !(200..300).contains(&status) {
            let retry = status == 429 || status >= 500;
            return Err((retry, LlmError::Status { status, body: text }));
        }
        extract_content(&text).map_err(|e| (false, e))
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion body.
pub fn extract_content(body: &str) -> Result<String, LlmError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| LlmError::BadResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| LlmError::BadResponse(body.chars().take(200).collect()))
}

impl ChatTransport for HttpTransport {
    fn chat(&self, req: &ChatRequest<'_>) -> Result<String, LlmError> {
        let mut body = json!({
            "model": req.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        let mut delay = self.backoff;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((true, err)) if attempts <= self.max_retries => {
                    log::warn!("llm attempt {attempts} failed: {err}; retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                }
                Err((_, LlmError::Transport { message, .. })) => {
                    return Err(LlmError::Transport { attempts, message })
                }
                Err((_, err)) => return Err(err),
            }
        }
    }
}

#[derive(Debug, Default)]
struct FixtureBook {
    path: Option<PathBuf>,
    entries: Vec<FixtureEntry>,
    served: HashMap<String, usize>,
}

impl FixtureBook {
    fn load(path: &Path) -> Result<Vec<FixtureEntry>, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Fixture {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| LlmError::Fixture {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn next(&mut self, digest: &str) -> Result<String, LlmError> {
        let occurrence = *self.served.get(digest).unwrap_or(&0);
        let found = self
            .entries
            .iter()
            .filter(|e| e.digest == digest)
            .nth(occurrence)
            .map(|e| e.response.clone())
            .ok_or_else(|| LlmError::MissingFixture {
                digest: digest.to_string(),
                occurrence,
            })?;
        self.served.insert(digest.to_string(), occurrence + 1);
        Ok(found)
    }

    fn append(&mut self, entry: FixtureEntry) -> Result<(), LlmError> {
        self.entries.push(entry);
        let Some(path) = &self.path else {
            return Ok(());
        };
        let json = serde_json::to_string_pretty(&self.entries).expect("fixtures serialize");
        let tmp = path.with_extension("json.tmp");
        let write = || -> std::io::Result<()> {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&tmp, json)?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| LlmError::Fixture {
            path: path.clone(),
            message: e.to_string(),
        })
    }
}

/// A completed call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub digest: String,
    pub response: String,
}

/// Routes requests to a transport, a fixture file, or both.
pub struct LlmClient {
    model: String,
    mode: LlmMode,
    transport: Option<Box<dyn ChatTransport>>,
    book: Mutex<FixtureBook>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("model", &self.model)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn from_config(cfg: &LlmClientConfig) -> Result<Self, LlmError> {
        let transport: Option<Box<dyn ChatTransport>> = match cfg.mode {
            LlmMode::Replay => None,
            LlmMode::Live | LlmMode::Record => Some(Box::new(HttpTransport::new(cfg)?)),
        };
        Self::with_transport(&cfg.model, cfg.mode, cfg.fixture_path.as_deref(), transport)
    }

    /// Builds a client around any transport; replay mode ignores it.
    pub fn with_transport(
        model: &str,
        mode: LlmMode,
        fixture_path: Option<&Path>,
        transport: Option<Box<dyn ChatTransport>>,
    ) -> Result<Self, LlmError> {
        let mut book = FixtureBook {
            path: fixture_path.map(Path::to_path_buf),
            ..FixtureBook::default()
        };
        match mode {
            LlmMode::Replay => {
                let path = fixture_path
                    .filter(|p| p.is_file())
                    .ok_or(LlmError::NoFixtureFile)?;
                book.entries = FixtureBook::load(path)?;
            }
            LlmMode::Record => {
                if let Some(path) = fixture_path.filter(|p| p.is_file()) {
                    book.entries = FixtureBook::load(path)?;
                }
            }
            LlmMode::Live => book.path = None,
        }
        if mode != LlmMode::Replay && transport.is_none() {
            return Err(LlmError::NoEndpoint);
        }
        Ok(Self {
            model: model.to_string(),
            mode,
            transport,
            book: Mutex::new(book),
        })
    }

    /// Replay client over in-memory fixtures.
    pub fn replay_from_entries(model: &str, entries: Vec<FixtureEntry>) -> Self {
        Self {
            model: model.to_string(),
            mode: LlmMode::Replay,
            transport: None,
            book: Mutex::new(FixtureBook {
                entries,
                ..FixtureBook::default()
            }),
        }
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn mode(&self) -> LlmMode {
        self.mode
    }

    /// Entries recorded or loaded so far.
    pub fn fixtures(&self) -> Vec<FixtureEntry> {
        self.book.lock().expect("fixture lock").entries.clone()
    }

    pub fn complete(
        &self,
        system: &str,
        user: &str,
        seed: Option<u64>,
    ) -> Result<CallRecord, LlmError> {
        let digest = request_digest(system, user, &self.model);
        let response = match self.mode {
            LlmMode::Replay => self.book.lock().expect("fixture lock").next(&digest)?,
            LlmMode::Live | LlmMode::Record => {
                let transport = self.transport.as_ref().ok_or(LlmError::NoEndpoint)?;
                let text = transport.chat(&ChatRequest {
                    model: &self.model,
                    system,
                    user,
                    seed,
                })?;
                if self.mode == LlmMode::Record {
                    self.book
                        .lock()
                        .expect("fixture lock")
                        .append(FixtureEntry {
                            digest: digest.clone(),
                            response: text.clone(),
                        })?;
                }
                text
            }
        };
        Ok(CallRecord { digest, response })
    }
}
