//! Language-model transports: offline fixture replay and an HTTP client.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::prompts::prompt_digest;
use super::TextError;

pub const ENDPOINT_ENV: &str = "ANOMIZE_LLM_ENDPOINT";
pub const KEY_ENV: &str = "ANOMIZE_LLM_KEY";

/// Anything that can answer a rendered prompt.
pub trait LlmTransport {
    fn complete(&mut self, prompt: &str) -> Result<String, TextError>;
}

/// Canned responses keyed by [`prompt_digest`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FixtureStore {
    pub responses: BTreeMap<String, String>,
}

impl FixtureStore {
    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TextError::Schema(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let body = serde_json::to_string_pretty(self).expect("fixture serializes");
        crate::dataio::write_atomic(path, body.as_bytes()).map_err(|e| TextError::io(path, e))
    }

    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.responses.insert(prompt_digest(prompt), response.into());
    }

    pub fn lookup(&self, prompt: &str) -> Option<&str> {
        self.responses.get(&prompt_digest(prompt)).map(String::as_str)
    }

    /// Rebuilds a fixture from exchanges captured by [`HttpTransport`].
    pub fn from_capture_dir(dir: &Path) -> Result<Self, TextError> {
        let mut store = Self::default();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| TextError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for p in entries {
            let text = std::fs::read_to_string(&p).map_err(|e| TextError::io(&p, e))?;
            let ex: Exchange =
                serde_json::from_str(&text).map_err(|e| TextError::Schema(e.to_string()))?;
            store.insert(&ex.prompt, ex.content);
        }
        Ok(store)
    }
}

impl LlmTransport for FixtureStore {
    fn complete(&mut self, prompt: &str) -> Result<String, TextError> {
        self.lookup(prompt)
            .map(str::to_owned)
            .ok_or_else(|| TextError::FixtureMiss(prompt_digest(prompt)))
    }
}

/// Fixture first; the fallback transport is consulted only on a miss.
pub struct Layered<F> {
    pub fixture: FixtureStore,
    pub fallback: Option<F>,
}

impl<F: LlmTransport> LlmTransport for Layered<F> {
    fn complete(&mut self, prompt: &str) -> Result<String, TextError> {
        if let Some(hit) = self.fixture.lookup(prompt) {
            return Ok(hit.to_owned());
        }
        match &mut self.fallback {
            Some(f) => f.complete(prompt),
            None => Err(TextError::FixtureMiss(prompt_digest(prompt))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Exchange {
    prompt: String,
    request: serde_json::Value,
    response: serde_json::Value,
    content: String,
}

/// Chat-completions style HTTP client. One request in flight at a time.
pub struct HttpTransport {
    endpoint: String,
    key: String,
    model: String,
    retries: u32,
    capture_dir: Option<PathBuf>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, key: impl Into<String>) -> Result<Self, TextError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| TextError::Transport {
                retryable: false,
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            key: key.into(),
            model: "gpt-4".into(),
            retries: 2,
            capture_dir: None,
            client,
        })
    }

    /// Reads endpoint and key from the environment.
    pub fn from_env() -> Result<Self, TextError> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .map_err(|_| TextError::Config(format!("{ENDPOINT_ENV} is not set")))?;
        let key =
            std::env::var(KEY_ENV).map_err(|_| TextError::Config(format!("{KEY_ENV} is not set")))?;
        Self::new(endpoint, key)
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    /// Request/response bodies are written here, one file per prompt digest.
    pub fn with_capture_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.capture_dir = Some(dir.into());
        self
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<serde_json::Value, TextError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.key)
            .json(body)
            .send()
            .map_err(|e| TextError::Transport {
                retryable: true,
                message: e.to_string(),
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TextError::Transport {
                retryable: status.is_server_error() || status.as_u16() == 429,
                message: format!("HTTP {status}"),
            });
        }
        resp.json().map_err(|e| TextError::Transport {
            retryable: false,
            message: e.to_string(),
        })
    }
}

fn extract_content(v: &serde_json::Value) -> Option<String> {
    v.pointer("/choices/0/message/content")
        .or_else(|| v.pointer("/choices/0/text"))
        .or_else(|| v.get("content"))
        .or_else(|| v.get("text"))
        .and_then(|c| c.as_str())
        .map(str::to_owned)
}

impl LlmTransport for HttpTransport {
    fn complete(&mut self, prompt: &str) -> Result<String, TextError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut last = None;
        for _ in 0..=self.retries {
            match self.attempt(&body) {
                Ok(resp) => {
                    let content = extract_content(&resp).ok_or_else(|| {
                        TextError::Response("response has no message content".into())
                    })?;
                    if let Some(dir) = &self.capture_dir {
                        std::fs::create_dir_all(dir).map_err(|e| TextError::io(dir, e))?;
                        let path = dir.join(format!("{}.json", prompt_digest(prompt)));
                        let ex = Exchange {
                            prompt: prompt.into(),
                            request: body.clone(),
                            response: resp,
                            content: content.clone(),
                        };
                        let text = serde_json::to_string_pretty(&ex).expect("exchange serializes");
                        crate::dataio::write_atomic(&path, text.as_bytes())
                            .map_err(|e| TextError::io(&path, e))?;
                    }
                    return Ok(content);
                }
                Err(e @ TextError::Transport { retryable: true, .. }) => {
                    log::warn!("LLM request failed, retrying: {e}");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
