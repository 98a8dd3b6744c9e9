//! HTTP client for an external generator.
//!
//! Request body `{"chain": str, "max_tokens": int}`, response `{"text": str}`.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ENV_ENDPOINT: &str = "GEN_ENDPOINT";
pub const ENV_TIMEOUT_MS: &str = "GEN_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT_MS: u64 = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_tokens: usize,
    /// Requests allowed in flight at once across clones of the client.
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_tokens: 96,
            max_in_flight: 4,
        }
    }
}

impl RemoteConfig {
    /// `GEN_ENDPOINT` and `GEN_TIMEOUT_MS` override the configured values.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(ep) = std::env::var(ENV_ENDPOINT) {
            if !ep.trim().is_empty() {
                self.endpoint = Some(ep.trim().to_string());
            }
        }
        if let Ok(ms) = std::env::var(ENV_TIMEOUT_MS) {
            self.timeout_ms = ms
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_TIMEOUT_MS} is not an integer: {ms:?}")))?;
        }
        Ok(self)
    }
}

#[derive(Debug)]
struct Slots {
    limit: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> Permit<'_> {
        let mut busy = self.busy.lock().unwrap_or_else(|e| e.into_inner());
        while *busy >= self.limit {
            busy = self.freed.wait(busy).unwrap_or_else(|e| e.into_inner());
        }
        *busy += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut busy = self.0.busy.lock().unwrap_or_else(|e| e.into_inner());
        *busy -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct Request<'a> {
    chain: &'a str,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct Response {
    text: String,
}

/// Cloneable client; clones share the in-flight limit.
#[derive(Clone)]
pub struct RemoteClient {
    endpoint: String,
    timeout_ms: u64,
    max_tokens: usize,
    agent: ureq::Agent,
    slots: Arc<Slots>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient")
            .field("endpoint", &self.endpoint)
            .field("timeout_ms", &self.timeout_ms)
            .finish()
    }
}

impl RemoteClient {
    pub fn new(cfg: &RemoteConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config(format!("remote backend needs an endpoint ({ENV_ENDPOINT})")))?;
        if cfg.timeout_ms == 0 || cfg.max_in_flight == 0 {
            return Err(Error::Config("remote timeout and in-flight limit must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            endpoint,
            timeout_ms: cfg.timeout_ms,
            max_tokens: cfg.max_tokens,
            agent,
            slots: Arc::new(Slots {
                limit: cfg.max_in_flight,
                busy: Mutex::new(0),
                freed: Condvar::new(),
            }),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn map_err(&self, e: ureq::Error) -> Error {
        match e {
            ureq::Error::Timeout(_) => Error::RemoteTimeout(self.timeout_ms),
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => Error::RemoteTimeout(self.timeout_ms),
            other => Error::Remote(other.to_string()),
        }
    }

    pub fn generate(&self, chain: &str) -> Result<String> {
        let body = serde_json::to_string(&Request {
            chain,
            max_tokens: self.max_tokens,
        })?;
        let _permit = self.slots.acquire();
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Content-Type", "application/json")
            .send(body.as_str())
            .map_err(|e| self.map_err(e))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| self.map_err(e))?;
        if !(200..300).contains(&status) {
            return Err(Error::Remote(format!("HTTP {status}: {}", text.trim())));
        }
        let parsed: Response =
            serde_json::from_str(&text).map_err(|e| Error::Remote(format!("bad response body: {e}")))?;
        Ok(parsed.text)
    }
}
