//! Text-completion clients: the provider trait, retry policy, an HTTP
//! client and a digest-keyed response cache.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::sha256_hex;

/// Environment variable holding the API credential unless configured.
pub const DEFAULT_API_KEY_ENV: &str = "MIDILM_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited")]
    RateLimited,
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("no cached response for request {0}")]
    CacheMiss(String),
}

impl LlmError {
    fn is_transient(&self) -> bool {
        matches!(
            self,
            LlmError::Transport(_) | LlmError::RateLimited | LlmError::Timeout(_)
        )
    }
}

/// Single-turn text completion provider.
pub trait LlmClient {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;
}

impl<C: LlmClient + ?Sized> LlmClient for &C {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubled before each later one.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// SHA-256 of the request's canonical JSON; keys the response cache.
pub fn request_digest(request: &LlmRequest) -> String {
    sha256_hex(&serde_json::to_vec(request).expect("request serializes"))
}

pub fn llm_complete(request: &LlmRequest, client: &dyn LlmClient) -> Result<String, LlmError> {
    llm_complete_with(request, client, &RetryPolicy::default())
}

/// Completes `request`, retrying transport errors, timeouts and rate limits
/// with exponential backoff. Authentication errors and cache misses are
/// returned at once.
pub fn llm_complete_with(
    request: &LlmRequest,
    client: &dyn LlmClient,
    policy: &RetryPolicy,
) -> Result<String, LlmError> {
    let digest = request_digest(request);
    let attempts = policy.max_attempts.max(1);
    let mut delay = policy.base_delay;
    let mut attempt = 1;
    loop {
        log::debug!("llm request {digest} attempt {attempt}");
        match client.complete(request) {
            Ok(text) => {
                log::debug!("llm response {digest}: {} bytes", text.len());
                return Ok(text);
            }
            Err(e) if e.is_transient() && attempt < attempts => {
                log::warn!("llm request {digest} attempt {attempt} failed: {e}; retrying");
                std::thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
            Err(e) => {
                log::warn!("llm request {digest} failed: {e}");
                return Err(e);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    /// Name of the environment variable that holds the bearer token.
    pub api_key_env: String,
    pub timeout_s: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_s: 60,
        }
    }
}

/// Client for an endpoint that accepts `{prompt, temperature, max_tokens}`
/// and answers `{"text": ...}`.
#[derive(Debug, Clone)]
pub struct HttpClient {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct CompletionReply {
    text: String,
}

impl HttpClient {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_s.max(1)))
            .build();
        Self { config, agent }
    }

    fn credential(&self) -> Result<String, LlmError> {
        match std::env::var(&self.config.api_key_env) {
            Ok(v) if !v.trim().is_empty() => Ok(v),
            _ => Err(LlmError::Auth(format!(
                "environment variable {} is not set",
                self.config.api_key_env
            ))),
        }
    }
}

fn is_timeout(t: &ureq::Transport) -> bool {
    std::error::Error::source(t)
        .and_then(|s| s.downcast_ref::<std::io::Error>())
        .is_some_and(|e| {
            matches!(
                e.kind(),
                std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
            )
        })
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let key = self.credential()?;
        if self.config.endpoint.is_empty() {
            return Err(LlmError::Transport("no endpoint configured".into()));
        }
        let resp = self
            .agent
            .post(&self.config.endpoint)
            .set("Authorization", &format!("Bearer {key}"))
            .send_json(request);
        match resp {
            Ok(r) => r
                .into_json::<CompletionReply>()
                .map(|c| c.text)
                .map_err(|e| LlmError::Transport(format!("bad reply body: {e}"))),
            Err(ureq::Error::Status(401 | 403, r)) => {
                Err(LlmError::Auth(format!("HTTP {}", r.status())))
            }
            Err(ureq::Error::Status(429, _)) => Err(LlmError::RateLimited),
            Err(ureq::Error::Status(408, _)) => Err(LlmError::Timeout("HTTP 408".into())),
            Err(ureq::Error::Status(code, _)) => Err(LlmError::Transport(format!("HTTP {code}"))),
            Err(ureq::Error::Transport(t)) if is_timeout(&t) => {
                Err(LlmError::Timeout(t.to_string()))
            }
            Err(ureq::Error::Transport(t)) => Err(LlmError::Transport(t.to_string())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    request: LlmRequest,
    response: String,
}

/// Response cache in a directory, one `<digest>.json` file per request.
/// Without an inner client it replays cached responses only.
pub struct CachedClient {
    dir: PathBuf,
    inner: Option<Box<dyn LlmClient + Send + Sync>>,
}

impl CachedClient {
    pub fn new(dir: impl Into<PathBuf>, inner: Box<dyn LlmClient + Send + Sync>) -> Self {
        Self {
            dir: dir.into(),
            inner: Some(inner),
        }
    }

    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            inner: None,
        }
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    /// Stores a response for `request`, as if it had been fetched.
    pub fn insert(&self, request: &LlmRequest, response: &str) -> std::io::Result<()> {
        write_entry(
            &self.dir,
            &self.path(&request_digest(request)),
            request,
            response,
        )
    }
}

fn write_entry(
    dir: &Path,
    path: &Path,
    request: &LlmRequest,
    response: &str,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let entry = CacheEntry {
        request: request.clone(),
        response: response.to_string(),
    };
    let bytes = serde_json::to_vec_pretty(&entry).map_err(std::io::Error::other)?;
    crate::io::write_atomic(path, &bytes)
}

impl LlmClient for CachedClient {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let digest = request_digest(request);
        let path = self.path(&digest);
        if let Ok(bytes) = std::fs::read(&path) {
            match serde_json::from_slice::<CacheEntry>(&bytes) {
                Ok(e) if e.request == *request => return Ok(e.response),
                _ => log::warn!("ignoring unusable cache entry {}", path.display()),
            }
        }
        let Some(inner) = &self.inner else {
            return Err(LlmError::CacheMiss(digest));
        };
        let text = inner.complete(request)?;
        write_entry(&self.dir, &path, request, &text)
            .map_err(|e| LlmError::Transport(format!("cache write {}: {e}", path.display())))?;
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Scripted {
        errors: Vec<LlmError>,
        calls: AtomicUsize,
    }

    impl LlmClient for Scripted {
        fn complete(&self, _: &LlmRequest) -> Result<String, LlmError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            match self.errors.get(i) {
                Some(e) => Err(e.clone()),
                None => Ok("ok".into()),
            }
        }
    }

    fn req() -> LlmRequest {
        LlmRequest {
            prompt: "p".into(),
            temperature: 0.0,
            max_tokens: 8,
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::ZERO,
        }
    }

    #[test]
    fn rate_limited_three_times() {
        let c = Scripted {
            errors: vec![LlmError::RateLimited; 3],
            calls: AtomicUsize::new(0),
        };
        assert_eq!(
            llm_complete_with(&req(), &c, &fast()),
            Err(LlmError::RateLimited)
        );
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn recovers_after_transient() {
        let c = Scripted {
            errors: vec![
                LlmError::Timeout("t".into()),
                LlmError::Transport("x".into()),
            ],
            calls: AtomicUsize::new(0),
        };
        assert_eq!(llm_complete_with(&req(), &c, &fast()).unwrap(), "ok");
        assert_eq!(c.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn auth_not_retried() {
        let c = Scripted {
            errors: vec![LlmError::Auth("no".into())],
            calls: AtomicUsize::new(0),
        };
        assert!(matches!(
            llm_complete_with(&req(), &c, &fast()),
            Err(LlmError::Auth(_))
        ));
        assert_eq!(c.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_credential_fails_before_network() {
        let c = HttpClient::new(HttpConfig {
            // unroutable: a network attempt would be a transport error
            endpoint: "http://192.0.2.1:9/".into(),
            api_key_env: "MIDILM_TEST_UNSET_CREDENTIAL".into(),
            timeout_s: 1,
        });
        assert!(matches!(c.complete(&req()), Err(LlmError::Auth(_))));
    }

    #[test]
    fn cache_roundtrip_and_replay_miss() {
        let dir = std::env::temp_dir().join(format!("midilm-llm-cache-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let replay = CachedClient::replay(&dir);
        assert!(matches!(
            replay.complete(&req()),
            Err(LlmError::CacheMiss(_))
        ));
        let c = CachedClient::new(
            &dir,
            Box::new(Scripted {
                errors: vec![],
                calls: AtomicUsize::new(0),
            }) as Box<dyn LlmClient + Send + Sync>,
        );
        assert_eq!(c.complete(&req()).unwrap(), "ok");
        assert_eq!(replay.complete(&req()).unwrap(), "ok");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
