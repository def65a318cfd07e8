use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_in_flight: usize,
    /// Extra attempts after a transport error, 429 or 5xx.
    pub retries: u32,
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
    pub cache_dir: Option<PathBuf>,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_in_flight: 4,
            retries: 3,
            retry_backoff_ms: 500,
            timeout_secs: 120,
            cache_dir: None,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub prompt: String,
}

/// Anything that turns a single-turn chat request into completion text.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        (**self).complete(request)
    }
}

/// Hex SHA-256 of `model ‖ 0x00 ‖ temperature ‖ 0x00 ‖ prompt`.
pub fn cache_key(model: &str, temperature: f64, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(temperature.to_string().as_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    temperature: f64,
    prompt: String,
    completion: String,
}

/// Content-addressed completion store: one `<sha256>.json` file per request.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, req: &ChatRequest) -> PathBuf {
        self.dir
            .join(format!("{}.json", cache_key(&req.model, req.temperature, &req.prompt)))
    }

    pub fn get(&self, req: &ChatRequest) -> Result<Option<String>> {
        let path = self.path_for(req);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|e| Error::CacheCorrupt {
            path: path.clone(),
            message: e.to_string(),
        })?;
        if entry.model != req.model || entry.temperature != req.temperature || entry.prompt != req.prompt {
            return Err(Error::CacheCorrupt {
                path,
                message: "stored request does not match its key".into(),
            });
        }
        Ok(Some(entry.completion))
    }

    /// Writes through a temporary file and renames it into place.
    pub fn put(&self, req: &ChatRequest, completion: &str) -> Result<()> {
        let path = self.path_for(req);
        let entry = CacheEntry {
            model: req.model.clone(),
            temperature: req.temperature,
            prompt: req.prompt.clone(),
            completion: completion.to_string(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        serde_json::to_writer_pretty(&mut tmp, &entry)?;
        tmp.write_all(b"\n").map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

/// Cache-first access to a chat backend.
pub struct AbductionClient {
    backend: Box<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    model: String,
    temperature: f64,
    max_in_flight: usize,
    calls: AtomicUsize,
}

impl AbductionClient {
    pub fn new(backend: Box<dyn ChatBackend>, config: &LlmConfig) -> Result<Self> {
        config.validate()?;
        let cache = config.cache_dir.as_ref().map(ResponseCache::open).transpose()?;
        Ok(Self {
            backend,
            cache,
            model: config.model.clone(),
            temperature: config.temperature,
            max_in_flight: config.max_in_flight,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of requests that reached the backend.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn request(&self, prompt: &str) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            temperature: self.temperature,
            prompt: prompt.to_string(),
        }
    }

    pub fn generate_causes(&self, prompt: &str) -> Result<String> {
        let req = self.request(prompt);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&req)? {
                return Ok(hit);
            }
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let completion = self.backend.complete(&req)?;
        if let Some(cache) = &self.cache {
            cache.put(&req, &completion)?;
        }
        Ok(completion)
    }

    /// Completes every prompt with at most `max_in_flight` concurrent requests.
    /// Duplicate prompts are sent once; results keep the input order.
    pub fn generate_all(&self, prompts: &[String]) -> Vec<Result<String>> {
        let mut unique: Vec<&str> = Vec::new();
        let mut slot_of: HashMap<&str, usize> = HashMap::new();
        let slots: Vec<usize> = prompts
            .iter()
            .map(|p| {
                *slot_of.entry(p.as_str()).or_insert_with(|| {
                    unique.push(p.as_str());
                    unique.len() - 1
                })
            })
            .collect();
        let results: Vec<Mutex<Option<Result<String>>>> =
            unique.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(unique.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= unique.len() {
                        break;
                    }
                    let r = self.generate_causes(unique[i]);
                    *results[i].lock().expect("result slot poisoned") = Some(r);
                });
            }
        });
        let done: Vec<Result<String>> = results
            .into_iter()
            .map(|m| m.into_inner().expect("result slot poisoned").expect("every slot filled"))
            .collect();
        slots
            .into_iter()
            .map(|i| match &done[i] {
                Ok(s) => Ok(s.clone()),
                Err(e) => Err(Error::Backend(e.to_string())),
            })
            .collect()
    }
}

/// Scripted backend for tests and offline runs.
pub struct MockBackend {
    responses: HashMap<String, String>,
    fallback: Option<String>,
    calls: AtomicUsize,
}

impl MockBackend {
    /// Returns `text` for every prompt.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self {
            responses: HashMap::new(),
            fallback: Some(text.into()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Returns the file's content verbatim for every prompt.
    pub fn from_fixture(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::fixed(text))
    }

    /// Per-prompt answers; unknown prompts are an error.
    pub fn scripted(responses: HashMap<String, String>) -> Self {
        Self {
            responses,
            fallback: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(&request.prompt)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| Error::Backend("mock backend has no answer for this prompt".into()))
    }
}

#[cfg(feature = "remote")]
pub use remote::HttpBackend;

#[cfg(feature = "remote")]
mod remote {
    use std::time::Duration;

    use serde_json::{json, Value};

    use super::{ChatBackend, ChatRequest, LlmConfig};
    use crate::error::{Error, Result};

    /// Chat-completions over HTTP with bearer auth and retry on transient failures.
    pub struct HttpBackend {
        agent: ureq::Agent,
        endpoint: String,
        api_key: Option<String>,
        retries: u32,
        backoff: Duration,
    }

    impl HttpBackend {
        pub fn new(config: &LlmConfig) -> Self {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
                .build()
                .into();
            Self {
                agent,
                endpoint: config.endpoint.clone(),
                api_key: std::env::var(&config.api_key_env).ok(),
                retries: config.retries,
                backoff: Duration::from_millis(config.retry_backoff_ms),
            }
        }

        fn attempt(&self, body: &Value) -> std::result::Result<String, (bool, String)> {
            let mut req = self.agent.post(&self.endpoint);
            if let Some(k) = &self.api_key {
                req = req.header("Authorization", &format!("Bearer {k}"));
            }
            let mut resp = req.send_json(body).map_err(|e| (true, format!("transport: {e}")))?;
            let status = resp.status().as_u16();
            let text = resp
                .body_mut()
                .read_to_string()
                .map_err(|e| (true, format!("reading body: {e}")))?;
            if !(200..300).contains(&status) {
                let transient = status == 429 || status >= 500;
                return Err((transient, format!("HTTP {status}: {text}")));
            }
            let v: Value =
                serde_json::from_str(&text).map_err(|e| (false, format!("invalid JSON response: {e}")))?;
            v.pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| (false, format!("response has no choices[0].message.content: {text}")))
        }
    }

    impl ChatBackend for HttpBackend {
        fn complete(&self, request: &ChatRequest) -> Result<String> {
            let body = json!({
                "model": request.model,
                "temperature": request.temperature,
                "messages": [{"role": "user", "content": request.prompt}],
            });
            let mut wait = self.backoff;
            let mut attempt = 0;
            loop {
                match self.attempt(&body) {
                    Ok(s) => return Ok(s),
                    Err((true, msg)) if attempt < self.retries => {
                        log::warn!("chat request failed ({msg}); retrying in {wait:?}");
                        std::thread::sleep(wait);
                        wait *= 2;
                        attempt += 1;
                    }
                    Err((_, msg)) => return Err(Error::Backend(msg)),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_part() {
        let k = cache_key("m", 0.0, "p");
        assert_eq!(k.len(), 64);
        assert_ne!(k, cache_key("m", 0.5, "p"));
        assert_ne!(k, cache_key("m2", 0.0, "p"));
        assert_ne!(k, cache_key("m", 0.0, "p2"));
    }

    #[test]
    fn corrupt_cache_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let req = ChatRequest {
            model: "m".into(),
            temperature: 0.0,
            prompt: "p".into(),
        };
        fs::write(cache.path_for(&req), "{not json").unwrap();
        match cache.get(&req) {
            Err(Error::CacheCorrupt { path, .. }) => assert_eq!(path, cache.path_for(&req)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_temperature_rejected() {
        let cfg = LlmConfig {
            temperature: -1.0,
            ..Default::default()
        };
        assert!(AbductionClient::new(Box::new(MockBackend::fixed("x")), &cfg).is_err());
    }
}
