use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::limits::{InFlight, RateLimiter};
use super::{ChatProvider, ChatRequest, EmbedProvider, GatewayError, ProviderConfig, ProviderError};
use crate::embed_index::EmbeddingVector;

const MAX_BACKOFF: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayMetrics {
    /// Requests actually sent to the provider, retries included.
    pub provider_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub peak_in_flight: usize,
}

#[derive(Debug, Default)]
struct Counters {
    provider_calls: AtomicU64,
    cache_hits: AtomicU64,
    retries: AtomicU64,
    peak_in_flight: AtomicUsize,
}

impl Counters {
    fn snapshot(&self) -> GatewayMetrics {
        GatewayMetrics {
            provider_calls: self.provider_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            peak_in_flight: self.peak_in_flight.load(Ordering::SeqCst),
        }
    }
}

/// Retry, backoff and throttling shared by both gateway kinds.
struct Throttle {
    max_retries: u32,
    backoff_base: Duration,
    in_flight: InFlight,
    rate: RateLimiter,
    counters: Counters,
}

impl Throttle {
    fn new(cfg: &ProviderConfig) -> Self {
        Self {
            max_retries: cfg.max_retries,
            backoff_base: Duration::from_millis(cfg.backoff_base_ms),
            in_flight: InFlight::new(cfg.in_flight),
            rate: RateLimiter::per_minute(cfg.rate_limit_rpm),
            counters: Counters::default(),
        }
    }

    fn call<T>(&self, mut f: impl FnMut() -> Result<T, ProviderError>) -> Result<T, GatewayError> {
        let mut trace = Vec::new();
        for attempt in 0..=self.max_retries {
            let result = {
                let _permit = self.in_flight.acquire();
                self.counters.peak_in_flight.fetch_max(self.in_flight.active(), Ordering::SeqCst);
                self.rate.acquire();
                self.counters.provider_calls.fetch_add(1, Ordering::SeqCst);
                f()
            };
            let err = match result {
                Ok(v) => return Ok(v),
                Err(e) => e,
            };
            match err {
                ProviderError::Auth(msg) => return Err(GatewayError::Credential(msg)),
                e if !e.is_retryable() => return Err(GatewayError::Provider(e)),
                e => {
                    log::warn!("provider attempt {} failed: {e}", attempt + 1);
                    trace.push(format!("attempt {}: {e}", attempt + 1));
                    if attempt == self.max_retries {
                        break;
                    }
                    let mut delay = self.backoff_base.saturating_mul(1u32 << attempt.min(16)).min(MAX_BACKOFF);
                    if let ProviderError::RateLimited { retry_after_ms } = e {
                        delay = delay.max(Duration::from_millis(retry_after_ms));
                    }
                    self.counters.retries.fetch_add(1, Ordering::SeqCst);
                    thread::sleep(delay);
                }
            }
        }
        Err(GatewayError::Exhausted { attempts: self.max_retries + 1, trace })
    }
}

fn digest(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Chat-completion front door with caching and throttling.
///
/// Concurrent identical requests are collapsed: the first caller performs the
/// provider call while the others wait on the same cache slot.
pub struct ChatGateway {
    provider: Arc<dyn ChatProvider>,
    model: String,
    throttle: Throttle,
    slots: Mutex<HashMap<String, Arc<Mutex<Option<String>>>>>,
    cache_dir: Option<PathBuf>,
}

impl ChatGateway {
    pub fn new(provider: Arc<dyn ChatProvider>, cfg: &ProviderConfig) -> Result<Self, GatewayError> {
        cfg.validate().map_err(GatewayError::Config)?;
        Ok(Self {
            provider,
            model: cfg.model.clone(),
            throttle: Throttle::new(cfg),
            slots: Mutex::new(HashMap::new()),
            cache_dir: cfg.cache_dir.as_ref().map(|d| d.join("chat")),
        })
    }

    /// Replaces the per-minute limiter (tests use short windows).
    pub fn with_rate_limiter(mut self, limiter: RateLimiter) -> Self {
        self.throttle.rate = limiter;
        self
    }

    pub fn provider_id(&self) -> String {
        self.provider.id()
    }

    pub fn metrics(&self) -> GatewayMetrics {
        self.throttle.counters.snapshot()
    }

    pub fn cache_key(&self, req: &ChatRequest) -> String {
        digest(&[
            self.provider.id().as_bytes(),
            self.model.as_bytes(),
            req.template.as_str().as_bytes(),
            &req.temperature.to_bits().to_le_bytes(),
            &req.max_tokens.to_le_bytes(),
            req.prompt.as_bytes(),
        ])
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let key = self.cache_key(req);
        let slot = self.slots.lock().unwrap().entry(key.clone()).or_default().clone();
        let mut slot = slot.lock().unwrap();
        if let Some(hit) = slot.as_ref() {
            self.throttle.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.clone());
        }
        let disk = self.cache_dir.as_ref().map(|d| d.join(format!("{key}.txt")));
        if let Some(text) = disk.as_ref().and_then(|p| fs::read_to_string(p).ok()) {
            self.throttle.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
            *slot = Some(text.clone());
            return Ok(text);
        }
        let reply = self.throttle.call(|| self.provider.complete(req))?;
        if let Some(path) = disk {
            if let Err(e) = write_atomic(&path, reply.as_bytes()) {
                log::warn!("could not persist chat cache entry {}: {e}", path.display());
            }
        }
        *slot = Some(reply.clone());
        Ok(reply)
    }
}

/// Embedding front door. Caches per text, keyed by embedder identity.
pub struct EmbedGateway {
    provider: Arc<dyn EmbedProvider>,
    model: String,
    throttle: Throttle,
    batch_size: usize,
    memory: Mutex<HashMap<String, Arc<[f32]>>>,
    cache_dir: Option<PathBuf>,
}

impl EmbedGateway {
    pub fn new(provider: Arc<dyn EmbedProvider>, cfg: &ProviderConfig) -> Result<Self, GatewayError> {
        cfg.validate().map_err(GatewayError::Config)?;
        Ok(Self {
            provider,
            model: cfg.model.clone(),
            throttle: Throttle::new(cfg),
            batch_size: cfg.batch_size,
            memory: Mutex::new(HashMap::new()),
            cache_dir: cfg.cache_dir.as_ref().map(|d| d.join("embed")),
        })
    }

    /// Identity of the underlying embedder, e.g. `hash-16`.
    pub fn embedder_id(&self) -> String {
        if self.model.is_empty() {
            self.provider.id()
        } else {
            format!("{}/{}", self.provider.id(), self.model)
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn in_flight_limit(&self) -> usize {
        self.throttle.in_flight.limit()
    }

    pub fn metrics(&self) -> GatewayMetrics {
        self.throttle.counters.snapshot()
    }

    fn key(&self, text: &str) -> String {
        digest(&[self.embedder_id().as_bytes(), text.as_bytes()])
    }

    fn cached(&self, key: &str) -> Option<Arc<[f32]>> {
        if let Some(v) = self.memory.lock().unwrap().get(key) {
            return Some(v.clone());
        }
        let path = self.cache_dir.as_ref()?.join(format!("{key}.f32"));
        let bytes = fs::read(path).ok()?;
        if bytes.len() % 4 != 0 {
            return None;
        }
        let v: Arc<[f32]> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        self.memory.lock().unwrap().insert(key.to_string(), v.clone());
        Some(v)
    }

    fn store(&self, key: &str, v: &Arc<[f32]>) {
        self.memory.lock().unwrap().insert(key.to_string(), v.clone());
        if let Some(dir) = &self.cache_dir {
            let path = dir.join(format!("{key}.f32"));
            let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            if let Err(e) = write_atomic(&path, &bytes) {
                log::warn!("could not persist embedding cache entry {}: {e}", path.display());
            }
        }
    }

    /// One vector per input, in input order. Cache misses are sent to the
    /// provider in a single request.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        let keys: Vec<String> = texts.iter().map(|t| self.key(t)).collect();
        let mut found: Vec<Option<Arc<[f32]>>> = Vec::with_capacity(texts.len());
        let mut misses: Vec<String> = Vec::new();
        let mut miss_keys: Vec<&str> = Vec::new();
        for (text, key) in texts.iter().zip(&keys) {
            let hit = self.cached(key);
            if hit.is_some() {
                self.throttle.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
            } else if !miss_keys.contains(&key.as_str()) {
                misses.push(text.clone());
                miss_keys.push(key);
            }
            found.push(hit);
        }

        if !misses.is_empty() {
            let fresh = self.throttle.call(|| self.provider.embed(&misses))?;
            if fresh.len() != misses.len() {
                return Err(GatewayError::Provider(ProviderError::Invalid(format!(
                    "asked for {} vectors, received {}",
                    misses.len(),
                    fresh.len()
                ))));
            }
            let expected = fresh[0].len();
            for v in &fresh {
                if v.len() != expected {
                    return Err(GatewayError::DimensionMismatch { expected, got: v.len() });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(GatewayError::Provider(ProviderError::Invalid("non-finite embedding value".into())));
                }
            }
            let fresh: HashMap<&str, Arc<[f32]>> =
                miss_keys.iter().zip(fresh).map(|(k, v)| (*k, Arc::from(v))).collect();
            for (k, v) in &fresh {
                self.store(k, v);
            }
            for (slot, key) in found.iter_mut().zip(&keys) {
                if slot.is_none() {
                    *slot = fresh.get(key.as_str()).cloned();
                }
            }
        }

        let vectors: Vec<Arc<[f32]>> = found.into_iter().map(|v| v.expect("filled")).collect();
        let expected = vectors[0].len();
        vectors
            .into_iter()
            .map(|v| {
                if v.len() != expected {
                    return Err(GatewayError::DimensionMismatch { expected, got: v.len() });
                }
                EmbeddingVector::new(v.to_vec())
                    .map_err(|e| GatewayError::Provider(ProviderError::Invalid(e.to_string())))
            })
            .collect()
    }
}
