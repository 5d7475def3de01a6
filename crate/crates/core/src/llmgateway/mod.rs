//! Chat-completion gateway over real providers and deterministic mocks.
//!
//! [`Gateway`] adds content-addressed response caching, bounded retries and
//! bounded fan-out on top of any [`Provider`].

mod cache;
pub mod mock;
pub mod openai;

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CacheEntry, CacheStore};

use crate::promptkit::RenderedPrompt;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited (gave up after {attempts} attempts)")]
    RateLimited { attempts: usize },
    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

impl GatewayError {
    /// Transport failures and rate limits are retried; everything else surfaces at once.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            GatewayError::RateLimited { .. } | GatewayError::Timeout | GatewayError::Transport(_)
        )
    }
}

/// Decoding settings sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model_id: String,
    #[serde(default = "GenerationParams::default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default = "GenerationParams::default_temperature")]
    pub temperature: f64,
    #[serde(default = "GenerationParams::default_repetition_penalty")]
    pub repetition_penalty: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GenerationParams {
    pub const DEFAULT_MAX_NEW_TOKENS: u32 = 256;
    pub const DEFAULT_TEMPERATURE: f64 = 0.001;
    pub const DEFAULT_REPETITION_PENALTY: f64 = 1.1;

    fn default_max_new_tokens() -> u32 {
        Self::DEFAULT_MAX_NEW_TOKENS
    }

    fn default_temperature() -> f64 {
        Self::DEFAULT_TEMPERATURE
    }

    fn default_repetition_penalty() -> f64 {
        Self::DEFAULT_REPETITION_PENALTY
    }

    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn with_model(&self, model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::InvalidParams("model_id is empty".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidParams(
                "max_new_tokens must be positive".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidParams(
                "temperature must be >= 0".into(),
            ));
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty >= 1.0) {
            return Err(GatewayError::InvalidParams(
                "repetition_penalty must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model_id: String::new(),
            max_new_tokens: Self::DEFAULT_MAX_NEW_TOKENS,
            temperature: Self::DEFAULT_TEMPERATURE,
            repetition_penalty: Self::DEFAULT_REPETITION_PENALTY,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl ProviderReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
        }
    }
}

/// A chat-completion backend.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<ProviderReply, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub cache_key: String,
    pub output_text: String,
    pub provider: String,
    pub cached: bool,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

/// Content address of a request: model, every generation parameter and the full prompt text.
pub fn cache_key(prompt: &RenderedPrompt, params: &GenerationParams) -> String {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        model_id: &'a str,
        max_new_tokens: u32,
        temperature: f64,
        repetition_penalty: f64,
        seed: Option<u64>,
        system: Option<&'a str>,
        user: &'a str,
    }
    let material = KeyMaterial {
        model_id: &params.model_id,
        max_new_tokens: params.max_new_tokens,
        temperature: params.temperature,
        repetition_penalty: params.repetition_penalty,
        seed: params.seed,
        system: prompt.system_text.as_deref(),
        user: &prompt.user_text,
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Delays between attempts; `backoff.len()` is the number of retries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub backoff: Vec<Duration>,
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            backoff: Vec::new(),
        }
    }

    /// `retries` immediate retries, for tests.
    pub fn immediate(retries: usize) -> Self {
        Self {
            backoff: vec![Duration::ZERO; retries],
        }
    }

    pub fn max_attempts(&self) -> usize {
        self.backoff.len() + 1
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            backoff: [1, 4, 16].map(Duration::from_secs).to_vec(),
        }
    }
}

/// Counters over the lifetime of one [`Gateway`].
#[derive(Debug, Default)]
pub struct GatewayStats {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    provider_calls: AtomicU64,
    errors: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests: u64,
    pub cache_hits: u64,
    pub provider_calls: u64,
    pub errors: u64,
}

impl StatsSnapshot {
    /// Share of requests answered from cache; a run that issued no requests counts as fully cached.
    pub fn cache_hit_ratio(&self) -> f64 {
        if self.requests == 0 {
            1.0
        } else {
            self.cache_hits as f64 / self.requests as f64
        }
    }
}

pub struct Gateway {
    provider: Arc<dyn Provider>,
    cache: Option<CacheStore>,
    retry: RetryPolicy,
    max_in_flight: usize,
    stats: GatewayStats,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self {
            provider,
            cache: None,
            retry: RetryPolicy::default(),
            max_in_flight: 1,
            stats: GatewayStats::default(),
        }
    }

    pub fn with_cache(mut self, cache: CacheStore) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            requests: self.stats.requests.load(Ordering::Relaxed),
            cache_hits: self.stats.cache_hits.load(Ordering::Relaxed),
            provider_calls: self.stats.provider_calls.load(Ordering::Relaxed),
            errors: self.stats.errors.load(Ordering::Relaxed),
        }
    }

    pub fn complete(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<CompletionRecord, GatewayError> {
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let result = self.complete_inner(prompt, params);
        if result.is_err() {
            self.stats.errors.fetch_add(1, Ordering::Relaxed);
        }
        result
    }

    fn complete_inner(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<CompletionRecord, GatewayError> {
        params.validate()?;
        let key = cache_key(prompt, params);
        let started = Instant::now();

        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(CompletionRecord {
                    cache_key: key,
                    output_text: hit.output_text,
                    provider: hit.provider,
                    cached: true,
                    latency_ms: started.elapsed().as_millis() as u64,
                    token_usage: hit.token_usage,
                });
            }
        }

        let reply = self.call_with_retry(prompt, params)?;
        let mut record = CompletionRecord {
            cache_key: key.clone(),
            output_text: reply.text,
            provider: self.provider.name().to_string(),
            cached: false,
            latency_ms: 0,
            token_usage: reply.usage,
        };
        if let Some(cache) = &self.cache {
            let stored = cache.put_if_absent(
                &key,
                CacheEntry {
                    output_text: record.output_text.clone(),
                    provider: record.provider.clone(),
                    token_usage: record.token_usage,
                },
            )?;
            // a concurrent writer may have won; keep one output per key
            record.output_text = stored.output_text;
        }
        record.latency_ms = started.elapsed().as_millis() as u64;
        Ok(record)
    }

    fn call_with_retry(
        &self,
        prompt: &RenderedPrompt,
        params: &GenerationParams,
    ) -> Result<ProviderReply, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.stats.provider_calls.fetch_add(1, Ordering::Relaxed);
            match self.provider.complete(prompt, params) {
                Ok(reply) => return Ok(reply),
                Err(err) if err.is_transient() && attempt <= self.retry.backoff.len() => {
                    let delay = self.retry.backoff[attempt - 1];
                    log::warn!(
                        "{} attempt {attempt} failed ({err}); retrying in {delay:?}",
                        self.provider.name()
                    );
                    thread::sleep(delay);
                }
                Err(GatewayError::RateLimited { .. }) => {
                    return Err(GatewayError::RateLimited { attempts: attempt })
                }
                Err(err) => return Err(err),
            }
        }
    }

    /// Completes every prompt with at most `max_in_flight` requests outstanding.
    /// Results keep input order; a failed item does not stop the others.
    pub fn complete_batch(
        &self,
        prompts: &[RenderedPrompt],
        params: &GenerationParams,
        max_in_flight: usize,
    ) -> Vec<Result<CompletionRecord, GatewayError>> {
        fan_out(prompts, max_in_flight, |p| self.complete(p, params))
    }
}

/// Applies `f` to every item on up to `max_in_flight` worker threads,
/// returning results in input order.
pub fn fan_out<T, R, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let workers = max_in_flight.max(1).min(items.len());
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = f(item);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::mock::{InstrumentedProvider, ScriptedProvider};
    use super::*;
    use crate::promptkit::{Framework, PromptFrame};

    fn prompt(text: &str) -> RenderedPrompt {
        RenderedPrompt {
            system_text: None,
            user_text: text.into(),
            frame: PromptFrame::base(Framework::Direct),
            collection_id: "c".into(),
        }
    }

    #[test]
    fn default_params_match_reference_settings() {
        let p = GenerationParams::default();
        assert_eq!(p.max_new_tokens, 256);
        assert_eq!(p.temperature, 0.001);
        assert_eq!(p.repetition_penalty, 1.1);
        assert_eq!(p.seed, None);
    }

    #[test]
    fn params_validation() {
        assert!(GenerationParams::new("m").validate().is_ok());
        assert!(GenerationParams::default().validate().is_err());
        let mut p = GenerationParams::new("m");
        p.repetition_penalty = 0.9;
        assert!(p.validate().is_err());
    }

    #[test]
    fn cache_key_covers_model_params_and_prompt() {
        let p = GenerationParams::new("m");
        let base = cache_key(&prompt("x"), &p);
        assert_eq!(base, cache_key(&prompt("x"), &p));
        assert_ne!(base, cache_key(&prompt("y"), &p));
        assert_ne!(base, cache_key(&prompt("x"), &p.with_model("n")));
        let mut hot = p.clone();
        hot.temperature = 0.7;
        assert_ne!(base, cache_key(&prompt("x"), &hot));
    }

    #[test]
    fn retries_transient_errors_then_succeeds() {
        let scripted = ScriptedProvider::from_json(
            r#"{"rules": [], "sequence": [
                {"error": {"kind": "transport"}},
                {"error": {"kind": "rate_limited"}},
                {"reply": "ok"}]}"#,
        )
        .unwrap();
        let gw = Gateway::new(Arc::new(scripted)).with_retry(RetryPolicy::immediate(3));
        let rec = gw
            .complete(&prompt("x"), &GenerationParams::new("m"))
            .unwrap();
        assert_eq!(rec.output_text, "ok");
        assert_eq!(gw.stats().provider_calls, 3);
    }

    #[test]
    fn rate_limit_surfaces_after_budget() {
        let scripted = ScriptedProvider::from_json(
            r#"{"rules": [], "default": {"error": {"kind": "rate_limited"}}}"#,
        )
        .unwrap();
        let gw = Gateway::new(Arc::new(scripted)).with_retry(RetryPolicy::immediate(3));
        let err = gw
            .complete(&prompt("x"), &GenerationParams::new("m"))
            .unwrap_err();
        assert_eq!(err, GatewayError::RateLimited { attempts: 4 });
    }

    #[test]
    fn provider_errors_are_not_retried() {
        let scripted = ScriptedProvider::from_json(
            r#"{"rules": [], "default": {"error": {"kind": "status", "status": 500, "body": "boom"}}}"#,
        )
        .unwrap();
        let gw = Gateway::new(Arc::new(scripted)).with_retry(RetryPolicy::immediate(3));
        let err = gw
            .complete(&prompt("x"), &GenerationParams::new("m"))
            .unwrap_err();
        assert!(matches!(err, GatewayError::Provider { status: 500, .. }));
        assert_eq!(gw.stats().provider_calls, 1);
    }

    #[test]
    fn batch_of_nothing_is_nothing() {
        let gw = Gateway::new(Arc::new(InstrumentedProvider::echo()));
        assert!(gw
            .complete_batch(&[], &GenerationParams::new("m"), 4)
            .is_empty());
    }

    #[test]
    fn fan_out_preserves_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = fan_out(&items, 7, |&i| {
            thread::sleep(Duration::from_micros((50 - i) * 20));
            i * 2
        });
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
    }
}
