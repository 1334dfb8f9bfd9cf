//! Prompt rendering and batched, bounded-concurrency execution against a
//! text-generation / embedding provider.
//!
//! The gateway is the only place that talks to a provider. Callers submit a
//! whole batch and await a single completion barrier; individual failures come
//! back as invalid responses instead of aborting the batch.

pub mod fixture;
mod parse;
pub mod remote;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::taxonomy::{placeholders, PromptTemplate};

pub use parse::{parse_structured, repair_instruction, LabelPayload, LinkPayload, Payload, Schema, StructuredResponse};

/// A rendered prompt. `system` carries the persona and context sections,
/// `user` the user section.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            system: String::new(),
            user: text.into(),
        }
    }

    /// Canonical single-string form, used for hashing and fixtures.
    pub fn text(&self) -> String {
        if self.system.is_empty() {
            self.user.clone()
        } else {
            format!("{}\n\n{}", self.system, self.user)
        }
    }

    /// Hex SHA-256 of [`Prompt::text`].
    pub fn hash(&self) -> String {
        content_hash(&self.text())
    }

    /// The follow-up prompt sent after an unusable reply.
    pub fn with_repair(&self, previous_reply: &str, instruction: &str) -> Self {
        Self {
            system: self.system.clone(),
            user: format!(
                "{}\n\nPrevious reply:\n{}\n\n{}",
                self.user, previous_reply, instruction
            ),
        }
    }
}

pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("unbound placeholder: {0}")]
    Unbound(String),
}

/// Replaces each `${name}` in `text` with its binding, verbatim.
pub fn render_text(text: &str, bindings: &BTreeMap<String, String>) -> Result<String, RenderError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for p in placeholders(text) {
        let value = bindings
            .get(p.name)
            .ok_or_else(|| RenderError::Unbound(p.name.to_owned()))?;
        out.push_str(&text[last..p.span.start]);
        out.push_str(value);
        last = p.span.end;
    }
    out.push_str(&text[last..]);
    Ok(out)
}

pub fn render(template: &PromptTemplate, bindings: &BTreeMap<String, String>) -> Result<Prompt, RenderError> {
    let persona = render_text(&template.persona, bindings)?;
    let context = render_text(&template.context, bindings)?;
    let user = render_text(&template.user, bindings)?;
    let system = [persona, context]
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n");
    Ok(Prompt { system, user })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    RemoteHttp,
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub model_name: String,
    pub embedding_model: String,
    pub temperature: f64,
    pub max_in_flight: usize,
}

impl ProviderConfig {
    pub fn new(kind: ProviderKind) -> Self {
        Self {
            kind,
            model_name: "gpt-4o-mini".to_owned(),
            embedding_model: "text-embedding-3-small".to_owned(),
            temperature: 0.0,
            max_in_flight: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("request timed out")]
    Timeout,
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("provider rejected the request: {0}")]
    Fatal(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        !matches!(self, ProviderError::Fatal(_))
    }
}

#[async_trait]
pub trait LlmProvider: Send + Sync {
    fn config(&self) -> &ProviderConfig;

    /// One completion. `repetition` is the index of the repeated sample.
    async fn generate(&self, prompt: &Prompt, repetition: usize) -> Result<String, ProviderError>;

    /// One embedding vector per input text.
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

/// Transport retry settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub request_timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            request_timeout: Duration::from_secs(120),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(attempt)
    }
}

/// Completed / total call counters for progress polling.
#[derive(Debug, Default)]
pub struct Progress {
    total: AtomicUsize,
    completed: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressSnapshot {
    pub completed: usize,
    pub total: usize,
}

impl Progress {
    pub fn add_total(&self, n: usize) {
        self.total.fetch_add(n, Ordering::SeqCst);
    }

    pub fn complete_one(&self) {
        self.completed.fetch_add(1, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> ProgressSnapshot {
        ProgressSnapshot {
            completed: self.completed.load(Ordering::SeqCst),
            total: self.total.load(Ordering::SeqCst),
        }
    }
}

/// One request of a batch: the prompt and the schema its replies must match.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRequest {
    pub prompt: Prompt,
    pub schema: Schema,
}

#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn LlmProvider>,
    permits: Arc<Semaphore>,
    retry: RetryPolicy,
    progress: Arc<Progress>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", self.provider.config())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn LlmProvider>) -> Self {
        Self::with_retry(provider, RetryPolicy::default())
    }

    pub fn with_retry(provider: Arc<dyn LlmProvider>, retry: RetryPolicy) -> Self {
        let permits = provider.config().max_in_flight.max(1);
        Self {
            provider,
            permits: Arc::new(Semaphore::new(permits)),
            retry,
            progress: Arc::new(Progress::default()),
        }
    }

    /// Replaces the progress counters, so several gateways can report into
    /// one execution.
    pub fn with_progress(mut self, progress: Arc<Progress>) -> Self {
        self.progress = progress;
        self
    }

    pub fn progress(&self) -> &Arc<Progress> {
        &self.progress
    }

    pub fn provider(&self) -> &Arc<dyn LlmProvider> {
        &self.provider
    }

    /// One completion with transport retries and exponential backoff. A
    /// permit is held only while a call is in flight.
    pub async fn complete(&self, prompt: &Prompt, repetition: usize) -> Result<String, ProviderError> {
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.permits.acquire().await.expect("semaphore never closed");
                match tokio::time::timeout(self.retry.request_timeout, self.provider.generate(prompt, repetition)).await
                {
                    Ok(r) => r,
                    Err(_) => Err(ProviderError::Timeout),
                }
            };
            match result {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    tracing::debug!(attempt, error = %e, "retrying provider call");
                    tokio::time::sleep(self.retry.backoff(attempt)).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Completion followed by parsing, with one repair round-trip.
    pub async fn complete_structured(&self, request: &BatchRequest, repetition: usize) -> StructuredResponse {
        let raw = match self.complete(&request.prompt, repetition).await {
            Ok(raw) => raw,
            Err(e) => return StructuredResponse::failed(e.to_string()),
        };
        let first = parse_structured(&raw, &request.schema);
        if first.valid {
            return first;
        }
        let reason = first.error.clone().unwrap_or_default();
        let repair = request
            .prompt
            .with_repair(&raw, &repair_instruction(&request.schema, &reason));
        match self.complete(&repair, repetition).await {
            Ok(raw2) => {
                let mut second = parse_structured(&raw2, &request.schema);
                second.parse_attempts = 2;
                second.warnings.splice(0..0, first.warnings);
                second
            }
            Err(e) => {
                let mut r = first;
                r.error = Some(format!("{reason}; repair failed: {e}"));
                r
            }
        }
    }

    /// Dispatches every request `k` times and waits for all replies. Replies
    /// are grouped per request in repetition order.
    pub async fn execute_batch(&self, requests: &[BatchRequest], k: usize) -> Vec<Vec<StructuredResponse>> {
        assert!(k >= 1, "k must be at least 1");
        self.progress.add_total(requests.len() * k);
        let calls = requests.iter().flat_map(|req| {
            (0..k).map(move |rep| async move {
                let r = self.complete_structured(req, rep).await;
                self.progress.complete_one();
                r
            })
        });
        let mut flat = futures::future::join_all(calls).await.into_iter();
        requests.iter().map(|_| flat.by_ref().take(k).collect()).collect()
    }

    /// Embeds texts in chunks, with transport retries per chunk.
    pub async fn embed_batch(&self, texts: &[String], chunk: usize) -> Vec<Result<Vec<f64>, ProviderError>> {
        let chunk = chunk.max(1);
        let calls = texts.chunks(chunk).map(|c| async move {
            let mut attempt = 0;
            loop {
                let r = {
                    let _permit = self.permits.acquire().await.expect("semaphore never closed");
                    match tokio::time::timeout(self.retry.request_timeout, self.provider.embed(c)).await {
                        Ok(r) => r,
                        Err(_) => Err(ProviderError::Timeout),
                    }
                };
                match r {
                    Ok(v) if v.len() == c.len() => return Ok(v),
                    Ok(v) => {
                        return Err(ProviderError::Fatal(format!(
                            "provider returned {} vectors for {} texts",
                            v.len(),
                            c.len()
                        )))
                    }
                    Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                        tokio::time::sleep(self.retry.backoff(attempt)).await;
                        attempt += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        });
        let mut out = Vec::with_capacity(texts.len());
        for (c, r) in texts.chunks(chunk).zip(futures::future::join_all(calls).await) {
            match r {
                Ok(vs) => out.extend(vs.into_iter().map(Ok)),
                Err(e) => out.extend(c.iter().map(|_| Err(e.clone()))),
            }
        }
        out
    }
}
