//! Deterministic offline provider.
//!
//! Replies are looked up by the SHA-256 of the prompt text; each entry holds
//! one or more variants and repetition `j` receives variant `j mod len`.
//! Unknown prompts get a fallback reply derived from the prompt hash, so new
//! prompts never crash a run. Embeddings are signed feature-hashed bags of
//! words, a pure function of the text.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LlmProvider, Prompt, ProviderConfig, ProviderError, ProviderKind};
use crate::taxonomy::Step;

pub const DEFAULT_EMBEDDING_DIM: usize = 1536;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub step: Step,
    pub variants: Vec<String>,
}

/// Prompt-hash keyed replies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSet {
    pub seed: u64,
    pub entries: BTreeMap<String, FixtureEntry>,
}

impl FixtureSet {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, prompt: &Prompt, step: Step, variants: Vec<String>) {
        assert!(!variants.is_empty(), "fixture entry needs at least one variant");
        self.entries.insert(prompt.hash(), FixtureEntry { step, variants });
    }

    pub fn get(&self, hash: &str) -> Option<&FixtureEntry> {
        self.entries.get(hash)
    }

    /// Writes `<dir>/<hash>.json` per entry plus `<dir>/seed`.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (hash, entry) in &self.entries {
            let body = serde_json::to_string_pretty(entry).map_err(io::Error::other)?;
            fs::write(dir.join(format!("{hash}.json")), body + "\n")?;
        }
        fs::write(dir.join("seed"), format!("{}\n", self.seed))
    }

    pub fn read_dir(dir: &Path) -> io::Result<Self> {
        let seed = match fs::read_to_string(dir.join("seed")) {
            Ok(s) => s.trim().parse().map_err(io::Error::other)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e),
        };
        let mut entries = BTreeMap::new();
        for item in fs::read_dir(dir)? {
            let path = item?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(hash) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let entry: FixtureEntry = serde_json::from_str(&fs::read_to_string(&path)?).map_err(io::Error::other)?;
            entries.insert(hash.to_owned(), entry);
        }
        Ok(Self { seed, entries })
    }
}

/// Offline provider backed by a [`FixtureSet`].
#[derive(Debug)]
pub struct FixtureProvider {
    config: ProviderConfig,
    fixtures: RwLock<FixtureSet>,
    latency: Duration,
    embedding_dim: usize,
    in_flight: AtomicUsize,
    peak_in_flight: AtomicUsize,
    calls: AtomicUsize,
    misses: AtomicUsize,
}

impl FixtureProvider {
    pub fn new(fixtures: FixtureSet) -> Self {
        Self {
            config: ProviderConfig::new(ProviderKind::Fixture),
            fixtures: RwLock::new(fixtures),
            latency: Duration::ZERO,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            in_flight: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn empty() -> Self {
        Self::new(FixtureSet::default())
    }

    /// Simulated per-call latency.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.config.max_in_flight = n.max(1);
        self
    }

    pub fn with_embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim.max(1);
        self
    }

    pub fn fixtures(&self) -> FixtureSet {
        self.fixtures.read().expect("fixture lock").clone()
    }

    /// Adds or replaces one keyed reply while the provider is in use.
    pub fn insert(&self, prompt: &Prompt, step: Step, variants: Vec<String>) {
        self.fixtures
            .write()
            .expect("fixture lock")
            .insert(prompt, step, variants);
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Number of generate calls that hit no fixture entry.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    /// Reply for `prompt` at `repetition`, without latency or accounting.
    pub fn reply(&self, prompt: &Prompt, repetition: usize) -> String {
        let hash = prompt.hash();
        let fixtures = self.fixtures.read().expect("fixture lock");
        match fixtures.get(&hash) {
            Some(e) => e.variants[repetition % e.variants.len()].clone(),
            None => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                fallback_reply(&hash, fixtures.seed)
            }
        }
    }

    // tracks concurrently running calls for backpressure assertions
    fn enter(&self) -> InFlightGuard<'_> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        InFlightGuard(&self.in_flight)
    }
}

struct InFlightGuard<'a>(&'a AtomicUsize);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Reply for prompts missing from the fixture set. Every schema accepts it:
/// empty label lists, no link, a hash-derived topic, and no segmentation
/// boundaries (which sends segmentation to its fixed-window fallback).
pub fn fallback_reply(hash: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(hash.as_bytes());
    h.update(seed.to_le_bytes());
    let tag = hex::encode(&h.finalize()[..4]);
    serde_json::json!({
        "labels": [],
        "evidence": [],
        "explanation": format!("fixture fallback {tag}"),
        "link": null,
        "topic": format!("fallback {tag}"),
        "keywords": [],
        "boundaries": null,
    })
    .to_string()
}

const STOPWORDS: &[&str] = &[
    "the",
    "and",
    "for",
    "are",
    "was",
    "were",
    "but",
    "not",
    "you",
    "your",
    "our",
    "they",
    "them",
    "their",
    "this",
    "that",
    "these",
    "those",
    "with",
    "from",
    "have",
    "has",
    "had",
    "there",
    "here",
    "what",
    "when",
    "which",
    "who",
    "how",
    "all",
    "any",
    "can",
    "could",
    "would",
    "should",
    "will",
    "into",
    "about",
    "also",
    "than",
    "then",
    "its",
    "it's",
    "just",
    "very",
    "more",
    "most",
    "some",
    "such",
    "only",
    "over",
    "out",
    "because",
    "been",
    "being",
    "does",
    "did",
    "doing",
    "each",
    "she",
    "her",
    "his",
    "him",
    "one",
    "many",
    "much",
    "now",
    "yes",
    "well",
    "like",
    "snippet",
    "mentions",
    "speaker",
    "interviewee",
    "resident",
    "describes",
    "talks",
];

/// Lower-cased content words of `text`.
pub fn content_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|t| t.trim_matches('\'').to_lowercase())
        .filter(|t| t.chars().count() > 2 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Signed feature hashing of content words into `dim` buckets, L2 normalized.
/// Text without content words maps to the zero vector.
pub fn hashed_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for token in content_tokens(text) {
        let d = Sha256::digest(token.as_bytes());
        let idx = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as usize % dim;
        let sign = if d[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[async_trait]
impl LlmProvider for FixtureProvider {
    fn config(&self) -> &ProviderConfig {
        &self.config
    }

    async fn generate(&self, prompt: &Prompt, repetition: usize) -> Result<String, ProviderError> {
        let _g = self.enter();
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        Ok(self.reply(prompt, repetition))
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let _g = self.enter();
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        Ok(texts.iter().map(|t| hashed_embedding(t, self.embedding_dim)).collect())
    }
}
