//! Semantic keyword cloud for evidence that fell into "miscellaneous".
//!
//! Keywords are embedded and projected with an RBF kernel PCA; the fitted
//! projection is kept so later clouds can place new words out of sample
//! while previously placed words stay put.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{lerp_range, Point};
use crate::gateway::fixture::content_tokens;
use crate::gateway::{BatchRequest, Gateway, Payload, Schema};
use crate::pipeline::prompts;

pub const MAX_KEYWORDS_PER_SNIPPET: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeywordConfig {
    pub width: f64,
    pub height: f64,
    pub font_min: f64,
    pub font_max: f64,
    pub padding: f64,
    pub iterations: usize,
}

impl Default for KeywordConfig {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 420.0,
            font_min: 12.0,
            font_max: 40.0,
            padding: 2.0,
            iterations: 2000,
        }
    }
}

impl KeywordConfig {
    fn font_size(&self, freq: usize, lo: usize, hi: usize) -> f64 {
        lerp_range(freq as f64, lo as f64, hi as f64, self.font_min, self.font_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordItem {
    pub word: String,
    pub frequency: usize,
    pub position: Point,
    pub font_size: f64,
    /// Frequency relative to the most frequent word, in (0, 1].
    pub color_value: f64,
    pub width: f64,
    pub height: f64,
    /// Position taken from a prior projection.
    pub pinned: bool,
}

impl KeywordItem {
    pub fn intersects(&self, o: &KeywordItem) -> bool {
        (self.position.x - o.position.x).abs() < (self.width + o.width) / 2.0
            && (self.position.y - o.position.y).abs() < (self.height + o.height) / 2.0
    }
}

/// Fitted kernel PCA plus every position handed out so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub words: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub sigma: f64,
    pub alphas: Vec<[f64; 2]>,
    pub column_means: Vec<f64>,
    pub total_mean: f64,
    pub scale: f64,
    pub positions: BTreeMap<String, Point>,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

impl Projection {
    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = cosine_distance(a, b);
        (-d * d / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Fits on `embeddings`; positions of the training words are not set.
    pub fn fit(words: &[String], embeddings: &[Vec<f64>], half_extent: f64) -> Self {
        let n = words.len();
        let mut dists = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                dists.push(cosine_distance(&embeddings[i], &embeddings[j]));
            }
        }
        dists.sort_by(f64::total_cmp);
        let sigma = match dists.len() {
            0 => 1.0,
            m if m % 2 == 1 => dists[m / 2],
            m => 0.5 * (dists[m / 2 - 1] + dists[m / 2]),
        };
        let sigma = if sigma > 1e-12 { sigma } else { 1.0 };
        let mut p = Projection {
            words: words.to_vec(),
            embeddings: embeddings.to_vec(),
            sigma,
            alphas: vec![[0.0; 2]; n],
            column_means: vec![0.0; n],
            total_mean: 0.0,
            scale: 1.0,
            positions: BTreeMap::new(),
        };
        if n < 2 {
            return p;
        }
        let k = DMatrix::from_fn(n, n, |i, j| p.kernel(&embeddings[i], &embeddings[j]));
        p.column_means = (0..n).map(|j| k.column(j).sum() / n as f64).collect();
        p.total_mean = p.column_means.iter().sum::<f64>() / n as f64;
        let kc = DMatrix::from_fn(n, n, |i, j| {
            k[(i, j)] - p.column_means[i] - p.column_means[j] + p.total_mean
        });
        let eig = SymmetricEigen::new(kc);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        for (c, &idx) in order.iter().take(2).enumerate() {
            let lambda = eig.eigenvalues[idx];
            if lambda <= 1e-10 {
                continue;
            }
            let v = eig.eigenvectors.column(idx);
            let mut big = 0;
            for i in 0..n {
                if v[i].abs() > v[big].abs() + 1e-12 {
                    big = i;
                }
            }
            let sign = if v[big] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                p.alphas[i][c] = sign * v[i] / lambda.sqrt();
            }
        }
        let raw: Vec<[f64; 2]> = embeddings.iter().map(|e| p.project_raw(e)).collect();
        let max = raw.iter().fold(0.0f64, |m, r| m.max(r[0].abs()).max(r[1].abs()));
        p.scale = if max > 1e-12 { half_extent / max } else { 1.0 };
        p
    }

    fn project_raw(&self, e: &[f64]) -> [f64; 2] {
        let n = self.words.len();
        if n < 2 {
            return [0.0, 0.0];
        }
        let ks: Vec<f64> = self.embeddings.iter().map(|t| self.kernel(e, t)).collect();
        let mean = ks.iter().sum::<f64>() / n as f64;
        let mut y = [0.0, 0.0];
        for (j, k) in ks.iter().enumerate() {
            let kc = k - self.column_means[j] - mean + self.total_mean;
            y[0] += kc * self.alphas[j][0];
            y[1] += kc * self.alphas[j][1];
        }
        y
    }

    /// Pixel position of an embedding under this projection.
    pub fn project(&self, e: &[f64]) -> Point {
        let y = self.project_raw(e);
        Point::new(self.scale * y[0], self.scale * y[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordCloud {
    pub items: Vec<KeywordItem>,
    pub projection: Option<Projection>,
    /// Frequency-only spiral placement because embeddings were unavailable.
    pub spiral_fallback: bool,
    pub warnings: Vec<String>,
}

fn normalize_keyword(k: &str) -> String {
    k.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn fallback_keywords(evidence: &[String]) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in evidence {
        for t in content_tokens(e) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(MAX_KEYWORDS_PER_SNIPPET).map(|(w, _)| w).collect()
}

/// Per snippet keyword prompt; returns `(word, snippets mentioning it)`
/// sorted by word. Keywords are lower-cased and deduplicated per snippet.
pub async fn extract_keywords(
    misc_evidence: &[(String, Vec<String>)],
    gateway: &Gateway,
) -> (Vec<(String, usize)>, Vec<String>) {
    let jobs = misc_evidence.iter().map(|(sid, evidence)| async move {
        let req = BatchRequest {
            prompt: prompts::keyword_prompt(evidence),
            schema: Schema::Keywords,
        };
        let r = gateway.complete_structured(&req, 0).await;
        match (&r.parsed, r.valid) {
            (Some(Payload::Keywords { keywords }), true) => (keywords.clone(), None),
            _ => (
                fallback_keywords(evidence),
                Some(format!("{sid}: keyword extraction failed; using token counts")),
            ),
        }
    });
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (words, warning) in futures::future::join_all(jobs).await {
        warnings.extend(warning);
        let mut seen = BTreeSet::new();
        for w in words {
            let w = normalize_keyword(&w);
            if w.is_empty() || seen.len() >= MAX_KEYWORDS_PER_SNIPPET {
                continue;
            }
            if seen.insert(w.clone()) {
                *freq.entry(w).or_default() += 1;
            }
        }
    }
    (freq.into_iter().collect(), warnings)
}

pub async fn build_keyword_cloud(
    misc_evidence: &[(String, Vec<String>)],
    gateway: &Gateway,
    prior: Option<&Projection>,
    config: &KeywordConfig,
) -> KeywordCloud {
    let (freq, mut warnings) = extract_keywords(misc_evidence, gateway).await;
    let words: Vec<String> = freq.iter().map(|(w, _)| w.clone()).collect();
    let embedded = gateway.embed_batch(&words, 64).await;
    let embeddings: Option<Vec<Vec<f64>>> = embedded.into_iter().collect::<Result<_, _>>().ok();
    if embeddings.is_none() && !words.is_empty() {
        warnings.push("keyword embedding failed; spiral layout by frequency".to_owned());
    }
    let mut cloud = layout_keywords(&freq, embeddings.as_deref(), prior, config);
    cloud.warnings.splice(0..0, warnings);
    cloud
}

fn sized_items(freq: &[(String, usize)], config: &KeywordConfig) -> Vec<KeywordItem> {
    let lo = freq.iter().map(|f| f.1).min().unwrap_or(0);
    let hi = freq.iter().map(|f| f.1).max().unwrap_or(0);
    freq.iter()
        .map(|(w, f)| {
            let font = config.font_size(*f, lo, hi);
            KeywordItem {
                word: w.clone(),
                frequency: *f,
                position: Point::default(),
                font_size: font,
                color_value: if hi > 0 { *f as f64 / hi as f64 } else { 1.0 },
                width: 0.6 * font * w.chars().count() as f64 + 4.0,
                height: 1.2 * font,
                pinned: false,
            }
        })
        .collect()
}

/// Pure placement given keyword frequencies and (optionally) embeddings.
pub fn layout_keywords(
    freq: &[(String, usize)],
    embeddings: Option<&[Vec<f64>]>,
    prior: Option<&Projection>,
    config: &KeywordConfig,
) -> KeywordCloud {
    let mut items = sized_items(freq, config);
    let Some(embeddings) = embeddings else {
        spiral(&mut items, config.padding);
        return KeywordCloud {
            items,
            projection: None,
            spiral_fallback: true,
            warnings: vec![],
        };
    };
    let half = 0.4 * config.width.min(config.height);
    let mut projection = match prior {
        Some(p) => p.clone(),
        None => {
            let words: Vec<String> = freq.iter().map(|f| f.0.clone()).collect();
            Projection::fit(&words, embeddings, half)
        }
    };
    for (item, e) in items.iter_mut().zip(embeddings) {
        match projection.positions.get(&item.word) {
            Some(p) => {
                item.position = *p;
                item.pinned = true;
            }
            None => item.position = projection.project(e),
        }
    }
    let mut warnings = Vec::new();
    let stuck = relax_rectangles(&mut items, config);
    if stuck > 0 {
        warnings.push(format!("{stuck} pinned keyword pairs overlap after resizing"));
    }
    for item in &items {
        projection.positions.insert(item.word.clone(), item.position);
    }
    KeywordCloud {
        items,
        projection: Some(projection),
        spiral_fallback: false,
        warnings,
    }
}

/// Pushes overlapping rectangles apart along the axis of least penetration.
/// Pinned items never move. Returns the number of pinned pairs that still
/// intersect.
pub fn relax_rectangles(items: &mut [KeywordItem], config: &KeywordConfig) -> usize {
    let n = items.len();
    let pad = config.padding;
    for _ in 0..config.iterations {
        let mut moved = false;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (&items[i], &items[j]);
                if a.pinned && b.pinned {
                    continue;
                }
                let dx = a.position.x - b.position.x;
                let dy = a.position.y - b.position.y;
                let ox = (a.width + b.width) / 2.0 + pad - dx.abs();
                let oy = (a.height + b.height) / 2.0 + pad - dy.abs();
                if ox <= 0.0 || oy <= 0.0 {
                    continue;
                }
                moved = true;
                let (wa, wb) = match (a.pinned, b.pinned) {
                    (true, _) => (0.0, 1.0),
                    (_, true) => (1.0, 0.0),
                    _ => (0.5, 0.5),
                };
                if ox <= oy {
                    let s = if dx != 0.0 { dx.signum() } else { -1.0 };
                    items[i].position.x += s * ox * wa;
                    items[j].position.x -= s * ox * wb;
                } else {
                    let s = if dy != 0.0 { dy.signum() } else { -1.0 };
                    items[i].position.y += s * oy * wa;
                    items[j].position.y -= s * oy * wb;
                }
            }
        }
        if !moved {
            break;
        }
    }
    let mut stuck = 0;
    for i in 0..n {
        for j in i + 1..n {
            if items[i].pinned && items[j].pinned && items[i].intersects(&items[j]) {
                stuck += 1;
            }
        }
    }
    stuck
}

/// Most frequent first along an Archimedean spiral, each at the first
/// free spot.
pub fn spiral(items: &mut [KeywordItem], pad: f64) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .frequency
            .cmp(&items[a].frequency)
            .then(items[a].word.cmp(&items[b].word))
    });
    let mut placed: Vec<usize> = Vec::new();
    for idx in order {
        let mut t: f64 = 0.0;
        loop {
            let p = Point::new(2.0 * t * libm::cos(t), 2.0 * t * libm::sin(t));
            let item = &items[idx];
            let free = placed.iter().all(|&o| {
                let q = &items[o];
                (p.x - q.position.x).abs() >= (item.width + q.width) / 2.0 + pad
                    || (p.y - q.position.y).abs() >= (item.height + q.height) / 2.0 + pad
            });
            if free {
                items[idx].position = p;
                break;
            }
            t += 0.05;
        }
        placed.push(idx);
    }
}
