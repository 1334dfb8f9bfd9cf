//! Evidence embeddings, cosine distances, average-linkage clustering and
//! topic labels.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{content_hash, BatchRequest, Gateway, Payload, Schema};
use crate::par;
use crate::pipeline::prompts;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const TOPIC_MAX_WORDS: usize = 6;
/// Member snippets shown to the topic prompt per cluster.
pub const TOPIC_SAMPLE: usize = 8;
pub const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub snippet_id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub assignment: BTreeMap<String, usize>,
    pub clusters: BTreeMap<usize, Vec<String>>,
    #[serde(default)]
    pub topic_labels: BTreeMap<usize, String>,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, snippet_id: &str) -> Option<usize> {
        self.assignment.get(snippet_id).copied()
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn label(&self, id: usize) -> String {
        self.topic_labels
            .get(&id)
            .cloned()
            .unwrap_or_else(|| fallback_label(id))
    }
}

pub fn fallback_label(id: usize) -> String {
    format!("cluster-{id}")
}

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("embedding of snippet {0} is the zero vector")]
    ZeroVector(String),
    #[error("embedding of snippet {0} has non-finite entries")]
    NonFinite(String),
    #[error("embedding of snippet {snippet} has length {found}, expected {expected}")]
    LengthMismatch {
        snippet: String,
        expected: usize,
        found: usize,
    },
    #[error("at least {0} vectors are required")]
    TooFew(usize),
}

/// What gets embedded for one snippet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedInput {
    pub snippet_id: String,
    pub evidence: Vec<String>,
    pub explanation: String,
    pub snippet_text: String,
}

impl EmbedInput {
    /// Deduplicated evidence lines, then the explanation, newline-joined.
    /// `None` when both are empty.
    pub fn evidence_text(&self) -> Option<String> {
        let mut lines: Vec<&str> = Vec::new();
        for e in &self.evidence {
            let e = e.trim();
            if !e.is_empty() && !lines.contains(&e) {
                lines.push(e);
            }
        }
        let exp = self.explanation.trim();
        if !exp.is_empty() {
            lines.push(exp);
        }
        (!lines.is_empty()).then(|| lines.join("\n"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCache {
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    fn key(model: &str, text: &str) -> String {
        content_hash(&format!("{model}\n{text}"))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbedReport {
    pub vectors: Vec<EmbeddingVector>,
    /// Snippets embedded from their raw text for lack of evidence.
    pub fallbacks: Vec<String>,
    pub excluded: Vec<String>,
    pub warnings: Vec<String>,
}

pub async fn embed_evidence(
    inputs: &[EmbedInput],
    gateway: &Gateway,
    cache: Option<&Mutex<EmbeddingCache>>,
) -> EmbedReport {
    let model = gateway.provider().config().embedding_model.clone();
    let mut report = EmbedReport::default();
    let texts: Vec<String> = inputs
        .iter()
        .map(|i| match i.evidence_text() {
            Some(t) => t,
            None => {
                report.fallbacks.push(i.snippet_id.clone());
                i.snippet_text.clone()
            }
        })
        .collect();
    let mut found: Vec<Option<Vec<f64>>> = match cache {
        Some(c) => {
            let c = c.lock().expect("embedding cache lock");
            texts
                .iter()
                .map(|t| c.entries.get(&EmbeddingCache::key(&model, t)).cloned())
                .collect()
        }
        None => vec![None; texts.len()],
    };
    let missing: Vec<usize> = (0..texts.len()).filter(|&i| found[i].is_none()).collect();
    // identical texts are embedded once
    let mut unique: Vec<String> = Vec::new();
    for &i in &missing {
        if !unique.contains(&texts[i]) {
            unique.push(texts[i].clone());
        }
    }
    let fresh = gateway.embed_batch(&unique, EMBED_CHUNK).await;
    let mut fresh_by_text: BTreeMap<&str, &Result<Vec<f64>, _>> = BTreeMap::new();
    for (t, r) in unique.iter().zip(&fresh) {
        fresh_by_text.insert(t.as_str(), r);
    }
    for &i in &missing {
        match fresh_by_text[texts[i].as_str()] {
            Ok(v) => found[i] = Some(v.clone()),
            Err(e) => report
                .warnings
                .push(format!("{}: embedding failed: {e}", inputs[i].snippet_id)),
        }
    }
    if let Some(c) = cache {
        let mut c = c.lock().expect("embedding cache lock");
        for (t, r) in unique.iter().zip(&fresh) {
            if let Ok(v) = r {
                c.entries.insert(EmbeddingCache::key(&model, t), v.clone());
            }
        }
    }
    for (input, v) in inputs.iter().zip(found) {
        match v {
            Some(values) => report.vectors.push(EmbeddingVector {
                snippet_id: input.snippet_id.clone(),
                values,
            }),
            None => report.excluded.push(input.snippet_id.clone()),
        }
    }
    report
}

fn check(vectors: &[EmbeddingVector]) -> Result<Vec<f64>, ClusterError> {
    let dim = vectors.first().map_or(0, |v| v.values.len());
    let mut norms = Vec::with_capacity(vectors.len());
    for v in vectors {
        if v.values.len() != dim {
            return Err(ClusterError::LengthMismatch {
                snippet: v.snippet_id.clone(),
                expected: dim,
                found: v.values.len(),
            });
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(ClusterError::NonFinite(v.snippet_id.clone()));
        }
        let n = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(ClusterError::ZeroVector(v.snippet_id.clone()));
        }
        norms.push(n);
    }
    Ok(norms)
}

/// `D_ij = 1 - cos(v_i, v_j)`, clamped to [0, 2], exactly symmetric with a
/// zero diagonal.
pub fn cosine_distance_matrix(vectors: &[EmbeddingVector], parallel: bool) -> Result<Vec<Vec<f64>>, ClusterError> {
    if vectors.len() < 2 {
        return Err(ClusterError::TooFew(2));
    }
    distances(vectors, parallel)
}

fn distances(vectors: &[EmbeddingVector], parallel: bool) -> Result<Vec<Vec<f64>>, ClusterError> {
    let norms = check(vectors)?;
    let n = vectors.len();
    let upper = par::map_range(n, parallel, |i| {
        (i + 1..n)
            .map(|j| {
                let dot: f64 = vectors[i]
                    .values
                    .iter()
                    .zip(&vectors[j].values)
                    .map(|(a, b)| a * b)
                    .sum();
                (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0)
            })
            .collect::<Vec<f64>>()
    });
    let mut d = vec![vec![0.0; n]; n];
    for (i, row) in upper.into_iter().enumerate() {
        for (off, x) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            d[i][j] = x;
            d[j][i] = x;
        }
    }
    Ok(d)
}

/// Average-linkage agglomeration on cosine distance. Merging continues while
/// some pair of clusters has mean cosine similarity `>= threshold`; among
/// equal candidates the pair with the lowest (first, second) member indices
/// wins. Inputs are processed in snippet-id order, and cluster ids are
/// numbered by each cluster's smallest snippet id.
pub fn agglomerative_cluster(
    vectors: &[EmbeddingVector],
    threshold: f64,
    parallel: bool,
) -> Result<ClusterAssignment, ClusterError> {
    if vectors.is_empty() {
        return Err(ClusterError::TooFew(1));
    }
    let mut sorted: Vec<&EmbeddingVector> = vectors.iter().collect();
    sorted.sort_by(|a, b| a.snippet_id.cmp(&b.snippet_id));
    let owned: Vec<EmbeddingVector> = sorted.into_iter().cloned().collect();
    let groups = if owned.len() == 1 {
        check(&owned)?;
        vec![vec![0]]
    } else {
        let d = distances(&owned, parallel)?;
        average_linkage(d, 1.0 - threshold, parallel)
    };
    let mut assignment = ClusterAssignment::default();
    for (cid, members) in groups.into_iter().enumerate() {
        let ids: Vec<String> = members.iter().map(|&m| owned[m].snippet_id.clone()).collect();
        for id in &ids {
            assignment.assignment.insert(id.clone(), cid);
        }
        assignment.clusters.insert(cid, ids);
    }
    Ok(assignment)
}

/// Merges until the closest pair's mean distance exceeds `max_distance`.
/// Returns member index lists sorted by smallest member.
pub fn average_linkage(mut d: Vec<Vec<f64>>, max_distance: f64, parallel: bool) -> Vec<Vec<usize>> {
    let n = d.len();
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let eps = 1e-12;
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| members[i].is_some()).collect();
        if active.len() < 2 {
            break;
        }
        // per-row best partner, then the global best in row order
        let rows = par::map_slice(&active, parallel, |&i| {
            let mut best: Option<(f64, usize)> = None;
            for &j in active.iter().filter(|&&j| j > i) {
                if best.is_none_or(|(b, _)| d[i][j] < b) {
                    best = Some((d[i][j], j));
                }
            }
            best.map(|(x, j)| (x, i, j))
        });
        let mut best: Option<(f64, usize, usize)> = None;
        for r in rows.into_iter().flatten() {
            if best.is_none_or(|b| r.0 < b.0) {
                best = Some(r);
            }
        }
        let Some((dist, a, b)) = best else { break };
        if dist > max_distance + eps {
            break;
        }
        let na = members[a].as_ref().map_or(0, Vec::len) as f64;
        let nb = members[b].as_ref().map_or(0, Vec::len) as f64;
        for &k in &active {
            if k != a && k != b {
                let x = (na * d[a][k] + nb * d[b][k]) / (na + nb);
                d[a][k] = x;
                d[k][a] = x;
            }
        }
        let mut mb = members[b].take().expect("active");
        let ma = members[a].as_mut().expect("active");
        ma.append(&mut mb);
        ma.sort_unstable();
    }
    // a < b always, so each surviving slot holds its smallest member
    members.into_iter().flatten().collect()
}

/// First `TOPIC_MAX_WORDS` whitespace-separated words.
pub fn truncate_words(s: &str, max: usize) -> String {
    s.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

/// Texts shown to the model when naming a cluster: the first members.
pub fn topic_sample(ids: &[String], texts: &BTreeMap<String, String>) -> Vec<String> {
    ids.iter()
        .take(TOPIC_SAMPLE)
        .filter_map(|id| texts.get(id).cloned())
        .collect()
}

/// One short label per cluster; failures fall back to `cluster-<id>`.
pub async fn label_topics(
    assignment: &ClusterAssignment,
    texts: &BTreeMap<String, String>,
    gateway: &Gateway,
) -> BTreeMap<usize, String> {
    let jobs = assignment.clusters.iter().map(|(&cid, ids)| async move {
        let sample = topic_sample(ids, texts);
        if sample.is_empty() {
            return (cid, fallback_label(cid));
        }
        let req = BatchRequest {
            prompt: prompts::topic_prompt(&sample),
            schema: Schema::Topic,
        };
        let r = gateway.complete_structured(&req, 0).await;
        let label = match (&r.parsed, r.valid) {
            (Some(Payload::Topic { topic }), true) => truncate_words(topic, TOPIC_MAX_WORDS),
            _ => String::new(),
        };
        if label.is_empty() {
            (cid, fallback_label(cid))
        } else {
            (cid, label)
        }
    });
    futures::future::join_all(jobs).await.into_iter().collect()
}

/// True when both assignments group snippets identically, whatever the ids.
pub fn same_partition(a: &ClusterAssignment, b: &ClusterAssignment) -> bool {
    let sets = |c: &ClusterAssignment| -> BTreeSet<Vec<String>> {
        c.clusters
            .values()
            .map(|m| {
                let mut m = m.clone();
                m.sort();
                m
            })
            .collect()
    };
    sets(a) == sets(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::fixture::{FixtureProvider, FixtureSet};
    use crate::taxonomy::Step;
    use std::sync::Arc;

    fn ev(id: &str, v: &[f64]) -> EmbeddingVector {
        EmbeddingVector {
            snippet_id: id.into(),
            values: v.to_vec(),
        }
    }

    #[test]
    fn distance_examples() {
        let d = cosine_distance_matrix(&[ev("a", &[1.0, 2.0]), ev("b", &[1.0, 2.0])], false).unwrap();
        assert!(d[0][1].abs() < 1e-15);
        let d = cosine_distance_matrix(&[ev("a", &[1.0, 0.0]), ev("b", &[0.0, 3.0])], false).unwrap();
        assert_eq!(d[0][1], 1.0);
        let d = cosine_distance_matrix(&[ev("a", &[1.0, 1.0]), ev("b", &[-2.0, -2.0])], false).unwrap();
        assert!((d[0][1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_names_the_snippet() {
        let e = cosine_distance_matrix(&[ev("a", &[1.0]), ev("zero", &[0.0])], false).unwrap_err();
        assert_eq!(e, ClusterError::ZeroVector("zero".into()));
        assert!(e.to_string().contains("zero"));
    }

    #[test]
    fn simple_clusterings() {
        let same = vec![ev("a", &[1.0, 0.1]), ev("b", &[1.0, 0.1]), ev("c", &[1.0, 0.1])];
        assert_eq!(agglomerative_cluster(&same, 0.5, false).unwrap().len(), 1);
        let one = agglomerative_cluster(&[ev("x", &[0.3])], 0.5, false).unwrap();
        assert_eq!(one.clusters[&0], vec!["x"]);
        let two = vec![
            ev("a", &[1.0, 0.0]),
            ev("b", &[0.0, 1.0]),
            ev("c", &[0.95, 0.05]),
            ev("d", &[0.02, 1.0]),
        ];
        let c = agglomerative_cluster(&two, 0.5, false).unwrap();
        assert_eq!(c.clusters[&0], vec!["a", "c"]);
        assert_eq!(c.clusters[&1], vec!["b", "d"]);
    }

    #[test]
    fn linkage_is_average_not_single() {
        // a-b similar, c close to b only: single linkage would chain all three
        let d = vec![vec![0.0, 0.2, 0.9], vec![0.2, 0.0, 0.45], vec![0.9, 0.45, 0.0]];
        let g = average_linkage(d, 0.5, false);
        assert_eq!(g, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn ties_break_on_lowest_index() {
        let d = vec![vec![0.0, 0.3, 0.3], vec![0.3, 0.0, 0.3], vec![0.3, 0.3, 0.0]];
        // first merge must be (0,1); then {0,1}-2 at 0.3 joins too
        assert_eq!(average_linkage(d.clone(), 0.5, false), vec![vec![0, 1, 2]]);
        assert_eq!(average_linkage(d, 0.29, false), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn parallel_matches_sequential() {
        let vs: Vec<EmbeddingVector> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.37;
                ev(&format!("s{i:02}"), &[t.cos(), t.sin(), (i % 3) as f64 * 0.2])
            })
            .collect();
        assert_eq!(
            cosine_distance_matrix(&vs, true).unwrap(),
            cosine_distance_matrix(&vs, false).unwrap()
        );
        assert_eq!(
            agglomerative_cluster(&vs, 0.5, true).unwrap(),
            agglomerative_cluster(&vs, 0.5, false).unwrap()
        );
    }

    #[test]
    fn evidence_text_assembly() {
        let mut i = EmbedInput {
            snippet_id: "s".into(),
            evidence: vec!["a".into(), "b".into(), "a".into()],
            explanation: "why".into(),
            snippet_text: "raw".into(),
        };
        assert_eq!(i.evidence_text().unwrap(), "a\nb\nwhy");
        i.evidence.clear();
        assert_eq!(i.evidence_text().unwrap(), "why");
        i.explanation.clear();
        assert_eq!(i.evidence_text(), None);
    }

    fn input(id: &str, ev: &str) -> EmbedInput {
        EmbedInput {
            snippet_id: id.into(),
            evidence: if ev.is_empty() { vec![] } else { vec![ev.into()] },
            explanation: String::new(),
            snippet_text: format!("text of {id}"),
        }
    }

    #[tokio::test]
    async fn embeddings_are_cached_and_deduplicated() {
        let provider = Arc::new(FixtureProvider::empty().with_embedding_dim(64));
        let g = Gateway::new(provider.clone());
        let cache = Mutex::new(EmbeddingCache::default());
        let inputs = vec![input("a", "the reef"), input("b", "the reef"), input("c", "")];
        let r = embed_evidence(&inputs, &g, Some(&cache)).await;
        assert_eq!(r.vectors.len(), 3);
        assert_eq!(r.vectors[0].values, r.vectors[1].values);
        assert_eq!(r.fallbacks, vec!["c"]);
        assert_eq!(cache.lock().unwrap().entries.len(), 2);
        let again = embed_evidence(&inputs, &g, Some(&cache)).await;
        assert_eq!(again.vectors, r.vectors);
    }

    #[tokio::test]
    async fn topics_from_provider_or_fallback() {
        let texts: BTreeMap<String, String> = [("s1".to_owned(), "I dream of a shop".to_owned())]
            .into_iter()
            .collect();
        let mut a = ClusterAssignment::default();
        a.assignment.insert("s1".into(), 0);
        a.clusters.insert(0, vec!["s1".into()]);
        a.clusters.insert(3, vec!["missing".into()]);
        let mut set = FixtureSet::new(0);
        set.insert(
            &prompts::topic_prompt(&["I dream of a shop".to_owned()]),
            Step::TopicLabel,
            vec![r#"{"topic": "Little Vendor Dream of owning a small shop"}"#.into()],
        );
        let g = Gateway::new(Arc::new(FixtureProvider::new(set)));
        let labels = label_topics(&a, &texts, &g).await;
        assert_eq!(labels[&0], "Little Vendor Dream of owning a");
        assert_eq!(labels[&3], "cluster-3");
    }

    #[allow(clippy::needless_range_loop)]
    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matrix_is_symmetric_in_range(raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 2..12)) {
                let vs: Vec<EmbeddingVector> = raw
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.iter().any(|x| x.abs() > 1e-3))
                    .map(|(i, v)| ev(&format!("{i:02}"), v))
                    .collect();
                prop_assume!(vs.len() >= 2);
                let d = cosine_distance_matrix(&vs, false).unwrap();
                for i in 0..vs.len() {
                    prop_assert_eq!(d[i][i], 0.0);
                    for j in 0..vs.len() {
                        prop_assert_eq!(d[i][j], d[j][i]);
                        prop_assert!((0.0..=2.0).contains(&d[i][j]));
                    }
                }
                let c = agglomerative_cluster(&vs, 0.5, false).unwrap();
                prop_assert_eq!(c.assignment.len(), vs.len());
                prop_assert!(c.clusters.values().all(|m| !m.is_empty()));
            }
        }
    }
}
