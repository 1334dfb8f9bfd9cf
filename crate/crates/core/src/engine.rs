//! The workbench: one workspace together with the mining pipeline, the rule
//! book and the layout builders. Every UI or CLI action maps onto one method
//! here.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circular::{allocate_sectors, optimize_angles, MdsConfig, DEFAULT_PADDING_DEGREES};
use crate::clock::{Clock, LogicalClock, SystemClock};
use crate::cluster::{
    agglomerative_cluster, cosine_distance_matrix, embed_evidence, label_topics, ClusterAssignment, EmbedInput,
    EmbeddingCache, EmbeddingVector, DEFAULT_THRESHOLD,
};
use crate::corpus::{self, Conversation, CorpusError, Document, IngestReport, RedactionMap, Snippet};
use crate::gateway::{Gateway, LlmProvider, ProgressSnapshot};
use crate::layout::chart::{ChartConfig, ChartInput, ChartLayout};
use crate::layout::dpsir::{DpsirConfig, DpsirGraphLayout};
use crate::layout::keywords::{KeywordCloud, KeywordConfig};
use crate::layout::linkgraph::{LinkGraphConfig, LinkGraphLayout};
use crate::layout::{
    build_dpsir_graph, build_keyword_cloud, build_link_graph, build_uncertainty_chart, svg, LayoutKind, Point,
};
use crate::pipeline::{apply_rules, Pipeline, PipelineError, ResponseCache, ResultSet, RunSubject, SnippetText};
use crate::store::{CacheEntry, Collection, StoreError, StoredLayout, StoredRule, Workspace};
use crate::taxonomy::{
    Edit, IndicatorKind, Rule, RuleBook, Step, TaxonomyError, TaxonomyVersion, VariableRef, VersionStore, MISCELLANEOUS,
};
use crate::uncertainty::uncertainty_or_zero;

pub const DEFAULT_K: usize = 5;
const RESPONSE_CACHE_ID: &str = "responses";
const EMBEDDING_CACHE_ID: &str = "embeddings";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    #[default]
    System,
    /// One-second ticks from a fixed epoch, for reproducible workspaces.
    Logical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub k: usize,
    pub parallel: bool,
    pub clock: ClockKind,
    pub cluster_threshold: f64,
    pub sector_padding_degrees: f64,
    pub mds: MdsConfig,
    pub chart: ChartConfig,
    pub keywords: KeywordConfig,
    pub link_graph: LinkGraphConfig,
    pub dpsir: DpsirConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            parallel: crate::par::available(),
            clock: ClockKind::System,
            cluster_threshold: DEFAULT_THRESHOLD,
            sector_padding_degrees: DEFAULT_PADDING_DEGREES,
            mds: MdsConfig::default(),
            chart: ChartConfig::default(),
            keywords: KeywordConfig::default(),
            link_graph: LinkGraphConfig::default(),
            dpsir: DpsirConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("version {0} has not been executed")]
    NotExecuted(String),
    #[error("{what} needs a {expected:?} version, {version} is {found:?}")]
    WrongStep {
        what: &'static str,
        version: String,
        expected: Vec<Step>,
        found: Step,
    },
    #[error("unknown snippet {0}")]
    UnknownSnippet(String),
    #[error("{0}")]
    InvalidRequest(String),
}

/// Rule-adjusted results of one version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveResults {
    pub result: ResultSet,
    pub rule_warnings: Vec<String>,
}

/// One row of the list view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetSummary {
    pub snippet_id: String,
    pub uncertainty: f64,
    pub labels: Vec<String>,
    pub prompts: usize,
}

/// Everything needed to run one version, detached from the workbench so the
/// model calls can proceed without holding it.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    version: TaxonomyVersion,
    upstream: Option<ResultSet>,
    snippets: Vec<SnippetText>,
    pipeline: Pipeline,
}

impl ExecutionPlan {
    pub fn version_id(&self) -> &str {
        &self.version.id
    }

    pub fn snippet_count(&self) -> usize {
        self.snippets.len()
    }

    pub async fn run(&self) -> Result<ResultSet, EngineError> {
        let p = &self.pipeline;
        let up = || self.upstream.as_ref().expect("planned with upstream results");
        Ok(match self.version.step {
            Step::IndicatorId => p.identify_indicators(&self.version, &self.snippets).await?,
            Step::VariableId => p.identify_variables(&self.version, up(), &self.snippets).await?,
            Step::LinkId => p.identify_links(&self.version, up(), &self.snippets).await?,
            other => unreachable!("plans are only built for mining steps, not {other:?}"),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutRequest {
    pub kind: Option<LayoutKind>,
    pub version_id: String,
    #[serde(default)]
    pub hide: BTreeSet<IndicatorKind>,
    #[serde(default)]
    pub open: BTreeSet<IndicatorKind>,
    #[serde(default)]
    pub snippet_id: Option<String>,
}

impl LayoutRequest {
    pub fn new(kind: LayoutKind, version_id: impl Into<String>) -> Self {
        Self {
            kind: Some(kind),
            version_id: version_id.into(),
            ..Self::default()
        }
    }

    fn kind(&self) -> Result<LayoutKind, EngineError> {
        self.kind
            .ok_or_else(|| EngineError::InvalidRequest("layout kind missing".into()))
    }

    fn params(&self) -> BTreeMap<String, String> {
        let join = |s: &BTreeSet<IndicatorKind>| s.iter().map(|k| k.name()).collect::<Vec<_>>().join(",");
        let mut p = BTreeMap::new();
        if !self.hide.is_empty() {
            p.insert("hide".to_owned(), join(&self.hide));
        }
        if !self.open.is_empty() {
            p.insert("open".to_owned(), join(&self.open));
        }
        if let Some(s) = &self.snippet_id {
            p.insert("snippet".to_owned(), s.clone());
        }
        p
    }
}

/// Axis-aligned box that maps layout coordinates onto the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub min: Point,
    pub max: Point,
}

impl Frame {
    fn square(half: f64) -> Self {
        Self {
            min: Point::new(-half, -half),
            max: Point::new(half, half),
        }
    }

    fn include(&mut self, p: Point, pad: f64) {
        self.min.x = self.min.x.min(p.x - pad);
        self.min.y = self.min.y.min(p.y - pad);
        self.max.x = self.max.x.max(p.x + pad);
        self.max.y = self.max.y.max(p.y + pad);
    }

    /// Position of `p` in [0, 1]², y up.
    pub fn unit(&self, p: Point) -> Point {
        Point::new(
            (p.x - self.min.x) / (self.max.x - self.min.x),
            (p.y - self.min.y) / (self.max.y - self.min.y),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "kebab-case")]
pub enum LayoutBody {
    Uncertainty(ChartLayout),
    Keywords(KeywordCloud),
    LinkGraph(LinkGraphLayout),
    Dpsir(DpsirGraphLayout),
}

/// A layout as served to clients and written by exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub version_id: String,
    pub params: BTreeMap<String, String>,
    pub frame: Frame,
    pub warnings: Vec<String>,
    pub layout: LayoutBody,
}

impl LayoutDocument {
    pub fn kind(&self) -> LayoutKind {
        match self.layout {
            LayoutBody::Uncertainty(_) => LayoutKind::Uncertainty,
            LayoutBody::Keywords(_) => LayoutKind::Keywords,
            LayoutBody::LinkGraph(_) => LayoutKind::LinkGraph,
            LayoutBody::Dpsir(_) => LayoutKind::Dpsir,
        }
    }

    pub fn id(&self) -> String {
        let mut id = format!("{}-{}", self.kind().slug(), self.version_id);
        for (k, v) in &self.params {
            id.push_str(&format!("-{k}={v}"));
        }
        id
    }

    pub fn svg(&self) -> String {
        match &self.layout {
            LayoutBody::Uncertainty(l) => svg::chart_svg(l),
            LayoutBody::Keywords(l) => svg::keyword_svg(l),
            LayoutBody::LinkGraph(l) => svg::link_graph_svg(l),
            LayoutBody::Dpsir(l) => svg::dpsir_svg(l),
        }
    }
}

/// A highlighted evidence quote inside one conversation. Offsets count
/// Unicode scalar values, end exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightSpan {
    pub conversation: usize,
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceView {
    pub snippet: Snippet,
    pub conversations: Vec<Conversation>,
    pub version_id: Option<String>,
    pub uncertainty: Option<f64>,
    pub spans: Vec<HighlightSpan>,
    pub annotations: Vec<Annotation>,
    /// Evidence quotes that could not be located in the transcript.
    pub unmatched: Vec<String>,
}

/// Per-snippet uncertainty of a result: the run-set score for indicators,
/// and the score of the union over all prompts of a snippet for variables
/// (labels qualified by indicator) and links.
pub fn snippet_uncertainty(result: &ResultSet) -> BTreeMap<String, f64> {
    match result.step {
        Step::LinkId => result.snippet_uncertainty.clone(),
        Step::VariableId => {
            let mut per: BTreeMap<String, Vec<BTreeSet<String>>> = BTreeMap::new();
            for r in &result.runsets {
                let RunSubject::Indicator { indicator } = r.subject else {
                    continue;
                };
                let runs = per
                    .entry(r.snippet_id.clone())
                    .or_insert_with(|| vec![BTreeSet::new(); r.label_sets.len()]);
                for (acc, set) in runs.iter_mut().zip(&r.label_sets) {
                    acc.extend(set.iter().map(|l| VariableRef::new(indicator, l.clone()).key()));
                }
            }
            per.into_iter()
                .map(|(s, sets)| (s, uncertainty_or_zero(&sets)))
                .collect()
        }
        _ => result
            .runsets
            .iter()
            .map(|r| (r.snippet_id.clone(), r.aggregate.uncertainty))
            .collect(),
    }
}

/// Evidence attached to the `miscellaneous` tag, per snippet, in snippet
/// order. Input of the keyword cloud.
pub fn misc_evidence(result: &ResultSet) -> Vec<(String, Vec<String>)> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in &result.runsets {
        if r.step == Step::VariableId && r.aggregate.labels.contains(MISCELLANEOUS) {
            let e = out.entry(r.snippet_id.clone()).or_default();
            for x in &r.aggregate.evidence {
                if !e.contains(x) {
                    e.push(x.clone());
                }
            }
        }
    }
    out.into_iter().collect()
}

/// Embedding inputs of each scored snippet.
pub fn embed_inputs(result: &ResultSet, texts: &BTreeMap<String, String>) -> Vec<EmbedInput> {
    snippet_uncertainty(result)
        .keys()
        .map(|sid| {
            let mut evidence = Vec::new();
            let mut explanations: Vec<String> = Vec::new();
            let mut push_exp = |e: &str| {
                if !e.trim().is_empty() && !explanations.iter().any(|x| x == e) {
                    explanations.push(e.to_owned());
                }
            };
            if result.step == Step::LinkId {
                for l in result.links_for(sid) {
                    evidence.extend(l.evidence.iter().cloned());
                    push_exp(&l.explanation);
                }
            } else {
                for r in result.runsets_for(sid) {
                    evidence.extend(r.aggregate.evidence.iter().cloned());
                    push_exp(&r.aggregate.explanation);
                }
            }
            EmbedInput {
                snippet_id: sid.clone(),
                evidence,
                explanation: explanations.join("\n"),
                snippet_text: texts.get(sid).cloned().unwrap_or_default(),
            }
        })
        .collect()
}

/// Clusters of a result's snippets and their vectors in snippet order.
pub struct ChartClusters {
    pub vectors: Vec<EmbeddingVector>,
    pub assignment: ClusterAssignment,
    pub warnings: Vec<String>,
}

/// Embeds and clusters the snippets of a result. Snippets whose embedding
/// is unusable are dropped with a warning.
pub async fn cluster_result(
    result: &ResultSet,
    texts: &BTreeMap<String, String>,
    gateway: &Gateway,
    cache: Option<&Mutex<EmbeddingCache>>,
    threshold: f64,
    parallel: bool,
) -> ChartClusters {
    let inputs = embed_inputs(result, texts);
    let report = embed_evidence(&inputs, gateway, cache).await;
    let mut warnings = report.warnings;
    warnings.extend(report.excluded.iter().map(|s| format!("{s}: excluded, no embedding")));
    let dim = report.vectors.iter().map(|v| v.values.len()).max().unwrap_or(0);
    let mut vectors: Vec<EmbeddingVector> = Vec::new();
    for v in report.vectors {
        let usable =
            v.values.len() == dim && v.values.iter().all(|x| x.is_finite()) && v.values.iter().any(|x| *x != 0.0);
        if usable {
            vectors.push(v);
        } else {
            warnings.push(format!("{}: excluded, unusable embedding", v.snippet_id));
        }
    }
    vectors.sort_by(|a, b| a.snippet_id.cmp(&b.snippet_id));
    let assignment = if vectors.is_empty() {
        ClusterAssignment::default()
    } else {
        agglomerative_cluster(&vectors, threshold, parallel).expect("vectors were validated")
    };
    ChartClusters {
        vectors,
        assignment,
        warnings,
    }
}

pub struct Workbench {
    store: Workspace,
    versions: VersionStore,
    rules: RuleBook,
    gateway: Gateway,
    config: EngineConfig,
    responses: Arc<Mutex<ResponseCache>>,
    embeddings: Mutex<EmbeddingCache>,
}

impl std::fmt::Debug for Workbench {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workbench")
            .field("root", &self.store.root())
            .field("versions", &self.versions)
            .field("rules", &self.rules.len())
            .finish()
    }
}

fn load_cache<T: serde::de::DeserializeOwned + Default>(store: &Workspace, id: &str) -> Result<T, EngineError> {
    if !store.contains(Collection::Cache, id) {
        return Ok(T::default());
    }
    let e: CacheEntry = store.load(id)?;
    Ok(serde_json::from_value(e.body).map_err(StoreError::from)?)
}

impl Workbench {
    pub fn open(store: Workspace, provider: Arc<dyn LlmProvider>, config: EngineConfig) -> Result<Self, EngineError> {
        let versions: Vec<TaxonomyVersion> = store.load_all()?;
        let last = versions.iter().map(|v| v.created_at).max();
        let clock: Arc<dyn Clock> = match (config.clock, last) {
            (ClockKind::System, _) => Arc::new(SystemClock),
            (ClockKind::Logical, Some(t)) => Arc::new(LogicalClock::after(t)),
            (ClockKind::Logical, None) => Arc::new(LogicalClock::default()),
        };
        let rules = RuleBook::from_entries(store.load_all::<StoredRule>()?.into_iter().map(|r| (r.id, r.rule)));
        let responses = load_cache(&store, RESPONSE_CACHE_ID)?;
        let embeddings = load_cache(&store, EMBEDDING_CACHE_ID)?;
        Ok(Self {
            versions: VersionStore::from_versions(clock, versions),
            rules,
            gateway: Gateway::new(provider),
            config,
            responses: Arc::new(Mutex::new(responses)),
            embeddings: Mutex::new(embeddings),
            store,
        })
    }

    pub fn store(&self) -> &Workspace {
        &self.store
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn progress(&self) -> ProgressSnapshot {
        self.gateway.progress().snapshot()
    }

    // corpus

    pub fn ingest(&mut self, source: &Path, redaction: Option<&RedactionMap>) -> Result<IngestReport, EngineError> {
        let report = corpus::ingest(source, redaction)?;
        for d in &report.documents {
            self.store.save(d)?;
        }
        Ok(report)
    }

    pub fn add_document(&mut self, doc: &Document) -> Result<(), EngineError> {
        self.store.save(doc)?;
        Ok(())
    }

    pub fn documents(&self) -> Result<Vec<Document>, EngineError> {
        Ok(self.store.load_all()?)
    }

    pub fn document(&self, id: &str) -> Result<Document, EngineError> {
        Ok(self.store.load(id)?)
    }

    pub fn snippets(&self) -> Result<Vec<Snippet>, EngineError> {
        Ok(self.store.load_all()?)
    }

    pub fn snippet(&self, id: &str) -> Result<Snippet, EngineError> {
        self.store.load(id).map_err(|e| match e {
            StoreError::NotFound { .. } => EngineError::UnknownSnippet(id.to_owned()),
            e => e.into(),
        })
    }

    /// Segments every document that has no snippets yet.
    pub async fn segment(&mut self, questions: &[String]) -> Result<Vec<Snippet>, EngineError> {
        let done: BTreeSet<String> = self.snippets()?.into_iter().map(|s| s.document_id).collect();
        let docs: Vec<Document> = self
            .documents()?
            .into_iter()
            .filter(|d| !done.contains(&d.id))
            .collect();
        let snippets = corpus::segment_all(&docs, questions, &self.gateway).await;
        for s in &snippets {
            self.store.save(s)?;
        }
        Ok(snippets)
    }

    /// Rendered text of every snippet, in id order.
    pub fn snippet_texts(&self) -> Result<Vec<SnippetText>, EngineError> {
        let docs: BTreeMap<String, Document> = self.documents()?.into_iter().map(|d| (d.id.clone(), d)).collect();
        Ok(self
            .snippets()?
            .iter()
            .filter_map(|s| {
                docs.get(&s.document_id).map(|d| SnippetText {
                    id: s.id.clone(),
                    text: s.render(d),
                })
            })
            .collect())
    }

    fn text_map(&self) -> Result<BTreeMap<String, String>, EngineError> {
        Ok(self.snippet_texts()?.into_iter().map(|s| (s.id, s.text)).collect())
    }

    // versions

    pub fn create_version(
        &mut self,
        step: Step,
        parent: Option<&str>,
        edits: &[Edit],
    ) -> Result<TaxonomyVersion, EngineError> {
        let v = self.versions.create_version(step, parent, edits)?;
        self.store.save(&v)?;
        Ok(v)
    }

    pub fn version(&self, id: &str) -> Result<&TaxonomyVersion, EngineError> {
        Ok(self.versions.get(id)?)
    }

    pub fn versions(&self, step: Option<Step>) -> Vec<&TaxonomyVersion> {
        self.versions.list(step)
    }

    pub fn lineage(&self, id: &str) -> Result<Vec<String>, EngineError> {
        Ok(self.versions.lineage(id)?)
    }

    // execution

    pub fn plan_execution(&self, version_id: &str, k: Option<usize>) -> Result<ExecutionPlan, EngineError> {
        let version = self.version(version_id)?.clone();
        if !matches!(version.step, Step::IndicatorId | Step::VariableId | Step::LinkId) {
            return Err(EngineError::WrongStep {
                what: "execution",
                version: version.id,
                expected: vec![Step::IndicatorId, Step::VariableId, Step::LinkId],
                found: version.step,
            });
        }
        let upstream = match &version.upstream_version_id {
            Some(up) => Some(self.results(up)?.result),
            None => None,
        };
        let k = k.unwrap_or(self.config.k);
        if k == 0 {
            return Err(EngineError::InvalidRequest("k must be at least 1".into()));
        }
        Ok(ExecutionPlan {
            version,
            upstream,
            snippets: self.snippet_texts()?,
            pipeline: Pipeline::new(self.gateway.clone(), k).with_cache(self.responses.clone()),
        })
    }

    /// Stores a finished execution and links it to its version.
    pub fn commit_execution(&mut self, result: ResultSet) -> Result<ResultSet, EngineError> {
        self.store.save(&result)?;
        self.versions.attach_result(&result.version_id, &result.id)?;
        let v = self.versions.get(&result.version_id)?.clone();
        self.store.save(&v)?;
        self.persist_caches()?;
        Ok(result)
    }

    pub async fn execute(&mut self, version_id: &str, k: Option<usize>) -> Result<ResultSet, EngineError> {
        let plan = self.plan_execution(version_id, k)?;
        let result = plan.run().await?;
        self.commit_execution(result)
    }

    pub fn persist_caches(&mut self) -> Result<(), EngineError> {
        let responses = serde_json::to_value(&*self.responses.lock().expect("cache lock")).map_err(StoreError::from)?;
        let embeddings =
            serde_json::to_value(&*self.embeddings.lock().expect("cache lock")).map_err(StoreError::from)?;
        for (id, body) in [(RESPONSE_CACHE_ID, responses), (EMBEDDING_CACHE_ID, embeddings)] {
            self.store.save(&CacheEntry {
                id: id.to_owned(),
                body,
            })?;
        }
        Ok(())
    }

    /// Results as stored, before rules.
    pub fn raw_results(&self, version_id: &str) -> Result<ResultSet, EngineError> {
        let v = self.version(version_id)?;
        let rid = v
            .result_id
            .clone()
            .ok_or_else(|| EngineError::NotExecuted(version_id.to_owned()))?;
        Ok(self.store.load(&rid)?)
    }

    pub fn results(&self, version_id: &str) -> Result<EffectiveResults, EngineError> {
        let raw = self.raw_results(version_id)?;
        let (result, rule_warnings) = apply_rules(&raw, &self.rules, self.version(version_id)?);
        Ok(EffectiveResults { result, rule_warnings })
    }

    /// List view rows, most uncertain first.
    pub fn snippet_summaries(&self, version_id: &str) -> Result<Vec<SnippetSummary>, EngineError> {
        let r = self.results(version_id)?.result;
        let scores = snippet_uncertainty(&r);
        let mut ids: BTreeSet<String> = r.snippet_ids().into_iter().collect();
        ids.extend(scores.keys().cloned());
        let mut rows: Vec<SnippetSummary> = ids
            .into_iter()
            .map(|sid| {
                let labels = match r.step {
                    Step::LinkId => r.links_for(&sid).map(|l| l.label()).collect(),
                    Step::VariableId => r
                        .runsets_for(&sid)
                        .flat_map(|rs| match rs.subject {
                            RunSubject::Indicator { indicator } => rs
                                .aggregate
                                .labels
                                .iter()
                                .map(|l| VariableRef::new(indicator, l.clone()).key())
                                .collect::<Vec<_>>(),
                            _ => vec![],
                        })
                        .collect(),
                    _ => r
                        .runsets_for(&sid)
                        .flat_map(|rs| rs.aggregate.labels.iter().cloned())
                        .collect(),
                };
                SnippetSummary {
                    uncertainty: scores.get(&sid).copied().unwrap_or(0.0),
                    prompts: r.prompt_counts.get(&sid).copied().unwrap_or(0),
                    snippet_id: sid,
                    labels,
                }
            })
            .collect();
        rows.sort_by(|a, b| {
            b.uncertainty
                .total_cmp(&a.uncertainty)
                .then(a.snippet_id.cmp(&b.snippet_id))
        });
        Ok(rows)
    }

    // rules

    pub fn rules(&self) -> &RuleBook {
        &self.rules
    }

    pub fn add_rule(&mut self, rule: Rule) -> Result<String, EngineError> {
        self.snippet(&rule.snippet_id)?;
        let mut book = self.rules.clone();
        let id = book.add(rule.clone())?;
        self.store.save(&StoredRule { id: id.clone(), rule })?;
        self.rules = book;
        Ok(id)
    }

    pub fn remove_rule(&mut self, id: &str) -> Result<Rule, EngineError> {
        if self.rules.get(id).is_none() {
            return Err(TaxonomyError::RuleNotFound(id.to_owned()).into());
        }
        self.store.delete(Collection::Rules, id)?;
        Ok(self.rules.remove(id)?)
    }

    // layouts

    fn expect_step(
        &self,
        what: &'static str,
        version_id: &str,
        expected: &[Step],
    ) -> Result<&TaxonomyVersion, EngineError> {
        let v = self.version(version_id)?;
        if !expected.contains(&v.step) {
            return Err(EngineError::WrongStep {
                what,
                version: v.id.clone(),
                expected: expected.to_vec(),
                found: v.step,
            });
        }
        Ok(v)
    }

    pub async fn layout(&self, req: &LayoutRequest) -> Result<LayoutDocument, EngineError> {
        let kind = req.kind()?;
        let (frame, warnings, layout) = match kind {
            LayoutKind::Uncertainty => {
                let (chart, warnings) = self.uncertainty_chart(&req.version_id).await?;
                let frame = Frame::square(chart.chart_radius * 1.1);
                (frame, warnings, LayoutBody::Uncertainty(chart))
            }
            LayoutKind::Keywords => {
                let cloud = self.keyword_cloud(&req.version_id).await?;
                let c = &self.config.keywords;
                let mut frame = Frame {
                    min: Point::new(-c.width / 2.0, -c.height / 2.0),
                    max: Point::new(c.width / 2.0, c.height / 2.0),
                };
                for i in &cloud.items {
                    frame.include(i.position, i.width.max(i.height) / 2.0);
                }
                (frame, cloud.warnings.clone(), LayoutBody::Keywords(cloud))
            }
            LayoutKind::LinkGraph => {
                let sid = req
                    .snippet_id
                    .as_deref()
                    .ok_or_else(|| EngineError::InvalidRequest("link graph needs a snippet".into()))?;
                let g = self.link_graph(&req.version_id, sid)?;
                let mut frame = Frame::square(50.0);
                for n in &g.nodes {
                    frame.include(n.position, n.radius + 20.0);
                }
                (frame, vec![], LayoutBody::LinkGraph(g))
            }
            LayoutKind::Dpsir => {
                let (g, warnings) = self.dpsir_graph(&req.version_id, &req.hide, &req.open)?;
                let mut frame = Frame::square(1.0);
                for b in &g.blocks {
                    frame.include(b.position, b.size);
                }
                (frame, warnings, LayoutBody::Dpsir(g))
            }
        };
        Ok(LayoutDocument {
            version_id: req.version_id.clone(),
            params: req.params(),
            frame,
            warnings,
            layout,
        })
    }

    pub fn save_layout(&mut self, doc: &LayoutDocument) -> Result<String, EngineError> {
        let stored = StoredLayout {
            id: doc.id(),
            kind: doc.kind().slug().to_owned(),
            version_id: Some(doc.version_id.clone()),
            params: doc.params.clone(),
            body: serde_json::to_value(doc).map_err(StoreError::from)?,
        };
        Ok(self.store.save(&stored)?)
    }

    pub async fn uncertainty_chart(&self, version_id: &str) -> Result<(ChartLayout, Vec<String>), EngineError> {
        self.expect_step(
            "an uncertainty chart",
            version_id,
            &[Step::IndicatorId, Step::VariableId, Step::LinkId],
        )?;
        let result = self.results(version_id)?.result;
        let texts = self.text_map()?;
        let scores = snippet_uncertainty(&result);
        let clusters = cluster_result(
            &result,
            &texts,
            &self.gateway,
            Some(&self.embeddings),
            self.config.cluster_threshold,
            self.config.parallel,
        )
        .await;
        let mut warnings = clusters.warnings;
        let vectors = &clusters.vectors;
        let thetas = if vectors.len() >= 2 {
            let d = cosine_distance_matrix(vectors, self.config.parallel).expect("vectors were validated");
            let sol = optimize_angles(
                &d,
                &MdsConfig {
                    parallel: self.config.parallel,
                    ..self.config.mds
                },
            );
            if !sol.converged {
                warnings.push(format!("angle optimization stopped at objective {:.3e}", sol.objective));
            }
            sol.thetas
        } else {
            vec![0.0; vectors.len()]
        };
        let labels = label_topics(&clusters.assignment, &texts, &self.gateway).await;
        let mut members: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut inputs = Vec::with_capacity(vectors.len());
        for (v, &theta) in vectors.iter().zip(&thetas) {
            let cid = clusters
                .assignment
                .cluster_of(&v.snippet_id)
                .expect("every vector is assigned");
            members.entry(cid).or_default().push(theta);
            inputs.push(ChartInput {
                snippet_id: v.snippet_id.clone(),
                uncertainty: scores.get(&v.snippet_id).copied().unwrap_or(0.0),
                theta,
                cluster_id: cid,
            });
        }
        let sectors = allocate_sectors(&members, self.config.sector_padding_degrees.to_radians());
        Ok((
            build_uncertainty_chart(&inputs, &sectors, &labels, &self.config.chart),
            warnings,
        ))
    }

    /// Keyword cloud of a variable version. Executed ancestors are laid out
    /// first, oldest to newest, so their word positions carry over.
    pub async fn keyword_cloud(&self, version_id: &str) -> Result<KeywordCloud, EngineError> {
        self.expect_step("a keyword cloud", version_id, &[Step::VariableId])?;
        let mut chain = self.lineage(version_id)?;
        chain.reverse();
        let mut prior: Option<KeywordCloud> = None;
        for id in chain {
            if id != version_id && self.version(&id)?.result_id.is_none() {
                continue;
            }
            let result = self.results(&id)?.result;
            let evidence = misc_evidence(&result);
            let projection = prior.as_ref().and_then(|c| c.projection.as_ref());
            prior = Some(build_keyword_cloud(&evidence, &self.gateway, projection, &self.config.keywords).await);
        }
        Ok(prior.expect("the chain contains the version itself"))
    }

    pub fn link_graph(&self, version_id: &str, snippet_id: &str) -> Result<LinkGraphLayout, EngineError> {
        self.expect_step("a link graph", version_id, &[Step::LinkId])?;
        self.snippet(snippet_id)?;
        let result = self.results(version_id)?.result;
        let links: Vec<_> = result.links_for(snippet_id).cloned().collect();
        Ok(build_link_graph(&links, &self.config.link_graph))
    }

    pub fn dpsir_graph(
        &self,
        version_id: &str,
        hide: &BTreeSet<IndicatorKind>,
        open: &BTreeSet<IndicatorKind>,
    ) -> Result<(DpsirGraphLayout, Vec<String>), EngineError> {
        let v = self.expect_step("a DPSIR graph", version_id, &[Step::LinkId])?;
        let visible: BTreeSet<IndicatorKind> = IndicatorKind::ALL.into_iter().filter(|k| !hide.contains(k)).collect();
        if visible.is_empty() {
            return Err(EngineError::InvalidRequest(
                "at least one indicator must stay visible".into(),
            ));
        }
        let variables: Vec<VariableRef> = v.variables.iter().map(|x| x.reference()).collect();
        let eff = self.results(version_id)?;
        let g = build_dpsir_graph(&eff.result.links, &variables, &visible, open, &self.config.dpsir);
        Ok((g, eff.rule_warnings))
    }

    // evidence

    pub fn evidence(&self, snippet_id: &str, version_id: Option<&str>) -> Result<EvidenceView, EngineError> {
        let snippet = self.snippet(snippet_id)?;
        let doc = self.document(&snippet.document_id)?;
        let conversations = snippet.conversations(&doc).to_vec();
        let mut view = EvidenceView {
            snippet,
            conversations,
            version_id: version_id.map(str::to_owned),
            uncertainty: None,
            spans: vec![],
            annotations: vec![],
            unmatched: vec![],
        };
        let Some(vid) = version_id else { return Ok(view) };
        let result = self.results(vid)?.result;
        view.uncertainty = snippet_uncertainty(&result).get(snippet_id).copied();
        let mut quotes: Vec<(String, String)> = Vec::new();
        if result.step == Step::LinkId {
            for l in result.links_for(snippet_id) {
                view.annotations.push(Annotation {
                    label: l.label(),
                    explanation: l.explanation.clone(),
                });
                quotes.extend(l.evidence.iter().map(|e| (l.label(), e.clone())));
            }
        } else {
            for r in result.runsets_for(snippet_id) {
                let label = match &r.subject {
                    RunSubject::Indicator { indicator } => format!(
                        "{}: {}",
                        indicator.name(),
                        r.aggregate.labels.iter().cloned().collect::<Vec<_>>().join(", ")
                    ),
                    _ => r.aggregate.labels.iter().cloned().collect::<Vec<_>>().join(", "),
                };
                view.annotations.push(Annotation {
                    label: label.clone(),
                    explanation: r.aggregate.explanation.clone(),
                });
                quotes.extend(r.aggregate.evidence.iter().map(|e| (label.clone(), e.clone())));
            }
        }
        for (label, quote) in quotes {
            let found = view
                .conversations
                .iter()
                .find_map(|c| find_span(&c.text, &quote).map(|(s, e)| (c.index, s, e)));
            match found {
                Some((conversation, start, end)) => {
                    let span = HighlightSpan {
                        conversation,
                        start,
                        end,
                        label,
                    };
                    if !view.spans.contains(&span) {
                        view.spans.push(span);
                    }
                }
                None if !view.unmatched.contains(&quote) => view.unmatched.push(quote),
                None => {}
            }
        }
        view.spans.sort_by_key(|s| (s.conversation, s.start, s.end));
        Ok(view)
    }

    pub fn export(&self, archive: &Path) -> Result<(), EngineError> {
        Ok(self.store.export(archive)?)
    }
}

/// Indicator colors shared by every renderer.
pub fn palette() -> BTreeMap<String, String> {
    IndicatorKind::ALL
        .into_iter()
        .map(|k| (k.name().to_owned(), k.color().to_owned()))
        .collect()
}

/// Character span of `quote` in `text`: exact match first, then ASCII
/// case-insensitive. Surrounding whitespace and quotes are ignored.
pub fn find_span(text: &str, quote: &str) -> Option<(usize, usize)> {
    let q = quote.trim().trim_matches(|c| c == '"' || c == '\'');
    if q.is_empty() {
        return None;
    }
    let byte = text
        .find(q)
        .or_else(|| text.to_ascii_lowercase().find(&q.to_ascii_lowercase()))?;
    let start = text[..byte].chars().count();
    Some((start, start + q.chars().count()))
}
