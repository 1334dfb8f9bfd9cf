//! The three mining steps (indicator, variable and link identification),
//! repeated-sampling aggregation, and post-hoc rule application.
//!
//! Each step issues all of its prompts `k` times through the gateway in one
//! batch, waits for the barrier, then aggregates. Aggregation takes the union
//! of the per-run label sets; per-label support fractions and the pairwise
//! Jaccard uncertainty keep the consistency signal.

pub mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{BatchRequest, Gateway, RenderError, Schema, StructuredResponse};
use crate::taxonomy::{
    IndicatorKind, RuleBook, RuleCondition, RuleValue, Step, TaxonomyVersion, Variable, VariableRef, VariableType,
};
use crate::uncertainty::uncertainty_or_zero;

pub use crate::taxonomy::VariableRef as VariableName;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("version {version} is a {found:?} version, expected {expected:?}")]
    WrongStep {
        version: String,
        expected: Step,
        found: Step,
    },
    #[error("version {version} consumes {expected:?}, but results of {found} were supplied")]
    UpstreamMismatch {
        version: String,
        expected: Option<String>,
        found: String,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Snippet id with its rendered content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetText {
    pub id: String,
    pub text: String,
}

/// What one run set was prompted about.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunSubject {
    Snippet,
    Indicator { indicator: IndicatorKind },
    Pair { a: VariableRef, b: VariableRef },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub labels: BTreeSet<String>,
    pub support: BTreeMap<String, f64>,
    pub evidence: Vec<String>,
    pub explanation: String,
    pub uncertainty: f64,
    #[serde(default)]
    pub rule_overrides: Vec<String>,
}

/// The `k` responses to one prompt and their aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSet {
    pub snippet_id: String,
    pub step: Step,
    pub subject: RunSubject,
    pub k: usize,
    pub responses: Vec<StructuredResponse>,
    pub label_sets: Vec<BTreeSet<String>>,
    pub aggregate: AggregateResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub snippet_id: String,
    pub source: VariableRef,
    pub target: VariableRef,
    pub relationship: String,
    pub evidence: Vec<String>,
    pub explanation: String,
    pub uncertainty: f64,
    /// Fraction of the runs that asserted this directed link.
    pub support: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_override: Option<String>,
}

impl LinkResult {
    pub fn label(&self) -> String {
        link_label(&self.source, &self.target)
    }
}

pub fn link_label(source: &VariableRef, target: &VariableRef) -> String {
    format!("{}->{}", source.key(), target.key())
}

/// Everything one execution of a version produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultSet {
    pub id: String,
    pub version_id: String,
    pub step: Step,
    pub k: usize,
    pub runsets: Vec<RunSet>,
    #[serde(default)]
    pub links: Vec<LinkResult>,
    /// Link step: uncertainty of each snippet over the union of its pair runs.
    #[serde(default)]
    pub snippet_uncertainty: BTreeMap<String, f64>,
    /// Distinct prompts issued per snippet.
    #[serde(default)]
    pub prompt_counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub applied_rules: Vec<String>,
}

impl ResultSet {
    pub fn result_id(version_id: &str) -> String {
        format!("result-{version_id}")
    }

    fn empty(version: &TaxonomyVersion, step: Step, k: usize) -> Self {
        Self {
            id: Self::result_id(&version.id),
            version_id: version.id.clone(),
            step,
            k,
            runsets: vec![],
            links: vec![],
            snippet_uncertainty: BTreeMap::new(),
            prompt_counts: BTreeMap::new(),
            warnings: vec![],
            applied_rules: vec![],
        }
    }

    pub fn runset(&self, snippet_id: &str, subject: &RunSubject) -> Option<&RunSet> {
        self.runsets
            .iter()
            .find(|r| r.snippet_id == snippet_id && &r.subject == subject)
    }

    pub fn runsets_for<'a>(&'a self, snippet_id: &'a str) -> impl Iterator<Item = &'a RunSet> + 'a {
        self.runsets.iter().filter(move |r| r.snippet_id == snippet_id)
    }

    pub fn links_for<'a>(&'a self, snippet_id: &'a str) -> impl Iterator<Item = &'a LinkResult> + 'a {
        self.links.iter().filter(move |l| l.snippet_id == snippet_id)
    }

    /// Identified variables per snippet (variable step), miscellaneous
    /// excluded.
    pub fn identified_variables(&self, snippet_id: &str) -> Vec<VariableRef> {
        let mut out: BTreeSet<VariableRef> = BTreeSet::new();
        for r in self.runsets_for(snippet_id) {
            if let RunSubject::Indicator { indicator } = r.subject {
                for l in &r.aggregate.labels {
                    let v = VariableRef::new(indicator, l.clone());
                    if !v.is_miscellaneous() {
                        out.insert(v);
                    }
                }
            }
        }
        out.into_iter().collect()
    }

    pub fn snippet_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.runsets.iter().map(|r| r.snippet_id.clone()).collect();
        ids.dedup();
        let set: BTreeSet<_> = ids.iter().cloned().collect();
        let mut seen = BTreeSet::new();
        ids.retain(|i| set.contains(i) && seen.insert(i.clone()));
        ids
    }
}

/// One run's contribution to an aggregate.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOutput {
    pub labels: BTreeSet<String>,
    pub evidence: Vec<String>,
    pub explanation: String,
}

/// Union aggregation over `k >= 1` runs.
///
/// `support` is the per-label frequency over `k`; evidence is concatenated
/// across runs without duplicates; the explanation comes from the run with
/// the most labels (earliest on ties).
pub fn aggregate_runs(runs: &[RunOutput]) -> AggregateResult {
    assert!(!runs.is_empty(), "aggregation needs at least one run");
    let k = runs.len() as f64;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut evidence: Vec<String> = Vec::new();
    for r in runs {
        for l in &r.labels {
            *counts.entry(l.clone()).or_default() += 1;
        }
        for e in &r.evidence {
            if !evidence.contains(e) {
                evidence.push(e.clone());
            }
        }
    }
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.labels.len() > runs[best].labels.len() {
            best = i;
        }
    }
    let sets: Vec<BTreeSet<String>> = runs.iter().map(|r| r.labels.clone()).collect();
    AggregateResult {
        labels: counts.keys().cloned().collect(),
        support: counts.into_iter().map(|(l, c)| (l, c as f64 / k)).collect(),
        evidence,
        explanation: runs[best].explanation.clone(),
        uncertainty: uncertainty_or_zero(&sets),
        rule_overrides: vec![],
    }
}

fn label_output(r: &StructuredResponse) -> RunOutput {
    match r.labels() {
        Some(p) => RunOutput {
            labels: p.labels.iter().cloned().collect(),
            evidence: p.evidence.clone(),
            explanation: p.explanation.clone(),
        },
        None => RunOutput::default(),
    }
}

fn build_runset(
    snippet_id: &str,
    step: Step,
    subject: RunSubject,
    responses: Vec<StructuredResponse>,
    outputs: Vec<RunOutput>,
) -> RunSet {
    let aggregate = aggregate_runs(&outputs);
    RunSet {
        snippet_id: snippet_id.to_owned(),
        step,
        subject,
        k: responses.len(),
        label_sets: outputs.into_iter().map(|o| o.labels).collect(),
        responses,
        aggregate,
    }
}

/// Responses keyed by prompt hash and repeat count. Only fully valid batches
/// are cached, so transport failures are retried on re-execution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseCache {
    pub entries: BTreeMap<String, Vec<StructuredResponse>>,
}

impl ResponseCache {
    fn key(req: &BatchRequest, k: usize) -> String {
        format!("{}:{k}", req.prompt.hash())
    }
}

/// Runs the mining steps through one gateway.
#[derive(Debug, Clone)]
pub struct Pipeline {
    gateway: Gateway,
    k: usize,
    cache: Option<Arc<Mutex<ResponseCache>>>,
}

impl Pipeline {
    pub fn new(gateway: Gateway, k: usize) -> Self {
        Self {
            gateway,
            k: k.max(1),
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: Arc<Mutex<ResponseCache>>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    async fn run(&self, requests: &[BatchRequest]) -> Vec<Vec<StructuredResponse>> {
        let k = self.k;
        let Some(cache) = &self.cache else {
            return self.gateway.execute_batch(requests, k).await;
        };
        let mut out: Vec<Option<Vec<StructuredResponse>>> = {
            let c = cache.lock().expect("cache lock");
            requests
                .iter()
                .map(|r| c.entries.get(&ResponseCache::key(r, k)).cloned())
                .collect()
        };
        let missing: Vec<usize> = (0..requests.len()).filter(|&i| out[i].is_none()).collect();
        let batch: Vec<BatchRequest> = missing.iter().map(|&i| requests[i].clone()).collect();
        let fresh = self.gateway.execute_batch(&batch, k).await;
        let mut c = cache.lock().expect("cache lock");
        for (i, responses) in missing.into_iter().zip(fresh) {
            if responses.iter().all(|r| r.valid) {
                c.entries.insert(ResponseCache::key(&requests[i], k), responses.clone());
            }
            out[i] = Some(responses);
        }
        out.into_iter().map(|o| o.expect("filled")).collect()
    }

    /// Indicator identification over every snippet.
    pub async fn identify_indicators(
        &self,
        version: &TaxonomyVersion,
        snippets: &[SnippetText],
    ) -> Result<ResultSet, PipelineError> {
        expect_step(version, Step::IndicatorId)?;
        let requests = snippets
            .iter()
            .map(|s| {
                Ok(BatchRequest {
                    prompt: prompts::indicator_prompt(version, &s.text)?,
                    schema: Schema::Indicators,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let responses = self.run(&requests).await;
        let mut result = ResultSet::empty(version, Step::IndicatorId, self.k);
        for (s, rs) in snippets.iter().zip(responses) {
            let outputs = rs.iter().map(label_output).collect();
            collect_warnings(&mut result.warnings, &s.id, &rs);
            result.prompt_counts.insert(s.id.clone(), 1);
            result
                .runsets
                .push(build_runset(&s.id, Step::IndicatorId, RunSubject::Snippet, rs, outputs));
        }
        Ok(result)
    }

    /// Variable identification for each indicator present in the upstream
    /// aggregate of a snippet.
    pub async fn identify_variables(
        &self,
        version: &TaxonomyVersion,
        indicator_results: &ResultSet,
        snippets: &[SnippetText],
    ) -> Result<ResultSet, PipelineError> {
        expect_step(version, Step::VariableId)?;
        expect_upstream(version, indicator_results)?;
        let mut subjects = Vec::new();
        let mut requests = Vec::new();
        for s in snippets {
            let Some(up) = indicator_results.runset(&s.id, &RunSubject::Snippet) else {
                continue;
            };
            for kind in IndicatorKind::ALL {
                if !up.aggregate.labels.contains(kind.name()) {
                    continue;
                }
                let allowed = version.variables_of(kind).map(|v| v.name.clone()).collect();
                requests.push(BatchRequest {
                    prompt: prompts::variable_prompt(version, kind, &s.text, &up.aggregate.explanation)?,
                    schema: Schema::Variables { allowed },
                });
                subjects.push((s.id.clone(), kind));
            }
        }
        let responses = self.run(&requests).await;
        let mut result = ResultSet::empty(version, Step::VariableId, self.k);
        for ((sid, kind), rs) in subjects.into_iter().zip(responses) {
            let outputs = rs.iter().map(label_output).collect();
            collect_warnings(&mut result.warnings, &sid, &rs);
            *result.prompt_counts.entry(sid.clone()).or_default() += 1;
            result.runsets.push(build_runset(
                &sid,
                Step::VariableId,
                RunSubject::Indicator { indicator: kind },
                rs,
                outputs,
            ));
        }
        Ok(result)
    }

    /// Link identification: one prompt per unordered pair of variables
    /// co-identified in a snippet; the model picks the direction.
    pub async fn identify_links(
        &self,
        version: &TaxonomyVersion,
        variable_results: &ResultSet,
        snippets: &[SnippetText],
    ) -> Result<ResultSet, PipelineError> {
        expect_step(version, Step::LinkId)?;
        expect_upstream(version, variable_results)?;
        struct PairJob {
            snippet: String,
            a: VariableRef,
            b: VariableRef,
            names: [String; 2],
        }
        let mut jobs = Vec::new();
        let mut requests = Vec::new();
        for s in snippets {
            let vars = variable_results.identified_variables(&s.id);
            for (i, a) in vars.iter().enumerate() {
                for b in &vars[i + 1..] {
                    let va = variable_def(version, a);
                    let vb = variable_def(version, b);
                    let names = prompts::pair_names(&va, &vb);
                    requests.push(BatchRequest {
                        prompt: prompts::link_prompt(version, &va, &vb, &s.text)?,
                        schema: Schema::Link { pair: names.clone() },
                    });
                    jobs.push(PairJob {
                        snippet: s.id.clone(),
                        a: a.clone(),
                        b: b.clone(),
                        names,
                    });
                }
            }
        }
        let responses = self.run(&requests).await;
        let mut result = ResultSet::empty(version, Step::LinkId, self.k);
        let mut per_snippet_runs: BTreeMap<String, Vec<BTreeSet<String>>> = BTreeMap::new();
        for (job, rs) in jobs.into_iter().zip(responses) {
            collect_warnings(&mut result.warnings, &job.snippet, &rs);
            *result.prompt_counts.entry(job.snippet.clone()).or_default() += 1;
            let resolve = |name: &str| {
                if name == job.names[0] {
                    job.a.clone()
                } else {
                    job.b.clone()
                }
            };
            let mut outputs = Vec::with_capacity(rs.len());
            let mut directed: Vec<Option<(VariableRef, VariableRef)>> = Vec::with_capacity(rs.len());
            for r in &rs {
                match r.link() {
                    Some(l) => {
                        let (src, dst) = (resolve(&l.source), resolve(&l.target));
                        outputs.push(RunOutput {
                            labels: BTreeSet::from([link_label(&src, &dst)]),
                            evidence: l.evidence.clone(),
                            explanation: l.explanation.clone(),
                        });
                        directed.push(Some((src, dst)));
                    }
                    None => {
                        outputs.push(RunOutput::default());
                        directed.push(None);
                    }
                }
            }
            let runs = per_snippet_runs
                .entry(job.snippet.clone())
                .or_insert_with(|| vec![BTreeSet::new(); rs.len()]);
            for (acc, o) in runs.iter_mut().zip(&outputs) {
                acc.extend(o.labels.iter().cloned());
            }
            let runset = build_runset(
                &job.snippet,
                Step::LinkId,
                RunSubject::Pair {
                    a: job.a.clone(),
                    b: job.b.clone(),
                },
                rs,
                outputs,
            );
            // one LinkResult per distinct direction any run asserted
            let mut emitted: Vec<String> = Vec::new();
            for (j, d) in directed.iter().enumerate() {
                let Some((src, dst)) = d else { continue };
                let label = link_label(src, dst);
                if emitted.contains(&label) {
                    continue;
                }
                emitted.push(label.clone());
                let mut evidence: Vec<String> = Vec::new();
                for (jj, dd) in directed.iter().enumerate() {
                    if dd.as_ref() == Some(&(src.clone(), dst.clone())) {
                        if let Some(l) = runset.responses[jj].link() {
                            for e in &l.evidence {
                                if !evidence.contains(e) {
                                    evidence.push(e.clone());
                                }
                            }
                        }
                    }
                }
                let first = runset.responses[j].link().expect("directed implies link");
                result.links.push(LinkResult {
                    snippet_id: job.snippet.clone(),
                    source: src.clone(),
                    target: dst.clone(),
                    relationship: first.relationship.clone(),
                    evidence,
                    explanation: first.explanation.clone(),
                    uncertainty: runset.aggregate.uncertainty,
                    support: runset.aggregate.support.get(&label).copied().unwrap_or(0.0),
                    rule_override: None,
                });
            }
            result.runsets.push(runset);
        }
        result.snippet_uncertainty = per_snippet_runs
            .into_iter()
            .map(|(s, sets)| (s, uncertainty_or_zero(&sets)))
            .collect();
        Ok(result)
    }
}

fn variable_def(version: &TaxonomyVersion, r: &VariableRef) -> Variable {
    version
        .find_variable(r.indicator, &r.name)
        .cloned()
        .unwrap_or_else(|| Variable {
            name: r.name.clone(),
            indicator_kind: r.indicator,
            definition: String::new(),
            variable_type: VariableType::Societal,
            reserved: false,
        })
}

fn expect_step(version: &TaxonomyVersion, expected: Step) -> Result<(), PipelineError> {
    if version.step != expected {
        return Err(PipelineError::WrongStep {
            version: version.id.clone(),
            expected,
            found: version.step,
        });
    }
    Ok(())
}

fn expect_upstream(version: &TaxonomyVersion, upstream: &ResultSet) -> Result<(), PipelineError> {
    if version.upstream_version_id.as_deref() != Some(upstream.version_id.as_str()) {
        return Err(PipelineError::UpstreamMismatch {
            version: version.id.clone(),
            expected: version.upstream_version_id.clone(),
            found: upstream.version_id.clone(),
        });
    }
    Ok(())
}

fn collect_warnings(out: &mut Vec<String>, snippet: &str, responses: &[StructuredResponse]) {
    for (j, r) in responses.iter().enumerate() {
        for w in &r.warnings {
            out.push(format!("{snippet} run {j}: {w}"));
        }
        if !r.valid {
            out.push(format!(
                "{snippet} run {j}: invalid response ({})",
                r.error.as_deref().unwrap_or("unknown error")
            ));
        }
    }
}

/// Applies user rules to one version's results. `must_have` inserts the
/// label, `must_not_have` removes it; support values are left untouched.
/// Rules naming labels absent from `taxonomy` are skipped with a warning.
pub fn apply_rules(results: &ResultSet, rules: &RuleBook, taxonomy: &TaxonomyVersion) -> (ResultSet, Vec<String>) {
    let mut out = results.clone();
    let mut warnings = Vec::new();
    let snippets: BTreeSet<String> = results
        .runsets
        .iter()
        .map(|r| r.snippet_id.clone())
        .chain(results.links.iter().map(|l| l.snippet_id.clone()))
        .collect();
    for (id, rule) in rules.list(None) {
        if !snippets.contains(&rule.snippet_id) {
            continue;
        }
        let record = |overrides: &mut Vec<String>| {
            if !overrides.iter().any(|o| o == id) {
                overrides.push(id.to_owned());
            }
        };
        let mut touched = false;
        match (&rule.value, results.step) {
            (RuleValue::Indicator { indicator }, Step::IndicatorId) => {
                if let Some(rs) = out
                    .runsets
                    .iter_mut()
                    .find(|r| r.snippet_id == rule.snippet_id && r.subject == RunSubject::Snippet)
                {
                    touched = toggle(&mut rs.aggregate, indicator.name(), rule.condition);
                    if touched {
                        record(&mut rs.aggregate.rule_overrides);
                    }
                }
            }
            (RuleValue::Variable { variable }, Step::VariableId) => {
                if !taxonomy.has_variable(variable) {
                    warnings.push(format!(
                        "{id}: variable {variable} is not in version {}; rule skipped",
                        taxonomy.id
                    ));
                    continue;
                }
                let subject = RunSubject::Indicator {
                    indicator: variable.indicator,
                };
                match out
                    .runsets
                    .iter_mut()
                    .find(|r| r.snippet_id == rule.snippet_id && r.subject == subject)
                {
                    Some(rs) => {
                        let canonical = taxonomy
                            .find_variable(variable.indicator, &variable.name)
                            .map(|v| v.name.clone())
                            .unwrap_or_else(|| variable.name.clone());
                        touched = toggle(&mut rs.aggregate, &canonical, rule.condition);
                        if touched {
                            record(&mut rs.aggregate.rule_overrides);
                        }
                    }
                    None if rule.condition == RuleCondition::MustHave => warnings.push(format!(
                        "{id}: snippet {} has no {} run in version {}; rule skipped",
                        rule.snippet_id, variable.indicator, taxonomy.id
                    )),
                    None => {}
                }
            }
            (RuleValue::Link { source, target }, Step::LinkId) => {
                if !taxonomy.has_variable(source) || !taxonomy.has_variable(target) {
                    warnings.push(format!(
                        "{id}: link variables are not in version {}; rule skipped",
                        taxonomy.id
                    ));
                    continue;
                }
                let label = link_label(source, target);
                let present = out
                    .links
                    .iter()
                    .any(|l| l.snippet_id == rule.snippet_id && l.label() == label);
                match rule.condition {
                    RuleCondition::MustHave if !present => {
                        out.links.push(LinkResult {
                            snippet_id: rule.snippet_id.clone(),
                            source: source.clone(),
                            target: target.clone(),
                            relationship: "asserted by rule".to_owned(),
                            evidence: vec![],
                            explanation: String::new(),
                            uncertainty: 0.0,
                            support: 0.0,
                            rule_override: Some(id.to_owned()),
                        });
                        touched = true;
                    }
                    RuleCondition::MustNotHave if present => {
                        out.links
                            .retain(|l| !(l.snippet_id == rule.snippet_id && l.label() == label));
                        touched = true;
                    }
                    _ => {}
                }
            }
            _ => {}
        }
        if touched && !out.applied_rules.iter().any(|r| r == id) {
            out.applied_rules.push(id.to_owned());
        }
    }
    (out, warnings)
}

fn toggle(agg: &mut AggregateResult, label: &str, condition: RuleCondition) -> bool {
    match condition {
        RuleCondition::MustHave => agg.labels.insert(label.to_owned()),
        RuleCondition::MustNotHave => agg.labels.remove(label),
    }
}
