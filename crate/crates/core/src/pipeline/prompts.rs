//! Binding construction and prompt rendering for every step.
//!
//! Binding text uses "concept" for indicator and "tag" for variable; the
//! data model keeps the domain words.

use std::collections::BTreeMap;

use crate::corpus::{Document, Violation};
use crate::gateway::{render, Prompt, RenderError};
use crate::taxonomy::{IndicatorKind, PromptTemplate, Step, TaxonomyVersion, Variable};

fn bindings<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

pub fn concept_definitions(version: &TaxonomyVersion) -> String {
    version
        .indicators
        .iter()
        .map(|i| format!("- {}: {}", i.kind.name(), i.definition))
        .collect::<Vec<_>>()
        .join("\n")
}

fn type_word(v: &Variable) -> &'static str {
    match v.variable_type {
        crate::taxonomy::VariableType::Societal => "societal",
        crate::taxonomy::VariableType::Environmental => "environmental",
    }
}

pub fn tag_list(version: &TaxonomyVersion, kind: IndicatorKind) -> String {
    version
        .variables_of(kind)
        .map(|v| format!("- {} ({}): {}", v.name, type_word(v), v.definition))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn indicator_prompt(version: &TaxonomyVersion, snippet: &str) -> Result<Prompt, RenderError> {
    render(
        &version.template,
        &bindings([
            ("concept_definitions", concept_definitions(version)),
            ("snippet", snippet.to_owned()),
        ]),
    )
}

pub fn variable_prompt(
    version: &TaxonomyVersion,
    kind: IndicatorKind,
    snippet: &str,
    explanation: &str,
) -> Result<Prompt, RenderError> {
    let ind = version.indicator(kind);
    render(
        &version.template,
        &bindings([
            (
                "indicator",
                format!("Concept: {}\nDefinition: {}", kind.name(), ind.definition),
            ),
            ("tag_list", tag_list(version, kind)),
            ("snippet", snippet.to_owned()),
            ("explanation", explanation.to_owned()),
        ]),
    )
}

/// Names the model sees for a pair; qualified only when the bare names clash.
pub fn pair_names(a: &Variable, b: &Variable) -> [String; 2] {
    if a.name.eq_ignore_ascii_case(&b.name) {
        [a.reference().key(), b.reference().key()]
    } else {
        [a.name.clone(), b.name.clone()]
    }
}

pub fn link_prompt(
    version: &TaxonomyVersion,
    a: &Variable,
    b: &Variable,
    snippet: &str,
) -> Result<Prompt, RenderError> {
    let names = pair_names(a, b);
    let line = |n: &str, v: &Variable| {
        format!(
            "- {} ({} concept, {}): {}",
            n,
            v.indicator_kind.name(),
            type_word(v),
            v.definition
        )
    };
    render(
        &version.template,
        &bindings([
            (
                "var_pair_definitions",
                format!("{}\n{}", line(&names[0], a), line(&names[1], b)),
            ),
            ("snippet", snippet.to_owned()),
        ]),
    )
}

pub fn segmentation_prompt(doc: &Document, questions: &[String]) -> Prompt {
    let q = if questions.is_empty() {
        "(none given)".to_owned()
    } else {
        questions
            .iter()
            .map(|q| format!("- {q}"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let conversations = doc
        .conversations
        .iter()
        .map(|c| format!("[{}] {}: {}", c.index, c.speaker, c.text))
        .collect::<Vec<_>>()
        .join("\n");
    render(
        &PromptTemplate::default_for(Step::Segmentation),
        &bindings([("questions", q), ("conversations", conversations)]),
    )
    .expect("default segmentation template binds every placeholder")
}

pub fn segmentation_repair(violations: &[Violation]) -> String {
    let problems = if violations.is_empty() {
        "the reply had no usable boundaries list".to_owned()
    } else {
        violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    };
    format!(
        "The segmentation was rejected: {problems}. Reply again with a fenced json block {{\"boundaries\": [...], \"topics\": [...]}} whose boundaries strictly increase, start at 0 and are valid conversation indices."
    )
}

pub fn topic_prompt(snippet_texts: &[String]) -> Prompt {
    let body = snippet_texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("Snippet {}:\n{}", i + 1, t))
        .collect::<Vec<_>>()
        .join("\n\n");
    render(
        &PromptTemplate::default_for(Step::TopicLabel),
        &bindings([("snippets", body)]),
    )
    .expect("default topic template binds every placeholder")
}

pub fn keyword_prompt(evidence: &[String]) -> Prompt {
    let body = evidence.iter().map(|e| format!("- {e}")).collect::<Vec<_>>().join("\n");
    render(
        &PromptTemplate::default_for(Step::KeywordExtract),
        &bindings([("evidence", body)]),
    )
    .expect("default keyword template binds every placeholder")
}
