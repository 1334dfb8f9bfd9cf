//! Prompt templates split into Persona, Context and User sections, with
//! `${name}` insertion points.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::Step;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub step: Step,
    pub persona: String,
    pub context: String,
    pub user: String,
}

/// A `${name}` occurrence inside a template section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder<'a> {
    pub name: &'a str,
    pub span: Range<usize>,
}

/// Scans `text` for `${name}` placeholders. Unterminated `${` sequences are
/// left as literal text.
pub fn placeholders(text: &str) -> Vec<Placeholder<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i + 1 < bytes.len() {
        if bytes[i] == b'$' && bytes[i + 1] == b'{' {
            if let Some(close) = text[i + 2..].find('}') {
                let name = &text[i + 2..i + 2 + close];
                let end = i + 2 + close + 1;
                out.push(Placeholder {
                    name: name.trim(),
                    span: i..end,
                });
                i = end;
                continue;
            }
            break;
        }
        i += 1;
    }
    out
}

impl PromptTemplate {
    pub fn sections(&self) -> [&str; 3] {
        [&self.persona, &self.context, &self.user]
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholder_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = Vec::new();
        for section in self.sections() {
            for p in placeholders(section) {
                if !names.contains(&p.name) {
                    names.push(p.name);
                }
            }
        }
        names
    }

    /// Checks every placeholder against the step's binding set. Returns the
    /// unknown names on failure.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let allowed = self.step.allowed_bindings();
        let unknown: Vec<String> = self
            .placeholder_names()
            .into_iter()
            .filter(|n| !allowed.contains(n))
            .map(str::to_owned)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(unknown)
        }
    }

    pub fn default_for(step: Step) -> Self {
        let (persona, context, user) = match step {
            Step::IndicatorId => (
                "You are an environmental scientist who annotates interview transcripts with the DPSIR framework.",
                "The interviews were conducted with residents of a small island community. The concepts and their definitions are:\n${concept_definitions}",
                "Identify every concept that occurs in the snippet below. Select all concepts that apply; an empty list is allowed.\n\nSnippet:\n${snippet}\n\nReply with a fenced json block: {\"labels\": [concept names], \"evidence\": [sentences copied from the snippet], \"explanation\": \"...\"}",
            ),
            Step::VariableId => (
                "You are an environmental scientist who annotates interview transcripts with the DPSIR framework.",
                "The snippet was annotated with the concept below.\n${indicator}\nThe candidate tags and their definitions are:\n${tag_list}\nThe annotator explained the concept assignment as follows:\n${explanation}",
                "Identify every tag that occurs in the snippet. Select all tags that apply. Use \"miscellaneous\" for content that fits the concept but none of the tags.\n\nSnippet:\n${snippet}\n\nReply with a fenced json block: {\"labels\": [tag names], \"evidence\": [sentences copied from the snippet], \"explanation\": \"...\"}",
            ),
            Step::LinkId => (
                "You are an environmental scientist who studies relationships between DPSIR tags.",
                "Two tags and their definitions:\n${var_pair_definitions}",
                "Decide whether the snippet states a relationship between the two tags. If it does, give its direction and describe it in a few words; otherwise answer None.\n\nSnippet:\n${snippet}\n\nReply with a fenced json block: {\"source\": tag, \"target\": tag, \"relationship\": \"...\", \"evidence\": [sentences], \"explanation\": \"...\"} or the word None.",
            ),
            Step::Segmentation => (
                "You segment interview transcripts into topic-coherent snippets.",
                "The semi-structured interview questions were:\n${questions}",
                "The numbered conversations of one transcript follow. Split them into consecutive segments that each discuss one topic. Return only conversation indices: the start index of each segment, in increasing order, starting at 0.\n\n${conversations}\n\nReply with a fenced json block: {\"boundaries\": [start indices], \"topics\": [one short topic per segment]}",
            ),
            Step::TopicLabel => (
                "You name topics of grouped interview snippets.",
                "",
                "Give a short topic label of at most six words that summarizes the snippets below.\n\n${snippets}\n\nReply with a fenced json block: {\"topic\": \"...\"}",
            ),
            Step::KeywordExtract => (
                "You extract keywords from interview evidence.",
                "",
                "List at most five noun phrases that capture the subjects of the sentences below.\n\n${evidence}\n\nReply with a fenced json block: {\"keywords\": [phrases]}",
            ),
        };
        Self {
            step,
            persona: persona.to_owned(),
            context: context.to_owned(),
            user: user.to_owned(),
        }
    }
}
