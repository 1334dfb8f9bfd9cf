//! Extraction of the step-specific payload from raw model text.
//!
//! Models are asked for a fenced json block. The parser accepts a fenced
//! block, or failing that the outermost `{...}` object in the text. Link
//! prompts may also answer with the bare word `None`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::taxonomy::IndicatorKind;

/// What a response is expected to contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "schema", rename_all = "snake_case")]
pub enum Schema {
    /// Labels drawn from the five indicator kinds.
    Indicators,
    /// Labels drawn from `allowed` (canonical spelling); others are dropped.
    Variables {
        allowed: Vec<String>,
    },
    /// A directed link between the two named variables, or none.
    Link {
        pair: [String; 2],
    },
    Segmentation,
    Topic,
    Keywords,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPayload {
    pub labels: Vec<String>,
    pub evidence: Vec<String>,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkPayload {
    pub source: String,
    pub target: String,
    pub relationship: String,
    pub evidence: Vec<String>,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Labels(LabelPayload),
    Link { link: Option<LinkPayload> },
    Segmentation { boundaries: Vec<i64>, topics: Vec<String> },
    Topic { topic: String },
    Keywords { keywords: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub raw_text: String,
    pub parsed: Option<Payload>,
    pub parse_attempts: u32,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StructuredResponse {
    /// A response that never produced usable text.
    pub fn failed(error: impl Into<String>) -> Self {
        Self {
            raw_text: String::new(),
            parsed: None,
            parse_attempts: 0,
            valid: false,
            warnings: vec![],
            error: Some(error.into()),
        }
    }

    pub fn labels(&self) -> Option<&LabelPayload> {
        match (&self.parsed, self.valid) {
            (Some(Payload::Labels(p)), true) => Some(p),
            _ => None,
        }
    }

    pub fn link(&self) -> Option<&LinkPayload> {
        match (&self.parsed, self.valid) {
            (Some(Payload::Link { link: Some(l) }), true) => Some(l),
            _ => None,
        }
    }
}

/// Locates the machine-readable part of a response.
fn extract_block(raw: &str) -> Option<&str> {
    if let Some(start) = raw.find("```") {
        let after = &raw[start + 3..];
        let body_start = after.find('\n').map_or(0, |i| i + 1);
        let body = &after[body_start..];
        if let Some(end) = body.find("```") {
            return Some(body[..end].trim());
        }
    }
    let open = raw.find('{')?;
    let close = raw.rfind('}')?;
    (close > open).then(|| &raw[open..=close])
}

fn is_none_marker(s: &str) -> bool {
    let t = s
        .trim()
        .trim_matches(|c: char| c == '"' || c == '.' || c == '`' || c.is_whitespace());
    t.eq_ignore_ascii_case("none")
}

fn string_list(v: Option<&Value>) -> Option<Vec<String>> {
    match v? {
        Value::Array(items) => items
            .iter()
            .map(|x| match x {
                Value::String(s) => Some(s.trim().to_owned()),
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .collect(),
        Value::String(s) => Some(vec![s.trim().to_owned()]),
        Value::Null => Some(vec![]),
        _ => None,
    }
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &str) -> String {
    obj.get(key)
        .and_then(Value::as_str)
        .unwrap_or_default()
        .trim()
        .to_owned()
}

fn first_key<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k))
}

/// Parses `raw` against `schema`. Never fails; an unusable response comes
/// back with `valid == false`.
pub fn parse_structured(raw: &str, schema: &Schema) -> StructuredResponse {
    let mut warnings = Vec::new();
    let parsed = parse_payload(raw, schema, &mut warnings);
    let error = match &parsed {
        Ok(_) => None,
        Err(e) => Some(e.clone()),
    };
    let parsed = parsed.ok();
    StructuredResponse {
        raw_text: raw.to_owned(),
        valid: parsed.is_some(),
        parsed,
        parse_attempts: 1,
        warnings,
        error,
    }
}

fn parse_payload(raw: &str, schema: &Schema, warnings: &mut Vec<String>) -> Result<Payload, String> {
    if let Schema::Link { .. } = schema {
        if is_none_marker(raw) || extract_block(raw).is_some_and(is_none_marker) {
            return Ok(Payload::Link { link: None });
        }
    }
    let block = extract_block(raw).ok_or("no structured block found")?;
    let value: Value = serde_json::from_str(block).map_err(|e| format!("malformed json: {e}"))?;
    let obj = value.as_object().ok_or("payload is not an object")?;

    match schema {
        Schema::Indicators | Schema::Variables { .. } => {
            let labels = string_list(first_key(obj, &["labels", "concepts", "tags"])).ok_or("missing label list")?;
            let evidence = string_list(obj.get("evidence")).unwrap_or_default();
            let explanation = text_field(obj, "explanation");
            let mut out: Vec<String> = Vec::new();
            for label in labels {
                let canonical = match schema {
                    Schema::Indicators => IndicatorKind::from_label(&label).map(|k| k.name().to_owned()),
                    Schema::Variables { allowed } => allowed.iter().find(|a| a.eq_ignore_ascii_case(&label)).cloned(),
                    _ => unreachable!(),
                };
                match canonical {
                    Some(c) if !out.contains(&c) => out.push(c),
                    Some(_) => {}
                    None => warnings.push(format!("dropped unknown label {label:?}")),
                }
            }
            Ok(Payload::Labels(LabelPayload {
                labels: out,
                evidence,
                explanation,
            }))
        }
        Schema::Link { pair } => {
            let link_null = matches!(obj.get("link"), Some(Value::Null))
                || obj.get("link").and_then(Value::as_str).is_some_and(is_none_marker);
            let source = obj.get("source").and_then(Value::as_str).map(str::trim);
            let target = obj.get("target").and_then(Value::as_str).map(str::trim);
            let (source, target) = match (source, target) {
                (Some(s), Some(t)) if !is_none_marker(s) && !is_none_marker(t) => (s, t),
                _ if link_null || obj.get("source").is_some_and(Value::is_null) => {
                    return Ok(Payload::Link { link: None })
                }
                _ => return Err("link payload needs source and target".into()),
            };
            let canon = |name: &str| pair.iter().find(|p| p.eq_ignore_ascii_case(name)).cloned();
            let (Some(s), Some(t)) = (canon(source), canon(target)) else {
                return Err(format!(
                    "link endpoints {source:?} -> {target:?} are not the prompted pair"
                ));
            };
            if s == t {
                return Err("link source equals target".into());
            }
            Ok(Payload::Link {
                link: Some(LinkPayload {
                    source: s,
                    target: t,
                    relationship: text_field(obj, "relationship"),
                    evidence: string_list(obj.get("evidence")).unwrap_or_default(),
                    explanation: text_field(obj, "explanation"),
                }),
            })
        }
        Schema::Segmentation => {
            let b = obj
                .get("boundaries")
                .and_then(Value::as_array)
                .ok_or("missing boundaries")?;
            let boundaries = b
                .iter()
                .map(|x| x.as_i64().ok_or("boundary is not an integer"))
                .collect::<Result<Vec<_>, _>>()?;
            let topics = string_list(obj.get("topics")).unwrap_or_default();
            Ok(Payload::Segmentation { boundaries, topics })
        }
        Schema::Topic => {
            let topic = text_field(obj, "topic");
            if topic.is_empty() {
                return Err("missing topic".into());
            }
            Ok(Payload::Topic { topic })
        }
        Schema::Keywords => {
            let keywords = string_list(obj.get("keywords")).ok_or("missing keywords")?;
            Ok(Payload::Keywords {
                keywords: keywords.into_iter().filter(|k| !k.is_empty()).collect(),
            })
        }
    }
}

/// Instruction sent back to the model after an unparseable response.
pub fn repair_instruction(schema: &Schema, error: &str) -> String {
    let shape = match schema {
        Schema::Indicators | Schema::Variables { .. } => {
            "{\"labels\": [...], \"evidence\": [...], \"explanation\": \"...\"}".to_owned()
        }
        Schema::Link { pair } => format!(
            "{{\"source\": one of {:?}, \"target\": the other, \"relationship\": \"...\", \"evidence\": [...], \"explanation\": \"...\"}} or the word None",
            pair
        ),
        Schema::Segmentation => "{\"boundaries\": [0, ...], \"topics\": [...]}".to_owned(),
        Schema::Topic => "{\"topic\": \"...\"}".to_owned(),
        Schema::Keywords => "{\"keywords\": [...]}".to_owned(),
    };
    format!(
        "Your previous reply could not be used ({error}). Reply again with only a fenced json block of the form {shape}."
    )
}
