//! Transcript ingest and segmentation into snippets.
//!
//! Transcript files are UTF-8 with one `speaker<TAB>text` record per line.
//! The file name without extension is the document id. Blank lines are
//! ignored.
//!
//! Segmentation asks the model for conversation indices only (the start index
//! of each segment); the text itself is cut programmatically.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{parse_structured, Gateway, Payload, Prompt, Schema};
use crate::pipeline::prompts;

/// Validation attempts before falling back to fixed windows.
pub const SEGMENTATION_ATTEMPTS: usize = 3;
/// Window size of the fallback segmentation.
pub const FALLBACK_WINDOW: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub index: usize,
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub conversations: Vec<Conversation>,
    pub metadata: BTreeMap<String, String>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub id: String,
    pub document_id: String,
    /// Inclusive `[start, end]` conversation indices.
    pub conversation_range: [usize; 2],
    pub topic_hint: Option<String>,
    #[serde(default)]
    pub fallback: bool,
}

impl Snippet {
    pub fn start(&self) -> usize {
        self.conversation_range[0]
    }

    pub fn end(&self) -> usize {
        self.conversation_range[1]
    }

    pub fn conversations<'a>(&self, doc: &'a Document) -> &'a [Conversation] {
        &doc.conversations[self.start()..=self.end()]
    }

    /// Snippet content as given to prompts: one `[index] speaker: text` line
    /// per conversation.
    pub fn render(&self, doc: &Document) -> String {
        self.conversations(doc)
            .iter()
            .map(|c| format!("[{}] {}: {}", c.index, c.speaker, c.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn snippet_id(document_id: &str, ordinal: usize) -> String {
    format!("{document_id}#{ordinal}")
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error("{0}: empty transcript")]
    EmptyTranscript(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Speaker name to pseudonym map applied at ingest.
pub type RedactionMap = BTreeMap<String, String>;

/// Outcome of ingesting a directory or archive. Failing files do not stop
/// the others.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub documents: Vec<Document>,
    pub errors: Vec<CorpusError>,
}

/// Parses one transcript.
pub fn parse_transcript(id: &str, content: &str, redaction: Option<&RedactionMap>) -> Result<Document, CorpusError> {
    let mut conversations = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: &str| CorpusError::Malformed {
            file: id.to_owned(),
            line: lineno + 1,
            message: message.to_owned(),
        };
        let (speaker, text) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected speaker<TAB>text"))?;
        let speaker = speaker.trim();
        let text = text.trim();
        if speaker.is_empty() {
            return Err(malformed("empty speaker"));
        }
        if text.is_empty() {
            return Err(malformed("empty text"));
        }
        let speaker = redaction.and_then(|m| m.get(speaker)).map_or(speaker, String::as_str);
        conversations.push(Conversation {
            index: conversations.len(),
            speaker: speaker.to_owned(),
            text: text.to_owned(),
        });
    }
    if conversations.is_empty() {
        return Err(CorpusError::EmptyTranscript(id.to_owned()));
    }
    Ok(Document {
        id: id.to_owned(),
        title: id.to_owned(),
        conversations,
        metadata: BTreeMap::new(),
    })
}

fn doc_id(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    if name.starts_with('.') {
        return None;
    }
    Some(path.file_stem()?.to_str()?.to_owned())
}

fn is_archive(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".tar.gz") || name.ends_with(".tgz") || name.ends_with(".tar")
}

/// Ingests every transcript in a directory (non-recursive, name order) or a
/// `.tar`/`.tar.gz` archive.
pub fn ingest(source: &Path, redaction: Option<&RedactionMap>) -> Result<IngestReport, CorpusError> {
    let mut files: Vec<(String, String)> = Vec::new();
    let mut report = IngestReport::default();
    let wrap = |path: &Path| {
        let p = path.display().to_string();
        move |source: io::Error| CorpusError::Io { path: p, source }
    };
    if source.is_file() && is_archive(source) {
        let f = fs::File::open(source).map_err(wrap(source))?;
        let reader: Box<dyn Read> = if source.to_string_lossy().ends_with(".tar") {
            Box::new(f)
        } else {
            Box::new(flate2::read::GzDecoder::new(f))
        };
        let mut archive = tar::Archive::new(reader);
        for entry in archive.entries().map_err(wrap(source))? {
            let mut entry = entry.map_err(wrap(source))?;
            if !entry.header().entry_type().is_file() {
                continue;
            }
            let path: PathBuf = entry.path().map_err(wrap(source))?.into_owned();
            let Some(id) = doc_id(&path) else { continue };
            let mut content = String::new();
            match entry.read_to_string(&mut content) {
                Ok(_) => files.push((id, content)),
                Err(e) => report.errors.push(CorpusError::Io {
                    path: path.display().to_string(),
                    source: e,
                }),
            }
        }
    } else {
        let mut paths: Vec<PathBuf> = fs::read_dir(source)
            .map_err(wrap(source))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        for path in paths {
            let Some(id) = doc_id(&path) else { continue };
            match fs::read_to_string(&path) {
                Ok(content) => files.push((id, content)),
                Err(e) => report.errors.push(CorpusError::Io {
                    path: path.display().to_string(),
                    source: e,
                }),
            }
        }
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    for (id, content) in files {
        match parse_transcript(&id, &content, redaction) {
            Ok(d) => report.documents.push(d),
            Err(e) => report.errors.push(e),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Empty,
    FirstNotZero { found: i64 },
    NonMonotone { position: usize, previous: i64, value: i64 },
    OutOfRange { value: i64, len: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Empty => write!(f, "coverage gap: no boundaries given"),
            Violation::FirstNotZero { found } => {
                write!(f, "first segment must start at 0 (got {found})")
            }
            Violation::NonMonotone {
                position,
                previous,
                value,
            } => write!(
                f,
                "non-monotone: boundary {position} ({value}) does not exceed {previous}"
            ),
            Violation::OutOfRange { value, len } => {
                write!(f, "out of range: {value} is not a conversation index below {len}")
            }
        }
    }
}

/// Checks that `boundaries` is a strictly increasing list of in-range start
/// indices beginning at 0. Never fails; returns the violations found.
pub fn validate_segmentation(doc: &Document, boundaries: &[i64]) -> Result<(), Vec<Violation>> {
    let n = doc.len();
    let mut v = Vec::new();
    match boundaries.first() {
        None => v.push(Violation::Empty),
        Some(&b) if b != 0 => v.push(Violation::FirstNotZero { found: b }),
        _ => {}
    }
    for (i, &b) in boundaries.iter().enumerate() {
        if b < 0 || b as usize >= n {
            v.push(Violation::OutOfRange { value: b, len: n });
        }
        if i > 0 && b <= boundaries[i - 1] {
            v.push(Violation::NonMonotone {
                position: i,
                previous: boundaries[i - 1],
                value: b,
            });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Cuts a document at validated start indices.
pub fn snippets_from_boundaries(doc: &Document, boundaries: &[usize], topics: &[String]) -> Vec<Snippet> {
    boundaries
        .iter()
        .enumerate()
        .map(|(i, &start)| {
            let end = boundaries.get(i + 1).map_or(doc.len() - 1, |&next| next - 1);
            Snippet {
                id: snippet_id(&doc.id, i),
                document_id: doc.id.clone(),
                conversation_range: [start, end],
                topic_hint: topics.get(i).filter(|t| !t.is_empty()).cloned(),
                fallback: false,
            }
        })
        .collect()
}

/// Fixed windows of `window` conversations, flagged as fallback.
pub fn fixed_window_segmentation(doc: &Document, window: usize) -> Vec<Snippet> {
    let window = window.max(1);
    let starts: Vec<usize> = (0..doc.len()).step_by(window).collect();
    let mut s = snippets_from_boundaries(doc, &starts, &[]);
    s.iter_mut().for_each(|s| s.fallback = true);
    s
}

/// Segments one document with the model, retrying with the violations echoed
/// back, then falling back to fixed windows.
pub async fn segment(doc: &Document, questions: &[String], gateway: &Gateway) -> Vec<Snippet> {
    if doc.len() <= 1 {
        return snippets_from_boundaries(doc, &[0], &[]);
    }
    let base = prompts::segmentation_prompt(doc, questions);
    let mut prompt: Prompt = base.clone();
    for attempt in 0..SEGMENTATION_ATTEMPTS {
        let complaint = match gateway.complete(&prompt, 0).await {
            Err(e) => {
                tracing::warn!(doc = %doc.id, attempt, error = %e, "segmentation call failed");
                break;
            }
            Ok(raw) => match parse_structured(&raw, &Schema::Segmentation).parsed {
                Some(Payload::Segmentation { boundaries, topics }) => match validate_segmentation(doc, &boundaries) {
                    Ok(()) => {
                        let starts: Vec<usize> = boundaries.iter().map(|&b| b as usize).collect();
                        return snippets_from_boundaries(doc, &starts, &topics);
                    }
                    Err(violations) => (raw, prompts::segmentation_repair(&violations)),
                },
                _ => (raw, prompts::segmentation_repair(&[])),
            },
        };
        prompt = base.with_repair(&complaint.0, &complaint.1);
    }
    tracing::warn!(doc = %doc.id, "segmentation fell back to fixed windows");
    fixed_window_segmentation(doc, FALLBACK_WINDOW)
}

/// Segments documents concurrently; output order follows `docs`.
pub async fn segment_all(docs: &[Document], questions: &[String], gateway: &Gateway) -> Vec<Snippet> {
    let runs = docs.iter().map(|d| segment(d, questions, gateway));
    futures::future::join_all(runs).await.into_iter().flatten().collect()
}

/// Checks the partition property of one document's snippets.
pub fn is_partition(doc: &Document, snippets: &[Snippet]) -> bool {
    let mut covered = vec![0u32; doc.len()];
    for s in snippets.iter().filter(|s| s.document_id == doc.id) {
        if s.start() > s.end() || s.end() >= doc.len() {
            return false;
        }
        for c in &mut covered[s.start()..=s.end()] {
            *c += 1;
        }
    }
    covered.iter().all(|&c| c == 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::fixture::{FixtureProvider, FixtureSet};
    use crate::taxonomy::Step;
    use std::sync::Arc;

    fn doc(n: usize) -> Document {
        let content: String = (0..n).map(|i| format!("S{}\tline {i}\n", i % 2)).collect();
        parse_transcript("d", &content, None).unwrap()
    }

    #[test]
    fn parses_records_and_redacts() {
        let mut red = RedactionMap::new();
        red.insert("Alice".into(), "R1".into());
        let d = parse_transcript("t", "Alice\thello\n\nBob\t 你好 \n", Some(&red)).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.conversations[0].speaker, "R1");
        assert_eq!(d.conversations[1].text, "你好");
        assert_eq!(d.conversations[1].index, 1);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let e = parse_transcript("t", "A\tok\nno tab here\n", None).unwrap_err();
        assert!(matches!(e, CorpusError::Malformed { line: 2, .. }), "{e}");
        let e = parse_transcript("t", "A\t   \n", None).unwrap_err();
        assert!(matches!(e, CorpusError::Malformed { line: 1, .. }));
        let e = parse_transcript("t", "\n\n", None).unwrap_err();
        assert_eq!(e.to_string(), "t: empty transcript");
    }

    #[test]
    fn ingest_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest(dir.path(), None).unwrap().documents.is_empty());
        fs::write(dir.path().join("b.tsv"), "A\tx\n").unwrap();
        fs::write(dir.path().join("a.tsv"), "A\tx\nB\ty\n").unwrap();
        fs::write(dir.path().join("c.tsv"), "").unwrap();
        let r = ingest(dir.path(), None).unwrap();
        let ids: Vec<_> = r.documents.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b"]);
        assert_eq!(r.errors.len(), 1);
    }

    #[test]
    fn ingest_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tar.gz");
        let gz = flate2::write::GzEncoder::new(fs::File::create(&path).unwrap(), Default::default());
        let mut b = tar::Builder::new(gz);
        let data = b"A\thello\n";
        let mut h = tar::Header::new_gnu();
        h.set_size(data.len() as u64);
        h.set_mode(0o644);
        h.set_cksum();
        b.append_data(&mut h, "x/t1.tsv", &data[..]).unwrap();
        b.into_inner().unwrap().finish().unwrap();
        let r = ingest(&path, None).unwrap();
        assert_eq!(r.documents.len(), 1);
        assert_eq!(r.documents[0].id, "t1");
    }

    #[test]
    fn validation_examples() {
        let d = doc(20);
        assert_eq!(validate_segmentation(&d, &[0, 6, 14]), Ok(()));
        let v = validate_segmentation(&d, &[6, 0]).unwrap_err();
        assert!(v.iter().any(|v| matches!(v, Violation::NonMonotone { .. })));
        assert!(v[0].to_string().starts_with("first segment must start at 0"));
        let v = validate_segmentation(&d, &[1, 6]).unwrap_err();
        assert_eq!(v, vec![Violation::FirstNotZero { found: 1 }]);
        let v = validate_segmentation(&d, &[0, 35]).unwrap_err();
        assert_eq!(v, vec![Violation::OutOfRange { value: 35, len: 20 }]);
        assert_eq!(validate_segmentation(&d, &[]), Err(vec![Violation::Empty]));
    }

    #[test]
    fn boundaries_partition() {
        let d = doc(30);
        let s = snippets_from_boundaries(&d, &[0, 6, 14, 22], &[]);
        let ranges: Vec<_> = s.iter().map(|s| s.conversation_range).collect();
        assert_eq!(ranges, vec![[0, 5], [6, 13], [14, 21], [22, 29]]);
        assert!(is_partition(&d, &s));
    }

    #[test]
    fn fixed_windows_partition_for_any_window() {
        for n in 1..25 {
            let d = doc(n);
            for w in 1..10 {
                let s = fixed_window_segmentation(&d, w);
                assert!(is_partition(&d, &s), "n={n} w={w}");
                assert!(s.iter().all(|s| s.fallback));
            }
        }
    }

    fn fixture_reply(d: &Document, questions: &[String], replies: Vec<(Option<&str>, &str)>) -> FixtureSet {
        // replies: (repair complaint, reply) chained from the base prompt
        let mut set = FixtureSet::new(0);
        let base = prompts::segmentation_prompt(d, questions);
        let mut prompt = base.clone();
        for (_, reply) in replies {
            set.insert(&prompt, Step::Segmentation, vec![reply.to_owned()]);
            let complaint = match parse_structured(reply, &Schema::Segmentation).parsed {
                Some(Payload::Segmentation { boundaries, .. }) => match validate_segmentation(d, &boundaries) {
                    Ok(()) => break,
                    Err(v) => prompts::segmentation_repair(&v),
                },
                _ => prompts::segmentation_repair(&[]),
            };
            prompt = base.with_repair(reply, &complaint);
        }
        set
    }

    #[tokio::test]
    async fn segment_uses_model_boundaries() {
        let d = doc(30);
        let q = vec!["What do you do for a living?".to_owned()];
        let set = fixture_reply(
            &d,
            &q,
            vec![
                (None, r#"{"boundaries": [0, 6, 35], "topics": []}"#),
                (
                    None,
                    r#"{"boundaries": [0, 6, 14, 22], "topics": ["a", "b", "c", "d"]}"#,
                ),
            ],
        );
        let provider = Arc::new(FixtureProvider::new(set));
        let g = Gateway::new(provider.clone());
        let s = segment(&d, &q, &g).await;
        let ranges: Vec<_> = s.iter().map(|s| s.conversation_range).collect();
        assert_eq!(ranges, vec![[0, 5], [6, 13], [14, 21], [22, 29]]);
        assert_eq!(s[2].topic_hint.as_deref(), Some("c"));
        assert!(!s[0].fallback);
        assert_eq!(provider.calls(), 2);
        // idempotent
        assert_eq!(segment(&d, &q, &g).await, s);
    }

    #[tokio::test]
    async fn single_conversation_skips_the_provider() {
        let d = doc(1);
        let provider = Arc::new(FixtureProvider::empty());
        let s = segment(&d, &[], &Gateway::new(provider.clone())).await;
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].conversation_range, [0, 0]);
        assert_eq!(provider.calls(), 0);
    }

    #[tokio::test]
    async fn exhausted_retries_fall_back() {
        let d = doc(14);
        let provider = Arc::new(FixtureProvider::empty());
        let s = segment(&d, &[], &Gateway::new(provider.clone())).await;
        assert_eq!(provider.calls(), SEGMENTATION_ATTEMPTS);
        assert!(s.iter().all(|s| s.fallback));
        let ranges: Vec<_> = s.iter().map(|s| s.conversation_range).collect();
        assert_eq!(ranges, vec![[0, 5], [6, 11], [12, 13]]);
    }
}
