//! Line-delimited JSON corpora: few-shot pools, input sets and references.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{0}: corpus is empty")]
    Empty(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

/// One corpus line. `target` is required for few-shot pools; `reference` is
/// the human rewrite used for evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub source_style: String,
    pub target_style: String,
}

/// A parallel (source-style, target-style) demonstration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotPair {
    pub id: String,
    pub source: String,
    pub target: String,
}

impl FewShotPair {
    pub fn new(id: impl Into<String>, source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            target: target.into(),
        }
    }

    /// `source ||| target`, the form sent to analysis clients.
    pub fn render(&self) -> String {
        format!("{} ||| {}", self.source, self.target)
    }
}

pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<CorpusRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: origin.to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.source.trim().is_empty() {
            return Err(CorpusError::Malformed {
                path: origin.to_string(),
                line: i + 1,
                reason: "empty source".into(),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(CorpusError::Empty(origin.to_string()));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, CorpusError> {
    let origin = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: origin.clone(),
        source,
    })?;
    parse_corpus(&text, &origin)
}

pub fn save_corpus(path: &Path, records: &[CorpusRecord]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(f, "{line}").map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Few-shot pairs from records carrying a `target`; ids are 0-based line order.
pub fn fewshot_pairs(records: &[CorpusRecord]) -> Result<Vec<FewShotPair>, CorpusError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| match &r.target {
            Some(t) if !t.trim().is_empty() => Ok(FewShotPair::new(i.to_string(), r.source.clone(), t.clone())),
            _ => Err(CorpusError::Malformed {
                path: "few-shot pool".into(),
                line: i + 1,
                reason: "few-shot record lacks a target".into(),
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_lines_two_records() {
        let text = r#"{"source":"the food was bad","target":"the food was great","source_style":"negative","target_style":"positive"}
{"source":"rude staff","source_style":"negative","target_style":"positive"}
"#;
        let recs = parse_corpus(text, "t").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].target, None);
        assert!(fewshot_pairs(&recs).is_err());
        assert_eq!(fewshot_pairs(&recs[..1]).unwrap()[0].render(), "the food was bad ||| the food was great");
    }

    #[test]
    fn missing_source_reports_line() {
        let text = "{\"source\":\"a\",\"source_style\":\"x\",\"target_style\":\"y\"}\n{\"target\":\"b\",\"source_style\":\"x\",\"target_style\":\"y\"}\n";
        match parse_corpus(text, "f.jsonl") {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_error() {
        assert!(matches!(parse_corpus("\n\n", "e"), Err(CorpusError::Empty(_))));
    }

    #[test]
    fn yelp_record_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let recs = vec![CorpusRecord {
            source: "ever since joes has changed hands it 's just gotten worse and worse .".into(),
            target: Some("ever since joes has changed hands it 's gotten better and better .".into()),
            reference: Some("since joes changed hands it has improved .".into()),
            source_style: "negative".into(),
            target_style: "positive".into(),
        }];
        save_corpus(&path, &recs).unwrap();
        let once = load_corpus(&path).unwrap();
        save_corpus(&path, &once).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), recs);
    }
}
