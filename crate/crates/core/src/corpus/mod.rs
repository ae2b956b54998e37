//! Document files, text cleaning and anchor-language data mixing.
//!
//! Documents are stored one JSON object per line:
//! `{"text": "...", "lang": "ar", "source": "..."}`.

mod clean;
mod mix;

pub use clean::{clean_text, CharRange, CleanConfig, Cleaned, RejectReason};
pub use mix::{anchor_schedule, mix_stream, MixConfig};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GraftError, Result};
use crate::io::{read_to_string, write_atomic};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub text: String,
    pub lang: String,
    pub source: String,
}

impl Document {
    pub fn new(text: impl Into<String>, lang: impl Into<String>, source: impl Into<String>) -> Self {
        Document {
            text: text.into(),
            lang: lang.into(),
            source: source.into(),
        }
    }
}

/// Parses JSONL documents; blank lines are skipped.
pub fn parse_documents(text: &str) -> Result<Vec<Document>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| GraftError::Input(format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn documents_to_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    out
}

pub fn read_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    parse_documents(&read_to_string(path)?)
        .map_err(|e| GraftError::Input(format!("{}: {e}", path.display())))
}

pub fn write_documents(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    write_atomic(path.as_ref(), documents_to_jsonl(docs).as_bytes())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStats {
    pub kept: u64,
    pub rejected: BTreeMap<RejectReason, u64>,
}

impl CleanStats {
    pub fn total_rejected(&self) -> u64 {
        self.rejected.values().sum()
    }
}

/// Cleans every document, keeping input order.
pub fn clean_documents(docs: &[Document], cfg: &CleanConfig) -> Result<(Vec<Document>, CleanStats)> {
    cfg.validate()?;
    let mut stats = CleanStats::default();
    let mut kept = Vec::new();
    for d in docs {
        match clean_text(&d.text, cfg) {
            Cleaned::Kept(text) => {
                stats.kept += 1;
                kept.push(Document { text, ..d.clone() });
            }
            Cleaned::Rejected(r) => *stats.rejected.entry(r).or_default() += 1,
        }
    }
    Ok((kept, stats))
}

/// Cleans a document file into another; the output is written atomically.
pub fn clean_corpus(input: impl AsRef<Path>, output: impl AsRef<Path>, cfg: &CleanConfig) -> Result<CleanStats> {
    let docs = read_documents(input)?;
    let (kept, stats) = clean_documents(&docs, cfg)?;
    write_documents(output, &kept)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_stats_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        let mut docs = Vec::new();
        for i in 0..7 {
            docs.push(Document::new(format!("document number {i} has enough words"), "en", "t"));
        }
        for i in 0..3 {
            docs.push(Document::new(format!("short {i}"), "en", "t"));
        }
        write_documents(&input, &docs).unwrap();
        let cfg = CleanConfig::default();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        let stats = clean_corpus(&input, &a, &cfg).unwrap();
        assert_eq!(stats.kept, 7);
        assert_eq!(stats.rejected.get(&RejectReason::Short), Some(&3));
        assert_eq!(stats, clean_corpus(&input, &b, &cfg).unwrap());
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let again = clean_corpus(&a, &b, &cfg).unwrap();
        assert_eq!(again.kept, 7);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn empty_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("empty.jsonl");
        std::fs::write(&input, "").unwrap();
        let stats = clean_corpus(&input, dir.path().join("o.jsonl"), &CleanConfig::default()).unwrap();
        assert_eq!((stats.kept, stats.total_rejected()), (0, 0));
        assert!(matches!(
            clean_corpus(dir.path().join("nope"), dir.path().join("o"), &CleanConfig::default()),
            Err(GraftError::Io { .. })
        ));
        std::fs::write(&input, "{\"text\": 1}\n").unwrap();
        assert!(read_documents(&input).is_err());
    }
}
