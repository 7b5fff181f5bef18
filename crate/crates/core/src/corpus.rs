//! Line-delimited JSON corpus files: one document per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::doc::Document;
use crate::error::{Error, Result};

/// Parses and validates a corpus. Blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn corpus_to_string(docs: &[Document]) -> Result<String> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn save_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let text = corpus_to_string(docs)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
