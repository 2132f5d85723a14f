use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::taxonomy::{LocalityDescriptor, StyleTaxonomy};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// What to do with records whose `split` field is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitPolicy {
    /// Missing split means `train`.
    #[default]
    DefaultTrain,
    /// Missing split is assigned 80/10/10 by a hash of the record index.
    HashByIndex,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic 80/10/10 split for the record at `index`.
pub fn hashed_split(index: usize) -> Split {
    match splitmix64(index as u64) % 10 {
        0..=7 => Split::Train,
        8 => Split::Valid,
        _ => Split::Test,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub text: String,
    pub locality: LocalityDescriptor,
    pub split: Split,
}

#[derive(Deserialize)]
struct JsonLine {
    text: String,
    style: String,
    source: String,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Serialize)]
struct JsonLineOut<'a> {
    text: &'a str,
    style: &'a str,
    source: &'a str,
    split: Split,
}

/// Parses a JSONL corpus. Blank lines are skipped; every other line must be
/// an object with string fields `text`, `style`, `source` and optionally
/// `split`. Errors carry the 1-based line number.
pub fn parse_jsonl(
    reader: impl BufRead,
    taxonomy: &StyleTaxonomy,
    policy: SplitPolicy,
) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let err = |message: String| Error::Parse {
            line: lineno,
            message,
        };
        let parsed: JsonLine =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
        let style = taxonomy
            .style_id(&parsed.style)
            .ok_or_else(|| err(format!("unknown style {:?}", parsed.style)))?;
        let source = taxonomy
            .source_id(&parsed.source)
            .ok_or_else(|| err(format!("unknown source {:?}", parsed.source)))?;
        let split = match parsed.split {
            Some(s) => s.parse().map_err(|e: Error| err(e.to_string()))?,
            None => match policy {
                SplitPolicy::DefaultTrain => Split::Train,
                SplitPolicy::HashByIndex => hashed_split(out.len()),
            },
        };
        out.push(RawRecord {
            text: parsed.text,
            locality: taxonomy.descriptor(style, source)?,
            split,
        });
    }
    Ok(out)
}

pub fn ingest_jsonl(
    path: &Path,
    taxonomy: &StyleTaxonomy,
    policy: SplitPolicy,
) -> Result<Vec<RawRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    parse_jsonl(BufReader::new(file), taxonomy, policy)
}

/// Writes records in the corpus JSONL format, always with an explicit split.
pub fn write_jsonl(
    w: &mut dyn Write,
    records: &[RawRecord],
    taxonomy: &StyleTaxonomy,
) -> std::io::Result<()> {
    for r in records {
        let line = JsonLineOut {
            text: &r.text,
            style: &taxonomy.styles()[r.locality.style as usize],
            source: &taxonomy.sources()[r.locality.source as usize],
            split: r.split,
        };
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// A tokenized record. The token sequence always ends with the
/// end-of-sequence id, so it is never empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<u32>,
    pub locality: LocalityDescriptor,
    pub split: Split,
}

impl Document {
    pub fn from_record(record: &RawRecord, vocab: &Vocabulary) -> Self {
        let mut tokens = vocab.tokenize(&record.text);
        tokens.push(Vocabulary::EOS);
        Self {
            tokens,
            locality: record.locality,
            split: record.split,
        }
    }

    pub fn validate(&self, vocab_size: usize, taxonomy: &StyleTaxonomy) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Data("document has no tokens".into()));
        }
        if let Some(&id) = self.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::TokenOutOfRange { id, vocab_size });
        }
        taxonomy.validate(&self.locality)
    }
}

pub fn tokenize_records(records: &[RawRecord], vocab: &Vocabulary) -> Vec<Document> {
    records
        .iter()
        .map(|r| Document::from_record(r, vocab))
        .collect()
}

pub fn save_documents(path: &Path, docs: &[Document]) -> Result<()> {
    crate::io::write_atomic_with(path, |w| {
        for d in docs {
            serde_json::to_writer(&mut *w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn split_documents(docs: &[Document], split: Split) -> Vec<Document> {
    docs.iter().filter(|d| d.split == split).cloned().collect()
}
