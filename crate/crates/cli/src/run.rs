use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use styleknn::base_lm::{LanguageModel, LmParameters};
use styleknn::corpus::{load_documents, Document, Split, StyleTaxonomy, Vocabulary};
use styleknn::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const TAXONOMY_FILE: &str = "taxonomy.txt";

/// `<path><suffix>`, e.g. `model.bin.run.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Fails before any work if an input is missing or an output would
/// overwrite an input.
pub fn check_paths(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for p in inputs {
        if !p.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} does not exist",
                p.display()
            )));
        }
    }
    for o in outputs {
        if inputs.iter().any(|i| same_file(i, o)) {
            return Err(Error::Config(format!(
                "output {} would overwrite an input",
                o.display()
            )));
        }
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Wall-clock timings, kept out of the primary artifacts.
pub struct RunLog {
    start: Instant,
    last: Instant,
    text: String,
}

impl RunLog {
    pub fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            text: String::new(),
        }
    }

    pub fn stage(&mut self, name: &str) {
        let now = Instant::now();
        let _ = writeln!(self.text, "{name}: {:.3}s", (now - self.last).as_secs_f64());
        self.last = now;
    }

    pub fn note(&mut self, line: &str) {
        self.text.push_str(line);
        self.text.push('\n');
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        let total = self.start.elapsed().as_secs_f64();
        let _ = writeln!(self.text, "total: {total:.3}s");
        styleknn::io::write_atomic(path, self.text.as_bytes())
    }
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    styleknn::io::write_atomic(path, s.as_bytes())
}

/// Contents of an ingested data directory.
pub struct DataDir {
    pub vocab: Vocabulary,
    pub taxonomy: StyleTaxonomy,
    pub docs: Vec<Document>,
}

impl DataDir {
    pub fn files(dir: &Path) -> [PathBuf; 3] {
        [
            dir.join(VOCAB_FILE),
            dir.join(DOCUMENTS_FILE),
            dir.join(TAXONOMY_FILE),
        ]
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let [v, d, t] = Self::files(dir);
        for p in [&v, &d, &t] {
            if !p.exists() {
                return Err(Error::MissingArtifact(format!(
                    "{} does not exist",
                    p.display()
                )));
            }
        }
        let vocab = Vocabulary::load(&v)?;
        let taxonomy = StyleTaxonomy::load(&t)?;
        let docs = load_documents(&d)?;
        for doc in &docs {
            doc.validate(vocab.len(), &taxonomy)?;
        }
        Ok(Self {
            vocab,
            taxonomy,
            docs,
        })
    }

    pub fn split(&self, split: Split) -> Vec<Document> {
        styleknn::corpus::split_documents(&self.docs, split)
    }

    pub fn load_model(&self, path: &Path) -> Result<LmParameters> {
        let params = LmParameters::load(path)?;
        if params.vocab_size() != self.vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "{} has {} tokens, vocabulary has {}",
                path.display(),
                params.vocab_size(),
                self.vocab.len()
            )));
        }
        Ok(params)
    }
}
