//! Corpus ingestion, tokenization, vocabulary and style annotation.

mod records;
mod synthetic;
mod taxonomy;
mod vocab;

pub use records::{
    hashed_split, ingest_jsonl, load_documents, parse_jsonl, save_documents, split_documents,
    tokenize_records, write_jsonl, Document, RawRecord, Split, SplitPolicy,
};
pub use synthetic::generate_synthetic_corpus;
pub use taxonomy::{LocalityDescriptor, StyleTaxonomy};
pub use vocab::{split_tokens, Vocabulary, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN};
