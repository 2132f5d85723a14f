//! Style-locality k-nearest-neighbor language modeling.
//!
//! A small reference language model supplies context encodings and a
//! next-token distribution. Encodings of every training position are stored
//! in a datastore together with the next token and a (style, source,
//! category) locality descriptor. At inference time the nearest stored
//! contexts are retrieved, their distances are rescaled by a learned weight
//! per locality-match pattern, and the resulting neighbor distribution is
//! interpolated with the model distribution.

pub mod base_lm;
pub mod corpus;
pub mod datastore;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod knn_lm;
pub mod locality;
pub(crate) mod math;

pub use error::{Error, ErrorCategory, Result};
