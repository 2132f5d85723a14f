//! Persistent (key, next-token, locality) store with exact and IVF search.
//!
//! File layout, little-endian:
//!
//! ```text
//! magic "SKNN" | u32 version | u32 key_dim | u64 count | u8 distance flag
//! | [u8; 32] taxonomy fingerprint
//! keys      count × key_dim × f32
//! values    count × u32
//! locality  count × (u16 style, u16 source, u16 category)
//! ```
//!
//! The header is 53 bytes, so keys are not 4-byte aligned in the file; they
//! are decoded on the fly from the mapped bytes instead of being cast.

mod ivf;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use memmap2::Mmap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_lm::LanguageModel;
use crate::corpus::{Document, LocalityDescriptor, Split, StyleTaxonomy};
use crate::error::{Error, Result};
use crate::io::{write_atomic_with, LeReader};

pub use ivf::{build_ivf, recall_at_k, IvfIndex, KMEANS_ITERATIONS};

const MAGIC: &[u8; 4] = b"SKNN";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 1 + 32;

/// Which distance the neighbor softmax consumes. Ranking is identical under
/// both; retrieval always works with squared L2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    SquaredL2,
    L2,
}

impl DistanceKind {
    pub fn flag(self) -> u8 {
        match self {
            DistanceKind::SquaredL2 => 0,
            DistanceKind::L2 => 1,
        }
    }

    pub fn from_flag(flag: u8) -> Result<Self> {
        match flag {
            0 => Ok(DistanceKind::SquaredL2),
            1 => Ok(DistanceKind::L2),
            f => Err(Error::Format(format!("unknown distance flag {f}"))),
        }
    }

    /// Converts a squared L2 distance into this kind.
    pub fn from_squared(self, squared: f64) -> f64 {
        match self {
            DistanceKind::SquaredL2 => squared,
            DistanceKind::L2 => squared.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatastoreHeader {
    pub version: u32,
    pub key_dim: usize,
    pub count: usize,
    pub distance: DistanceKind,
    pub fingerprint: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub index: usize,
    /// Squared L2 distance between the query and the stored key.
    pub distance: f64,
    pub value: u32,
    pub locality: LocalityDescriptor,
}

enum Keys {
    Owned(Vec<u8>),
    Mapped(Mmap),
}

/// Immutable datastore. Safe to query from many threads.
pub struct Datastore {
    header: DatastoreHeader,
    keys: Keys,
    values: Vec<u32>,
    localities: Vec<LocalityDescriptor>,
}

impl std::fmt::Debug for Datastore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Datastore")
            .field("header", &self.header)
            .finish_non_exhaustive()
    }
}

/// Max-heap entry ordered by (distance, index), so the heap top is the
/// current worst of the k best.
#[derive(PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

pub(crate) fn squared_distance(key: &[u8], query: &[f32]) -> f64 {
    key.chunks_exact(4)
        .zip(query)
        .map(|(b, &q)| {
            let k = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
            let diff = k - q as f64;
            diff * diff
        })
        .sum()
}

/// Narrows an encoder output to the stored key precision.
pub fn to_query(key: &[f64]) -> Vec<f32> {
    key.iter().map(|&x| x as f32).collect()
}

impl Datastore {
    /// One entry per position of every given document, in document order
    /// then position order; keys are the encodings of the preceding context.
    pub fn from_documents(
        model: &dyn LanguageModel,
        docs: &[Document],
        taxonomy: &StyleTaxonomy,
        distance: DistanceKind,
    ) -> Result<Self> {
        let d = model.key_dim();
        let per_doc = docs
            .par_iter()
            .map(|doc| {
                taxonomy.validate(&doc.locality)?;
                let mut bytes = Vec::with_capacity(doc.tokens.len() * d * 4);
                for i in 0..doc.tokens.len() {
                    if doc.tokens[i] as usize >= model.vocab_size() {
                        return Err(Error::TokenOutOfRange {
                            id: doc.tokens[i],
                            vocab_size: model.vocab_size(),
                        });
                    }
                    let key = model.encode(&doc.tokens[..i])?;
                    if key.len() != d {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            got: key.len(),
                        });
                    }
                    for x in key {
                        let x = x as f32;
                        if !x.is_finite() {
                            return Err(Error::Data("non-finite key".into()));
                        }
                        bytes.extend_from_slice(&x.to_le_bytes());
                    }
                }
                Ok(bytes)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut localities = Vec::new();
        for (doc, bytes) in docs.iter().zip(per_doc) {
            keys.extend_from_slice(&bytes);
            values.extend_from_slice(&doc.tokens);
            localities.extend(std::iter::repeat_n(doc.locality, doc.tokens.len()));
        }
        Ok(Self {
            header: DatastoreHeader {
                version: VERSION,
                key_dim: d,
                count: values.len(),
                distance,
                fingerprint: taxonomy.fingerprint(),
            },
            keys: Keys::Owned(keys),
            values,
            localities,
        })
    }

    /// Datastore over raw entries; used for fixtures and subsets.
    pub fn from_entries(
        key_dim: usize,
        keys: &[f32],
        values: Vec<u32>,
        localities: Vec<LocalityDescriptor>,
        distance: DistanceKind,
        fingerprint: [u8; 32],
    ) -> Result<Self> {
        if key_dim == 0 || keys.len() != values.len() * key_dim || localities.len() != values.len()
        {
            return Err(Error::Data("inconsistent entry arrays".into()));
        }
        if keys.iter().any(|k| !k.is_finite()) {
            return Err(Error::Data("non-finite key".into()));
        }
        Ok(Self {
            header: DatastoreHeader {
                version: VERSION,
                key_dim,
                count: values.len(),
                distance,
                fingerprint,
            },
            keys: Keys::Owned(keys.iter().flat_map(|k| k.to_le_bytes()).collect()),
            values,
            localities,
        })
    }

    pub fn header(&self) -> &DatastoreHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.count
    }

    pub fn is_empty(&self) -> bool {
        self.header.count == 0
    }

    pub fn key_dim(&self) -> usize {
        self.header.key_dim
    }

    fn key_bytes(&self) -> &[u8] {
        match &self.keys {
            Keys::Owned(v) => v,
            Keys::Mapped(m) => {
                &m[HEADER_LEN..HEADER_LEN + self.header.count * self.header.key_dim * 4]
            }
        }
    }

    pub(crate) fn raw_key(&self, i: usize) -> &[u8] {
        let w = self.header.key_dim * 4;
        &self.key_bytes()[i * w..(i + 1) * w]
    }

    pub fn key(&self, i: usize) -> Vec<f32> {
        self.raw_key(i)
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    }

    pub fn value(&self, i: usize) -> u32 {
        self.values[i]
    }

    pub fn locality(&self, i: usize) -> LocalityDescriptor {
        self.localities[i]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn localities(&self) -> &[LocalityDescriptor] {
        &self.localities
    }

    /// Refuses a taxonomy other than the one the store was built with.
    pub fn ensure_taxonomy(&self, taxonomy: &StyleTaxonomy) -> Result<()> {
        if taxonomy.fingerprint() != self.header.fingerprint {
            return Err(Error::TaxonomyMismatch);
        }
        Ok(())
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<()> {
        if query.len() != self.header.key_dim {
            return Err(Error::DimensionMismatch {
                expected: self.header.key_dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn top_k(
        &self,
        query: &[f32],
        k: usize,
        candidates: impl IntoIterator<Item = usize>,
    ) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        for i in candidates {
            let c = Candidate(squared_distance(self.raw_key(i), query), i);
            if heap.len() < k {
                heap.push(c);
            } else if heap.peek().is_some_and(|worst| c < *worst) {
                heap.pop();
                heap.push(c);
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|Candidate(distance, index)| Neighbor {
                index,
                distance,
                value: self.values[index],
                locality: self.localities[index],
            })
            .collect()
    }

    /// The `k` entries nearest to `query` by squared L2, ascending, ties by
    /// entry index. Returns every entry when `k` exceeds the store size.
    pub fn knn_exact(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.check_query(query, k)?;
        Ok(self.top_k(query, k, 0..self.len()))
    }

    /// Exact search over the entries of one style only.
    pub fn knn_exact_style(&self, query: &[f32], k: usize, style: u16) -> Result<Vec<Neighbor>> {
        self.check_query(query, k)?;
        Ok(self.top_k(
            query,
            k,
            (0..self.len()).filter(|&i| self.localities[i].style == style),
        ))
    }

    /// Logical single-style datastore.
    pub fn filter_by_style(&self, style: u16) -> StyleView<'_> {
        StyleView {
            store: self,
            style,
            indices: (0..self.len())
                .filter(|&i| self.localities[i].style == style)
                .collect(),
        }
    }

    /// Physically separate datastore holding only the entries of `style`.
    pub fn subset_by_style(&self, style: u16) -> Datastore {
        let view = self.filter_by_style(style);
        let mut keys = Vec::with_capacity(view.len() * self.key_dim() * 4);
        for &i in &view.indices {
            keys.extend_from_slice(self.raw_key(i));
        }
        Datastore {
            header: DatastoreHeader {
                count: view.len(),
                ..self.header.clone()
            },
            keys: Keys::Owned(keys),
            values: view.indices.iter().map(|&i| self.values[i]).collect(),
            localities: view.indices.iter().map(|&i| self.localities[i]).collect(),
        }
    }

    pub fn write_to(&self, w: &mut dyn Write) -> std::io::Result<()> {
        let h = &self.header;
        w.write_all(MAGIC)?;
        w.write_all(&h.version.to_le_bytes())?;
        w.write_all(&(h.key_dim as u32).to_le_bytes())?;
        w.write_all(&(h.count as u64).to_le_bytes())?;
        w.write_all(&[h.distance.flag()])?;
        w.write_all(&h.fingerprint)?;
        w.write_all(self.key_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        for l in &self.localities {
            w.write_all(&l.style.to_le_bytes())?;
            w.write_all(&l.source.to_le_bytes())?;
            w.write_all(&l.category.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Atomic write (temporary file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic_with(path, |w| self.write_to(w))
    }

    fn parse(bytes: &[u8]) -> Result<(DatastoreHeader, Vec<u32>, Vec<LocalityDescriptor>)> {
        let mut r = LeReader::new(bytes);
        if r.bytes(4)? != MAGIC {
            return Err(Error::Format("not a datastore (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported datastore version {version}"
            )));
        }
        let key_dim = r.u32()? as usize;
        let count =
            usize::try_from(r.u64()?).map_err(|_| Error::Format("entry count overflow".into()))?;
        let distance = DistanceKind::from_flag(r.u8()?)?;
        let fingerprint: [u8; 32] = r.bytes(32)?.try_into().unwrap();
        debug_assert_eq!(r.position(), HEADER_LEN);
        let key_len = count
            .checked_mul(key_dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("key block size overflow".into()))?;
        let keys = r.bytes(key_len)?;
        if keys
            .chunks_exact(4)
            .any(|b| !f32::from_le_bytes([b[0], b[1], b[2], b[3]]).is_finite())
        {
            return Err(Error::Format("datastore contains non-finite keys".into()));
        }
        let values = r
            .bytes(count * 4)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let localities = r
            .bytes(count * 6)?
            .chunks_exact(6)
            .map(|b| LocalityDescriptor {
                style: u16::from_le_bytes([b[0], b[1]]),
                source: u16::from_le_bytes([b[2], b[3]]),
                category: u16::from_le_bytes([b[4], b[5]]),
            })
            .collect();
        r.finish()?;
        Ok((
            DatastoreHeader {
                version,
                key_dim,
                count,
                distance,
                fingerprint,
            },
            values,
            localities,
        ))
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let (header, values, localities) = Self::parse(&bytes)?;
        let key_len = header.count * header.key_dim * 4;
        Ok(Self {
            keys: Keys::Owned(bytes[HEADER_LEN..HEADER_LEN + key_len].to_vec()),
            header,
            values,
            localities,
        })
    }

    /// Memory-maps the file; keys stay on the mapping.
    pub fn open(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        // SAFETY: the store is never mutated after being written, and files
        // are replaced by rename rather than rewritten in place.
        let mmap = unsafe { Mmap::map(&file) }.map_err(|e| Error::io_at(path, e))?;
        let (header, values, localities) = Self::parse(&mmap)?;
        Ok(Self {
            header,
            keys: Keys::Mapped(mmap),
            values,
            localities,
        })
    }
}

/// Builds a datastore from the train-split documents and writes it to
/// `out_path` atomically.
pub fn build_datastore(
    model: &dyn LanguageModel,
    docs: &[Document],
    taxonomy: &StyleTaxonomy,
    distance: DistanceKind,
    out_path: &Path,
) -> Result<DatastoreHeader> {
    let train: Vec<Document> = docs
        .iter()
        .filter(|d| d.split == Split::Train)
        .cloned()
        .collect();
    let store = Datastore::from_documents(model, &train, taxonomy, distance)?;
    store.save(out_path)?;
    Ok(store.header.clone())
}

/// Entries of one style, addressed by their index in the full store.
pub struct StyleView<'a> {
    store: &'a Datastore,
    style: u16,
    indices: Vec<usize>,
}

impl StyleView<'_> {
    pub fn style(&self) -> u16 {
        self.style
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn knn_exact(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.store.check_query(query, k)?;
        Ok(self.store.top_k(query, k, self.indices.iter().copied()))
    }
}
