//! Inverted-file index: k-means partition of the datastore keys, searched by
//! probing the clusters whose centroids are nearest to the query.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Datastore, Neighbor};
use crate::error::{Error, Result};
use crate::io::{write_atomic_with, LeReader};

pub const KMEANS_ITERATIONS: usize = 20;

const MAGIC: &[u8; 4] = b"SKIV";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    key_dim: usize,
    entry_count: usize,
    /// n_clusters × key_dim
    centroids: Vec<f64>,
    lists: Vec<Vec<u32>>,
    default_probe: usize,
}

fn nearest_centroid(key: &[u8], centroids: &[f64], d: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, cent) in centroids.chunks_exact(d).enumerate() {
        let dist: f64 = key
            .chunks_exact(4)
            .zip(cent)
            .map(|(b, &m)| {
                let diff = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64 - m;
                diff * diff
            })
            .sum();
        if dist < best.0 {
            best = (dist, c);
        }
    }
    best.1
}

/// Seeded k-means with [`KMEANS_ITERATIONS`] Lloyd iterations, initialized
/// from distinct randomly chosen entries. A cluster that loses all members
/// keeps its previous centroid.
pub fn build_ivf(store: &Datastore, n_clusters: usize, seed: u64) -> Result<IvfIndex> {
    if n_clusters < 1 {
        return Err(Error::Config("n_clusters must be at least 1".into()));
    }
    if n_clusters > store.len() {
        return Err(Error::Config(format!(
            "n_clusters {n_clusters} exceeds entry count {}",
            store.len()
        )));
    }
    let d = store.key_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = rand::seq::index::sample(&mut rng, store.len(), n_clusters).into_vec();
    seeds.sort_unstable();
    let mut centroids: Vec<f64> = seeds
        .iter()
        .flat_map(|&i| store.key(i).into_iter().map(f64::from))
        .collect();

    let assign = |centroids: &[f64]| -> Vec<usize> {
        (0..store.len())
            .into_par_iter()
            .map(|i| nearest_centroid(store.raw_key(i), centroids, d))
            .collect()
    };

    for _ in 0..KMEANS_ITERATIONS {
        let assignment = assign(&centroids);
        let mut sums = vec![0.0; n_clusters * d];
        let mut counts = vec![0usize; n_clusters];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, k) in sums[c * d..(c + 1) * d].iter_mut().zip(store.key(i)) {
                *s += k as f64;
            }
        }
        for c in 0..n_clusters {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }

    let mut lists = vec![Vec::new(); n_clusters];
    for (i, c) in assign(&centroids).into_iter().enumerate() {
        lists[c].push(i as u32);
    }
    Ok(IvfIndex {
        key_dim: d,
        entry_count: store.len(),
        centroids,
        lists,
        default_probe: n_clusters.div_ceil(4),
    })
}

impl IvfIndex {
    pub fn n_clusters(&self) -> usize {
        self.lists.len()
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.key_dim..(c + 1) * self.key_dim]
    }

    /// A quarter of the clusters, rounded up.
    pub fn default_probe(&self) -> usize {
        self.default_probe
    }

    fn check(&self, store: &Datastore, n_probe: usize) -> Result<()> {
        if store.len() != self.entry_count || store.key_dim() != self.key_dim {
            return Err(Error::Data(
                "IVF index was built for a different datastore".into(),
            ));
        }
        if n_probe < 1 || n_probe > self.n_clusters() {
            return Err(Error::Config(format!(
                "n_probe must be in 1..={}",
                self.n_clusters()
            )));
        }
        Ok(())
    }

    fn probed(&self, query: &[f32], n_probe: usize) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = (0..self.n_clusters())
            .map(|c| {
                let dist = self
                    .centroid(c)
                    .iter()
                    .zip(query)
                    .map(|(&m, &q)| (m - q as f64) * (m - q as f64))
                    .sum::<f64>();
                (dist, c)
            })
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().take(n_probe).map(|(_, c)| c).collect()
    }

    /// Exact search restricted to the `n_probe` clusters with the nearest
    /// centroids. Same ordering contract as [`Datastore::knn_exact`].
    pub fn knn_approx(
        &self,
        store: &Datastore,
        query: &[f32],
        k: usize,
        n_probe: usize,
    ) -> Result<Vec<Neighbor>> {
        self.search(store, query, k, n_probe, None)
    }

    /// [`IvfIndex::knn_approx`] limited to entries of one style.
    pub fn knn_approx_style(
        &self,
        store: &Datastore,
        query: &[f32],
        k: usize,
        n_probe: usize,
        style: u16,
    ) -> Result<Vec<Neighbor>> {
        self.search(store, query, k, n_probe, Some(style))
    }

    fn search(
        &self,
        store: &Datastore,
        query: &[f32],
        k: usize,
        n_probe: usize,
        style: Option<u16>,
    ) -> Result<Vec<Neighbor>> {
        store.check_query(query, k)?;
        self.check(store, n_probe)?;
        let candidates = self
            .probed(query, n_probe)
            .into_iter()
            .flat_map(|c| self.lists[c].iter().map(|&i| i as usize))
            .filter(|&i| style.is_none_or(|s| store.locality(i).style == s));
        Ok(store.top_k(query, k, candidates))
    }

    pub fn write_to(&self, w: &mut dyn Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.key_dim as u32).to_le_bytes())?;
        w.write_all(&(self.n_clusters() as u32).to_le_bytes())?;
        w.write_all(&(self.entry_count as u64).to_le_bytes())?;
        w.write_all(&(self.default_probe as u32).to_le_bytes())?;
        for c in &self.centroids {
            w.write_all(&c.to_le_bytes())?;
        }
        for list in &self.lists {
            w.write_all(&(list.len() as u32).to_le_bytes())?;
            for i in list {
                w.write_all(&i.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::new(bytes);
        if r.bytes(4)? != MAGIC {
            return Err(Error::Format("not an IVF index (bad magic)".into()));
        }
        if r.u32()? != VERSION {
            return Err(Error::Format("unsupported IVF index version".into()));
        }
        let key_dim = r.u32()? as usize;
        let n_clusters = r.u32()? as usize;
        let entry_count = r.u64()? as usize;
        let default_probe = r.u32()? as usize;
        let centroids = r.f64_vec(n_clusters * key_dim)?;
        let mut seen = vec![false; entry_count];
        let mut lists = Vec::with_capacity(n_clusters);
        for _ in 0..n_clusters {
            let len = r.u32()? as usize;
            let mut list = Vec::with_capacity(len);
            for _ in 0..len {
                let i = r.u32()?;
                match seen.get_mut(i as usize) {
                    Some(s) if !*s => *s = true,
                    _ => return Err(Error::Format(format!("bad or repeated entry {i}"))),
                }
                list.push(i);
            }
            lists.push(list);
        }
        r.finish()?;
        if seen.iter().any(|s| !s) || centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Format(
                "IVF index does not partition the store".into(),
            ));
        }
        Ok(Self {
            key_dim,
            entry_count,
            centroids,
            lists,
            default_probe,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic_with(path, |w| self.write_to(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Fraction of the exact neighbors that the approximate search also found.
pub fn recall_at_k(exact: &[Neighbor], approx: &[Neighbor]) -> f64 {
    if exact.is_empty() {
        return 1.0;
    }
    let hits = approx
        .iter()
        .filter(|a| exact.iter().any(|e| e.index == a.index))
        .count();
    hits as f64 / exact.len() as f64
}
