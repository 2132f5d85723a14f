use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{combination_index, LocalityFeatureSet, LocalityWeights};
use crate::base_lm::LanguageModel;
use crate::corpus::{Document, LocalityDescriptor};
use crate::datastore::{to_query, Datastore, DistanceKind};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleItem {
    pub context: Vec<u32>,
    pub target: u32,
    pub locality: LocalityDescriptor,
    /// Datastore entry created from this very position; excluded from its
    /// own neighbor set.
    pub entry: Option<usize>,
}

/// Annotated training positions used to fit the locality scales.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotatedSample {
    pub items: Vec<SampleItem>,
}

impl AnnotatedSample {
    /// Draws up to `size` positions without replacement from `docs`, which
    /// must be the documents the datastore was built from, in the same
    /// order; entry indices are recorded so each item skips its own entry.
    pub fn from_documents(docs: &[Document], size: usize, seed: u64) -> Self {
        let positions: Vec<(usize, usize)> = docs
            .iter()
            .enumerate()
            .flat_map(|(di, d)| (0..d.tokens.len()).map(move |p| (di, p)))
            .collect();
        let chosen: Vec<usize> = if size >= positions.len() {
            (0..positions.len()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = rand::seq::index::sample(&mut rng, positions.len(), size).into_vec();
            v.sort_unstable();
            v
        };
        let items = chosen
            .into_iter()
            .map(|entry| {
                let (di, p) = positions[entry];
                let doc = &docs[di];
                SampleItem {
                    context: doc.tokens[..p].to_vec(),
                    target: doc.tokens[p],
                    locality: doc.locality,
                    entry: Some(entry),
                }
            })
            .collect();
        Self { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Retrieval result for one sample item. Distances and localities do not
/// depend on the scales, so one retrieval serves every epoch and every
/// feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedSample {
    pub query: LocalityDescriptor,
    /// Distances in the kind the neighbor softmax consumes.
    pub distances: Vec<f64>,
    pub localities: Vec<LocalityDescriptor>,
    pub is_target: Vec<bool>,
}

/// Retrieves `k` neighbors for every sample item (exact search), in sample
/// order.
pub fn cache_neighbors(
    store: &Datastore,
    model: &dyn LanguageModel,
    sample: &AnnotatedSample,
    k: usize,
    distance: DistanceKind,
) -> Result<Vec<CachedSample>> {
    sample
        .items
        .par_iter()
        .map(|item| {
            if item.target as usize >= model.vocab_size() {
                return Err(Error::TokenOutOfRange {
                    id: item.target,
                    vocab_size: model.vocab_size(),
                });
            }
            if let Some(e) = item.entry {
                if e >= store.len()
                    || store.value(e) != item.target
                    || store.locality(e) != item.locality
                {
                    return Err(Error::Data(format!(
                        "sample item for entry {e} does not match the datastore"
                    )));
                }
            }
            let query = to_query(&model.encode(&item.context)?);
            let extra = usize::from(item.entry.is_some());
            let neighbors = store.knn_exact(&query, k + extra)?;
            let kept: Vec<_> = neighbors
                .into_iter()
                .filter(|n| Some(n.index) != item.entry)
                .take(k)
                .collect();
            Ok(CachedSample {
                query: item.locality,
                distances: kept
                    .iter()
                    .map(|n| distance.from_squared(n.distance))
                    .collect(),
                localities: kept.iter().map(|n| n.locality).collect(),
                is_target: kept.iter().map(|n| n.value == item.target).collect(),
            })
        })
        .collect()
}

/// Mean negative log-likelihood of the target under the neighbor
/// distribution, its gradient with respect to every scale, and the number
/// of samples skipped because no neighbor carries the target.
pub fn locality_loss_and_gradient(
    weights: &LocalityWeights,
    cache: &[CachedSample],
) -> (f64, Vec<f64>, usize) {
    let features = weights.features();
    let mut grad = vec![0.0; weights.scales().len()];
    let mut loss = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for s in cache {
        if !s.is_target.iter().any(|&t| t) {
            skipped += 1;
            continue;
        }
        let combos: Vec<usize> = s
            .localities
            .iter()
            .map(|l| combination_index(&s.query, l, features))
            .collect();
        let scores: Vec<f64> = s
            .distances
            .iter()
            .zip(&combos)
            .map(|(&r, &c)| -weights.scale(c) * r)
            .collect();
        let target_scores: Vec<f64> = scores
            .iter()
            .zip(&s.is_target)
            .filter(|(_, &t)| t)
            .map(|(&x, _)| x)
            .collect();
        let lse_all = log_sum_exp(&scores);
        let lse_target = log_sum_exp(&target_scores);
        loss += lse_all - lse_target;
        used += 1;
        for (((&score, &r), &c), &is_t) in scores
            .iter()
            .zip(&s.distances)
            .zip(&combos)
            .zip(&s.is_target)
        {
            grad[c] -= r * (score - lse_all).exp();
            if is_t {
                grad[c] += r * (score - lse_target).exp();
            }
        }
    }
    let n = used.max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalityHyper {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for LocalityHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalityTrainOutcome {
    pub weights: LocalityWeights,
    /// Loss at the all-ones starting point.
    pub initial_loss: f64,
    /// Loss after each epoch's update.
    pub trace: Vec<f64>,
    /// Samples whose neighbor set holds no copy of the target.
    pub skipped: usize,
}

impl LocalityTrainOutcome {
    /// Full-batch projected gradient descent from all-ones scales on a
    /// neighbor cache. Scales are clamped at zero after every step.
    pub fn fit(
        cache: &[CachedSample],
        features: LocalityFeatureSet,
        hyper: LocalityHyper,
    ) -> Result<Self> {
        if !(hyper.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let mut weights = LocalityWeights::identity(features);
        let (initial_loss, mut grad, skipped) = locality_loss_and_gradient(&weights, cache);
        if !initial_loss.is_finite() {
            return Err(Error::Diverged { epoch: 0 });
        }
        let mut trace = Vec::with_capacity(hyper.epochs);
        for epoch in 0..hyper.epochs {
            for (c, g) in grad.iter().enumerate() {
                let next = (weights.scale(c) - hyper.learning_rate * g).max(0.0);
                weights.set_scale(c, next);
            }
            let (loss, g, _) = locality_loss_and_gradient(&weights, cache);
            if !loss.is_finite() || weights.scales().iter().any(|s| !s.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            trace.push(loss);
            grad = g;
        }
        Ok(Self {
            weights,
            initial_loss,
            trace,
            skipped,
        })
    }
}

/// Retrieves neighbors once for the sample, then fits the scales for
/// `features`. See [`LocalityTrainOutcome::fit`].
pub fn train_locality_weights(
    store: &Datastore,
    model: &dyn LanguageModel,
    sample: &AnnotatedSample,
    features: LocalityFeatureSet,
    k: usize,
    distance: DistanceKind,
    hyper: LocalityHyper,
) -> Result<LocalityTrainOutcome> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let cache = cache_neighbors(store, model, sample, k, distance)?;
    LocalityTrainOutcome::fit(&cache, features, hyper)
}

#[cfg(test)]
mod tests {
    use super::super::Feature::*;
    use super::*;
    use rand::Rng;

    fn loc(style: u16, source: u16) -> LocalityDescriptor {
        LocalityDescriptor {
            style,
            source,
            category: style % 2,
        }
    }

    fn random_cache(n: usize, k: usize, seed: u64) -> Vec<CachedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut is_target: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.3)).collect();
                is_target[rng.gen_range(0..k)] = true;
                CachedSample {
                    query: loc(rng.gen_range(0..2), rng.gen_range(0..2)),
                    distances: (0..k).map(|_| rng.gen_range(0.0..3.0)).collect(),
                    localities: (0..k)
                        .map(|_| loc(rng.gen_range(0..2), rng.gen_range(0..2)))
                        .collect(),
                    is_target,
                }
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cache = random_cache(20, 8, 11);
        let fs = LocalityFeatureSet::of(&[Style, Source]);
        let mut w = LocalityWeights::from_scales(fs, vec![0.7, 1.3, 0.9, 1.6]).unwrap();
        let (_, grad, _) = locality_loss_and_gradient(&w, &cache);
        let eps = 1e-4;
        for c in 0..4 {
            let base = w.scale(c);
            w.set_scale(c, base + eps);
            let up = locality_loss_and_gradient(&w, &cache).0;
            w.set_scale(c, base - eps);
            let down = locality_loss_and_gradient(&w, &cache).0;
            w.set_scale(c, base);
            let numeric = (up - down) / (2.0 * eps);
            let rel = (numeric - grad[c]).abs() / numeric.abs().max(grad[c].abs()).max(1e-8);
            assert!(
                rel < 1e-4,
                "combo {c}: analytic {} numeric {numeric}",
                grad[c]
            );
        }
    }

    #[test]
    fn zero_epochs_keeps_identity() {
        let cache = random_cache(5, 4, 1);
        let fs = LocalityFeatureSet::of(&[Style]);
        let out = LocalityTrainOutcome::fit(
            &cache,
            fs,
            LocalityHyper {
                learning_rate: 0.1,
                epochs: 0,
            },
        )
        .unwrap();
        assert_eq!(out.weights, LocalityWeights::identity(fs));
        assert!(out.trace.is_empty());
    }

    #[test]
    fn loss_non_increasing_small_lr() {
        let cache = random_cache(20, 8, 3);
        let fs = LocalityFeatureSet::of(&[Style, Source]);
        let out = LocalityTrainOutcome::fit(
            &cache,
            fs,
            LocalityHyper {
                learning_rate: 0.01,
                epochs: 50,
            },
        )
        .unwrap();
        let mut prev = out.initial_loss;
        for &l in &out.trace {
            assert!(l <= prev + 1e-12, "{l} > {prev}");
            prev = l;
        }
    }

    /// Matching neighbors always carry the target, mismatching never do:
    /// mismatches must be pushed away.
    #[test]
    fn separable_sample_pushes_mismatch_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cache: Vec<CachedSample> = (0..50)
            .map(|_| {
                let q = loc(rng.gen_range(0..2), 0);
                let localities: Vec<_> = (0..8)
                    .map(|_| loc(rng.gen_range(0..2), 0))
                    .chain([loc(q.style, 0)])
                    .collect();
                CachedSample {
                    query: q,
                    distances: (0..9).map(|_| rng.gen_range(0.1..2.0)).collect(),
                    is_target: localities.iter().map(|l| l.style == q.style).collect(),
                    localities,
                }
            })
            .collect();
        let out = LocalityTrainOutcome::fit(
            &cache,
            LocalityFeatureSet::of(&[Style]),
            LocalityHyper::default(),
        )
        .unwrap();
        assert!(
            out.weights.scale(0) > out.weights.scale(1),
            "{:?}",
            out.weights
        );
        assert!(out.trace.last().unwrap() < &out.initial_loss);
    }

    #[test]
    fn target_absent_samples_are_skipped() {
        let mut cache = random_cache(4, 3, 2);
        cache[0].is_target = vec![false; 3];
        let w = LocalityWeights::identity(LocalityFeatureSet::NONE);
        let (loss, _, skipped) = locality_loss_and_gradient(&w, &cache);
        assert_eq!(skipped, 1);
        assert!(loss.is_finite());
    }
}
