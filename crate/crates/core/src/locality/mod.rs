//! Locality-combination encoding and the reweighted neighbor distribution.
//!
//! For a query and a retrieved neighbor, each active feature (style, source,
//! category) either matches or not. The match pattern selects one learned
//! non-negative scale `a_n`, and the neighbor's distance becomes
//! `a_n · d`. The neighbor distribution is the softmax of the negated
//! rescaled distances, summed per target token.

mod train;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::LocalityDescriptor;
use crate::datastore::{DistanceKind, Neighbor};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;

pub use train::{
    cache_neighbors, locality_loss_and_gradient, train_locality_weights, AnnotatedSample,
    CachedSample, LocalityHyper, LocalityTrainOutcome, SampleItem,
};
pub use weights::LocalityWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feature {
    Style,
    Source,
    Category,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Style, Feature::Source, Feature::Category];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Style => "style",
            Feature::Source => "source",
            Feature::Category => "category",
        }
    }

    fn matches(self, a: &LocalityDescriptor, b: &LocalityDescriptor) -> bool {
        match self {
            Feature::Style => a.style == b.style,
            Feature::Source => a.source == b.source,
            Feature::Category => a.category == b.category,
        }
    }
}

/// Subset of {style, source, category}; empty means plain kNN-LM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LocalityFeatureSet {
    pub style: bool,
    pub source: bool,
    pub category: bool,
}

impl LocalityFeatureSet {
    pub const NONE: Self = Self {
        style: false,
        source: false,
        category: false,
    };

    pub fn of(features: &[Feature]) -> Self {
        let mut s = Self::NONE;
        for f in features {
            match f {
                Feature::Style => s.style = true,
                Feature::Source => s.source = true,
                Feature::Category => s.category = true,
            }
        }
        s
    }

    pub fn contains(&self, f: Feature) -> bool {
        match f {
            Feature::Style => self.style,
            Feature::Source => self.source,
            Feature::Category => self.category,
        }
    }

    /// Active features in (style, source, category) order.
    pub fn active(&self) -> Vec<Feature> {
        Feature::ALL
            .into_iter()
            .filter(|f| self.contains(*f))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.active().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `2^L` for `L` active features.
    pub fn combinations(&self) -> usize {
        1 << self.len()
    }

    /// The seven subsets compared in the ablation, in report order.
    pub fn ablation_rows() -> Vec<Self> {
        use Feature::*;
        vec![
            Self::NONE,
            Self::of(&[Style]),
            Self::of(&[Category]),
            Self::of(&[Source]),
            Self::of(&[Style, Category]),
            Self::of(&[Source, Category]),
            Self::of(&[Style, Source]),
        ]
    }
}

impl fmt::Display for LocalityFeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.active().into_iter().map(Feature::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for LocalityFeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::NONE);
        }
        let mut out = Self::NONE;
        for part in s.split([',', '+']) {
            let f = match part.trim() {
                "style" => Feature::Style,
                "source" => Feature::Source,
                "category" => Feature::Category,
                other => return Err(Error::Config(format!("unknown locality feature {other:?}"))),
            };
            if out.contains(f) {
                return Err(Error::Config(format!("feature {} listed twice", f.name())));
            }
            out = Self::of(&[out.active(), vec![f]].concat());
        }
        Ok(out)
    }
}

impl TryFrom<String> for LocalityFeatureSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LocalityFeatureSet> for String {
    fn from(f: LocalityFeatureSet) -> String {
        f.to_string()
    }
}

/// Bit `i` is set iff the `i`-th active feature matches; style, when
/// active, is the least significant bit.
pub fn combination_index(
    query: &LocalityDescriptor,
    neighbor: &LocalityDescriptor,
    features: LocalityFeatureSet,
) -> usize {
    features
        .active()
        .into_iter()
        .enumerate()
        .filter(|(_, f)| f.matches(query, neighbor))
        .fold(0, |acc, (bit, _)| acc | (1 << bit))
}

/// `a_combo · raw_distance`; the linear map has no bias term.
pub fn reweighted_distance(raw_distance: f64, combo: usize, weights: &LocalityWeights) -> f64 {
    weights.scale(combo) * raw_distance
}

/// Per-neighbor probabilities (before aggregation by token). Neighbors
/// removed by a style restriction are left out.
pub fn neighbor_probabilities(
    neighbors: &[Neighbor],
    query: &LocalityDescriptor,
    weights: &LocalityWeights,
    distance: DistanceKind,
) -> Result<Vec<(u32, f64)>> {
    let kept: Vec<&Neighbor> = neighbors
        .iter()
        .filter(|n| !weights.restricts_style() || n.locality.style == query.style)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyNeighborSet);
    }
    let features = weights.features();
    let scores: Vec<f64> = kept
        .iter()
        .map(|n| {
            let combo = combination_index(query, &n.locality, features);
            -reweighted_distance(distance.from_squared(n.distance), combo, weights)
        })
        .collect();
    let lse = log_sum_exp(&scores);
    Ok(kept
        .iter()
        .zip(scores)
        .map(|(n, s)| (n.value, (s - lse).exp()))
        .collect())
}

/// Neighbor distribution over the whole vocabulary. Tokens that no
/// retained neighbor carries get probability zero.
pub fn knn_locality_distribution(
    neighbors: &[Neighbor],
    query: &LocalityDescriptor,
    weights: &LocalityWeights,
    distance: DistanceKind,
    vocab_size: usize,
) -> Result<Vec<f64>> {
    let mut dist = vec![0.0; vocab_size];
    for (tok, p) in neighbor_probabilities(neighbors, query, weights, distance)? {
        let slot = dist.get_mut(tok as usize).ok_or(Error::TokenOutOfRange {
            id: tok,
            vocab_size,
        })?;
        *slot += p;
    }
    Ok(dist)
}

/// Returns a copy of `template` that keeps only neighbors sharing the
/// query's style, reproducing a single-style datastore.
pub fn force_style_restriction(template: &LocalityWeights) -> Result<LocalityWeights> {
    if !template.features().style {
        return Err(Error::Config(
            "style restriction requires the style feature".into(),
        ));
    }
    Ok(template.clone().with_style_restriction())
}
