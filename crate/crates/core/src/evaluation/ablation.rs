use rayon::prelude::*;

use super::report::{AblationRow, TrainingSummary};
use super::{document_target_probs, lambda_curve, perplexity_at};
use crate::base_lm::LanguageModel;
use crate::corpus::{Document, LocalityDescriptor, StyleTaxonomy};
use crate::datastore::{Datastore, DistanceKind, IvfIndex, Neighbor};
use crate::error::{Error, Result};
use crate::knn_lm::{KnnLm, KnnLmConfig, Retrieval, TargetProbs};
use crate::locality::{
    cache_neighbors, neighbor_probabilities, AnnotatedSample, LocalityFeatureSet, LocalityHyper,
    LocalityTrainOutcome, LocalityWeights,
};

/// Feature sets to evaluate, in report order.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub rows: Vec<LocalityFeatureSet>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            rows: LocalityFeatureSet::ablation_rows(),
        }
    }
}

pub enum WeightSource<'a> {
    /// Fit scales for every row on one shared neighbor cache of the sample.
    Train {
        sample: &'a AnnotatedSample,
        hyper: LocalityHyper,
    },
    /// Pre-trained weights; each non-empty row needs a matching entry.
    Provided(&'a [LocalityWeights]),
}

pub struct AblationInputs<'a> {
    pub store: &'a Datastore,
    pub ivf: Option<&'a IvfIndex>,
    pub model: &'a dyn LanguageModel,
    pub taxonomy: &'a StyleTaxonomy,
    pub valid: &'a [Document],
    pub test: &'a [Document],
    pub k: usize,
    pub distance: DistanceKind,
    pub retrieval: Retrieval,
    pub lambda_grid: &'a [f64],
    pub weights: WeightSource<'a>,
}

struct Position {
    lm: f64,
    target: u32,
    query: LocalityDescriptor,
    neighbors: Vec<Neighbor>,
}

fn cache_positions(base: &KnnLm, docs: &[Document]) -> Result<Vec<Vec<Position>>> {
    docs.par_iter()
        .map(|d| {
            (0..d.tokens.len())
                .map(|i| {
                    let step = base.step(&d.tokens[..i], &d.locality)?;
                    let t = d.tokens[i];
                    let lm = *step.lm.get(t as usize).ok_or(Error::TokenOutOfRange {
                        id: t,
                        vocab_size: step.lm.len(),
                    })?;
                    Ok(Position {
                        lm,
                        target: t,
                        query: d.locality,
                        neighbors: step.neighbors,
                    })
                })
                .collect()
        })
        .collect()
}

fn rescore(
    positions: &[Vec<Position>],
    weights: &LocalityWeights,
    distance: DistanceKind,
) -> Result<Vec<Vec<TargetProbs>>> {
    positions
        .par_iter()
        .map(|doc| {
            doc.iter()
                .map(|p| {
                    let knn =
                        match neighbor_probabilities(&p.neighbors, &p.query, weights, distance) {
                            Ok(probs) => {
                                let mut acc = 0.0;
                                for (tok, q) in probs {
                                    if tok == p.target {
                                        acc += q;
                                    }
                                }
                                Some(acc)
                            }
                            Err(Error::EmptyNeighborSet) => None,
                            Err(e) => return Err(e),
                        };
                    Ok(TargetProbs { lm: p.lm, knn })
                })
                .collect()
        })
        .collect()
}

/// Evaluates every feature set of `spec`: the scales are fitted (or taken
/// from `inputs.weights`), λ is chosen on the validation documents and test
/// perplexity is reported at that λ. The empty feature set always uses
/// all-ones scales. Retrieval for the evaluation documents runs once and is
/// shared by all rows.
pub fn run_ablation(spec: &AblationSpec, inputs: &AblationInputs) -> Result<Vec<AblationRow>> {
    let identity = LocalityWeights::identity(LocalityFeatureSet::NONE);
    let base_config = KnnLmConfig {
        k: inputs.k,
        lambda: 0.0,
        distance: inputs.distance,
        retrieval: inputs.retrieval,
        style_restriction: None,
    };
    let base = KnnLm::new(
        base_config.clone(),
        inputs.store,
        inputs.ivf,
        inputs.model,
        &identity,
        inputs.taxonomy,
    )?;

    let weights: Vec<(LocalityWeights, Option<TrainingSummary>)> = match &inputs.weights {
        WeightSource::Train { sample, hyper } => {
            let cache = cache_neighbors(
                inputs.store,
                inputs.model,
                sample,
                inputs.k,
                inputs.distance,
            )?;
            spec.rows
                .par_iter()
                .map(|&f| {
                    if f.is_empty() {
                        return Ok((identity.clone(), None));
                    }
                    let out = LocalityTrainOutcome::fit(&cache, f, *hyper)?;
                    let summary = TrainingSummary {
                        initial_loss: out.initial_loss,
                        final_loss: out.trace.last().copied().unwrap_or(out.initial_loss),
                        epochs: out.trace.len(),
                        skipped_samples: out.skipped,
                    };
                    Ok((out.weights, Some(summary)))
                })
                .collect::<Result<_>>()?
        }
        WeightSource::Provided(list) => spec
            .rows
            .iter()
            .map(|&f| {
                if f.is_empty() {
                    return Ok((identity.clone(), None));
                }
                list.iter()
                    .find(|w| w.features() == f)
                    .map(|w| (w.clone(), None))
                    .ok_or_else(|| {
                        Error::MissingArtifact(format!("no weights for feature set `{f}`"))
                    })
            })
            .collect::<Result<_>>()?,
    };

    let valid = cache_positions(&base, inputs.valid)?;
    let test = cache_positions(&base, inputs.test)?;

    let mut rows = Vec::with_capacity(spec.rows.len());
    for (&features, (w, training)) in spec.rows.iter().zip(weights) {
        let (valid_probs, test_probs) = if w.restricts_style() {
            // filtered retrieval differs from the shared cache
            let model = KnnLm::new(
                base_config.clone(),
                inputs.store,
                inputs.ivf,
                inputs.model,
                &w,
                inputs.taxonomy,
            )?;
            (
                document_target_probs(&model, inputs.valid)?,
                document_target_probs(&model, inputs.test)?,
            )
        } else {
            (
                rescore(&valid, &w, inputs.distance)?,
                rescore(&test, &w, inputs.distance)?,
            )
        };
        let search = lambda_curve(&valid_probs, inputs.lambda_grid)?;
        let test_result = perplexity_at(&test_probs, search.best_lambda)?;
        rows.push(AblationRow {
            features,
            scales: (0..w.scales().len())
                .map(|c| (w.bit_pattern(c), w.scale(c)))
                .collect(),
            lambda: search.best_lambda,
            lambda_curve: search.curve,
            valid_perplexity: search.best_perplexity,
            test: test_result,
            delta_vs_none: None,
            training,
        });
    }
    if let Some(none) = rows
        .iter()
        .find(|r| r.features.is_empty())
        .map(|r| r.test.perplexity)
    {
        for r in &mut rows {
            r.delta_vs_none = Some(r.test.perplexity - none);
        }
    }
    Ok(rows)
}
