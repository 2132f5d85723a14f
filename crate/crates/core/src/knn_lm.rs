//! Interpolated model: `p = λ · p_kNN + (1 − λ) · p_LM`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::base_lm::LanguageModel;
use crate::corpus::{LocalityDescriptor, StyleTaxonomy, Vocabulary};
use crate::datastore::{to_query, Datastore, DistanceKind, IvfIndex, Neighbor};
use crate::error::{Error, Result};
use crate::locality::{knn_locality_distribution, LocalityWeights};
use crate::math::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrieval {
    Exact,
    Ivf { n_probe: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnLmConfig {
    /// Neighbors per query. Desk default 64; the reference setup used 1024.
    pub k: usize,
    pub lambda: f64,
    pub distance: DistanceKind,
    pub retrieval: Retrieval,
    /// Retrieve only from this style, as a separate per-style datastore
    /// would.
    pub style_restriction: Option<u16>,
}

impl Default for KnnLmConfig {
    fn default() -> Self {
        Self {
            k: 64,
            lambda: 0.25,
            distance: DistanceKind::SquaredL2,
            retrieval: Retrieval::Exact,
            style_restriction: None,
        }
    }
}

impl KnnLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Result of one prediction step.
#[derive(Debug, Clone)]
pub struct Step {
    pub distribution: Vec<f64>,
    /// Neighbors as retrieved, before any style mask is applied.
    pub neighbors: Vec<Neighbor>,
    /// Neighbor distribution, `None` when no neighbor survived and the step
    /// fell back to the model distribution.
    pub knn: Option<Vec<f64>>,
    pub lm: Vec<f64>,
}

impl Step {
    pub fn fell_back(&self) -> bool {
        self.knn.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceNll {
    pub nll: f64,
    pub tokens: usize,
    pub fallbacks: usize,
}

/// Per-position target probabilities under each component, enough to score
/// any λ without retrieving again.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetProbs {
    pub lm: f64,
    pub knn: Option<f64>,
}

impl TargetProbs {
    /// Same arithmetic as the full mixture, so results are bit-identical.
    pub fn mixed(&self, lambda: f64) -> f64 {
        match self.knn {
            Some(k) => lambda * k + (1.0 - lambda) * self.lm,
            None => self.lm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    /// `top_k_tokens = 0` keeps the whole vocabulary.
    Sample {
        temperature: f64,
        top_k_tokens: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: Vec<u32>,
    pub target: LocalityDescriptor,
    pub max_new_tokens: usize,
    pub decode: Decode,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub token: u32,
    /// Fraction of retrieved neighbors whose style is the target style.
    pub same_style_fraction: f64,
    /// Whether some retained neighbor carries the emitted token.
    pub supported: bool,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepDiagnostics>,
}

/// One line of the generation JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub prompt: String,
    pub continuation: String,
    pub target_style: String,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl GenerationRecord {
    pub fn new(
        request: &GenerationRequest,
        generation: &Generation,
        vocab: &Vocabulary,
        taxonomy: &StyleTaxonomy,
    ) -> Self {
        Self {
            prompt: vocab.detokenize(&request.prompt),
            continuation: vocab.detokenize(&generation.tokens),
            target_style: taxonomy.styles()[request.target.style as usize].clone(),
            diagnostics: generation.steps.clone(),
        }
    }
}

/// Frozen model, datastore and weights. All methods take `&self` and are
/// safe to call concurrently.
pub struct KnnLm<'a> {
    pub config: KnnLmConfig,
    store: &'a Datastore,
    ivf: Option<&'a IvfIndex>,
    model: &'a dyn LanguageModel,
    weights: &'a LocalityWeights,
    taxonomy: &'a StyleTaxonomy,
}

impl<'a> KnnLm<'a> {
    pub fn new(
        config: KnnLmConfig,
        store: &'a Datastore,
        ivf: Option<&'a IvfIndex>,
        model: &'a dyn LanguageModel,
        weights: &'a LocalityWeights,
        taxonomy: &'a StyleTaxonomy,
    ) -> Result<Self> {
        config.validate()?;
        store.ensure_taxonomy(taxonomy)?;
        if store.key_dim() != model.key_dim() {
            return Err(Error::DimensionMismatch {
                expected: store.key_dim(),
                got: model.key_dim(),
            });
        }
        if let Some(&bad) = store
            .values()
            .iter()
            .find(|&&v| v as usize >= model.vocab_size())
        {
            return Err(Error::VocabMismatch(format!(
                "datastore token {bad} outside model vocabulary of {}",
                model.vocab_size()
            )));
        }
        if let Retrieval::Ivf { .. } = config.retrieval {
            if ivf.is_none() {
                return Err(Error::MissingArtifact(
                    "IVF retrieval without an index".into(),
                ));
            }
        }
        if let Some(s) = config.style_restriction {
            if s as usize >= taxonomy.styles().len() {
                return Err(Error::Config(format!("style restriction {s} out of range")));
            }
        }
        Ok(Self {
            config,
            store,
            ivf,
            model,
            weights,
            taxonomy,
        })
    }

    pub fn model(&self) -> &dyn LanguageModel {
        self.model
    }

    pub fn weights(&self) -> &LocalityWeights {
        self.weights
    }

    pub fn store(&self) -> &Datastore {
        self.store
    }

    pub fn taxonomy(&self) -> &StyleTaxonomy {
        self.taxonomy
    }

    pub fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn restriction(&self, query: &LocalityDescriptor) -> Option<u16> {
        self.config
            .style_restriction
            .or(self.weights.restricts_style().then_some(query.style))
    }

    fn retrieve(&self, key: &[f64], query: &LocalityDescriptor) -> Result<Vec<Neighbor>> {
        let q = to_query(key);
        let k = self.config.k;
        match (self.config.retrieval, self.restriction(query)) {
            (Retrieval::Exact, None) => self.store.knn_exact(&q, k),
            (Retrieval::Exact, Some(s)) => self.store.knn_exact_style(&q, k, s),
            (Retrieval::Ivf { n_probe }, style) => {
                let ivf = self.ivf.expect("checked at construction");
                match style {
                    None => ivf.knn_approx(self.store, &q, k, n_probe),
                    Some(s) => ivf.knn_approx_style(self.store, &q, k, n_probe, s),
                }
            }
        }
    }

    /// Retrieval, reweighting and interpolation for one context.
    pub fn step(&self, context: &[u32], query: &LocalityDescriptor) -> Result<Step> {
        self.taxonomy.validate(query)?;
        let (key, lm) = self.model.forward(context)?;
        let neighbors = self.retrieve(&key, query)?;
        let knn = match knn_locality_distribution(
            &neighbors,
            query,
            self.weights,
            self.config.distance,
            lm.len(),
        ) {
            Ok(d) => Some(d),
            Err(Error::EmptyNeighborSet) => None,
            Err(e) => return Err(e),
        };
        let lambda = self.config.lambda;
        let distribution = match &knn {
            Some(k) => k
                .iter()
                .zip(&lm)
                .map(|(pk, pl)| lambda * pk + (1.0 - lambda) * pl)
                .collect(),
            None => lm.clone(),
        };
        Ok(Step {
            distribution,
            neighbors,
            knn,
            lm,
        })
    }

    pub fn combined_distribution(
        &self,
        context: &[u32],
        query: &LocalityDescriptor,
    ) -> Result<Vec<f64>> {
        Ok(self.step(context, query)?.distribution)
    }

    /// Target probabilities under both components at every position.
    pub fn target_probs(
        &self,
        tokens: &[u32],
        query: &LocalityDescriptor,
    ) -> Result<Vec<TargetProbs>> {
        (0..tokens.len())
            .map(|i| {
                let step = self.step(&tokens[..i], query)?;
                let t = tokens[i] as usize;
                if t >= step.lm.len() {
                    return Err(Error::TokenOutOfRange {
                        id: tokens[i],
                        vocab_size: step.lm.len(),
                    });
                }
                Ok(TargetProbs {
                    lm: step.lm[t],
                    knn: step.knn.map(|k| k[t]),
                })
            })
            .collect()
    }

    /// Summed `−ln p(target)` over every position of `tokens`.
    pub fn sequence_nll(&self, tokens: &[u32], query: &LocalityDescriptor) -> Result<SequenceNll> {
        let probs = self.target_probs(tokens, query)?;
        Ok(SequenceNll {
            nll: probs
                .iter()
                .map(|p| -p.mixed(self.config.lambda).ln())
                .sum(),
            tokens: probs.len(),
            fallbacks: probs.iter().filter(|p| p.knn.is_none()).count(),
        })
    }

    /// Autoregressive decoding with `request.target` as the query locality.
    /// Stops after the end-of-sequence token or `max_new_tokens` tokens.
    pub fn generate(&self, request: &GenerationRequest) -> Result<Generation> {
        if request.max_new_tokens < 1 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if let Decode::Sample { temperature, .. } = request.decode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config("temperature must be positive".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let mut context = request.prompt.clone();
        let mut out = Generation {
            tokens: Vec::new(),
            steps: Vec::new(),
        };
        for _ in 0..request.max_new_tokens {
            let step = self.step(&context, &request.target)?;
            let token = match request.decode {
                Decode::Greedy => argmax(&step.distribution) as u32,
                Decode::Sample {
                    temperature,
                    top_k_tokens,
                } => sample_token(&step.distribution, temperature, top_k_tokens, &mut rng),
            };
            let same = step
                .neighbors
                .iter()
                .filter(|n| n.locality.style == request.target.style)
                .count();
            out.steps.push(StepDiagnostics {
                token,
                same_style_fraction: if step.neighbors.is_empty() {
                    0.0
                } else {
                    same as f64 / step.neighbors.len() as f64
                },
                supported: step.knn.as_ref().is_some_and(|k| k[token as usize] > 0.0),
                fell_back: step.fell_back(),
            });
            out.tokens.push(token);
            context.push(token);
            if token == Vocabulary::EOS {
                break;
            }
        }
        Ok(out)
    }
}

fn sample_token(probs: &[f64], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> u32 {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    if top_k > 0 {
        order.truncate(top_k);
    }
    let logs: Vec<f64> = order.iter().map(|&i| probs[i].ln() / temperature).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let pick = WeightedIndex::new(&weights).expect("at least one positive weight");
    order[pick.sample(rng)] as u32
}
