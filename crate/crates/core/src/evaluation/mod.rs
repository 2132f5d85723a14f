//! Experiment harness: perplexity, λ search, feature-set ablation, style
//! similarity and side-by-side generation comparison.

mod ablation;
mod compare;
mod heatmap;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::knn_lm::{KnnLm, StepDiagnostics, TargetProbs};

pub use ablation::{run_ablation, AblationInputs, AblationSpec, WeightSource};
pub use compare::{
    compare_models, prompts_from_documents, ComparisonRow, ComparisonSummary, Prompt,
};
pub use heatmap::{style_similarity_heatmap, StyleSimilarityMatrix};
pub use report::{
    AblationRow, EvalReport, PerplexityEntry, TrainingSummary, REPORT_SCHEMA_VERSION,
};

/// `0, 0.05, …, 1`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    #[serde(with = "report::float")]
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub best_lambda: f64,
    #[serde(with = "report::float")]
    pub best_perplexity: f64,
    pub curve: Vec<LambdaPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    #[serde(with = "report::float")]
    pub perplexity: f64,
    #[serde(with = "report::float")]
    pub nll: f64,
    pub tokens: usize,
    /// Positions where no neighbor survived and the model distribution was
    /// used alone.
    pub fallbacks: usize,
}

/// Target probabilities per document, in document order.
pub(crate) fn document_target_probs(
    model: &KnnLm,
    docs: &[Document],
) -> Result<Vec<Vec<TargetProbs>>> {
    docs.par_iter()
        .map(|d| model.target_probs(&d.tokens, &d.locality))
        .collect()
}

pub(crate) fn perplexity_at(probs: &[Vec<TargetProbs>], lambda: f64) -> Result<PerplexityResult> {
    let mut nll = 0.0;
    let mut tokens = 0;
    let mut fallbacks = 0;
    for doc in probs {
        let mut doc_nll = 0.0;
        for p in doc {
            doc_nll -= p.mixed(lambda).ln();
            fallbacks += usize::from(p.knn.is_none());
        }
        nll += doc_nll;
        tokens += doc.len();
    }
    if tokens == 0 {
        return Err(Error::Data("no evaluation tokens".into()));
    }
    Ok(PerplexityResult {
        perplexity: (nll / tokens as f64).exp(),
        nll,
        tokens,
        fallbacks,
    })
}

/// Perplexity of `docs` under the interpolated model at its configured λ.
pub fn evaluate_perplexity(model: &KnnLm, docs: &[Document]) -> Result<PerplexityResult> {
    perplexity_at(&document_target_probs(model, docs)?, model.config.lambda)
}

pub(crate) fn lambda_curve(probs: &[Vec<TargetProbs>], grid: &[f64]) -> Result<LambdaSearch> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Config(format!("lambda {bad} outside [0, 1]")));
    }
    let curve = grid
        .iter()
        .map(|&lambda| {
            Ok(LambdaPoint {
                lambda,
                perplexity: perplexity_at(probs, lambda)?.perplexity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = curve
        .iter()
        .copied()
        .reduce(|best, p| {
            let better = p.perplexity < best.perplexity
                || (p.perplexity == best.perplexity && p.lambda < best.lambda);
            if better {
                p
            } else {
                best
            }
        })
        .expect("non-empty grid");
    Ok(LambdaSearch {
        best_lambda: best.lambda,
        best_perplexity: best.perplexity,
        curve,
    })
}

/// Validation perplexity at every grid point; the argmin wins, ties going
/// to the smaller λ. Retrieval runs once; the configured λ of `model` is
/// ignored.
pub fn grid_search_lambda(model: &KnnLm, docs: &[Document], grid: &[f64]) -> Result<LambdaSearch> {
    lambda_curve(&document_target_probs(model, docs)?, grid)
}

/// Mean over steps of the fraction of retrieved neighbors sharing the
/// target style. Values are summed in sorted order, so the score does not
/// depend on step order.
pub fn style_match_score(steps: &[StepDiagnostics]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::Data("style match of an empty generation".into()));
    }
    let mut v: Vec<f64> = steps.iter().map(|s| s.same_style_fraction).collect();
    v.sort_by(f64::total_cmp);
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}
