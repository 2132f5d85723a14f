use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::float;
use super::style_match_score;
use crate::base_lm::LanguageModel;
use crate::corpus::{Document, LocalityDescriptor, Vocabulary};
use crate::error::{Error, Result};
use crate::knn_lm::{Decode, GenerationRequest, KnnLm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub target: LocalityDescriptor,
}

/// First half of each of up to `n` randomly chosen documents (end token
/// excluded), targeting the document's own locality.
pub fn prompts_from_documents(docs: &[Document], n: usize, seed: u64) -> Vec<Prompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, docs.len(), n.min(docs.len())).into_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| {
            let doc = &docs[i];
            let body = match doc.tokens.last() {
                Some(&Vocabulary::EOS) => &doc.tokens[..doc.tokens.len() - 1],
                _ => &doc.tokens[..],
            };
            Prompt {
                tokens: body[..body.len().div_ceil(2)].to_vec(),
                target: doc.locality,
            }
        })
        .collect()
}

/// One line of the comparison JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub prompt: String,
    pub target_style: String,
    pub continuation_a: String,
    pub continuation_b: String,
    pub style_match_a: f64,
    pub style_match_b: f64,
    /// Mean per-token NLL of the continuation under the reference model.
    #[serde(with = "float")]
    pub nll_a: f64,
    #[serde(with = "float")]
    pub nll_b: f64,
}

/// Fractions of prompts where A beats, ties or loses to B. Higher style
/// match wins; lower NLL wins.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub prompts: usize,
    pub style_win_a: f64,
    pub style_tie: f64,
    pub style_win_b: f64,
    pub nll_win_a: f64,
    pub nll_tie: f64,
    pub nll_win_b: f64,
    /// Mean of `style_match_a − style_match_b`.
    pub mean_style_delta: f64,
    /// Mean of `nll_a − nll_b`.
    #[serde(with = "float")]
    pub mean_nll_delta: f64,
}

fn continuation_nll(reference: &dyn LanguageModel, prompt: &[u32], cont: &[u32]) -> Result<f64> {
    let mut ctx = prompt.to_vec();
    let mut nll = 0.0;
    for &t in cont {
        nll -= reference.lm_distribution(&ctx)?[t as usize].ln();
        ctx.push(t);
    }
    Ok(nll / cont.len() as f64)
}

/// Continues every prompt with both models (same seed per prompt) and
/// scores the continuations on style match and on NLL under `reference`.
#[allow(clippy::too_many_arguments)]
pub fn compare_models(
    a: &KnnLm,
    b: &KnnLm,
    reference: &dyn LanguageModel,
    vocab: &Vocabulary,
    prompts: &[Prompt],
    max_new_tokens: usize,
    decode: Decode,
    seed: u64,
) -> Result<(Vec<ComparisonRow>, ComparisonSummary)> {
    for (name, size) in [
        ("model A", a.vocab_size()),
        ("model B", b.vocab_size()),
        ("reference model", reference.vocab_size()),
    ] {
        if size != vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "{name} has {size} tokens, vocabulary has {}",
                vocab.len()
            )));
        }
    }
    let taxonomy = a.taxonomy();
    let rows: Vec<ComparisonRow> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let request = GenerationRequest {
                prompt: p.tokens.clone(),
                target: p.target,
                max_new_tokens,
                decode,
                seed: seed.wrapping_add(i as u64),
            };
            let ga = a.generate(&request)?;
            let gb = b.generate(&request)?;
            Ok(ComparisonRow {
                prompt: vocab.detokenize(&p.tokens),
                target_style: taxonomy.styles()[p.target.style as usize].clone(),
                continuation_a: vocab.detokenize(&ga.tokens),
                continuation_b: vocab.detokenize(&gb.tokens),
                style_match_a: style_match_score(&ga.steps)?,
                style_match_b: style_match_score(&gb.steps)?,
                nll_a: continuation_nll(reference, &p.tokens, &ga.tokens)?,
                nll_b: continuation_nll(reference, &p.tokens, &gb.tokens)?,
            })
        })
        .collect::<Result<_>>()?;

    let mut s = ComparisonSummary {
        prompts: rows.len(),
        ..Default::default()
    };
    if rows.is_empty() {
        return Ok((rows, s));
    }
    let n = rows.len() as f64;
    for r in &rows {
        match r.style_match_a.total_cmp(&r.style_match_b) {
            std::cmp::Ordering::Greater => s.style_win_a += 1.0,
            std::cmp::Ordering::Equal => s.style_tie += 1.0,
            std::cmp::Ordering::Less => s.style_win_b += 1.0,
        }
        match r.nll_a.total_cmp(&r.nll_b) {
            std::cmp::Ordering::Less => s.nll_win_a += 1.0,
            std::cmp::Ordering::Equal => s.nll_tie += 1.0,
            std::cmp::Ordering::Greater => s.nll_win_b += 1.0,
        }
        s.mean_style_delta += r.style_match_a - r.style_match_b;
        s.mean_nll_delta += r.nll_a - r.nll_b;
    }
    for v in [
        &mut s.style_win_a,
        &mut s.style_tie,
        &mut s.style_win_b,
        &mut s.nll_win_a,
        &mut s.nll_tie,
        &mut s.nll_win_b,
        &mut s.mean_style_delta,
        &mut s.mean_nll_delta,
    ] {
        *v /= n;
    }
    Ok((rows, s))
}
