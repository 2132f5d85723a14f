//! Deterministic styled corpus generator used as a stand-in for real style
//! datasets in tests and smoke runs.
//!
//! Every style draws words from three pools: a common pool shared by all
//! styles, a family pool shared by the styles of one category, and a pool of
//! its own. Each style also has a private successor map, so after a given
//! word the style tends to continue in its own way. Styles therefore overlap
//! in vocabulary but remain statistically distinguishable, and styles of the
//! same category are closer to each other than to styles of other
//! categories.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::records::{hashed_split, RawRecord};
use super::taxonomy::StyleTaxonomy;

const COMMON_WORDS: usize = 20;
const FAMILY_WORDS: usize = 12;
const STYLE_WORDS: usize = 12;
const COMMON_MASS: f64 = 0.40;
const FAMILY_MASS: f64 = 0.25;
const STYLE_MASS: f64 = 0.35;
const SUCCESSOR_PROB: f64 = 0.5;
const MIN_WORDS: usize = 6;
const MAX_WORDS: usize = 14;

struct StyleModel {
    words: Vec<String>,
    unigram: WeightedIndex<f64>,
    successor: HashMap<String, usize>,
}

fn zipf_weights(n: usize, mass: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let raw: Vec<f64> = ranks.iter().map(|&r| 1.0 / (r as f64 + 1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| mass * w / total).collect()
}

fn style_models(taxonomy: &StyleTaxonomy, rng: &mut ChaCha8Rng) -> Vec<StyleModel> {
    let common: Vec<String> = (0..COMMON_WORDS).map(|j| format!("w{j}")).collect();
    let every_word: Vec<String> = {
        let mut all = common.clone();
        for c in taxonomy.categories() {
            all.extend((0..FAMILY_WORDS).map(|j| format!("{c}-{j}")));
        }
        for s in taxonomy.styles() {
            all.extend((0..STYLE_WORDS).map(|j| format!("{s}-{j}")));
        }
        all
    };
    taxonomy
        .styles()
        .iter()
        .enumerate()
        .map(|(sid, style)| {
            let cat = &taxonomy.categories()[taxonomy.category_of(sid as u16) as usize];
            let mut words = common.clone();
            words.extend((0..FAMILY_WORDS).map(|j| format!("{cat}-{j}")));
            words.extend((0..STYLE_WORDS).map(|j| format!("{style}-{j}")));
            let mut weights = zipf_weights(COMMON_WORDS, COMMON_MASS, rng);
            weights.extend(zipf_weights(FAMILY_WORDS, FAMILY_MASS, rng));
            weights.extend(zipf_weights(STYLE_WORDS, STYLE_MASS, rng));
            // successors land in the family or style pools
            let successor = every_word
                .iter()
                .map(|w| (w.clone(), rng.gen_range(COMMON_WORDS..words.len())))
                .collect();
            StyleModel {
                words,
                unigram: WeightedIndex::new(&weights).expect("positive weights"),
                successor,
            }
        })
        .collect()
}

/// Generates `docs_per_style` records for every style of `taxonomy`.
///
/// Records are interleaved across styles, style `i` uses source
/// `i % sources`, and splits come from [`hashed_split`] of the record index.
/// The output depends only on the taxonomy, the count and the seed.
pub fn generate_synthetic_corpus(
    taxonomy: &StyleTaxonomy,
    docs_per_style: usize,
    seed: u64,
) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models = style_models(taxonomy, &mut rng);
    let n_sources = taxonomy.sources().len();
    let mut out = Vec::with_capacity(docs_per_style * models.len());
    for _ in 0..docs_per_style {
        for (sid, model) in models.iter().enumerate() {
            let len = rng.gen_range(MIN_WORDS..=MAX_WORDS);
            let mut words: Vec<&str> = Vec::with_capacity(len);
            for _ in 0..len {
                let next = match words.last() {
                    Some(prev) if rng.gen_bool(SUCCESSOR_PROB) => model.successor[*prev],
                    _ => model.unigram.sample(&mut rng),
                };
                words.push(&model.words[next]);
            }
            let text = format!("{}.", words.join(" "));
            let locality = taxonomy
                .descriptor(sid as u16, (sid % n_sources) as u16)
                .expect("ids in range");
            out.push(RawRecord {
                text,
                locality,
                split: hashed_split(out.len()),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::split_tokens;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn deterministic() {
        let t = StyleTaxonomy::synthetic(2, 2, 2);
        assert_eq!(
            generate_synthetic_corpus(&t, 20, 7),
            generate_synthetic_corpus(&t, 20, 7)
        );
        assert_ne!(
            generate_synthetic_corpus(&t, 20, 7),
            generate_synthetic_corpus(&t, 20, 8)
        );
    }

    #[test]
    fn one_doc_per_style() {
        let t = StyleTaxonomy::synthetic(2, 1, 2);
        let recs = generate_synthetic_corpus(&t, 1, 0);
        assert_eq!(recs.len(), 2);
        assert_ne!(recs[0].locality.style, recs[1].locality.style);
        assert_eq!(recs[1].locality.source, 1);
    }

    /// Chi-squared test of homogeneity on the unigram counts of two styles.
    #[test]
    fn styles_are_statistically_distinct() {
        let t = StyleTaxonomy::synthetic(2, 1, 2);
        let recs = generate_synthetic_corpus(&t, 100, 3);
        let mut counts: HashMap<String, [f64; 2]> = HashMap::new();
        for r in &recs {
            for tok in split_tokens(&r.text) {
                counts.entry(tok).or_default()[r.locality.style as usize] += 1.0;
            }
        }
        let totals = counts
            .values()
            .fold([0.0, 0.0], |acc, c| [acc[0] + c[0], acc[1] + c[1]]);
        let grand = totals[0] + totals[1];
        let mut stat = 0.0;
        for c in counts.values() {
            let row = c[0] + c[1];
            for s in 0..2 {
                let expected = row * totals[s] / grand;
                stat += (c[s] - expected).powi(2) / expected;
            }
        }
        let dof = (counts.len() - 1) as f64;
        let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
        assert!(p < 0.01, "p = {p}");
        // overlap: the common pool is used by both styles
        assert!(counts.values().filter(|c| c[0] > 0.0 && c[1] > 0.0).count() >= COMMON_WORDS);
    }
}
