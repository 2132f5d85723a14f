use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_lm::LanguageModel;
use crate::corpus::{Document, StyleTaxonomy};
use crate::error::{Error, Result};

/// Pairwise similarity of per-style mean keys, `(1 + cos) / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSimilarityMatrix {
    pub styles: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl StyleSimilarityMatrix {
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a][b]
    }

    /// Header row of style names, then one row per style.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("style");
        for s in &self.styles {
            out.push(',');
            out.push_str(s);
        }
        out.push('\n');
        for (s, row) in self.styles.iter().zip(&self.values) {
            out.push_str(s);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Encodes every position of every document, averages the keys per style
/// and compares the averages.
pub fn style_similarity_heatmap(
    model: &dyn LanguageModel,
    docs: &[Document],
    taxonomy: &StyleTaxonomy,
) -> Result<StyleSimilarityMatrix> {
    let n = taxonomy.styles().len();
    let d = model.key_dim();
    let per_doc: Vec<(u16, Vec<f64>, usize)> = docs
        .par_iter()
        .map(|doc| {
            taxonomy.validate(&doc.locality)?;
            let mut sum = vec![0.0; d];
            for i in 0..doc.tokens.len() {
                for (s, k) in sum.iter_mut().zip(model.encode(&doc.tokens[..i])?) {
                    *s += k;
                }
            }
            Ok((doc.locality.style, sum, doc.tokens.len()))
        })
        .collect::<Result<_>>()?;

    let mut sums = vec![vec![0.0; d]; n];
    let mut counts = vec![0usize; n];
    for (style, sum, count) in per_doc {
        counts[style as usize] += count;
        for (a, b) in sums[style as usize].iter_mut().zip(sum) {
            *a += b;
        }
    }
    let mut means = Vec::with_capacity(n);
    for (s, (sum, count)) in sums.into_iter().zip(&counts).enumerate() {
        let name = &taxonomy.styles()[s];
        if *count == 0 {
            return Err(Error::Data(format!("style `{name}` has no documents")));
        }
        let mean: Vec<f64> = sum.into_iter().map(|x| x / *count as f64).collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric(format!(
                "style `{name}` has a zero mean key"
            )));
        }
        means.push(mean.into_iter().map(|x| x / norm).collect::<Vec<_>>());
    }

    let mut values = vec![vec![1.0; n]; n];
    for a in 0..n {
        for b in a + 1..n {
            let cos: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| x * y).sum();
            let sim = (1.0 + cos.clamp(-1.0, 1.0)) / 2.0;
            values[a][b] = sim;
            values[b][a] = sim;
        }
    }
    Ok(StyleSimilarityMatrix {
        styles: taxonomy.styles().to_vec(),
        values,
    })
}
