//! Reference language model: context encoder and next-token distribution.
//!
//! The model embeds the last `N` context tokens, takes a position-weighted
//! mean of the embeddings, and applies one tanh hidden layer:
//!
//! ```text
//! x = (1/N) Σ_j p_j · E[c_j]
//! h = tanh(W1 · x + b1)          <- the context key
//! p = softmax(W2 · h + b2)       <- next-token distribution
//! ```
//!
//! Anything implementing [`LanguageModel`] can stand in for it.

mod checkpoint;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::math::softmax_in_place;

pub use train::{
    document_nll, loss_and_gradient, perplexity, train_lm, EpochLoss, Example, TrainOutcome,
    EARLY_STOP_PATIENCE,
};

/// Encoder plus next-token distribution, as consumed by the datastore and the
/// interpolated model.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Dimension of the keys returned by [`LanguageModel::encode`].
    fn key_dim(&self) -> usize;

    fn encode(&self, context: &[u32]) -> Result<Vec<f64>>;

    fn lm_distribution(&self, context: &[u32]) -> Result<Vec<f64>>;

    /// Key and distribution for one context.
    fn forward(&self, context: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.encode(context)?, self.lm_distribution(context)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    /// Number of trailing context tokens the encoder sees.
    pub context_window: usize,
    pub embedding_dim: usize,
    /// Key dimension of the datastore.
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl LmConfig {
    /// Desk-scale defaults. The reference transformer this stands in for
    /// used a 1024-wide hidden state with 16 layers and 8 heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            context_window: 8,
            embedding_dim: 32,
            hidden_dim: 64,
            vocab_size,
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("context_window", self.context_window),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("vocab_size", self.vocab_size),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable weights, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParameters {
    pub config: LmConfig,
    /// vocab_size × embedding_dim
    pub embeddings: Vec<f64>,
    /// one weight per context slot, oldest first
    pub position_weights: Vec<f64>,
    /// hidden_dim × embedding_dim
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// vocab_size × hidden_dim
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

pub(crate) struct Activations {
    pub window: Vec<u32>,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LmParameters {
    pub fn init(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, m, d, n) = (
            config.vocab_size,
            config.embedding_dim,
            config.hidden_dim,
            config.context_window,
        );
        let mut uniform = |len: usize, scale: f64| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let embeddings = uniform(v * m, 1.0);
        let w1 = uniform(d * m, 1.0 / (m as f64).sqrt());
        let w2 = uniform(v * d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            embeddings,
            position_weights: vec![1.0; n],
            w1,
            b1: vec![0.0; d],
            w2,
            b2: vec![0.0; v],
            config,
        })
    }

    /// Parameter groups in a fixed order, for optimizers and gradient checks.
    pub fn groups(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("embeddings", &self.embeddings),
            ("position_weights", &self.position_weights),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 6] {
        [
            ("embeddings", &mut self.embeddings),
            ("position_weights", &mut self.position_weights),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.groups()
            .iter()
            .all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    /// The last `N` tokens of `context`, left-padded with the
    /// beginning-of-sequence id. An empty context is all padding.
    pub(crate) fn window(&self, context: &[u32]) -> Result<Vec<u32>> {
        let n = self.config.context_window;
        let v = self.config.vocab_size;
        if let Some(&id) = context.iter().find(|&&t| t as usize >= v) {
            return Err(Error::TokenOutOfRange { id, vocab_size: v });
        }
        let tail = &context[context.len().saturating_sub(n)..];
        let mut w = vec![Vocabulary::BOS; n - tail.len()];
        w.extend_from_slice(tail);
        Ok(w)
    }

    pub(crate) fn hidden(&self, window: &[u32]) -> (Vec<f64>, Vec<f64>) {
        let (m, d) = (self.config.embedding_dim, self.config.hidden_dim);
        let n = window.len() as f64;
        let mut x = vec![0.0; m];
        for (&tok, &p) in window.iter().zip(&self.position_weights) {
            let row = &self.embeddings[tok as usize * m..(tok as usize + 1) * m];
            for (xi, e) in x.iter_mut().zip(row) {
                *xi += p * e / n;
            }
        }
        let h = (0..d)
            .map(|i| {
                let row = &self.w1[i * m..(i + 1) * m];
                let z: f64 = row.iter().zip(&x).map(|(w, xv)| w * xv).sum::<f64>() + self.b1[i];
                z.tanh()
            })
            .collect();
        (x, h)
    }

    pub(crate) fn output(&self, h: &[f64]) -> Vec<f64> {
        let d = self.config.hidden_dim;
        let mut logits: Vec<f64> = (0..self.config.vocab_size)
            .map(|k| {
                let row = &self.w2[k * d..(k + 1) * d];
                row.iter().zip(h).map(|(w, hv)| w * hv).sum::<f64>() + self.b2[k]
            })
            .collect();
        softmax_in_place(&mut logits);
        logits
    }

    pub(crate) fn activations(&self, context: &[u32]) -> Result<Activations> {
        let window = self.window(context)?;
        let (x, h) = self.hidden(&window);
        let probs = self.output(&h);
        Ok(Activations {
            window,
            x,
            h,
            probs,
        })
    }
}

impl LanguageModel for LmParameters {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn key_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn encode(&self, context: &[u32]) -> Result<Vec<f64>> {
        let window = self.window(context)?;
        Ok(self.hidden(&window).1)
    }

    fn lm_distribution(&self, context: &[u32]) -> Result<Vec<f64>> {
        Ok(self.activations(context)?.probs)
    }

    fn forward(&self, context: &[u32]) -> Result<(Vec<f64>, Vec<f64>)> {
        let window = self.window(context)?;
        let (_, h) = self.hidden(&window);
        let probs = self.output(&h);
        Ok((h, probs))
    }
}
