use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LmConfig, LmParameters};
use crate::corpus::Document;
use crate::error::{Error, Result};

/// Epochs without validation improvement before training stops.
pub const EARLY_STOP_PATIENCE: usize = 5;

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub context: &'a [u32],
    pub target: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean cross-entropy over all training positions after the epoch.
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: LmParameters,
    pub trace: Vec<EpochLoss>,
    /// Epoch whose parameters were returned (None when no epoch ran).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn zeros_like(p: &LmParameters) -> LmParameters {
    let mut g = p.clone();
    for (_, group) in g.groups_mut() {
        group.iter_mut().for_each(|x| *x = 0.0);
    }
    g
}

/// Mean cross-entropy of `examples` and its gradient with respect to every
/// parameter, returned in the same layout as the parameters.
pub fn loss_and_gradient(
    params: &LmParameters,
    examples: &[Example<'_>],
) -> Result<(f64, LmParameters)> {
    let cfg = &params.config;
    let (m, d, v) = (cfg.embedding_dim, cfg.hidden_dim, cfg.vocab_size);
    let mut grad = zeros_like(params);
    let mut loss = 0.0;
    let mut dz = vec![0.0; v];
    let mut dh = vec![0.0; d];
    let mut dx = vec![0.0; m];
    for ex in examples {
        if ex.target as usize >= v {
            return Err(Error::TokenOutOfRange {
                id: ex.target,
                vocab_size: v,
            });
        }
        let act = params.activations(ex.context)?;
        loss -= act.probs[ex.target as usize].ln();

        dz.copy_from_slice(&act.probs);
        dz[ex.target as usize] -= 1.0;

        dh.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..v {
            grad.b2[k] += dz[k];
            let row = &params.w2[k * d..(k + 1) * d];
            let grow = &mut grad.w2[k * d..(k + 1) * d];
            for j in 0..d {
                grow[j] += dz[k] * act.h[j];
                dh[j] += dz[k] * row[j];
            }
        }

        dx.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..d {
            let da = dh[i] * (1.0 - act.h[i] * act.h[i]);
            grad.b1[i] += da;
            let row = &params.w1[i * m..(i + 1) * m];
            let grow = &mut grad.w1[i * m..(i + 1) * m];
            for j in 0..m {
                grow[j] += da * act.x[j];
                dx[j] += da * row[j];
            }
        }

        let n = act.window.len() as f64;
        for (slot, &tok) in act.window.iter().enumerate() {
            let t = tok as usize;
            let erow = &params.embeddings[t * m..(t + 1) * m];
            grad.position_weights[slot] +=
                erow.iter().zip(&dx).map(|(e, g)| e * g).sum::<f64>() / n;
            let scale = params.position_weights[slot] / n;
            let grow = &mut grad.embeddings[t * m..(t + 1) * m];
            for j in 0..m {
                grow[j] += scale * dx[j];
            }
        }
    }
    let count = examples.len().max(1) as f64;
    for (_, group) in grad.groups_mut() {
        group.iter_mut().for_each(|x| *x /= count);
    }
    Ok((loss / count, grad))
}

/// Summed negative log-likelihood (natural log) and number of scored
/// positions for one document.
pub fn document_nll(params: &LmParameters, doc: &Document) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    for i in 0..doc.tokens.len() {
        let probs = params.activations(&doc.tokens[..i])?.probs;
        let t = doc.tokens[i] as usize;
        let p = probs.get(t).copied().ok_or(Error::TokenOutOfRange {
            id: doc.tokens[i],
            vocab_size: probs.len(),
        })?;
        nll -= p.ln();
    }
    Ok((nll, doc.tokens.len()))
}

fn total_nll(params: &LmParameters, docs: &[Document]) -> Result<(f64, usize)> {
    let per_doc = docs
        .par_iter()
        .map(|d| document_nll(params, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_doc
        .into_iter()
        .fold((0.0, 0), |(n, c), (dn, dc)| (n + dn, c + dc)))
}

/// `exp(mean NLL per predicted token)`.
pub fn perplexity(params: &LmParameters, docs: &[Document]) -> Result<f64> {
    let (nll, count) = total_nll(params, docs)?;
    if count == 0 {
        return Err(Error::Data("no evaluation tokens".into()));
    }
    Ok((nll / count as f64).exp())
}

fn mean_loss(params: &LmParameters, docs: &[Document]) -> Result<f64> {
    let (nll, count) = total_nll(params, docs)?;
    Ok(nll / count.max(1) as f64)
}

/// Trains freshly initialized parameters. See [`LmParameters::train`].
pub fn train_lm(config: LmConfig, train: &[Document], valid: &[Document]) -> Result<TrainOutcome> {
    LmParameters::init(config)?.train(train, valid)
}

impl LmParameters {
    /// Mini-batch SGD on the mean next-token cross-entropy, using the
    /// learning rate, epoch count, batch size and seed in `self.config`.
    ///
    /// With a non-empty `valid` set, training stops after
    /// [`EARLY_STOP_PATIENCE`] epochs without improvement and the best
    /// parameters seen are returned. Calling this on already-trained
    /// parameters continues training on a new corpus.
    pub fn train(self, train: &[Document], valid: &[Document]) -> Result<TrainOutcome> {
        self.config.validate()?;
        if train.is_empty() {
            return Err(Error::Data("no training documents".into()));
        }
        let mut positions: Vec<(usize, usize)> = train
            .iter()
            .enumerate()
            .flat_map(|(di, d)| (0..d.tokens.len()).map(move |p| (di, p)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let lr = self.config.learning_rate;
        let batch = self.config.batch_size;

        let mut params = self;
        let mut trace = Vec::new();
        let mut best: Option<(f64, usize, LmParameters)> = None;
        let mut since_best = 0;
        let mut stopped_early = false;
        for epoch in 0..params.config.epochs {
            positions.shuffle(&mut rng);
            for chunk in positions.chunks(batch) {
                let examples: Vec<Example<'_>> = chunk
                    .iter()
                    .map(|&(di, p)| Example {
                        context: &train[di].tokens[..p],
                        target: train[di].tokens[p],
                    })
                    .collect();
                let (loss, grad) = loss_and_gradient(&params, &examples)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                for ((_, p), (_, g)) in params.groups_mut().into_iter().zip(grad.groups()) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= lr * gv;
                    }
                }
            }
            let train_loss = mean_loss(&params, train)?;
            if !train_loss.is_finite() || !params.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let valid_loss = if valid.is_empty() {
                None
            } else {
                Some(mean_loss(&params, valid)?)
            };
            eprintln!(
                "epoch {epoch}: train loss {train_loss:.6}{}",
                valid_loss
                    .map(|v| format!(", valid loss {v:.6}"))
                    .unwrap_or_default()
            );
            trace.push(EpochLoss {
                epoch,
                train_loss,
                valid_loss,
            });
            if let Some(vl) = valid_loss {
                if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                    best = Some((vl, epoch, params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= EARLY_STOP_PATIENCE {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
        let last_epoch = trace.last().map(|e| e.epoch);
        let (params, best_epoch) = match best {
            Some((_, e, p)) => (p, Some(e)),
            None => (params, last_epoch),
        };
        Ok(TrainOutcome {
            params,
            trace,
            best_epoch,
            stopped_early,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_lm::LanguageModel;
    use crate::corpus::{LocalityDescriptor, Split};
    use crate::math::argmax;

    fn doc(tokens: Vec<u32>) -> Document {
        Document {
            tokens,
            locality: LocalityDescriptor {
                style: 0,
                source: 0,
                category: 0,
            },
            split: Split::Train,
        }
    }

    fn config(v: usize) -> LmConfig {
        LmConfig {
            context_window: 4,
            embedding_dim: 6,
            hidden_dim: 8,
            vocab_size: v,
            learning_rate: 0.01,
            epochs: 5,
            batch_size: 1000,
            seed: 1,
        }
    }

    fn ten_sentences() -> Vec<Document> {
        (0..10u32)
            .map(|i| doc((0..6).map(|j| 3 + (i * 3 + j * 5) % 7).chain([2]).collect()))
            .collect()
    }

    #[test]
    fn zero_epochs_returns_init() {
        let mut c = config(10);
        c.epochs = 0;
        let init = LmParameters::init(c.clone()).unwrap();
        let out = train_lm(c, &ten_sentences(), &[]).unwrap();
        assert_eq!(out.params, init);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn loss_non_increasing_at_small_lr() {
        let mut c = config(10);
        c.epochs = 20;
        let out = train_lm(c, &ten_sentences(), &[]).unwrap();
        let violations = out
            .trace
            .windows(2)
            .filter(|w| w[1].train_loss > w[0].train_loss + 1e-6)
            .count();
        assert_eq!(violations, 0, "{:?}", out.trace);
        assert!(out.trace.last().unwrap().train_loss < out.trace[0].train_loss);
    }

    #[test]
    fn overfits_single_sentence() {
        let sentence = doc(vec![3, 4, 5, 6, 7, 8, 2]);
        let mut c = config(10);
        c.learning_rate = 0.5;
        c.epochs = 400;
        c.batch_size = 7;
        let out = train_lm(c, std::slice::from_ref(&sentence), &[]).unwrap();
        for i in 0..sentence.tokens.len() {
            let p = out.params.lm_distribution(&sentence.tokens[..i]).unwrap();
            assert_eq!(argmax(&p) as u32, sentence.tokens[i], "position {i}");
        }
    }

    #[test]
    fn early_stopping_keeps_best() {
        let train = ten_sentences();
        let valid = vec![doc(vec![9, 9, 9, 9, 2])];
        let mut c = config(10);
        c.learning_rate = 1.0;
        c.epochs = 200;
        c.batch_size = 4;
        let out = train_lm(c, &train, &valid).unwrap();
        assert!(out.stopped_early);
        let best = out.best_epoch.unwrap();
        let best_loss = out.trace[best].valid_loss.unwrap();
        assert!(out.trace.iter().all(|e| e.valid_loss.unwrap() >= best_loss));
        assert_eq!(out.trace.len(), best + 1 + EARLY_STOP_PATIENCE);
    }

    #[test]
    fn uniform_and_certain_perplexity() {
        let mut p = LmParameters::init(config(10)).unwrap();
        p.w2.iter_mut().for_each(|w| *w = 0.0);
        let docs = ten_sentences();
        assert!((perplexity(&p, &docs).unwrap() - 10.0).abs() < 1e-9);

        // b2 puts all mass on token 4 for a document made only of token 4
        p.b2[4] = 1e4;
        let certain = vec![doc(vec![4, 4, 4])];
        assert_eq!(perplexity(&p, &certain).unwrap(), 1.0);
        assert!(perplexity(&p, &[]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = config(10);
        c.learning_rate = 1e300;
        c.epochs = 3;
        c.batch_size = 2;
        let err = train_lm(c, &ten_sentences(), &[]).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0 }));
    }
}
