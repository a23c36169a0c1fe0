//! Masked-token pretraining.
//!
//! Each non-special token is replaced by `[MASK]` with probability
//! `mask_rate` (at least one per sentence) and the loss is cross-entropy on
//! the masked positions. Parameters are updated with Adam; the learning
//! rate warms up linearly and then decays linearly to zero.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EncoderModel, NoGate, WeightGate, CLS, MASK, PAD, SEP};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    /// Fraction of all steps spent warming up.
    pub warmup: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 2e-3,
            batch_size: 16,
            mask_rate: 0.15,
            warmup: 0.05,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("pretrain.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("pretrain.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config("pretrain.mask_rate", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::config("pretrain.warmup", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = (self.warmup * total as f64).ceil().max(1.0);
        let s = step as f64 + 1.0;
        if s <= warm {
            self.lr * s / warm
        } else {
            self.lr * ((total as f64 - s + 1.0) / (total as f64 - warm + 1.0)).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Masked-LM loss of the untrained model over the first batch.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&self.initial_loss)
    }
}

/// Masked copy of `tokens`, the masked positions and their original ids.
pub fn mask_tokens(tokens: &[usize], rate: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let candidates: Vec<usize> = (0..tokens.len())
        .filter(|&i| !matches!(tokens[i], CLS | SEP | PAD))
        .collect();
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < rate)
        .collect();
    if positions.is_empty() && !candidates.is_empty() {
        positions.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let mut masked = tokens.to_vec();
    let targets = positions.iter().map(|&p| tokens[p]).collect();
    for &p in &positions {
        masked[p] = MASK;
    }
    (masked, positions, targets)
}

/// Mean cross-entropy of `targets` at `positions` of the (masked) input.
pub fn mlm_loss(
    model: &EncoderModel,
    masked: &[usize],
    positions: &[usize],
    targets: &[usize],
    gate: &dyn WeightGate,
) -> Result<Tensor> {
    let states = model.forward(masked, gate)?;
    let logits = model.lm_logits(states.last().expect("at least one state"), positions)?;
    Ok(logits.cross_entropy(targets)?)
}

fn batch_loss(model: &EncoderModel, batch: &[&Vec<usize>], rate: f64, rng: &mut Rng) -> Result<Option<Tensor>> {
    let mut terms = Vec::new();
    let mut count = 0usize;
    for tokens in batch {
        let (masked, positions, targets) = mask_tokens(tokens, rate, rng);
        if positions.is_empty() {
            continue;
        }
        let loss = mlm_loss(model, &masked, &positions, &targets, &NoGate)?;
        terms.push(loss.scale(positions.len() as f64));
        count += positions.len();
    }
    if terms.is_empty() {
        return Ok(None);
    }
    Ok(Some(Tensor::sum_all(&terms)?.scale(1.0 / count as f64)))
}

/// Trains all parameters of `model` in place on tokenized sentences.
pub fn pretrain(
    model: &mut EncoderModel,
    corpus: &[Vec<usize>],
    config: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    *model = model.with_requires_grad(true);
    let mut opt = {
        let params: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        Adam::for_params(config.lr, &params)
    };
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut initial_loss = None;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let total_steps = config.epochs * corpus.len().div_ceil(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Vec<usize>> = chunk.iter().map(|&i| &corpus[i]).collect();
            let Some(loss) = batch_loss(model, &batch, config.mask_rate, rng)? else {
                continue;
            };
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Training {
                    step,
                    message: format!("masked-LM loss is {value}"),
                });
            }
            initial_loss.get_or_insert(value);
            loss.backward()?;
            opt.lr = config.lr_at(step, total_steps);
            opt.step(&mut model.params_mut())?;
            total += value;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    *model = model.with_requires_grad(false);
    Ok(PretrainReport {
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{generate_corpus, CorpusSpec, EncoderConfig, Tokenizer};
    use crate::rng::{rng, Stream};

    #[test]
    fn masking_skips_specials_and_masks_at_least_one() {
        let mut r = rng(3, Stream::Masking);
        for _ in 0..50 {
            let (masked, positions, targets) = mask_tokens(&[CLS, 7, 8, 9, SEP], 0.15, &mut r);
            assert!(!positions.is_empty());
            assert!(positions.iter().all(|&p| (1..4).contains(&p)));
            for (&p, &t) in positions.iter().zip(&targets) {
                assert_eq!(masked[p], MASK);
                assert_eq!([CLS, 7, 8, 9, SEP][p], t);
            }
        }
    }

    #[test]
    fn loss_decreases_on_tiny_corpus() {
        let spec = CorpusSpec {
            size: 200,
            ..CorpusSpec::default()
        };
        let tok = Tokenizer::from_words(spec.vocabulary());
        let corpus: Vec<Vec<usize>> = generate_corpus(&spec, &mut rng(1, Stream::Corpus))
            .unwrap()
            .iter()
            .map(|s| tok.encode(s).unwrap())
            .collect();
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_size: 16,
            ffn_size: 32,
            vocab_size: tok.vocab_size(),
            ..EncoderConfig::default()
        };
        let mut model = EncoderModel::init(&cfg, &mut rng(1, Stream::Init)).unwrap();
        let pcfg = PretrainConfig {
            epochs: 3,
            ..PretrainConfig::default()
        };
        let report = pretrain(&mut model, &corpus, &pcfg, &mut rng(1, Stream::Masking)).unwrap();
        assert!(report.final_loss() < report.initial_loss, "{report:?}");
        assert!(model.named_params().iter().all(|(_, t)| !t.requires_grad()));
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = PretrainConfig {
            lr: 1.0,
            warmup: 0.1,
            ..PretrainConfig::default()
        };
        let lrs: Vec<f64> = (0..100).map(|s| cfg.lr_at(s, 100)).collect();
        assert_eq!(lrs[9], 1.0);
        assert!(lrs[..10].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[10..].windows(2).all(|w| w[0] > w[1]));
        assert!(lrs[99] > 0.0 && lrs[99] < 0.02);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let cfg = EncoderConfig {
            vocab_size: 10,
            ..EncoderConfig::default()
        };
        let mut model = EncoderModel::init(&cfg, &mut rng(1, Stream::Init)).unwrap();
        let err = pretrain(&mut model, &[], &PretrainConfig::default(), &mut rng(1, Stream::Masking));
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
