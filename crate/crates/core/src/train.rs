//! Mini-batch training with Adam and validation-F1 model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::{mix_seed, QueryBagInstance};
use crate::error::{QbmError, Result};
use crate::model::{forward, EncodedBag, Matcher, Variant};
use crate::text::PAD;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Epochs without a validation-F1 improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            seed: 1,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(QbmError::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(QbmError::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(QbmError::Config("max_epochs must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(QbmError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One encoded input with its binary label.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: EncodedBag,
    pub label: usize,
}

/// Encodes query-candidate pairs. The pairwise baseline gets one example per
/// question, labelled like its bag. Degenerate inputs are skipped and
/// counted.
pub fn build_examples(matcher: &Matcher, instances: &[QueryBagInstance]) -> Result<(Vec<Example>, usize)> {
    let mut out = Vec::new();
    let mut skipped = 0;
    for inst in instances {
        for c in &inst.candidates {
            let label = usize::from(c.positive);
            let encoded: Vec<Result<EncodedBag>> = if matcher.variant() == Variant::Qq {
                c.questions.iter().map(|q| matcher.encode_pair(&inst.query, q)).collect()
            } else {
                vec![matcher.encode_bag(&inst.query, &c.questions)]
            };
            for e in encoded {
                match e {
                    Ok(input) => out.push(Example { input, label }),
                    Err(QbmError::Degenerate(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok((out, skipped))
}

/// Precision, recall and F1 of the positive class at threshold 0.5.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn prf(predictions: &[bool], labels: &[bool]) -> Prf {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Evaluation-mode probabilities for every example.
pub fn predict(matcher: &Matcher, examples: &[Example]) -> Result<Vec<f64>> {
    examples.iter().map(|e| matcher.probability(&e.input)).collect()
}

pub fn validate_f1(matcher: &Matcher, examples: &[Example]) -> Result<Prf> {
    let probs = predict(matcher, examples)?;
    let preds: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
    let labels: Vec<bool> = examples.iter().map(|e| e.label == 1).collect();
    Ok(prf(&preds, &labels))
}

pub fn accuracy(matcher: &Matcher, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let probs = predict(matcher, examples)?;
    let right = probs
        .iter()
        .zip(examples)
        .filter(|(&p, e)| (p >= 0.5) == (e.label == 1))
        .count();
    Ok(right as f64 / examples.len() as f64)
}

/// Mean cross-entropy of a batch and the gradient of every parameter.
/// `rng` drives dropout when `training` is set.
pub fn batch_loss(
    matcher: &Matcher,
    batch: &[&Example],
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<f32>>)> {
    if batch.is_empty() {
        return Err(QbmError::Config("empty batch".into()));
    }
    let mut g = Graph::new();
    let p = matcher.params.bind(&mut g, true);
    let rows: Vec<Var> = batch
        .iter()
        .map(|e| forward::logits(&mut g, &p, &matcher.config, &e.input, training, rng))
        .collect::<Result<_>>()?;
    let logits = g.stack_rows(&rows)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let loss = g.cross_entropy(logits, &labels)?;
    let value = g.value(loss).data()[0] as f64;
    let mut grads = g.backward(loss)?;
    let out = p
        .vars
        .iter()
        .zip(matcher.params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((value, out))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val: Prf,
    pub seconds: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tloss\ttrain_acc\tval_P\tval_R\tval_F1\tseconds";

    /// Columns of `record`, which leaves out the wall-clock time.
    pub const RECORD_HEADER: &'static str = "epoch\tloss\ttrain_acc\tval_P\tval_R\tval_F1";

    pub fn line(&self) -> String {
        format!("{}\t{:.2}", self.record(), self.seconds)
    }

    /// The line without timing, identical across reruns with one seed.
    pub fn record(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            self.epoch, self.loss, self.train_acc, self.val.precision, self.val.recall, self.val.f1
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation F1.
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    pub epochs_run: usize,
    /// Examples skipped because their text was degenerate.
    pub skipped: usize,
}

/// Trains `matcher` in place; on return it holds the best epoch's weights.
pub fn train(
    matcher: &mut Matcher,
    train_set: &[QueryBagInstance],
    valid_set: &[QueryBagInstance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_ex, s1) = build_examples(matcher, train_set)?;
    let (valid_ex, s2) = build_examples(matcher, valid_set)?;
    if train_ex.is_empty() {
        return Err(QbmError::Config("training set has no usable example".into()));
    }
    let adam_config = AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_config, matcher.params.tensors());
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut stale = 0;
    let d = matcher.config.embed_dim;

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut order: Vec<&Example> = train_ex.iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64)));
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, ((epoch as u64) << 32) | b as u64));
            let (loss, mut grads) = batch_loss(matcher, batch, true, &mut rng)?;
            if !loss.is_finite() {
                return Err(QbmError::NonFiniteLoss { epoch, batch: b, loss });
            }
            // The padding row stays zero.
            grads[0][PAD * d..(PAD + 1) * d].iter_mut().for_each(|x| *x = 0.0);
            adam.step(matcher.params.tensors_mut(), &grads)?;
            total += loss * batch.len() as f64;
        }
        let entry = EpochLog {
            epoch,
            loss: total / train_ex.len() as f64,
            train_acc: accuracy(matcher, &train_ex)?,
            val: validate_f1(matcher, &valid_ex)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        let improved = best.as_ref().map_or(true, |b| entry.val.f1 > b.val_f1);
        if improved {
            best = Some(Checkpoint {
                matcher: matcher.clone(),
                adam: adam.clone(),
                epoch,
                val_f1: entry.val.f1,
                seed: config.seed,
            });
            stale = 0;
        } else {
            stale += 1;
        }
        log.push(entry);
        if stale >= config.patience {
            break;
        }
    }
    let best = best.expect("at least one epoch ran");
    *matcher = best.matcher.clone();
    Ok(TrainOutcome {
        best,
        epochs_run: log.len(),
        log,
        skipped: s1 + s2,
    })
}
