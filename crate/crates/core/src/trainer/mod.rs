//! Training: token-budget batches, Adam with learning-rate decay and an
//! AMSGrad switch, periodic dev evaluation, early stopping and best-dev
//! parameter selection.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod optim;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::conllu::{filter_long, Sentence};
use crate::error::{Error, Result};
use crate::eval::{uas_las, PunctMode};
use crate::pipeline::{parse_corpus, sentence_gradient, to_prediction, LossValue};
use crate::scorer::{Gradients, ModelConfig, ModelParams, Vocab};
use crate::tree::DecodeConfig;

pub use config::{DevMetric, TrainConfig};
use optim::{Adam, AdamConfig, StepOutcome};

/// Groups sentence indices into batches of at most `budget` tokens, in the
/// given order. A sentence longer than the budget forms its own batch.
pub fn pack_batches(order: &[usize], lengths: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for &idx in order {
        let len = lengths[idx];
        if !current.is_empty() && tokens + len > budget {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(idx);
        tokens += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Endless stream of batches; the corpus is reshuffled every epoch.
struct BatchStream {
    lengths: Vec<usize>,
    budget: usize,
    rng: ChaCha8Rng,
    pending: Vec<Vec<usize>>,
}

impl BatchStream {
    fn new(lengths: Vec<usize>, budget: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1 << 32);
        BatchStream {
            lengths,
            budget,
            rng,
            pending: Vec::new(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            let mut order: Vec<usize> = (0..self.lengths.len()).collect();
            order.shuffle(&mut self.rng);
            self.pending = pack_batches(&order, &self.lengths, self.budget);
            self.pending.reverse();
        }
        self.pending.pop().expect("non-empty corpus")
    }
}

fn mix_seed(seed: u64, iteration: usize, sentence: usize) -> u64 {
    let mut z = seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (sentence as u64) << 40;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Summed loss and gradient of a batch of corpus indices.
///
/// Sentences are processed in parallel; the reduction always runs in
/// ascending index order, so the result does not depend on the order of
/// `batch` or on the thread count.
pub fn batch_gradient(
    params: &ModelParams,
    corpus: &[Sentence],
    batch: &[usize],
    lambda: f64,
    dropout: crate::scorer::DropoutConfig,
    seed: u64,
) -> Result<(LossValue, Gradients)> {
    let mut sorted = batch.to_vec();
    sorted.sort_unstable();
    let parts = sorted
        .par_iter()
        .map(|&idx| sentence_gradient(params, &corpus[idx], lambda, dropout, mix_seed(seed, 0, idx)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = Gradients::zeros_like(params);
    let mut loss = LossValue {
        total: 0.0,
        edge: 0.0,
        label: 0.0,
    };
    for (value, grads) in &parts {
        loss.total += value.total;
        loss.edge += value.edge;
        loss.label += value.label;
        total.add_assign(grads);
    }
    Ok((loss, total))
}

/// Learning-rate decay, AMSGrad switch and early-stopping bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub learning_rate: f64,
    decay_rate: f64,
    decay_step: usize,
    amsgrad_after: usize,
    early_stop: usize,
    since_improvement: usize,
    since_decay: usize,
    pub amsgrad: bool,
    pub decays: usize,
}

/// What a dev check triggered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleEvents {
    pub decayed: bool,
    pub switched_to_amsgrad: bool,
    pub stop: bool,
}

impl Schedule {
    pub fn new(config: &TrainConfig) -> Self {
        Schedule {
            learning_rate: config.learning_rate,
            decay_rate: config.decay_rate,
            decay_step: config.decay_step,
            amsgrad_after: config.amsgrad_after,
            early_stop: config.early_stop,
            since_improvement: 0,
            since_decay: 0,
            amsgrad: false,
            decays: 0,
        }
    }

    /// Counts one training iteration.
    pub fn tick(&mut self) {
        self.since_improvement += 1;
        self.since_decay += 1;
    }

    /// Records a dev check and applies whatever it triggers.
    pub fn dev_check(&mut self, improved: bool) -> ScheduleEvents {
        let mut events = ScheduleEvents::default();
        if improved {
            self.since_improvement = 0;
            self.since_decay = 0;
            return events;
        }
        if self.since_decay >= self.decay_step {
            self.learning_rate *= self.decay_rate;
            self.since_decay = 0;
            self.decays += 1;
            events.decayed = true;
        }
        if !self.amsgrad && self.since_improvement >= self.amsgrad_after {
            self.amsgrad = true;
            events.switched_to_amsgrad = true;
        }
        events.stop = self.since_improvement >= self.early_stop;
        events
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DevScore {
    pub uas: f64,
    pub las: f64,
}

impl DevScore {
    pub fn metric(&self, metric: DevMetric) -> f64 {
        match metric {
            DevMetric::Uas => self.uas,
            DevMetric::Las => self.las,
        }
    }
}

/// One entry per training iteration (batch).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub loss: f64,
    pub edge_loss: f64,
    pub label_loss: f64,
    pub learning_rate: f64,
    pub amsgrad: bool,
    pub skipped: bool,
    pub dev: Option<DevScore>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best dev check, or the final parameters when no
    /// dev set was given.
    pub params: ModelParams,
    pub history: Vec<IterationRecord>,
    pub best_iteration: Option<usize>,
    pub best_dev: Option<DevScore>,
    pub stopped_early: bool,
}

pub fn evaluate(params: &ModelParams, dev: &[Sentence], single_root: bool, punct: &PunctMode) -> Result<DevScore> {
    let (trees, _) = parse_corpus(params, dev, DecodeConfig { single_root })?;
    let preds: Vec<_> = trees.iter().map(|t| to_prediction(params, t)).collect();
    let s = uas_las(&preds, dev, punct)?;
    Ok(DevScore { uas: s.uas, las: s.las })
}

/// Builds the vocabulary and initial parameters from `train` and fits them.
pub fn train(train: &[Sentence], dev: &[Sentence], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus = filter_long(train.to_vec(), config.max_train_len);
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty after length filtering".into()));
    }
    let vocab = Vocab::from_corpus(&corpus)?;
    let model = ModelConfig {
        dims: config.model_dims(),
        formulation: config.formulation(),
        iterations: config.iterations,
        activation: config.activation,
    };
    let params = ModelParams::new(model, vocab, config.seed)?;
    fit(params, &corpus, dev, config)
}

/// Trains existing parameters. `corpus` is used as given (no filtering).
pub fn fit(mut params: ModelParams, corpus: &[Sentence], dev: &[Sentence], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    params.config.iterations = config.iterations;
    let punct = PunctMode::UposPunct;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        },
        &params.tensors,
    );
    let mut schedule = Schedule::new(config);
    let mut stream = BatchStream::new(corpus.iter().map(Sentence::len).collect(), config.batch_tokens, config.seed);
    let mut history = Vec::with_capacity(config.max_iterations);
    let mut best: Option<(usize, DevScore, ModelParams)> = None;
    let mut stopped_early = false;

    for iteration in 1..=config.max_iterations {
        let batch = stream.next_batch();
        let tokens = batch.iter().map(|&i| corpus[i].len()).sum();
        let seed = mix_seed(config.seed, iteration, 0);
        let (value, grads) = batch_gradient(&params, corpus, &batch, config.lambda, config.dropout, seed)?;
        adam.config.learning_rate = schedule.learning_rate;
        let skipped = adam.step(&mut params.tensors, &grads) == StepOutcome::SkippedNonFinite;
        if skipped {
            warn!("iteration {}: non-finite gradient, update skipped", iteration);
        }
        let mut record = IterationRecord {
            iteration,
            sentences: batch.len(),
            tokens,
            loss: value.total,
            edge_loss: value.edge,
            label_loss: value.label,
            learning_rate: schedule.learning_rate,
            amsgrad: schedule.amsgrad,
            skipped,
            dev: None,
        };
        schedule.tick();

        let check = !dev.is_empty() && (iteration % config.eval_every == 0 || iteration == config.max_iterations);
        if check {
            let score = evaluate(&params, dev, config.single_root, &punct)?;
            record.dev = Some(score);
            let improved = best
                .as_ref()
                .is_none_or(|(_, b, _)| score.metric(config.dev_metric) > b.metric(config.dev_metric));
            if improved {
                best = Some((iteration, score, params.clone()));
            }
            info!(
                "iteration {}: loss {:.4}, dev UAS {:.2} LAS {:.2}{}",
                iteration,
                value.total,
                score.uas,
                score.las,
                if improved { " (best)" } else { "" }
            );
            let events = schedule.dev_check(improved);
            if events.decayed {
                info!("learning rate now {:.6}", schedule.learning_rate);
            }
            if events.switched_to_amsgrad {
                info!("switching to AMSGrad");
                adam.enable_amsgrad();
            }
            history.push(record);
            if events.stop {
                stopped_early = true;
                info!("early stop at iteration {}", iteration);
                break;
            }
        } else {
            history.push(record);
        }
    }

    Ok(match best {
        Some((it, score, p)) => TrainOutcome {
            params: p,
            history,
            best_iteration: Some(it),
            best_dev: Some(score),
            stopped_early,
        },
        None => TrainOutcome {
            params,
            history,
            best_iteration: None,
            best_dev: None,
            stopped_early,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Variant;

    #[test]
    fn batches_respect_budget() {
        let lengths = [3, 4, 10, 2, 2];
        let b = pack_batches(&[0, 1, 2, 3, 4], &lengths, 7);
        assert_eq!(b, vec![vec![0, 1], vec![2], vec![3, 4]]);
        let b = pack_batches(&[4, 3, 2], &lengths, 100);
        assert_eq!(b, vec![vec![4, 3, 2]]);
    }

    #[test]
    fn stream_covers_epoch() {
        let mut s = BatchStream::new(vec![1; 10], 3, 7);
        let mut seen: Vec<usize> = (0..4).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn decay_after_stall() {
        let mut c = TrainConfig::full(Variant::Local2O);
        c.amsgrad_after = 5000;
        let mut s = Schedule::new(&c);
        s.tick();
        s.dev_check(true);
        for it in 1..=500 {
            s.tick();
            let e = s.dev_check(false);
            assert_eq!(e.decayed, it == 500);
        }
        assert!((s.learning_rate - 0.0085).abs() < 1e-15);
        assert!(!s.amsgrad);
    }

    #[test]
    fn amsgrad_and_stop() {
        let c = TrainConfig::full(Variant::Local2O).scaled(0.01);
        let mut s = Schedule::new(&c);
        let mut switched = None;
        let mut stopped = None;
        for it in 1..=200 {
            s.tick();
            let e = s.dev_check(false);
            if e.switched_to_amsgrad {
                switched = Some(it);
            }
            if e.stop && stopped.is_none() {
                stopped = Some(it);
            }
        }
        assert_eq!(switched, Some(50));
        assert_eq!(stopped, Some(100));
        assert_eq!(s.decays, 40);
    }
}
