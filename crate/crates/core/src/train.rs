//! Minibatch training for both components.
//!
//! Per-example gradients may be computed in parallel, but they are always
//! summed in example order so a run is reproducible bit for bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{PhaseSplit, UserNegatives};
use crate::error::{Error, Result};
use crate::eval::{rank_candidates, EvalError, RankingResult};
use crate::fast::{EmbeddingSlice, FastModel};
use crate::graph::{Gradients, Graph, NodeId};
use crate::optim::{Adam, AdamConfig};
use crate::slow::{InterestExport, SlowModel};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            adam: AdamConfig::default(),
            epochs: 10,
            patience: 2,
        }
    }
}

/// A positive and its sampled negatives sharing one slow-side history.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowExample {
    pub user: u32,
    pub history: Vec<u32>,
    pub positive: u32,
    pub negatives: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FastExample {
    pub user: u32,
    pub clicked: Vec<u32>,
    pub exposed: Vec<u32>,
    pub positive: u32,
    pub negatives: Vec<u32>,
}

fn labelled(positive: u32, negatives: &[u32]) -> impl Iterator<Item = (u32, f64)> + '_ {
    std::iter::once((positive, 1.0)).chain(negatives.iter().map(|&n| (n, 0.0)))
}

#[derive(Clone, Debug, Default)]
pub struct SlowData {
    pub train: Vec<SlowExample>,
    /// Last slow-phase item of each user, held out for early stopping.
    pub valid: Vec<SlowExample>,
}

impl SlowData {
    pub fn for_user(&self, user: u32) -> Vec<SlowExample> {
        self.train.iter().filter(|e| e.user == user).cloned().collect()
    }
}

fn capped(seq: &[u32], max_history: usize) -> Vec<u32> {
    seq[seq.len().saturating_sub(max_history)..].to_vec()
}

/// Next-item examples over each user's slow phase: at most `max_positions`
/// most recent targets per user, each with the preceding `max_history` items.
pub fn slow_examples(
    split: &PhaseSplit,
    negatives: &[UserNegatives],
    max_history: usize,
    max_positions: usize,
) -> SlowData {
    let mut data = SlowData::default();
    for (u, negs) in split.users.iter().zip(negatives) {
        let slow = u.slow();
        let last = slow.len() - 1;
        let first = 1.max(last.saturating_sub(max_positions));
        for t in first..last {
            data.train.push(SlowExample {
                user: u.user,
                history: capped(&slow[..t], max_history),
                positive: slow[t],
                negatives: negs.slow[t].clone(),
            });
        }
        data.valid.push(SlowExample {
            user: u.user,
            history: capped(&slow[..last], max_history),
            positive: slow[last],
            negatives: negs.slow[last].clone(),
        });
    }
    data
}

/// Sum per-example `(gradients, loss, pairs)` in example order and average
/// over pairs.
pub fn batch_gradient<T, E, F>(examples: &[E], num_params: usize, f: F) -> Result<(Gradients<T>, f64, usize)>
where
    T: Real,
    E: Sync,
    F: Fn(&E) -> Result<(Gradients<T>, f64, usize)> + Sync,
{
    #[cfg(feature = "parallel")]
    let parts: Vec<_> = {
        use rayon::prelude::*;
        examples.par_iter().map(&f).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<_> = examples.iter().map(&f).collect::<Result<_>>()?;

    let mut total = Gradients::empty(num_params);
    let mut loss = 0.0;
    let mut pairs = 0;
    for (g, l, n) in &parts {
        total.accumulate(g);
        loss += l;
        pairs += n;
    }
    if pairs > 0 {
        total.scale(T::lit(1.0 / pairs as f64));
    }
    Ok((total, loss, pairs))
}

fn sum_losses<T: Real>(g: &mut Graph<T>, losses: &[NodeId]) -> Result<NodeId> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(total)
}

/// Per-user negative memories held by the cloud.
pub type Memories<T> = BTreeMap<u32, Vec<T>>;

pub fn slow_example_gradient<T: Real>(
    model: &SlowModel<T>,
    ex: &SlowExample,
    memory: Option<&[T]>,
) -> Result<(Gradients<T>, f64, usize)> {
    let mut g = Graph::new(&model.store);
    let mut losses = Vec::with_capacity(1 + ex.negatives.len());
    for (item, label) in labelled(ex.positive, &ex.negatives) {
        let out = model.forward(&mut g, &ex.history, item, memory)?;
        losses.push(g.bce(out.prob, T::lit(label))?);
    }
    let total = sum_losses(&mut g, &losses)?;
    let loss = g.scalar(total).as_f64();
    Ok((g.backward(total)?, loss, losses.len()))
}

pub fn fast_example_gradient<T: Real>(
    model: &FastModel<T>,
    slice: &EmbeddingSlice<T>,
    ex: &FastExample,
    prior: Option<&InterestExport<T>>,
) -> Result<(Gradients<T>, f64, usize)> {
    let mut g = Graph::new(&model.store);
    let enc = model.encode_for(&mut g, slice, &ex.clicked, &ex.exposed, prior)?;
    let mut losses = Vec::with_capacity(1 + ex.negatives.len());
    for (item, label) in labelled(ex.positive, &ex.negatives) {
        let out = model.score(&mut g, slice, &enc, item)?;
        losses.push(g.bce(out.prob, T::lit(label))?);
    }
    let total = sum_losses(&mut g, &losses)?;
    let loss = g.scalar(total).as_f64();
    Ok((g.backward(total)?, loss, losses.len()))
}

fn check_loss(loss: f64, context: impl FnOnce() -> String) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { context: context() })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

#[derive(Clone)]
pub struct SlowTrainer<T> {
    pub config: TrainConfig,
    pub adam: Adam<T>,
    rng: ChaCha8Rng,
    epochs_run: usize,
}

impl<T: Real> SlowTrainer<T> {
    pub fn new(model: &SlowModel<T>, config: TrainConfig, seed: u64) -> Self {
        Self {
            adam: Adam::new(config.adam, &model.store),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epochs_run: 0,
        }
    }

    /// One shuffled pass; returns the mean per-pair loss.
    pub fn epoch(&mut self, model: &mut SlowModel<T>, examples: &[SlowExample], memories: &Memories<T>) -> Result<f64> {
        let mut order: Vec<&SlowExample> = examples.iter().collect();
        order.shuffle(&mut self.rng);
        self.epochs_run += 1;
        let (mut loss, mut pairs) = (0.0, 0);
        for (b, batch) in order.chunks(self.config.batch_size.max(1)).enumerate() {
            let (grads, l, n) = batch_gradient(batch, model.store.len(), |ex| {
                slow_example_gradient(model, ex, memories.get(&ex.user).map(Vec::as_slice))
            })?;
            let epoch = self.epochs_run;
            check_loss(l, || format!("slow training, epoch {epoch}, batch {b}"))?;
            self.adam.step(&mut model.store, &grads)?;
            loss += l;
            pairs += n;
        }
        Ok(if pairs == 0 { 0.0 } else { loss / pairs as f64 })
    }

    /// Train with early stopping on `data.valid`; the best parameters are restored.
    pub fn fit(&mut self, model: &mut SlowModel<T>, data: &SlowData, memories: &Memories<T>) -> Result<FitReport> {
        let mut report = FitReport::default();
        let mut best = (f64::INFINITY, model.store.clone());
        let mut stale = 0;
        for epoch in 1..=self.config.epochs {
            report.train_loss.push(self.epoch(model, &data.train, memories)?);
            let v = slow_validation_loss(model, &data.valid, memories)?;
            check_loss(v, || format!("slow validation, epoch {epoch}"))?;
            report.valid_loss.push(v);
            if v < best.0 {
                best = (v, model.store.clone());
                report.best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.patience {
                    break;
                }
            }
        }
        if report.best_epoch > 0 {
            model.store = best.1;
        }
        Ok(report)
    }
}

pub fn slow_validation_loss<T: Real>(model: &SlowModel<T>, valid: &[SlowExample], memories: &Memories<T>) -> Result<f64> {
    let mut loss = 0.0;
    let mut pairs = 0;
    for ex in valid {
        let memory = memories.get(&ex.user).map(Vec::as_slice);
        let mut g = Graph::new(&model.store);
        for (item, label) in labelled(ex.positive, &ex.negatives) {
            let out = model.forward(&mut g, &ex.history, item, memory)?;
            let l = g.bce(out.prob, T::lit(label))?;
            loss += g.scalar(l).as_f64();
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { loss / pairs as f64 })
}

/// Per-device inputs the fast side trains and scores with.
pub struct DeviceView<'a, T> {
    pub slices: &'a BTreeMap<u32, EmbeddingSlice<T>>,
    pub priors: &'a BTreeMap<u32, InterestExport<T>>,
}

impl<T> DeviceView<'_, T> {
    fn slice(&self, user: u32) -> Result<&EmbeddingSlice<T>> {
        self.slices.get(&user).ok_or(Error::UnknownUser(user))
    }
}

pub struct FastTrainer<T> {
    pub config: TrainConfig,
    pub adam: Adam<T>,
    rng: ChaCha8Rng,
    epochs_run: usize,
}

impl<T: Real> FastTrainer<T> {
    pub fn new(model: &FastModel<T>, config: TrainConfig, seed: u64) -> Self {
        Self {
            adam: Adam::new(config.adam, &model.store),
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epochs_run: 0,
        }
    }

    pub fn epoch(&mut self, model: &mut FastModel<T>, examples: &[FastExample], devices: &DeviceView<'_, T>) -> Result<f64> {
        let mut order: Vec<&FastExample> = examples.iter().collect();
        order.shuffle(&mut self.rng);
        self.epochs_run += 1;
        let (mut loss, mut pairs) = (0.0, 0);
        for (b, batch) in order.chunks(self.config.batch_size.max(1)).enumerate() {
            let (grads, l, n) = batch_gradient(batch, model.store.len(), |ex| {
                fast_example_gradient(model, devices.slice(ex.user)?, ex, devices.priors.get(&ex.user))
            })?;
            let epoch = self.epochs_run;
            check_loss(l, || format!("fast training, epoch {epoch}, batch {b}"))?;
            self.adam.step(&mut model.store, &grads)?;
            loss += l;
            pairs += n;
        }
        Ok(if pairs == 0 { 0.0 } else { loss / pairs as f64 })
    }

    /// A fixed number of epochs; returns the per-epoch training losses.
    pub fn fit(&mut self, model: &mut FastModel<T>, examples: &[FastExample], devices: &DeviceView<'_, T>) -> Result<Vec<f64>> {
        (0..self.config.epochs).map(|_| self.epoch(model, examples, devices)).collect()
    }
}

/// Rank each example's positive against its negatives with the slow model.
pub fn rank_slow_examples<T: Real>(
    model: &SlowModel<T>,
    examples: &[SlowExample],
    memories: &Memories<T>,
) -> std::result::Result<Vec<RankingResult>, EvalError> {
    examples
        .iter()
        .map(|ex| {
            let memory = memories.get(&ex.user).map(Vec::as_slice);
            rank_candidates(ex.user, ex.positive, &ex.negatives, |c| {
                model.score_candidates(&ex.history, c, memory)
            })
        })
        .collect()
}

pub fn rank_fast_examples<T: Real>(
    model: &FastModel<T>,
    examples: &[FastExample],
    devices: &DeviceView<'_, T>,
) -> std::result::Result<Vec<RankingResult>, EvalError> {
    examples
        .iter()
        .map(|ex| {
            let slice = devices.slice(ex.user)?;
            rank_candidates(ex.user, ex.positive, &ex.negatives, |c| {
                model.score_candidates(slice, &ex.clicked, &ex.exposed, c, devices.priors.get(&ex.user))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{phase_split, sample_negatives, synthetic_clusters};
    use crate::slow::{Mode, SlowConfig};

    fn tiny() -> (PhaseSplit, Vec<UserNegatives>) {
        let ds = synthetic_clusters(50, 40, 2, 22, 3);
        let split = phase_split(&ds, 20);
        let negs = sample_negatives(&split, 1, 10, 5).unwrap();
        (split, negs)
    }

    #[test]
    fn slow_examples_hold_out_last_slow_item() {
        let (split, negs) = tiny();
        let data = slow_examples(&split, &negs, 50, 50);
        let u = &split.users[0];
        let valid = &data.valid[0];
        assert_eq!(valid.positive, *u.slow().last().unwrap());
        assert_eq!(valid.history, u.slow()[..u.slow().len() - 1]);
        let train = data.for_user(u.user);
        assert_eq!(train.len(), u.slow().len() - 2);
        assert!(train.iter().all(|e| e.positive != valid.positive));
        let capped = slow_examples(&split, &negs, 3, 4);
        assert!(capped.train.iter().all(|e| e.history.len() <= 3));
        assert_eq!(capped.for_user(u.user).len(), 4);
    }

    #[test]
    fn batch_gradient_is_order_stable() {
        let (split, negs) = tiny();
        let data = slow_examples(&split, &negs, 50, 50);
        let model = SlowModel::<f64>::new(SlowConfig::new(split.vocab, 4), Mode::Independent, 1);
        let f = |ex: &SlowExample| slow_example_gradient(&model, ex, None);
        let (a, la, na) = batch_gradient(&data.train[..20], model.store.len(), f).unwrap();
        let (b, lb, nb) = batch_gradient(&data.train[..20], model.store.len(), f).unwrap();
        assert_eq!((la, na), (lb, nb));
        for id in model.store.ids() {
            assert_eq!(a.dense(&model.store, id), b.dense(&model.store, id));
        }
    }

    #[test]
    fn slow_training_lowers_loss() {
        let (split, negs) = tiny();
        let data = slow_examples(&split, &negs, 50, 50);
        let mut model = SlowModel::<f64>::new(SlowConfig::new(split.vocab, 8), Mode::Independent, 1);
        let cfg = TrainConfig {
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            epochs: 8,
            patience: 8,
        };
        let mut trainer = SlowTrainer::new(&model, cfg, 0);
        let report = trainer.fit(&mut model, &data, &Memories::new()).unwrap();
        assert!(report.train_loss.last().unwrap() < &report.train_loss[0]);
        assert!(report.best_epoch >= 1);
    }
}
