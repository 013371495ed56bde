//! Mini-batch training loop shared by every model: length-bucketed batches,
//! per-epoch validation, learning-rate decay on plateaus and early stopping.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numerics::init::{self, SeededRng};
use crate::numerics::{Bound, Optimizer, OptimizerKind, ParamStore, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Stop after this many consecutive epochs without improvement.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 64,
            learning_rate: 0.001,
            decay_factor: 0.5,
            patience: 6,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidArgument("patience must be positive".into()));
        }
        Optimizer::new(self.optimizer, self.learning_rate, self.decay_factor).map(|_| ())
    }
}

/// Models trained by [`fit`].
pub trait Trainable: Clone {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the per-batch losses.
    pub train_loss: f64,
    /// Validation score; higher is better.
    pub score: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn best_score(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].score)
    }
}

/// Shuffles, sorts windows of `8 × batch_size` samples by length so that
/// batches hold similar lengths, then shuffles the batch order.
pub fn bucketed_batches(lengths: &[usize], batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for window in order.chunks(batch_size.max(1) * 8) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| (lengths[i], i));
        batches.extend(w.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Runs mini-batch training and returns the parameters of the epoch with
/// the best validation score, rounded to f32 precision.
///
/// `batch_loss` builds the loss of a batch of sample indices on a fresh
/// tape; `score` evaluates a model on held-out data.
pub fn fit<M, L, S>(
    mut model: M,
    lengths: &[usize],
    config: &TrainConfig,
    mut batch_loss: L,
    mut score: S,
) -> Result<(M, TrainLog)>
where
    M: Trainable,
    L: FnMut(&M, &mut Tape, &Bound, &[usize], &mut SeededRng) -> Result<Var>,
    S: FnMut(&M) -> Result<f64>,
{
    config.validate()?;
    if lengths.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let mut log = TrainLog::default();
    if config.max_epochs == 0 {
        return Ok((model, log));
    }
    let mut rng = init::rng(config.seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, config.decay_factor)?;
    let mut best: Option<(f64, M)> = None;
    let mut stale = 0;
    for epoch in 0..config.max_epochs {
        let learning_rate = opt.learning_rate();
        let batches = bucketed_batches(lengths, config.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape)?;
            let loss = batch_loss(&model, &mut tape, &bound, batch, &mut rng)?;
            total += tape.value(loss)[0];
            tape.backward(loss)?;
            let store = model.params_mut();
            store.accumulate(&tape, &bound)?;
            opt.step(store.tensors_mut())?;
        }
        let s = score(&model)?;
        let train_loss = total / batches.len() as f64;
        log::info!("epoch {epoch}: loss {train_loss:.4} score {s:.4} lr {learning_rate:.2e}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            score: s,
            learning_rate,
        });
        if best.as_ref().is_none_or(|(b, _)| s > *b) {
            best = Some((s, model.clone()));
            log.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            opt.decay();
            if stale >= config.patience {
                break;
            }
        }
    }
    let (_, mut model) = best.expect("at least one epoch ran");
    model.params_mut().round_to_f32();
    Ok((model, log))
}

/// Inverted dropout mask: zeros with probability `p`, else `1 / (1 − p)`.
pub fn dropout_mask(rng: &mut SeededRng, len: usize, p: f64) -> Vec<f64> {
    use rand::Rng;
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use alloc::vec;

    #[derive(Clone)]
    struct Scalar(ParamStore);

    impl Trainable for Scalar {
        fn params(&self) -> &ParamStore {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamStore {
            &mut self.0
        }
    }

    fn scalar_model() -> Scalar {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[1, 1], vec![0.0]).unwrap());
        Scalar(s)
    }

    // loss = Σ_batch (w − 3)²
    fn quadratic(_: &Scalar, t: &mut Tape, p: &Bound, batch: &[usize], _: &mut SeededRng) -> Result<Var> {
        let w = p.vars()[0];
        let three = t.constant(&[1, 1], vec![3.0])?;
        let d = t.sub(w, three)?;
        let sq = t.mul(d, d)?;
        let s = t.sum(sq)?;
        t.mul_const(s, vec![batch.len() as f64])
    }

    #[test]
    fn batches_cover_every_index_once() {
        let lengths: Vec<usize> = (0..100).map(|i| (i * 7) % 13).collect();
        let b = bucketed_batches(&lengths, 8, &mut init::rng(1));
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(b.iter().all(|x| x.len() <= 8));
        assert_eq!(b, bucketed_batches(&lengths, 8, &mut init::rng(1)));
    }

    #[test]
    fn zero_epochs_return_model_unchanged() {
        let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::default() };
        let (m, log) = fit(scalar_model(), &[1, 1], &cfg, quadratic, |_| Ok(0.0)).unwrap();
        assert_eq!(m.0, scalar_model().0);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn empty_train_set_is_an_error() {
        let r = fit(scalar_model(), &[], &TrainConfig::default(), quadratic, |_| Ok(0.0));
        assert!(matches!(r, Err(Error::EmptyTrainSet)));
    }

    #[test]
    fn keeps_best_epoch_and_stops_early() {
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 1,
            learning_rate: 0.1,
            patience: 2,
            ..TrainConfig::default()
        };
        let mut calls = 0;
        let (m, log) = fit(scalar_model(), &[1], &cfg, quadratic, |_| {
            calls += 1;
            Ok(if calls == 3 { 1.0 } else { 0.0 })
        })
        .unwrap();
        assert_eq!(log.best_epoch, Some(2));
        assert_eq!(log.epochs.len(), 5);
        assert_eq!(log.epochs[1].learning_rate, 0.1);
        assert_eq!(log.epochs[3].learning_rate, 0.05);
        assert_eq!(log.epochs[4].learning_rate, 0.025);
        let w = m.0.tensors()[0].data()[0];
        assert!(w > 0.0 && w < 3.0 && w == w as f32 as f64);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { max_epochs: 5, batch_size: 3, seed: 9, ..TrainConfig::default() };
        let run = || {
            let mut n = 0.0;
            fit(scalar_model(), &[1, 2, 3, 4, 5, 6, 7], &cfg, quadratic, |_| {
                n += 1.0;
                Ok(n)
            })
            .unwrap()
        };
        assert_eq!(run().0.0.fingerprint(), run().0.0.fingerprint());
    }

    #[test]
    fn dropout_mask_scales_survivors() {
        let m = dropout_mask(&mut init::rng(3), 1000, 0.3);
        let zeros = m.iter().filter(|&&x| x == 0.0).count();
        assert!((200..400).contains(&zeros));
        assert!(m.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.7).abs() < 1e-15));
    }
}
