//! Minibatch bookkeeping shared by the trainers.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{adam_step, Gradients, OptimizerState, ParameterStore};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Sample-weighted mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainMetrics {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// A seeded permutation of `0..n` cut into batches of at most `batch_size`.
pub fn minibatches(n: usize, batch_size: usize, r: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Runs `epochs` passes of minibatch Adam.
///
/// `step` returns the batch loss and gradients; `after_step` runs after every
/// update (spectral projection, for instance). On a non-finite loss the
/// parameters are restored to the start of the failing epoch.
pub fn fit<S, A>(
    store: &mut ParameterStore,
    n: usize,
    cfg: &TrainConfig,
    mut step: S,
    mut after_step: A,
) -> Result<TrainMetrics>
where
    S: FnMut(&ParameterStore, &[usize]) -> Result<(f64, Gradients)>,
    A: FnMut(&mut ParameterStore),
{
    let mut metrics = TrainMetrics::default();
    if cfg.epochs == 0 || n == 0 {
        return Ok(metrics);
    }
    let mut opt = OptimizerState::new(cfg.lr);
    let mut r = rng::seeded(cfg.seed);
    for epoch in 0..cfg.epochs {
        let checkpoint = store.clone();
        let mut total = 0.0;
        for batch in minibatches(n, cfg.batch_size, &mut r) {
            let outcome = step(store, &batch);
            let (loss, grads) = match outcome {
                Ok(v) => v,
                Err(Error::NonFiniteLoss(loss)) | Err(Error::Diverged { loss, .. }) => {
                    *store = checkpoint;
                    return Err(Error::Diverged { epoch, loss });
                }
                Err(e) => return Err(e),
            };
            total += loss * batch.len() as f64;
            adam_step(store, &grads, &mut opt)?;
            after_step(store);
            if !store.is_finite() {
                *store = checkpoint;
                return Err(Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                });
            }
        }
        metrics.epoch_losses.push(total / n as f64);
    }
    store.bump_version();
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{value_and_grad, Tensor};

    #[test]
    fn batches_partition_indices() {
        let mut r = rng::seeded(1);
        let b = minibatches(10, 4, &mut r);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn fit_minimizes_a_quadratic_and_restores_on_divergence() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::scalar(3.0));
        let cfg = TrainConfig {
            epochs: 300,
            lr: 0.05,
            batch_size: 1,
            seed: 0,
        };
        let m = fit(
            &mut store,
            1,
            &cfg,
            |s, _| {
                value_and_grad(s, |g, b| {
                    let w = b.get("w");
                    let sq = g.square(w);
                    g.sum(sq)
                })
            },
            |_| {},
        )
        .unwrap();
        assert!(m.final_loss().unwrap() < 1e-3);

        let before = store.clone();
        let err = fit(
            &mut store,
            1,
            &cfg,
            |_, _| Err(Error::NonFiniteLoss(f64::INFINITY)),
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 0, .. }));
        assert_eq!(store, before);
    }
}
