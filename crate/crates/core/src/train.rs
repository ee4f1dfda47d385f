//! Shared mini-batch training loop.

use conkd_nn::{clip_gradients, Adam, AdamConfig, Graph, ParamStore, Var};
use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return invalid("clip norm must be positive");
        }
        Ok(())
    }
}

/// Mean training loss of every epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

fn mix(seed: u64, step: u64) -> u64 {
    // splitmix64
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `cfg.epochs` passes over `n` examples in seeded random order.
/// `loss` builds a scalar loss for one batch of example indices.
pub fn run<F>(params: &mut ParamStore<f32>, n: usize, cfg: &TrainConfig, seed: u64, mut loss: F) -> Result<TrainLog>
where
    F: FnMut(&mut Graph<'_, f32>, &[usize]) -> Result<Var>,
{
    cfg.validate()?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut grads = {
                let mut g = Graph::training(params, mix(seed, step));
                let l = loss(&mut g, batch)?;
                total += g.value(l).item() as f64;
                g.backward(l)?
            };
            if !grads.all_finite() {
                return invalid(format!("non-finite gradient at epoch {epoch}, step {step}"));
            }
            clip_gradients(&mut grads, cfg.clip_norm as f32)?;
            adam.step(params, &grads)?;
            batches += 1;
        }
        let mean = if batches > 0 { total / batches as f64 } else { 0.0 };
        debug!("epoch {} loss {:.4}", epoch + 1, mean);
        log.epoch_loss.push(mean);
    }
    Ok(log)
}

/// Deterministic per-purpose seed derivation.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let h = purpose.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    mix(seed, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use conkd_nn::Tensor;

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::scalar(0.5f32)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        run(&mut p, 4, &cfg, 1, |g, _| Ok(g.param(id))).unwrap();
        assert_eq!(p.get(id).item(), 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::new();
        let id = p.add("w", Tensor::scalar(3.0f32)).unwrap();
        let cfg = TrainConfig { epochs: 400, batch_size: 1, lr: 0.05, clip_norm: 10.0 };
        let log = run(&mut p, 1, &cfg, 1, |g, _| {
            let w = g.param(id);
            g.mul(w, w).map_err(Into::into)
        })
        .unwrap();
        assert!(p.get(id).item().abs() < 0.05);
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(1, "rec"), derive_seed(1, "dial"));
        assert_eq!(derive_seed(1, "rec"), derive_seed(1, "rec"));
    }
}
