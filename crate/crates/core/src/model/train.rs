use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::scalar::Scalar;
use super::transformer::loss_and_grad;
use super::{ModelConfig, ModelError};
use crate::tokenizer::PAD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Steps of linear warmup before the rate stays constant.
    pub warmup_steps: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            warmup_steps: 0,
        }
    }
}

impl OptimConfig {
    /// Warmup over 1% of a planned run of `total_steps`.
    pub fn for_run(learning_rate: f64, total_steps: u64) -> Self {
        OptimConfig {
            learning_rate,
            warmup_steps: total_steps.div_ceil(100),
            ..Default::default()
        }
    }
}

/// Learning rate used for the update that takes `step` to `step + 1`.
pub fn lr_at(cfg: &OptimConfig, step: u64) -> f64 {
    if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        cfg.learning_rate
    } else {
        cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub params: Parameters<T>,
    pub optim: OptimConfig,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
    pub step: u64,
    /// Drives dropout masks.
    pub(crate) rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &ModelConfig, optim: OptimConfig) -> Result<Self, ModelError> {
        let params = Parameters::init(config)?;
        Ok(Self::from_params(params, optim))
    }

    pub fn from_params(params: Parameters<T>, optim: OptimConfig) -> Self {
        let n = params.len();
        let rng = ChaCha8Rng::seed_from_u64(params.config.seed ^ 0x5eed_d20f);
        TrainState {
            params,
            optim,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            rng,
        }
    }

    /// One Adam update on `batch`; returns the pre-update loss in nats/token.
    ///
    /// A non-finite loss or gradient aborts without touching the state.
    pub fn train_step(&mut self, batch: &[Vec<u32>]) -> Result<f64, ModelError> {
        let dropout_rng = (self.params.config.dropout > 0.0).then_some(&mut self.rng);
        let (loss, mut grad) = loss_and_grad(&self.params, batch, dropout_rng)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        let norm = grad
            .iter()
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step: self.step,
                detail: format!("loss {loss}, gradient norm {norm}"),
            });
        }
        if norm > self.optim.clip_norm {
            let s = T::c(self.optim.clip_norm / norm);
            grad.iter_mut().for_each(|g| *g *= s);
        }
        let t = (self.step + 1) as i32;
        let (b1, b2) = (self.optim.beta1, self.optim.beta2);
        let lr = lr_at(&self.optim, self.step);
        let bc1 = T::c(1.0 - b1.powi(t));
        let bc2 = T::c(1.0 - b2.powi(t));
        let (b1, b2, eps, lr) = (T::c(b1), T::c(b2), T::c(self.optim.eps), T::c(lr));
        let one = T::one();
        for (((p, g), m), v) in self
            .params
            .data
            .iter_mut()
            .zip(&grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        self.step += 1;
        Ok(loss)
    }
}

/// Length-bucketed mini-batches over a fixed set of sequences.
///
/// Each epoch sorts the (shuffled) sequences by length, cuts consecutive
/// runs of `batch_size`, pads every run to its longest member and visits the
/// runs in random order.
#[derive(Debug, Clone)]
pub struct Batcher {
    sequences: Vec<Vec<u32>>,
    batch_size: usize,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
    pub epoch: u64,
}

impl Batcher {
    pub fn new(sequences: Vec<Vec<u32>>, batch_size: usize, seed: u64) -> Self {
        Batcher {
            sequences,
            batch_size: batch_size.max(1),
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
            epoch: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        order.shuffle(&mut self.rng);
        order.sort_by_key(|&i| self.sequences[i].len());
        let mut buckets: Vec<Vec<usize>> = order
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        buckets.shuffle(&mut self.rng);
        buckets.reverse();
        self.queue = buckets;
        self.epoch += 1;
    }

    pub fn next_batch(&mut self) -> Vec<Vec<u32>> {
        if self.sequences.is_empty() {
            return Vec::new();
        }
        if self.queue.is_empty() {
            self.refill();
        }
        let idx = self.queue.pop().expect("refilled");
        let max = idx
            .iter()
            .map(|&i| self.sequences[i].len())
            .max()
            .unwrap_or(0);
        idx.iter()
            .map(|&i| {
                let mut s = self.sequences[i].clone();
                s.resize(max, PAD);
                s
            })
            .collect()
    }
}
