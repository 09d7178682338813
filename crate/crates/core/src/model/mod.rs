//! Decoder-only causal transformer, written out by hand.
//!
//! Pre-norm residual blocks (layer norm → causal multi-head attention, layer
//! norm → GELU feed-forward with 4× expansion), learned positional
//! embeddings, and an output projection tied to the token embedding. The
//! backward pass is explicit; gradients are checked against central
//! differences in 64-bit arithmetic.

mod checkpoint;
mod params;
mod scalar;
mod session;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::PAD;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, load_checkpoint_expecting,
    save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::{Parameters, TensorSpec, INIT_STD};
pub use scalar::Scalar;
pub use session::Session;
pub use train::{lr_at, Batcher, OptimConfig, TrainState};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds the context window of {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("every target position is padding")]
    AllPadded,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Maximum number of input positions `k`.
    pub context_window: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Residual dropout probability, applied during training only.
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, width 128, 256 positions.
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_window: 256,
            layers: 2,
            heads: 4,
            embed_dim: 128,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.layers == 0 || self.heads == 0 || self.embed_dim == 0 {
            return bad("all counts must be positive".into());
        }
        if self.context_window < 2 {
            return bad(format!("context window {} is below 2", self.context_window));
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Dense logits `[batch × positions × V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub data: Vec<T>,
    pub batch: usize,
    pub positions: usize,
    pub vocab: usize,
}

impl<T: Copy> Logits<T> {
    pub fn row(&self, b: usize, pos: usize) -> &[T] {
        let start = (b * self.positions + pos) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

/// Logits at every position of every sequence. Shorter sequences are
/// right-padded with PAD inputs, whose rows carry no meaning.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    batch: &[Vec<u32>],
) -> Result<Logits<T>, ModelError> {
    let cfg = params.config();
    let positions = batch.iter().map(Vec::len).max().unwrap_or(0);
    let padded: Vec<Vec<u32>> = batch
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.resize(positions, PAD);
            s
        })
        .collect();
    if let Some(&bad) = padded
        .iter()
        .flatten()
        .find(|&&t| t as usize >= cfg.vocab_size)
    {
        return Err(ModelError::InvalidConfig(format!(
            "token id {bad} outside the vocabulary"
        )));
    }
    let refs: Vec<&[u32]> = padded.iter().map(Vec::as_slice).collect();
    let packed = transformer::Packed::new(&refs, cfg.context_window)?;
    Ok(Logits {
        data: transformer::forward_logits(params, &packed),
        batch: batch.len(),
        positions,
        vocab: cfg.vocab_size,
    })
}

/// Mean negative log-likelihood in nats per counted target.
///
/// `targets[b][pos]` is the token expected after position `pos`; PAD targets
/// (and positions past a target row's end) are excluded.
pub fn nll_loss<T: Scalar>(logits: &Logits<T>, targets: &[Vec<u32>]) -> Result<T, ModelError> {
    let mut total = T::zero();
    let mut count = 0usize;
    let mut row = vec![T::zero(); logits.vocab];
    for (b, tgt) in targets.iter().enumerate().take(logits.batch) {
        for (pos, &t) in tgt.iter().enumerate().take(logits.positions) {
            if t == PAD {
                continue;
            }
            row.copy_from_slice(logits.row(b, pos));
            transformer::log_softmax_row(&mut row);
            total -= row[t as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::AllPadded);
    }
    Ok(total / T::c(count as f64))
}

/// Next-token loss of a batch of full sequences (inputs are each sequence
/// without its last token, targets without its first).
pub fn sequence_loss<T: Scalar>(
    params: &Parameters<T>,
    batch: &[Vec<u32>],
) -> Result<T, ModelError> {
    let (inputs, targets): (Vec<Vec<u32>>, Vec<Vec<u32>>) = batch
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| (s[..s.len() - 1].to_vec(), s[1..].to_vec()))
        .unzip();
    if inputs.is_empty() {
        return Err(ModelError::AllPadded);
    }
    nll_loss(&forward(params, &inputs)?, &targets)
}

/// Loss and analytic gradient (flat, in parameter layout order), without dropout.
pub fn loss_and_grad<T: Scalar>(
    params: &Parameters<T>,
    batch: &[Vec<u32>],
) -> Result<(T, Vec<T>), ModelError> {
    transformer::loss_and_grad(params, batch, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_window: 8,
            layers: 2,
            heads: 2,
            embed_dim: 8,
            dropout: 0.0,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(100);
        c.embed_dim = 64;
        c.heads = 4;
        assert_eq!(c.head_dim(), 16);
        assert!(c.validate().is_ok());
        c.heads = 5;
        assert!(matches!(
            Parameters::<f32>::init(&c),
            Err(ModelError::InvalidConfig(_))
        ));
        c.heads = 4;
        c.context_window = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Parameters::<f32>::init(&tiny(3)).unwrap();
        let b = Parameters::<f32>::init(&tiny(3)).unwrap();
        let c = Parameters::<f32>::init(&tiny(4)).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_ne!(a.flat(), c.flat());
        assert!(a.tensor("h0.ln1.g").unwrap().iter().all(|&g| g == 1.0));
        assert!(a.tensor("h1.mlp.fc.b").unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let v = 1000;
        let logits = Logits {
            data: vec![0.5f64; 2 * 3 * v],
            batch: 2,
            positions: 3,
            vocab: v,
        };
        let targets = vec![vec![1, 2, 3], vec![4, PAD, PAD]];
        let loss = nll_loss(&logits, &targets).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
        assert!((loss - 6.9078).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut data = vec![0.0f64; 5];
        data[4] = 1e4;
        let l = Logits {
            data,
            batch: 1,
            positions: 1,
            vocab: 5,
        };
        assert!(nll_loss(&l, &[vec![4]]).unwrap() < 1e-12);
    }

    #[test]
    fn fully_padded_batch() {
        let l = Logits {
            data: vec![0.0f32; 10],
            batch: 1,
            positions: 2,
            vocab: 5,
        };
        assert!(matches!(
            nll_loss(&l, &[vec![PAD, PAD]]),
            Err(ModelError::AllPadded)
        ));
        let p = Parameters::<f32>::init(&tiny(0)).unwrap();
        assert!(matches!(
            loss_and_grad(&p, &[vec![5, PAD, PAD]]),
            Err(ModelError::AllPadded)
        ));
    }

    #[test]
    fn too_long() {
        let p = Parameters::<f32>::init(&tiny(0)).unwrap();
        assert!(matches!(
            forward(&p, &[vec![4; 9]]),
            Err(ModelError::SequenceTooLong { len: 9, context: 8 })
        ));
    }

    #[test]
    fn causal_and_normalized() {
        let p = Parameters::<f64>::init(&tiny(1)).unwrap();
        let a = vec![0u32, 4, 5, 6, 7, 8];
        let mut b = a.clone();
        b[3] = 9;
        let la = forward(&p, &[a.clone()]).unwrap();
        let lb = forward(&p, &[b]).unwrap();
        for pos in 0..3 {
            assert_eq!(la.row(0, pos), lb.row(0, pos));
        }
        assert_ne!(la.row(0, 3), lb.row(0, 3));
        for pos in 0..6 {
            let row = la.row(0, pos);
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / s).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
        let both = forward(&p, &[a.clone(), a]).unwrap();
        for pos in 0..6 {
            assert_eq!(both.row(0, pos), both.row(1, pos));
        }
    }

    #[test]
    fn fused_loss_matches_forward_route() {
        let p = Parameters::<f64>::init(&tiny(2)).unwrap();
        let batch = vec![
            vec![0u32, 4, 5, 6, 1],
            vec![0, 7, 1, PAD, PAD],
            vec![0, 9, 10, 8, 8, 7, 1],
        ];
        let trimmed: Vec<Vec<u32>> = batch
            .iter()
            .map(|s| s.iter().copied().filter(|&t| t != PAD).collect())
            .collect();
        let (fused, _) = loss_and_grad(&p, &batch).unwrap();
        let reference = sequence_loss(&p, &trimmed).unwrap();
        assert!((fused - reference).abs() < 1e-12, "{fused} vs {reference}");
    }
}
