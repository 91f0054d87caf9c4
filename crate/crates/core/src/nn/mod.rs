//! Transformer building blocks shared by the AT, LaNMT and LadderNMT models.
//!
//! Activations are padded batches `[B, T, D]`. Sequence lengths travel next
//! to them and turn into attention masks so padded keys never receive weight.

mod attention;
mod layers;
mod transformer;

pub use attention::{AttentionMask, MultiHeadAttention};
pub use layers::{Embedding, FeedForward, LayerNorm, Linear};
pub use transformer::{positions, sinusoidal_table, Decoder, Encoder};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            layers: 2,
            dropout: 0.1,
            max_positions: 64,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("layers", self.layers),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Padded token ids `[B, T]` with per-row lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

impl SeqBatch {
    pub fn new<T: AsRef<[u32]>>(seqs: &[T], pad: u32) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("sequence batch"));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.as_ref().len()).collect();
        if lens.contains(&0) {
            return Err(Error::Empty("sequence"));
        }
        let max_len = *lens.iter().max().unwrap();
        let mut ids = vec![pad; seqs.len() * max_len];
        for (row, s) in ids.chunks_exact_mut(max_len).zip(seqs) {
            row[..s.as_ref().len()].copy_from_slice(s.as_ref());
        }
        Ok(SeqBatch { ids, lens, max_len })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.max_len..b * self.max_len + self.lens[b]]
    }

    /// `true` on real tokens.
    pub fn mask(&self) -> Vec<bool> {
        self.lens
            .iter()
            .flat_map(|&l| (0..self.max_len).map(move |t| t < l))
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.lens.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_model_dim() {
        let cfg = BlockConfig {
            heads: 3,
            ..BlockConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(BlockConfig::default().validate().is_ok());
    }

    #[test]
    fn padding_and_mask() {
        let b = SeqBatch::new(&[vec![5u32, 6, 7], vec![9]], 0).unwrap();
        assert_eq!(b.ids, vec![5, 6, 7, 9, 0, 0]);
        assert_eq!(b.mask().iter().filter(|&&m| m).count(), 4);
        assert_eq!(b.row(1), &[9]);
        assert!(SeqBatch::new(&[Vec::<u32>::new()], 0).is_err());
    }
}
