use rand::Rng;

use super::Linear;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Var};

/// Disallowed key positions per `(batch, query, key)`; `true` = masked.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub disallowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, queries: usize, keys: usize, disallowed: Vec<bool>) -> Result<Self> {
        if disallowed.len() != batch * queries * keys {
            return Err(Error::shape(
                "attention mask",
                format!("{} entries for {batch}x{queries}x{keys}", disallowed.len()),
            ));
        }
        Ok(AttentionMask {
            batch,
            queries,
            keys,
            disallowed,
        })
    }

    /// Masks keys at or beyond each row's length, plus future keys when `causal`.
    pub fn padding(key_lens: &[usize], queries: usize, keys: usize, causal: bool) -> Self {
        let mut disallowed = Vec::with_capacity(key_lens.len() * queries * keys);
        for &len in key_lens {
            for q in 0..queries {
                disallowed.extend((0..keys).map(|k| k >= len || (causal && k > q)));
            }
        }
        AttentionMask {
            batch: key_lens.len(),
            queries,
            keys,
            disallowed,
        }
    }

    fn per_head(&self, heads: usize) -> Vec<bool> {
        let block = self.queries * self.keys;
        self.disallowed
            .chunks_exact(block)
            .flat_map(|b| std::iter::repeat(b).take(heads).flatten().copied())
            .collect()
    }
}

/// Scaled dot-product attention over `heads` heads with input and output
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide {dim}")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        queries: Var,
        keys: Var,
        values: Var,
        mask: Option<&AttentionMask>,
        dropout: f64,
    ) -> Result<Var> {
        self.forward_with_weights(g, queries, keys, values, mask, dropout)
            .map(|(out, _)| out)
    }

    /// Also returns the attention weights `[B, heads, Tq, Tk]`.
    pub fn forward_with_weights<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        queries: Var,
        keys: Var,
        values: Var,
        mask: Option<&AttentionMask>,
        dropout: f64,
    ) -> Result<(Var, Var)> {
        let (sq, sk) = (g.shape(queries).to_vec(), g.shape(keys).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(Error::shape("attention", format!("queries {sq:?}, keys {sk:?}")));
        }
        if g.shape(values) != sk.as_slice() {
            return Err(Error::shape(
                "attention",
                format!("keys {sk:?}, values {:?}", g.shape(values)),
            ));
        }
        let (b, tq, tk) = (sq[0], sq[1], sk[1]);
        if let Some(m) = mask {
            if (m.batch, m.queries, m.keys) != (b, tq, tk) {
                return Err(Error::shape(
                    "attention mask",
                    format!("{}x{}x{} for {b}x{tq}x{tk}", m.batch, m.queries, m.keys),
                ));
            }
        }
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |g: &mut Graph<'_, S>, x: Var, t: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, t, h, dh])?;
            g.transpose(x, 1, 2)
        };
        let q = self.q.forward(g, queries)?;
        let q = split(g, q, tq)?;
        let k = self.k.forward(g, keys)?;
        let k = split(g, k, tk)?;
        let k = g.transpose(k, 2, 3)?;
        let v = self.v.forward(g, values)?;
        let v = split(g, v, tk)?;
        let scores = g.matmul(q, k)?;
        let scores = g.scale(scores, S::of((dh as f64).powf(-0.5)));
        let expanded = mask.map(|m| m.per_head(h));
        let weights = g.softmax_masked(scores, expanded.as_deref())?;
        let dropped = g.dropout(weights, dropout)?;
        let ctx = g.matmul(dropped, v)?;
        let ctx = g.transpose(ctx, 1, 2)?;
        let ctx = g.reshape(ctx, &[b, tq, self.dim])?;
        Ok((self.o.forward(g, ctx)?, weights))
    }
}
