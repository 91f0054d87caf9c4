use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::SeqBatch;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let a = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let w: Vec<S> = (0..input * output).map(|_| S::of(dist.sample(rng))).collect();
        let w = store.add(format!("{name}.w"), Tensor::new(vec![input, output], w)?)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(vec![output]))?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(vec![dim], S::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), dim, hidden, true, rng)?,
            outer: Linear::new(store, &format!("{name}.ff2"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, dropout)?;
        self.outer.forward(g, h)
    }
}

/// Token embedding table `[V, D]`, also used as the tied output projection.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dist = Normal::new(0.0, (dim as f64).powf(-0.5)).expect("finite std");
        let data: Vec<S> = (0..vocab * dim).map(|_| S::of(dist.sample(rng))).collect();
        let table = store.add(format!("{name}.table"), Tensor::new(vec![vocab, dim], data)?)?;
        Ok(Embedding { table, vocab, dim })
    }

    /// `sqrt(D) * E[ids] + PE`, shape `[B, T, D]`.
    pub fn embed<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        batch: &SeqBatch,
        positions: &Tensor<S>,
    ) -> Result<Var> {
        let table = g.param(self.table);
        let e = g.embedding(table, &batch.ids, &[batch.batch_size(), batch.max_len])?;
        let e = g.scale(e, S::of((self.dim as f64).sqrt()));
        let pe = g.constant(super::positions(positions, batch.max_len)?);
        g.add(e, pe)
    }

    /// `h E^T`: logits over the vocabulary.
    pub fn project<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> Result<Var> {
        let table = g.param(self.table);
        let t = g.transpose(table, 0, 1)?;
        g.matmul(h, t)
    }
}
