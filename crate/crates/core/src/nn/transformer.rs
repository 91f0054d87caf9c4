use rand::Rng;

use super::{AttentionMask, BlockConfig, FeedForward, LayerNorm, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Fixed sinusoidal encodings `[max_positions, dim]`.
pub fn sinusoidal_table<S: Scalar>(max_positions: usize, dim: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); max_positions * dim];
    for (pos, row) in data.chunks_exact_mut(dim).enumerate() {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            row[2 * i] = S::of(angle.sin());
            row[2 * i + 1] = S::of(angle.cos());
        }
    }
    Tensor::new(vec![max_positions, dim], data).expect("positive table dims")
}

/// The first `len` rows of a positional table.
pub fn positions<S: Scalar>(table: &Tensor<S>, len: usize) -> Result<Tensor<S>> {
    let (max, dim) = (table.shape()[0], table.shape()[1]);
    if len > max {
        return Err(Error::invalid(format!(
            "sequence length {len} exceeds max positions {max}"
        )));
    }
    Tensor::new(vec![len, dim], table.data()[..len * dim].to_vec())
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm Transformer encoder stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    dropout: f64,
}

impl Encoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &BlockConfig,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Ok(EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), d)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads, rng)?,
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d)?,
                    ff: FeedForward::new(store, &p, d, cfg.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            dropout: cfg.dropout,
        })
    }

    /// `x: [B, T, D]` with per-row lengths; returns `[B, T, D]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, lens: &[usize]) -> Result<Var> {
        let t = g.shape(x)[1];
        let mask = AttentionMask::padding(lens, t, t, false);
        let mut h = g.dropout(x, self.dropout)?;
        for layer in &self.layers {
            let n = layer.attn_norm.forward(g, h)?;
            let a = layer.attn.forward(g, n, n, n, Some(&mask), self.dropout)?;
            let a = g.dropout(a, self.dropout)?;
            h = g.add(h, a)?;
            let n = layer.ff_norm.forward(g, h)?;
            let f = layer.ff.forward(g, n, self.dropout)?;
            let f = g.dropout(f, self.dropout)?;
            h = g.add(h, f)?;
        }
        self.norm.forward(g, h)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

/// Pre-norm Transformer decoder stack with cross-attention. Causal self
/// attention for autoregressive use, full self attention otherwise.
#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    dropout: f64,
    pub causal: bool,
}

impl Decoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &BlockConfig,
        layers: usize,
        causal: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Ok(DecoderLayer {
                    self_norm: LayerNorm::new(store, &format!("{p}.self_norm"), d)?,
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, cfg.heads, rng)?,
                    cross_norm: LayerNorm::new(store, &format!("{p}.cross_norm"), d)?,
                    cross_attn: MultiHeadAttention::new(store, &format!("{p}.cross"), d, cfg.heads, rng)?,
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), d)?,
                    ff: FeedForward::new(store, &p, d, cfg.ffn_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Decoder {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
            dropout: cfg.dropout,
            causal,
        })
    }

    /// `x: [B, L, D]` decoder inputs, `memory: [B, T, D]`; returns `[B, L, D]`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        lens: &[usize],
        memory: Var,
        memory_lens: &[usize],
    ) -> Result<Var> {
        let (l, t) = (g.shape(x)[1], g.shape(memory)[1]);
        if l == 0 || t == 0 {
            return Err(Error::Empty("decoder input"));
        }
        let self_mask = AttentionMask::padding(lens, l, l, self.causal);
        let cross_mask = AttentionMask::padding(memory_lens, l, t, false);
        let mut h = g.dropout(x, self.dropout)?;
        for layer in &self.layers {
            let n = layer.self_norm.forward(g, h)?;
            let a = layer.self_attn.forward(g, n, n, n, Some(&self_mask), self.dropout)?;
            let a = g.dropout(a, self.dropout)?;
            h = g.add(h, a)?;
            let n = layer.cross_norm.forward(g, h)?;
            let c = layer
                .cross_attn
                .forward(g, n, memory, memory, Some(&cross_mask), self.dropout)?;
            let c = g.dropout(c, self.dropout)?;
            h = g.add(h, c)?;
            let n = layer.ff_norm.forward(g, h)?;
            let f = layer.ff.forward(g, n, self.dropout)?;
            let f = g.dropout(f, self.dropout)?;
            h = g.add(h, f)?;
        }
        self.norm.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> BlockConfig {
        BlockConfig {
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            layers: 1,
            dropout: 0.0,
            max_positions: 16,
        }
    }

    fn random(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sinusoidal_first_row() {
        let pe = sinusoidal_table::<f64>(4, 6);
        assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[6] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn causal_decoder_ignores_future_inputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::new(&mut store, "dec", &cfg(), 2, true, &mut rng).unwrap();
        let mem = random(vec![1, 3, 8], 2);
        let x = random(vec![1, 4, 8], 3);
        let mut y = x.clone();
        for v in &mut y.data_mut()[2 * 8..] {
            *v += 0.7;
        }
        let run = |input: &Tensor<f64>| {
            let mut g = Graph::with_params(&store, Mode::Eval);
            let xv = g.constant(input.clone());
            let m = g.constant(mem.clone());
            let out = dec.forward(&mut g, xv, &[4], m, &[3]).unwrap();
            g.value(out).data().to_vec()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(&a[..16], &b[..16]);
        assert_ne!(&a[16..], &b[16..]);
    }

    #[test]
    fn nat_decoder_sees_every_position() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::new(&mut store, "dec", &cfg(), 1, false, &mut rng).unwrap();
        let mem = random(vec![1, 3, 8], 2);
        let x = random(vec![1, 4, 8], 3);
        let mut y = x.clone();
        y.data_mut()[0] += 0.5;
        let run = |input: &Tensor<f64>| {
            let mut g = Graph::with_params(&store, Mode::Eval);
            let xv = g.constant(input.clone());
            let m = g.constant(mem.clone());
            let out = dec.forward(&mut g, xv, &[4], m, &[3]).unwrap();
            g.value(out).data().to_vec()
        };
        let (a, b) = (run(&x), run(&y));
        for p in 0..4 {
            assert_ne!(&a[p * 8..(p + 1) * 8], &b[p * 8..(p + 1) * 8]);
        }
    }

    #[test]
    fn padding_does_not_leak_into_real_positions() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(&mut store, "enc", &cfg(), 2, &mut rng).unwrap();
        let x = random(vec![1, 5, 8], 9);
        let mut y = x.clone();
        for v in &mut y.data_mut()[3 * 8..] {
            *v = 100.0;
        }
        let run = |input: &Tensor<f64>| {
            let mut g = Graph::with_params(&store, Mode::Eval);
            let xv = g.constant(input.clone());
            let out = enc.forward(&mut g, xv, &[3]).unwrap();
            g.value(out).data()[..3 * 8].to_vec()
        };
        assert_eq!(run(&x), run(&y));
    }
}
