use rand::Rng;

use super::{ModelConfig, ModelKind, LENGTH_CLASSES, MAX_OFFSET};
use crate::error::{Error, Result};
use crate::latent::{length_transform_var, GaussianHead, GaussianVars};
use crate::nn::{Decoder, Embedding, Encoder, Linear, SeqBatch};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Mean-pooled `Z` (projected to `D_h`) plus mean-pooled `H`, then a linear
/// map to logits over target-minus-source length offsets.
#[derive(Clone, Debug)]
pub struct LengthPredictor {
    pub z_proj: Linear,
    pub out: Linear,
}

/// LaNMT's extra posterior network: encodes `y`, lets the `x` embeddings
/// attend over it, and reads Gaussian statistics off the result.
#[derive(Clone, Debug)]
pub struct PosteriorNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: GaussianHead,
}

/// One translation direction (`theta`: x to y, or `phi`: y to x).
///
/// Parameter names are `<side>.<component>.<...>` with components `enc`
/// (embedding, encoder, prior head), `len`, `dec` and `pos`.
#[derive(Clone, Debug)]
pub struct DirectionModel {
    pub side: String,
    pub embed: Embedding,
    pub encoder: Encoder,
    pub prior: Option<GaussianHead>,
    pub length: Option<LengthPredictor>,
    pub latent_in: Option<Linear>,
    pub decoder: Decoder,
    pub out_bias: ParamId,
    pub posterior: Option<PosteriorNet>,
}

impl DirectionModel {
    pub(crate) fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        side: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let b = &cfg.block;
        let (d_h, d_z) = (b.d_model, cfg.latent.d_z);
        let latent = cfg.kind != ModelKind::At;
        let enc = format!("{side}.enc");
        let embed = Embedding::new(store, &format!("{enc}.embed"), cfg.vocab, d_h, rng)?;
        let encoder = Encoder::new(store, &enc, b, b.layers, rng)?;
        let prior = if latent {
            Some(GaussianHead::new(store, &format!("{enc}.prior"), d_h, d_z, rng)?)
        } else {
            None
        };
        let length = if latent {
            let len = format!("{side}.len");
            Some(LengthPredictor {
                z_proj: Linear::new(store, &format!("{len}.z_proj"), d_z, d_h, true, rng)?,
                out: Linear::new(store, &format!("{len}.out"), d_h, LENGTH_CLASSES, true, rng)?,
            })
        } else {
            None
        };
        let dec = format!("{side}.dec");
        let latent_in = if latent {
            Some(Linear::new(store, &format!("{dec}.latent_in"), d_z, d_h, true, rng)?)
        } else {
            None
        };
        let decoder = Decoder::new(store, &dec, b, b.layers, !latent, rng)?;
        let out_bias = store.add(format!("{dec}.out_bias"), Tensor::zeros(vec![cfg.vocab]))?;
        let posterior = if cfg.kind == ModelKind::LaNmt {
            let pos = format!("{side}.pos");
            let n = cfg.posterior_layers;
            Some(PosteriorNet {
                encoder: Encoder::new(store, &format!("{pos}.enc"), b, n, rng)?,
                decoder: Decoder::new(store, &format!("{pos}.dec"), b, n, false, rng)?,
                head: GaussianHead::new(store, &format!("{pos}.head"), d_h, d_z, rng)?,
            })
        } else {
            None
        };
        Ok(DirectionModel {
            side: side.to_string(),
            embed,
            encoder,
            prior,
            length,
            latent_in,
            decoder,
            out_bias,
            posterior,
        })
    }

    fn check_vocab(&self, batch: &SeqBatch) -> Result<()> {
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.embed.vocab) {
            return Err(Error::OutOfVocabulary {
                id,
                vocab: self.embed.vocab,
            });
        }
        Ok(())
    }

    /// `H = encode(x)`, shape `[B, T, D_h]`.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        positions: &Tensor<S>,
        x: &SeqBatch,
    ) -> Result<Var> {
        self.check_vocab(x)?;
        g.counters.encoder_passes += 1;
        let e = self.embed.embed(g, x, positions)?;
        self.encoder.forward(g, e, &x.lens)
    }

    fn latent_part<'a, T>(part: &'a Option<T>, what: &str) -> Result<&'a T> {
        part.as_ref()
            .ok_or_else(|| Error::invalid(format!("model has no {what}")))
    }

    /// Gaussian head over encoder output.
    pub fn head<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h: Var,
        lens: &[usize],
        t_z: usize,
    ) -> Result<GaussianVars> {
        Self::latent_part(&self.prior, "prior head")?.forward(g, h, lens, t_z)
    }

    /// LaNMT posterior `q(z | x, y)`; `x` is this direction's input language.
    pub fn posterior_net<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        positions: &Tensor<S>,
        x: &SeqBatch,
        y: &SeqBatch,
        t_z: usize,
    ) -> Result<GaussianVars> {
        let post = Self::latent_part(&self.posterior, "posterior network")?;
        self.check_vocab(x)?;
        self.check_vocab(y)?;
        let ey = self.embed.embed(g, y, positions)?;
        let h_y = post.encoder.forward(g, ey, &y.lens)?;
        let ex = self.embed.embed(g, x, positions)?;
        let h_xy = post.decoder.forward(g, ex, &x.lens, h_y, &y.lens)?;
        post.head.forward(g, h_xy, &x.lens, t_z)
    }

    /// Logits `[B, 2*MAX_OFFSET+1]` over `l_target - l_source`.
    pub fn predict_length<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        z: Var,
        h: Var,
        lens: &[usize],
    ) -> Result<Var> {
        let lp = Self::latent_part(&self.length, "length predictor")?;
        g.counters.length_predictions += 1;
        let (b, t_z) = (g.shape(z)[0], g.shape(z)[1]);
        let t = g.shape(h)[1];
        let zp = lp.z_proj.forward(g, z)?;
        let pool_z = g.constant(pool_matrix(&vec![t_z; b], t_z)?);
        let pool_h = g.constant(pool_matrix(lens, t)?);
        let mz = g.matmul(pool_z, zp)?;
        let mh = g.matmul(pool_h, h)?;
        let pooled = g.add(mz, mh)?;
        let d = g.shape(pooled)[2];
        let pooled = g.reshape(pooled, &[b, d])?;
        lp.out.forward(g, pooled)
    }

    /// Non-autoregressive decoding from a latent sample `z: [B, T_z, D_z]`
    /// into `out_lens` positions; logits `[B, max(out_lens), V]`.
    pub fn decode_latent<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        positions: &Tensor<S>,
        z: Var,
        memory: Var,
        memory_lens: &[usize],
        out_lens: &[usize],
    ) -> Result<Var> {
        let latent_in = Self::latent_part(&self.latent_in, "latent decoder input")?;
        let (b, t_z) = (g.shape(z)[0], g.shape(z)[1]);
        let l_max = out_lens.iter().copied().max().ok_or(Error::Empty("decoder lengths"))?;
        if out_lens.contains(&0) {
            return Err(Error::Empty("decoder length"));
        }
        g.counters.decoder_passes += 1;
        let zl = length_transform_var(g, z, &vec![t_z; b], out_lens, l_max)?;
        let inp = latent_in.forward(g, zl)?;
        let pe = g.constant(crate::nn::positions(positions, l_max)?);
        let inp = g.add(inp, pe)?;
        let hid = self.decoder.forward(g, inp, out_lens, memory, memory_lens)?;
        self.logits(g, hid)
    }

    /// Causal decoding over a prefix that starts with the start token;
    /// logits `[B, P, V]`, where row `t` predicts token `t + 1`.
    pub fn decode_prefix<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        positions: &Tensor<S>,
        prefix: &SeqBatch,
        memory: Var,
        memory_lens: &[usize],
    ) -> Result<Var> {
        if !self.decoder.causal {
            return Err(Error::invalid("autoregressive decoding needs a causal decoder"));
        }
        self.check_vocab(prefix)?;
        g.counters.decoder_passes += 1;
        let e = self.embed.embed(g, prefix, positions)?;
        let hid = self.decoder.forward(g, e, &prefix.lens, memory, memory_lens)?;
        self.logits(g, hid)
    }

    fn logits<S: Scalar>(&self, g: &mut Graph<'_, S>, hid: Var) -> Result<Var> {
        let logits = self.embed.project(g, hid)?;
        let bias = g.param(self.out_bias);
        g.add(logits, bias)
    }
}

/// Row-wise averaging matrix `[B, 1, t_max]` over the first `lens[b]` positions.
fn pool_matrix<S: Scalar>(lens: &[usize], t_max: usize) -> Result<Tensor<S>> {
    let mut data = vec![S::zero(); lens.len() * t_max];
    for (row, &len) in data.chunks_exact_mut(t_max).zip(lens) {
        if len == 0 || len > t_max {
            return Err(Error::shape("mean pool", format!("length {len} in {t_max}")));
        }
        let w = S::of(1.0 / len as f64);
        row[..len].iter_mut().for_each(|v| *v = w);
    }
    Tensor::new(vec![lens.len(), 1, t_max], data)
}

/// Length-offset class for `target - source`, clamped to the class range.
pub fn offset_class(source_len: usize, target_len: usize) -> usize {
    let delta = target_len as i64 - source_len as i64;
    (delta.clamp(-MAX_OFFSET, MAX_OFFSET) + MAX_OFFSET) as usize
}

/// Target length implied by an offset class, at least 1 and at most `max_len`.
pub fn length_from_class(source_len: usize, class: usize, max_len: usize) -> usize {
    let l = source_len as i64 + class as i64 - MAX_OFFSET;
    l.clamp(1, max_len as i64) as usize
}
