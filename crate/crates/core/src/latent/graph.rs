use rand::Rng;

use super::{length_transform_matrix, SharingMask, VAR_FLOOR};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Batched Gaussian statistics on a graph, each `[B, T_z, D_z]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianVars {
    pub mean: Var,
    pub var: Var,
}

/// Block of per-row interpolation matrices `[B, l_max, t_max]`. Rows past
/// `out_lens[b]` and columns past `src_lens[b]` are zero.
pub fn lt_batch_matrix<S: Scalar>(
    src_lens: &[usize],
    t_max: usize,
    out_lens: &[usize],
    l_max: usize,
) -> Result<Tensor<S>> {
    if src_lens.len() != out_lens.len() {
        return Err(Error::shape("length transform", "batch sizes differ"));
    }
    let mut data = vec![S::zero(); src_lens.len() * l_max * t_max];
    for (b, (&t, &l)) in src_lens.iter().zip(out_lens).enumerate() {
        if t > t_max || l > l_max {
            return Err(Error::shape("length transform", format!("{t}->{l} in {t_max}->{l_max}")));
        }
        let w = length_transform_matrix(t, l)?;
        let block = &mut data[b * l_max * t_max..(b + 1) * l_max * t_max];
        for i in 0..l {
            for j in 0..t {
                block[i * t_max + j] = S::of(w[i * t + j]);
            }
        }
    }
    Tensor::new(vec![src_lens.len(), l_max, t_max], data)
}

/// Resamples `x: [B, T, D]` row-wise from `src_lens` to `out_lens`, giving `[B, l_max, D]`.
pub fn length_transform_var<S: Scalar>(
    g: &mut Graph<'_, S>,
    x: Var,
    src_lens: &[usize],
    out_lens: &[usize],
    l_max: usize,
) -> Result<Var> {
    let t_max = g.shape(x)[1];
    let m = g.constant(lt_batch_matrix(src_lens, t_max, out_lens, l_max)?);
    g.matmul(m, x)
}

/// Linear mean and softplus variance heads followed by length transformation.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub mean: Linear,
    pub var: Linear,
    pub d_z: usize,
}

impl GaussianHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_h: usize,
        d_z: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(GaussianHead {
            mean: Linear::new(store, &format!("{name}.mean"), d_h, d_z, true, rng)?,
            var: Linear::new(store, &format!("{name}.var"), d_h, d_z, true, rng)?,
            d_z,
        })
    }

    /// `h: [B, T, D_h]` with row lengths `lens`; returns statistics over `t_z`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h: Var,
        lens: &[usize],
        t_z: usize,
    ) -> Result<GaussianVars> {
        let out_lens = vec![t_z; lens.len()];
        let m = self.mean.forward(g, h)?;
        let v = self.var.forward(g, h)?;
        let v = g.softplus(v);
        let v = g.clamp_min(v, S::of(VAR_FLOOR));
        if !g.value(m).all_finite() || !g.value(v).all_finite() {
            return Err(Error::NonFinite("gaussian head activations".into()));
        }
        Ok(GaussianVars {
            mean: length_transform_var(g, m, lens, &out_lens, t_z)?,
            var: length_transform_var(g, v, lens, &out_lens, t_z)?,
        })
    }
}

/// Precision-weighted fusion on every dimension.
pub fn fuse_shared_vars<S: Scalar>(
    g: &mut Graph<'_, S>,
    q_x: GaussianVars,
    q_y: GaussianVars,
) -> Result<GaussianVars> {
    let total = g.add(q_x.var, q_y.var)?;
    let prod = g.mul(q_x.var, q_y.var)?;
    let var = g.div(prod, total)?;
    let a = g.mul(q_x.mean, q_y.var)?;
    let b = g.mul(q_y.mean, q_x.var)?;
    let num = g.add(a, b)?;
    let mean = g.div(num, total)?;
    Ok(GaussianVars { mean, var })
}

/// Takes `fused` on shared dimensions and `keep` elsewhere.
pub fn select_vars<S: Scalar>(
    g: &mut Graph<'_, S>,
    fused: GaussianVars,
    keep: GaussianVars,
    mask: &SharingMask,
) -> Result<GaussianVars> {
    if mask.all_shared() {
        return Ok(fused);
    }
    if mask.shared == 0 {
        return Ok(keep);
    }
    let on: Vec<S> = mask.mask.iter().map(|&m| if m { S::one() } else { S::zero() }).collect();
    let off: Vec<S> = on.iter().map(|&m| S::one() - m).collect();
    let d = mask.d_z();
    let on = g.constant(Tensor::new(vec![d], on)?);
    let off = g.constant(Tensor::new(vec![d], off)?);
    let mut pick = |a: Var, b: Var| -> Result<Var> {
        let a = g.mul(a, on)?;
        let b = g.mul(b, off)?;
        g.add(a, b)
    };
    Ok(GaussianVars {
        mean: pick(fused.mean, keep.mean)?,
        var: pick(fused.var, keep.var)?,
    })
}

pub fn fuse_vars<S: Scalar>(
    g: &mut Graph<'_, S>,
    q_x: GaussianVars,
    q_y: GaussianVars,
    mask: &SharingMask,
    keep: super::Side,
) -> Result<GaussianVars> {
    let fused = fuse_shared_vars(g, q_x, q_y)?;
    let kept = match keep {
        super::Side::X => q_x,
        super::Side::Y => q_y,
    };
    select_vars(g, fused, kept, mask)
}

/// Element-wise `KL(q || p)`, same shape as the inputs.
pub fn kl_vars<S: Scalar>(g: &mut Graph<'_, S>, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let lp = g.log(p.var);
    let lq = g.log(q.var);
    let log_ratio = g.sub(lp, lq)?;
    let log_ratio = g.scale(log_ratio, S::of(0.5));
    let d = g.sub(q.mean, p.mean)?;
    let d2 = g.mul(d, d)?;
    let num = g.add(q.var, d2)?;
    let den = g.scale(p.var, S::of(2.0));
    let quad = g.div(num, den)?;
    let kl = g.add(log_ratio, quad)?;
    Ok(g.add_scalar(kl, S::of(-0.5)))
}

/// `mean + sqrt(var) * noise`; the noise is a constant.
pub fn reparameterize_vars<S: Scalar>(
    g: &mut Graph<'_, S>,
    q: GaussianVars,
    noise: Tensor<S>,
) -> Result<Var> {
    if g.shape(q.mean) != noise.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("{:?} vs noise {:?}", g.shape(q.mean), noise.shape()),
        ));
    }
    let sd = g.sqrt(q.var);
    let e = g.constant(noise);
    let scaled = g.mul(sd, e)?;
    g.add(q.mean, scaled)
}
