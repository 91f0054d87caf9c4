//! Closed-form latent mathematics.
//!
//! Each operation exists twice: as a pure function over flat `T_z x D_z`
//! arrays ([`GaussianSeq`]) and as a graph builder over batched variables
//! ([`GaussianVars`]) used in training. The pure versions are the reference
//! the graph versions are tested against.

mod graph;

pub use graph::{
    fuse_shared_vars, fuse_vars, kl_vars, length_transform_var, lt_batch_matrix,
    reparameterize_vars, select_vars, GaussianHead, GaussianVars,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower bound applied to every variance after the softplus head.
pub const VAR_FLOOR: f64 = 1e-8;

/// Per-position, per-dimension Gaussian `N(mean, var)` over `t_z x d_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSeq<S> {
    pub t_z: usize,
    pub d_z: usize,
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> GaussianSeq<S> {
    pub fn new(t_z: usize, d_z: usize, mean: Vec<S>, var: Vec<S>) -> Result<Self> {
        if mean.len() != t_z * d_z || var.len() != t_z * d_z {
            return Err(Error::shape(
                "gaussian",
                format!("{} means / {} variances for {t_z}x{d_z}", mean.len(), var.len()),
            ));
        }
        check_variances(&var)?;
        Ok(GaussianSeq { t_z, d_z, mean, var })
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if (self.t_z, self.d_z) != (other.t_z, other.d_z) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.t_z, self.d_z, other.t_z, other.d_z),
            ));
        }
        Ok(())
    }
}

fn check_variances<S: Scalar>(var: &[S]) -> Result<()> {
    match var.iter().find(|v| !(v.is_finite() && **v > S::zero())) {
        Some(v) => Err(Error::NonPositiveVariance(v.as_f64())),
        None => Ok(()),
    }
}

/// Which encoder's statistics fill the non-shared dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    X,
    Y,
}

/// Shared latent dimensions: the leading `round(d_z * rho)` coordinates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingMask {
    pub shared: usize,
    pub mask: Vec<bool>,
}

impl SharingMask {
    pub fn d_z(&self) -> usize {
        self.mask.len()
    }

    pub fn all_shared(&self) -> bool {
        self.shared == self.mask.len()
    }
}

pub fn make_sharing_mask(d_z: usize, rho: f64) -> Result<SharingMask> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("sharing ratio {rho} outside [0, 1]")));
    }
    let shared = (d_z as f64 * rho).round() as usize;
    Ok(SharingMask {
        shared,
        mask: (0..d_z).map(|n| n < shared).collect(),
    })
}

/// Interpolation weights `[l, t]` for resampling a length-`t` sequence to
/// length `l`. Output `i` reads continuous coordinate `i (t-1)/(l-1)`; a
/// single output averages all positions.
pub fn length_transform_matrix(t: usize, l: usize) -> Result<Vec<f64>> {
    if t == 0 || l == 0 {
        return Err(Error::invalid(format!("length transform {t} -> {l}")));
    }
    let mut w = vec![0.0; l * t];
    if l == 1 {
        w.iter_mut().for_each(|v| *v = 1.0 / t as f64);
        return Ok(w);
    }
    for i in 0..l {
        let (lo, frac) = source_coordinate(i, t, l);
        w[i * t + lo] += 1.0 - frac;
        if frac > 0.0 {
            w[i * t + lo + 1] += frac;
        }
    }
    Ok(w)
}

/// Integer part and fraction of `i (t-1)/(l-1)`, exact when it is integral.
fn source_coordinate(i: usize, t: usize, l: usize) -> (usize, f64) {
    let num = i * (t - 1);
    let den = l - 1;
    let lo = (num / den).min(t - 1);
    let frac = (num - lo * den) as f64 / den as f64;
    (lo, frac)
}

/// Resamples `seq: [t, dim]` to `[l, dim]`.
pub fn length_transform<S: Scalar>(seq: &[S], t: usize, dim: usize, l: usize) -> Result<Vec<S>> {
    if seq.len() != t * dim {
        return Err(Error::shape("length transform", format!("{} values for {t}x{dim}", seq.len())));
    }
    let w = length_transform_matrix(t, l)?;
    let mut out = vec![S::zero(); l * dim];
    for (i, row) in out.chunks_exact_mut(dim).enumerate() {
        for (j, &wij) in w[i * t..(i + 1) * t].iter().enumerate() {
            if wij == 0.0 {
                continue;
            }
            let wij = S::of(wij);
            for (o, &s) in row.iter_mut().zip(&seq[j * dim..(j + 1) * dim]) {
                *o += wij * s;
            }
        }
    }
    Ok(out)
}

/// Precision-weighted fusion on shared dimensions; non-shared dimensions copy
/// the `keep` side.
pub fn fuse_gaussians<S: Scalar>(
    q_x: &GaussianSeq<S>,
    q_y: &GaussianSeq<S>,
    mask: &SharingMask,
    keep: Side,
) -> Result<GaussianSeq<S>> {
    q_x.same_shape(q_y, "fuse")?;
    if mask.d_z() != q_x.d_z {
        return Err(Error::shape("fuse", format!("mask of {} for d_z {}", mask.d_z(), q_x.d_z)));
    }
    check_variances(&q_x.var)?;
    check_variances(&q_y.var)?;
    let kept = match keep {
        Side::X => q_x,
        Side::Y => q_y,
    };
    let mut out = kept.clone();
    for idx in 0..q_x.mean.len() {
        if mask.mask[idx % q_x.d_z] {
            let (px, py) = (q_x.var[idx].recip(), q_y.var[idx].recip());
            let var = (px + py).recip();
            out.var[idx] = var;
            out.mean[idx] = (q_x.mean[idx] * px + q_y.mean[idx] * py) * var;
        }
    }
    Ok(out)
}

/// Element-wise `KL(q || p)` between diagonal Gaussians.
pub fn kl_gaussian<S: Scalar>(q: &GaussianSeq<S>, p: &GaussianSeq<S>) -> Result<Vec<S>> {
    q.same_shape(p, "kl")?;
    check_variances(&q.var)?;
    check_variances(&p.var)?;
    let half = S::of(0.5);
    Ok((0..q.mean.len())
        .map(|i| {
            let d = q.mean[i] - p.mean[i];
            half * (p.var[i] / q.var[i]).ln() + (q.var[i] + d * d) / (p.var[i] + p.var[i]) - half
        })
        .collect())
}

/// `mean + sqrt(var) * noise`.
pub fn reparameterize<S: Scalar>(q: &GaussianSeq<S>, noise: &[S]) -> Result<Vec<S>> {
    if noise.len() != q.mean.len() {
        return Err(Error::shape("reparameterize", format!("{} noise values for {}", noise.len(), q.mean.len())));
    }
    Ok(q.mean
        .iter()
        .zip(&q.var)
        .zip(noise)
        .map(|((&m, &v), &e)| m + v.sqrt() * e)
        .collect())
}

#[cfg(test)]
mod tests;
