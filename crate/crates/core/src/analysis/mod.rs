//! Latent-space diagnostics: CCA alignment between the two languages'
//! prior means, posterior sensitivity to either input, and PCA / nearest
//! neighbour views of the raw latents.

mod cca;
mod pca;

pub use cca::{cca_fit, cca_score, CcaModel};
pub use pca::{knn_purity, pca_project, PcaProjection};

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ParallelPair, FIRST_CONTENT, PAD};
use crate::error::{Error, Result};
use crate::latent::Side;
use crate::models::{Direction, ModelBundle, ModelKind};
use crate::nn::SeqBatch;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Mode};

/// One flattened prior mean (`T_z * D_z` values) per sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMatrix {
    pub side: Side,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<f64>,
    /// Corpus index of each row.
    pub ids: Vec<usize>,
}

impl LatentMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

fn side_direction(side: Side) -> Direction {
    match side {
        Side::X => Direction::Forward,
        Side::Y => Direction::Reverse,
    }
}

/// Prior means of one side of `pairs`, computed by that side's encoder.
pub fn collect_latents<S: Scalar>(bundle: &ModelBundle<S>, pairs: &[ParallelPair], side: Side) -> Result<LatentMatrix> {
    if !bundle.kind().is_latent() {
        return Err(Error::invalid("latent analysis needs a latent model"));
    }
    if pairs.is_empty() {
        return Err(Error::Empty("latent corpus"));
    }
    let d = side_direction(side);
    let cols = bundle.t_z() * bundle.config.latent.d_z;
    let mut data = Vec::with_capacity(pairs.len() * cols);
    for chunk in pairs.chunks(64) {
        let rows: Vec<&[u32]> = chunk
            .iter()
            .map(|p| match side {
                Side::X => p.source.as_slice(),
                Side::Y => p.target.as_slice(),
            })
            .collect();
        let x = SeqBatch::new(&rows, PAD)?;
        let mut g = Graph::with_params(&bundle.store, Mode::Eval);
        let (_, prior) = bundle.prior(&mut g, d, &x)?;
        data.extend(g.value(prior.mean).data().iter().map(|v| v.as_f64()));
    }
    Ok(LatentMatrix {
        side,
        rows: pairs.len(),
        cols,
        data,
        ids: (0..pairs.len()).collect(),
    })
}

/// `sentence_id,language,z0,z1,...` rows for both sides.
pub fn latent_csv(a: &LatentMatrix, b: &LatentMatrix) -> String {
    let mut out = String::from("sentence_id,language");
    for j in 0..a.cols {
        write!(out, ",z{j}").unwrap();
    }
    out.push('\n');
    for m in [a, b] {
        for i in 0..m.rows {
            write!(out, "{},{}", m.ids[i], language(m.side)).unwrap();
            for v in m.row(i) {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn language(side: Side) -> &'static str {
    match side {
        Side::X => "source",
        Side::Y => "target",
    }
}

/// Posterior mean over `(x, y)` for the source-to-target direction: the
/// collaborative posterior for LadderNMT, the posterior network for LaNMT.
fn posterior_means<S: Scalar>(bundle: &ModelBundle<S>, xs: &[&[u32]], ys: &[&[u32]]) -> Result<Vec<f64>> {
    let (x, y) = (SeqBatch::new(xs, PAD)?, SeqBatch::new(ys, PAD)?);
    let mut g = Graph::with_params(&bundle.store, Mode::Eval);
    let q = match bundle.kind() {
        ModelKind::LaNmt => bundle.posterior_lanmt(&mut g, Direction::Forward, &x, &y)?,
        ModelKind::LadderNmt => bundle.posterior_ladder(&mut g, &x, &y, Side::Y)?,
        ModelKind::At => return Err(Error::invalid("sensitivity needs a latent model")),
    };
    Ok(g.value(q.mean).data().iter().map(|v| v.as_f64()).collect())
}

/// Replaces `n` distinct positions with uniformly drawn content tokens; a
/// draw may coincide with the original token.
fn perturb(tokens: &[u32], n: usize, vocab: usize, rng: &mut impl Rng) -> Vec<u32> {
    let mut out = tokens.to_vec();
    for pos in rand::seq::index::sample(rng, tokens.len(), n) {
        out[pos] = rng.gen_range(FIRST_CONTENT..vocab as u32);
    }
    out
}

fn mean_distance(base: &[f64], perturbed: &[f64], width: usize) -> f64 {
    let trials = perturbed.len() / width;
    perturbed
        .chunks_exact(width)
        .map(|row| row.iter().zip(base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum::<f64>()
        / trials as f64
}

/// Mean posterior displacement under source perturbations divided by that
/// under target perturbations. Trial `t` of pair `i` draws the same
/// positions and replacement tokens for both sides.
pub fn relative_sensitivity<S: Scalar>(
    bundle: &ModelBundle<S>,
    pairs: &[ParallelPair],
    words_changed: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let (s_src, s_tgt) = sensitivities(bundle, pairs, words_changed, trials, seed)?;
    if s_tgt == 0.0 {
        return Err(Error::Degenerate("posterior ignores target perturbations entirely".into()));
    }
    Ok(s_src / s_tgt)
}

/// `(S_src, S_tgt)`, each averaged over pairs and trials.
pub fn sensitivities<S: Scalar>(
    bundle: &ModelBundle<S>,
    pairs: &[ParallelPair],
    words_changed: usize,
    trials: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Empty("sensitivity corpus"));
    }
    if words_changed == 0 || trials == 0 {
        return Err(Error::invalid("words_changed and trials must be positive"));
    }
    if let Some(p) = pairs
        .iter()
        .find(|p| p.source.len() < words_changed || p.target.len() < words_changed)
    {
        return Err(Error::invalid(format!(
            "sentence of length {} cannot have {words_changed} words changed",
            p.source.len().min(p.target.len())
        )));
    }
    let vocab = bundle.config.vocab;
    let width = bundle.t_z() * bundle.config.latent.d_z;
    let (mut s_src, mut s_tgt) = (0.0, 0.0);
    for (i, p) in pairs.iter().enumerate() {
        let mut xs = vec![p.source.clone()];
        let mut ys = vec![p.target.clone()];
        for t in 0..trials {
            let draw = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (t as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
            xs.push(perturb(&p.source, words_changed, vocab, &mut ChaCha8Rng::seed_from_u64(draw)));
            ys.push(perturb(&p.target, words_changed, vocab, &mut ChaCha8Rng::seed_from_u64(draw)));
        }
        let x_only = vec![p.source.as_slice(); trials + 1];
        let y_only = vec![p.target.as_slice(); trials + 1];
        let x_refs: Vec<&[u32]> = xs.iter().map(Vec::as_slice).collect();
        let y_refs: Vec<&[u32]> = ys.iter().map(Vec::as_slice).collect();
        // Row 0 of each batch is the unperturbed pair.
        let src = posterior_means(bundle, &x_refs, &y_only)?;
        let tgt = posterior_means(bundle, &x_only, &y_refs)?;
        s_src += mean_distance(&src[..width], &src[width..], width);
        s_tgt += mean_distance(&tgt[..width], &tgt[width..], width);
    }
    Ok((s_src / pairs.len() as f64, s_tgt / pairs.len() as f64))
}
