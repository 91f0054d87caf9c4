use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::LatentMatrix;
use crate::error::{Error, Result};

/// Ridge added to both covariance diagonals.
const RIDGE: f64 = 1e-6;

/// Linear CCA between source-side and target-side latents.
#[derive(Clone, Debug)]
pub struct CcaModel {
    pub k: usize,
    pub mean_src: DVector<f64>,
    pub mean_tgt: DVector<f64>,
    /// `cols x k` projections to canonical coordinates.
    pub proj_src: DMatrix<f64>,
    pub proj_tgt: DMatrix<f64>,
    /// Non-increasing, in `[0, 1]`.
    pub correlations: Vec<f64>,
    /// Least-squares map `k x k` from target canonical coordinates to
    /// source canonical coordinates, fitted on the training rows.
    pub regression: DMatrix<f64>,
}

fn centered(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let mean: DVector<f64> = m.row_sum().transpose() / n;
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    (c, mean)
}

/// `(C + εI)^{-1/2}` of a covariance, with the rank of the unridged `C`
/// (eigenvalues above a relative threshold).
fn inv_sqrt(c: DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let p = c.nrows();
    let eig = SymmetricEigen::new(c + DMatrix::identity(p, p) * RIDGE);
    let raw = eig.eigenvalues.map(|l| l - RIDGE);
    let top = raw.iter().cloned().fold(0.0, f64::max);
    let rank = raw.iter().filter(|&&l| l > top * 1e-10 && l > 0.0).count();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt()));
    (&eig.eigenvectors * d * eig.eigenvectors.transpose(), rank)
}

fn check_pair(a: &LatentMatrix, b: &LatentMatrix) -> Result<()> {
    if a.rows != b.rows {
        return Err(Error::shape("cca", format!("{} source rows vs {} target rows", a.rows, b.rows)));
    }
    Ok(())
}

/// Fits `k` canonical directions: whitens both sides with their ridged
/// covariances and takes the SVD of the whitened cross-covariance.
pub fn cca_fit(src: &LatentMatrix, tgt: &LatentMatrix, k: usize) -> Result<CcaModel> {
    check_pair(src, tgt)?;
    let n = src.rows;
    if k == 0 || n < 2 || k > (n - 1).min(src.cols).min(tgt.cols) {
        return Err(Error::invalid(format!(
            "k = {k} must lie in [1, min(rows - 1, width)] for {n} rows of widths {} and {}",
            src.cols, tgt.cols
        )));
    }
    let (xs, mean_src) = centered(&src.to_matrix());
    let (ys, mean_tgt) = centered(&tgt.to_matrix());
    let scale = 1.0 / (n as f64 - 1.0);
    let cxx = xs.tr_mul(&xs) * scale;
    let cyy = ys.tr_mul(&ys) * scale;
    let cxy = xs.tr_mul(&ys) * scale;
    let (wx, rank_x) = inv_sqrt(cxx);
    let (wy, rank_y) = inv_sqrt(cyy);
    if rank_x < k || rank_y < k {
        return Err(Error::Degenerate(format!(
            "latent covariances have rank {rank_x} and {rank_y}, fewer than k = {k}"
        )));
    }
    let m = &wx * cxy * &wy;
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let order = &order[..k];
    let u_k = DMatrix::from_columns(&order.iter().map(|&i| u.column(i).into_owned()).collect::<Vec<_>>());
    let v_k = DMatrix::from_columns(&order.iter().map(|&i| vt.row(i).transpose()).collect::<Vec<_>>());
    let proj_src = wx * u_k;
    let proj_tgt = wy * v_k;
    let correlations = order
        .iter()
        .map(|&i| svd.singular_values[i].clamp(0.0, 1.0))
        .collect();
    let cs = &xs * &proj_src;
    let ct = &ys * &proj_tgt;
    let regression = ct
        .clone()
        .svd(true, true)
        .solve(&cs, 1e-12)
        .map_err(|e| Error::Degenerate(format!("canonical regression: {e}")))?;
    Ok(CcaModel {
        k,
        mean_src,
        mean_tgt,
        proj_src,
        proj_tgt,
        correlations,
        regression,
    })
}

/// R² of predicting source canonical coordinates from target ones:
/// `1 - sum ||c_src - pred||^2 / sum ||c_src - mean(c_src)||^2`.
pub fn cca_score(model: &CcaModel, src: &LatentMatrix, tgt: &LatentMatrix) -> Result<f64> {
    check_pair(src, tgt)?;
    if src.cols != model.mean_src.len() || tgt.cols != model.mean_tgt.len() {
        return Err(Error::shape(
            "cca_score",
            format!(
                "model widths {}/{} vs matrices {}/{}",
                model.mean_src.len(),
                model.mean_tgt.len(),
                src.cols,
                tgt.cols
            ),
        ));
    }
    let shift = |m: &LatentMatrix, mean: &DVector<f64>| {
        let mut x = m.to_matrix();
        for mut row in x.row_iter_mut() {
            row -= mean.transpose();
        }
        x
    };
    let cs = shift(src, &model.mean_src) * &model.proj_src;
    let ct = shift(tgt, &model.mean_tgt) * &model.proj_tgt;
    let pred = ct * &model.regression;
    let resid = (&cs - pred).norm_squared();
    let (centered_cs, _) = centered(&cs);
    let total = centered_cs.norm_squared();
    if total == 0.0 {
        return Err(Error::Degenerate("held-out canonical coordinates have no variance".into()));
    }
    Ok(1.0 - resid / total)
}
