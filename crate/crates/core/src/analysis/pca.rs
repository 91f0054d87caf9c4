use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use super::{language, LatentMatrix};
use crate::error::{Error, Result};
use crate::latent::Side;

#[derive(Clone, Debug)]
pub struct PcaProjection {
    /// `rows x dims`, both sides stacked (source first).
    pub coords: DMatrix<f64>,
    pub labels: Vec<Side>,
    pub ids: Vec<usize>,
    /// Fraction of total variance per kept component, non-increasing.
    pub explained: Vec<f64>,
}

impl PcaProjection {
    /// `sentence_id,language,pc1,...` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sentence_id,language");
        for j in 0..self.coords.ncols() {
            write!(out, ",pc{}", j + 1).unwrap();
        }
        out.push('\n');
        for i in 0..self.coords.nrows() {
            write!(out, "{},{}", self.ids[i], language(self.labels[i])).unwrap();
            for v in self.coords.row(i).iter() {
                write!(out, ",{v:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn stacked(a: &LatentMatrix, b: &LatentMatrix) -> Result<(DMatrix<f64>, Vec<Side>, Vec<usize>)> {
    if a.cols != b.cols {
        return Err(Error::shape("latent stack", format!("widths {} and {}", a.cols, b.cols)));
    }
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    let m = DMatrix::from_row_slice(a.rows + b.rows, a.cols, &data);
    let labels = std::iter::repeat(a.side)
        .take(a.rows)
        .chain(std::iter::repeat(b.side).take(b.rows))
        .collect();
    let ids = a.ids.iter().chain(&b.ids).copied().collect();
    Ok((m, labels, ids))
}

/// Joint PCA over both sides.
pub fn pca_project(a: &LatentMatrix, b: &LatentMatrix, dims: usize) -> Result<PcaProjection> {
    let (mut m, labels, ids) = stacked(a, b)?;
    let n = m.nrows();
    if n < 3 {
        return Err(Error::invalid(format!("PCA needs at least 3 rows, got {n}")));
    }
    if dims == 0 || dims > m.ncols() {
        return Err(Error::invalid(format!("cannot keep {dims} of {} components", m.ncols())));
    }
    let mean = m.row_sum() / n as f64;
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let cov = m.tr_mul(&m) / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("all latent rows are identical".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let order = &order[..dims];
    let basis = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    let explained = order.iter().map(|&i| eig.eigenvalues[i].max(0.0) / total).collect();
    Ok(PcaProjection {
        coords: m * basis,
        labels,
        ids,
        explained,
    })
}

/// Mean fraction of each row's `k` nearest neighbours (Euclidean, over
/// both sides, excluding itself) that come from the same language. Around
/// 0.5 means the languages are mixed; 1.0 means fully separated.
pub fn knn_purity(a: &LatentMatrix, b: &LatentMatrix, k: usize) -> Result<f64> {
    let (m, labels, _) = stacked(a, b)?;
    let n = m.nrows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} neighbours among {n} rows")));
    }
    let sq: Vec<f64> = m.row_iter().map(|r| r.norm_squared()).collect();
    let gram = &m * m.transpose();
    let mut same = 0usize;
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (sq[i] + sq[j] - 2.0 * gram[(i, j)], j))
            .collect();
        d.select_nth_unstable_by(k - 1, |p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        same += d[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count();
    }
    Ok(same as f64 / (n * k) as f64)
}
