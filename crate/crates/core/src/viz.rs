//! Two-dimensional PCA of embeddings and grouped scatter export.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Mean-centres the rows and projects them onto the top two principal
/// directions of the covariance. Each principal direction is signed so its
/// largest-magnitude loading is positive. Inputs with a single column get a
/// zero second component.
pub fn pca_2d(m: &Matrix) -> Result<Matrix> {
    let (n, d) = m.shape();
    if n < 2 {
        return Err(Error::Argument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if d == 0 {
        return Err(Error::Argument("PCA needs at least one column".into()));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (acc, &v) in mean.iter_mut().zip(m.row(i)) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| m.get(i, j) as f64 - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut out = Matrix::zeros(n, 2);
    for (comp, &idx) in order.iter().take(2).enumerate() {
        let mut dir: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = dir
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > dir[best].abs() { i } else { best });
        if dir[lead] < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        for i in 0..n {
            let score: f64 = centered.row(i).iter().zip(&dir).map(|(a, b)| a * b).sum();
            out.set(i, comp, score as f32);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ScatterGroup {
    pub label: String,
    pub embeddings: Matrix,
    pub ids: Vec<String>,
}

impl ScatterGroup {
    /// Ids default to `label:row`.
    pub fn new(label: impl Into<String>, embeddings: Matrix) -> Self {
        let label = label.into();
        let ids = (0..embeddings.rows()).map(|i| format!("{label}:{i}")).collect();
        Self { label, embeddings, ids }
    }

    pub fn with_ids(label: impl Into<String>, embeddings: Matrix, ids: Vec<String>) -> Result<Self> {
        if ids.len() != embeddings.rows() {
            return Err(Error::Argument(format!(
                "{} ids for {} embedding rows",
                ids.len(),
                embeddings.rows()
            )));
        }
        Ok(Self {
            label: label.into(),
            embeddings,
            ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub x: f64,
    pub y: f64,
    pub group: String,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterExport {
    pub rows: Vec<ScatterRow>,
}

/// PCA over the union of all groups, one output row per embedding.
pub fn scatter(groups: &[ScatterGroup]) -> Result<ScatterExport> {
    let first = groups
        .first()
        .ok_or_else(|| Error::Argument("scatter export needs at least one group".into()))?;
    let cols = first.embeddings.cols();
    let mut all = Matrix::zeros(0, cols);
    for g in groups {
        if g.embeddings.cols() != cols {
            return Err(Error::shape("export_scatter", first.embeddings.shape(), g.embeddings.shape()));
        }
        all = all.vstack(&g.embeddings)?;
    }
    let coords = pca_2d(&all)?;
    let mut rows = Vec::with_capacity(all.rows());
    let mut r = 0;
    for g in groups {
        for id in &g.ids {
            rows.push(ScatterRow {
                x: coords.get(r, 0) as f64,
                y: coords.get(r, 1) as f64,
                group: g.label.clone(),
                id: id.clone(),
            });
            r += 1;
        }
    }
    Ok(ScatterExport { rows })
}

/// Writes `x,y,group,id` CSV.
pub fn export_scatter(groups: &[ScatterGroup], path: &Path) -> Result<ScatterExport> {
    let export = scatter(groups)?;
    let mut w = csv::Writer::from_path(path)?;
    for row in &export.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(export)
}
