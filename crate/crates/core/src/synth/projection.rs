use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::feature_store::FeatureSet;

/// Top principal directions of a point cloud.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// One unit direction per column, by decreasing variance.
    pub components: DMatrix<f64>,
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits `n_components` directions to the rows of `x` (`[n, d]`).
    pub fn fit(x: &DMatrix<f64>, n_components: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || n_components == 0 || n_components > d {
            return Err(Error::InvalidInput(format!(
                "cannot fit {n_components} components to {n} points of dim {d}"
            )));
        }
        let mean = x.row_mean().transpose();
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = DMatrix::zeros(d, n_components);
        let mut variances = Vec::with_capacity(n_components);
        for (c, &i) in order.iter().take(n_components).enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            // sign convention: largest-magnitude entry positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v.neg_mut();
            }
            components.set_column(c, &v);
            variances.push(eig.eigenvalues[i].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * &self.components
    }

    pub fn reconstruct(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = y * self.components.transpose();
        for mut row in x.row_iter_mut() {
            row += self.mean.transpose();
        }
        x
    }
}

fn stack(sets: &[(String, FeatureSet)]) -> Result<DMatrix<f64>> {
    let dim = sets
        .iter()
        .find(|(_, s)| !s.is_empty())
        .map(|(_, s)| s.dim())
        .ok_or_else(|| Error::InvalidInput("nothing to project".into()))?;
    if sets.iter().any(|(_, s)| !s.is_empty() && s.dim() != dim) {
        return Err(Error::Shape("sets to project have different dims".into()));
    }
    let rows: usize = sets.iter().map(|(_, s)| s.len()).sum();
    let data: Vec<f64> = sets.iter().flat_map(|(_, s)| s.data().iter().map(|&v| v as f64)).collect();
    Ok(DMatrix::from_row_slice(rows, dim, &data))
}

/// Projects the union of `sets` onto its first two principal components and
/// writes `x,y,group` rows to `path`.
pub fn export_projection(sets: &[(String, FeatureSet)], path: &Path) -> Result<Pca> {
    let x = stack(sets)?;
    let pca = Pca::fit(&x, 2.min(x.ncols()))?;
    let y = pca.transform(&x);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["x", "y", "group"]).map_err(io)?;
    let mut r = 0;
    for (label, set) in sets {
        for _ in 0..set.len() {
            let py = if y.ncols() > 1 { y[(r, 1)] } else { 0.0 };
            w.write_record([y[(r, 0)].to_string(), py.to_string(), label.clone()]).map_err(io)?;
            r += 1;
        }
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(pca)
}
