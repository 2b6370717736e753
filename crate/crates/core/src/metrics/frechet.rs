use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

fn moments(features: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    let mean = DVector::from_fn(dim, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for j in 0..dim {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix. Eigenvalues
/// below `-1e-8` (relative to the spectrum scale) are a numerical error;
/// smaller negatives are clipped to zero.
fn psd_sqrt(m: DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|&&v| v < -1e-8 * scale) {
        return Err(Error::Numerical(format!("covariance product has eigenvalue {bad}")));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Ok((sqrt, roots))
}

fn check(features: &[Vec<f64>], name: &str) -> Result<usize> {
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::InvalidInput(format!("{name} feature set is empty")));
    }
    if features.len() < dim + 1 {
        return Err(Error::SampleSize(format!(
            "{name} has {} rows; {dim}-dimensional features need at least {}",
            features.len(),
            dim + 1
        )));
    }
    if features.iter().any(|r| r.len() != dim) {
        return Err(Error::InvalidInput(format!("{name} rows have inconsistent widths")));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} contains non-finite features")));
    }
    Ok(dim)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})` with
/// unbiased sample covariances.
pub fn frechet_distance(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let da = check(features_a, "first")?;
    let db = check(features_b, "second")?;
    if da != db {
        return Err(Error::InvalidInput(format!("feature widths differ ({da} vs {db})")));
    }
    let (mu_a, cov_a) = moments(features_a, da);
    let (mu_b, cov_b) = moments(features_b, db);
    let (sqrt_a, _) = psd_sqrt(cov_a.clone())?;
    let (_, roots) = psd_sqrt(&sqrt_a * &cov_b * &sqrt_a)?;
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * roots.sum();
    Ok(d.max(0.0))
}
