use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::EvalError;
use crate::nets::Cond;
use crate::teacher::GmmTeacher;
use crate::tensor::Tensor;

const RIDGE: f64 = 1e-6;

/// Fréchet distance between Gaussian fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frechet {
    pub value: f64,
    /// A covariance was singular and `1e-6 I` was added to it.
    pub regularized: bool,
}

/// Sample mean and unbiased covariance of the rows of `x`.
pub fn gaussian_fit(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    if x.shape().len() != 2 {
        return Err(EvalError::Input(format!("samples must be [N, D], got {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    if n < d + 1 {
        return Err(EvalError::Input(format!("need at least {} samples in {d}-D, got {n}", d + 1)));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean().transpose();
    let mut centred = m;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Symmetric PSD square root via eigendecomposition; negative round-off
/// eigenvalues are clamped to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn regularize(c: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let d = c.nrows();
    let singular = SymmetricEigen::new((c + c.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .any(|&v| v <= RIDGE * 1e-3);
    if singular {
        (c + DMatrix::identity(d, d) * RIDGE, true)
    } else {
        (c.clone(), false)
    }
}

/// `|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a^1/2 C_b C_a^1/2)^1/2)`.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Frechet {
    let (ca, ra) = regularize(cov_a);
    let (cb, rb) = regularize(cov_b);
    let sa = sqrt_psd(&ca);
    let cross = sqrt_psd(&(&sa * &cb * &sa));
    let value = (mu_a - mu_b).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross.trace();
    Frechet {
        value: value.max(0.0),
        regularized: ra || rb,
    }
}

pub fn frechet_gauss(a: &Tensor, b: &Tensor) -> Result<Frechet, EvalError> {
    if a.cols() != b.cols() {
        return Err(EvalError::Input("sample sets differ in dimension".into()));
    }
    let (ma, ca) = gaussian_fit(a)?;
    let (mb, cb) = gaussian_fit(b)?;
    Ok(frechet_from_moments(&ma, &ca, &mb, &cb))
}

/// Mean over classes of the Fréchet distance between the samples carrying
/// each class and that class's exact GMM moments.
pub fn frechet_by_class(samples: &Tensor, ys: &[Cond], gmm: &GmmTeacher) -> Result<Frechet, EvalError> {
    if samples.rows() != ys.len() {
        return Err(EvalError::Input("one condition per sample required".into()));
    }
    let mut total = 0.0;
    let mut classes = 0;
    let mut regularized = false;
    for k in 0..gmm.num_classes() {
        let rows: Vec<Vec<f64>> = ys
            .iter()
            .enumerate()
            .filter(|(_, y)| **y == Cond::Class(k))
            .map(|(i, _)| samples.row(i).to_vec())
            .collect();
        if rows.is_empty() {
            continue;
        }
        let (ms, cs) = gaussian_fit(&Tensor::from_rows(&rows))?;
        let (mg, cg) = class_moments(gmm, k);
        let f = frechet_from_moments(&ms, &cs, &mg, &cg);
        total += f.value;
        regularized |= f.regularized;
        classes += 1;
    }
    if classes == 0 {
        return Err(EvalError::Input("no class-conditional samples".into()));
    }
    Ok(Frechet {
        value: total / classes as f64,
        regularized,
    })
}

/// Exact mean and covariance of class `k` of the clean GMM.
fn class_moments(gmm: &GmmTeacher, k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = gmm.data_dim();
    let spec = &gmm.spec().classes[k];
    let total: f64 = spec.weights.iter().sum();
    let mut mean = DVector::zeros(d);
    let mut second = DMatrix::zeros(d, d);
    for ((w, mu), s) in spec.weights.iter().zip(&spec.means).zip(&spec.stds) {
        let p = w / total;
        let mu = DVector::from_column_slice(mu);
        mean += &mu * p;
        second += (&mu * mu.transpose() + DMatrix::identity(d, d) * (s * s)) * p;
    }
    let cov = second - &mean * mean.transpose();
    (mean, cov)
}
