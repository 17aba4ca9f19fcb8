//! Sufficient statistics, PCA and log-density kernels.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Centered second moment of a class, either the full `D × D` scatter matrix
/// or only its diagonal (per-dimension squared-deviation sums).
#[derive(Debug, Clone, PartialEq)]
pub enum Scatter {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl Scatter {
    pub fn zeros_like(&self) -> Scatter {
        match self {
            Scatter::Full(m) => Scatter::Full(DMatrix::zeros(m.nrows(), m.ncols())),
            Scatter::Diagonal(v) => Scatter::Diagonal(DVector::zeros(v.len())),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Scatter::Full(m) => m.nrows(),
            Scatter::Diagonal(v) => v.len(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Scatter::Diagonal(_))
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            Scatter::Full(m) => m.diagonal(),
            Scatter::Diagonal(v) => v.clone(),
        }
    }

    /// `self += other`; both must have the same form.
    pub fn add_assign(&mut self, other: &Scatter) {
        match (self, other) {
            (Scatter::Full(a), Scatter::Full(b)) => *a += b,
            (Scatter::Diagonal(a), Scatter::Diagonal(b)) => *a += b,
            (Scatter::Full(a), Scatter::Diagonal(b)) => {
                for i in 0..b.len() {
                    a[(i, i)] += b[i];
                }
            }
            (Scatter::Diagonal(a), Scatter::Full(b)) => *a += b.diagonal(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Scatter {
        match self {
            Scatter::Full(m) => Scatter::Full(m * factor),
            Scatter::Diagonal(v) => Scatter::Diagonal(v * factor),
        }
    }
}

/// Sample mean, scatter and size of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub mean: DVector<f64>,
    pub scatter: Scatter,
    pub count: usize,
}

impl ClassStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Unbiased covariance `S / (n - 1)`, `None` for a single sample.
    pub fn covariance(&self) -> Option<Scatter> {
        (self.count > 1).then(|| self.scatter.scaled(1.0 / (self.count as f64 - 1.0)))
    }
}

fn column_mean(rows: &DMatrix<f64>) -> DVector<f64> {
    let n = rows.nrows() as f64;
    DVector::from_iterator(rows.ncols(), rows.column_iter().map(|c| c.sum() / n))
}

fn centered(rows: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = rows.clone();
    for (j, mut col) in c.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    c
}

/// Statistics of the rows of an `n × D` matrix (full scatter).
pub fn class_stats(rows: &DMatrix<f64>) -> Result<ClassStats> {
    if rows.nrows() == 0 {
        return Err(Error::invalid("class has no rows"));
    }
    let mean = column_mean(rows);
    let c = centered(rows, &mean);
    let mut scatter = c.transpose() * &c;
    // exact symmetry; the product is symmetric only up to rounding
    for i in 0..scatter.nrows() {
        for j in 0..i {
            let v = 0.5 * (scatter[(i, j)] + scatter[(j, i)]);
            scatter[(i, j)] = v;
            scatter[(j, i)] = v;
        }
    }
    Ok(ClassStats {
        mean,
        scatter: Scatter::Full(scatter),
        count: rows.nrows(),
    })
}

/// Statistics keeping only the diagonal of the scatter matrix.
pub fn class_stats_diag(rows: &DMatrix<f64>) -> Result<ClassStats> {
    if rows.nrows() == 0 {
        return Err(Error::invalid("class has no rows"));
    }
    let mean = column_mean(rows);
    let sq = DVector::from_iterator(
        rows.ncols(),
        rows.column_iter()
            .enumerate()
            .map(|(j, col)| col.iter().map(|v| (v - mean[j]) * (v - mean[j])).sum()),
    );
    Ok(ClassStats {
        mean,
        scatter: Scatter::Diagonal(sq),
        count: rows.nrows(),
    })
}

/// Linear projection onto the leading principal directions of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `D × d`, orthonormal columns ordered by decreasing variance.
    pub projection: DMatrix<f64>,
    /// Variance captured by each retained direction.
    pub variances: DVector<f64>,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.ncols()
    }
}

/// Fits a `d`-component PCA to the rows of `train`.
pub fn pca_fit(train: &DMatrix<f64>, d: usize) -> Result<PcaModel> {
    let (n, dim) = train.shape();
    if d == 0 || d > dim || d > n {
        return Err(Error::invalid(format!(
            "PCA target dimension {d} outside 1..={}",
            dim.min(n)
        )));
    }
    let mean = column_mean(train);
    let c = centered(train, &mean);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = (c.transpose() * &c) / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let last = eig.eigenvalues[order[d - 1]];
    if top <= 0.0 || last <= top * 1e-12 {
        return Err(Error::invalid(format!(
            "data has rank below the requested {d} components"
        )));
    }
    let mut projection = DMatrix::zeros(dim, d);
    let mut variances = DVector::zeros(d);
    for (k, &idx) in order.iter().take(d).enumerate() {
        let mut v = eig.eigenvectors.column(idx).clone_owned();
        // deterministic sign: largest-magnitude entry positive
        let (imax, _) = v.iter().enumerate().fold(
            (0, 0.0f64),
            |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc },
        );
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        projection.set_column(k, &v);
        variances[k] = eig.eigenvalues[idx];
    }
    Ok(PcaModel {
        mean,
        projection,
        variances,
    })
}

/// `(rows - mean) · projection`.
pub fn pca_apply(model: &PcaModel, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if rows.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: rows.ncols(),
        });
    }
    Ok(centered(rows, &model.mean) * &model.projection)
}

pub fn pca_apply_vec(model: &PcaModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: x.len(),
        });
    }
    Ok(model.projection.tr_mul(&(x - &model.mean)))
}

/// Scale parameter of a Student-t, with its factorization cached.
#[derive(Debug, Clone, PartialEq)]
pub enum TScale {
    /// Lower Cholesky factor `L` of the scale matrix (`Σ = L Lᵀ`).
    Full { chol: DMatrix<f64> },
    /// Per-axis scales of a product of independent univariate Student-t's.
    Diagonal(DVector<f64>),
}

/// Multivariate (full) or axis-factored (diagonal) Student-t distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentT {
    location: DVector<f64>,
    scale: TScale,
    dof: f64,
    /// Everything in the log-density that does not depend on `x`.
    log_norm: f64,
}

fn t_log_const(dof: f64, dim: f64) -> f64 {
    ln_gamma(0.5 * (dof + dim)) - ln_gamma(0.5 * dof) - 0.5 * dim * (dof * PI).ln()
}

pub(crate) fn cholesky_lower(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    Cholesky::<f64, Dyn>::new(m)
        .map(|c| c.unpack())
        .ok_or(Error::NotPositiveDefinite)
}

fn log_det_from_chol(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

impl StudentT {
    /// Full-covariance form; fails when `scale` has no Cholesky factor.
    pub fn full(location: DVector<f64>, scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        if scale.nrows() != location.len() || scale.ncols() != location.len() {
            return Err(Error::DimensionMismatch {
                expected: location.len(),
                actual: scale.nrows(),
            });
        }
        let chol = cholesky_lower(scale)?;
        Self::from_cholesky(location, chol, dof)
    }

    /// Full form from an existing lower Cholesky factor.
    pub fn from_cholesky(location: DVector<f64>, chol: DMatrix<f64>, dof: f64) -> Result<Self> {
        if !(dof > 0.0) || !dof.is_finite() {
            return Err(Error::NonPositiveDof(dof));
        }
        if chol.diagonal().iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        let dim = location.len() as f64;
        let log_norm = t_log_const(dof, dim) - 0.5 * log_det_from_chol(&chol);
        Ok(Self {
            location,
            scale: TScale::Full { chol },
            dof,
            log_norm,
        })
    }

    /// Axis-factored form with per-axis scales `diag`.
    pub fn diagonal(location: DVector<f64>, diag: DVector<f64>, dof: f64) -> Result<Self> {
        if diag.len() != location.len() {
            return Err(Error::DimensionMismatch {
                expected: location.len(),
                actual: diag.len(),
            });
        }
        if !(dof > 0.0) || !dof.is_finite() {
            return Err(Error::NonPositiveDof(dof));
        }
        if diag.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        let dim = location.len() as f64;
        let log_norm = dim * t_log_const(dof, 1.0) - 0.5 * diag.iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            location,
            scale: TScale::Diagonal(diag),
            dof,
            log_norm,
        })
    }

    pub fn location(&self) -> &DVector<f64> {
        &self.location
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn scale(&self) -> &TScale {
        &self.scale
    }

    pub fn dim(&self) -> usize {
        self.location.len()
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.scale, TScale::Diagonal(_))
    }

    /// Scale matrix `L Lᵀ` (full) or `diag(s)` (diagonal).
    pub fn scale_matrix(&self) -> DMatrix<f64> {
        match &self.scale {
            TScale::Full { chol } => chol * chol.transpose(),
            TScale::Diagonal(d) => DMatrix::from_diagonal(d),
        }
    }

    pub fn log_det_scale(&self) -> f64 {
        match &self.scale {
            TScale::Full { chol } => log_det_from_chol(chol),
            TScale::Diagonal(d) => d.iter().map(|v| v.ln()).sum(),
        }
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let diff = x - &self.location;
        let v = self.dof;
        let out = match &self.scale {
            TScale::Full { chol } => {
                let z = chol.solve_lower_triangular(&diff).ok_or(Error::NotPositiveDefinite)?;
                let maha = z.norm_squared();
                let d = self.dim() as f64;
                self.log_norm - 0.5 * (v + d) * (maha / v).ln_1p()
            }
            TScale::Diagonal(s) => {
                let tail: f64 = diff.iter().zip(s.iter()).map(|(e, s)| (e * e / (s * v)).ln_1p()).sum();
                self.log_norm - 0.5 * (v + 1.0) * tail
            }
        };
        if !out.is_finite() {
            return Err(Error::Numerical(format!("non-finite Student-t log-density {out}")));
        }
        Ok(out)
    }

    /// Log-densities of every row of `rows` (`n × D`).
    pub fn logpdf_rows(&self, rows: &DMatrix<f64>) -> Result<Vec<f64>> {
        if rows.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: rows.ncols(),
            });
        }
        match &self.scale {
            TScale::Full { chol } => {
                let mut diff = rows.transpose();
                for mut col in diff.column_iter_mut() {
                    col -= &self.location;
                }
                let z = chol.solve_lower_triangular(&diff).ok_or(Error::NotPositiveDefinite)?;
                let v = self.dof;
                let d = self.dim() as f64;
                z.column_iter()
                    .map(|c| {
                        let out = self.log_norm - 0.5 * (v + d) * (c.norm_squared() / v).ln_1p();
                        if out.is_finite() {
                            Ok(out)
                        } else {
                            Err(Error::Numerical(format!("non-finite Student-t log-density {out}")))
                        }
                    })
                    .collect()
            }
            TScale::Diagonal(_) => rows.row_iter().map(|r| self.logpdf(&r.transpose())).collect(),
        }
    }
}

/// Log-density of a multivariate Student-t.
pub fn student_t_logpdf(x: &DVector<f64>, t: &StudentT) -> Result<f64> {
    t.logpdf(x)
}

/// Multivariate normal with cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        let chol = cholesky_lower(cov)?;
        let d = mean.len() as f64;
        let log_norm = -0.5 * d * (2.0 * PI).ln() - 0.5 * log_det_from_chol(&chol);
        Ok(Self { mean, chol, log_norm })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                actual: x.len(),
            });
        }
        let z = self
            .chol
            .solve_lower_triangular(&(x - &self.mean))
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(self.log_norm - 0.5 * z.norm_squared())
    }
}

/// `log Σ exp(v_i)` without overflow; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
