//! Low-rank completion of a merged genotype-by-feature matrix (soft-impute),
//! the baseline that combining relationship matrices is compared against.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::rowcentered_kernel;
use crate::matcore::LabeledSymMatrix;

/// Feature matrix with a mask of observed cells. Unobserved cells are
/// ignored and stored as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct IncompleteFeatureMatrix {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: DMatrix<f64>,
    observed: DMatrix<bool>,
}

impl IncompleteFeatureMatrix {
    pub fn new(
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        mut values: DMatrix<f64>,
        observed: DMatrix<bool>,
    ) -> Result<Self> {
        let (n, m) = values.shape();
        if row_labels.len() != n || col_labels.len() != m || observed.shape() != (n, m) {
            return Err(Error::DimensionMismatch(format!(
                "{} rows x {} columns of labels for a {}x{} matrix",
                row_labels.len(),
                col_labels.len(),
                n,
                m
            )));
        }
        for i in 0..n {
            if !(0..m).any(|j| observed[(i, j)]) {
                return Err(Error::EmptyRowOrColumn {
                    label: row_labels[i].clone(),
                });
            }
        }
        for j in 0..m {
            if !(0..n).any(|i| observed[(i, j)]) {
                return Err(Error::EmptyRowOrColumn {
                    label: col_labels[j].clone(),
                });
            }
        }
        for i in 0..n {
            for j in 0..m {
                if !observed[(i, j)] {
                    values[(i, j)] = 0.0;
                } else if !values[(i, j)].is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "non-finite value at ({}, {})",
                        row_labels[i], col_labels[j]
                    )));
                }
            }
        }
        Ok(Self {
            row_labels,
            col_labels,
            values,
            observed,
        })
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn observed(&self) -> &DMatrix<bool> {
        &self.observed
    }

    pub fn observed_fraction(&self) -> f64 {
        let total = self.observed.len().max(1);
        self.observed.iter().filter(|&&b| b).count() as f64 / total as f64
    }

    /// Observed column means.
    pub fn column_means(&self) -> Vec<f64> {
        let (n, m) = self.values.shape();
        (0..m)
            .map(|j| {
                let (mut s, mut c) = (0.0, 0usize);
                for i in 0..n {
                    if self.observed[(i, j)] {
                        s += self.values[(i, j)];
                        c += 1;
                    }
                }
                s / c as f64
            })
            .collect()
    }

    /// Missing cells filled with observed column means.
    pub fn mean_filled(&self) -> DMatrix<f64> {
        let means = self.column_means();
        DMatrix::from_fn(self.values.nrows(), self.values.ncols(), |i, j| {
            if self.observed[(i, j)] {
                self.values[(i, j)]
            } else {
                means[j]
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftImputeConfig {
    pub max_rank: usize,
    pub lambda: f64,
    /// Stop when `||Z_new - Z||^2 / ||Z||^2 < tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Fit the low-rank part to column-centered data.
    pub center_columns: bool,
}

impl SoftImputeConfig {
    pub fn new(max_rank: usize, lambda: f64) -> Self {
        Self {
            max_rank,
            lambda,
            tol: 1e-5,
            max_iter: 100,
            center_columns: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompletedMatrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Observed cells kept, missing cells from the low-rank fit.
    pub values: DMatrix<f64>,
    /// The rank-constrained fit itself (column means added back when centered).
    pub low_rank: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `1/2 ||P_obs(X - Z)||^2 + lambda ||Z||_*` after each iteration.
    pub objective_trace: Vec<f64>,
    pub nuclear_norm: f64,
}

/// Rank-`r` soft-thresholded SVD `U diag((s - lambda)+) V'` of `w`, returned
/// with its nuclear norm. Singular pairs come from the eigendecomposition of
/// the smaller Gram matrix; the fit is formed as a projection so no
/// singular value is ever divided by.
fn shrink_truncated(w: &DMatrix<f64>, rank: usize, lambda: f64) -> (DMatrix<f64>, f64) {
    let (n, m) = w.shape();
    let rows_side = n <= m;
    let gram = if rows_side {
        w * w.transpose()
    } else {
        w.transpose() * w
    };
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = Vec::new();
    let mut factors = Vec::new();
    let mut nuclear = 0.0;
    for &i in order.iter().take(rank) {
        let s = eig.eigenvalues[i].max(0.0).sqrt();
        if s <= lambda || s == 0.0 {
            break;
        }
        basis.push(eig.eigenvectors.column(i).into_owned());
        factors.push((s - lambda) / s);
        nuclear += s - lambda;
    }
    if basis.is_empty() {
        return (DMatrix::zeros(n, m), 0.0);
    }
    let u = DMatrix::from_columns(&basis);
    let f = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(factors));
    let z = if rows_side {
        &u * (f * (u.transpose() * w))
    } else {
        ((w * &u) * f) * u.transpose()
    };
    (z, nuclear)
}

pub fn soft_impute(x: &IncompleteFeatureMatrix, cfg: &SoftImputeConfig) -> Result<CompletedMatrix> {
    let (n, m) = x.values.shape();
    if cfg.max_rank == 0 || cfg.max_rank > n.min(m) {
        return Err(Error::InvalidConfig(format!(
            "rank {} must be in 1..={}",
            cfg.max_rank,
            n.min(m)
        )));
    }
    if !(cfg.lambda >= 0.0) || !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::InvalidConfig(
            "lambda >= 0, tol > 0 and max_iter >= 1 required".into(),
        ));
    }
    let offsets = if cfg.center_columns {
        x.column_means()
    } else {
        vec![0.0; m]
    };
    let target = DMatrix::from_fn(n, m, |i, j| {
        if x.observed[(i, j)] {
            x.values[(i, j)] - offsets[j]
        } else {
            0.0
        }
    });
    let mut z = DMatrix::zeros(n, m);
    let mut objective_trace = Vec::new();
    let mut nuclear_norm = 0.0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        let mut filled = z.clone();
        for i in 0..n {
            for j in 0..m {
                if x.observed[(i, j)] {
                    filled[(i, j)] = target[(i, j)];
                }
            }
        }
        let (next, nuc) = shrink_truncated(&filled, cfg.max_rank, cfg.lambda);
        iterations += 1;
        let mut resid = 0.0;
        for i in 0..n {
            for j in 0..m {
                if x.observed[(i, j)] {
                    let r = target[(i, j)] - next[(i, j)];
                    resid += r * r;
                }
            }
        }
        objective_trace.push(0.5 * resid + cfg.lambda * nuc);
        nuclear_norm = nuc;
        let change = (&next - &z).norm_squared();
        let scale = z.norm_squared();
        z = next;
        if scale > 0.0 && change / scale < cfg.tol {
            converged = true;
            break;
        }
        if scale == 0.0 && change == 0.0 {
            converged = true;
            break;
        }
    }
    let low_rank = DMatrix::from_fn(n, m, |i, j| z[(i, j)] + offsets[j]);
    let values = DMatrix::from_fn(n, m, |i, j| {
        if x.observed[(i, j)] {
            x.values[(i, j)]
        } else {
            low_rank[(i, j)]
        }
    });
    Ok(CompletedMatrix {
        row_labels: x.row_labels.clone(),
        col_labels: x.col_labels.clone(),
        values,
        low_rank,
        iterations,
        converged,
        objective_trace,
        nuclear_norm,
    })
}

/// Row-centered relationship matrix of the completed features.
pub fn grm_from_imputed(z: &CompletedMatrix) -> Result<LabeledSymMatrix> {
    rowcentered_kernel(z.row_labels.clone(), &z.values)
}
