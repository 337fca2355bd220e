//! GBLUP and ridge-regression BLUP on a relationship matrix.
//!
//! The variance ratio `lambda = sigma2_g / sigma2_e` is fitted by REML on the
//! spectral decomposition of the projected covariance, so each likelihood
//! evaluation is `O(n)` after one eigendecomposition.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::MarkerMatrix;
use crate::matcore::LabeledSymMatrix;

/// Search interval for `ln(lambda)`.
pub const LOG_LAMBDA_RANGE: (f64, f64) = (-10.0, 10.0);
const GRID_POINTS: usize = 41;

#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeRecord {
    pub genotype: String,
    pub value: f64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhenotypeTable {
    pub trait_name: String,
    pub covariate_names: Vec<String>,
    pub records: Vec<PhenotypeRecord>,
}

impl PhenotypeTable {
    pub fn new(
        trait_name: impl Into<String>,
        covariate_names: Vec<String>,
        records: Vec<PhenotypeRecord>,
    ) -> Result<Self> {
        for r in &records {
            if r.genotype.is_empty() {
                return Err(Error::InvalidConfig(
                    "record with empty genotype label".into(),
                ));
            }
            if !r.value.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "non-finite trait value for `{}`",
                    r.genotype
                )));
            }
            if r.covariates.len() != covariate_names.len() {
                return Err(Error::DimensionMismatch(format!(
                    "record for `{}` has {} covariates, expected {}",
                    r.genotype,
                    r.covariates.len(),
                    covariate_names.len()
                )));
            }
        }
        Ok(Self {
            trait_name: trait_name.into(),
            covariate_names,
            records,
        })
    }

    /// Intercept-only table from `(genotype, value)` pairs.
    pub fn from_pairs<S: Into<String>>(
        trait_name: &str,
        pairs: impl IntoIterator<Item = (S, f64)>,
    ) -> Result<Self> {
        let records = pairs
            .into_iter()
            .map(|(g, v)| PhenotypeRecord {
                genotype: g.into(),
                value: v,
                covariates: vec![],
            })
            .collect();
        Self::new(trait_name, vec![], records)
    }

    /// Distinct genotypes in first-appearance order.
    pub fn genotypes(&self) -> Vec<String> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.genotype.as_str(), ()).is_none() {
                out.push(r.genotype.clone());
            }
        }
        out
    }

    /// Records whose genotype satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        Self {
            trait_name: self.trait_name.clone(),
            covariate_names: self.covariate_names.clone(),
            records: self
                .records
                .iter()
                .filter(|r| keep(&r.genotype))
                .cloned()
                .collect(),
        }
    }

    /// Mean trait value per genotype.
    pub fn genotype_means(&self) -> HashMap<String, f64> {
        let mut acc: HashMap<String, (f64, usize)> = HashMap::new();
        for r in &self.records {
            let e = acc.entry(r.genotype.clone()).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (s, c))| (k, s / c as f64))
            .collect()
    }

    fn response(&self) -> DVector<f64> {
        DVector::from_iterator(self.records.len(), self.records.iter().map(|r| r.value))
    }

    fn fixed_design(&self) -> DMatrix<f64> {
        let p = 1 + self.covariate_names.len();
        DMatrix::from_fn(self.records.len(), p, |i, j| {
            if j == 0 {
                1.0
            } else {
                self.records[i].covariates[j - 1]
            }
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Fixed `lambda = sigma2_g / sigma2_e`; REML when `None`.
    pub variance_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MixedModelFit {
    pub sigma2_g: f64,
    pub sigma2_e: f64,
    pub lambda: f64,
    /// Intercept first, then covariates.
    pub beta_hat: Vec<f64>,
    /// Labels of the relationship matrix the model was fitted on.
    pub labels: Vec<String>,
    /// BLUPs aligned to `labels`, including unphenotyped genotypes.
    pub u_hat: Vec<f64>,
    pub reml_loglik: f64,
    record_genotypes: Vec<String>,
    /// `H^-1 (y - X beta)` with `H = Z G Z' + I / lambda`.
    weights: Vec<f64>,
}

impl MixedModelFit {
    pub fn heritability(&self) -> f64 {
        self.sigma2_g / (self.sigma2_g + self.sigma2_e)
    }

    pub fn gebv(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.u_hat[i])
    }
}

/// Outcome of the shared REML/GLS machinery on an observation-level
/// covariance `K = Z G Z'`.
struct MixedSolve {
    lambda: f64,
    sigma2_g: f64,
    sigma2_e: f64,
    beta: DVector<f64>,
    weights: DVector<f64>,
    reml_loglik: f64,
}

struct RemlSpectrum {
    theta: Vec<f64>,
    omega_sq: Vec<f64>,
}

impl RemlSpectrum {
    fn new(y: &DVector<f64>, x: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        let p = x.ncols();
        let xtx = x.transpose() * x;
        let xtx_inv = Cholesky::new(xtx).ok_or(Error::DegenerateDesign)?.inverse();
        let s = DMatrix::<f64>::identity(n, n) - x * xtx_inv * x.transpose();
        // S (K + I) S has eigenvalue 0 on col(X) and theta + 1 >= ... elsewhere.
        let shifted = k + DMatrix::<f64>::identity(n, n);
        let mut ssk = &s * shifted * &s;
        crate::matcore::symmetrize_in_place(&mut ssk);
        let eig = SymmetricEigen::new(ssk);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let keep = &order[..n - p];
        let theta = keep.iter().map(|&i| eig.eigenvalues[i] - 1.0).collect();
        let omega_sq = keep
            .iter()
            .map(|&i| {
                let w = eig.eigenvectors.column(i).dot(y);
                w * w
            })
            .collect();
        Ok(Self { theta, omega_sq })
    }

    /// Restricted log-likelihood at `ln(lambda) = t`.
    fn loglik(&self, t: f64) -> f64 {
        let delta = (-t).exp();
        let df = self.theta.len() as f64;
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for (th, w2) in self.theta.iter().zip(&self.omega_sq) {
            let d = th + delta;
            if !(d > 0.0) {
                return f64::NEG_INFINITY;
            }
            quad += w2 / d;
            log_det += d.ln();
        }
        if !(quad > 0.0) {
            return f64::NEG_INFINITY;
        }
        -0.5 * (df * (quad.ln() + 1.0 + (2.0 * std::f64::consts::PI / df).ln()) + log_det)
    }

    fn sigma2_g(&self, t: f64) -> f64 {
        let delta = (-t).exp();
        let quad: f64 = self
            .theta
            .iter()
            .zip(&self.omega_sq)
            .map(|(th, w2)| w2 / (th + delta))
            .sum();
        quad / self.theta.len() as f64
    }

    /// Grid search followed by golden-section refinement on `ln(lambda)`.
    fn maximize(&self) -> f64 {
        let (lo, hi) = LOG_LAMBDA_RANGE;
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + step * i as f64).collect();
        let best = (0..GRID_POINTS)
            .max_by(|&a, &b| self.loglik(grid[a]).total_cmp(&self.loglik(grid[b])))
            .unwrap_or(0);
        let mut a = grid[best.saturating_sub(1)];
        let mut b = grid[(best + 1).min(GRID_POINTS - 1)];
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (self.loglik(c), self.loglik(d));
        while (b - a).abs() > 1e-10 {
            if fc > fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = self.loglik(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = self.loglik(d);
            }
        }
        let t = 0.5 * (a + b);
        // Never return something worse than the best grid point.
        if self.loglik(t) >= self.loglik(grid[best]) {
            t
        } else {
            grid[best]
        }
    }
}

fn solve_mixed(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    k: &DMatrix<f64>,
    ratio: Option<f64>,
) -> Result<MixedSolve> {
    let n = y.len();
    let p = x.ncols();
    if n <= p {
        return Err(Error::DegenerateDesign);
    }
    let sv = x.clone().singular_values();
    let smax = sv.max();
    if !(smax > 0.0) || sv.min() <= 1e-10 * smax {
        return Err(Error::DegenerateDesign);
    }
    let spectrum = RemlSpectrum::new(y, x, k)?;
    let t = match ratio {
        Some(r) if r > 0.0 && r.is_finite() => r.ln(),
        Some(r) => {
            return Err(Error::InvalidConfig(format!(
                "variance ratio {r} must be positive"
            )))
        }
        None => spectrum.maximize(),
    };
    let lambda = t.exp();
    let delta = 1.0 / lambda;
    let sigma2_g = spectrum.sigma2_g(t);
    let h = k + DMatrix::<f64>::identity(n, n) * delta;
    let chol = Cholesky::new(h).ok_or(Error::DegenerateDesign)?;
    let hinv_x = chol.solve(x);
    let hinv_y = chol.solve(y);
    let xt_hinv_x = x.transpose() * &hinv_x;
    let beta = Cholesky::new(xt_hinv_x)
        .ok_or(Error::DegenerateDesign)?
        .solve(&(x.transpose() * &hinv_y));
    let weights = chol.solve(&(y - x * &beta));
    Ok(MixedSolve {
        lambda,
        sigma2_g,
        sigma2_e: delta * sigma2_g,
        beta,
        weights,
        reml_loglik: spectrum.loglik(t),
    })
}

/// Record-to-level indices of `pheno` against `labels`.
fn incidence(pheno: &PhenotypeTable, labels: &[String]) -> Result<Vec<usize>> {
    let lookup: HashMap<&str, usize> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    pheno
        .records
        .iter()
        .map(|r| {
            lookup
                .get(r.genotype.as_str())
                .copied()
                .ok_or_else(|| Error::LabelMismatch {
                    label: r.genotype.clone(),
                })
        })
        .collect()
}

fn check_records(pheno: &PhenotypeTable) -> Result<()> {
    if pheno.genotypes().len() < 2 {
        return Err(Error::InvalidConfig(
            "need records on at least two distinct genotypes".into(),
        ));
    }
    Ok(())
}

pub fn fit_gblup(pheno: &PhenotypeTable, g: &LabeledSymMatrix) -> Result<MixedModelFit> {
    fit_gblup_with(pheno, g, FitOptions::default())
}

pub fn fit_gblup_with(
    pheno: &PhenotypeTable,
    g: &LabeledSymMatrix,
    opts: FitOptions,
) -> Result<MixedModelFit> {
    check_records(pheno)?;
    let z = incidence(pheno, g.labels())?;
    let gv = g.values();
    let n = z.len();
    let k = DMatrix::from_fn(n, n, |i, j| gv[(z[i], z[j])]);
    let solved = solve_mixed(
        &pheno.response(),
        &pheno.fixed_design(),
        &k,
        opts.variance_ratio,
    )?;
    // u = G Z' H^-1 (y - X beta)
    let u_hat = (0..g.dim())
        .map(|l| {
            z.iter()
                .zip(solved.weights.iter())
                .map(|(&zi, w)| gv[(l, zi)] * w)
                .sum()
        })
        .collect();
    Ok(MixedModelFit {
        sigma2_g: solved.sigma2_g,
        sigma2_e: solved.sigma2_e,
        lambda: solved.lambda,
        beta_hat: solved.beta.iter().copied().collect(),
        labels: g.labels().to_vec(),
        u_hat,
        reml_loglik: solved.reml_loglik,
        record_genotypes: pheno.records.iter().map(|r| r.genotype.clone()).collect(),
        weights: solved.weights.iter().copied().collect(),
    })
}

/// Profiled REML log-likelihood of `pheno` on `g` at a given variance ratio.
pub fn reml_loglik_at(pheno: &PhenotypeTable, g: &LabeledSymMatrix, lambda: f64) -> Result<f64> {
    let z = incidence(pheno, g.labels())?;
    let gv = g.values();
    let n = z.len();
    let k = DMatrix::from_fn(n, n, |i, j| gv[(z[i], z[j])]);
    let spectrum = RemlSpectrum::new(&pheno.response(), &pheno.fixed_design(), &k)?;
    Ok(spectrum.loglik(lambda.ln()))
}

/// BLUP of genetic values for `targets`, which may include genotypes
/// without records, from the cross-covariance with the training records.
pub fn predict_gebv(
    fit: &MixedModelFit,
    g: &LabeledSymMatrix,
    targets: &[String],
) -> Result<Vec<f64>> {
    let lookup = g.lookup();
    let find = |l: &str| {
        lookup.get(l).copied().ok_or_else(|| Error::UnknownLabel {
            label: l.to_string(),
        })
    };
    let rec = fit
        .record_genotypes
        .iter()
        .map(|l| find(l))
        .collect::<Result<Vec<_>>>()?;
    let gv = g.values();
    targets
        .iter()
        .map(|t| {
            let ti = find(t)?;
            Ok(rec
                .iter()
                .zip(&fit.weights)
                .map(|(&ri, w)| gv[(ti, ri)] * w)
                .sum())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RrBlupFit {
    pub marker_labels: Vec<String>,
    pub marker_effects: Vec<f64>,
    pub genotype_labels: Vec<String>,
    /// `W u` for every genotype in the marker matrix.
    pub gebv: Vec<f64>,
    pub beta_hat: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    pub lambda: f64,
}

pub fn fit_rrblup(pheno: &PhenotypeTable, m: &MarkerMatrix) -> Result<RrBlupFit> {
    fit_rrblup_with(pheno, m, FitOptions::default())
}

/// Ridge regression on column-centered markers. The variance ratio comes
/// from REML on `Z W W' Z'`; effects are solved from the marker-space mixed
/// model equations.
pub fn fit_rrblup_with(
    pheno: &PhenotypeTable,
    m: &MarkerMatrix,
    opts: FitOptions,
) -> Result<RrBlupFit> {
    check_records(pheno)?;
    let w = m.centered_features()?;
    let z = incidence(pheno, m.genotype_labels())?;
    let n = z.len();
    let zw = DMatrix::from_fn(n, w.ncols(), |i, j| w[(z[i], j)]);
    let k = &zw * zw.transpose();
    let y = pheno.response();
    let x = pheno.fixed_design();
    let solved = solve_mixed(&y, &x, &k, opts.variance_ratio)?;
    let delta = 1.0 / solved.lambda;

    let (p, q) = (x.ncols(), zw.ncols());
    let mut lhs = DMatrix::zeros(p + q, p + q);
    lhs.view_mut((0, 0), (p, p))
        .copy_from(&(x.transpose() * &x));
    let xtzw = x.transpose() * &zw;
    lhs.view_mut((0, p), (p, q)).copy_from(&xtzw);
    lhs.view_mut((p, 0), (q, p)).copy_from(&xtzw.transpose());
    let mut bottom = zw.transpose() * &zw;
    for i in 0..q {
        bottom[(i, i)] += delta;
    }
    lhs.view_mut((p, p), (q, q)).copy_from(&bottom);
    let mut rhs = DVector::zeros(p + q);
    rhs.rows_mut(0, p).copy_from(&(x.transpose() * &y));
    rhs.rows_mut(p, q).copy_from(&(zw.transpose() * &y));
    let sol = Cholesky::new(lhs)
        .ok_or(Error::DegenerateDesign)?
        .solve(&rhs);
    let effects = sol.rows(p, q).into_owned();
    let gebv = &w * &effects;
    Ok(RrBlupFit {
        marker_labels: m.marker_labels().to_vec(),
        marker_effects: effects.iter().copied().collect(),
        genotype_labels: m.genotype_labels().to_vec(),
        gebv: gebv.iter().copied().collect(),
        beta_hat: sol.rows(0, p).iter().copied().collect(),
        sigma2_u: solved.sigma2_g,
        sigma2_e: solved.sigma2_e,
        lambda: solved.lambda,
    })
}
