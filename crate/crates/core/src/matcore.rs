//! Labeled symmetric matrices and the label bookkeeping shared by every
//! estimator in the crate.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Default eigenvalue floor for [`near_pd`], relative to the largest
/// absolute eigenvalue.
pub const DEFAULT_EPS_RATIO: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-12;

/// A dense symmetric matrix whose rows and columns are indexed by unique
/// entity labels (genotypes, traits, features).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSymMatrix {
    labels: Vec<String>,
    values: DMatrix<f64>,
}

impl LabeledSymMatrix {
    /// Validates shape, label uniqueness and symmetry.
    pub fn new(labels: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{}, expected square",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {}x{} matrix",
                labels.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        check_unique(&labels)?;
        let n = labels.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (values[(i, j)], values[(j, i)]);
                let ok = if a.is_finite() && b.is_finite() {
                    (a - b).abs() <= SYMMETRY_TOL * a.abs().max(1.0)
                } else {
                    a.to_bits() == b.to_bits()
                };
                if !ok {
                    return Err(Error::Asymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { labels, values })
    }

    /// Builds a matrix from values that are symmetric up to rounding,
    /// averaging the two triangles.
    pub fn symmetrized(labels: Vec<String>, mut values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() || values.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for a {}x{} matrix",
                labels.len(),
                values.nrows(),
                values.ncols()
            )));
        }
        check_unique(&labels)?;
        symmetrize_in_place(&mut values);
        Ok(Self { labels, values })
    }

    pub fn identity(labels: Vec<String>) -> Result<Self> {
        let n = labels.len();
        Self::new(labels, DMatrix::identity(n, n))
    }

    /// Callers guarantee the invariants; used on freshly computed results.
    pub(crate) fn from_parts(labels: Vec<String>, values: DMatrix<f64>) -> Self {
        debug_assert_eq!(values.nrows(), labels.len());
        debug_assert_eq!(values.ncols(), labels.len());
        Self { labels, values }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_parts(self) -> (Vec<String>, DMatrix<f64>) {
        (self.labels, self.values)
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[(row, col)]
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Value at the intersection of two labels.
    pub fn get_by_label(&self, row: &str, col: &str) -> Result<f64> {
        let i = self.position(row).ok_or_else(|| unknown(row))?;
        let j = self.position(col).ok_or_else(|| unknown(col))?;
        Ok(self.values[(i, j)])
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_parts(self.labels.clone(), &self.values * factor)
    }

    /// Principal submatrix at `positions`, in the given order.
    pub fn submatrix(&self, positions: &[usize]) -> Self {
        let labels = positions.iter().map(|&p| self.labels[p].clone()).collect();
        Self::from_parts(labels, gather(&self.values, positions))
    }

    /// Principal submatrix for the listed labels, in the given order.
    pub fn restrict_to(&self, labels: &[String]) -> Result<Self> {
        let lookup = self.lookup();
        let positions = labels
            .iter()
            .map(|l| lookup.get(l.as_str()).copied().ok_or_else(|| unknown(l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.submatrix(&positions))
    }

    pub(crate) fn lookup(&self) -> HashMap<&str, usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect()
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        (&self.values - &other.values).norm()
    }
}

fn unknown(label: &str) -> Error {
    Error::UnknownLabel {
        label: label.to_string(),
    }
}

fn check_unique(labels: &[String]) -> Result<()> {
    let mut seen = HashMap::with_capacity(labels.len());
    for l in labels {
        if seen.insert(l.as_str(), ()).is_some() {
            return Err(Error::DuplicateLabel { label: l.clone() });
        }
    }
    Ok(())
}

pub(crate) fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Principal submatrix of `m` at `positions`.
pub(crate) fn gather(m: &DMatrix<f64>, positions: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(positions.len(), positions.len(), |i, j| {
        m[(positions[i], positions[j])]
    })
}

/// Rectangular block `m[rows, cols]`.
pub(crate) fn gather_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// How the union of sample labels is ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnionOrder {
    #[default]
    FirstAppearance,
    Lexicographic,
}

/// The union `K` of all sample labels plus, for each sample, where its
/// labels sit inside the union.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionIndex {
    union_labels: Vec<String>,
    per_sample_positions: Vec<Vec<usize>>,
}

impl UnionIndex {
    pub fn union_labels(&self) -> &[String] {
        &self.union_labels
    }

    pub fn per_sample_positions(&self) -> &[Vec<usize>] {
        &self.per_sample_positions
    }

    pub fn len(&self) -> usize {
        self.union_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.union_labels.is_empty()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.union_labels.iter().position(|l| l == label)
    }
}

pub fn build_union_index(samples: &[LabeledSymMatrix]) -> Result<UnionIndex> {
    build_union_index_ordered(samples, UnionOrder::FirstAppearance)
}

pub fn build_union_index_ordered(
    samples: &[LabeledSymMatrix],
    order: UnionOrder,
) -> Result<UnionIndex> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let mut union_labels: Vec<String> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        check_unique(&s.labels)?;
        for l in &s.labels {
            if !seen.contains_key(l.as_str()) {
                seen.insert(l.as_str(), union_labels.len());
                union_labels.push(l.clone());
            }
        }
    }
    if order == UnionOrder::Lexicographic {
        union_labels.sort();
    }
    let lookup: HashMap<&str, usize> = union_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let per_sample_positions = samples
        .iter()
        .map(|s| s.labels.iter().map(|l| lookup[l.as_str()]).collect())
        .collect();
    Ok(UnionIndex {
        union_labels,
        per_sample_positions,
    })
}

/// Observed (`a`) and missing (`b`) union positions of one sample. `a` keeps
/// the sample's own label order; `b` is ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Embedding {
    pub observed: Vec<usize>,
    pub missing: Vec<usize>,
}

impl Embedding {
    /// Embedding for an explicit set of observed positions in a union of size `n`.
    pub fn from_positions(observed: Vec<usize>, n: usize) -> Self {
        let mut is_obs = vec![false; n];
        for &p in &observed {
            is_obs[p] = true;
        }
        let missing = (0..n).filter(|&p| !is_obs[p]).collect();
        Self { observed, missing }
    }
}

pub fn embed(sample: &LabeledSymMatrix, index: &UnionIndex) -> Result<Embedding> {
    let lookup: HashMap<&str, usize> = index
        .union_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let observed = sample
        .labels
        .iter()
        .map(|l| lookup.get(l.as_str()).copied().ok_or_else(|| unknown(l)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Embedding::from_positions(observed, index.len()))
}

/// Eigenvalue-clipping projection onto matrices whose smallest eigenvalue is
/// at least `eps_ratio * max |eigenvalue|`. Labels are preserved and input
/// that already satisfies the bound is returned unchanged.
pub fn near_pd(m: &LabeledSymMatrix, eps_ratio: f64) -> LabeledSymMatrix {
    match near_pd_values(&m.values, eps_ratio) {
        Some(values) => LabeledSymMatrix::from_parts(m.labels.clone(), values),
        None => m.clone(),
    }
}

/// The floor `eps_ratio * max |lambda|`, or `None` if every eigenvalue
/// already clears it.
fn eigenvalue_floor(eigenvalues: &[f64], eps_ratio: f64) -> Option<f64> {
    let scale = eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let floor = if scale > 0.0 {
        eps_ratio * scale
    } else {
        eps_ratio
    };
    (!eigenvalues.iter().all(|&v| v >= floor)).then_some(floor)
}

/// Inverse of a lower-triangular matrix with nonzero diagonal, by 2x2
/// block recursion so most of the work is matrix products.
pub(crate) fn lower_triangular_inverse(l: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = l.nrows();
    if n <= 32 {
        return l.solve_lower_triangular(&DMatrix::identity(n, n));
    }
    let h = n / 2;
    let top = lower_triangular_inverse(&l.view((0, 0), (h, h)).into_owned())?;
    let bottom = lower_triangular_inverse(&l.view((h, h), (n - h, n - h)).into_owned())?;
    let off = -(&bottom * l.view((h, 0), (n - h, h))) * &top;
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (h, h)).copy_from(&top);
    out.view_mut((h, h), (n - h, n - h)).copy_from(&bottom);
    out.view_mut((h, 0), (n - h, h)).copy_from(&off);
    Some(out)
}

/// Returns `None` when `m` already satisfies the eigenvalue bound.
pub(crate) fn near_pd_values(m: &DMatrix<f64>, eps_ratio: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return None;
    }
    // ||m||_F bounds the spectral radius, so a successful factorization of
    // m - eps*||m||_F*I proves the bound without an eigendecomposition.
    let frob = m.norm();
    if frob > 0.0 {
        let shifted = m - DMatrix::<f64>::identity(n, n) * (eps_ratio * frob);
        if shifted.cholesky().is_some() {
            return None;
        }
    }
    let values = m.clone().symmetric_eigenvalues();
    eigenvalue_floor(values.as_slice(), eps_ratio)?;
    let eig = SymmetricEigen::new(m.clone());
    let floor = eigenvalue_floor(eig.eigenvalues.as_slice(), eps_ratio)?;
    let clipped = eig.eigenvalues.map(|v| v.max(floor));
    let vecs = &eig.eigenvectors;
    let mut out = vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
    symmetrize_in_place(&mut out);
    Some(out)
}

pub fn to_correlation(m: &LabeledSymMatrix) -> Result<LabeledSymMatrix> {
    let n = m.dim();
    let mut inv_sd = Vec::with_capacity(n);
    for i in 0..n {
        let d = m.values[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NonPositiveDiagonal {
                label: m.labels[i].clone(),
            });
        }
        inv_sd.push(1.0 / d.sqrt());
    }
    let mut out = DMatrix::from_fn(n, n, |i, j| m.values[(i, j)] * inv_sd[i] * inv_sd[j]);
    for i in 0..n {
        out[(i, i)] = 1.0;
    }
    symmetrize_in_place(&mut out);
    Ok(LabeledSymMatrix::from_parts(m.labels.clone(), out))
}
