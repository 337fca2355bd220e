//! Relationship, distance and kernel matrices built from genotype-by-feature
//! matrices.

use std::collections::HashSet;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matcore::{symmetrize_in_place, LabeledSymMatrix};

/// Genotype-by-marker allele dosages with an explicit missing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerMatrix {
    genotype_labels: Vec<String>,
    marker_labels: Vec<String>,
    dosages: DMatrix<f64>,
    ploidy: u32,
    missing: DMatrix<bool>,
}

impl MarkerMatrix {
    /// Missing cells may hold any value in `dosages`; they are zeroed.
    pub fn new(
        genotype_labels: Vec<String>,
        marker_labels: Vec<String>,
        mut dosages: DMatrix<f64>,
        ploidy: u32,
        missing: DMatrix<bool>,
    ) -> Result<Self> {
        let (n, m) = dosages.shape();
        if genotype_labels.len() != n || marker_labels.len() != m || missing.shape() != (n, m) {
            return Err(Error::DimensionMismatch(format!(
                "{} genotypes x {} markers for a {}x{} dosage matrix",
                genotype_labels.len(),
                marker_labels.len(),
                n,
                m
            )));
        }
        if ploidy == 0 {
            return Err(Error::InvalidConfig("ploidy must be positive".into()));
        }
        unique(&genotype_labels)?;
        unique(&marker_labels)?;
        let top = f64::from(ploidy);
        for i in 0..n {
            for j in 0..m {
                if missing[(i, j)] {
                    dosages[(i, j)] = 0.0;
                    continue;
                }
                let v = dosages[(i, j)];
                if !(0.0..=top).contains(&v) {
                    return Err(Error::DosageOutOfRange {
                        row: i,
                        col: j,
                        value: v,
                        ploidy,
                    });
                }
            }
        }
        Ok(Self {
            genotype_labels,
            marker_labels,
            dosages,
            ploidy,
            missing,
        })
    }

    /// Fully observed dosages.
    pub fn complete(
        genotype_labels: Vec<String>,
        marker_labels: Vec<String>,
        dosages: DMatrix<f64>,
        ploidy: u32,
    ) -> Result<Self> {
        let missing = DMatrix::from_element(dosages.nrows(), dosages.ncols(), false);
        Self::new(genotype_labels, marker_labels, dosages, ploidy, missing)
    }

    pub fn genotype_labels(&self) -> &[String] {
        &self.genotype_labels
    }

    pub fn marker_labels(&self) -> &[String] {
        &self.marker_labels
    }

    pub fn dosages(&self) -> &DMatrix<f64> {
        &self.dosages
    }

    pub fn missing_mask(&self) -> &DMatrix<bool> {
        &self.missing
    }

    pub fn ploidy(&self) -> u32 {
        self.ploidy
    }

    pub fn n_genotypes(&self) -> usize {
        self.dosages.nrows()
    }

    pub fn n_markers(&self) -> usize {
        self.dosages.ncols()
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&b| b)
    }

    /// Replaces each missing dosage by its marker's observed mean.
    pub fn mean_impute(&self) -> Result<Self> {
        let (n, m) = self.dosages.shape();
        let mut out = self.dosages.clone();
        for j in 0..m {
            let (mut sum, mut count) = (0.0, 0usize);
            for i in 0..n {
                if !self.missing[(i, j)] {
                    sum += self.dosages[(i, j)];
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::EmptyRowOrColumn {
                    label: self.marker_labels[j].clone(),
                });
            }
            let mean = sum / count as f64;
            for i in 0..n {
                if self.missing[(i, j)] {
                    out[(i, j)] = mean;
                }
            }
        }
        Ok(Self {
            genotype_labels: self.genotype_labels.clone(),
            marker_labels: self.marker_labels.clone(),
            dosages: out,
            ploidy: self.ploidy,
            missing: DMatrix::from_element(n, m, false),
        })
    }

    /// Sub-panel with the given genotype and marker positions.
    pub fn subset(&self, genotypes: &[usize], markers: &[usize]) -> Self {
        Self {
            genotype_labels: genotypes
                .iter()
                .map(|&i| self.genotype_labels[i].clone())
                .collect(),
            marker_labels: markers
                .iter()
                .map(|&j| self.marker_labels[j].clone())
                .collect(),
            dosages: DMatrix::from_fn(genotypes.len(), markers.len(), |i, j| {
                self.dosages[(genotypes[i], markers[j])]
            }),
            ploidy: self.ploidy,
            missing: DMatrix::from_fn(genotypes.len(), markers.len(), |i, j| {
                self.missing[(genotypes[i], markers[j])]
            }),
        }
    }

    /// Allele frequencies `p_j = mean_j / ploidy`.
    pub fn allele_frequencies(&self) -> Result<Vec<f64>> {
        self.require_complete()?;
        let n = self.n_genotypes() as f64;
        let top = f64::from(self.ploidy);
        Ok(self
            .dosages
            .column_iter()
            .map(|c| c.sum() / n / top)
            .collect())
    }

    /// Column-centered dosages `M - ploidy * 1 p'`, the marker design of
    /// ridge-regression BLUP.
    pub fn centered_features(&self) -> Result<DMatrix<f64>> {
        let p = self.allele_frequencies()?;
        let top = f64::from(self.ploidy);
        let mut x = self.dosages.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(-top * p[j]);
        }
        Ok(x)
    }

    fn require_complete(&self) -> Result<()> {
        if self.has_missing() {
            Err(Error::MissingDosages)
        } else {
            Ok(())
        }
    }
}

fn unique(labels: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(labels.len());
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::DuplicateLabel { label: l.clone() });
        }
    }
    Ok(())
}

/// VanRaden additive relationship `X X'` with `X = (M - ploidy 1 p') / sqrt(c)`
/// and `c = ploidy * sum p (1 - p)`.
pub fn grm_vanraden(m: &MarkerMatrix) -> Result<LabeledSymMatrix> {
    let p = m.allele_frequencies()?;
    let c: f64 = f64::from(m.ploidy) * p.iter().map(|p| p * (1.0 - p)).sum::<f64>();
    if !(c > 0.0) {
        return Err(Error::MonomorphicPanel);
    }
    let x = m.centered_features()? / c.sqrt();
    let mut g = &x * x.transpose();
    symmetrize_in_place(&mut g);
    Ok(LabeledSymMatrix::from_parts(m.genotype_labels.clone(), g))
}

/// Row-centered features scaled so that `X X'` has unit mean diagonal.
pub fn rowcentered_features(values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = values.shape();
    if n < 2 || m == 0 {
        return Err(Error::DegenerateCovariance(format!(
            "need at least 2 genotypes and 1 feature, got {n}x{m}"
        )));
    }
    let mut x = values.clone();
    for mut row in x.row_iter_mut() {
        let mean = row.sum() / m as f64;
        row.add_scalar_mut(-mean);
    }
    let mean_diag = x.row_iter().map(|r| r.norm_squared()).sum::<f64>() / n as f64;
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return Err(Error::DegenerateCovariance(
            "all genotypes have constant features".into(),
        ));
    }
    Ok(x / mean_diag.sqrt())
}

/// Genotype covariance across features divided by its mean diagonal.
pub fn rowcentered_kernel(labels: Vec<String>, values: &DMatrix<f64>) -> Result<LabeledSymMatrix> {
    if labels.len() != values.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            values.nrows()
        )));
    }
    let x = rowcentered_features(values)?;
    let mut g = &x * x.transpose();
    symmetrize_in_place(&mut g);
    // Pin the mean diagonal to exactly one against accumulated rounding.
    let n = g.nrows();
    let mean = g.diagonal().sum() / n as f64;
    g /= mean;
    LabeledSymMatrix::symmetrized(labels, g)
}

pub fn grm_rowcentered(m: &MarkerMatrix) -> Result<LabeledSymMatrix> {
    m.require_complete()?;
    rowcentered_kernel(m.genotype_labels.clone(), &m.dosages)
}

/// Squared Euclidean distances implied by a Gram matrix,
/// `d_ij = G_ii + G_jj - 2 G_ij`.
pub fn grm_to_dist(g: &LabeledSymMatrix) -> LabeledSymMatrix {
    let v = g.values();
    let n = g.dim();
    let mut d = DMatrix::from_fn(n, n, |i, j| v[(i, i)] + v[(j, j)] - 2.0 * v[(i, j)]);
    for i in 0..n {
        d[(i, i)] = 0.0;
    }
    symmetrize_in_place(&mut d);
    LabeledSymMatrix::from_parts(g.labels().to_vec(), d)
}

/// Double centering `-1/2 P D P` with `P = I - 11'/n`.
pub fn dist_to_grm(d: &LabeledSymMatrix) -> Result<LabeledSymMatrix> {
    let v = d.values();
    let n = d.dim();
    let scale = v.amax().max(1.0);
    for i in 0..n {
        if v[(i, i)].abs() > 1e-9 * scale {
            return Err(Error::NonzeroDiagonal {
                label: d.labels()[i].clone(),
            });
        }
    }
    if n == 0 {
        return Ok(d.clone());
    }
    let nf = n as f64;
    let row_means: Vec<f64> = v.row_iter().map(|r| r.sum() / nf).collect();
    let grand = row_means.iter().sum::<f64>() / nf;
    let mut g = DMatrix::from_fn(n, n, |i, j| {
        -0.5 * (v[(i, j)] - row_means[i] - row_means[j] + grand)
    });
    symmetrize_in_place(&mut g);
    Ok(LabeledSymMatrix::from_parts(d.labels().to_vec(), g))
}

/// Entrywise `exp(-h D)`.
pub fn gaussian_kernel(d: &LabeledSymMatrix, h: f64) -> Result<LabeledSymMatrix> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::NegativeBandwidth(h));
    }
    let mut k = d.values().map(|x| (-h * x).exp());
    for i in 0..d.dim() {
        k[(i, i)] = 1.0;
    }
    Ok(LabeledSymMatrix::from_parts(d.labels().to_vec(), k))
}

/// `(x_i'x_j + c)^d` on the row-centered, scaled features.
pub fn polynomial_kernel(m: &MarkerMatrix, c: f64, degree: u32) -> Result<LabeledSymMatrix> {
    if degree == 0 {
        return Err(Error::InvalidConfig(
            "polynomial degree must be positive".into(),
        ));
    }
    let lin = grm_rowcentered(m)?;
    let exp = i32::try_from(degree)
        .map_err(|_| Error::InvalidConfig(format!("polynomial degree {degree} is too large")))?;
    let k = lin.values().map(|v| (v + c).powi(exp));
    Ok(LabeledSymMatrix::from_parts(m.genotype_labels.clone(), k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn labels(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn markers(rows: &[&[f64]]) -> MarkerMatrix {
        let n = rows.len();
        let m = rows[0].len();
        MarkerMatrix::complete(
            labels("g", n),
            labels("m", m),
            DMatrix::from_fn(n, m, |i, j| rows[i][j]),
            2,
        )
        .unwrap()
    }

    /// Deterministic pseudo-random dosages for oracle comparisons.
    fn lcg_dosages(n: usize, m: usize, seed: u64) -> MarkerMatrix {
        let mut s = seed;
        let vals = (0..n * m)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 33) % 3) as f64
            })
            .collect::<Vec<_>>();
        MarkerMatrix::complete(
            labels("g", n),
            labels("m", m),
            DMatrix::from_vec(n, m, vals),
            2,
        )
        .unwrap()
    }

    fn lsm(rows: &[&[f64]]) -> LabeledSymMatrix {
        let n = rows.len();
        LabeledSymMatrix::new(labels("g", n), DMatrix::from_fn(n, n, |i, j| rows[i][j])).unwrap()
    }

    #[test]
    fn vanraden_single_marker() {
        let g = grm_vanraden(&markers(&[&[0.0], &[2.0]])).unwrap();
        assert_abs_diff_eq!(g.values()[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.values()[(0, 1)], -2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(g.values()[(1, 1)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn vanraden_identical_rows_give_zero_matrix() {
        // Every dosage equals ploidy * p, so X = 0 while c = 0.5.
        let g = grm_vanraden(&markers(&[&[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert_eq!(g.values(), &DMatrix::zeros(2, 2));
        assert_eq!(
            grm_vanraden(&markers(&[&[2.0, 0.0], &[2.0, 0.0]])),
            Err(Error::MonomorphicPanel)
        );
    }

    #[test]
    fn vanraden_matches_formula_oracle() {
        let m = lcg_dosages(5, 20, 11);
        let g = grm_vanraden(&m).unwrap();
        let d = m.dosages();
        let p: Vec<f64> = (0..20)
            .map(|j| (0..5).map(|i| d[(i, j)]).sum::<f64>() / 10.0)
            .collect();
        let c: f64 = 2.0 * p.iter().map(|p| p * (1.0 - p)).sum::<f64>();
        for i in 0..5 {
            for k in 0..5 {
                let mut s = 0.0;
                for j in 0..20 {
                    s += (d[(i, j)] - 2.0 * p[j]) * (d[(k, j)] - 2.0 * p[j]);
                }
                assert_abs_diff_eq!(g.values()[(i, k)], s / c, epsilon = 1e-12);
            }
        }
        for r in g.values().row_iter() {
            assert!(r.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn vanraden_requires_complete_dosages() {
        let mut miss = DMatrix::from_element(2, 2, false);
        miss[(0, 1)] = true;
        let m = MarkerMatrix::new(
            labels("g", 2),
            labels("m", 2),
            DMatrix::zeros(2, 2),
            2,
            miss,
        )
        .unwrap();
        assert_eq!(grm_vanraden(&m), Err(Error::MissingDosages));
        let imputed = m.mean_impute().unwrap();
        assert!(!imputed.has_missing());
        assert_eq!(imputed.dosages()[(0, 1)], 0.0);
    }

    #[test]
    fn dosage_range_is_checked() {
        let r = MarkerMatrix::complete(
            labels("g", 1),
            labels("m", 1),
            DMatrix::from_element(1, 1, 3.0),
            2,
        );
        assert!(matches!(r, Err(Error::DosageOutOfRange { .. })));
        let tetra = MarkerMatrix::complete(
            labels("g", 1),
            labels("m", 1),
            DMatrix::from_element(1, 1, 3.0),
            4,
        );
        assert!(tetra.is_ok());
    }

    #[test]
    fn rowcentered_two_genotypes() {
        let g = grm_rowcentered(&markers(&[&[0.0, 2.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(
            g.values(),
            &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
    }

    #[test]
    fn rowcentered_mean_diagonal_is_one() {
        let g = grm_rowcentered(&lcg_dosages(6, 50, 3)).unwrap();
        assert_abs_diff_eq!(g.values().diagonal().mean(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rowcentered_matches_covariance_oracle() {
        let m = lcg_dosages(4, 30, 5);
        let g = grm_rowcentered(&m).unwrap();
        let d = m.dosages();
        let means: Vec<f64> = (0..4).map(|i| d.row(i).sum() / 30.0).collect();
        let cov = DMatrix::from_fn(4, 4, |i, k| {
            (0..30)
                .map(|j| (d[(i, j)] - means[i]) * (d[(k, j)] - means[k]))
                .sum::<f64>()
                / 29.0
        });
        let md = cov.diagonal().mean();
        for i in 0..4 {
            for k in 0..4 {
                assert_abs_diff_eq!(g.values()[(i, k)], cov[(i, k)] / md, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rowcentered_degenerate_inputs() {
        assert!(matches!(
            grm_rowcentered(&markers(&[&[1.0, 1.0], &[2.0, 2.0]])),
            Err(Error::DegenerateCovariance(_))
        ));
        assert!(matches!(
            grm_rowcentered(&markers(&[&[1.0, 0.0]])),
            Err(Error::DegenerateCovariance(_))
        ));
    }

    #[test]
    fn distance_examples() {
        let d = grm_to_dist(&lsm(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(
            d.values(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0])
        );
        let d = grm_to_dist(&lsm(&[&[2.0, -2.0], &[-2.0, 2.0]]));
        assert_eq!(
            d.values(),
            &DMatrix::from_row_slice(2, 2, &[0.0, 8.0, 8.0, 0.0])
        );
        let g = dist_to_grm(&lsm(&[&[0.0, 2.0], &[2.0, 0.0]])).unwrap();
        assert_eq!(
            g.values(),
            &DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5])
        );
        assert_eq!(
            dist_to_grm(&lsm(&[&[1.0, 2.0], &[2.0, 0.0]])),
            Err(Error::NonzeroDiagonal { label: "g0".into() })
        );
    }

    #[test]
    fn distance_matches_cholesky_embedding() {
        let a = DMatrix::from_fn(5, 5, |i, j| {
            ((i * 3 + j * 7) % 5) as f64 - 2.0 + (i == j) as u8 as f64 * 4.0
        });
        let g = LabeledSymMatrix::symmetrized(labels("g", 5), &a * a.transpose()).unwrap();
        let l = g.values().clone().cholesky().unwrap().l();
        let d = grm_to_dist(&g);
        for i in 0..5 {
            for j in 0..5 {
                let diff = l.row(i) - l.row(j);
                assert_abs_diff_eq!(d.values()[(i, j)], diff.norm_squared(), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn double_centering_matches_matrix_product() {
        let n = 6;
        let mut d = DMatrix::from_fn(n, n, |i, j| ((i + 1) * (j + 2) % 7) as f64);
        d = (&d + d.transpose()) * 0.5;
        for i in 0..n {
            d[(i, i)] = 0.0;
        }
        let dl = LabeledSymMatrix::new(labels("g", n), d.clone()).unwrap();
        let p = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let want = &p * &d * &p * -0.5;
        let got = dist_to_grm(&dl).unwrap();
        assert!((got.values() - want).amax() < 1e-12);
    }

    #[test]
    fn gaussian_examples() {
        let z = lsm(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(
            gaussian_kernel(&z, 1.0).unwrap().values(),
            &DMatrix::from_element(2, 2, 1.0)
        );
        let k = gaussian_kernel(&lsm(&[&[0.0, 2.0], &[2.0, 0.0]]), 0.5).unwrap();
        assert_abs_diff_eq!(k.values()[(0, 1)], (-1.0f64).exp(), epsilon = 1e-15);
        assert_eq!(k.values()[(0, 0)], 1.0);
        assert_eq!(gaussian_kernel(&z, 0.0), Err(Error::NegativeBandwidth(0.0)));
        assert_eq!(
            gaussian_kernel(&z, -1.0),
            Err(Error::NegativeBandwidth(-1.0))
        );
    }

    #[test]
    fn polynomial_reductions() {
        let m = lcg_dosages(3, 8, 17);
        let lin = grm_rowcentered(&m).unwrap();
        assert_eq!(
            polynomial_kernel(&m, 0.0, 1).unwrap().values(),
            lin.values()
        );
        let quad = polynomial_kernel(&m, 1.0, 2).unwrap();
        let want = lin.values().map(|v| (v + 1.0) * (v + 1.0));
        assert!((quad.values() - want).amax() < 1e-12);
    }

    #[test]
    fn polynomial_matches_double_loop() {
        let m = lcg_dosages(4, 10, 23);
        let k = polynomial_kernel(&m, 0.5, 3).unwrap();
        let d = m.dosages();
        let centered: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mean = (0..10).map(|j| d[(i, j)]).sum::<f64>() / 10.0;
                (0..10).map(|j| d[(i, j)] - mean).collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let scale = (0..4).map(|i| dot(&centered[i], &centered[i])).sum::<f64>() / 4.0;
        for i in 0..4 {
            for j in 0..4 {
                let want = (dot(&centered[i], &centered[j]) / scale + 0.5).powi(3);
                assert_abs_diff_eq!(k.values()[(i, j)], want, epsilon = 1e-12);
            }
        }
    }

    fn dosage_strategy() -> impl Strategy<Value = MarkerMatrix> {
        (2usize..7, 2usize..15).prop_flat_map(|(n, m)| {
            prop::collection::vec(0u8..=2, n * m).prop_map(move |v| {
                let d = DMatrix::from_vec(n, m, v.into_iter().map(f64::from).collect());
                MarkerMatrix::complete(labels("g", n), labels("m", m), d, 2).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn vanraden_is_psd_and_round_trips_through_distance(m in dosage_strategy()) {
            if let Ok(g) = grm_vanraden(&m) {
                let eig = g.values().clone().symmetric_eigenvalues();
                prop_assert!(eig.min() >= -1e-9 * eig.max().max(1.0));
                let back = dist_to_grm(&grm_to_dist(&g)).unwrap();
                prop_assert!(back.frobenius_distance(&g) <= 1e-9 * g.values().norm().max(1.0));
            }
        }

        #[test]
        fn gaussian_scaling_law(m in dosage_strategy(), h in 0.01f64..2.0) {
            if let Ok(g) = grm_rowcentered(&m) {
                let d = grm_to_dist(&g);
                let k1 = gaussian_kernel(&d, h).unwrap();
                let k2 = gaussian_kernel(&d, 2.0 * h).unwrap();
                let sq = k1.values().component_mul(k1.values());
                prop_assert!((k2.values() - sq).amax() < 1e-12);
                let back = k1.values().map(|v| -v.ln() / h);
                prop_assert!((back - d.values()).amax() < 1e-12);
            }
        }
    }
}
