//! EM estimation of a combined covariance matrix from partially observed
//! Wishart samples.
//!
//! Each input `G_a` is treated as the observed block of a draw from
//! `W(nu, Psi)`. The E-step completes every sample with its conditional
//! expectation given the current `Psi`; the M-step averages the completed
//! matrices. The combined estimate is reported as `Sigma = nu * Psi`, which
//! does not depend on `nu`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matcore::{
    build_union_index_ordered, gather, gather_block, lower_triangular_inverse, near_pd_values,
    symmetrize_in_place, Embedding, LabeledSymMatrix, UnionIndex, UnionOrder, DEFAULT_EPS_RATIO,
};

/// Largest union size for which standard errors are computed by default.
/// The information matrix has `n(n+1)/2` rows, so memory grows as `n^4`.
pub const DEFAULT_SE_DIM_LIMIT: usize = 64;

/// Observed partial relationship matrices, their weights and the union of
/// their labels.
#[derive(Debug, Clone)]
pub struct PartialSampleSet {
    samples: Vec<LabeledSymMatrix>,
    weights: Vec<f64>,
    index: UnionIndex,
    embeddings: Vec<Embedding>,
}

impl PartialSampleSet {
    pub fn new(samples: Vec<LabeledSymMatrix>) -> Result<Self> {
        let m = samples.len();
        Self::with_options(samples, vec![1.0; m], UnionOrder::FirstAppearance)
    }

    pub fn with_weights(samples: Vec<LabeledSymMatrix>, weights: Vec<f64>) -> Result<Self> {
        Self::with_options(samples, weights, UnionOrder::FirstAppearance)
    }

    pub fn with_options(
        samples: Vec<LabeledSymMatrix>,
        weights: Vec<f64>,
        order: UnionOrder,
    ) -> Result<Self> {
        if weights.len() != samples.len() {
            return Err(Error::InvalidConfig(format!(
                "{} weights for {} samples",
                weights.len(),
                samples.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && **w <= 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "weight {w} is outside (0, 1]"
            )));
        }
        if samples.iter().any(|s| s.dim() == 0) {
            return Err(Error::InvalidConfig("sample with no labels".into()));
        }
        let index = build_union_index_ordered(&samples, order)?;
        let n = index.len();
        let embeddings = index
            .per_sample_positions()
            .iter()
            .map(|pos| Embedding::from_positions(pos.clone(), n))
            .collect();
        Ok(Self {
            samples,
            weights,
            index,
            embeddings,
        })
    }

    pub fn samples(&self) -> &[LabeledSymMatrix] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn index(&self) -> &UnionIndex {
        &self.index
    }

    pub fn union_labels(&self) -> &[String] {
        self.index.union_labels()
    }

    pub fn embedding(&self, sample: usize) -> &Embedding {
        &self.embeddings[sample]
    }

    /// Size of the union `K`.
    pub fn n(&self) -> usize {
        self.index.len()
    }

    /// Number of samples.
    pub fn m(&self) -> usize {
        self.samples.len()
    }

    /// Aligns a union-sized matrix to the union label order.
    fn align(&self, psi: &LabeledSymMatrix) -> Result<DMatrix<f64>> {
        if psi.labels() == self.union_labels() {
            Ok(psi.values().clone())
        } else {
            if psi.dim() != self.n() {
                return Err(Error::DimensionMismatch(format!(
                    "matrix has {} labels, union has {}",
                    psi.dim(),
                    self.n()
                )));
            }
            Ok(psi.restrict_to(self.union_labels())?.into_parts().1)
        }
    }
}

/// Starting value for the iteration.
#[derive(Debug, Clone, Default)]
pub enum Init {
    /// `Sigma0 = I`.
    #[default]
    Identity,
    /// User-supplied `Sigma0`, matched to the union by label.
    Sigma(LabeledSymMatrix),
}

/// Order in which per-sample terms are accumulated. The update is a sum, so
/// both orders give the same estimate up to rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleOrder {
    #[default]
    Fixed,
    Shuffled {
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct EMConfig {
    /// Degrees of freedom; `None` resolves to `n + 1`.
    pub nu: Option<f64>,
    pub max_iter: usize,
    /// Stop once `||Psi_new - Psi||_F / ||Psi||_F < rel_tol`.
    pub rel_tol: f64,
    pub pd_every_step: bool,
    pub eps_ratio: f64,
    pub init: Init,
    pub sample_order: SampleOrder,
    pub compute_se: bool,
    pub se_method: InformationMethod,
    pub se_dim_limit: usize,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            nu: None,
            max_iter: 1000,
            rel_tol: 1e-6,
            pd_every_step: true,
            eps_ratio: DEFAULT_EPS_RATIO,
            init: Init::Identity,
            sample_order: SampleOrder::Fixed,
            compute_se: false,
            se_method: InformationMethod::CompleteData,
            se_dim_limit: DEFAULT_SE_DIM_LIMIT,
        }
    }
}

impl EMConfig {
    pub fn resolved_nu(&self, n: usize) -> f64 {
        self.nu.unwrap_or(n as f64 + 1.0)
    }

    fn validate(&self, n: usize) -> Result<f64> {
        let nu = self.resolved_nu(n);
        if !(nu > n as f64) || !nu.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "degrees of freedom {nu} must exceed the union size {n}"
            )));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("rel_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.eps_ratio > 0.0) {
            return Err(Error::InvalidConfig("eps_ratio must be positive".into()));
        }
        Ok(nu)
    }
}

#[derive(Debug, Clone)]
pub struct EMResult {
    /// `nu * psi_hat`, the combined relationship matrix.
    pub sigma_hat: LabeledSymMatrix,
    pub psi_hat: LabeledSymMatrix,
    /// Log-likelihood of the starting value followed by one entry per iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub nu: f64,
    /// Iterations in which the positive-definite projection changed `Psi`.
    pub pd_projections: usize,
    /// Entrywise asymptotic standard errors of `sigma_hat`.
    pub se: Option<LabeledSymMatrix>,
}

/// Observed-data log-likelihood without its constant:
/// `-1/2 sum_i [tr(Psi_a^-1 G_a) + nu log|Psi_a|]`.
pub fn partial_loglik(psi: &LabeledSymMatrix, nu: f64, set: &PartialSampleSet) -> Result<f64> {
    let psi = set.align(psi)?;
    loglik_values(&psi, nu, set)
}

pub(crate) fn loglik_values(psi: &DMatrix<f64>, nu: f64, set: &PartialSampleSet) -> Result<f64> {
    let mut total = 0.0;
    for (i, sample) in set.samples.iter().enumerate() {
        let psi_a = gather(psi, &set.embeddings[i].observed);
        let chol = Cholesky::new(psi_a).ok_or(Error::SingularSubmatrix { sample: i })?;
        let (inv, log_det) = spd_inverse(&chol).ok_or(Error::SingularSubmatrix { sample: i })?;
        // tr(P G) for symmetric P and G
        let trace = inv.component_mul(sample.values()).sum();
        total += trace + nu * log_det;
    }
    Ok(-0.5 * total)
}

/// Regression of the missing block on the observed block, and the residual
/// (Schur complement) covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalBlocks {
    /// Union positions of the missing block `b`, ascending.
    pub missing: Vec<usize>,
    /// `B = Psi_ba Psi_aa^-1`, shaped `|b| x |a|`.
    pub regression: DMatrix<f64>,
    /// `Psi_bb - Psi_ba Psi_aa^-1 Psi_ab`.
    pub schur: DMatrix<f64>,
}

pub fn conditional_blocks(psi: &LabeledSymMatrix, observed: &[usize]) -> Result<ConditionalBlocks> {
    if let Some(&p) = observed.iter().find(|&&p| p >= psi.dim()) {
        return Err(Error::DimensionMismatch(format!(
            "position {p} outside a {0}x{0} matrix",
            psi.dim()
        )));
    }
    let emb = Embedding::from_positions(observed.to_vec(), psi.dim());
    conditional_blocks_values(psi.values(), &emb, 0)
}

/// Inverse and log-determinant from a Cholesky factor. The inverse goes
/// through `L^-1` so the bulk of the work is a matrix product.
fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> Option<(DMatrix<f64>, f64)> {
    let l = chol.l();
    let log_det = l.diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let l_inv = lower_triangular_inverse(&l)?;
    let mut inv = l_inv.transpose() * &l_inv;
    symmetrize_in_place(&mut inv);
    Some((inv, log_det))
}

/// `Psi_aa^-1`, plus `log|Psi_aa|` when no ridge was needed to factor it.
struct ObservedInverse {
    inv: DMatrix<f64>,
    log_det: Option<f64>,
}

fn invert_observed(psi_aa: DMatrix<f64>, sample: usize) -> Result<ObservedInverse> {
    let singular = Error::SingularSubmatrix { sample };
    let k = psi_aa.nrows();
    if let Some(chol) = Cholesky::new(psi_aa.clone()) {
        let (inv, log_det) = spd_inverse(&chol).ok_or(singular)?;
        return Ok(ObservedInverse {
            inv,
            log_det: Some(log_det),
        });
    }
    // One ridge retry before giving up.
    let trace = psi_aa.trace();
    if !(trace > 0.0) {
        return Err(singular);
    }
    let ridge = 1e-10 * trace / k as f64;
    let chol = Cholesky::new(psi_aa + DMatrix::identity(k, k) * ridge).ok_or(singular.clone())?;
    let (inv, _) = spd_inverse(&chol).ok_or(singular)?;
    Ok(ObservedInverse { inv, log_det: None })
}

fn conditional_blocks_values(
    psi: &DMatrix<f64>,
    emb: &Embedding,
    sample: usize,
) -> Result<ConditionalBlocks> {
    let a = &emb.observed;
    let b = &emb.missing;
    let psi_ab = gather_block(psi, a, b);
    let inv = invert_observed(gather(psi, a), sample)?.inv;
    let regression = psi_ab.transpose() * inv;
    let mut schur = gather(psi, b) - &regression * &psi_ab;
    symmetrize_in_place(&mut schur);
    Ok(ConditionalBlocks {
        missing: b.clone(),
        regression,
        schur,
    })
}

/// Conditional expectation of the complete matrix given the observed block
/// `g_a` and the current `psi`, laid out over `psi`'s labels.
pub fn expected_complete(
    g_a: &LabeledSymMatrix,
    psi: &LabeledSymMatrix,
    nu: f64,
) -> Result<LabeledSymMatrix> {
    let lookup = psi.lookup();
    let observed = g_a
        .labels()
        .iter()
        .map(|l| {
            lookup
                .get(l.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownLabel { label: l.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let emb = Embedding::from_positions(observed, psi.dim());
    let inv = invert_observed(gather(psi.values(), &emb.observed), 0)?.inv;
    let values = expected_complete_values(g_a.values(), psi.values(), &emb, nu, &inv);
    Ok(LabeledSymMatrix::from_parts(psi.labels().to_vec(), values))
}

/// `psi_aa_inv` is the inverse of `psi` on the observed positions.
pub(crate) fn expected_complete_values(
    g: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    emb: &Embedding,
    nu: f64,
    psi_aa_inv: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = psi.nrows();
    let a = &emb.observed;
    let mut out = DMatrix::zeros(n, n);
    for (i, &pi) in a.iter().enumerate() {
        for (j, &pj) in a.iter().enumerate() {
            out[(pi, pj)] = g[(i, j)];
        }
    }
    if emb.missing.is_empty() {
        return out;
    }
    let b = &emb.missing;
    let psi_ba = gather_block(psi, b, a);
    let regression = &psi_ba * psi_aa_inv;
    let bg = &regression * g;
    // nu Psi_bb|a + B G B' = nu Psi_bb + (B G - nu Psi_ba) B', using B Psi_aa = Psi_ba
    let mut bb = gather(psi, b) * nu + (&bg - psi_ba * nu) * regression.transpose();
    symmetrize_in_place(&mut bb);
    for (i, &pi) in b.iter().enumerate() {
        for (j, &pj) in a.iter().enumerate() {
            let v = bg[(i, j)];
            out[(pi, pj)] = v;
            out[(pj, pi)] = v;
        }
        for (j, &pj) in b.iter().enumerate() {
            out[(pi, pj)] = bb[(i, j)];
        }
    }
    out
}

/// Observed block with the weighting `w G + (1 - w) nu Psi_aa` applied.
fn weighted_block(set: &PartialSampleSet, i: usize, psi: &DMatrix<f64>, nu: f64) -> DMatrix<f64> {
    let w = set.weights[i];
    let g = set.samples[i].values();
    if w == 1.0 {
        g.clone()
    } else {
        g * w + gather(psi, &set.embeddings[i].observed) * ((1.0 - w) * nu)
    }
}

/// One EM update of `Psi` on the union labels.
pub fn em_step(
    psi: &LabeledSymMatrix,
    set: &PartialSampleSet,
    cfg: &EMConfig,
) -> Result<LabeledSymMatrix> {
    let nu = cfg.resolved_nu(set.n());
    let psi = set.align(psi)?;
    let order: Vec<usize> = (0..set.m()).collect();
    let (next, _, _) = step_values(&psi, set, nu, cfg, &order)?;
    Ok(LabeledSymMatrix::from_parts(
        set.union_labels().to_vec(),
        next,
    ))
}

/// One sample's share of `-2 log L`: `tr(Psi_a^-1 G_a) + nu log|Psi_a|`.
fn loglik_term(factor: &ObservedInverse, g: &DMatrix<f64>, nu: f64, sample: usize) -> Result<f64> {
    let log_det = factor.log_det.ok_or(Error::SingularSubmatrix { sample })?;
    // tr(P G) for symmetric P and G
    Ok(factor.inv.component_mul(g).sum() + nu * log_det)
}

/// Returns the new `Psi`, whether the PD projection modified it, and the
/// log-likelihood at the input `psi`, which shares its factorizations with
/// the E-step.
fn step_values(
    psi: &DMatrix<f64>,
    set: &PartialSampleSet,
    nu: f64,
    cfg: &EMConfig,
    order: &[usize],
) -> Result<(DMatrix<f64>, bool, Result<f64>)> {
    let n = set.n();
    let terms = order
        .par_iter()
        .map(|&i| {
            let emb = &set.embeddings[i];
            let factor = invert_observed(gather(psi, &emb.observed), i)?;
            let g = weighted_block(set, i, psi, nu);
            let term = expected_complete_values(&g, psi, emb, nu, &factor.inv);
            Ok((
                i,
                term,
                loglik_term(&factor, set.samples[i].values(), nu, i),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    // Sequential reductions keep results independent of the thread count.
    let mut acc = DMatrix::zeros(n, n);
    for (_, t, _) in &terms {
        acc += t;
    }
    let mut by_sample: Vec<_> = terms.iter().map(|(i, _, ll)| (*i, ll.clone())).collect();
    by_sample.sort_unstable_by_key(|(i, _)| *i);
    let loglik = by_sample
        .into_iter()
        .try_fold(0.0, |total, (_, ll)| ll.map(|v| total + v))
        .map(|total| -0.5 * total);
    acc /= nu * set.m() as f64;
    symmetrize_in_place(&mut acc);
    if cfg.pd_every_step {
        if let Some(projected) = near_pd_values(&acc, cfg.eps_ratio) {
            return Ok((projected, true, loglik));
        }
    }
    Ok((acc, false, loglik))
}

fn initial_psi(set: &PartialSampleSet, cfg: &EMConfig, nu: f64) -> Result<DMatrix<f64>> {
    let n = set.n();
    let sigma0 = match &cfg.init {
        Init::Identity => DMatrix::identity(n, n),
        Init::Sigma(s) => {
            let aligned = s.restrict_to(set.union_labels())?.into_parts().1;
            near_pd_values(&aligned, cfg.eps_ratio).unwrap_or(aligned)
        }
    };
    Ok(sigma0 / nu)
}

/// Runs EM to convergence (or `max_iter`) and reports `Sigma = nu * Psi`.
pub fn combine(set: &PartialSampleSet, cfg: &EMConfig) -> Result<EMResult> {
    let nu = cfg.validate(set.n())?;
    let mut psi = initial_psi(set, cfg, nu)?;
    let mut loglik_trace = Vec::new();
    let mut order: Vec<usize> = (0..set.m()).collect();
    let mut rng = match cfg.sample_order {
        SampleOrder::Shuffled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        SampleOrder::Fixed => None,
    };
    let mut iterations = 0;
    let mut converged = false;
    let mut pd_projections = 0;
    while iterations < cfg.max_iter {
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
        }
        let (next, projected, loglik) = step_values(&psi, set, nu, cfg, &order)?;
        loglik_trace.push(loglik?);
        iterations += 1;
        pd_projections += usize::from(projected);
        let scale = psi.norm().max(f64::MIN_POSITIVE);
        let change = (&next - &psi).norm() / scale;
        psi = next;
        if change < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    loglik_trace.push(loglik_values(&psi, nu, set)?);
    let labels = set.union_labels().to_vec();
    let psi_hat = LabeledSymMatrix::from_parts(labels.clone(), psi.clone());
    let sigma_hat = LabeledSymMatrix::from_parts(labels, psi * nu);
    let mut result = EMResult {
        sigma_hat,
        psi_hat,
        loglik_trace,
        iterations,
        converged,
        nu,
        pd_projections,
        se: None,
    };
    if cfg.compute_se {
        result.se = Some(asymptotic_se_with(
            &result,
            set,
            cfg.se_method,
            cfg.se_dim_limit,
        )?);
    }
    Ok(result)
}

/// Which Hessian the information matrix is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InformationMethod {
    /// Expected complete-data information from the completed matrices `H_a`.
    #[default]
    CompleteData,
    /// Exact negative Hessian of [`partial_loglik`].
    Observed,
}

/// Information matrix over the half-vectorized parameters of `Psi`.
#[derive(Debug, Clone)]
pub struct InformationMatrix {
    /// `(j, k)` union positions with `j <= k`, one per row/column.
    pub params: Vec<(usize, usize)>,
    pub matrix: DMatrix<f64>,
}

fn half_vec_params(n: usize) -> Vec<(usize, usize)> {
    let mut params = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for k in j..n {
            params.push((j, k));
        }
    }
    params
}

/// Unit-entry expansion of the symmetric basis matrix for `psi_jk`.
fn basis_entries(j: usize, k: usize) -> ([(usize, usize); 2], usize) {
    if j == k {
        ([(j, j), (j, j)], 1)
    } else {
        ([(j, k), (k, j)], 2)
    }
}

/// `sum tr(A E1 A E2)` contribution for symmetric basis matrices, where
/// `tr(A e_p e_q' A e_r e_s') = A_qr A_sp`.
fn trace_pair(a: &DMatrix<f64>, b: &DMatrix<f64>, e1: (usize, usize), e2: (usize, usize)) -> f64 {
    let (t1, n1) = basis_entries(e1.0, e1.1);
    let (t2, n2) = basis_entries(e2.0, e2.1);
    let mut s = 0.0;
    for &(p, q) in &t1[..n1] {
        for &(r, s_) in &t2[..n2] {
            s += a[(q, r)] * b[(s_, p)];
        }
    }
    s
}

pub fn information_matrix(
    psi: &LabeledSymMatrix,
    set: &PartialSampleSet,
    nu: f64,
    method: InformationMethod,
) -> Result<InformationMatrix> {
    let psi = set.align(psi)?;
    let n = set.n();
    let params = half_vec_params(n);
    let p = params.len();
    let mut info = DMatrix::zeros(p, p);
    match method {
        InformationMethod::CompleteData => {
            for i in 0..set.m() {
                let g = weighted_block(set, i, &psi, nu);
                let emb = &set.embeddings[i];
                let inv = invert_observed(gather(&psi, &emb.observed), i)?.inv;
                let h = expected_complete_values(&g, &psi, emb, nu, &inv);
                // (H_a / nu)^-1 is the complete-data precision on the Psi scale.
                let chol = Cholesky::new(h / nu).ok_or(Error::SingularInformation)?;
                let prec = chol.inverse();
                for r in 0..p {
                    for c in r..p {
                        let v = 0.5 * nu * trace_pair(&prec, &prec, params[r], params[c]);
                        info[(r, c)] += v;
                    }
                }
            }
        }
        InformationMethod::Observed => {
            for i in 0..set.m() {
                let emb = &set.embeddings[i];
                let mut local = vec![usize::MAX; n];
                for (li, &pos) in emb.observed.iter().enumerate() {
                    local[pos] = li;
                }
                let chol = Cholesky::new(gather(&psi, &emb.observed))
                    .ok_or(Error::SingularSubmatrix { sample: i })?;
                let prec = chol.inverse();
                let q = &prec * set.samples[i].values() * &prec;
                let to_local = |(j, k): (usize, usize)| {
                    let (lj, lk) = (local[j], local[k]);
                    (lj != usize::MAX && lk != usize::MAX).then_some((lj.min(lk), lj.max(lk)))
                };
                for r in 0..p {
                    let Some(e1) = to_local(params[r]) else {
                        continue;
                    };
                    for c in r..p {
                        let Some(e2) = to_local(params[c]) else {
                            continue;
                        };
                        let t1 = trace_pair(&prec, &q, e1, e2);
                        let t2 = trace_pair(&prec, &q, e2, e1);
                        let t3 = trace_pair(&prec, &prec, e1, e2);
                        info[(r, c)] += 0.5 * (t1 + t2) - 0.5 * nu * t3;
                    }
                }
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            info[(r, c)] = info[(c, r)];
        }
    }
    Ok(InformationMatrix {
        params,
        matrix: info,
    })
}

/// Entrywise standard errors of `Sigma = nu * Psi` at the given `psi`.
pub fn standard_errors_at(
    psi: &LabeledSymMatrix,
    set: &PartialSampleSet,
    nu: f64,
    method: InformationMethod,
) -> Result<LabeledSymMatrix> {
    let info = information_matrix(psi, set, nu, method)?;
    let cov = Cholesky::new(info.matrix)
        .ok_or(Error::SingularInformation)?
        .inverse();
    let n = set.n();
    let mut se = DMatrix::zeros(n, n);
    for (idx, &(j, k)) in info.params.iter().enumerate() {
        let v = cov[(idx, idx)];
        if !(v >= 0.0) {
            return Err(Error::SingularInformation);
        }
        let s = nu * v.sqrt();
        se[(j, k)] = s;
        se[(k, j)] = s;
    }
    Ok(LabeledSymMatrix::from_parts(
        set.union_labels().to_vec(),
        se,
    ))
}

/// Asymptotic standard errors of a converged fit, using the complete-data
/// information and the default dimension guard.
pub fn asymptotic_se(result: &EMResult, set: &PartialSampleSet) -> Result<LabeledSymMatrix> {
    asymptotic_se_with(
        result,
        set,
        InformationMethod::CompleteData,
        DEFAULT_SE_DIM_LIMIT,
    )
}

pub fn asymptotic_se_with(
    result: &EMResult,
    set: &PartialSampleSet,
    method: InformationMethod,
    dim_limit: usize,
) -> Result<LabeledSymMatrix> {
    if set.n() > dim_limit {
        return Err(Error::DimensionGuardExceeded {
            n: set.n(),
            limit: dim_limit,
        });
    }
    if !result.converged {
        return Err(Error::InvalidConfig(
            "standard errors need a converged estimate".into(),
        ));
    }
    standard_errors_at(&result.psi_hat, set, result.nu, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    fn lsm(labels: &[&str], rows: &[&[f64]]) -> LabeledSymMatrix {
        let n = rows.len();
        LabeledSymMatrix::new(names(labels), DMatrix::from_fn(n, n, |i, j| rows[i][j])).unwrap()
    }

    #[test]
    fn loglik_identity_case() {
        let set = PartialSampleSet::new(vec![lsm(&["a", "b"], &[&[1., 0.], &[0., 1.]])]).unwrap();
        let psi = LabeledSymMatrix::identity(names(&["a", "b"])).unwrap();
        assert_abs_diff_eq!(
            partial_loglik(&psi, 3.0, &set).unwrap(),
            -1.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn loglik_diagonal_case() {
        let g = lsm(&["a", "b"], &[&[2., 0.], &[0., 2.]]);
        let set = PartialSampleSet::new(vec![g.clone()]).unwrap();
        let want = -(1.0 + 2.0 * 4f64.ln());
        assert_abs_diff_eq!(
            partial_loglik(&g, 4.0, &set).unwrap(),
            want,
            epsilon = 1e-13
        );
    }

    #[test]
    fn loglik_rejects_singular_block() {
        let set = PartialSampleSet::new(vec![
            lsm(&["a"], &[&[1.]]),
            lsm(&["b", "c"], &[&[1., 0.], &[0., 1.]]),
        ])
        .unwrap();
        let psi = lsm(
            &["a", "b", "c"],
            &[&[1., 0., 0.], &[0., 1., 1.], &[0., 1., 1.]],
        );
        assert_eq!(
            partial_loglik(&psi, 4.0, &set),
            Err(Error::SingularSubmatrix { sample: 1 })
        );
    }

    #[test]
    fn loglik_accepts_permuted_psi_labels() {
        let set = PartialSampleSet::new(vec![
            lsm(&["a", "b"], &[&[2., 0.5], &[0.5, 1.]]),
            lsm(&["b", "c"], &[&[1.5, 0.2], &[0.2, 1.]]),
        ])
        .unwrap();
        let psi = lsm(
            &["a", "b", "c"],
            &[&[1., 0.2, 0.1], &[0.2, 1., 0.3], &[0.1, 0.3, 1.]],
        );
        let perm = psi.restrict_to(&names(&["c", "a", "b"])).unwrap();
        let l1 = partial_loglik(&psi, 5.0, &set).unwrap();
        let l2 = partial_loglik(&perm, 5.0, &set).unwrap();
        assert_abs_diff_eq!(l1, l2, epsilon = 1e-13);
    }

    #[test]
    fn conditional_blocks_identity_has_zero_regression() {
        let psi = LabeledSymMatrix::identity(names(&["a", "b", "c"])).unwrap();
        let cb = conditional_blocks(&psi, &[0, 1]).unwrap();
        assert_eq!(cb.missing, vec![2]);
        assert_eq!(cb.regression, DMatrix::zeros(1, 2));
        assert_eq!(cb.schur, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn conditional_blocks_two_by_two() {
        let psi = lsm(&["a", "b"], &[&[1., 0.5], &[0.5, 1.]]);
        let cb = conditional_blocks(&psi, &[0]).unwrap();
        assert_abs_diff_eq!(cb.regression[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(cb.schur[(0, 0)], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn conditional_blocks_retries_with_ridge_then_fails() {
        let zero = lsm(&["a", "b"], &[&[0., 0.], &[0., 0.]]);
        assert_eq!(
            conditional_blocks(&zero, &[0]),
            Err(Error::SingularSubmatrix { sample: 0 })
        );
        // Singular but PSD: the ridge makes it factorable.
        let psd = lsm(
            &["a", "b", "c"],
            &[&[1., 1., 0.], &[1., 1., 0.], &[0., 0., 1.]],
        );
        assert!(conditional_blocks(&psd, &[0, 1]).is_ok());
    }

    #[test]
    fn expected_complete_full_observation_is_identity_map() {
        let g = lsm(&["a", "b"], &[&[2., 0.3], &[0.3, 1.]]);
        let psi = lsm(&["a", "b"], &[&[1., 0.1], &[0.1, 1.]]);
        let h = expected_complete(&g, &psi, 7.0).unwrap();
        assert_eq!(h, g);
    }

    #[test]
    fn expected_complete_with_identity_psi() {
        let g = lsm(&["a"], &[&[2.]]);
        let psi = LabeledSymMatrix::identity(names(&["a", "b", "c"])).unwrap();
        let h = expected_complete(&g, &psi, 5.0).unwrap();
        let want = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2., 5., 5.]));
        assert_eq!(h.values(), &want);
        let g_bad = lsm(&["z"], &[&[2.]]);
        assert!(matches!(
            expected_complete(&g_bad, &psi, 5.0),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn em_step_complete_sample_reaches_fixed_point() {
        let g = lsm(&["a", "b"], &[&[3., 1.], &[1., 2.]]);
        let set = PartialSampleSet::new(vec![g.clone()]).unwrap();
        let cfg = EMConfig {
            nu: Some(6.0),
            ..Default::default()
        };
        let psi = lsm(&["a", "b"], &[&[1., 0.3], &[0.3, 0.7]]);
        let next = em_step(&psi, &set, &cfg).unwrap();
        assert!(next.frobenius_distance(&g.scaled(1.0 / 6.0)) < 1e-15);
    }

    #[test]
    fn em_step_self_consistent_samples_are_a_fixed_point() {
        let psi = lsm(
            &["a", "b", "c"],
            &[&[1., 0.3, 0.1], &[0.3, 1.2, -0.2], &[0.1, -0.2, 0.9]],
        );
        let nu = 8.0;
        let s1 = psi.restrict_to(&names(&["a", "b"])).unwrap().scaled(nu);
        let s2 = psi.restrict_to(&names(&["c", "b"])).unwrap().scaled(nu);
        let set = PartialSampleSet::new(vec![s1, s2]).unwrap();
        let cfg = EMConfig {
            nu: Some(nu),
            ..Default::default()
        };
        let next = em_step(&psi, &set, &cfg).unwrap();
        assert!(next.frobenius_distance(&psi) < 1e-14);
    }

    #[test]
    fn weights_of_one_match_unweighted_step() {
        let s1 = lsm(&["a", "b"], &[&[2., 0.4], &[0.4, 1.]]);
        let s2 = lsm(&["b", "c"], &[&[1.5, -0.3], &[-0.3, 1.]]);
        let plain = PartialSampleSet::new(vec![s1.clone(), s2.clone()]).unwrap();
        let weighted = PartialSampleSet::with_weights(vec![s1, s2], vec![1.0, 1.0]).unwrap();
        let psi = LabeledSymMatrix::identity(names(&["a", "b", "c"]))
            .unwrap()
            .scaled(0.25);
        let cfg = EMConfig {
            nu: Some(4.0),
            ..Default::default()
        };
        assert_eq!(
            em_step(&psi, &plain, &cfg).unwrap(),
            em_step(&psi, &weighted, &cfg).unwrap()
        );
    }

    #[test]
    fn down_weighted_self_consistent_sample_stays_fixed() {
        let psi = lsm(&["a", "b"], &[&[1., 0.2], &[0.2, 1.]]);
        let nu = 5.0;
        let set =
            PartialSampleSet::with_weights(vec![psi.scaled(nu), psi.scaled(nu)], vec![0.3, 0.3])
                .unwrap();
        let cfg = EMConfig {
            nu: Some(nu),
            ..Default::default()
        };
        assert!(em_step(&psi, &set, &cfg).unwrap().frobenius_distance(&psi) < 1e-14);
    }

    #[test]
    fn invalid_weights_rejected() {
        let s = lsm(&["a"], &[&[1.]]);
        assert!(PartialSampleSet::with_weights(vec![s.clone()], vec![0.0]).is_err());
        assert!(PartialSampleSet::with_weights(vec![s.clone()], vec![1.5]).is_err());
        assert!(PartialSampleSet::with_weights(vec![s], vec![]).is_err());
    }

    #[test]
    fn combine_single_complete_sample() {
        let g = lsm(
            &["a", "b", "c"],
            &[&[2., 0.5, 0.1], &[0.5, 1., 0.2], &[0.1, 0.2, 1.5]],
        );
        let set = PartialSampleSet::new(vec![g.clone()]).unwrap();
        let res = combine(&set, &EMConfig::default()).unwrap();
        assert!(res.converged);
        assert!(res.sigma_hat.frobenius_distance(&g) <= 1e-12);
        assert_eq!(res.loglik_trace.len(), res.iterations + 1);
    }

    #[test]
    fn combine_disjoint_samples_leaves_cross_block_zero() {
        let s1 = lsm(&["a", "b"], &[&[2., 0.5], &[0.5, 1.]]);
        let s2 = lsm(&["c", "d"], &[&[1., -0.4], &[-0.4, 3.]]);
        let set = PartialSampleSet::new(vec![s1, s2]).unwrap();
        let res = combine(&set, &EMConfig::default()).unwrap();
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(res.sigma_hat.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn combine_validates_nu() {
        let set = PartialSampleSet::new(vec![lsm(&["a", "b"], &[&[1., 0.], &[0., 1.]])]).unwrap();
        let cfg = EMConfig {
            nu: Some(2.0),
            ..Default::default()
        };
        assert!(matches!(combine(&set, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn shuffled_order_matches_fixed_order() {
        let s1 = lsm(&["a", "b"], &[&[2., 0.5], &[0.5, 1.]]);
        let s2 = lsm(&["b", "c"], &[&[1.2, 0.3], &[0.3, 1.]]);
        let s3 = lsm(&["a", "c"], &[&[1.8, 0.1], &[0.1, 0.9]]);
        let set = PartialSampleSet::new(vec![s1, s2, s3]).unwrap();
        let fixed = combine(&set, &EMConfig::default()).unwrap();
        let cfg = EMConfig {
            sample_order: SampleOrder::Shuffled { seed: 9 },
            ..Default::default()
        };
        let shuffled = combine(&set, &cfg).unwrap();
        assert!(fixed.sigma_hat.frobenius_distance(&shuffled.sigma_hat) < 1e-12);
    }

    #[test]
    fn se_guard_and_convergence_requirements() {
        let g = lsm(&["a", "b"], &[&[2., 0.5], &[0.5, 1.]]);
        let set = PartialSampleSet::new(vec![g]).unwrap();
        let res = combine(&set, &EMConfig::default()).unwrap();
        assert!(matches!(
            asymptotic_se_with(&res, &set, InformationMethod::CompleteData, 1),
            Err(Error::DimensionGuardExceeded { n: 2, limit: 1 })
        ));
        let mut unconverged = res.clone();
        unconverged.converged = false;
        assert!(asymptotic_se(&unconverged, &set).is_err());
        assert!(asymptotic_se(&res, &set).is_ok());
    }

    #[test]
    fn scalar_se_matches_wishart_variance() {
        // One complete 1x1 sample: Var(Sigma_hat) = 2 Sigma^2 / nu.
        let g = lsm(&["a"], &[&[3.0]]);
        let set = PartialSampleSet::new(vec![g]).unwrap();
        let cfg = EMConfig {
            nu: Some(10.0),
            compute_se: true,
            ..Default::default()
        };
        let res = combine(&set, &cfg).unwrap();
        let se = res.se.unwrap().get(0, 0);
        assert_abs_diff_eq!(se, (2.0 * 9.0 / 10.0f64).sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn observed_information_is_singular_for_unidentified_pair() {
        let s1 = lsm(&["a", "b"], &[&[2., 0.5], &[0.5, 1.]]);
        let s2 = lsm(&["b", "c"], &[&[1.2, 0.3], &[0.3, 1.]]);
        let set = PartialSampleSet::new(vec![s1, s2]).unwrap();
        let res = combine(
            &set,
            &EMConfig {
                rel_tol: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(
            asymptotic_se_with(&res, &set, InformationMethod::Observed, 64),
            Err(Error::SingularInformation)
        );
    }
}
