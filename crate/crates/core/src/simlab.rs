//! Simulation and evaluation harness: Wishart draws, partial masking,
//! the two convergence/accuracy studies, a merge-versus-impute benchmark on
//! simulated markers, metrics and cross-validation.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by
//! `(seed, stream)`, so a replicate can be rerun on its own and results do
//! not depend on the number of worker threads.

use std::collections::{BTreeMap, HashMap, HashSet};

use nalgebra::{Cholesky, DMatrix};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, ChiSquared, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imputation::{grm_from_imputed, soft_impute, IncompleteFeatureMatrix, SoftImputeConfig};
use crate::kernels::{grm_rowcentered, rowcentered_kernel, MarkerMatrix};
use crate::matcore::LabeledSymMatrix;
use crate::mixedmodel::{fit_gblup, PhenotypeRecord, PhenotypeTable};
use crate::wishart_em::{combine, partial_loglik, EMConfig, Init, PartialSampleSet, SampleOrder};

/// Generator for stream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn cell_stream(cell: usize, replicate: usize) -> u64 {
    ((cell as u64) << 32) | replicate as u64
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

/// Bartlett sampler for `W(nu, psi)`.
struct WishartSampler {
    lower: DMatrix<f64>,
    nu: f64,
}

impl WishartSampler {
    fn new(psi: &DMatrix<f64>, nu: f64) -> Result<Self> {
        let n = psi.nrows();
        if !(nu > n as f64 - 1.0) || !nu.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "degrees of freedom {nu} must exceed {}",
                n as f64 - 1.0
            )));
        }
        let lower = Cholesky::new(psi.clone())
            .ok_or(Error::NotPositiveDefinite)?
            .unpack();
        Ok(Self { lower, nu })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let n = self.lower.nrows();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            let chi = ChiSquared::new(self.nu - i as f64).expect("positive degrees of freedom");
            a[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                a[(i, j)] = StandardNormal.sample(rng);
            }
        }
        let la = &self.lower * a;
        let mut g = &la * la.transpose();
        crate::matcore::symmetrize_in_place(&mut g);
        g
    }
}

/// One draw from `W(nu, psi)`; the result carries the labels of `psi`.
pub fn sample_wishart<R: Rng + ?Sized>(
    psi: &LabeledSymMatrix,
    nu: f64,
    rng: &mut R,
) -> Result<LabeledSymMatrix> {
    let sampler = WishartSampler::new(psi.values(), nu)?;
    Ok(LabeledSymMatrix::from_parts(
        psi.labels().to_vec(),
        sampler.draw(rng),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub n_total: usize,
    pub n_kernel: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub nu: f64,
    pub replicates: usize,
    pub rng_seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_kernel == 0 || self.size_min == 0 {
            return Err(Error::InvalidConfig(
                "n_kernel and size_min must be positive".into(),
            ));
        }
        if !(self.size_min <= self.size_max && self.size_max <= self.n_total) {
            return Err(Error::InvalidConfig(format!(
                "need size_min <= size_max <= n_total, got {} {} {}",
                self.size_min, self.size_max, self.n_total
            )));
        }
        if !(self.nu > self.n_total as f64) {
            return Err(Error::InvalidConfig(format!(
                "nu = {} must exceed n_total = {}",
                self.nu, self.n_total
            )));
        }
        Ok(())
    }
}

/// `n_kernel` draws from `W(nu, sigma / nu)`, each kept on a uniformly
/// chosen label subset whose size is uniform on `size_min..=size_max`.
/// Subset labels keep the order of `sigma`.
pub fn make_partials<R: Rng + ?Sized>(
    sigma: &LabeledSymMatrix,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<PartialSampleSet> {
    cfg.validate()?;
    if sigma.dim() != cfg.n_total {
        return Err(Error::DimensionMismatch(format!(
            "sigma is {0}x{0} but n_total = {1}",
            sigma.dim(),
            cfg.n_total
        )));
    }
    let sampler = WishartSampler::new(&(sigma.values() / cfg.nu), cfg.nu)?;
    let mut samples = Vec::with_capacity(cfg.n_kernel);
    for _ in 0..cfg.n_kernel {
        let g = sampler.draw(rng);
        let size = rng.random_range(cfg.size_min..=cfg.size_max);
        let mut keep = index::sample(rng, cfg.n_total, size).into_vec();
        keep.sort_unstable();
        let sub = crate::matcore::gather(&g, &keep);
        let sub_labels = keep.iter().map(|&i| sigma.labels()[i].clone()).collect();
        samples.push(LabeledSymMatrix::from_parts(sub_labels, sub));
    }
    PartialSampleSet::new(samples)
}

/// Fraction of `n_total` labels present in at least one sample.
pub fn coverage(set: &PartialSampleSet, n_total: usize) -> f64 {
    set.n() as f64 / n_total as f64
}

/// Union-ordered mask of label pairs that appear together in some sample.
pub fn co_observed(set: &PartialSampleSet) -> DMatrix<bool> {
    let n = set.n();
    let mut mask = DMatrix::from_element(n, n, false);
    for a in 0..set.m() {
        let obs = &set.embedding(a).observed;
        for &i in obs {
            for &j in obs {
                mask[(i, j)] = true;
            }
        }
    }
    mask
}

fn upper_pairs<'a>(
    a: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    let n = a.nrows();
    (0..n)
        .flat_map(move |j| (0..=j).map(move |i| (i, j)))
        .map(move |(i, j)| (a[(i, j)], b[(i, j)]))
}

/// Mean squared difference over the upper triangle, diagonal included.
pub fn mse_upper(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(
        a.shape(),
        b.shape(),
        "metric on matrices of different shape"
    );
    let n = a.nrows();
    let count = n * (n + 1) / 2;
    upper_pairs(a, b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / count as f64
}

/// Pearson correlation over the upper triangle, diagonal included. NaN when
/// either side is constant.
pub fn pearson_upper(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(
        a.shape(),
        b.shape(),
        "metric on matrices of different shape"
    );
    let (xs, ys): (Vec<f64>, Vec<f64>) = upper_pairs(a, b).unzip();
    pearson(&xs, &ys)
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Accuracy of one estimate against the truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateMetrics {
    pub replicate: usize,
    /// Labels of the truth recovered by the estimate, as a fraction.
    pub coverage: f64,
    pub mse_upper: f64,
    pub pearson_upper: f64,
    /// MSE over pairs observed together in some input.
    pub mse_co_observed: f64,
    /// MSE over pairs never observed together; `None` when there are none.
    pub mse_never_co_observed: Option<f64>,
    /// Mean `estimate - truth` over pairs never observed together.
    pub bias_never_co_observed: Option<f64>,
    /// Mean `|estimate - truth|` over pairs never observed together.
    pub mae_never_co_observed: Option<f64>,
}

impl ReplicateMetrics {
    /// Scores `estimate` against `truth` on the labels of `estimate`.
    /// `co_observed` is indexed like `estimate`; `None` treats every pair as
    /// observed.
    pub fn score(
        replicate: usize,
        estimate: &LabeledSymMatrix,
        truth: &LabeledSymMatrix,
        co_observed: Option<&DMatrix<bool>>,
    ) -> Result<Self> {
        let t = truth.restrict_to(estimate.labels())?;
        let (e, t) = (estimate.values(), t.values());
        let n = e.nrows();
        let (mut seen, mut unseen) = (Vec::new(), Vec::new());
        for j in 0..n {
            for i in 0..=j {
                let d = e[(i, j)] - t[(i, j)];
                if co_observed.is_none_or(|m| m[(i, j)]) {
                    seen.push(d);
                } else {
                    unseen.push(d);
                }
            }
        }
        let mean = |v: &[f64], f: fn(f64) -> f64| {
            (!v.is_empty()).then(|| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64)
        };
        Ok(Self {
            replicate,
            coverage: n as f64 / truth.dim() as f64,
            mse_upper: mse_upper(e, t),
            pearson_upper: pearson_upper(e, t),
            mse_co_observed: mean(&seen, |x| x * x).unwrap_or(0.0),
            mse_never_co_observed: mean(&unseen, |x| x * x),
            bias_never_co_observed: mean(&unseen, |x| x),
            mae_never_co_observed: mean(&unseen, f64::abs),
        })
    }
}

/// Replicate metrics with their means. Optional means average over the
/// replicates where the quantity exists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub mse_upper: f64,
    pub pearson_upper: f64,
    pub mse_co_observed: f64,
    pub mse_never_co_observed: Option<f64>,
    pub mae_never_co_observed: Option<f64>,
    pub replicates: Vec<ReplicateMetrics>,
}

impl MetricReport {
    pub fn from_replicates(replicates: Vec<ReplicateMetrics>) -> Self {
        let k = replicates.len().max(1) as f64;
        let avg = |f: fn(&ReplicateMetrics) -> f64| replicates.iter().map(f).sum::<f64>() / k;
        let avg_opt = |f: fn(&ReplicateMetrics) -> Option<f64>| {
            let v: Vec<f64> = replicates.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            mse_upper: avg(|r| r.mse_upper),
            pearson_upper: avg(|r| r.pearson_upper),
            mse_co_observed: avg(|r| r.mse_co_observed),
            mse_never_co_observed: avg_opt(|r| r.mse_never_co_observed),
            mae_never_co_observed: avg_opt(|r| r.mae_never_co_observed),
            replicates,
        }
    }
}

// ---------------------------------------------------------------------------
// Accuracy study: compound-symmetric truth, many small partial draws.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ex1Config {
    pub n_totals: Vec<usize>,
    pub n_kernels: Vec<usize>,
    pub replicates: usize,
    pub nu: f64,
    pub size_min: usize,
    pub size_max: usize,
    /// EM rounds, run in full without a tolerance stop.
    pub rounds: usize,
    pub rng_seed: u64,
}

impl Default for Ex1Config {
    fn default() -> Self {
        Self {
            n_totals: vec![40, 80],
            n_kernels: vec![10, 40],
            replicates: 10,
            nu: 300.0,
            size_min: 10,
            size_max: 40,
            rounds: 50,
            rng_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ex1Cell {
    pub n_total: usize,
    pub n_kernel: usize,
    pub report: MetricReport,
}

/// `diag(1 + 0.7 u) + 0.3 J`, scaled to unit mean diagonal.
pub fn ex1_truth<R: Rng + ?Sized>(n: usize, rng: &mut R) -> LabeledSymMatrix {
    let mut s = DMatrix::from_element(n, n, 0.3);
    for i in 0..n {
        s[(i, i)] += 1.0 + 0.7 * rng.random::<f64>();
    }
    let mean_diag = s.diagonal().mean();
    LabeledSymMatrix::from_parts(labels("g", n), s / mean_diag)
}

pub fn run_supp_ex1(cfg: &Ex1Config) -> Result<Vec<Ex1Cell>> {
    let cells: Vec<(usize, usize)> = cfg
        .n_totals
        .iter()
        .flat_map(|&nt| cfg.n_kernels.iter().map(move |&nk| (nt, nk)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.replicates).map(move |r| (c, r)))
        .collect();
    let scored = jobs
        .par_iter()
        .map(|&(c, r)| {
            let (n_total, n_kernel) = cells[c];
            let mut rng = substream(cfg.rng_seed, cell_stream(c, r));
            let sigma = ex1_truth(n_total, &mut rng);
            let sim = SimConfig {
                n_total,
                n_kernel,
                size_min: cfg.size_min.min(n_total),
                size_max: cfg.size_max.min(n_total),
                nu: cfg.nu,
                replicates: cfg.replicates,
                rng_seed: cfg.rng_seed,
            };
            let set = make_partials(&sigma, &sim, &mut rng)?;
            let em = EMConfig {
                nu: Some(cfg.nu),
                max_iter: cfg.rounds,
                rel_tol: f64::MIN_POSITIVE,
                sample_order: SampleOrder::Shuffled { seed: rng.random() },
                ..EMConfig::default()
            };
            let fit = combine(&set, &em)?;
            ReplicateMetrics::score(r, &fit.sigma_hat, &sigma, None)
        })
        .collect::<Vec<Result<_>>>();
    let mut by_cell: Vec<Vec<ReplicateMetrics>> = vec![Vec::new(); cells.len()];
    for ((c, _), m) in jobs.into_iter().zip(scored) {
        by_cell[c].push(m?);
    }
    Ok(cells
        .into_iter()
        .zip(by_cell)
        .map(|((n_total, n_kernel), reps)| Ex1Cell {
            n_total,
            n_kernel,
            report: MetricReport::from_replicates(reps),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Convergence study: one set of partial draws, several perturbed starts.

#[derive(Debug, Clone, Serialize)]
pub struct Ex2Config {
    pub n: usize,
    pub n_samples: usize,
    pub n_starts: usize,
    pub experiments: usize,
    pub size_min: usize,
    pub size_max: usize,
    /// Defaults to `n + 1`.
    pub nu: Option<f64>,
    #[serde(skip)]
    pub em: EMConfig,
    pub rng_seed: u64,
}

impl Ex2Config {
    pub fn new(n: usize) -> Self {
        let (size_min, size_max) = if n >= 1000 { (100, 250) } else { (10, 25) };
        Self {
            n,
            n_samples: 10,
            n_starts: 10,
            experiments: 1,
            size_min,
            size_max,
            nu: None,
            em: EMConfig::default(),
            rng_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ex2Experiment {
    pub experiment: usize,
    /// Log-likelihood path per start, initial value first.
    pub traces: Vec<Vec<f64>>,
    pub converged: Vec<bool>,
    pub final_logliks: Vec<f64>,
    /// Largest `|l_i - l_j| / max(|l_i|, |l_j|)` over pairs of starts.
    pub max_relative_gap: f64,
    /// Largest relative decrease between consecutive iterations.
    pub max_relative_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ex2Result {
    pub experiments: Vec<Ex2Experiment>,
    pub max_relative_gap: f64,
    pub max_relative_drop: f64,
}

/// `diag(b + 1) + 0.2 J` with `b` uniform on (0, 1).
pub fn ex2_truth<R: Rng + ?Sized>(n: usize, rng: &mut R) -> LabeledSymMatrix {
    let mut s = DMatrix::from_element(n, n, 0.2);
    for i in 0..n {
        s[(i, i)] += 1.0 + rng.random::<f64>();
    }
    LabeledSymMatrix::from_parts(labels("g", n), s)
}

/// `diag(0.5 b + 1) + 0.3 b0 J` with fresh uniforms.
pub fn ex2_start<R: Rng + ?Sized>(labels: &[String], rng: &mut R) -> LabeledSymMatrix {
    let n = labels.len();
    let b0: f64 = rng.random();
    let mut s = DMatrix::from_element(n, n, 0.3 * b0);
    for i in 0..n {
        s[(i, i)] += 1.0 + 0.5 * rng.random::<f64>();
    }
    LabeledSymMatrix::from_parts(labels.to_vec(), s)
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Largest relative decrease along a trace.
pub fn max_relative_drop(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| ((w[0] - w[1]) / w[0].abs().max(1.0)).max(0.0))
        .fold(0.0, f64::max)
}

pub fn run_supp_ex2(cfg: &Ex2Config) -> Result<Ex2Result> {
    if cfg.n_starts == 0 || cfg.experiments == 0 {
        return Err(Error::InvalidConfig(
            "need at least one start and one experiment".into(),
        ));
    }
    let nu = cfg.nu.unwrap_or(cfg.n as f64 + 1.0);
    let experiments = (0..cfg.experiments)
        .map(|e| {
            let mut rng = substream(cfg.rng_seed, cell_stream(e, 0));
            let sigma = ex2_truth(cfg.n, &mut rng);
            let sim = SimConfig {
                n_total: cfg.n,
                n_kernel: cfg.n_samples,
                size_min: cfg.size_min,
                size_max: cfg.size_max,
                nu,
                replicates: 1,
                rng_seed: cfg.rng_seed,
            };
            let set = make_partials(&sigma, &sim, &mut rng)?;
            let runs = (0..cfg.n_starts)
                .into_par_iter()
                .map(|s| {
                    let mut start_rng = substream(cfg.rng_seed, cell_stream(e, s + 1));
                    let start = ex2_start(set.union_labels(), &mut start_rng);
                    let em = EMConfig {
                        nu: Some(nu),
                        init: Init::Sigma(start),
                        ..cfg.em.clone()
                    };
                    combine(&set, &em)
                })
                .collect::<Result<Vec<_>>>()?;
            let final_logliks: Vec<f64> = runs
                .iter()
                .map(|r| *r.loglik_trace.last().expect("trace has the initial value"))
                .collect();
            let mut gap: f64 = 0.0;
            for i in 0..final_logliks.len() {
                for j in 0..i {
                    gap = gap.max(relative_gap(final_logliks[i], final_logliks[j]));
                }
            }
            let drop = runs
                .iter()
                .map(|r| max_relative_drop(&r.loglik_trace))
                .fold(0.0, f64::max);
            Ok(Ex2Experiment {
                experiment: e,
                converged: runs.iter().map(|r| r.converged).collect(),
                traces: runs.into_iter().map(|r| r.loglik_trace).collect(),
                final_logliks,
                max_relative_gap: gap,
                max_relative_drop: drop,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ex2Result {
        max_relative_gap: experiments
            .iter()
            .map(|e| e.max_relative_gap)
            .fold(0.0, f64::max),
        max_relative_drop: experiments
            .iter()
            .map(|e| e.max_relative_drop)
            .fold(0.0, f64::max),
        experiments,
    })
}

// ---------------------------------------------------------------------------
// Simulated markers and traits.

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarkerSimConfig {
    pub n_genotypes: usize,
    pub n_markers: usize,
    pub subpopulations: usize,
    /// Differentiation between subpopulations (Balding-Nichols).
    pub fst: f64,
    pub ploidy: u32,
    /// Zero draws unrelated genotypes. Otherwise the panel descends from this
    /// many founders through `generations` rounds of random mating.
    pub founders: usize,
    pub generations: usize,
    /// Markers are split evenly over chromosomes of one Morgan each.
    pub chromosomes: usize,
}

impl Default for MarkerSimConfig {
    fn default() -> Self {
        Self {
            n_genotypes: 300,
            n_markers: 3000,
            subpopulations: 3,
            fst: 0.1,
            ploidy: 2,
            founders: 0,
            generations: 0,
            chromosomes: 10,
        }
    }
}

impl MarkerSimConfig {
    /// A breeding cohort: offspring of random crosses among 20 parents.
    pub fn families(n_genotypes: usize, n_markers: usize) -> Self {
        Self {
            n_genotypes,
            n_markers,
            founders: 20,
            generations: 1,
            ..Self::default()
        }
    }
}

/// Dosages for genotypes spread round-robin over subpopulations whose allele
/// frequencies scatter around uniform ancestral frequencies. With founders,
/// those draws are the founder haplotypes and the panel is their offspring.
pub fn simulate_markers<R: Rng + ?Sized>(
    cfg: &MarkerSimConfig,
    rng: &mut R,
) -> Result<MarkerMatrix> {
    if cfg.subpopulations == 0 || !(cfg.fst > 0.0 && cfg.fst < 1.0) {
        return Err(Error::InvalidConfig(
            "need subpopulations >= 1 and 0 < fst < 1".into(),
        ));
    }
    if cfg.founders > 0
        && (cfg.founders < 2 || cfg.generations == 0 || cfg.chromosomes == 0 || cfg.ploidy % 2 != 0)
    {
        return Err(Error::InvalidConfig(
            "families need >= 2 founders, >= 1 generation, >= 1 chromosome and even ploidy".into(),
        ));
    }
    let k = cfg.subpopulations;
    let scale = (1.0 - cfg.fst) / cfg.fst;
    let mut freqs = DMatrix::zeros(k, cfg.n_markers);
    for j in 0..cfg.n_markers {
        let p0: f64 = rng.random_range(0.05..0.95);
        let beta = Beta::new(p0 * scale, (1.0 - p0) * scale).expect("positive shape parameters");
        for s in 0..k {
            freqs[(s, j)] = beta.sample(rng).clamp(1e-6, 1.0 - 1e-6);
        }
    }
    let dosages = if cfg.founders == 0 {
        let mut dosages = DMatrix::zeros(cfg.n_genotypes, cfg.n_markers);
        for j in 0..cfg.n_markers {
            for i in 0..cfg.n_genotypes {
                let p = freqs[(i % k, j)];
                dosages[(i, j)] = Binomial::new(cfg.ploidy as u64, p)
                    .expect("valid binomial")
                    .sample(rng) as f64;
            }
        }
        dosages
    } else {
        family_dosages(cfg, &freqs, rng)
    };
    MarkerMatrix::complete(
        labels("g", cfg.n_genotypes),
        labels("m", cfg.n_markers),
        dosages,
        cfg.ploidy,
    )
}

/// A genotype as `ploidy` haplotypes of 0/1 alleles.
type Haplotypes = Vec<Vec<u8>>;

fn family_dosages<R: Rng + ?Sized>(
    cfg: &MarkerSimConfig,
    freqs: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<f64> {
    let ploidy = cfg.ploidy as usize;
    let mut population: Vec<Haplotypes> = (0..cfg.founders)
        .map(|f| {
            let s = f % cfg.subpopulations;
            (0..ploidy)
                .map(|_| {
                    (0..cfg.n_markers)
                        .map(|j| u8::from(rng.random_bool(freqs[(s, j)])))
                        .collect()
                })
                .collect()
        })
        .collect();
    for _ in 0..cfg.generations {
        population = (0..cfg.n_genotypes)
            .map(|_| {
                let a = rng.random_range(0..population.len());
                let mut b = rng.random_range(0..population.len() - 1);
                if b >= a {
                    b += 1;
                }
                let mut child = gametes(&population[a], cfg.chromosomes, rng);
                child.extend(gametes(&population[b], cfg.chromosomes, rng));
                child
            })
            .collect();
    }
    DMatrix::from_fn(cfg.n_genotypes, cfg.n_markers, |i, j| {
        population[i].iter().map(|h| f64::from(h[j])).sum()
    })
}

/// Half of a parent's haplotypes, each a recombinant of two random parental
/// haplotypes with Poisson(1) crossovers per chromosome.
fn gametes<R: Rng + ?Sized>(parent: &Haplotypes, chromosomes: usize, rng: &mut R) -> Haplotypes {
    let m = parent[0].len();
    let crossovers = Poisson::new(1.0).expect("positive rate");
    (0..parent.len() / 2)
        .map(|_| {
            let pair = index::sample(rng, parent.len(), 2);
            let (x, y) = (pair.index(0), pair.index(1));
            let mut out = Vec::with_capacity(m);
            for c in 0..chromosomes {
                let (lo, hi) = (c * m / chromosomes, (c + 1) * m / chromosomes);
                let mut points: Vec<usize> = (0..crossovers.sample(rng) as usize)
                    .map(|_| rng.random_range(lo..hi.max(lo + 1)))
                    .collect();
                points.sort_unstable();
                let mut current = if rng.random_bool(0.5) { x } else { y };
                let mut start = lo;
                for p in points {
                    out.extend_from_slice(&parent[current][start..p]);
                    current = if current == x { y } else { x };
                    start = p;
                }
                out.extend_from_slice(&parent[current][start..hi]);
            }
            out
        })
        .collect()
}

/// One record per genotype: additive marker effects scaled to variance `h2`
/// plus noise of variance `1 - h2`.
pub fn simulate_trait<R: Rng + ?Sized>(
    markers: &MarkerMatrix,
    h2: f64,
    rng: &mut R,
) -> Result<PhenotypeTable> {
    if !(0.0..=1.0).contains(&h2) {
        return Err(Error::InvalidConfig(format!(
            "heritability {h2} outside [0, 1]"
        )));
    }
    let x = markers.centered_features()?;
    let effects = nalgebra::DVector::from_fn(x.ncols(), |_, _| StandardNormal.sample(rng));
    let mut u = &x * effects;
    let mean = u.mean();
    u.add_scalar_mut(-mean);
    let var = u.norm_squared() / u.len() as f64;
    let gscale = if var > 0.0 { (h2 / var).sqrt() } else { 0.0 };
    let escale = (1.0 - h2).sqrt();
    let records = markers
        .genotype_labels()
        .iter()
        .zip(u.iter())
        .map(|(g, &ui)| {
            let e: f64 = StandardNormal.sample(rng);
            PhenotypeRecord {
                genotype: g.clone(),
                value: ui * gscale + e * escale,
                covariates: vec![],
            }
        })
        .collect();
    PhenotypeTable::new("trait", vec![], records)
}

// ---------------------------------------------------------------------------
// Merge versus impute.

#[derive(Debug, Clone, Serialize)]
pub struct BenchConfig {
    pub markers: MarkerSimConfig,
    pub panel_genotypes: usize,
    pub panel_markers: usize,
    pub n_kernels: Vec<usize>,
    pub replicates: usize,
    pub impute_rank: usize,
    pub impute_lambda: f64,
    pub impute_max_iter: usize,
    #[serde(skip)]
    pub em: EMConfig,
    pub rng_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            markers: MarkerSimConfig::default(),
            panel_genotypes: 100,
            panel_markers: 500,
            n_kernels: vec![3, 5, 10],
            replicates: 10,
            impute_rank: 30,
            impute_lambda: 0.0,
            impute_max_iter: 100,
            em: EMConfig::default(),
            rng_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCell {
    pub n_kernel: usize,
    pub combined: MetricReport,
    pub imputed: MetricReport,
    /// Replicates where the combined matrix has the smaller MSE.
    pub combined_wins: usize,
}

/// Genotype and marker positions of one panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub genotypes: Vec<usize>,
    pub markers: Vec<usize>,
}

pub fn draw_panels<R: Rng + ?Sized>(
    n_genotypes: usize,
    n_markers: usize,
    panel_genotypes: usize,
    panel_markers: usize,
    count: usize,
    rng: &mut R,
) -> Vec<Panel> {
    (0..count)
        .map(|_| {
            let mut genotypes = index::sample(rng, n_genotypes, panel_genotypes).into_vec();
            let mut markers = index::sample(rng, n_markers, panel_markers).into_vec();
            genotypes.sort_unstable();
            markers.sort_unstable();
            Panel { genotypes, markers }
        })
        .collect()
}

/// Combined and imputed relationship matrices for one set of panels.
pub struct PanelEstimates {
    pub combined: LabeledSymMatrix,
    pub imputed: LabeledSymMatrix,
    pub co_observed: DMatrix<bool>,
}

pub fn estimate_from_panels(
    pool: &MarkerMatrix,
    panels: &[Panel],
    cfg: &BenchConfig,
) -> Result<PanelEstimates> {
    let glabels = pool.genotype_labels();
    let kernels = panels
        .iter()
        .map(|p| {
            let sub = pool.subset(&p.genotypes, &p.markers);
            rowcentered_kernel(sub.genotype_labels().to_vec(), sub.dosages())
        })
        .collect::<Result<Vec<_>>>()?;
    let set = PartialSampleSet::new(kernels)?;
    let combined = combine(&set, &cfg.em)?.sigma_hat;
    let co = co_observed(&set);

    // Union rows in the same order as the combined matrix, union markers
    // in pool order.
    let row_of: HashMap<&str, usize> = set
        .union_labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let marker_set: std::collections::BTreeSet<usize> = panels
        .iter()
        .flat_map(|p| p.markers.iter().copied())
        .collect();
    let markers: Vec<usize> = marker_set.into_iter().collect();
    let col_of: HashMap<usize, usize> = markers.iter().enumerate().map(|(c, &j)| (j, c)).collect();
    let (n, m) = (set.n(), markers.len());
    let mut values = DMatrix::zeros(n, m);
    let mut observed = DMatrix::from_element(n, m, false);
    for p in panels {
        for &gi in &p.genotypes {
            let r = row_of[glabels[gi].as_str()];
            for &mj in &p.markers {
                let c = col_of[&mj];
                values[(r, c)] = pool.dosages()[(gi, mj)];
                observed[(r, c)] = true;
            }
        }
    }
    let features = IncompleteFeatureMatrix::new(
        set.union_labels().to_vec(),
        markers
            .iter()
            .map(|&j| pool.marker_labels()[j].clone())
            .collect(),
        values,
        observed,
    )?;
    let si = SoftImputeConfig {
        max_iter: cfg.impute_max_iter,
        center_columns: true,
        ..SoftImputeConfig::new(cfg.impute_rank.min(n).min(m), cfg.impute_lambda)
    };
    let imputed = grm_from_imputed(&soft_impute(&features, &si)?)?;
    Ok(PanelEstimates {
        combined,
        imputed,
        co_observed: co,
    })
}

/// Simulates a marker pool per replicate (or uses `pool`), draws
/// overlapping panels and scores the combined and the imputed
/// relationship matrix against the row-centered matrix of the full pool.
pub fn merge_vs_impute_bench(
    pool: Option<&MarkerMatrix>,
    cfg: &BenchConfig,
) -> Result<Vec<BenchCell>> {
    let supplied = match pool {
        Some(p) if p.has_missing() => Some(p.mean_impute()?),
        Some(p) => Some(p.clone()),
        None => None,
    };
    let per_rep = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(cfg.rng_seed, cell_stream(usize::MAX >> 32, r));
            let pool = match &supplied {
                Some(p) => p.clone(),
                None => simulate_markers(&cfg.markers, &mut rng)?,
            };
            if cfg.panel_genotypes > pool.n_genotypes() || cfg.panel_markers > pool.n_markers() {
                return Err(Error::InvalidConfig(
                    "panel larger than the marker pool".into(),
                ));
            }
            let truth = grm_rowcentered(&pool)?;
            cfg.n_kernels
                .iter()
                .enumerate()
                .map(|(c, &k)| {
                    let mut prng = substream(cfg.rng_seed, cell_stream(c, r));
                    let panels = draw_panels(
                        pool.n_genotypes(),
                        pool.n_markers(),
                        cfg.panel_genotypes,
                        cfg.panel_markers,
                        k,
                        &mut prng,
                    );
                    let est = estimate_from_panels(&pool, &panels, cfg)?;
                    Ok((
                        ReplicateMetrics::score(r, &est.combined, &truth, Some(&est.co_observed))?,
                        ReplicateMetrics::score(r, &est.imputed, &truth, Some(&est.co_observed))?,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cfg
        .n_kernels
        .iter()
        .enumerate()
        .map(|(c, &n_kernel)| {
            let (comb, imp): (Vec<_>, Vec<_>) = per_rep.iter().map(|rep| rep[c].clone()).unzip();
            let combined_wins = comb
                .iter()
                .zip(&imp)
                .filter(|(a, b)| a.mse_upper < b.mse_upper)
                .count();
            BenchCell {
                n_kernel,
                combined: MetricReport::from_replicates(comb),
                imputed: MetricReport::from_replicates(imp),
                combined_wins,
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Cross-validation.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldAccuracy {
    pub fold: String,
    pub n_test: usize,
    /// Correlation of GEBVs with mean phenotypes; `None` below two test
    /// genotypes or for constant values.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldAccuracy>,
    pub mean_accuracy: Option<f64>,
}

impl CvReport {
    fn from_folds(folds: Vec<FoldAccuracy>) -> Self {
        let acc: Vec<f64> = folds.iter().filter_map(|f| f.accuracy).collect();
        let mean_accuracy = (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64);
        Self {
            folds,
            mean_accuracy,
        }
    }
}

fn check_genotypes(pheno: &PhenotypeTable, g: &LabeledSymMatrix) -> Result<Vec<String>> {
    let genotypes = pheno.genotypes();
    for l in &genotypes {
        if g.position(l).is_none() {
            return Err(Error::LabelMismatch { label: l.clone() });
        }
    }
    Ok(genotypes)
}

fn evaluate_fold(
    name: String,
    pheno: &PhenotypeTable,
    g: &LabeledSymMatrix,
    test: &HashSet<&str>,
    means: &HashMap<String, f64>,
) -> Result<FoldAccuracy> {
    let train = pheno.filter(|l| !test.contains(l));
    let fit = fit_gblup(&train, g)?;
    let mut ordered: Vec<&str> = test.iter().copied().collect();
    ordered.sort_unstable();
    let (pred, obs): (Vec<f64>, Vec<f64>) = ordered
        .iter()
        .map(|l| (fit.gebv(l).expect("test genotype is in G"), means[*l]))
        .unzip();
    let accuracy = if ordered.len() >= 2 {
        // A constant prediction carries no information about the ranking.
        let constant = pred.iter().all(|&p| p == pred[0]);
        if constant {
            Some(0.0)
        } else {
            Some(pearson(&pred, &obs)).filter(|a| a.is_finite())
        }
    } else {
        None
    };
    Ok(FoldAccuracy {
        fold: name,
        n_test: ordered.len(),
        accuracy,
    })
}

/// Random partition of phenotyped genotypes into `k` folds; each fold is
/// predicted from a GBLUP fit on the others.
pub fn kfold_partition(genotypes: &[String], k: usize, seed: u64) -> Vec<Vec<String>> {
    let mut shuffled = genotypes.to_vec();
    shuffled.shuffle(&mut substream(seed, 0));
    let mut folds = vec![Vec::new(); k];
    for (i, l) in shuffled.into_iter().enumerate() {
        folds[i % k].push(l);
    }
    folds
}

pub fn cv_random_kfold(
    pheno: &PhenotypeTable,
    g: &LabeledSymMatrix,
    k: usize,
    rng_seed: u64,
) -> Result<CvReport> {
    let genotypes = check_genotypes(pheno, g)?;
    if k < 2 || k > genotypes.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} folds for {} genotypes",
            genotypes.len()
        )));
    }
    let means = pheno.genotype_means();
    let folds = kfold_partition(&genotypes, k, rng_seed);
    let results = folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| {
            let test: HashSet<&str> = fold.iter().map(String::as_str).collect();
            evaluate_fold(format!("{}", i + 1), pheno, g, &test, &means)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport::from_folds(results))
}

/// Each group in turn is predicted from the records of all other groups.
/// `groups` maps genotype to group name and must cover every phenotyped
/// genotype.
pub fn cv_leave_group_out(
    pheno: &PhenotypeTable,
    g: &LabeledSymMatrix,
    groups: &BTreeMap<String, String>,
) -> Result<CvReport> {
    let genotypes = check_genotypes(pheno, g)?;
    let mut members: BTreeMap<&str, HashSet<&str>> = BTreeMap::new();
    for l in &genotypes {
        let group = groups
            .get(l)
            .ok_or_else(|| Error::LabelMismatch { label: l.clone() })?;
        members
            .entry(group.as_str())
            .or_default()
            .insert(l.as_str());
    }
    let means = pheno.genotype_means();
    let results = members
        .par_iter()
        .map(|(name, test)| {
            if test.len() == genotypes.len() {
                return Err(Error::EmptyGroup {
                    group: format!("training set without {name}"),
                });
            }
            evaluate_fold(name.to_string(), pheno, g, test, &means)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvReport::from_folds(results))
}

/// Log-likelihood of a fit relative to the truth, a convenience for
/// harness reports.
pub fn loglik_at_truth(set: &PartialSampleSet, sigma: &LabeledSymMatrix, nu: f64) -> Result<f64> {
    let psi = sigma.restrict_to(set.union_labels())?.scaled(1.0 / nu);
    partial_loglik(&psi, nu, set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident(n: usize) -> LabeledSymMatrix {
        LabeledSymMatrix::identity(labels("x", n)).unwrap()
    }

    #[test]
    fn wishart_mean_and_scalar_case() {
        let mut rng = substream(7, 0);
        let draws = 50_000;
        let sampler = WishartSampler::new(ident(2).values(), 10.0).unwrap();
        let mut sum = DMatrix::zeros(2, 2);
        let mut sq = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            let g = sampler.draw(&mut rng);
            sq += g.component_mul(&g);
            sum += g;
        }
        let mean = &sum / draws as f64;
        for i in 0..2 {
            for j in 0..2 {
                let var = sq[(i, j)] / draws as f64 - mean[(i, j)].powi(2);
                let se = (var / draws as f64).sqrt();
                let target = if i == j { 10.0 } else { 0.0 };
                assert!(
                    (mean[(i, j)] - target).abs() < 3.0 * se,
                    "({i},{j}) {}",
                    mean[(i, j)]
                );
            }
        }
        let psi =
            LabeledSymMatrix::new(vec!["a".into()], DMatrix::from_element(1, 1, 2.5)).unwrap();
        let total: f64 = (0..20_000)
            .map(|_| sample_wishart(&psi, 7.0, &mut rng).unwrap().get(0, 0))
            .sum();
        let mean = total / 20_000.0 / 2.5;
        // chi-square(7) mean 7, sd sqrt(14)
        assert!((mean - 7.0).abs() < 3.0 * (14.0f64 / 20_000.0).sqrt());
    }

    #[test]
    fn wishart_second_moments() {
        // Cov(G_ij, G_kl) = nu (psi_ik psi_jl + psi_il psi_jk)
        let psi = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let nu = 6.0;
        let sampler = WishartSampler::new(&psi, nu).unwrap();
        let mut rng = substream(8, 0);
        let n = 200_000;
        let draws: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let g = sampler.draw(&mut rng);
                [g[(0, 0)], g[(0, 1)], g[(1, 1)]]
            })
            .collect();
        let idx = [(0, 0), (0, 1), (1, 1)];
        let mean: Vec<f64> = (0..3)
            .map(|k| draws.iter().map(|d| d[k]).sum::<f64>() / n as f64)
            .collect();
        for a in 0..3 {
            for b in 0..3 {
                let cov = draws
                    .iter()
                    .map(|d| (d[a] - mean[a]) * (d[b] - mean[b]))
                    .sum::<f64>()
                    / (n - 1) as f64;
                let ((i, j), (k, l)) = (idx[a], idx[b]);
                let expect = nu * (psi[(i, k)] * psi[(j, l)] + psi[(i, l)] * psi[(j, k)]);
                assert!(
                    (cov - expect).abs() < 0.03 * expect.abs().max(1.0),
                    "{a}{b}: {cov} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn wishart_rejects_indefinite_scale() {
        let bad = LabeledSymMatrix::new(
            labels("x", 2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        )
        .unwrap();
        assert_eq!(
            sample_wishart(&bad, 5.0, &mut substream(1, 0)),
            Err(Error::NotPositiveDefinite)
        );
    }

    #[test]
    fn partials_full_size_and_deterministic() {
        let sigma = ex1_truth(12, &mut substream(3, 0));
        let cfg = SimConfig {
            n_total: 12,
            n_kernel: 4,
            size_min: 12,
            size_max: 12,
            nu: 20.0,
            replicates: 1,
            rng_seed: 0,
        };
        let set = make_partials(&sigma, &cfg, &mut substream(5, 1)).unwrap();
        assert!(set.samples().iter().all(|s| s.dim() == 12));
        assert_eq!(coverage(&set, 12), 1.0);
        let again = make_partials(&sigma, &cfg, &mut substream(5, 1)).unwrap();
        assert_eq!(set.samples(), again.samples());
        let small = SimConfig {
            size_min: 3,
            size_max: 5,
            ..cfg
        };
        let set = make_partials(&sigma, &small, &mut substream(5, 2)).unwrap();
        assert!(set.samples().iter().all(|s| (3..=5).contains(&s.dim())));
    }

    #[test]
    fn metric_identities() {
        let mut rng = substream(2, 0);
        let a = DMatrix::from_fn(5, 5, |_, _| rng.random::<f64>());
        let a = &a + a.transpose();
        let b = DMatrix::from_fn(5, 5, |i, j| if i == j { 1.0 } else { 0.1 });
        assert_eq!(mse_upper(&a, &a), 0.0);
        assert!((pearson_upper(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(mse_upper(&a, &b), mse_upper(&b, &a));
        assert!(pearson_upper(&a, &b).abs() <= 1.0);
        // 1x1: single squared difference
        assert_eq!(
            mse_upper(
                &DMatrix::from_element(1, 1, 2.0),
                &DMatrix::from_element(1, 1, 5.0)
            ),
            9.0
        );
    }

    #[test]
    fn kfold_partitions_each_genotype_once() {
        let g = labels("g", 23);
        let folds = kfold_partition(&g, 5, 9);
        let mut all: Vec<String> = folds.iter().flatten().cloned().collect();
        all.sort();
        assert_eq!(all, g);
        assert!(folds.iter().all(|f| f.len() == 4 || f.len() == 5));
    }

    #[test]
    fn single_group_is_rejected() {
        let pheno =
            PhenotypeTable::from_pairs("y", vec![("x0", 1.0), ("x1", 2.0), ("x2", 0.5)]).unwrap();
        let groups: BTreeMap<String, String> = labels("x", 3)
            .into_iter()
            .map(|l| (l, "all".to_string()))
            .collect();
        assert!(matches!(
            cv_leave_group_out(&pheno, &ident(3), &groups),
            Err(Error::EmptyGroup { .. })
        ));
        let missing = BTreeMap::new();
        assert!(matches!(
            cv_leave_group_out(&pheno, &ident(3), &missing),
            Err(Error::LabelMismatch { .. })
        ));
    }

    #[test]
    fn simulated_markers_have_requested_shape() {
        let cfg = MarkerSimConfig {
            n_genotypes: 12,
            n_markers: 40,
            ..MarkerSimConfig::default()
        };
        let m = simulate_markers(&cfg, &mut substream(4, 0)).unwrap();
        assert_eq!((m.n_genotypes(), m.n_markers()), (12, 40));
        assert!(m
            .dosages()
            .iter()
            .all(|&d| d == 0.0 || d == 1.0 || d == 2.0));
        let again = simulate_markers(&cfg, &mut substream(4, 0)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn family_panels_respect_ploidy_and_reject_bad_designs() {
        let cfg = MarkerSimConfig {
            ploidy: 4,
            ..MarkerSimConfig::families(15, 37)
        };
        let m = simulate_markers(&cfg, &mut substream(5, 0)).unwrap();
        assert_eq!((m.n_genotypes(), m.n_markers()), (15, 37));
        assert!(m
            .dosages()
            .iter()
            .all(|&d| d.fract() == 0.0 && (0.0..=4.0).contains(&d)));
        assert_eq!(m, simulate_markers(&cfg, &mut substream(5, 0)).unwrap());
        for bad in [
            MarkerSimConfig { ploidy: 3, ..cfg },
            MarkerSimConfig { founders: 1, ..cfg },
            MarkerSimConfig {
                generations: 0,
                ..cfg
            },
            MarkerSimConfig {
                chromosomes: 0,
                ..cfg
            },
        ] {
            assert!(matches!(
                simulate_markers(&bad, &mut substream(5, 0)),
                Err(Error::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn full_sibs_share_more_than_unrelated_genotypes() {
        // Two founders make every offspring a full sib of every other.
        let sibs = MarkerSimConfig {
            founders: 2,
            ..MarkerSimConfig::families(40, 2000)
        };
        let unrelated = MarkerSimConfig {
            n_genotypes: 40,
            n_markers: 2000,
            subpopulations: 1,
            ..MarkerSimConfig::default()
        };
        let mean_off = |cfg: &MarkerSimConfig| {
            let m = simulate_markers(cfg, &mut substream(6, 0)).unwrap();
            let d = m.dosages();
            let n = d.nrows();
            let corr = |i: usize, j: usize| {
                pearson(
                    &d.row(i).iter().copied().collect::<Vec<_>>(),
                    &d.row(j).iter().copied().collect::<Vec<_>>(),
                )
            };
            let pairs: Vec<f64> = (0..n)
                .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
                .map(|(i, j)| corr(i, j))
                .collect();
            pairs.iter().sum::<f64>() / pairs.len() as f64
        };
        assert!(mean_off(&sibs) > mean_off(&unrelated) + 0.2);
    }
}
