use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(
    name = "covmerge",
    version,
    about = "Combine partial relationship matrices and use them for genomic prediction"
)]
pub struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true, env = "COVMERGE_THREADS")]
    pub threads: Option<usize>,

    /// Where to write the run manifest; defaults to `<out>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Combine partial relationship matrices into one matrix over all labels.
    Combine(CombineArgs),
    /// Build a relationship matrix or kernel from a marker matrix.
    Kernel(KernelArgs),
    /// Complete a partially observed feature matrix by soft-impute.
    Impute(ImputeArgs),
    /// Fit GBLUP and predict genetic values.
    Predict(PredictArgs),
    /// Run a simulation study.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Cross-validate GBLUP accuracy.
    #[command(subcommand)]
    Cv(CvCommand),
    /// Rerun the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UnionOrderArg {
    /// Labels in order of first appearance across the inputs.
    First,
    Sorted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMethodArg {
    Complete,
    Observed,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CombineArgs {
    /// Partial relationship matrices, one labeled CSV each.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// JSON fit report; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Degrees of freedom; defaults to the union size plus one.
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Per-input weights in (0, 1], comma separated.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Write the correlation matrix instead of the covariance.
    #[arg(long)]
    pub correlation: bool,
    /// Also write entrywise standard errors to `<out>.se.csv`.
    #[arg(long)]
    pub se: bool,
    #[arg(long, value_enum, default_value_t = SeMethodArg::Complete)]
    pub se_method: SeMethodArg,
    /// Largest union size for which standard errors are attempted.
    #[arg(long, default_value_t = covmerge::wishart_em::DEFAULT_SE_DIM_LIMIT)]
    pub se_dim_limit: usize,
    /// Starting matrix over the union labels; identity otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = UnionOrderArg::First)]
    pub order: UnionOrderArg,
    /// Skip the positive-definite projection after each step.
    #[arg(long)]
    pub no_pd_projection: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMethod {
    Vanraden,
    Rowcentered,
    Gaussian,
    Polynomial,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KernelArgs {
    /// Genotype-by-marker dosage CSV; `NA` or empty for missing.
    #[arg(long)]
    pub markers: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = KernelMethod::Vanraden)]
    pub method: KernelMethod,
    #[arg(long, default_value_t = 2)]
    pub ploidy: u32,
    /// Gaussian bandwidth.
    #[arg(long, default_value_t = 1.0)]
    pub h: f64,
    /// Polynomial offset.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 2)]
    pub degree: u32,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ImputeArgs {
    /// Row-labeled feature CSV; `NA` or empty for missing.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Fit the low-rank part to column-centered data.
    #[arg(long)]
    pub center_columns: bool,
    /// Also write the row-centered relationship matrix of the completed rows.
    #[arg(long)]
    pub grm: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub grm: PathBuf,
    /// Phenotype CSV: genotype, value, then optional covariates.
    #[arg(long)]
    pub pheno: PathBuf,
    /// Genotypes to predict, one per line; all matrix labels otherwise.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Fixed variance ratio sigma2_g / sigma2_e instead of REML.
    #[arg(long)]
    pub variance_ratio: Option<f64>,
    /// Also write the fitted random effects of phenotyped genotypes.
    #[arg(long)]
    pub blup_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Accuracy of the combined matrix across study sizes.
    Ex1(Ex1Args),
    /// Agreement of the final log-likelihood across random starts.
    Ex2(Ex2Args),
    /// Combined matrix against imputation of the pooled markers.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Ex1Args {
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [40, 80])]
    pub n_totals: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 40])]
    pub n_kernels: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    #[arg(long, default_value_t = 300.0)]
    pub nu: f64,
    #[arg(long, default_value_t = 10)]
    pub size_min: usize,
    #[arg(long, default_value_t = 40)]
    pub size_max: usize,
    #[arg(long, default_value_t = 50)]
    pub rounds: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Ex2Args {
    #[arg(long, short)]
    pub out: PathBuf,
    /// Union size.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value_t = 10)]
    pub starts: usize,
    #[arg(long, default_value_t = 1)]
    pub experiments: usize,
    #[arg(long)]
    pub size_min: Option<usize>,
    #[arg(long)]
    pub size_max: Option<usize>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, short)]
    pub out: PathBuf,
    /// Marker pool to draw panels from; simulated otherwise.
    #[arg(long)]
    pub markers: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub ploidy: u32,
    #[arg(long, default_value_t = 300)]
    pub pool_genotypes: usize,
    #[arg(long, default_value_t = 3000)]
    pub pool_markers: usize,
    #[arg(long, default_value_t = 100)]
    pub panel_genotypes: usize,
    #[arg(long, default_value_t = 500)]
    pub panel_markers: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [3, 5, 10])]
    pub n_kernels: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    #[arg(long, default_value_t = 30)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub impute_max_iter: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum CvCommand {
    /// Random k-fold cross-validation.
    Kfold(KfoldArgs),
    /// Leave one group out at a time.
    Group(GroupArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KfoldArgs {
    #[arg(long)]
    pub grm: PathBuf,
    #[arg(long)]
    pub pheno: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GroupArgs {
    #[arg(long)]
    pub grm: PathBuf,
    #[arg(long)]
    pub pheno: PathBuf,
    /// Two-column CSV: genotype, group.
    #[arg(long)]
    pub groups: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Compare the digests of the new outputs with the recorded ones.
    #[arg(long)]
    pub check: bool,
}
