use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;
use serde_json::json;

use covmerge::imputation::{grm_from_imputed, soft_impute, SoftImputeConfig};
use covmerge::kernels::{
    gaussian_kernel, grm_rowcentered, grm_to_dist, grm_vanraden, polynomial_kernel,
};
use covmerge::matcore::{to_correlation, UnionOrder};
use covmerge::mixedmodel::{fit_gblup_with, predict_gebv, FitOptions};
use covmerge::simlab::{
    cv_leave_group_out, cv_random_kfold, merge_vs_impute_bench, run_supp_ex1, run_supp_ex2,
    BenchConfig, CvReport, Ex1Config, Ex2Config, MarkerSimConfig, MetricReport, ReplicateMetrics,
};
use covmerge::wishart_em::{asymptotic_se_with, InformationMethod, Init};
use covmerge::{combine, io, EMConfig, PartialSampleSet};

use crate::args::*;
use crate::manifest::{sidecar, FileDigest, RunManifest};
use crate::{Failure, Status};

/// Files read and written by one run, for its manifest.
struct Run {
    subcommand: &'static str,
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(subcommand: &'static str, config: &impl Serialize) -> Self {
        Self {
            subcommand,
            config: serde_json::to_value(config).expect("arguments serialize"),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn parse<T>(
        &mut self,
        path: &Path,
        parser: impl FnOnce(&[u8]) -> covmerge::Result<T>,
    ) -> Result<T, Failure> {
        let bytes = fs::read(path).map_err(|e| Failure::io(path, e))?;
        self.inputs.push(FileDigest::of_bytes(path, &bytes));
        parser(&bytes).map_err(|e| Failure::core(path.display(), e))
    }

    fn write(
        &mut self,
        path: &Path,
        writer: impl FnOnce(&mut BufWriter<File>) -> covmerge::Result<()>,
    ) -> Result<(), Failure> {
        let file = File::create(path).map_err(|e| Failure::io(path, e))?;
        let mut out = BufWriter::new(file);
        writer(&mut out).map_err(|e| Failure::core(path.display(), e))?;
        out.flush().map_err(|e| Failure::io(path, e))?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<(), Failure> {
        self.write(path, |out| {
            serde_json::to_writer_pretty(&mut *out, value)
                .map_err(|e| covmerge::Error::Io(e.to_string()))?;
            out.write_all(b"\n")?;
            Ok(())
        })
    }

    fn write_rows<T: Serialize>(&mut self, path: &Path, rows: &[T]) -> Result<(), Failure> {
        self.write(path, |out| {
            let mut w = csv::Writer::from_writer(out);
            for row in rows {
                w.serialize(row)
                    .map_err(|e| covmerge::Error::Io(e.to_string()))?;
            }
            w.flush()?;
            Ok(())
        })
    }

    fn finish(self, argv: Vec<String>, manifest: &Path) -> Result<(), Failure> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| FileDigest::of_file(p))
            .collect::<Result<Vec<_>, _>>()?;
        RunManifest {
            tool: "covmerge".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand.to_string(),
            argv,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
        }
        .write(manifest)
    }
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<Status, Failure> {
    let (mut run, out) = match &cli.command {
        Command::Replay(a) => return replay(a),
        Command::Combine(a) => (Run::new("combine", a), &a.out),
        Command::Kernel(a) => (Run::new("kernel", a), &a.out),
        Command::Impute(a) => (Run::new("impute", a), &a.out),
        Command::Predict(a) => (Run::new("predict", a), &a.out),
        Command::Simulate(SimulateCommand::Ex1(a)) => (Run::new("simulate ex1", a), &a.out),
        Command::Simulate(SimulateCommand::Ex2(a)) => (Run::new("simulate ex2", a), &a.out),
        Command::Simulate(SimulateCommand::Bench(a)) => (Run::new("simulate bench", a), &a.out),
        Command::Cv(CvCommand::Kfold(a)) => (Run::new("cv kfold", a), &a.out),
        Command::Cv(CvCommand::Group(a)) => (Run::new("cv group", a), &a.out),
    };
    let manifest = cli
        .manifest
        .clone()
        .unwrap_or_else(|| sidecar(out, "manifest.json"));
    let status = match &cli.command {
        Command::Combine(a) => run_combine(&mut run, a)?,
        Command::Kernel(a) => run_kernel(&mut run, a)?,
        Command::Impute(a) => run_impute(&mut run, a)?,
        Command::Predict(a) => run_predict(&mut run, a)?,
        Command::Simulate(SimulateCommand::Ex1(a)) => run_ex1(&mut run, a)?,
        Command::Simulate(SimulateCommand::Ex2(a)) => run_ex2(&mut run, a)?,
        Command::Simulate(SimulateCommand::Bench(a)) => run_bench(&mut run, a)?,
        Command::Cv(CvCommand::Kfold(a)) => run_kfold(&mut run, a)?,
        Command::Cv(CvCommand::Group(a)) => run_group(&mut run, a)?,
        Command::Replay(_) => unreachable!(),
    };
    run.finish(argv, &manifest)?;
    Ok(status)
}

fn replay(args: &ReplayArgs) -> Result<Status, Failure> {
    let recorded = RunManifest::read(&args.manifest)?;
    for input in &recorded.inputs {
        let now = FileDigest::of_file(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(Failure::input(format!(
                "{}: contents differ from the recorded run",
                input.path.display()
            )));
        }
    }
    let full = std::iter::once("covmerge".to_string()).chain(recorded.argv.iter().cloned());
    let cli = Cli::try_parse_from(full).map_err(|e| {
        Failure::input(format!(
            "{}: cannot parse recorded arguments: {e}",
            args.manifest.display()
        ))
    })?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Failure::input(
            "a replay manifest cannot itself be replayed",
        ));
    }
    let status = run(cli, recorded.argv.clone())?;
    if args.check {
        for output in &recorded.outputs {
            let now = FileDigest::of_file(&output.path)?;
            if now.sha256 != output.sha256 {
                return Err(Failure::numerical(format!(
                    "{}: output differs from the recorded run",
                    output.path.display()
                )));
            }
        }
        eprintln!("replay matched {} recorded outputs", recorded.outputs.len());
    }
    Ok(status)
}

fn converged_status(converged: bool, what: &str) -> Status {
    if converged {
        Status::Ok
    } else {
        eprintln!("warning: {what} stopped at the iteration limit before converging");
        Status::NotConverged
    }
}

fn run_combine(run: &mut Run, a: &CombineArgs) -> Result<Status, Failure> {
    let samples = a
        .inputs
        .iter()
        .map(|p| run.parse(p, io::parse_labeled_matrix))
        .collect::<Result<Vec<_>, _>>()?;
    let weights = match &a.weights {
        Some(w) => w.clone(),
        None => vec![1.0; samples.len()],
    };
    let order = match a.order {
        UnionOrderArg::First => UnionOrder::FirstAppearance,
        UnionOrderArg::Sorted => UnionOrder::Lexicographic,
    };
    let set = PartialSampleSet::with_options(samples, weights, order)?;
    let init = match &a.init {
        Some(p) => Init::Sigma(run.parse(p, io::parse_labeled_matrix)?),
        None => Init::Identity,
    };
    let cfg = EMConfig {
        nu: a.nu,
        max_iter: a.max_iter,
        rel_tol: a.tol,
        pd_every_step: !a.no_pd_projection,
        init,
        ..EMConfig::default()
    };
    let result = combine(&set, &cfg)?;
    let written = if a.correlation {
        to_correlation(&result.sigma_hat)?
    } else {
        result.sigma_hat.clone()
    };
    run.write(&a.out, |w| io::write_labeled_matrix(&written, w))?;

    let report = json!({
        "iterations": result.iterations,
        "converged": result.converged,
        "loglik_trace": result.loglik_trace,
        "nu": result.nu,
        "rel_tol": a.tol,
        "weights": set.weights(),
        "pd_projections": result.pd_projections,
        "union_size": set.n(),
        "samples": set.m(),
    });
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| sidecar(&a.out, "report.json"));
    run.write_json(&report_path, &report)?;

    if a.se {
        if result.converged {
            let method = match a.se_method {
                SeMethodArg::Complete => InformationMethod::CompleteData,
                SeMethodArg::Observed => InformationMethod::Observed,
            };
            let se = asymptotic_se_with(&result, &set, method, a.se_dim_limit)?;
            run.write(&sidecar(&a.out, "se.csv"), |w| {
                io::write_labeled_matrix(&se, w)
            })?;
        } else {
            eprintln!("warning: standard errors skipped because the fit did not converge");
        }
    }
    Ok(converged_status(result.converged, "EM"))
}

fn run_kernel(run: &mut Run, a: &KernelArgs) -> Result<Status, Failure> {
    let mut m = run.parse(&a.markers, |b| io::parse_marker_matrix(b, a.ploidy))?;
    if m.has_missing() {
        m = m.mean_impute()?;
    }
    let k = match a.method {
        KernelMethod::Vanraden => grm_vanraden(&m)?,
        KernelMethod::Rowcentered => grm_rowcentered(&m)?,
        KernelMethod::Gaussian => gaussian_kernel(&grm_to_dist(&grm_rowcentered(&m)?), a.h)?,
        KernelMethod::Polynomial => polynomial_kernel(&m, a.c, a.degree)?,
    };
    run.write(&a.out, |w| io::write_labeled_matrix(&k, w))?;
    Ok(Status::Ok)
}

fn run_impute(run: &mut Run, a: &ImputeArgs) -> Result<Status, Failure> {
    let x = run.parse(&a.input, io::parse_feature_matrix)?;
    let cfg = SoftImputeConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        center_columns: a.center_columns,
        ..SoftImputeConfig::new(a.rank, a.lambda)
    };
    let z = soft_impute(&x, &cfg)?;
    run.write(&a.out, |w| {
        io::write_table(&z.row_labels, &z.col_labels, &z.values, w)
    })?;
    let report = json!({
        "iterations": z.iterations,
        "converged": z.converged,
        "objective_trace": z.objective_trace,
        "nuclear_norm": z.nuclear_norm,
        "observed_fraction": x.observed_fraction(),
        "rank": a.rank,
        "lambda": a.lambda,
    });
    run.write_json(&sidecar(&a.out, "report.json"), &report)?;
    if let Some(path) = &a.grm {
        let g = grm_from_imputed(&z)?;
        run.write(path, |w| io::write_labeled_matrix(&g, w))?;
    }
    Ok(converged_status(z.converged, "soft-impute"))
}

fn run_predict(run: &mut Run, a: &PredictArgs) -> Result<Status, Failure> {
    let g = run.parse(&a.grm, io::parse_labeled_matrix)?;
    let pheno = run.parse(&a.pheno, io::parse_phenotypes)?;
    let targets = match &a.targets {
        Some(p) => run.parse(p, io::parse_label_list)?,
        None => g.labels().to_vec(),
    };
    let fit = fit_gblup_with(
        &pheno,
        &g,
        FitOptions {
            variance_ratio: a.variance_ratio,
        },
    )?;
    let gebv = predict_gebv(&fit, &g, &targets)?;
    run.write(&a.out, |w| {
        io::write_pairs("genotype", "gebv", targets.iter().cloned().zip(gebv), w)
    })?;
    if let Some(path) = &a.blup_out {
        let pairs = fit.labels.iter().cloned().zip(fit.u_hat.iter().copied());
        run.write(path, |w| io::write_pairs("genotype", "blup", pairs, w))?;
    }
    let report = json!({
        "trait": pheno.trait_name,
        "lambda": fit.lambda,
        "sigma2_g": fit.sigma2_g,
        "sigma2_e": fit.sigma2_e,
        "heritability": fit.heritability(),
        "beta_hat": fit.beta_hat,
        "reml_loglik": fit.reml_loglik,
        "records": pheno.records.len(),
    });
    run.write_json(&sidecar(&a.out, "report.json"), &report)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct MetricRow<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    n_total: Option<usize>,
    n_kernel: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<&'a str>,
    replicate: usize,
    coverage: f64,
    mse_upper: f64,
    pearson_upper: f64,
    mse_co_observed: f64,
    mse_never_co_observed: Option<f64>,
    bias_never_co_observed: Option<f64>,
    mae_never_co_observed: Option<f64>,
}

impl<'a> MetricRow<'a> {
    fn new(
        n_total: Option<usize>,
        n_kernel: usize,
        method: Option<&'a str>,
        r: &ReplicateMetrics,
    ) -> Self {
        Self {
            n_total,
            n_kernel,
            method,
            replicate: r.replicate,
            coverage: r.coverage,
            mse_upper: r.mse_upper,
            pearson_upper: r.pearson_upper,
            mse_co_observed: r.mse_co_observed,
            mse_never_co_observed: r.mse_never_co_observed,
            bias_never_co_observed: r.bias_never_co_observed,
            mae_never_co_observed: r.mae_never_co_observed,
        }
    }
}

fn report_means(r: &MetricReport) -> serde_json::Value {
    json!({
        "mse_upper": r.mse_upper,
        "pearson_upper": r.pearson_upper,
        "mse_co_observed": r.mse_co_observed,
        "mse_never_co_observed": r.mse_never_co_observed,
        "mae_never_co_observed": r.mae_never_co_observed,
    })
}

fn run_ex1(run: &mut Run, a: &Ex1Args) -> Result<Status, Failure> {
    run.seed = Some(a.seed);
    let cfg = Ex1Config {
        n_totals: a.n_totals.clone(),
        n_kernels: a.n_kernels.clone(),
        replicates: a.replicates,
        nu: a.nu,
        size_min: a.size_min,
        size_max: a.size_max,
        rounds: a.rounds,
        rng_seed: a.seed,
    };
    let cells = run_supp_ex1(&cfg)?;
    let rows: Vec<MetricRow> = cells
        .iter()
        .flat_map(|c| {
            c.report
                .replicates
                .iter()
                .map(|r| MetricRow::new(Some(c.n_total), c.n_kernel, None, r))
        })
        .collect();
    run.write_rows(&a.out, &rows)?;
    let summary: Vec<_> = cells
        .iter()
        .map(|c| {
            json!({ "n_total": c.n_total, "n_kernel": c.n_kernel, "mean": report_means(&c.report) })
        })
        .collect();
    run.write_json(
        &sidecar(&a.out, "summary.json"),
        &json!({ "cells": summary }),
    )?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct TraceRow {
    experiment: usize,
    start: usize,
    iteration: usize,
    loglik: f64,
}

fn run_ex2(run: &mut Run, a: &Ex2Args) -> Result<Status, Failure> {
    run.seed = Some(a.seed);
    let defaults = Ex2Config::new(a.n);
    let cfg = Ex2Config {
        n_samples: a.samples,
        n_starts: a.starts,
        experiments: a.experiments,
        size_min: a.size_min.unwrap_or(defaults.size_min),
        size_max: a.size_max.unwrap_or(defaults.size_max),
        nu: a.nu,
        em: EMConfig {
            max_iter: a.max_iter,
            rel_tol: a.tol,
            ..EMConfig::default()
        },
        rng_seed: a.seed,
        ..defaults
    };
    let result = run_supp_ex2(&cfg)?;
    let mut rows = Vec::new();
    for e in &result.experiments {
        for (s, trace) in e.traces.iter().enumerate() {
            for (i, &ll) in trace.iter().enumerate() {
                rows.push(TraceRow {
                    experiment: e.experiment,
                    start: s,
                    iteration: i,
                    loglik: ll,
                });
            }
        }
    }
    run.write_rows(&a.out, &rows)?;
    let experiments: Vec<_> = result
        .experiments
        .iter()
        .map(|e| {
            json!({
                "experiment": e.experiment,
                "final_logliks": e.final_logliks,
                "converged": e.converged,
                "max_relative_gap": e.max_relative_gap,
                "max_relative_drop": e.max_relative_drop,
            })
        })
        .collect();
    let summary = json!({
        "max_relative_gap": result.max_relative_gap,
        "max_relative_drop": result.max_relative_drop,
        "experiments": experiments,
    });
    run.write_json(&sidecar(&a.out, "summary.json"), &summary)?;
    Ok(Status::Ok)
}

fn run_bench(run: &mut Run, a: &BenchArgs) -> Result<Status, Failure> {
    run.seed = Some(a.seed);
    let pool = match &a.markers {
        Some(p) => Some(run.parse(p, |b| io::parse_marker_matrix(b, a.ploidy))?),
        None => None,
    };
    let cfg = BenchConfig {
        markers: MarkerSimConfig {
            n_genotypes: a.pool_genotypes,
            n_markers: a.pool_markers,
            ploidy: a.ploidy,
            ..MarkerSimConfig::default()
        },
        panel_genotypes: a.panel_genotypes,
        panel_markers: a.panel_markers,
        n_kernels: a.n_kernels.clone(),
        replicates: a.replicates,
        impute_rank: a.rank,
        impute_lambda: a.lambda,
        impute_max_iter: a.impute_max_iter,
        em: EMConfig::default(),
        rng_seed: a.seed,
    };
    let cells = merge_vs_impute_bench(pool.as_ref(), &cfg)?;
    let mut rows = Vec::new();
    for c in &cells {
        for (method, report) in [("combined", &c.combined), ("imputed", &c.imputed)] {
            rows.extend(
                report
                    .replicates
                    .iter()
                    .map(|r| MetricRow::new(None, c.n_kernel, Some(method), r)),
            );
        }
    }
    run.write_rows(&a.out, &rows)?;
    let summary: Vec<_> = cells
        .iter()
        .map(|c| {
            json!({
                "n_kernel": c.n_kernel,
                "combined": report_means(&c.combined),
                "imputed": report_means(&c.imputed),
                "combined_wins": c.combined_wins,
                "replicates": a.replicates,
            })
        })
        .collect();
    run.write_json(
        &sidecar(&a.out, "summary.json"),
        &json!({ "cells": summary }),
    )?;
    Ok(Status::Ok)
}

fn write_cv(run: &mut Run, out: &Path, report: &CvReport) -> Result<Status, Failure> {
    run.write_rows(out, &report.folds)?;
    run.write_json(
        &sidecar(out, "summary.json"),
        &json!({ "mean_accuracy": report.mean_accuracy }),
    )?;
    Ok(Status::Ok)
}

fn run_kfold(run: &mut Run, a: &KfoldArgs) -> Result<Status, Failure> {
    run.seed = Some(a.seed);
    let g = run.parse(&a.grm, io::parse_labeled_matrix)?;
    let pheno = run.parse(&a.pheno, io::parse_phenotypes)?;
    let report = cv_random_kfold(&pheno, &g, a.k, a.seed)?;
    write_cv(run, &a.out, &report)
}

fn run_group(run: &mut Run, a: &GroupArgs) -> Result<Status, Failure> {
    let g = run.parse(&a.grm, io::parse_labeled_matrix)?;
    let pheno = run.parse(&a.pheno, io::parse_phenotypes)?;
    let groups = run.parse(&a.groups, io::parse_groups)?;
    let report = cv_leave_group_out(&pheno, &g, &groups)?;
    write_cv(run, &a.out, &report)
}
