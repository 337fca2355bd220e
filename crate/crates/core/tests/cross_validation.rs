use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use rand::Rng;

use covmerge::kernels::{grm_vanraden, MarkerMatrix};
use covmerge::mixedmodel::{fit_gblup, PhenotypeTable};
use covmerge::simlab::{
    cv_leave_group_out, cv_random_kfold, kfold_partition, pearson, simulate_markers,
    simulate_trait, substream, MarkerSimConfig,
};
use covmerge::{Error, LabeledSymMatrix};

fn panel(seed: u64, n_genotypes: usize, n_markers: usize) -> MarkerMatrix {
    let cfg = MarkerSimConfig {
        n_genotypes,
        n_markers,
        ..MarkerSimConfig::default()
    };
    simulate_markers(&cfg, &mut substream(seed, 0)).unwrap()
}

#[test]
fn null_trait_has_no_predictive_accuracy() {
    let markers = panel(11, 100, 500);
    let g = grm_vanraden(&markers).unwrap();
    let mut total = 0.0;
    for seed in 0..20 {
        let pheno = simulate_trait(&markers, 0.0, &mut substream(seed, 1)).unwrap();
        total += cv_random_kfold(&pheno, &g, 10, seed)
            .unwrap()
            .mean_accuracy
            .unwrap();
    }
    let mean = total / 20.0;
    assert!(mean.abs() < 0.1, "mean accuracy {mean}");
}

#[test]
fn heritable_trait_is_predicted() {
    let cfg = MarkerSimConfig::families(300, 3000);
    let markers = simulate_markers(&cfg, &mut substream(12, 0)).unwrap();
    let g = grm_vanraden(&markers).unwrap();
    let pheno = simulate_trait(&markers, 0.9, &mut substream(12, 1)).unwrap();
    let report = cv_random_kfold(&pheno, &g, 10, 12).unwrap();
    assert_eq!(report.folds.len(), 10);
    assert_eq!(report.folds.iter().map(|f| f.n_test).sum::<usize>(), 300);
    let acc = report.mean_accuracy.unwrap();
    assert!(acc > 0.6, "mean accuracy {acc}");
}

#[test]
fn kfold_partition_covers_each_genotype_once() {
    let genotypes: Vec<String> = (0..53).map(|i| format!("g{i}")).collect();
    for k in [2, 5, 10, 53] {
        let folds = kfold_partition(&genotypes, k, 4);
        assert_eq!(folds.len(), k);
        let mut seen: Vec<&String> = folds.iter().flatten().collect();
        seen.sort();
        let mut want: Vec<&String> = genotypes.iter().collect();
        want.sort();
        assert_eq!(seen, want);
        let sizes: HashSet<usize> = folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn kfold_rejects_unknown_genotypes() {
    let markers = panel(13, 20, 50);
    let g = grm_vanraden(&markers).unwrap();
    let pheno = PhenotypeTable::from_pairs("y", [("g000", 1.0), ("stranger", 2.0)]).unwrap();
    assert!(matches!(
        cv_random_kfold(&pheno, &g, 2, 1),
        Err(Error::LabelMismatch { .. })
    ));
}

/// Percentile bootstrap interval for the correlation of `(x, y)` pairs.
fn bootstrap_interval(x: &[f64], y: &[f64], seed: u64) -> (f64, f64) {
    let mut rng = substream(seed, 9);
    let n = x.len();
    let mut stats: Vec<f64> = (0..2000)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            pearson(&xs, &ys)
        })
        .filter(|r| r.is_finite())
        .collect();
    stats.sort_by(f64::total_cmp);
    (stats[stats.len() / 40], stats[stats.len() * 39 / 40])
}

#[test]
fn exchangeable_groups_have_overlapping_accuracy_intervals() {
    let markers = panel(14, 200, 1500);
    let g = grm_vanraden(&markers).unwrap();
    let pheno = simulate_trait(&markers, 0.7, &mut substream(14, 1)).unwrap();
    // Alternate assignment keeps both groups drawn from all subpopulations.
    let groups: BTreeMap<String, String> = g
        .labels()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            (
                l.clone(),
                if i % 2 == 0 { "even" } else { "odd" }.to_string(),
            )
        })
        .collect();
    let report = cv_leave_group_out(&pheno, &g, &groups).unwrap();
    assert_eq!(report.folds.len(), 2);

    let means = pheno.genotype_means();
    let mut intervals = Vec::new();
    for (k, name) in ["even", "odd"].iter().enumerate() {
        let train = pheno.filter(|l| groups[l] != *name);
        let fit = fit_gblup(&train, &g).unwrap();
        let test: Vec<&String> = g.labels().iter().filter(|l| groups[*l] == *name).collect();
        let pred: Vec<f64> = test.iter().map(|l| fit.gebv(l).unwrap()).collect();
        let obs: Vec<f64> = test.iter().map(|l| means[*l]).collect();
        let reported = report
            .folds
            .iter()
            .find(|f| f.fold == *name)
            .unwrap()
            .accuracy
            .unwrap();
        assert!((pearson(&pred, &obs) - reported).abs() < 1e-12);
        intervals.push(bootstrap_interval(&pred, &obs, k as u64));
    }
    let (a, b) = (intervals[0], intervals[1]);
    assert!(a.0 <= b.1 && b.0 <= a.1, "{a:?} vs {b:?}");
}

#[test]
fn unlinked_group_gets_no_information() {
    // Two families with no relationship between them.
    let block =
        |offset: f64| DMatrix::from_fn(6, 6, |i, j| if i == j { 1.0 } else { 0.4 + offset });
    let mut values = DMatrix::zeros(12, 12);
    values.view_mut((0, 0), (6, 6)).copy_from(&block(0.0));
    values.view_mut((6, 6), (6, 6)).copy_from(&block(0.1));
    let labels: Vec<String> = (0..12).map(|i| format!("g{i}")).collect();
    let g = LabeledSymMatrix::new(labels.clone(), values).unwrap();
    let pheno = PhenotypeTable::from_pairs(
        "y",
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), (i as f64 * 1.7).sin() + 0.2 * i as f64)),
    )
    .unwrap();
    let groups: BTreeMap<String, String> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            (
                l.clone(),
                if i < 6 { "first" } else { "second" }.to_string(),
            )
        })
        .collect();
    let report = cv_leave_group_out(&pheno, &g, &groups).unwrap();
    for fold in &report.folds {
        assert_eq!(fold.n_test, 6);
        assert!(fold.accuracy.unwrap().abs() < 1e-12, "{fold:?}");
    }
}

#[test]
fn one_group_covering_everything_is_rejected() {
    let markers = panel(15, 12, 40);
    let g = grm_vanraden(&markers).unwrap();
    let pheno = simulate_trait(&markers, 0.5, &mut substream(15, 1)).unwrap();
    let groups = g
        .labels()
        .iter()
        .map(|l| (l.clone(), "all".to_string()))
        .collect();
    assert!(matches!(
        cv_leave_group_out(&pheno, &g, &groups),
        Err(Error::EmptyGroup { .. })
    ));
}
