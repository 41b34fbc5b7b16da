use std::io::Write;

use coughdetect_core::eval::{
    auc, compute_metrics, read_manifest, run_cv, stratified_kfold, Learner, Scorer, THRESHOLD,
};
use proptest::prelude::*;

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
fn pairwise_auc(s: &[(f64, bool)]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in s.iter().filter(|x| x.1) {
        for n in s.iter().filter(|x| !x.1) {
            den += 1.0;
            num += if p.0 > n.0 { 1.0 } else if p.0 == n.0 { 0.5 } else { 0.0 };
        }
    }
    num / den
}

fn scores() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0u8..20, any::<bool>()), 2..80)
        .prop_map(|v| v.into_iter().map(|(s, b)| (s as f64 / 20.0, b)).collect::<Vec<_>>())
        .prop_filter("both classes", |v: &Vec<(f64, bool)>| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auc_matches_pairwise_count(s in scores()) {
        prop_assert!((auc(&s).unwrap() - pairwise_auc(&s)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_transforms(s in scores()) {
        let warped: Vec<(f64, bool)> = s.iter().map(|&(v, b)| ((3.0 * v).exp() - 7.0, b)).collect();
        prop_assert!((auc(&s).unwrap() - auc(&warped).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn confusion_counts_every_sample(s in scores()) {
        let m = compute_metrics(&s).unwrap();
        let c = m.confusion;
        prop_assert_eq!(c.total(), s.len());
        prop_assert_eq!(c.tp + c.fn_, s.iter().filter(|x| x.1).count());
        prop_assert_eq!(c.tp + c.fp, s.iter().filter(|x| x.0 >= THRESHOLD).count());
        prop_assert!((m.balanced_accuracy - (m.sensitivity + m.specificity) / 2.0).abs() < 1e-12);
        for v in [m.precision, m.sensitivity, m.specificity, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn folds_partition_and_stratify(
        labels in prop::collection::vec(0usize..3, 30..200),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let smallest = (0..3).map(|c| labels.iter().filter(|&&l| l == c).count()).filter(|&n| n > 0).min().unwrap();
        prop_assume!(smallest >= k);
        let folds = stratified_kfold(&labels, k, seed).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for c in 0..3 {
            let counts: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == c).count()).collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

/// Midpoint between the class means of the training split.
struct Threshold;
struct ThresholdModel(f64);

impl Scorer<f64> for ThresholdModel {
    fn score(&self, x: &f64) -> coughdetect_core::Result<Vec<f64>> {
        let p = if *x > self.0 { 0.9 } else { 0.1 };
        Ok(vec![1.0 - p, p])
    }
}

impl Learner<f64> for Threshold {
    type Model = ThresholdModel;
    fn fit(&self, xs: &[f64], labels: &[usize], train: &[usize], val: &[usize], _: u64) -> coughdetect_core::Result<ThresholdModel> {
        assert!(train.iter().all(|i| !val.contains(i)));
        let mean = |c: usize| {
            let v: Vec<f64> = train.iter().filter(|&&i| labels[i] == c).map(|&i| xs[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        Ok(ThresholdModel((mean(0) + mean(1)) / 2.0))
    }
}

#[test]
fn cross_validation_of_a_separable_problem() {
    let xs: Vec<f64> = (0..60).map(|i| if i % 2 == 0 { i as f64 / 100.0 } else { 1.0 + i as f64 / 100.0 }).collect();
    let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
    let report = run_cv(&xs, &labels, 2, &Threshold, 5, 3).unwrap();
    assert_eq!(report.folds.len(), 5);
    assert_eq!(report.folds.iter().map(|f| f.test_size).sum::<usize>(), 60);
    assert_eq!(report.aggregate.auc.mean, 1.0);
    assert_eq!(report.confusion.tp, 30);
    assert_eq!(report.confusion.tn, 30);
}

#[test]
fn manifest_rows_resolve_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "path,label,ct,lym_percent,site").unwrap();
    writeln!(f, "a.wav, positive ,25,15,ward").unwrap();
    writeln!(f, "/abs/b.wav,negative,,,").unwrap();
    drop(f);
    let rows = read_manifest(&path).unwrap();
    assert_eq!(rows[0].path, dir.path().join("a.wav"));
    assert!(rows[0].label.covid_positive);
    assert_eq!(rows[0].label.ct, Some(25.0));
    assert_eq!(rows[0].site, "ward");
    assert_eq!(rows[1].path, std::path::PathBuf::from("/abs/b.wav"));
    assert_eq!(rows[1].label.lym_percent, None);
}
