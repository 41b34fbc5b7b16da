//! Stratified k-fold evaluation, ROC AUC and confusion-matrix metrics, and
//! the clinical labels (Ct severity bands, lymphopenia) of a manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decision threshold on the positive-class probability.
pub const THRESHOLD: f64 = 0.5;

/// Rank-statistic (Mann-Whitney) AUC; ties earn half credit.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64> {
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = sorted.iter().filter(|s| s.1).count();
    let n_neg = sorted.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    // Sum of positive ranks, averaging ranks over ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let mean_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += mean_rank * sorted[i..j].iter().filter(|s| s.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC averaged over the classes present in `truth`.
pub fn macro_auc(probs: &[Vec<f64>], truth: &[usize], n_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..n_classes {
        let scored: Vec<(f64, bool)> = probs.iter().zip(truth).map(|(p, &t)| (p[c], t == c)).collect();
        if let Ok(a) = auc(&scored) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Metric("AUC needs at least two classes".into()));
    }
    Ok(total / used as f64)
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut recalls = Vec::new();
    for c in 0..n_classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        if support > 0 {
            let hit = pred.iter().zip(truth).filter(|(&p, &t)| t == c && p == c).count();
            recalls.push(hit as f64 / support as f64);
        }
    }
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (false, true) => c.fn_ += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.sensitivity());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn balanced_accuracy(&self) -> f64 {
        (self.sensitivity() + self.specificity()) / 2.0
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
        self.tn += o.tn;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub confusion: Confusion,
}

impl MetricBundle {
    pub fn from_confusion(confusion: Confusion, auc: Option<f64>) -> Self {
        Self {
            auc,
            precision: confusion.precision(),
            sensitivity: confusion.sensitivity(),
            specificity: confusion.specificity(),
            f1: confusion.f1(),
            balanced_accuracy: confusion.balanced_accuracy(),
            confusion,
        }
    }
}

/// Binary metrics from (positive probability, is positive) pairs.
pub fn compute_metrics(scores: &[(f64, bool)]) -> Result<MetricBundle> {
    if scores.is_empty() {
        return Err(Error::Metric("no scores".into()));
    }
    let pred: Vec<bool> = scores.iter().map(|s| s.0 >= THRESHOLD).collect();
    let truth: Vec<bool> = scores.iter().map(|s| s.1).collect();
    Ok(MetricBundle::from_confusion(
        Confusion::from_predictions(&pred, &truth),
        auc(scores).ok(),
    ))
}

/// One-vs-rest metrics macro-averaged over classes, from probability
/// vectors and argmax predictions. The confusion counts are summed over
/// the one-vs-rest problems.
pub fn compute_multiclass_metrics(probs: &[Vec<f64>], truth: &[usize], n_classes: usize) -> Result<MetricBundle> {
    if probs.is_empty() {
        return Err(Error::Metric("no scores".into()));
    }
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mut sum = MetricBundle::from_confusion(Confusion::default(), None);
    let mut confusion = Confusion::default();
    for c in 0..n_classes {
        let p: Vec<bool> = pred.iter().map(|&x| x == c).collect();
        let t: Vec<bool> = truth.iter().map(|&x| x == c).collect();
        let m = MetricBundle::from_confusion(Confusion::from_predictions(&p, &t), None);
        sum.precision += m.precision;
        sum.sensitivity += m.sensitivity;
        sum.specificity += m.specificity;
        sum.f1 += m.f1;
        confusion.add(&m.confusion);
    }
    let k = n_classes as f64;
    Ok(MetricBundle {
        auc: macro_auc(probs, truth, n_classes).ok(),
        precision: sum.precision / k,
        sensitivity: sum.sensitivity / k,
        specificity: sum.specificity / k,
        f1: sum.f1 / k,
        balanced_accuracy: balanced_accuracy(&pred, truth, n_classes),
        confusion,
    })
}

fn argmax(p: &[f64]) -> usize {
    (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap_or(0)
}

/// Split sample indices into `k` folds that keep the class proportions.
/// Each class is shuffled and dealt round-robin, the dealing position
/// carrying over from one class to the next so fold sizes stay balanced.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Stratification(format!("k must be at least 2, got {k}")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} samples, fewer than k = {k}",
                members.len()
            )));
        }
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        for m in members {
            folds[slot].push(m);
            slot = (slot + 1) % k;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Something that scores a sample with a probability vector.
pub trait Scorer<S> {
    fn score(&self, sample: &S) -> Result<Vec<f64>>;
}

/// Trains a [`Scorer`] from a training split, using the validation split
/// for model selection.
pub trait Learner<S> {
    type Model: Scorer<S>;
    fn fit(&self, samples: &[S], labels: &[usize], train: &[usize], val: &[usize], seed: u64) -> Result<Self::Model>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Over the folds where AUC was defined.
    pub auc: MeanStd,
    pub precision: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub f1: MeanStd,
    pub balanced_accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_size: usize,
    pub validation_fold: usize,
    pub metrics: MetricBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub n_classes: usize,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
    /// Counts accumulated over every test fold.
    pub confusion: Confusion,
    pub pooled_sensitivity: f64,
    pub pooled_specificity: f64,
}

impl EvalReport {
    pub fn from_folds(k: usize, n_classes: usize, folds: Vec<FoldReport>) -> Self {
        let pick = |f: fn(&MetricBundle) -> f64| MeanStd::of(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        let aucs: Vec<f64> = folds.iter().filter_map(|r| r.metrics.auc).collect();
        let mut confusion = Confusion::default();
        folds.iter().for_each(|f| confusion.add(&f.metrics.confusion));
        Self {
            k,
            n_classes,
            aggregate: Aggregate {
                auc: MeanStd::of(&aucs),
                precision: pick(|m| m.precision),
                sensitivity: pick(|m| m.sensitivity),
                specificity: pick(|m| m.specificity),
                f1: pick(|m| m.f1),
                balanced_accuracy: pick(|m| m.balanced_accuracy),
            },
            pooled_sensitivity: confusion.sensitivity(),
            pooled_specificity: confusion.specificity(),
            confusion,
            folds,
        }
    }

    /// Plain-text table: one row per metric, mean ± std in percent.
    pub fn to_table(&self) -> String {
        let a = &self.aggregate;
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>16}", "metric", "mean ± std (%)");
        for (name, m) in [
            ("AUC", a.auc),
            ("Precision", a.precision),
            ("Sensitivity", a.sensitivity),
            ("Specificity", a.specificity),
            ("F1", a.f1),
            ("Balanced accuracy", a.balanced_accuracy),
        ] {
            let _ = writeln!(s, "{:<18} {:>7.2} ± {:>5.2}", name, 100.0 * m.mean, 100.0 * m.std);
        }
        let c = &self.confusion;
        let _ = writeln!(s, "confusion (pooled): tp={} fn={} fp={} tn={}", c.tp, c.fn_, c.fp, c.tn);
        s
    }
}

/// k-fold cross-validation: fold `i` is the test set, fold `(i + 1) % k`
/// the validation set, the rest train. Fold `i` trains with seed `seed + i`.
pub fn run_cv<S, L: Learner<S>>(
    samples: &[S],
    labels: &[usize],
    n_classes: usize,
    learner: &L,
    k: usize,
    seed: u64,
) -> Result<EvalReport> {
    if samples.len() != labels.len() {
        return Err(Error::Input("samples and labels differ in length".into()));
    }
    let folds = stratified_kfold(labels, k, seed)?;
    let mut reports = Vec::with_capacity(k);
    for i in 0..k {
        let v = (i + 1) % k;
        let train: Vec<usize> = (0..k)
            .filter(|&j| j != i && j != v)
            .flat_map(|j| folds[j].iter().copied())
            .collect();
        let model = learner.fit(samples, labels, &train, &folds[v], seed.wrapping_add(i as u64))?;
        let probs: Vec<Vec<f64>> = folds[i].iter().map(|&t| model.score(&samples[t])).collect::<Result<_>>()?;
        let truth: Vec<usize> = folds[i].iter().map(|&t| labels[t]).collect();
        let metrics = if n_classes == 2 {
            let scored: Vec<(f64, bool)> = probs.iter().zip(&truth).map(|(p, &t)| (p[1], t == 1)).collect();
            compute_metrics(&scored)?
        } else {
            compute_multiclass_metrics(&probs, &truth, n_classes)?
        };
        reports.push(FoldReport { fold: i, test_size: folds[i].len(), validation_fold: v, metrics });
    }
    Ok(EvalReport::from_folds(k, n_classes, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalLabel {
    pub covid_positive: bool,
    pub ct: Option<f64>,
    pub lym_percent: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeverityClass {
    BorderlinePositive,
    StandardPositive,
    HighPositive,
}

impl SeverityClass {
    pub const ALL: [SeverityClass; 3] = [
        SeverityClass::BorderlinePositive,
        SeverityClass::StandardPositive,
        SeverityClass::HighPositive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LymphocyteClass {
    Lymphopenia,
    NormalLymphocytes,
}

/// Ct bands: Ct <= 20 high, 20 < Ct < 30 standard, 30 <= Ct < 35 borderline.
pub fn severity_label(label: &ClinicalLabel) -> Result<SeverityClass> {
    if !label.covid_positive {
        return Err(Error::Label("severity is only defined for positive samples".into()));
    }
    let ct = label.ct.ok_or_else(|| Error::Label("Ct value missing".into()))?;
    if !(10.0..=45.0).contains(&ct) {
        return Err(Error::Label(format!("Ct {ct} outside the plausible range [10, 45]")));
    }
    if ct <= 20.0 {
        Ok(SeverityClass::HighPositive)
    } else if ct < 30.0 {
        Ok(SeverityClass::StandardPositive)
    } else if ct < 35.0 {
        Ok(SeverityClass::BorderlinePositive)
    } else {
        Err(Error::Label(format!("Ct {ct} is outside every positive band")))
    }
}

pub fn lymphopenia_label(label: &ClinicalLabel) -> Result<LymphocyteClass> {
    let lym = label.lym_percent.ok_or_else(|| Error::Label("LYM% missing".into()))?;
    if !(0.0..=100.0).contains(&lym) {
        return Err(Error::Label(format!("LYM% {lym} outside [0, 100]")));
    }
    Ok(if lym < 20.0 { LymphocyteClass::Lymphopenia } else { LymphocyteClass::NormalLymphocytes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Resolved against the manifest's directory when relative.
    pub path: PathBuf,
    pub label: ClinicalLabel,
    pub site: String,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    #[serde(default)]
    ct: Option<f64>,
    #[serde(default)]
    lym_percent: Option<f64>,
    #[serde(default)]
    site: Option<String>,
}

fn parse_positive(s: &str) -> Result<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "positive" | "pos" | "1" | "true" | "covid" => Ok(true),
        "negative" | "neg" | "0" | "false" | "healthy" => Ok(false),
        other => Err(Error::Label(format!("unrecognised label {other:?}"))),
    }
}

/// Read a `path,label,ct,lym_percent,site` manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Input(format!("{} row {}: {e}", path.display(), line + 2)))?;
        let p = PathBuf::from(&row.path);
        out.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            label: ClinicalLabel {
                covid_positive: parse_positive(&row.label)?,
                ct: row.ct,
                lym_percent: row.lym_percent,
            },
            site: row.site.unwrap_or_default(),
        });
    }
    Ok(out)
}
