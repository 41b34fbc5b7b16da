//! The work behind each subcommand, kept free of argument parsing so tests
//! can call it directly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use coughdetect_core::audio_io::read_wav;
use coughdetect_core::eval::{
    lymphopenia_label, read_manifest, run_cv, severity_label, stratified_kfold, EvalReport, Learner, LymphocyteClass,
    ManifestEntry,
};
use coughdetect_core::model::{train, DeepCoughLearner, ModelWeights, Sample, TrainingLog};
use coughdetect_core::pipeline::{detect, featurize, featurize_or_whole};
use coughdetect_core::sonograph::CoughTensor;
use coughdetect_core::{AudioSignal, Error};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::AppConfig;

/// Write `bytes` to `path` through a temporary file in the same directory,
/// so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_signal(path: &Path) -> Result<AudioSignal> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_wav(&bytes).with_context(|| format!("decoding {}", path.display()))
}

/// `{"segments": [[start, end], ...]}` in raw sample indices.
pub fn detect_file(path: &Path, cfg: &AppConfig) -> Result<Value> {
    let signal = read_signal(path)?;
    let segs = detect(&signal, &cfg.pipeline)?;
    Ok(json!({ "segments": segs.raw_ranges() }))
}

/// Tensor of the first cough in `path`. Without `whole_fallback`, a
/// recording with no cough is an error.
pub fn featurize_file(path: &Path, cfg: &AppConfig, whole_fallback: bool) -> Result<CoughTensor> {
    let signal = read_signal(path)?;
    if whole_fallback {
        return Ok(featurize_or_whole(&signal, &cfg.pipeline)?.0);
    }
    featurize(&signal, &cfg.pipeline)?
        .tensor
        .with_context(|| format!("no cough detected in {}", path.display()))
}

/// What a manifest is labelled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    /// Covid positive (1) vs negative (0).
    Covid,
    /// Ct severity band of positive samples (3 classes).
    Severity,
    /// LYM% below 20 (1) vs normal (0).
    Lymphopenia,
}

impl Task {
    pub fn n_classes(self) -> usize {
        match self {
            Task::Severity => 3,
            _ => 2,
        }
    }

    /// Class index of `entry`, or `None` when it carries no label for this task.
    pub fn label(self, entry: &ManifestEntry) -> Result<Option<usize>> {
        let l = &entry.label;
        Ok(match self {
            Task::Covid => Some(l.covid_positive as usize),
            Task::Severity => match severity_label(l) {
                Ok(s) => Some(s.index()),
                Err(Error::Label(_)) if !l.covid_positive || l.ct.is_none() => None,
                Err(e) => return Err(e.into()),
            },
            Task::Lymphopenia => match l.lym_percent {
                None => None,
                Some(_) => Some((lymphopenia_label(l)? == LymphocyteClass::Lymphopenia) as usize),
            },
        })
    }
}

pub struct Dataset {
    pub paths: Vec<PathBuf>,
    pub tensors: Vec<CoughTensor>,
    pub labels: Vec<usize>,
    /// Recordings where no cough was detected and the whole file was used.
    pub undetected: usize,
    /// Manifest rows without a label for the task.
    pub skipped: usize,
}

/// Featurise every labelled recording of a manifest.
pub fn load_dataset(manifest: &Path, cfg: &AppConfig, task: Task) -> Result<Dataset> {
    let entries = read_manifest(manifest)?;
    let mut ds = Dataset { paths: Vec::new(), tensors: Vec::new(), labels: Vec::new(), undetected: 0, skipped: 0 };
    for entry in &entries {
        let Some(label) = task.label(entry)? else {
            ds.skipped += 1;
            continue;
        };
        let signal = read_signal(&entry.path)?;
        let (tensor, detected) =
            featurize_or_whole(&signal, &cfg.pipeline).with_context(|| format!("featurising {}", entry.path.display()))?;
        ds.undetected += !detected as usize;
        ds.paths.push(entry.path.clone());
        ds.tensors.push(tensor);
        ds.labels.push(label);
    }
    if ds.tensors.is_empty() {
        bail!("manifest {} has no usable rows", manifest.display());
    }
    Ok(ds)
}

/// Train on the whole dataset, holding out one stratified fold
/// (`eval.k` folds, fewer if a class is small) for model selection.
pub fn train_dataset(ds: &Dataset, cfg: &AppConfig, task: Task) -> Result<(ModelWeights, TrainingLog)> {
    let n = task.n_classes();
    let smallest = (0..n)
        .map(|c| ds.labels.iter().filter(|&&l| l == c).count())
        .filter(|&c| c > 0)
        .min()
        .unwrap_or(0);
    let k = cfg.eval.k.min(smallest);
    let (train_idx, val_idx): (Vec<usize>, Vec<usize>) = if k >= 2 {
        let folds = stratified_kfold(&ds.labels, k, cfg.train.rng_seed)?;
        (folds[1..].concat(), folds[0].clone())
    } else {
        ((0..ds.labels.len()).collect(), Vec::new())
    };
    let data: Vec<Sample> = ds.tensors.iter().cloned().zip(ds.labels.iter().copied()).collect();
    Ok(train(&data, &train_idx, &val_idx, &cfg.model_config(n), &cfg.train)?)
}

/// Scores with a fixed, already trained model.
struct Pretrained<'a>(&'a ModelWeights);

impl Learner<CoughTensor> for Pretrained<'_> {
    type Model = ModelWeights;

    fn fit(&self, _: &[CoughTensor], _: &[usize], _: &[usize], _: &[usize], _: u64) -> coughdetect_core::Result<ModelWeights> {
        Ok(self.0.clone())
    }
}

/// Stratified k-fold report. With `model`, every fold is scored by that
/// model instead of one trained on the other folds.
pub fn evaluate_dataset(ds: &Dataset, cfg: &AppConfig, task: Task, model: Option<&ModelWeights>) -> Result<EvalReport> {
    let n = task.n_classes();
    let k = cfg.eval.k;
    Ok(match model {
        Some(m) => {
            if m.config.n_classes != n {
                bail!("model has {} classes, task {:?} needs {n}", m.config.n_classes, task);
            }
            run_cv(&ds.tensors, &ds.labels, n, &Pretrained(m), k, cfg.eval.seed)?
        }
        None => {
            let learner = DeepCoughLearner { model: cfg.model_config(n), train: cfg.train.clone() };
            run_cv(&ds.tensors, &ds.labels, n, &learner, k, cfg.eval.seed)?
        }
    })
}

/// Short content hash identifying a weights file.
pub fn model_version(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{}", &hex[..16])
}

pub fn load_model(path: &Path) -> Result<(ModelWeights, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let model = ModelWeights::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
    Ok((model, model_version(&bytes)))
}
