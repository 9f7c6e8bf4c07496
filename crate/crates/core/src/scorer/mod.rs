//! Composite anomaly score: preprocessing, oversampling, classifier search,
//! leave-one-out evaluation and zero-false-negative threshold calibration.

pub mod classifiers;
pub mod preprocess;
pub mod search;
pub mod smote;
pub mod tree;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use classifiers::{fit, ClassifierKind, FittedClassifier, Hyperparams, MaxFeatures};
pub use preprocess::{preprocess_fit, Dataset, PreprocState};
pub use search::{search_hyperparameters, stratified_folds, SearchOutcome, SearchSpace, Trial};
pub use smote::{smote, smote_samples};

use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, MetricTable};
use crate::recon::Label;
use crate::seed;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Which probabilities set the ZFN threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    /// Leave-one-out probabilities of the abnormal records.
    #[default]
    OutOfFold,
    /// In-sample probabilities of the final refit model.
    Refit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub iterations: usize,
    pub folds: usize,
    pub space: SearchSpace,
    pub threshold_source: ThresholdSource,
    /// Re-run the search inside every leave-one-out fold of the selected kind.
    pub nested_search: bool,
    /// Leave-one-out evaluation of the best configuration of every kind.
    pub evaluate_all_kinds: bool,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            folds: 5,
            space: SearchSpace::default(),
            threshold_source: ThresholdSource::OutOfFold,
            nested_search: false,
            evaluate_all_kinds: true,
        }
    }
}

/// Lowest abnormal probability, so that the rule `score >= threshold` flags
/// every abnormal record of the calibration set.
pub fn calibrate_zfn(probs: &[f64], labels: &[Label]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::dims(probs.len(), labels.len()));
    }
    probs
        .iter()
        .zip(labels)
        .filter(|(_, l)| l.is_abnormal())
        .map(|(p, _)| *p)
        .min_by(f64::total_cmp)
        .ok_or(Error::Empty("abnormal records for threshold calibration"))
}

/// Out-of-fold abnormal probability of every record, training on all others.
pub fn fit_predict_loocv(data: &Dataset, params: &Hyperparams, seed: u64) -> Result<Vec<f64>> {
    loocv_with(data, seed, |train, fold_seed| fit(params, train, fold_seed))
}

fn loocv_with<F>(data: &Dataset, seed: u64, fit_fold: F) -> Result<Vec<f64>>
where
    F: Fn(&Dataset, u64) -> Result<FittedClassifier> + Sync,
{
    if data.len() < 3 {
        return Err(Error::Invalid("leave-one-out needs at least 3 records".into()));
    }
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let idx: Vec<usize> = (0..data.len()).filter(|&j| j != i).collect();
            let fold_seed = seed::derive(seed, i as u64);
            let train = search::balance(&data.subset(&idx), seed::derive_tagged(fold_seed, "smote", 0))?;
            let model = fit_fold(&train, fold_seed).map_err(|e| {
                Error::Invalid(format!("leave-one-out fold {i}: {e}"))
            })?;
            Ok(model.predict_proba(&data.x[i]))
        })
        .collect()
}

pub fn schema_hash(schema: &[String]) -> String {
    let mut h = Sha256::new();
    for name in schema {
        h.update(name.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub format_version: u32,
    pub preproc: PreprocState,
    pub classifier_kind: ClassifierKind,
    pub hyperparameters: Hyperparams,
    pub fitted: FittedClassifier,
    pub zfn_threshold: f64,
    pub seed: u64,
    pub schema_hash: String,
}

impl ScoreModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ScoreModel = serde_json::from_str(&text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", model.format_version)));
        }
        if model.schema_hash != schema_hash(&model.preproc.input_schema) {
            return Err(Error::Format("model schema hash does not match its schema".into()));
        }
        Ok(model)
    }

    pub fn is_flagged(&self, score: f64) -> bool {
        score >= self.zfn_threshold
    }

    pub fn score_table(&self, table: &MetricTable) -> Result<Vec<f64>> {
        table.records().iter().map(|r| composite_score(self, r)).collect()
    }
}

/// Classifier probability of the abnormal class for one record.
pub fn composite_score(model: &ScoreModel, record: &MetricRecord) -> Result<f64> {
    let x = model.preproc.transform_values(record)?;
    Ok(model.fitted.predict_proba(&x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindEvaluation {
    pub kind: ClassifierKind,
    pub params: Hyperparams,
    pub cv_accuracy: f64,
    pub oof: Vec<f64>,
    pub zfn_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreFit {
    pub model: ScoreModel,
    pub search: SearchOutcome,
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    /// Leave-one-out probabilities of the selected configuration.
    pub oof: Vec<f64>,
    /// Probabilities the ZFN threshold was calibrated on.
    pub calibration: Vec<f64>,
    pub per_kind: Vec<KindEvaluation>,
}

/// Preprocesses the table, searches hyperparameters, evaluates by
/// leave-one-out, calibrates the ZFN threshold and refits on every record.
pub fn fit_scorer(table: &MetricTable, cfg: &ScorerConfig, seed: u64) -> Result<ScoreFit> {
    let (preproc, data) = preprocess_fit(table)?;
    let labels = table.labels();
    let search = search_hyperparameters(&data, &cfg.space, cfg.iterations, cfg.folds, seed::derive_tagged(seed, "search", 0))?;
    let selected = search.best_trial().clone();
    let loocv_seed = seed::derive_tagged(seed, "loocv", 0);

    let mut kinds: Vec<ClassifierKind> = if cfg.evaluate_all_kinds {
        cfg.space.kinds.clone()
    } else {
        vec![selected.params.kind()]
    };
    kinds.sort();
    kinds.dedup();
    let mut per_kind = Vec::new();
    for kind in kinds {
        let Some(trial) = search.best_of(kind) else { continue };
        let oof = fit_predict_loocv(&data, &trial.params, loocv_seed)?;
        per_kind.push(KindEvaluation {
            kind,
            params: trial.params.clone(),
            cv_accuracy: trial.cv_accuracy,
            zfn_threshold: calibrate_zfn(&oof, &labels)?,
            oof,
        });
    }

    let oof = if cfg.nested_search {
        let nested = |train: &Dataset, fold_seed: u64| {
            let inner = search_hyperparameters(train, &cfg.space, cfg.iterations, cfg.folds, fold_seed)?;
            fit(&inner.best_trial().params, train, fold_seed)
        };
        loocv_with(&data, loocv_seed, nested)?
    } else {
        match per_kind.iter().find(|k| k.params == selected.params) {
            Some(k) => k.oof.clone(),
            None => fit_predict_loocv(&data, &selected.params, loocv_seed)?,
        }
    };

    let final_seed = seed::derive_tagged(seed, "final", 0);
    let train = search::balance(&data, seed::derive_tagged(final_seed, "smote", 0))?;
    let fitted = fit(&selected.params, &train, final_seed)?;
    let calibration = match cfg.threshold_source {
        ThresholdSource::OutOfFold => oof.clone(),
        ThresholdSource::Refit => data.x.iter().map(|x| fitted.predict_proba(x)).collect(),
    };
    let zfn_threshold = calibrate_zfn(&calibration, &labels)?;
    let model = ScoreModel {
        format_version: MODEL_FORMAT_VERSION,
        schema_hash: schema_hash(&preproc.input_schema),
        preproc,
        classifier_kind: selected.params.kind(),
        hyperparameters: selected.params.clone(),
        fitted,
        zfn_threshold,
        seed,
    };
    Ok(ScoreFit {
        model,
        search,
        ids: table.records().iter().map(|r| r.image_id.clone()).collect(),
        labels,
        oof,
        calibration,
        per_kind,
    })
}
