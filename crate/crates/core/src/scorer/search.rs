//! Randomized hyperparameter search with stratified k-fold validation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifiers::{fit, ClassifierKind, Hyperparams, MaxFeatures, LR_ITERATIONS, NB_VARIANCE_FLOOR};
use super::preprocess::Dataset;
use super::smote::{smote, SMOTE_NEIGHBORS};
use crate::error::{Error, Result};
use crate::seed;

/// Ranges the search samples from; integer ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub kinds: Vec<ClassifierKind>,
    pub max_depth: (usize, usize),
    /// Depth range for boosted trees, which stay shallow.
    pub boosting_max_depth: (usize, usize),
    pub min_samples_split: (usize, usize),
    pub n_trees: (usize, usize),
    pub learning_rate: (f64, f64),
    pub k: (usize, usize),
    /// Sampled log-uniformly.
    pub l2: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            kinds: ClassifierKind::ALL.to_vec(),
            max_depth: (1, 20),
            boosting_max_depth: (1, 5),
            min_samples_split: (2, 10),
            n_trees: (10, 500),
            learning_rate: (0.01, 0.3),
            k: (1, 15),
            l2: (1e-4, 10.0),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let int_ok = |(lo, hi): (usize, usize), min: usize| lo >= min && lo <= hi;
        let ok = !self.kinds.is_empty()
            && int_ok(self.max_depth, 1)
            && int_ok(self.boosting_max_depth, 1)
            && int_ok(self.min_samples_split, 2)
            && int_ok(self.n_trees, 1)
            && int_ok(self.k, 1)
            && self.learning_rate.0 > 0.0
            && self.learning_rate.0 <= self.learning_rate.1
            && self.l2.0 > 0.0
            && self.l2.0 <= self.l2.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("malformed hyperparameter search space".into()))
        }
    }

    pub fn sample_for(&self, kind: ClassifierKind, rng: &mut ChaCha8Rng) -> Hyperparams {
        let mut int = |(lo, hi): (usize, usize)| rng.random_range(lo..=hi);
        match kind {
            ClassifierKind::Dt => Hyperparams::DecisionTree {
                max_depth: int(self.max_depth),
                min_samples_split: int(self.min_samples_split),
            },
            ClassifierKind::Rf | ClassifierKind::Et => {
                let n_trees = int(self.n_trees);
                let max_depth = int(self.max_depth);
                let min_samples_split = int(self.min_samples_split);
                let max_features = [MaxFeatures::Sqrt, MaxFeatures::Log2, MaxFeatures::All][rng.random_range(0..3)];
                if kind == ClassifierKind::Rf {
                    Hyperparams::RandomForest {
                        n_trees,
                        max_depth,
                        min_samples_split,
                        max_features,
                    }
                } else {
                    Hyperparams::ExtraTrees {
                        n_trees,
                        max_depth,
                        min_samples_split,
                        max_features,
                    }
                }
            }
            ClassifierKind::Gbc => {
                let n_trees = int(self.n_trees);
                let max_depth = int(self.boosting_max_depth);
                let (lo, hi) = self.learning_rate;
                Hyperparams::GradientBoosting {
                    n_trees,
                    learning_rate: if lo == hi { lo } else { rng.random_range(lo..hi) },
                    max_depth,
                }
            }
            ClassifierKind::Lr => {
                let (lo, hi) = (self.l2.0.ln(), self.l2.1.ln());
                Hyperparams::LogisticRegression {
                    l2: if lo == hi { self.l2.0 } else { rng.random_range(lo..hi).exp() },
                    iterations: LR_ITERATIONS,
                }
            }
            ClassifierKind::Knn => Hyperparams::Knn { k: int(self.k) },
            ClassifierKind::Nb => Hyperparams::NaiveBayes {
                variance_floor: NB_VARIANCE_FLOOR,
            },
        }
    }

    /// Kind drawn uniformly, then its hyperparameters.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Hyperparams {
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        self.sample_for(kind, rng)
    }
}

/// Validation index sets; each class is shuffled and dealt round-robin so
/// every fold holds near-equal shares of both labels.
pub fn stratified_folds(y: &[f64], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > y.len() {
        return Err(Error::Invalid(format!("cannot split {} records into {k} folds", y.len())));
    }
    let mut rng = seed::rng(seed);
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for class in [0.0, 1.0] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[slot % k].push(i);
            slot += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Balances a training split with SMOTE when its classes are unequal.
pub fn balance(train: &Dataset, seed: u64) -> Result<Dataset> {
    let (neg, pos) = train.class_counts();
    if neg == pos || neg.min(pos) < 2 {
        return Ok(train.clone());
    }
    smote(train, SMOTE_NEIGHBORS, seed)
}

/// Accuracy at the 0.5 cut.
pub fn accuracy(probs: &[f64], y: &[f64]) -> f64 {
    let hits = probs.iter().zip(y).filter(|(p, y)| (**p >= 0.5) == (**y == 1.0)).count();
    hits as f64 / y.len() as f64
}

/// Mean validation accuracy over the folds, with SMOTE applied to each
/// training split only.
pub fn cross_validate(params: &Hyperparams, data: &Dataset, folds: &[Vec<usize>], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (f, valid) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = (0..data.len()).filter(|i| valid.binary_search(i).is_err()).collect();
        let fold_seed = seed::derive(seed, f as u64);
        let train = balance(&data.subset(&train_idx), seed::derive_tagged(fold_seed, "smote", 0))?;
        let model = fit(params, &train, fold_seed)?;
        let probs: Vec<f64> = valid.iter().map(|&i| model.predict_proba(&data.x[i])).collect();
        let y: Vec<f64> = valid.iter().map(|&i| data.y[i]).collect();
        total += accuracy(&probs, &y);
    }
    Ok(total / folds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: Hyperparams,
    pub cv_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl SearchOutcome {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }

    /// Best trial of one classifier kind (ties → first sampled).
    pub fn best_of(&self, kind: ClassifierKind) -> Option<&Trial> {
        first_max(self.trials.iter().filter(|t| t.params.kind() == kind))
    }
}

fn first_max<'a>(trials: impl Iterator<Item = &'a Trial>) -> Option<&'a Trial> {
    trials.fold(None, |best: Option<&Trial>, t| match best {
        Some(b) if b.cv_accuracy >= t.cv_accuracy => Some(b),
        _ => Some(t),
    })
}

/// Samples `iterations` configurations and scores each by stratified k-fold
/// accuracy. The fold assignment is shared by every trial.
pub fn search_hyperparameters(
    data: &Dataset,
    space: &SearchSpace,
    iterations: usize,
    folds: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    space.validate()?;
    if iterations == 0 {
        return Err(Error::Invalid("search needs at least one iteration".into()));
    }
    let split = stratified_folds(&data.y, folds, seed::derive_tagged(seed, "folds", 0))?;
    let mut rng = seed::rng(seed::derive_tagged(seed, "space", 0));
    let configs: Vec<Hyperparams> = (0..iterations).map(|_| space.sample(&mut rng)).collect();
    use rayon::prelude::*;
    let trials = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, params)| {
            let cv_accuracy = cross_validate(&params, data, &split, seed::derive_tagged(seed, "trial", index as u64))?;
            Ok(Trial {
                index,
                params,
                cv_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = first_max(trials.iter()).map(|t| t.index).unwrap_or(0);
    Ok(SearchOutcome { trials, best })
}
