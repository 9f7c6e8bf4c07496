//! Binary classifiers producing the probability of the abnormal class.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::preprocess::Dataset;
use super::tree::{grow, positive_fraction, Columns, Criterion, GrowParams, Splitter, Tree};
use crate::error::{Error, Result};
use crate::seed;

pub const NB_VARIANCE_FLOOR: f64 = 1e-9;
pub const LR_ITERATIONS: usize = 1000;
const PROB_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassifierKind {
    Dt,
    Rf,
    Et,
    Gbc,
    Lr,
    Knn,
    Nb,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 7] = [
        ClassifierKind::Dt,
        ClassifierKind::Rf,
        ClassifierKind::Et,
        ClassifierKind::Gbc,
        ClassifierKind::Lr,
        ClassifierKind::Knn,
        ClassifierKind::Nb,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ClassifierKind::Dt => "DT",
            ClassifierKind::Rf => "RF",
            ClassifierKind::Et => "ET",
            ClassifierKind::Gbc => "GBC",
            ClassifierKind::Lr => "LR",
            ClassifierKind::Knn => "KNN",
            ClassifierKind::Nb => "NB",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            ClassifierKind::Dt => "decision tree",
            ClassifierKind::Rf => "random forest",
            ClassifierKind::Et => "extra trees",
            ClassifierKind::Gbc => "gradient boosting",
            ClassifierKind::Lr => "logistic regression",
            ClassifierKind::Knn => "k nearest neighbours",
            ClassifierKind::Nb => "gaussian naive bayes",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Invalid(format!("unknown classifier `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    Sqrt,
    Log2,
    All,
}

impl MaxFeatures {
    pub fn resolve(self, d: usize) -> Option<usize> {
        match self {
            MaxFeatures::Sqrt => Some(((d as f64).sqrt() as usize).max(1)),
            MaxFeatures::Log2 => Some(((d as f64).log2() as usize).max(1)),
            MaxFeatures::All => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Hyperparams {
    #[serde(rename = "DT")]
    DecisionTree { max_depth: usize, min_samples_split: usize },
    #[serde(rename = "RF")]
    RandomForest {
        n_trees: usize,
        max_depth: usize,
        min_samples_split: usize,
        max_features: MaxFeatures,
    },
    #[serde(rename = "ET")]
    ExtraTrees {
        n_trees: usize,
        max_depth: usize,
        min_samples_split: usize,
        max_features: MaxFeatures,
    },
    #[serde(rename = "GBC")]
    GradientBoosting {
        n_trees: usize,
        learning_rate: f64,
        max_depth: usize,
    },
    #[serde(rename = "LR")]
    LogisticRegression { l2: f64, iterations: usize },
    #[serde(rename = "KNN")]
    Knn { k: usize },
    #[serde(rename = "NB")]
    NaiveBayes { variance_floor: f64 },
}

impl Hyperparams {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            Hyperparams::DecisionTree { .. } => ClassifierKind::Dt,
            Hyperparams::RandomForest { .. } => ClassifierKind::Rf,
            Hyperparams::ExtraTrees { .. } => ClassifierKind::Et,
            Hyperparams::GradientBoosting { .. } => ClassifierKind::Gbc,
            Hyperparams::LogisticRegression { .. } => ClassifierKind::Lr,
            Hyperparams::Knn { .. } => ClassifierKind::Knn,
            Hyperparams::NaiveBayes { .. } => ClassifierKind::Nb,
        }
    }

    /// Library defaults used when no search is run.
    pub fn default_for(kind: ClassifierKind) -> Self {
        match kind {
            ClassifierKind::Dt => Hyperparams::DecisionTree {
                max_depth: 8,
                min_samples_split: 2,
            },
            ClassifierKind::Rf => Hyperparams::RandomForest {
                n_trees: 100,
                max_depth: 12,
                min_samples_split: 2,
                max_features: MaxFeatures::Sqrt,
            },
            ClassifierKind::Et => Hyperparams::ExtraTrees {
                n_trees: 100,
                max_depth: 12,
                min_samples_split: 2,
                max_features: MaxFeatures::Sqrt,
            },
            ClassifierKind::Gbc => Hyperparams::GradientBoosting {
                n_trees: 100,
                learning_rate: 0.1,
                max_depth: 3,
            },
            ClassifierKind::Lr => Hyperparams::LogisticRegression {
                l2: 0.01,
                iterations: LR_ITERATIONS,
            },
            ClassifierKind::Knn => Hyperparams::Knn { k: 5 },
            ClassifierKind::Nb => Hyperparams::NaiveBayes {
                variance_floor: NB_VARIANCE_FLOOR,
            },
        }
    }

    /// Flat name → value view.
    pub fn to_map(&self) -> serde_json::Map<String, serde_json::Value> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(mut m)) => {
                m.remove("kind");
                m
            }
            _ => serde_json::Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum FittedClassifier {
    #[serde(rename = "DT")]
    DecisionTree { tree: Tree },
    /// Also used for extra trees: prediction is the mean leaf frequency.
    #[serde(rename = "FOREST")]
    Forest { trees: Vec<Tree> },
    #[serde(rename = "GBC")]
    Boosted { init: f64, trees: Vec<Tree> },
    #[serde(rename = "LR")]
    Logistic { weights: Vec<f64>, bias: f64 },
    #[serde(rename = "KNN")]
    Knn { k: usize, x: Vec<Vec<f64>>, y: Vec<f64> },
    #[serde(rename = "NB")]
    NaiveBayes {
        log_prior: [f64; 2],
        mean: [Vec<f64>; 2],
        var: [Vec<f64>; 2],
    },
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_training(data: &Dataset) -> Result<()> {
    if data.is_empty() || data.n_features() == 0 {
        return Err(Error::Empty("training set"));
    }
    let (neg, pos) = data.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::Invalid(
            "training set holds a single class; cannot fit a binary classifier".into(),
        ));
    }
    Ok(())
}

fn tree_params(max_depth: usize, min_samples_split: usize, max_features: Option<usize>, splitter: Splitter) -> GrowParams {
    GrowParams {
        max_depth: Some(max_depth.max(1)),
        min_samples_split,
        max_features,
        criterion: Criterion::Gini,
        splitter,
    }
}

fn fit_forest(data: &Dataset, n_trees: usize, params: GrowParams, bootstrap: bool, seed: u64) -> Vec<Tree> {
    let cols = Columns::from_rows(&data.x);
    let leaf = positive_fraction(&data.y);
    let n = data.len();
    (0..n_trees.max(1))
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed::derive(seed, t as u64));
            let samples: Vec<usize> = if bootstrap {
                use rand::Rng;
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow(&cols, &data.y, samples, &params, &mut rng, &leaf)
        })
        .collect()
}

fn fit_boosted(data: &Dataset, n_trees: usize, learning_rate: f64, max_depth: usize, seed: u64) -> (f64, Vec<Tree>) {
    let cols = Columns::from_rows(&data.x);
    let n = data.len();
    let prior = (data.y.iter().sum::<f64>() / n as f64).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    let init = (prior / (1.0 - prior)).ln();
    let mut f = vec![init; n];
    let params = GrowParams {
        max_depth: Some(max_depth.max(1)),
        min_samples_split: 2,
        max_features: None,
        criterion: Criterion::Mse,
        splitter: Splitter::Best,
    };
    let mut rng = seed::rng(seed);
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees.max(1) {
        let p: Vec<f64> = f.iter().map(|&z| sigmoid(z)).collect();
        let residual: Vec<f64> = data.y.iter().zip(&p).map(|(y, p)| y - p).collect();
        let newton = |s: &[usize]| {
            let num: f64 = s.iter().map(|&i| residual[i]).sum();
            let den: f64 = s.iter().map(|&i| p[i] * (1.0 - p[i])).sum();
            if den.abs() < 1e-12 {
                0.0
            } else {
                learning_rate * num / den
            }
        };
        let tree = grow(&cols, &residual, (0..n).collect(), &params, &mut rng, &newton);
        for (i, fi) in f.iter_mut().enumerate() {
            *fi += tree.predict(&data.x[i]);
        }
        trees.push(tree);
    }
    (init, trees)
}

fn fit_logistic(data: &Dataset, l2: f64, iterations: usize) -> (Vec<f64>, f64) {
    let n = data.len() as f64;
    let d = data.n_features();
    let max_sq = data
        .x
        .iter()
        .map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (0.25 * max_sq + l2);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, y) in data.x.iter().zip(&data.y) {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = sigmoid(z) - y;
            gb += e;
            for (g, a) in gw.iter_mut().zip(x) {
                *g += e * a;
            }
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= step * (g / n + l2 * *wj);
        }
        b -= step * gb / n;
    }
    (w, b)
}

fn fit_naive_bayes(data: &Dataset, floor: f64) -> FittedClassifier {
    let d = data.n_features();
    let mut log_prior = [0.0; 2];
    let mut mean = [vec![0.0; d], vec![0.0; d]];
    let mut var = [vec![0.0; d], vec![0.0; d]];
    for c in 0..2 {
        let rows: Vec<&Vec<f64>> = data
            .x
            .iter()
            .zip(&data.y)
            .filter(|(_, y)| **y == c as f64)
            .map(|(x, _)| x)
            .collect();
        let nc = rows.len() as f64;
        log_prior[c] = (nc / data.len() as f64).ln();
        for j in 0..d {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / nc;
            let v = rows.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / nc;
            mean[c][j] = m;
            var[c][j] = v.max(floor);
        }
    }
    FittedClassifier::NaiveBayes { log_prior, mean, var }
}

/// Fits the classifier described by `params` on `data`.
pub fn fit(params: &Hyperparams, data: &Dataset, seed: u64) -> Result<FittedClassifier> {
    check_training(data)?;
    let d = data.n_features();
    Ok(match *params {
        Hyperparams::DecisionTree {
            max_depth,
            min_samples_split,
        } => {
            let cols = Columns::from_rows(&data.x);
            let mut rng = seed::rng(seed);
            let p = tree_params(max_depth, min_samples_split, None, Splitter::Best);
            let tree = grow(&cols, &data.y, (0..data.len()).collect(), &p, &mut rng, &positive_fraction(&data.y));
            FittedClassifier::DecisionTree { tree }
        }
        Hyperparams::RandomForest {
            n_trees,
            max_depth,
            min_samples_split,
            max_features,
        } => {
            let p = tree_params(max_depth, min_samples_split, max_features.resolve(d), Splitter::Best);
            FittedClassifier::Forest {
                trees: fit_forest(data, n_trees, p, true, seed),
            }
        }
        Hyperparams::ExtraTrees {
            n_trees,
            max_depth,
            min_samples_split,
            max_features,
        } => {
            let p = tree_params(max_depth, min_samples_split, max_features.resolve(d), Splitter::Random);
            FittedClassifier::Forest {
                trees: fit_forest(data, n_trees, p, false, seed),
            }
        }
        Hyperparams::GradientBoosting {
            n_trees,
            learning_rate,
            max_depth,
        } => {
            let (init, trees) = fit_boosted(data, n_trees, learning_rate, max_depth, seed);
            FittedClassifier::Boosted { init, trees }
        }
        Hyperparams::LogisticRegression { l2, iterations } => {
            let (weights, bias) = fit_logistic(data, l2, iterations);
            FittedClassifier::Logistic { weights, bias }
        }
        Hyperparams::Knn { k } => FittedClassifier::Knn {
            k: k.clamp(1, data.len()),
            x: data.x.clone(),
            y: data.y.clone(),
        },
        Hyperparams::NaiveBayes { variance_floor } => fit_naive_bayes(data, variance_floor),
    })
}

impl FittedClassifier {
    pub fn n_features(&self) -> Option<usize> {
        match self {
            FittedClassifier::Logistic { weights, .. } => Some(weights.len()),
            FittedClassifier::Knn { x, .. } => x.first().map(Vec::len),
            FittedClassifier::NaiveBayes { mean, .. } => Some(mean[0].len()),
            _ => None,
        }
    }

    /// Probability of the abnormal class, in `[0, 1]`.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let p = match self {
            FittedClassifier::DecisionTree { tree } => tree.predict(x),
            FittedClassifier::Forest { trees } => {
                trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64
            }
            FittedClassifier::Boosted { init, trees } => {
                sigmoid(init + trees.iter().map(|t| t.predict(x)).sum::<f64>())
            }
            FittedClassifier::Logistic { weights, bias } => {
                sigmoid(bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            }
            FittedClassifier::Knn { k, x: train, y } => {
                let mut dist: Vec<(f64, usize)> = train
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
                    .collect();
                dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                dist[..*k].iter().map(|&(_, i)| y[i]).sum::<f64>() / *k as f64
            }
            FittedClassifier::NaiveBayes { log_prior, mean, var } => {
                let ll = |c: usize| {
                    log_prior[c]
                        + x.iter()
                            .enumerate()
                            .map(|(j, v)| {
                                let s = var[c][j];
                                -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (v - mean[c][j]).powi(2) / s)
                            })
                            .sum::<f64>()
                };
                sigmoid(ll(1) - ll(0))
            }
        };
        p.clamp(0.0, 1.0)
    }

    /// Normalized per-feature importance; `None` for kinds without one.
    pub fn importances(&self, n_features: usize) -> Option<Vec<f64>> {
        let mean_of = |trees: &[Tree]| {
            let mut acc = vec![0.0; n_features];
            for t in trees {
                for (a, v) in acc.iter_mut().zip(t.importances(n_features)) {
                    *a += v;
                }
            }
            normalized(acc)
        };
        match self {
            FittedClassifier::DecisionTree { tree } => Some(tree.importances(n_features)),
            FittedClassifier::Forest { trees } | FittedClassifier::Boosted { trees, .. } => Some(mean_of(trees)),
            FittedClassifier::Logistic { weights, .. } => Some(normalized(weights.iter().map(|w| w.abs()).collect())),
            FittedClassifier::Knn { .. } | FittedClassifier::NaiveBayes { .. } => None,
        }
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    v
}
