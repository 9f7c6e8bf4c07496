//! Binary decision trees stored as flat node arrays.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Sample-weighted impurity decrease of this split.
        gain: f64,
    },
    Leaf { value: f64, samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { value, .. } => return *value,
            }
        }
    }

    /// Leaf index reached by `x`.
    pub fn apply(&self, x: &[f64]) -> usize {
        let mut i = 0;
        while let Node::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } = &self.nodes[i]
        {
            i = if x[*feature] <= *threshold { *left } else { *right };
        }
        i
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }

    /// Impurity decrease per feature, normalized to sum 1 when any split
    /// exists.
    pub fn importances(&self, n_features: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_features];
        for node in &self.nodes {
            if let Node::Split { feature, gain, .. } = node {
                out[*feature] += gain;
            }
        }
        let total: f64 = out.iter().sum();
        if total > 0.0 {
            out.iter_mut().for_each(|v| *v /= total);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// Targets are 0/1 labels.
    Gini,
    /// Squared error on real targets.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Splitter {
    /// Best threshold among midpoints of sorted distinct values.
    Best,
    /// One uniform threshold per feature between the node min and max.
    Random,
}

#[derive(Debug, Clone, Copy)]
pub struct GrowParams {
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features evaluated per node; all when `None`.
    pub max_features: Option<usize>,
    pub criterion: Criterion,
    pub splitter: Splitter,
}

/// Column-major training data with each column's ascending row order.
pub struct Columns {
    pub cols: Vec<Vec<f64>>,
    pub order: Vec<Vec<u32>>,
    pub n: usize,
}

impl Columns {
    pub fn from_rows(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let cols: Vec<Vec<f64>> = (0..d).map(|j| x.iter().map(|r| r[j]).collect()).collect();
        let order = cols
            .iter()
            .map(|c| {
                let mut o: Vec<u32> = (0..x.len() as u32).collect();
                o.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]));
                o
            })
            .collect();
        Self { cols, order, n: x.len() }
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }
}

#[derive(Clone, Copy, Default)]
struct Stats {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Stats {
    fn add(&mut self, y: f64) {
        self.n += 1.0;
        self.sum += y;
        self.sum_sq += y * y;
    }

    fn sub(&mut self, y: f64) {
        self.n -= 1.0;
        self.sum -= y;
        self.sum_sq -= y * y;
    }

    /// Node impurity times sample count.
    fn weighted_impurity(&self, criterion: Criterion) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        match criterion {
            Criterion::Gini => {
                let p = self.sum / self.n;
                self.n * 2.0 * p * (1.0 - p)
            }
            Criterion::Mse => (self.sum_sq - self.sum * self.sum / self.n).max(0.0),
        }
    }
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Grows a tree on the rows in `samples` (repeats allowed); each leaf value
/// comes from `leaf_value` applied to the samples that reached it.
pub fn grow<F>(
    data: &Columns,
    y: &[f64],
    samples: Vec<usize>,
    params: &GrowParams,
    rng: &mut ChaCha8Rng,
    leaf_value: &F,
) -> Tree
where
    F: Fn(&[usize]) -> f64,
{
    let mut nodes = Vec::new();
    let total = samples.len() as f64;
    let mut builder = Builder {
        data,
        y,
        params,
        total,
        scratch: Vec::with_capacity(samples.len()),
        count: vec![0; data.n],
    };
    builder.node(&mut nodes, samples, 0, rng, leaf_value);
    Tree { nodes }
}

struct Builder<'a> {
    data: &'a Columns,
    y: &'a [f64],
    params: &'a GrowParams,
    total: f64,
    scratch: Vec<(f64, f64)>,
    /// Multiplicity of each row in the node being split.
    count: Vec<u32>,
}

impl Builder<'_> {
    fn node<F: Fn(&[usize]) -> f64>(
        &mut self,
        nodes: &mut Vec<Node>,
        samples: Vec<usize>,
        depth: usize,
        rng: &mut ChaCha8Rng,
        leaf_value: &F,
    ) -> usize {
        let id = nodes.len();
        nodes.push(Node::Leaf {
            value: leaf_value(&samples),
            samples: samples.len(),
        });
        let mut stats = Stats::default();
        samples.iter().for_each(|&i| stats.add(self.y[i]));
        let impurity = stats.weighted_impurity(self.params.criterion);
        let stop = self.params.max_depth.is_some_and(|d| depth >= d)
            || samples.len() < self.params.min_samples_split.max(2)
            || impurity <= 1e-12 * stats.n.max(1.0);
        if stop {
            return id;
        }
        let Some(best) = self.best_split(&samples, &stats, impurity, rng) else {
            return id;
        };
        let col = &self.data.cols[best.feature];
        let (left, right): (Vec<usize>, Vec<usize>) =
            samples.iter().partition(|&&i| col[i] <= best.threshold);
        let l = self.node(nodes, left, depth + 1, rng, leaf_value);
        let r = self.node(nodes, right, depth + 1, rng, leaf_value);
        nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
            gain: best.gain / self.total,
        };
        id
    }

    fn best_split(
        &mut self,
        samples: &[usize],
        stats: &Stats,
        impurity: f64,
        rng: &mut ChaCha8Rng,
    ) -> Option<Candidate> {
        let d = self.data.n_features();
        let mut order: Vec<usize> = (0..d).collect();
        let budget = match self.params.max_features {
            Some(k) if k < d => {
                order.shuffle(rng);
                k.max(1)
            }
            _ => d,
        };
        let presorted = self.params.splitter == Splitter::Best && use_presorted(samples.len(), self.data.n);
        if presorted {
            samples.iter().for_each(|&i| self.count[i] += 1);
        }
        let mut best: Option<Candidate> = None;
        let mut visited = 0;
        for &f in &order {
            if visited == budget {
                break;
            }
            let col = &self.data.cols[f];
            let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(col[i]), hi.max(col[i]))
            });
            if lo == hi {
                continue;
            }
            visited += 1;
            let found = match self.params.splitter {
                Splitter::Best if presorted => self.scan_presorted(f, stats, impurity),
                Splitter::Best => self.scan_feature(f, samples, stats, impurity),
                Splitter::Random => {
                    let t = rng.random_range(lo..hi);
                    self.evaluate_threshold(f, t, samples, impurity)
                }
            };
            if let Some(c) = found {
                if best.as_ref().is_none_or(|b| c.gain > b.gain) {
                    best = Some(c);
                }
            }
        }
        if presorted {
            samples.iter().for_each(|&i| self.count[i] = 0);
        }
        best
    }

    /// Same candidates as `scan_feature`, walking the column's global order
    /// and skipping rows outside the node.
    fn scan_presorted(&self, f: usize, stats: &Stats, impurity: f64) -> Option<Candidate> {
        let col = &self.data.cols[f];
        let criterion = self.params.criterion;
        let mut left = Stats::default();
        let mut right = *stats;
        let mut best: Option<Candidate> = None;
        let mut last = f64::NAN;
        for &r in &self.data.order[f] {
            let r = r as usize;
            let c = self.count[r];
            if c == 0 {
                continue;
            }
            let v = col[r];
            if left.n > 0.0 && v != last {
                let gain = impurity - left.weighted_impurity(criterion) - right.weighted_impurity(criterion);
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        feature: f,
                        threshold: midpoint(last, v),
                        gain,
                    });
                }
            }
            for _ in 0..c {
                left.add(self.y[r]);
                right.sub(self.y[r]);
            }
            last = v;
        }
        best
    }

    fn scan_feature(&mut self, f: usize, samples: &[usize], stats: &Stats, impurity: f64) -> Option<Candidate> {
        let col = &self.data.cols[f];
        self.scratch.clear();
        self.scratch.extend(samples.iter().map(|&i| (col[i], self.y[i])));
        self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let criterion = self.params.criterion;
        let mut left = Stats::default();
        let mut right = *stats;
        let mut best: Option<Candidate> = None;
        for k in 0..self.scratch.len() - 1 {
            let (v, y) = self.scratch[k];
            left.add(y);
            right.sub(y);
            let next = self.scratch[k + 1].0;
            if next == v {
                continue;
            }
            let gain = impurity - left.weighted_impurity(criterion) - right.weighted_impurity(criterion);
            if best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Candidate {
                    feature: f,
                    threshold: midpoint(v, next),
                    gain,
                });
            }
        }
        best
    }

    fn evaluate_threshold(&self, f: usize, t: f64, samples: &[usize], impurity: f64) -> Option<Candidate> {
        let col = &self.data.cols[f];
        let mut left = Stats::default();
        let mut right = Stats::default();
        for &i in samples {
            if col[i] <= t {
                left.add(self.y[i]);
            } else {
                right.add(self.y[i]);
            }
        }
        if left.n == 0.0 || right.n == 0.0 {
            return None;
        }
        let c = self.params.criterion;
        Some(Candidate {
            feature: f,
            threshold: t,
            gain: impurity - left.weighted_impurity(c) - right.weighted_impurity(c),
        })
    }
}

/// Sorting the node beats walking every row once the node is small.
fn use_presorted(node: usize, total: usize) -> bool {
    let log = usize::BITS - node.leading_zeros();
    node * log as usize >= total
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let t = lo + (hi - lo) / 2.0;
    if t >= hi {
        lo
    } else {
        t
    }
}

/// Fraction of positive targets among `samples`.
pub fn positive_fraction(y: &[f64]) -> impl Fn(&[usize]) -> f64 + '_ {
    move |s: &[usize]| {
        if s.is_empty() {
            return 0.0;
        }
        s.iter().map(|&i| y[i]).sum::<f64>() / s.len() as f64
    }
}
