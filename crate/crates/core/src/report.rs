//! Evaluation under the standard (0.5) and zero-false-negative thresholds,
//! score histograms, feature importance and report rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recon::Label;
use crate::scorer::{ClassifierKind, Hyperparams, ScoreFit, ScoreModel};

pub const STD_THRESHOLD: f64 = 0.5;
pub const HISTOGRAM_BINS: usize = 20;
pub const TOP_FEATURES: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// Counts under the rule `prob >= threshold` ⇒ abnormal.
    pub fn at(probs: &[f64], labels: &[Label], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (p, l) in probs.iter().zip(labels) {
            match (*p >= threshold, l.is_abnormal()) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Ratio in percent; 0 when the denominator is empty.
    fn pct(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::pct(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        Self::pct(self.tp, self.tp + self.fp)
    }

    pub fn fpr(&self) -> f64 {
        Self::pct(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> f64 {
        Self::pct(self.fn_, self.fn_ + self.tp)
    }
}

/// One classifier under both regimes; rates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub accuracy_std: f64,
    pub accuracy_zfn: f64,
    pub precision_std: f64,
    pub precision_zfn: f64,
    pub fpr_std: f64,
    pub fpr_zfn: f64,
    pub fnr_std: f64,
    pub fnr_zfn: f64,
    pub zfn_threshold: f64,
    pub confusion_std: Confusion,
    pub confusion_zfn: Confusion,
}

pub fn evaluate(probs: &[f64], labels: &[Label], zfn_threshold: f64) -> Result<EvalRow> {
    if probs.is_empty() {
        return Err(Error::Empty("probabilities to evaluate"));
    }
    if probs.len() != labels.len() {
        return Err(Error::dims(probs.len(), labels.len()));
    }
    let s = Confusion::at(probs, labels, STD_THRESHOLD);
    let z = Confusion::at(probs, labels, zfn_threshold);
    Ok(EvalRow {
        accuracy_std: s.accuracy(),
        accuracy_zfn: z.accuracy(),
        precision_std: s.precision(),
        precision_zfn: z.precision(),
        fpr_std: s.fpr(),
        fpr_zfn: z.fpr(),
        fnr_std: s.fnr(),
        fnr_zfn: z.fnr(),
        zfn_threshold,
        confusion_std: s,
        confusion_zfn: z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

pub fn score_histogram(probs: &[f64], labels: &[Label]) -> Histogram {
    let mut normal = vec![0; HISTOGRAM_BINS];
    let mut abnormal = vec![0; HISTOGRAM_BINS];
    for (p, l) in probs.iter().zip(labels) {
        let bin = ((p.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        if l.is_abnormal() {
            abnormal[bin] += 1;
        } else {
            normal[bin] += 1;
        }
    }
    Histogram {
        edges: (0..=HISTOGRAM_BINS).map(|i| i as f64 / HISTOGRAM_BINS as f64).collect(),
        normal,
        abnormal,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub name: String,
    pub weight: f64,
}

/// Kept features ranked by weight (descending, ties by name). Classifiers
/// without a notion of importance yield an empty list and a notice.
pub fn feature_importance(model: &ScoreModel) -> (Vec<Importance>, Option<String>) {
    let names = &model.preproc.kept_features;
    match model.fitted.importances(names.len()) {
        Some(weights) => {
            let mut out: Vec<Importance> = names
                .iter()
                .zip(weights)
                .map(|(n, w)| Importance {
                    name: n.clone(),
                    weight: w,
                })
                .collect();
            out.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.name.cmp(&b.name)));
            (out, None)
        }
        None => (
            Vec::new(),
            Some(format!(
                "{} has no feature importance; ranking omitted",
                model.classifier_kind.long_name()
            )),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub classifier: ClassifierKind,
    pub hyperparameters: Hyperparams,
    /// Mean search-fold accuracy, when the row comes from a fit.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cv_accuracy: Option<f64>,
    #[serde(flatten)]
    pub row: EvalRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocSummary {
    pub input_features: usize,
    pub kept_features: usize,
    pub dropped_missing: usize,
    pub dropped_constant: usize,
    pub dropped_correlated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub record_count: usize,
    pub normal_count: usize,
    pub abnormal_count: usize,
    pub selected_classifier: ClassifierKind,
    /// Row of the selected classifier.
    #[serde(flatten)]
    pub selected: EvalRow,
    pub classifiers: Vec<ClassifierReport>,
    pub histogram: Histogram,
    pub feature_importance: Vec<Importance>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub importance_notice: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub preprocessing: Option<PreprocSummary>,
}

fn counts(labels: &[Label]) -> (usize, usize) {
    let ab = labels.iter().filter(|l| l.is_abnormal()).count();
    (labels.len() - ab, ab)
}

fn preproc_summary(model: &ScoreModel) -> PreprocSummary {
    let p = &model.preproc;
    PreprocSummary {
        input_features: p.input_schema.len(),
        kept_features: p.kept_features.len(),
        dropped_missing: p.dropped_missing.len(),
        dropped_constant: p.dropped_constant.len(),
        dropped_correlated: p.dropped_correlated.len(),
    }
}

/// Report of a full fit: one row per evaluated classifier kind from its
/// leave-one-out probabilities, the selected model's row and histograms.
pub fn build_report(fit: &ScoreFit) -> Result<EvalReport> {
    let model = &fit.model;
    let selected = evaluate(&fit.calibration, &fit.labels, model.zfn_threshold)?;
    let classifiers = fit
        .per_kind
        .iter()
        .map(|k| {
            Ok(ClassifierReport {
                classifier: k.kind,
                hyperparameters: k.params.clone(),
                cv_accuracy: Some(k.cv_accuracy),
                row: evaluate(&k.oof, &fit.labels, k.zfn_threshold)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (importance, notice) = feature_importance(model);
    let (normal_count, abnormal_count) = counts(&fit.labels);
    Ok(EvalReport {
        record_count: fit.labels.len(),
        normal_count,
        abnormal_count,
        selected_classifier: model.classifier_kind,
        selected,
        classifiers,
        histogram: score_histogram(&fit.calibration, &fit.labels),
        feature_importance: importance.into_iter().take(TOP_FEATURES).collect(),
        importance_notice: notice,
        preprocessing: Some(preproc_summary(model)),
    })
}

/// Report of a fitted model applied to a (possibly new) labelled table.
pub fn report_for_scores(model: &ScoreModel, probs: &[f64], labels: &[Label]) -> Result<EvalReport> {
    let row = evaluate(probs, labels, model.zfn_threshold)?;
    let (importance, notice) = feature_importance(model);
    let (normal_count, abnormal_count) = counts(labels);
    Ok(EvalReport {
        record_count: labels.len(),
        normal_count,
        abnormal_count,
        selected_classifier: model.classifier_kind,
        classifiers: vec![ClassifierReport {
            classifier: model.classifier_kind,
            hyperparameters: model.hyperparameters.clone(),
            cv_accuracy: None,
            row: row.clone(),
        }],
        selected: row,
        histogram: score_histogram(probs, labels),
        feature_importance: importance.into_iter().take(TOP_FEATURES).collect(),
        importance_notice: notice,
        preprocessing: Some(preproc_summary(model)),
    })
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

pub fn render_markdown(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Anomaly scoring report\n");
    let _ = writeln!(
        s,
        "{} records ({} normal, {} abnormal). Selected classifier: **{}** ({}), ZFN threshold {:.6}.\n",
        r.record_count,
        r.normal_count,
        r.abnormal_count,
        r.selected_classifier,
        r.selected_classifier.long_name(),
        r.selected.zfn_threshold
    );
    let _ = writeln!(s, "## Classification metrics (%)\n");
    let _ = writeln!(
        s,
        "| Classifier | Accuracy STD | Accuracy ZFN | Precision STD | Precision ZFN | FPR STD | FPR ZFN | FNR STD | FNR ZFN | ZFN threshold |"
    );
    let _ = writeln!(s, "|---|---:|---:|---:|---:|---:|---:|---:|---:|---:|");
    for c in &r.classifiers {
        let w = &c.row;
        let mark = if c.classifier == r.selected_classifier { " *" } else { "" };
        let _ = writeln!(
            s,
            "| {}{} | {} | {} | {} | {} | {} | {} | {} | {} | {:.6} |",
            c.classifier,
            mark,
            f2(w.accuracy_std),
            f2(w.accuracy_zfn),
            f2(w.precision_std),
            f2(w.precision_zfn),
            f2(w.fpr_std),
            f2(w.fpr_zfn),
            f2(w.fnr_std),
            f2(w.fnr_zfn),
            w.zfn_threshold
        );
    }
    let c = &r.selected.confusion_zfn;
    let d = &r.selected.confusion_std;
    let _ = writeln!(s, "\nSelected model confusion counts:\n");
    let _ = writeln!(s, "| Regime | TP | FP | TN | FN |\n|---|---:|---:|---:|---:|");
    let _ = writeln!(s, "| STD | {} | {} | {} | {} |", d.tp, d.fp, d.tn, d.fn_);
    let _ = writeln!(s, "| ZFN | {} | {} | {} | {} |", c.tp, c.fp, c.tn, c.fn_);
    let _ = writeln!(s, "\n## Anomaly score distribution\n");
    let _ = writeln!(s, "| Score bin | Normal | Abnormal |\n|---|---:|---:|");
    let h = &r.histogram;
    for i in 0..h.normal.len() {
        let _ = writeln!(s, "| [{:.2}, {:.2}) | {} | {} |", h.edges[i], h.edges[i + 1], h.normal[i], h.abnormal[i]);
    }
    let _ = writeln!(s, "\n## Most influential features\n");
    if let Some(n) = &r.importance_notice {
        let _ = writeln!(s, "{n}.");
    } else {
        let _ = writeln!(s, "| Rank | Feature | Weight |\n|---:|---|---:|");
        for (i, imp) in r.feature_importance.iter().enumerate() {
            let _ = writeln!(s, "| {} | `{}` | {:.4} |", i + 1, imp.name, imp.weight);
        }
    }
    s
}

/// Side-by-side bar chart of the two score histograms.
pub fn render_svg(h: &Histogram) -> String {
    let (w, ht, pad) = (640.0, 320.0, 40.0);
    let max = h.normal.iter().chain(&h.abnormal).copied().max().unwrap_or(0).max(1) as f64;
    let bins = h.normal.len() as f64;
    let bw = (w - 2.0 * pad) / bins;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{ht}" viewBox="0 0 {w} {ht}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, (n, a)) in h.normal.iter().zip(&h.abnormal).enumerate() {
        let x = pad + i as f64 * bw;
        for (k, (count, colour)) in [(*n, "#4477aa"), (*a, "#cc3311")].into_iter().enumerate() {
            let bh = (ht - 2.0 * pad) * count as f64 / max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{colour}" fill-opacity="0.8"/>"#,
                x + k as f64 * bw / 2.0,
                ht - pad - bh,
                bw / 2.0,
                bh
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        ht - pad,
        w - pad
    );
    for t in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{t}</text>"#,
            pad + t * (w - 2.0 * pad),
            ht - pad / 2.0
        );
    }
    let _ = writeln!(s, r##"<text x="{pad}" y="20" font-size="12" fill="#4477aa">normal</text>"##);
    let _ = writeln!(s, r##"<text x="{}" y="20" font-size="12" fill="#cc3311">abnormal</text>"##, pad + 70.0);
    s.push_str("</svg>\n");
    s
}

pub fn write_json(r: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serde_json::to_string_pretty(r)?).map_err(|e| Error::io(path, e))
}
