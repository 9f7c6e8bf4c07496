//! Feature pruning and min-max scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, MetricTable};
use crate::recon::Label;

/// Absolute Pearson correlation above which the later feature is dropped.
pub const CORRELATION_LIMIT: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedDrop {
    pub name: String,
    pub kept_partner: String,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocState {
    pub input_schema: Vec<String>,
    pub kept_features: Vec<String>,
    /// Column of each kept feature in `input_schema`.
    pub kept_columns: Vec<usize>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub dropped_missing: Vec<String>,
    pub dropped_constant: Vec<String>,
    pub dropped_correlated: Vec<CorrelatedDrop>,
}

/// Scaled design matrix with labels (`1.0` = abnormal).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::dims(x.len(), y.len()));
        }
        let d = x.first().map_or(0, Vec::len);
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("ragged design matrix".into()));
        }
        Ok(Self { x, y })
    }

    pub fn from_labels(x: Vec<Vec<f64>>, labels: &[Label]) -> Result<Self> {
        Self::new(x, labels.iter().map(|l| l.code() as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.y.iter().filter(|&&v| v == 1.0).count();
        (self.len() - pos, pos)
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Drops missing, constant and highly correlated features, then records the
/// min-max scaling of the survivors.
pub fn preprocess_fit(table: &MetricTable) -> Result<(PreprocState, Dataset)> {
    if table.len() < 2 {
        return Err(Error::Invalid("preprocessing needs at least 2 records".into()));
    }
    let labels = table.labels();
    if !labels.contains(&Label::Normal) || !labels.contains(&Label::Abnormal) {
        return Err(Error::Invalid("preprocessing needs both labels present".into()));
    }
    let schema = table.schema();
    let mut dropped_missing = Vec::new();
    let mut dropped_constant = Vec::new();
    let mut dropped_correlated = Vec::new();
    let mut kept: Vec<(usize, Vec<f64>)> = Vec::new();
    for (col, name) in schema.iter().enumerate() {
        let column = table.column(col);
        let Some(values) = column.into_iter().collect::<Option<Vec<f64>>>() else {
            dropped_missing.push(name.clone());
            continue;
        };
        if values.iter().all(|&v| v == values[0]) {
            dropped_constant.push(name.clone());
            continue;
        }
        let partner = kept.iter().find_map(|(kc, kv)| {
            let r = pearson(kv, &values);
            (r.abs() > CORRELATION_LIMIT).then_some((*kc, r))
        });
        match partner {
            Some((kc, r)) => dropped_correlated.push(CorrelatedDrop {
                name: name.clone(),
                kept_partner: schema[kc].clone(),
                r,
            }),
            None => kept.push((col, values)),
        }
    }
    if kept.is_empty() {
        return Err(Error::Invalid("no feature survives preprocessing".into()));
    }
    let min: Vec<f64> = kept.iter().map(|(_, v)| v.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let max: Vec<f64> = kept.iter().map(|(_, v)| v.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let state = PreprocState {
        input_schema: schema.to_vec(),
        kept_features: kept.iter().map(|(c, _)| schema[*c].clone()).collect(),
        kept_columns: kept.iter().map(|(c, _)| *c).collect(),
        min,
        max,
        dropped_missing,
        dropped_constant,
        dropped_correlated,
    };
    let x = (0..table.len())
        .map(|row| state.transform_values(&table.records()[row]))
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::from_labels(x, &labels)?;
    Ok((state, data))
}

impl PreprocState {
    pub fn scale(&self, k: usize, v: f64) -> f64 {
        ((v - self.min[k]) / (self.max[k] - self.min[k])).clamp(0.0, 1.0)
    }

    /// Scaled kept features of one record; values outside the fitted range
    /// are clamped to `[0, 1]`.
    pub fn transform_values(&self, record: &MetricRecord) -> Result<Vec<f64>> {
        if !record.names().eq(self.input_schema.iter().map(String::as_str)) {
            return Err(Error::Invalid(format!(
                "record `{}` does not match the fitted schema",
                record.image_id
            )));
        }
        self.kept_columns
            .iter()
            .enumerate()
            .map(|(k, &col)| {
                let v = record.features[col].1.ok_or_else(|| {
                    Error::Invalid(format!(
                        "record `{}` misses kept feature `{}`",
                        record.image_id, self.kept_features[k]
                    ))
                })?;
                Ok(self.scale(k, v))
            })
            .collect()
    }

    pub fn transform(&self, table: &MetricTable) -> Result<Dataset> {
        let x = table
            .records()
            .iter()
            .map(|r| self.transform_values(r))
            .collect::<Result<Vec<_>>>()?;
        Dataset::from_labels(x, &table.labels())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(schema: &[&str], rows: Vec<Vec<f64>>) -> MetricTable {
        let rows: Vec<_> = rows
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let label = if i % 2 == 0 { Label::Normal } else { Label::Abnormal };
                (format!("r{i:03}"), label, v.into_iter().map(Some).collect())
            })
            .collect();
        MetricTable::from_rows(schema, &rows).unwrap()
    }

    #[test]
    fn constant_duplicate_and_scaling() {
        let t = table(
            &["c", "a", "dup", "b"],
            vec![
                vec![7.0, 2.0, 4.0, 1.0],
                vec![7.0, 10.0, 20.0, 0.0],
                vec![7.0, 6.0, 12.0, 5.0],
            ],
        );
        let (state, data) = preprocess_fit(&t).unwrap();
        assert_eq!(state.dropped_constant, vec!["c"]);
        assert_eq!(state.dropped_correlated.len(), 1);
        assert_eq!(state.dropped_correlated[0].name, "dup");
        assert_eq!(state.dropped_correlated[0].kept_partner, "a");
        assert_eq!(state.kept_features, vec!["a", "b"]);
        assert_eq!(data.x[2][0], 0.5);
        assert!(data.x.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn missing_dropped_and_unseen_clamped() {
        let rows = vec![
            ("a".to_string(), Label::Normal, vec![Some(1.0), None]),
            ("b".to_string(), Label::Abnormal, vec![Some(3.0), Some(2.0)]),
        ];
        let t = MetricTable::from_rows(&["x", "y"], &rows).unwrap();
        let (state, _) = preprocess_fit(&t).unwrap();
        assert_eq!(state.dropped_missing, vec!["y"]);
        let probe = MetricTable::from_rows(&["x", "y"], &[("c".into(), Label::Normal, vec![Some(9.0), None])]).unwrap();
        assert_eq!(state.transform(&probe).unwrap().x[0], vec![1.0]);
    }

    #[test]
    fn errors() {
        let single = MetricTable::from_rows(
            &["x"],
            &[
                ("a".into(), Label::Normal, vec![Some(1.0)]),
                ("b".into(), Label::Normal, vec![Some(2.0)]),
            ],
        )
        .unwrap();
        assert!(preprocess_fit(&single).is_err());
        let flat = table(&["x"], vec![vec![1.0], vec![1.0]]);
        assert!(preprocess_fit(&flat).is_err());
    }

    #[test]
    fn refit_on_scaled_is_identity() {
        let t = table(
            &["a", "b", "c"],
            vec![
                vec![0.3, 5.0, -1.0],
                vec![0.9, 2.0, 4.0],
                vec![0.1, 7.0, 0.5],
                vec![0.5, 1.0, 2.0],
            ],
        );
        let (_, data) = preprocess_fit(&t).unwrap();
        let names: Vec<String> = (0..data.n_features()).map(|i| format!("f{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let scaled = table(&refs, data.x.clone());
        let (_, again) = preprocess_fit(&scaled).unwrap();
        assert_eq!(again.x, data.x);
    }
}
