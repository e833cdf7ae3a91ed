//! Multi-label evaluation: per-class average precision and mAP.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("scores ({scores}) and labels ({labels}) differ in length")]
    Length { scores: usize, labels: usize },
    #[error("no positive labels: AP undefined")]
    NoPositives,
    #[error("no class has a positive label: mAP undefined")]
    NoScorableClass,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
}

/// Rank order used by [`average_precision`]: descending score, ties broken
/// by descending original index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    order
}

/// Mean of precision@k over the ranks k holding a positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Length { scores: scores.len(), labels: labels.len() });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Scores and binary labels for N items × C classes, row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalBuffer {
    pub classes: usize,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class: usize,
    pub positives: usize,
    /// `None` for classes without positives.
    pub ap: Option<f64>,
}

impl EvalBuffer {
    pub fn new(classes: usize) -> Self {
        Self { classes, ..Default::default() }
    }

    pub fn items(&self) -> usize {
        self.scores.len() / self.classes.max(1)
    }

    pub fn push(&mut self, scores: &[f64], labels: &[bool]) -> Result<(), MetricsError> {
        if scores.len() != self.classes || labels.len() != self.classes {
            return Err(MetricsError::Length { scores: scores.len(), labels: labels.len() });
        }
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn per_class(&self) -> Result<Vec<ClassAp>, MetricsError> {
        let n = self.items();
        (0..self.classes)
            .map(|c| {
                let s: Vec<f64> = (0..n).map(|i| self.scores[i * self.classes + c]).collect();
                let l: Vec<bool> = (0..n).map(|i| self.labels[i * self.classes + c]).collect();
                let positives = l.iter().filter(|&&x| x).count();
                let ap = match average_precision(&s, &l) {
                    Ok(ap) => Some(ap),
                    Err(MetricsError::NoPositives) => None,
                    Err(e) => return Err(e),
                };
                Ok(ClassAp { class: c, positives, ap })
            })
            .collect()
    }
}

/// Mean AP over classes with at least one positive.
pub fn mean_average_precision(buf: &EvalBuffer) -> Result<f64, MetricsError> {
    map_of(&buf.per_class()?)
}

pub fn map_of(per_class: &[ClassAp]) -> Result<f64, MetricsError> {
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    if aps.is_empty() {
        return Err(MetricsError::NoScorableClass);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// CSV report: `class,name,positives,ap`, one row per class, then a final
/// `mAP` row. Classes without positives get an empty AP field.
pub fn write_report<W: Write>(out: W, per_class: &[ClassAp], names: &[String]) -> csv::Result<f64> {
    let map = map_of(per_class).unwrap_or(f64::NAN);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "name", "positives", "ap"])?;
    for c in per_class {
        let name = names.get(c.class).cloned().unwrap_or_default();
        let ap = c.ap.map(|v| format!("{v:.6}")).unwrap_or_default();
        w.write_record([c.class.to_string(), name, c.positives.to_string(), ap])?;
    }
    w.write_record(["mAP".to_string(), String::new(), String::new(), format!("{map:.6}")])?;
    w.flush()?;
    Ok(map)
}
