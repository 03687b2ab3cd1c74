//! Top-N accuracy, confusion matrix and per-class precision / recall / F1.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;

pub const TOP_N: [usize; 4] = [1, 2, 3, 5];
pub const UNPARSEABLE: &str = "unparseable";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction records")]
    Empty,
    #[error("n must be >= 1")]
    BadN,
    #[error("label {0:?} is not in the label set")]
    UnknownLabel(String),
    #[error("record {0} has duplicate predictions")]
    Duplicates(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One classified query. Empty `predicted` means the response could not be parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub true_label: String,
    pub predicted: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl PredictionRecord {
    /// 1-based rank of the true label, if predicted.
    pub fn rank(&self) -> Option<usize> {
        self.predicted.iter().position(|p| *p == self.true_label).map(|i| i + 1)
    }
}

pub fn top_n_accuracy(records: &[PredictionRecord], n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::BadN);
    }
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = records.iter().filter(|r| r.rank().is_some_and(|k| k <= n)).count();
    Ok(hits as f64 / records.len() as f64)
}

/// Rows are true labels, columns top-1 predictions; unparseable responses
/// are counted per true label in a separate column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub unparseable: Vec<u64>,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparseable.iter().sum::<u64>()
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() + self.unparseable[i]
    }
}

pub fn confusion(records: &[PredictionRecord], label_set: &[String]) -> Result<Confusion, EvalError> {
    let k = label_set.len();
    let pos: BTreeMap<&str, usize> = label_set.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut counts = vec![vec![0u64; k]; k];
    let mut unparseable = vec![0u64; k];
    for r in records {
        let t = *pos.get(r.true_label.as_str()).ok_or_else(|| EvalError::UnknownLabel(r.true_label.clone()))?;
        match r.predicted.first() {
            Some(p) => counts[t][*pos.get(p.as_str()).ok_or_else(|| EvalError::UnknownLabel(p.clone()))?] += 1,
            None => unparseable[t] += 1,
        }
    }
    Ok(Confusion { labels: label_set.to_vec(), counts, unparseable })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a denominator was zero and the 0 convention applied.
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn precision_recall_f1(c: &Confusion) -> Vec<ClassMetrics> {
    (0..c.labels.len())
        .map(|i| {
            let tp = c.counts[i][i];
            let predicted: u64 = c.counts.iter().map(|row| row[i]).sum();
            let support = c.row_total(i);
            let (precision, p_undef) = ratio(tp, predicted);
            let (recall, r_undef) = ratio(tp, support);
            let (f1, f_undef) = if precision + recall == 0.0 {
                (0.0, true)
            } else {
                (2.0 * precision * recall / (precision + recall), false)
            };
            let undefined = [("precision", p_undef), ("recall", r_undef), ("f1", f_undef)]
                .iter()
                .filter(|(_, u)| *u)
                .map(|(n, _)| n.to_string())
                .collect();
            ClassMetrics { label: c.labels[i].clone(), precision, recall, f1, support, undefined }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub top_n: BTreeMap<usize, f64>,
    pub confusion: Confusion,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Correct top-1 over all records; equals Top-1.
    pub micro_recall: f64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

pub fn evaluate(records: &[PredictionRecord], label_set: &[String]) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    for r in records {
        let mut seen = std::collections::BTreeSet::new();
        if !r.predicted.iter().all(|p| seen.insert(p)) {
            return Err(EvalError::Duplicates(r.image_id.clone()));
        }
    }
    let conf = confusion(records, label_set)?;
    let per_class = precision_recall_f1(&conf);
    let top_n = TOP_N.iter().map(|&n| Ok((n, top_n_accuracy(records, n)?))).collect::<Result<_, EvalError>>()?;
    let k = per_class.len().max(1) as f64;
    let tp: u64 = (0..conf.labels.len()).map(|i| conf.counts[i][i]).sum();
    Ok(MetricsReport {
        records: records.len(),
        top_n,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        micro_recall: tp as f64 / conf.total() as f64,
        confusion: conf,
        per_class,
        meta: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

pub fn report_csv(report: &MetricsReport) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "precision", "recall", "f1", "support"])?;
    for m in &report.per_class {
        w.write_record([m.label.clone(), fmt(m.precision), fmt(m.recall), fmt(m.f1), m.support.to_string()])?;
    }
    w.write_record([
        "macro".to_string(),
        fmt(report.macro_precision),
        fmt(report.macro_recall),
        fmt(report.macro_f1),
        report.records.to_string(),
    ])?;
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

pub fn confusion_csv(c: &Confusion) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(c.labels.iter().cloned());
    header.push(UNPARSEABLE.to_string());
    w.write_record(&header)?;
    for (i, l) in c.labels.iter().enumerate() {
        let mut row = vec![l.clone()];
        row.extend(c.counts[i].iter().map(u64::to_string));
        row.push(c.unparseable[i].to_string());
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

/// Writes `report.json` and/or `report.csv` + `confusion.csv` under `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Json => {
                let p = dir.join("report.json");
                let mut s = serde_json::to_string_pretty(report).expect("report serialises");
                s.push('\n');
                write_atomic(&p, s.as_bytes())?;
                written.push(p);
            }
            ReportFormat::Csv => {
                let p = dir.join("report.csv");
                write_atomic(&p, report_csv(report)?.as_bytes())?;
                let q = dir.join("confusion.csv");
                write_atomic(&q, confusion_csv(&report.confusion)?.as_bytes())?;
                written.extend([p, q]);
            }
        }
    }
    Ok(written)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| EvalError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
        })
        .collect()
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), EvalError> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serialises"));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(())
}
