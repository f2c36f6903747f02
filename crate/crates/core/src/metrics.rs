//! Confusion matrices and per-class precision, recall and F1.
//!
//! Ratios whose denominator is zero are `None` and render as `n/a`.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[i][j]` = samples of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: Vec<String>) -> Self {
        let c = class_names.len();
        ConfusionMatrix {
            counts: vec![vec![0; c]; c],
            class_names,
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>, class_names: Vec<String>) -> Result<Self> {
        if counts.len() != class_names.len() || counts.iter().any(|r| r.len() != counts.len()) {
            return Err(Error::Data(format!(
                "confusion counts must be {n}×{n}",
                n = class_names.len()
            )));
        }
        Ok(ConfusionMatrix { counts, class_names })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// One line per true class, comma separated, with a header of class names.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for n in &self.class_names {
            out.push(',');
            out.push_str(&csv_field(n));
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(&csv_field(name));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Binary PPM (P6), `cell` pixels per matrix entry; intensity is
    /// `255 · count / max count`, gray.
    pub fn to_ppm(&self, cell: usize) -> Vec<u8> {
        let c = self.classes();
        let side = c * cell.max(1);
        let max = self.counts.iter().flatten().copied().max().unwrap_or(0);
        let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
        for y in 0..side {
            for x in 0..side {
                let v = self.counts[y / cell.max(1)][x / cell.max(1)];
                let level = (v * 255).checked_div(max).unwrap_or(0) as u8;
                out.extend_from_slice(&[level; 3]);
            }
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn confusion_from_predictions(truth: &[usize], predicted: &[usize], class_names: Vec<String>) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} true labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(class_names);
    let c = m.classes();
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= c || p >= c {
            return Err(Error::Data(format!("class pair ({t}, {p}) outside 0..{c}")));
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// `trace / total`.
pub fn overall_accuracy(m: &ConfusionMatrix) -> Result<f64> {
    match m.total() {
        0 => Err(Error::Data("accuracy of an empty confusion matrix".into())),
        n => Ok(m.trace() as f64 / n as f64),
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassMetrics {
    pub fn from_counts(tp: u64, fp: u64, r#fn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + r#fn);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        ClassMetrics {
            tp,
            fp,
            r#fn,
            precision,
            recall,
            f1,
        }
    }
}

pub fn class_metrics(m: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..m.classes())
        .map(|c| {
            let tp = m.counts[c][c];
            ClassMetrics::from_counts(tp, m.col_sum(c) - tp, m.row_sum(c) - tp)
        })
        .collect()
}

/// `Σ TP / Σ (TP + FN)`: the fraction of samples whose true class was
/// predicted, computed from per-class counts alone.
pub fn accuracy_from_class_counts(rows: &[ClassMetrics]) -> Result<f64> {
    let tp: u64 = rows.iter().map(|r| r.tp).sum();
    let support: u64 = rows.iter().map(|r| r.tp + r.r#fn).sum();
    ratio(tp, support).ok_or_else(|| Error::Data("no samples in class counts".into()))
}

/// Four decimals, or `n/a`.
pub fn format_ratio(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

/// Two-decimal percentage.
pub fn format_percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// `class,TP,FP,FN,precision,recall,f1`.
pub fn metrics_csv(m: &ConfusionMatrix) -> String {
    let mut out = String::from("class,TP,FP,FN,precision,recall,f1\n");
    for (name, r) in m.class_names.iter().zip(class_metrics(m)) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(name),
            r.tp,
            r.fp,
            r.r#fn,
            format_ratio(r.precision),
            format_ratio(r.recall),
            format_ratio(r.f1)
        );
    }
    out
}
