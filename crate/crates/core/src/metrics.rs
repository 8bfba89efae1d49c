//! Confusion matrices, per-class and weighted scores, and comparison tables.

use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EmotionLabel;
use crate::scalar::Scalar;

const N: usize = EmotionLabel::COUNT;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("{golds} gold labels but {preds} predictions")]
    LengthMismatch { golds: usize, preds: usize },
}

/// Counts indexed `[gold][predicted]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N]; N],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; N]; N]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn add(&mut self, gold: EmotionLabel, pred: EmotionLabel) {
        self.counts[gold.code()][pred.code()] += 1;
    }

    pub fn get(&self, gold: EmotionLabel, pred: EmotionLabel) -> u64 {
        self.counts[gold.code()][pred.code()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N).map(|i| self.counts[i][i]).sum()
    }

    /// Gold support of class `c`.
    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }
}

pub fn confusion(
    golds: &[EmotionLabel],
    preds: &[EmotionLabel],
) -> Result<ConfusionMatrix, MetricsError> {
    if golds.len() != preds.len() {
        return Err(MetricsError::LengthMismatch {
            golds: golds.len(),
            preds: preds.len(),
        });
    }
    if golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&g, &p) in golds.iter().zip(preds) {
        cm.add(g, p);
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<T> {
    pub label: EmotionLabel,
    /// Per-class accuracy, i.e. recall.
    pub accuracy: T,
    pub precision: T,
    pub f1: T,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub per_class: Vec<ClassMetrics<T>>,
    pub overall_accuracy: T,
    pub weighted_f1: T,
}

fn ratio<T: Scalar>(num: u64, den: u64) -> T {
    if den == 0 {
        T::zero()
    } else {
        T::lit(num as f64) / T::lit(den as f64)
    }
}

/// Zero denominators yield zero, so an all-zero matrix produces an all-zero
/// report.
pub fn per_class_metrics<T: Scalar>(cm: &ConfusionMatrix) -> MetricsReport<T> {
    let total = cm.total();
    let two = T::lit(2.0);
    let per_class: Vec<ClassMetrics<T>> = EmotionLabel::ALL
        .iter()
        .map(|&label| {
            let c = label.code();
            let tp = cm.counts[c][c];
            let support = cm.row_sum(c);
            let recall: T = ratio(tp, support);
            let precision: T = ratio(tp, cm.col_sum(c));
            let f1 = if recall + precision > T::zero() {
                two * precision * recall / (precision + recall)
            } else {
                T::zero()
            };
            ClassMetrics {
                label,
                accuracy: recall,
                precision,
                f1,
                support,
            }
        })
        .collect();
    let weighted_f1 = if total == 0 {
        T::zero()
    } else {
        per_class
            .iter()
            .map(|m| T::lit(m.support as f64) * m.f1)
            .sum::<T>()
            / T::lit(total as f64)
    };
    MetricsReport {
        per_class,
        overall_accuracy: ratio(cm.trace(), total),
        weighted_f1,
    }
}

/// One externally published result row, stored exactly as printed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub source: String,
    pub accuracy: String,
    pub f1: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub version: u32,
    pub status: String,
    pub dataset: String,
    pub rows: Vec<ReferenceRow>,
    pub footnotes: Vec<String>,
}

impl ReferenceTable {
    pub fn row(&self, model: &str) -> Option<&ReferenceRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

const REFERENCE_JSON: &str = include_str!("../data/reference_results.json");

pub fn reference_table() -> &'static ReferenceTable {
    static TABLE: OnceLock<ReferenceTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        serde_json::from_str(REFERENCE_JSON).expect("bundled reference table is valid JSON")
    })
}

fn pct<T: Scalar>(x: T) -> String {
    format!("{:.2}", 100.0 * x.as_f64())
}

/// Aligned plain-text table of the run's per-class Acc/F1 and averages, with
/// the published reference rows appended on request.
pub fn render_comparison<T: Scalar>(report: &MetricsReport<T>, include_paper_rows: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>7} {:>7} {:>7} {:>8}",
        "Class", "Acc", "Prec", "F1", "Support"
    );
    for m in &report.per_class {
        let _ = writeln!(
            out,
            "{:<12} {:>7} {:>7} {:>7} {:>8}",
            m.label.name(),
            pct(m.accuracy),
            pct(m.precision),
            pct(m.f1),
            m.support
        );
    }
    let support: u64 = report.per_class.iter().map(|m| m.support).sum();
    let _ = writeln!(
        out,
        "{:<12} {:>7} {:>7} {:>7} {:>8}",
        "Average",
        pct(report.overall_accuracy),
        "",
        pct(report.weighted_f1),
        support
    );
    if include_paper_rows {
        let table = reference_table();
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "Reference results on {} ({})",
            table.dataset, table.status
        );
        let _ = writeln!(out, "{:<30} {:>7} {:>7}  Source", "Model", "Acc", "F1");
        for r in &table.rows {
            let _ = writeln!(
                out,
                "{:<30} {:>7} {:>7}  {}",
                r.model, r.accuracy, r.f1, r.source
            );
        }
        for note in &table.footnotes {
            let _ = writeln!(out, "Note: {note}");
        }
    }
    out
}

#[derive(Serialize)]
struct ComparisonJson<'a, T> {
    #[serde(flatten)]
    report: &'a MetricsReport<T>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'static ReferenceTable>,
}

/// Machine-readable counterpart of [`render_comparison`].
pub fn render_comparison_json<T: Scalar + Serialize>(
    report: &MetricsReport<T>,
    include_paper_rows: bool,
) -> String {
    let doc = ComparisonJson {
        report,
        reference: include_paper_rows.then(reference_table),
    };
    serde_json::to_string_pretty(&doc).expect("metrics serialize")
}
