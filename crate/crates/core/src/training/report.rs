use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::metrics::{ConfusionMatrix, MeanStd};

/// Test-set metrics; each field is present only when its task is enabled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub samples: usize,
    pub dsc: Option<MeanStd>,
    pub iou: Option<MeanStd>,
    pub mae: Option<MeanStd>,
    pub accuracy: Option<f64>,
    pub confusion: Option<ConfusionMatrix>,
    pub confusion_percent: Option<[[f64; 2]; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub steps: usize,
    /// Per-epoch means of every evaluated loss term.
    pub loss_trace: BTreeMap<String, Vec<f64>>,
    pub test: MetricSummary,
}

/// Fold-level mean ± population std of each metric, plus pooled confusion counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dsc: Option<MeanStd>,
    pub iou: Option<MeanStd>,
    pub mae: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
    pub confusion: Option<ConfusionMatrix>,
}

/// Wall-clock measurements, kept apart so the rest of a report is reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub fold_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub config: TrainConfig,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
    pub timing: Timing,
}

impl CrossValReport {
    /// Copy with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> CrossValReport {
        CrossValReport {
            timing: Timing::default(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub values: Vec<Option<MeanStd>>,
}

/// Variants × metrics comparison with one cross-validation run per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    pub reports: Vec<CrossValReport>,
}

pub const ABSENT: &str = "--";

fn cell(v: &Option<MeanStd>) -> String {
    match v {
        Some(m) => format!("{:.2} ± {:.2}", m.mean, m.std),
        None => ABSENT.to_string(),
    }
}

impl ExperimentTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.variant);
            for v in &r.values {
                out.push(',');
                out.push_str(&cell(v));
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let mut widths: Vec<usize> = std::iter::once("variant".len())
            .chain(self.columns.iter().map(String::len))
            .collect();
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| std::iter::once(r.variant.clone()).chain(r.values.iter().map(cell)).collect())
            .collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |items: &[String]| {
            items
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let header: Vec<String> = std::iter::once("variant".to_string()).chain(self.columns.iter().cloned()).collect();
        let mut out = format!("{}\n{}\n", self.title, line(&header));
        for row in &cells {
            out.push_str(line(row).trim_end());
            out.push('\n');
        }
        out
    }
}
