//! Segmentation, regression and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK_THRESHOLD: f64 = 0.5;

/// Pixels with probability above the threshold.
pub fn binarise(prob: &[f64]) -> Vec<bool> {
    prob.iter().map(|&p| p > MASK_THRESHOLD).collect()
}

pub fn mask_from_values(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&m| m > 0.5).collect()
}

fn overlap(pred: &[bool], gt: &[bool]) -> Result<(usize, usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("masks of {} and {} pixels", pred.len(), gt.len())));
    }
    let inter = pred.iter().zip(gt).filter(|(a, b)| **a && **b).count();
    let p = pred.iter().filter(|&&a| a).count();
    let g = gt.iter().filter(|&&b| b).count();
    Ok((inter, p, g))
}

/// Dice coefficient as a percentage; two empty masks score 100.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (inter, p, g) = overlap(pred, gt)?;
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (p + g) as f64)
}

/// Intersection over union as a percentage; two empty masks score 100.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    let (inter, p, g) = overlap(pred, gt)?;
    let union = p + g - inter;
    if union == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * inter as f64 / union as f64)
}

/// Mean absolute error, summed in the same order as the training loss.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.correct() as f64 / t as f64,
        }
    }

    /// Row-normalised percentages; an empty row stays zero.
    pub fn row_percentages(&self) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for (r, row) in self.counts.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n > 0 {
                for c in 0..2 {
                    out[r][c] = 100.0 * row[c] as f64 / n as f64;
                }
            }
        }
        out
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for r in 0..2 {
            for c in 0..2 {
                self.counts[r][c] += other.counts[r][c];
            }
        }
    }
}

/// Arg-max class; ties go to class 0.
pub fn predict(prob: &[f64; 2]) -> usize {
    usize::from(prob[1] > prob[0])
}

pub fn classify_metrics(probs: &[[f64; 2]], labels: &[usize]) -> Result<(f64, ConfusionMatrix)> {
    if probs.is_empty() {
        return Err(Error::contract("no predictions to score"));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, &l) in probs.iter().zip(labels) {
        if l > 1 {
            return Err(Error::contract(format!("label {l} is not 0 or 1")));
        }
        cm.counts[l][predict(p)] += 1;
    }
    Ok((cm.accuracy(), cm))
}
