//! Group-conditional accuracy and fairness metrics for binary target / binary
//! protected attribute problems.
//!
//! All metrics are fractions in `[0, 1]`; `*_pct` fields in the flat record are
//! the same values times 100.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::ModelArch;
use crate::train::{self, TrainConfig};

/// Confusion counts indexed `[s][y][y_hat]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStats {
    pub counts: [[[usize; 2]; 2]; 2],
}

impl GroupStats {
    pub fn stratum_size(&self, s: u8, y: u8) -> usize {
        let c = self.counts[usize::from(s)][usize::from(y)];
        c[0] + c[1]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().flatten().sum()
    }

    /// `P_s(Y_hat = y_hat | Y = y)`.
    pub fn rate(&self, s: u8, y: u8, y_hat: u8) -> Result<f64> {
        let n = self.stratum_size(s, y);
        if n == 0 {
            return Err(Error::UndefinedStratum { s, y });
        }
        Ok(self.counts[usize::from(s)][usize::from(y)][usize::from(y_hat)] as f64 / n as f64)
    }

    /// All conditional rates, `[s][y][y_hat]`; undefined strata are `None`.
    pub fn rates(&self) -> [[[Option<f64>; 2]; 2]; 2] {
        let mut out = [[[None; 2]; 2]; 2];
        for s in 0..2u8 {
            for y in 0..2u8 {
                for y_hat in 0..2u8 {
                    out[usize::from(s)][usize::from(y)][usize::from(y_hat)] = self.rate(s, y, y_hat).ok();
                }
            }
        }
        out
    }
}

pub fn confusion_by_group(predictions: &[u8], dataset: &Dataset) -> Result<GroupStats> {
    if predictions.len() != dataset.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} examples",
            predictions.len(),
            dataset.len()
        )));
    }
    let mut stats = GroupStats::default();
    for (row, (&p, e)) in predictions.iter().zip(&dataset.examples).enumerate() {
        if p > 1 {
            return Err(Error::Shape(format!("prediction {row} is {p}, expected 0 or 1")));
        }
        stats.counts[usize::from(e.protected)][usize::from(e.target)][usize::from(p)] += 1;
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub acc: f64,
    /// `[y][s]` = `P_s(Y_hat = y | Y = y)`.
    pub cell_acc: [[f64; 2]; 2],
    pub wst: f64,
    pub eo: f64,
    pub std: f64,
    pub counts: GroupStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

/// Mean over the four `(y, y_hat)` terms of `|P_s0 - P_s1|`.
fn equalized_odds(stats: &GroupStats) -> Result<f64> {
    let mut sum = 0.0;
    for y in 0..2u8 {
        for y_hat in 0..2u8 {
            sum += (stats.rate(0, y, y_hat)? - stats.rate(1, y, y_hat)?).abs();
        }
    }
    Ok(sum / 4.0)
}

/// `(|TPR_s0 - TPR_s1| + |FPR_s0 - FPR_s1|) / 2`, which equals the four-term
/// mean when predictions are binary.
pub fn equalized_odds_from_rate_gaps(stats: &GroupStats) -> Result<f64> {
    let tpr_gap = (stats.rate(0, 1, 1)? - stats.rate(1, 1, 1)?).abs();
    let fpr_gap = (stats.rate(0, 0, 1)? - stats.rate(1, 0, 1)?).abs();
    Ok((tpr_gap + fpr_gap) / 2.0)
}

pub fn fairness_report(stats: &GroupStats) -> Result<FairnessReport> {
    let mut cell_acc = [[0.0; 2]; 2];
    for y in 0..2u8 {
        for s in 0..2u8 {
            cell_acc[usize::from(y)][usize::from(s)] = stats.rate(s, y, y)?;
        }
    }
    let cells: Vec<f64> = cell_acc.iter().flatten().copied().collect();
    let wst = cells.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = cells.iter().sum::<f64>() / 4.0;
    let std = (cells.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 4.0).sqrt();

    let mut correct = 0;
    for s in 0..2 {
        for y in 0..2 {
            correct += stats.counts[s][y][y];
        }
    }
    Ok(FairnessReport {
        acc: correct as f64 / stats.total() as f64,
        cell_acc,
        wst,
        eo: equalized_odds(stats)?,
        std,
        counts: *stats,
        fingerprint: None,
    })
}

/// Predictions against labels in one call.
pub fn evaluate(predictions: &[u8], dataset: &Dataset) -> Result<FairnessReport> {
    fairness_report(&confusion_by_group(predictions, dataset)?)
}

/// Flat record with fixed field names, fractions and percentages side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatReport {
    pub acc: f64,
    pub wst: f64,
    pub eo: f64,
    pub std: f64,
    pub cell_acc_y0s0: f64,
    pub cell_acc_y0s1: f64,
    pub cell_acc_y1s0: f64,
    pub cell_acc_y1s1: f64,
    pub acc_pct: f64,
    pub wst_pct: f64,
    pub eo_pct: f64,
    pub std_pct: f64,
    pub cell_acc_y0s0_pct: f64,
    pub cell_acc_y0s1_pct: f64,
    pub cell_acc_y1s0_pct: f64,
    pub cell_acc_y1s1_pct: f64,
    /// `[s][y][y_hat]` confusion counts.
    pub counts: [[[usize; 2]; 2]; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl FairnessReport {
    pub fn to_flat(&self) -> FlatReport {
        let c = &self.cell_acc;
        FlatReport {
            acc: self.acc,
            wst: self.wst,
            eo: self.eo,
            std: self.std,
            cell_acc_y0s0: c[0][0],
            cell_acc_y0s1: c[0][1],
            cell_acc_y1s0: c[1][0],
            cell_acc_y1s1: c[1][1],
            acc_pct: 100.0 * self.acc,
            wst_pct: 100.0 * self.wst,
            eo_pct: 100.0 * self.eo,
            std_pct: 100.0 * self.std,
            cell_acc_y0s0_pct: 100.0 * c[0][0],
            cell_acc_y0s1_pct: 100.0 * c[0][1],
            cell_acc_y1s0_pct: 100.0 * c[1][0],
            cell_acc_y1s1_pct: 100.0 * c[1][1],
            counts: self.counts.counts,
            fingerprint: self.fingerprint.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("flat report serializes")
    }
}

/// Lower and upper clamp of the estimated minority fraction.
pub const BIAS_ESTIMATE_RANGE: (f64, f64) = (0.05, 0.5);

/// Minority-fraction estimate from the error set of a briefly trained ERM
/// probe: `clamp(|errors| / N, 0.05, 0.5)`.
pub fn estimate_bias_ratio(arch: &ModelArch, real: &Dataset, probe: &TrainConfig) -> Result<f64> {
    if real.is_empty() {
        return Err(Error::Precondition("bias estimate needs a non-empty dataset".into()));
    }
    let (model, _) = train::pretrain(arch, real, probe)?;
    let preds = crate::net::predict(&model, &real.examples)?;
    let errors = preds
        .iter()
        .zip(&real.examples)
        .filter(|(p, e)| **p != e.target)
        .count();
    let (lo, hi) = BIAS_ESTIMATE_RANGE;
    Ok((errors as f64 / real.len() as f64).clamp(lo, hi))
}
