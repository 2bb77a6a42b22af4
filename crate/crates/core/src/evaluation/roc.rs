//! ROC curves and the Mann–Whitney AUC.

use std::cmp::Ordering;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from (0, 0) to (1, 1).
    pub points: Vec<(f64, f64)>,
    /// Threshold of each point: a score `>= threshold` is called positive.
    /// The first point's threshold is `+inf`.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

impl RocCurve {
    /// Trapezoidal area under `points`.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }
}

fn check_inputs(scores: &[f64], labels: &[usize]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::contract(format!(
            "roc_auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::contract(format!("roc_auc: non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::contract(format!("roc_auc: label {l} is not 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract(format!(
            "roc_auc: need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// ROC curve from a sweep over the distinct scores, highest first, and the
/// AUC as (concordant + ½·tied) / (positives · negatives).
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<RocCurve> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    // Twice the Mann–Whitney count, kept in integers so it is exact.
    let mut doubled: u64 = 0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        // Positives in this group beat every negative still below them and
        // tie with the group's own negatives.
        doubled += gp * (2 * (neg - fp - gn) + gn);
        tp += gp;
        fp += gn;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    let auc = doubled as f64 / (2 * pos * neg) as f64;
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

#[derive(Serialize)]
struct RocRow {
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

/// `threshold,fpr,tpr` rows.
pub fn write_roc_csv(curve: &RocCurve, path: &Path) -> Result<()> {
    let mut w = crate::data::csv_writer(path)?;
    for (&(fpr, tpr), &threshold) in curve.points.iter().zip(&curve.thresholds) {
        w.serialize(RocRow { threshold, fpr, tpr })
            .map_err(|e| crate::data::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let c = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert_eq!(c.auc, 0.75);
        assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn ties_and_extremes() {
        assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap().auc, 0.0);
    }

    #[test]
    fn single_class_is_a_contract_error() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::Contract(_))));
        assert!(roc_auc(&[0.1], &[0, 1]).is_err());
    }
}
