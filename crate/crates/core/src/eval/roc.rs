use crate::error::{Error, Result};

/// ROC points from the strictest threshold to the loosest, with endpoints
/// `(0, 0)` and `(1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps a threshold over every distinct score. Equal scores enter the
/// curve together, producing a diagonal step, so the trapezoid area is the
/// Mann–Whitney statistic with ties counted one half.
pub fn roc_auc(genuine: &[f64], impostor: &[f64]) -> Result<RocCurve> {
    if genuine.is_empty() {
        return Err(Error::UndefinedAuc("no genuine scores"));
    }
    if impostor.is_empty() {
        return Err(Error::UndefinedAuc("no impostor scores"));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::UndefinedAuc("score is NaN"));
    }
    let mut all: Vec<(f64, bool)> = genuine
        .iter()
        .map(|&s| (s, true))
        .chain(impostor.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (n_pos, n_neg) = (genuine.len() as u128, impostor.len() as u128);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u128, 0u128);
    // Twice the area in units of one (1/n_pos)·(1/n_neg) cell; exact.
    let mut doubled: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        doubled += (fp - prev_fp) * (tp + prev_tp);
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = doubled as f64 / (2 * n_pos * n_neg) as f64;
    Ok(RocCurve { points, auc })
}
