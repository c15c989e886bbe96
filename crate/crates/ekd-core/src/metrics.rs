//! Verification metrics: FPR/TPR counting, FPR-anchored quantile
//! thresholds, EMA threshold tracking, the TPR-at-FPR protocol, and ROC
//! curves.

use std::path::Path;

use crate::error::{EkdError, Result};
use crate::numeric::{quantile_from_sorted, sorted_quantile_threshold};

/// Target false-positive rates, log-evenly spaced and strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct FprGrid {
    targets: Vec<f64>,
}

impl FprGrid {
    /// `k` targets log-evenly spaced from `hi` down to `lo`
    /// (e.g. `hi=1e-1, lo=1e-6, k=6` gives 1e-1, 1e-2, ..., 1e-6).
    pub fn log_even(hi: f64, lo: f64, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(EkdError::InvalidConfig("FPR grid needs k >= 1".into()));
        }
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(EkdError::InvalidConfig(format!(
                "FPR grid bounds must satisfy 0 < lo <= hi <= 1, got lo={lo} hi={hi}"
            )));
        }
        if k > 1 && lo == hi {
            return Err(EkdError::InvalidConfig(
                "FPR grid with k > 1 needs lo < hi".into(),
            ));
        }
        let targets = if k == 1 {
            vec![hi]
        } else {
            let log_hi = hi.ln();
            let log_lo = lo.ln();
            (0..k)
                .map(|i| (log_hi + (log_lo - log_hi) * i as f64 / (k - 1) as f64).exp())
                .collect()
        };
        Ok(FprGrid { targets })
    }

    /// Explicit targets; must be strictly decreasing and in (0, 1].
    pub fn from_targets(targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(EkdError::InvalidConfig("FPR grid needs k >= 1".into()));
        }
        for w in targets.windows(2) {
            if w[1] >= w[0] {
                return Err(EkdError::InvalidConfig(
                    "FPR targets must be strictly decreasing".into(),
                ));
            }
        }
        if targets.iter().any(|&t| t <= 0.0 || t > 1.0) {
            return Err(EkdError::InvalidConfig(
                "FPR targets must be in (0, 1]".into(),
            ));
        }
        Ok(FprGrid { targets })
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// EMA-tracked thresholds for one model, one entry per FPR grid target.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    values: Vec<f64>,
    alpha: f64,
    initialized: bool,
}

impl ThresholdState {
    /// Thresholds start at zero; `alpha` is the EMA momentum in [0, 1).
    pub fn new(k: usize, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(EkdError::InvalidConfig(format!(
                "EMA momentum must be in [0, 1), got {alpha}"
            )));
        }
        Ok(ThresholdState {
            values: vec![0.0; k],
            alpha,
            initialized: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// `t_k <- alpha * t_k + (1 - alpha) * e_k`.
    pub fn ema_update(&mut self, batch_estimates: &[f64]) -> Result<()> {
        if batch_estimates.len() != self.values.len() {
            return Err(EkdError::LengthMismatch {
                context: "EMA batch estimates vs threshold count",
                left: batch_estimates.len(),
                right: self.values.len(),
            });
        }
        if batch_estimates.iter().any(|e| !e.is_finite()) {
            return Err(EkdError::NonFinite("EMA batch estimate"));
        }
        for (t, &e) in self.values.iter_mut().zip(batch_estimates) {
            *t = self.alpha * *t + (1.0 - self.alpha) * e;
        }
        self.initialized = true;
        Ok(())
    }
}

/// Fraction of scores strictly above `t`.
pub fn fpr_at(neg_sims: &[f64], t: f64) -> Result<f64> {
    if neg_sims.is_empty() {
        return Err(EkdError::EmptyInput("FPR of empty negative scores"));
    }
    let above = neg_sims.iter().filter(|&&v| v > t).count();
    Ok(above as f64 / neg_sims.len() as f64)
}

/// Fraction of scores strictly above `t` (positive side).
pub fn tpr_at(pos_sims: &[f64], t: f64) -> Result<f64> {
    if pos_sims.is_empty() {
        return Err(EkdError::EmptyInput("TPR of empty positive scores"));
    }
    let above = pos_sims.iter().filter(|&&v| v > t).count();
    Ok(above as f64 / pos_sims.len() as f64)
}

/// Per-batch threshold estimates: one quantile of the negative similarities
/// per grid target. Sorts once and indexes per target.
pub fn batch_thresholds(neg_sims: &[f64], grid: &FprGrid) -> Result<Vec<f64>> {
    if neg_sims.is_empty() {
        return Err(EkdError::EmptyInput("thresholds of empty negative scores"));
    }
    let mut sorted = neg_sims.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    grid.targets
        .iter()
        .map(|&f| quantile_from_sorted(&sorted, f))
        .collect()
}

/// One operating point of the verification protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingPoint {
    pub fpr: f64,
    pub threshold: f64,
    pub tpr: f64,
}

/// Fix the FPRs, derive the thresholds from negative-score quantiles, and
/// report the TPR at each. Errors if a target FPR cannot be resolved by the
/// available negative count.
pub fn evaluate_tpr_at_fpr(
    pos_sims: &[f64],
    neg_sims: &[f64],
    target_fprs: &[f64],
) -> Result<Vec<OperatingPoint>> {
    if pos_sims.is_empty() {
        return Err(EkdError::EmptyInput("TPR@FPR with no positive scores"));
    }
    if neg_sims.is_empty() {
        return Err(EkdError::EmptyInput("TPR@FPR with no negative scores"));
    }
    let m = neg_sims.len();
    for &target in target_fprs {
        if target < 1.0 / m as f64 {
            return Err(EkdError::FprBelowResolution {
                target,
                required: (1.0 / target).ceil() as usize,
                available: m,
            });
        }
    }
    let mut sorted = neg_sims.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    target_fprs
        .iter()
        .map(|&fpr| {
            let threshold = quantile_from_sorted(&sorted, fpr)?;
            let tpr = tpr_at(pos_sims, threshold)?;
            Ok(OperatingPoint {
                fpr,
                threshold,
                tpr,
            })
        })
        .collect()
}

/// An ROC curve as (threshold, fpr, tpr) triples with threshold ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64, f64)>,
}

/// Sweep `num_points` thresholds linearly over the merged score range. As
/// the threshold rises both rates are nonincreasing by construction.
pub fn roc_points(pos_sims: &[f64], neg_sims: &[f64], num_points: usize) -> Result<RocCurve> {
    if pos_sims.is_empty() || neg_sims.is_empty() {
        return Err(EkdError::EmptyInput("ROC with an empty score set"));
    }
    let lo = pos_sims
        .iter()
        .chain(neg_sims)
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = pos_sims
        .iter()
        .chain(neg_sims)
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let n = num_points.max(2);
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let t = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        points.push((t, fpr_at(neg_sims, t)?, tpr_at(pos_sims, t)?));
    }
    Ok(RocCurve { points })
}

impl RocCurve {
    /// CSV with header `threshold,fpr,tpr`, 9 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for &(t, fpr, tpr) in &self.points {
            out.push_str(&format!("{t:.8e},{fpr:.8e},{tpr:.8e}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Single-call convenience wrapper over [`sorted_quantile_threshold`] kept
/// for callers that have one ad-hoc target rather than a grid.
pub fn threshold_for_fpr(neg_sims: &[f64], target_fpr: f64) -> Result<f64> {
    sorted_quantile_threshold(neg_sims, target_fpr)
}
