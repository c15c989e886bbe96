//! Distillation losses over pair similarities.
//!
//! The central objects are per-pair "rank vectors": for a similarity `s`
//! and thresholds `t_1..t_K`, the smooth count of thresholds below `s`,
//! `sum_k sigmoid((s - t_k) / tau)`. The rank loss penalizes the absolute
//! difference between teacher and student rank vectors; pairs whose
//! similarities sit on the same side of every threshold in both models
//! contribute (almost) nothing, which is exactly the flexibility this
//! distillation grants the student.
//!
//! A pair is *critical* when some threshold separates the two models'
//! similarities: the teacher counts it above, the student below (or vice
//! versa). Critical pairs are the ones that move TPR/FPR apart.

use crate::error::{EkdError, Result};
use crate::metrics::ThresholdState;
use crate::numeric::stable_sigmoid;
use crate::rng::RngState;

/// Which distillation loss the trainer applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Smooth rank-vector matching (the default).
    Rank,
    /// Per-threshold absolute margin matching over critical pairs.
    Hard,
    /// Plain absolute similarity matching over all pairs.
    L2,
}

impl std::str::FromStr for LossVariant {
    type Err = EkdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(LossVariant::Rank),
            "hard" => Ok(LossVariant::Hard),
            "l2" => Ok(LossVariant::L2),
            other => Err(EkdError::InvalidConfig(format!(
                "unknown loss variant '{other}' (expected rank|hard|l2)"
            ))),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::Rank => "rank",
            LossVariant::Hard => "hard",
            LossVariant::L2 => "l2",
        })
    }
}

/// How negative pairs are subsampled before the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningStrategy {
    /// Keep the `n` highest student similarities.
    Hard,
    /// Keep `n` uniformly at random (seeded).
    Random,
}

impl std::str::FromStr for MiningStrategy {
    type Err = EkdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(MiningStrategy::Hard),
            "random" => Ok(MiningStrategy::Random),
            other => Err(EkdError::InvalidConfig(format!(
                "unknown mining strategy '{other}' (expected hard|random)"
            ))),
        }
    }
}

impl std::fmt::Display for MiningStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MiningStrategy::Hard => "hard",
            MiningStrategy::Random => "random",
        })
    }
}

/// Distillation loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Sigmoid temperature.
    pub tau: f64,
    /// Weight of the positive-pair term.
    pub lambda_pos: f64,
    /// Weight of the negative-pair term.
    pub lambda_neg: f64,
    /// Number of negative pairs kept by mining.
    pub n_hard_neg: usize,
    pub variant: LossVariant,
    pub mining: MiningStrategy,
    /// Steps during which the distillation term is skipped while EMA
    /// thresholds are still biased toward their zero init.
    pub warmup_steps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.01,
            lambda_pos: 0.02,
            lambda_neg: 0.01,
            n_hard_neg: 2000,
            variant: LossVariant::Rank,
            mining: MiningStrategy::Hard,
            warmup_steps: 100,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(EkdError::InvalidConfig(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if self.lambda_pos < 0.0 || self.lambda_neg < 0.0 {
            return Err(EkdError::InvalidConfig(
                "lambda weights must be >= 0".into(),
            ));
        }
        if self.n_hard_neg == 0 {
            return Err(EkdError::InvalidConfig("n_hard_neg must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-pair criticality flags, with a per-threshold bitmask for diagnostics
/// (bit k set means threshold k separates the two models on that pair).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticalMask {
    pub flags: Vec<bool>,
    pub per_threshold: Vec<u32>,
}

impl CriticalMask {
    pub fn n_critical(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn all_true(n: usize) -> CriticalMask {
        CriticalMask {
            flags: vec![true; n],
            per_threshold: vec![u32::MAX; n],
        }
    }
}

/// Flag pairs whose similarity falls on different sides of any threshold in
/// the teacher versus the student (strict comparisons on both sides).
pub fn select_critical(
    sims_teacher: &[f64],
    sims_student: &[f64],
    thr_teacher: &ThresholdState,
    thr_student: &ThresholdState,
) -> Result<CriticalMask> {
    if sims_teacher.len() != sims_student.len() {
        return Err(EkdError::LengthMismatch {
            context: "teacher vs student similarities",
            left: sims_teacher.len(),
            right: sims_student.len(),
        });
    }
    if thr_teacher.values().len() != thr_student.values().len() {
        return Err(EkdError::LengthMismatch {
            context: "teacher vs student threshold counts",
            left: thr_teacher.values().len(),
            right: thr_student.values().len(),
        });
    }
    debug_assert!(
        thr_teacher.values().len() <= 32,
        "per-threshold bitmask holds at most 32 thresholds"
    );
    let mut flags = Vec::with_capacity(sims_teacher.len());
    let mut per_threshold = Vec::with_capacity(sims_teacher.len());
    for (&st, &ss) in sims_teacher.iter().zip(sims_student) {
        let mut bits = 0u32;
        for (k, (&tt, &ts)) in thr_teacher
            .values()
            .iter()
            .zip(thr_student.values())
            .enumerate()
        {
            if (st > tt) != (ss > ts) {
                bits |= 1 << k;
            }
        }
        flags.push(bits != 0);
        per_threshold.push(bits);
    }
    Ok(CriticalMask {
        flags,
        per_threshold,
    })
}

/// Indices of the `n` largest values (all indices when `n >= len`), ties
/// broken toward the lower index. Returned ascending, so the selection is a
/// deterministic set.
pub fn hard_negative_mine(neg_sims_student: &[f64], n: usize) -> Vec<usize> {
    let m = neg_sims_student.len();
    if n >= m {
        return (0..m).collect();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_unstable_by(|&a, &b| {
        neg_sims_student[b]
            .total_cmp(&neg_sims_student[a])
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order[..n].to_vec();
    picked.sort_unstable();
    picked
}

/// `n` indices drawn uniformly without replacement (the mining ablation).
pub fn random_negative_select(m: usize, n: usize, rng: &mut RngState) -> Vec<usize> {
    if n >= m {
        return (0..m).collect();
    }
    rng.sample_indices(m, n)
}

/// Smooth count of thresholds below `s`: `sum_k sigmoid((s - t_k) / tau)`.
/// Lies in [0, K].
pub fn rank_vector(s: f64, thresholds: &[f64], tau: f64) -> f64 {
    debug_assert!(tau > 0.0);
    thresholds
        .iter()
        .map(|&t| stable_sigmoid((s - t) / tau))
        .sum()
}

/// Rank-matching loss: mean absolute difference between teacher and student
/// rank vectors, with the analytic gradient with respect to the student
/// similarities. Teacher values and all thresholds are constants.
pub fn ekd_loss_rank(
    pair_sims_teacher: &[f64],
    pair_sims_student: &[f64],
    thr_teacher: &ThresholdState,
    thr_student: &ThresholdState,
    config: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if pair_sims_teacher.len() != pair_sims_student.len() {
        return Err(EkdError::LengthMismatch {
            context: "teacher vs student similarities",
            left: pair_sims_teacher.len(),
            right: pair_sims_student.len(),
        });
    }
    let n = pair_sims_teacher.len();
    if n == 0 {
        log::debug!("rank loss over an empty pair set; contributing 0");
        return Ok((0.0, Vec::new()));
    }
    let tau = config.tau;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&st, &ss) in pair_sims_teacher.iter().zip(pair_sims_student) {
        let rank_t = rank_vector(st, thr_teacher.values(), tau);
        let mut rank_s = 0.0;
        let mut drank_s = 0.0;
        for &t in thr_student.values() {
            let g = stable_sigmoid((ss - t) / tau);
            rank_s += g;
            drank_s += g * (1.0 - g) / tau;
        }
        let diff = rank_t - rank_s;
        loss += diff.abs();
        // d|r_T - r_S|/ds_S = -sign(r_T - r_S) * dr_S/ds_S; sign(0) = 0
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.push(-sign * drank_s * inv_n);
    }
    Ok((loss * inv_n, grad))
}

/// Per-threshold absolute margin loss over critical pairs:
/// `(1/N) sum_n sum_k |(s_n(T) - t_k(T)) - (s_n(S) - t_k(S))|` where `N`
/// counts the critical pairs. The gradient vector is aligned with the full
/// pair list (zero at non-critical pairs); the subgradient at a kink is 0.
pub fn ekd_loss_hard(
    pair_sims_teacher: &[f64],
    pair_sims_student: &[f64],
    thr_teacher: &ThresholdState,
    thr_student: &ThresholdState,
    critical: &CriticalMask,
) -> Result<(f64, Vec<f64>)> {
    if pair_sims_teacher.len() != pair_sims_student.len() {
        return Err(EkdError::LengthMismatch {
            context: "teacher vs student similarities",
            left: pair_sims_teacher.len(),
            right: pair_sims_student.len(),
        });
    }
    if critical.flags.len() != pair_sims_teacher.len() {
        return Err(EkdError::LengthMismatch {
            context: "critical mask vs pairs",
            left: critical.flags.len(),
            right: pair_sims_teacher.len(),
        });
    }
    let n_critical = critical.n_critical();
    let mut grad = vec![0.0; pair_sims_teacher.len()];
    if n_critical == 0 {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / n_critical as f64;
    let mut loss = 0.0;
    for (idx, (&st, &ss)) in pair_sims_teacher
        .iter()
        .zip(pair_sims_student)
        .enumerate()
    {
        if !critical.flags[idx] {
            continue;
        }
        let mut g = 0.0;
        for (&tt, &ts) in thr_teacher.values().iter().zip(thr_student.values()) {
            let margin = (st - tt) - (ss - ts);
            loss += margin.abs();
            if margin > 0.0 {
                g -= 1.0;
            } else if margin < 0.0 {
                g += 1.0;
            }
        }
        grad[idx] = g * inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Plain relation-matching baseline: `(1/N) sum_n |s_n(T) - s_n(S)|`.
pub fn ekd_loss_l2(
    pair_sims_teacher: &[f64],
    pair_sims_student: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if pair_sims_teacher.len() != pair_sims_student.len() {
        return Err(EkdError::LengthMismatch {
            context: "teacher vs student similarities",
            left: pair_sims_teacher.len(),
            right: pair_sims_student.len(),
        });
    }
    let n = pair_sims_teacher.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&st, &ss) in pair_sims_teacher.iter().zip(pair_sims_student) {
        let diff = st - ss;
        loss += diff.abs();
        grad.push(if diff > 0.0 {
            -inv_n
        } else if diff < 0.0 {
            inv_n
        } else {
            0.0
        });
    }
    Ok((loss * inv_n, grad))
}

/// Loss components for one step, plus criticality diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_ekd: f64,
    pub l_arcface: f64,
    pub total: f64,
    pub n_critical_pos: usize,
    pub n_critical_neg: usize,
    pub n_total_pos: usize,
    pub n_total_neg: usize,
}

impl LossBreakdown {
    /// Fraction of tracked pairs that are critical.
    pub fn critical_ratio(&self) -> f64 {
        let total = self.n_total_pos + self.n_total_neg;
        if total == 0 {
            return 0.0;
        }
        (self.n_critical_pos + self.n_critical_neg) as f64 / total as f64
    }
}

/// Weighted combination `lambda_pos * l_pos + lambda_neg * l_neg`. Gradients
/// are scaled in place by their weights; the returned breakdown carries the
/// distillation components with the classification term still to be added.
pub fn combine_ekd(
    l_pos: f64,
    mut grad_pos: Vec<f64>,
    l_neg: f64,
    mut grad_neg: Vec<f64>,
    config: &LossConfig,
) -> (LossBreakdown, Vec<f64>, Vec<f64>) {
    for g in &mut grad_pos {
        *g *= config.lambda_pos;
    }
    for g in &mut grad_neg {
        *g *= config.lambda_neg;
    }
    let l_ekd = config.lambda_pos * l_pos + config.lambda_neg * l_neg;
    let breakdown = LossBreakdown {
        l_pos,
        l_neg,
        l_ekd,
        l_arcface: 0.0,
        total: l_ekd,
        n_critical_pos: 0,
        n_critical_neg: 0,
        n_total_pos: grad_pos.len(),
        n_total_neg: grad_neg.len(),
    };
    (breakdown, grad_pos, grad_neg)
}
