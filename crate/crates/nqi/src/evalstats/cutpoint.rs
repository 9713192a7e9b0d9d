//! Cost-weighted optimal cut-points on a scored cohort.
//!
//! The objective is the generalized Youden index J(c) = Se(c) + r·Sp(c) with
//! r = (cost_fp·n_control)/(cost_fn·n_pd) under empirical prevalence. For
//! integer-valued costs, J is maximized through the algebraically equivalent
//! form cost_fn·TP(c) + cost_fp·TN(c), which stays exact in floating point,
//! so tie handling is never at the mercy of rounding. Ties break toward the
//! higher threshold, i.e. the more specific rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keystroke::Group;

use super::ScoredCohort;

/// One operating point chosen under a misclassification-cost assumption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutPoint {
    pub cost_fn: f64,
    pub cost_fp: f64,
    /// Classify PD when score > threshold.
    #[serde(with = "crate::evalstats::json_float")]
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
}

/// Candidate thresholds (midpoints of adjacent distinct scores, plus both
/// infinities) with cumulative counts at or below each candidate.
struct Sweep {
    /// (threshold, pd_at_or_below, control_at_or_below)
    candidates: Vec<(f64, usize, usize)>,
    n_pd: usize,
    n_control: usize,
}

fn sweep(cohort: &ScoredCohort) -> Result<Sweep> {
    cohort.require_both_groups()?;
    let mut scored: Vec<(f64, bool)> = cohort
        .entries
        .iter()
        .map(|e| (e.score, e.group == Group::Pd))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pd = scored.iter().filter(|(_, pd)| *pd).count();
    let n_control = scored.len() - n_pd;

    let mut candidates = vec![(f64::NEG_INFINITY, 0usize, 0usize)];
    let mut pd_le = 0usize;
    let mut c_le = 0usize;
    let mut i = 0;
    while i < scored.len() {
        let v = scored[i].0;
        while i < scored.len() && scored[i].0 == v {
            if scored[i].1 {
                pd_le += 1;
            } else {
                c_le += 1;
            }
            i += 1;
        }
        let threshold = if i < scored.len() {
            0.5 * (v + scored[i].0)
        } else {
            f64::INFINITY
        };
        candidates.push((threshold, pd_le, c_le));
    }
    Ok(Sweep {
        candidates,
        n_pd,
        n_control,
    })
}

fn validate_costs(cost_fn: f64, cost_fp: f64) -> Result<()> {
    if !(cost_fn.is_finite() && cost_fn > 0.0 && cost_fp.is_finite() && cost_fp > 0.0) {
        return Err(Error::invalid("cut-point", "costs must be positive"));
    }
    Ok(())
}

fn cutpoint_at(
    sw: &Sweep,
    idx: usize,
    cost_fn: f64,
    cost_fp: f64,
) -> CutPoint {
    let (threshold, pd_le, c_le) = sw.candidates[idx];
    let tp = sw.n_pd - pd_le;
    let tn = c_le;
    CutPoint {
        cost_fn,
        cost_fp,
        threshold,
        sensitivity: tp as f64 / sw.n_pd as f64,
        specificity: tn as f64 / sw.n_control as f64,
        accuracy: (tp + tn) as f64 / (sw.n_pd + sw.n_control) as f64,
        true_positives: tp,
        false_negatives: pd_le,
        true_negatives: tn,
        false_positives: sw.n_control - c_le,
    }
}

/// Maximizes Se + r·Sp with r = (cost_fp·n_control)/(cost_fn·n_pd), the
/// generalized Youden index at empirical prevalence.
pub fn youden_cutpoint(cohort: &ScoredCohort, cost_fn: f64, cost_fp: f64) -> Result<CutPoint> {
    validate_costs(cost_fn, cost_fp)?;
    let sw = sweep(cohort)?;
    let mut best_idx = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (idx, &(_, pd_le, c_le)) in sw.candidates.iter().enumerate() {
        let tp = (sw.n_pd - pd_le) as f64;
        let tn = c_le as f64;
        // Exact for integer costs; proportional to Se + r·Sp.
        let j = cost_fn * tp + cost_fp * tn;
        if j >= best {
            best = j;
            best_idx = idx;
        }
    }
    Ok(cutpoint_at(&sw, best_idx, cost_fn, cost_fp))
}

/// Same objective under an assumed prevalence pi instead of the empirical
/// one: maximizes cost_fn·pi·Se + cost_fp·(1-pi)·Sp.
pub fn youden_cutpoint_with_prevalence(
    cohort: &ScoredCohort,
    cost_fn: f64,
    cost_fp: f64,
    prevalence: f64,
) -> Result<CutPoint> {
    validate_costs(cost_fn, cost_fp)?;
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(Error::invalid(
            "cut-point",
            "prevalence must lie strictly between 0 and 1",
        ));
    }
    let sw = sweep(cohort)?;
    let mut best_idx = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (idx, &(_, pd_le, c_le)) in sw.candidates.iter().enumerate() {
        let se = (sw.n_pd - pd_le) as f64 / sw.n_pd as f64;
        let sp = c_le as f64 / sw.n_control as f64;
        let j = cost_fn * prevalence * se + cost_fp * (1.0 - prevalence) * sp;
        if j >= best {
            best = j;
            best_idx = idx;
        }
    }
    Ok(cutpoint_at(&sw, best_idx, cost_fn, cost_fp))
}
