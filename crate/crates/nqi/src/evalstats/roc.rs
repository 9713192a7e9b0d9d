//! ROC curves, rank-based AUC, bootstrap confidence intervals, and the
//! paired test for two correlated ROC curves.
//!
//! Scores are oriented so that larger values indicate disease. The AUC is
//! computed from midranks, which agrees exactly with the count of
//! (PD > control) pairs plus half the ties, and ties contribute diagonal
//! segments to the curve so the trapezoidal area matches.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::featurize::interpolated_quantile;
use crate::keystroke::Group;
use crate::seeds::{self, domain};

use super::ScoredCohort;

use rand::RngExt;

/// One operating point: classify PD when score > threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    #[serde(with = "crate::evalstats::json_float")]
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Full curve with its area; confidence bounds filled by the bootstrap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

/// Midranks (1-based, ties averaged) of `values`.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Positions i+1 ..= j, averaged.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

/// AUC for "PD scores high" from midranks; exact pairwise-count semantics.
pub fn auc_from_scores(pd: &[f64], control: &[f64]) -> Result<f64> {
    if pd.is_empty() || control.is_empty() {
        return Err(Error::OneClassCohort {
            reason: "auc needs scores from both groups".into(),
        });
    }
    let n_pd = pd.len();
    let n_c = control.len();
    let mut combined = Vec::with_capacity(n_pd + n_c);
    combined.extend_from_slice(pd);
    combined.extend_from_slice(control);
    let ranks = midranks(&combined);
    let r_pd: f64 = ranks[..n_pd].iter().sum();
    let u = r_pd - (n_pd * (n_pd + 1)) as f64 / 2.0;
    Ok(u / (n_pd as f64 * n_c as f64))
}

/// Builds the operating-point set (thresholds at midpoints of adjacent
/// distinct scores, with sentinels at both infinities) and the AUC.
pub fn roc_curve(cohort: &ScoredCohort) -> Result<RocCurve> {
    cohort.require_both_groups()?;
    let pd = cohort.group_scores(Group::Pd);
    let control = cohort.group_scores(Group::Control);
    let n_pd = pd.len() as f64;
    let n_c = control.len() as f64;

    // Distinct combined scores ascending, with per-value class counts.
    let mut scored: Vec<(f64, bool)> = pd
        .iter()
        .map(|&s| (s, true))
        .chain(control.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut distinct: Vec<(f64, usize, usize)> = Vec::new();
    for (s, is_pd) in scored {
        match distinct.last_mut() {
            Some((v, pd_n, c_n)) if *v == s => {
                if is_pd {
                    *pd_n += 1;
                } else {
                    *c_n += 1;
                }
            }
            _ => distinct.push((s, usize::from(is_pd), usize::from(!is_pd))),
        }
    }

    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        sensitivity: 1.0,
        specificity: 0.0,
    }];
    let mut pd_le = 0usize;
    let mut c_le = 0usize;
    for k in 0..distinct.len() {
        pd_le += distinct[k].1;
        c_le += distinct[k].2;
        let threshold = if k + 1 < distinct.len() {
            0.5 * (distinct[k].0 + distinct[k + 1].0)
        } else {
            f64::INFINITY
        };
        points.push(RocPoint {
            threshold,
            sensitivity: (pd.len() - pd_le) as f64 / n_pd,
            specificity: c_le as f64 / n_c,
        });
    }

    let auc = auc_from_scores(&pd, &control)?;
    Ok(RocCurve {
        points,
        auc,
        ci_low: None,
        ci_high: None,
    })
}

/// Trapezoidal area under the (1-specificity, sensitivity) polyline.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let fpr0 = 1.0 - w[0].specificity;
        let fpr1 = 1.0 - w[1].specificity;
        area += (fpr0 - fpr1) * 0.5 * (w[0].sensitivity + w[1].sensitivity);
    }
    area
}

/// Percentile bootstrap bounds for the AUC, resampling subjects within each
/// label. Deterministic: replicate r draws from a generator derived from
/// (seed, r), PD pool first.
pub fn bootstrap_auc_ci(cohort: &ScoredCohort, n_boot: usize, seed: u64) -> Result<(f64, f64)> {
    cohort.require_both_groups()?;
    if n_boot == 0 {
        return Err(Error::invalid("bootstrap", "n_boot must be positive"));
    }
    let pd = cohort.group_scores(Group::Pd);
    let control = cohort.group_scores(Group::Control);
    let mut aucs = Vec::with_capacity(n_boot);
    let mut pd_sample = vec![0.0; pd.len()];
    let mut c_sample = vec![0.0; control.len()];
    for rep in 0..n_boot {
        let mut rng = seeds::child_rng(seed, domain::BOOTSTRAP_REP, rep as u64);
        for slot in pd_sample.iter_mut() {
            *slot = pd[rng.random_range(0..pd.len())];
        }
        for slot in c_sample.iter_mut() {
            *slot = control[rng.random_range(0..control.len())];
        }
        aucs.push(auc_from_scores(&pd_sample, &c_sample)?);
    }
    aucs.sort_by(f64::total_cmp);
    Ok((
        interpolated_quantile(&aucs, 0.025),
        interpolated_quantile(&aucs, 0.975),
    ))
}

/// Result of the paired correlated-ROC comparison.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DelongResult {
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
}

fn psi(x: f64, y: f64) -> f64 {
    if x > y {
        1.0
    } else if x == y {
        0.5
    } else {
        0.0
    }
}

/// Paired test that two metrics scored on the same subjects have equal AUC,
/// using structural components of the rank statistic and a two-sided normal
/// reference for the difference.
pub fn delong_test(cohort_a: &ScoredCohort, cohort_b: &ScoredCohort) -> Result<DelongResult> {
    // Pair the two cohorts by subject; sets and labels must agree.
    let mut a_map = std::collections::BTreeMap::new();
    for e in &cohort_a.entries {
        if a_map.insert(e.subject_id.as_str(), (e.score, e.group)).is_some() {
            return Err(Error::invalid(
                "paired auc test",
                format!("duplicate subject {}", e.subject_id),
            ));
        }
    }
    let mut b_map = std::collections::BTreeMap::new();
    for e in &cohort_b.entries {
        if b_map.insert(e.subject_id.as_str(), (e.score, e.group)).is_some() {
            return Err(Error::invalid(
                "paired auc test",
                format!("duplicate subject {}", e.subject_id),
            ));
        }
    }
    if a_map.len() != b_map.len()
        || !a_map
            .iter()
            .all(|(id, (_, g))| b_map.get(id).is_some_and(|(_, g2)| g2 == g))
    {
        return Err(Error::CohortMismatch {
            reason: "paired test needs identical subject sets and labels".into(),
        });
    }

    // Paired scores in a deterministic (sorted-id) order.
    let mut pd_pairs = Vec::new();
    let mut control_pairs = Vec::new();
    for (id, (score_a, group)) in &a_map {
        let (score_b, _) = b_map[id];
        match group {
            Group::Pd => pd_pairs.push((*score_a, score_b)),
            Group::Control => control_pairs.push((*score_a, score_b)),
        }
    }
    let n_pd = pd_pairs.len();
    let n_c = control_pairs.len();
    if n_pd < 2 || n_c < 2 {
        return Err(Error::InsufficientData {
            reason: "paired auc test needs at least 2 subjects per group".into(),
        });
    }

    // Structural components per metric.
    let mut v10 = [vec![0.0; n_pd], vec![0.0; n_pd]];
    let mut v01 = [vec![0.0; n_c], vec![0.0; n_c]];
    for (i, &(xa, xb)) in pd_pairs.iter().enumerate() {
        for (j, &(ya, yb)) in control_pairs.iter().enumerate() {
            let pa = psi(xa, ya);
            let pb = psi(xb, yb);
            v10[0][i] += pa;
            v10[1][i] += pb;
            v01[0][j] += pa;
            v01[1][j] += pb;
        }
    }
    for v in v10.iter_mut() {
        for x in v.iter_mut() {
            *x /= n_c as f64;
        }
    }
    for v in v01.iter_mut() {
        for x in v.iter_mut() {
            *x /= n_pd as f64;
        }
    }
    let theta = [
        v10[0].iter().sum::<f64>() / n_pd as f64,
        v10[1].iter().sum::<f64>() / n_pd as f64,
    ];

    // Sample covariances (n-1 denominator).
    let cov = |v: &[Vec<f64>; 2], means: &[f64; 2], k: usize, l: usize| -> f64 {
        let n = v[0].len();
        let mut s = 0.0;
        for i in 0..n {
            s += (v[k][i] - means[k]) * (v[l][i] - means[l]);
        }
        s / (n - 1) as f64
    };
    let m01 = [
        v01[0].iter().sum::<f64>() / n_c as f64,
        v01[1].iter().sum::<f64>() / n_c as f64,
    ];
    let s10 = [
        [cov(&v10, &theta, 0, 0), cov(&v10, &theta, 0, 1)],
        [cov(&v10, &theta, 1, 0), cov(&v10, &theta, 1, 1)],
    ];
    let s01 = [
        [cov(&v01, &m01, 0, 0), cov(&v01, &m01, 0, 1)],
        [cov(&v01, &m01, 1, 0), cov(&v01, &m01, 1, 1)],
    ];
    let var = (s10[0][0] + s10[1][1] - 2.0 * s10[0][1]) / n_pd as f64
        + (s01[0][0] + s01[1][1] - 2.0 * s01[0][1]) / n_c as f64;
    let diff = theta[0] - theta[1];

    let (z, p) = if var > 0.0 {
        let z = diff / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let p = (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0);
        (z, p)
    } else if diff == 0.0 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY * diff.signum(), 0.0)
    };

    Ok(DelongResult {
        auc_a: theta[0],
        auc_b: theta[1],
        z,
        p,
    })
}
