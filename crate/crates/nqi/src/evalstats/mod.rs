//! Statistical evaluation of subject-level metrics against clinical labels.
//!
//! Provides ROC/AUC with bootstrap confidence intervals, a paired test for
//! correlated ROC curves, cost-weighted optimal cut-points, the Mann-Whitney
//! rank test, and covariate-adjusted logistic regression, plus an
//! orchestrator that lines several metrics up into one report.

pub mod cutpoint;
pub mod logistic;
pub mod mannwhitney;
pub mod roc;

/// Serde adapter for floats that may be infinite (sentinel thresholds): JSON
/// has no literal for them, so non-finite values are written as the strings
/// `"inf"`, `"-inf"`, or `"nan"` and read back from either representation.
pub(crate) mod json_float {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => other.parse().map_err(D::Error::custom),
            },
        }
    }
}

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::config::CostRatio;
use crate::error::{Error, Result};
use crate::featurize::interpolated_quantile;
use crate::keystroke::Group;

pub use cutpoint::{youden_cutpoint, youden_cutpoint_with_prevalence, CutPoint};
pub use logistic::{logistic_fit, LogisticFit, LogisticTerm};
pub use mannwhitney::mann_whitney_u;
pub use roc::{bootstrap_auc_ci, delong_test, roc_curve, DelongResult, RocCurve, RocPoint};

/// One scored subject (or window, in per-window mode).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEntry {
    pub subject_id: String,
    pub score: f64,
    pub group: Group,
    pub covariates: BTreeMap<String, f64>,
}

impl ScoredEntry {
    pub fn new(subject_id: impl Into<String>, score: f64, group: Group) -> Self {
        ScoredEntry {
            subject_id: subject_id.into(),
            score,
            group,
            covariates: BTreeMap::new(),
        }
    }
}

/// A labelled, scored cohort ready for ROC or regression analysis.
#[derive(Debug, Clone)]
pub struct ScoredCohort {
    pub entries: Vec<ScoredEntry>,
    /// True when entries are windows rather than subjects (repeated ids OK).
    pub per_window: bool,
}

impl ScoredCohort {
    /// Subject-level cohort: one entry per subject, finite scores.
    pub fn new(entries: Vec<ScoredEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !e.score.is_finite() {
                return Err(Error::invalid(
                    "scored cohort",
                    format!("non-finite score for subject {}", e.subject_id),
                ));
            }
            if !seen.insert(e.subject_id.as_str()) {
                return Err(Error::invalid(
                    "scored cohort",
                    format!("duplicate subject {} in subject-level cohort", e.subject_id),
                ));
            }
        }
        Ok(ScoredCohort {
            entries,
            per_window: false,
        })
    }

    /// Window-level cohort: the same subject may appear many times.
    pub fn per_window(entries: Vec<ScoredEntry>) -> Result<Self> {
        for e in &entries {
            if !e.score.is_finite() {
                return Err(Error::invalid(
                    "scored cohort",
                    format!("non-finite score for subject {}", e.subject_id),
                ));
            }
        }
        Ok(ScoredCohort {
            entries,
            per_window: true,
        })
    }

    pub fn counts(&self) -> (usize, usize) {
        let n_pd = self.entries.iter().filter(|e| e.group == Group::Pd).count();
        (n_pd, self.entries.len() - n_pd)
    }

    /// Scores of one group, in entry order.
    pub fn group_scores(&self, group: Group) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.score)
            .collect()
    }

    pub(crate) fn require_both_groups(&self) -> Result<()> {
        let (n_pd, n_control) = self.counts();
        if n_pd == 0 || n_control == 0 {
            return Err(Error::OneClassCohort {
                reason: format!("{n_pd} pd and {n_control} control entries"),
            });
        }
        Ok(())
    }
}

/// One metric column to evaluate across the cohort.
#[derive(Debug, Clone)]
pub struct MetricColumn {
    pub name: String,
    /// True when larger values indicate disease (nQi); false for tapping
    /// scores, which run the other way and are negated internally for ROC.
    pub pd_high: bool,
    /// Add typing speed as a regression covariate for this metric.
    pub speed_covariate: bool,
    pub scores: BTreeMap<String, f64>,
}

/// Per-subject label and regression covariates.
#[derive(Debug, Clone)]
pub struct SubjectCovariates {
    pub group: Group,
    pub sex: f64,
    pub age: f64,
    pub education_years: f64,
    pub typing_speed: Option<f64>,
}

/// Options shared by every metric in one comparison run.
#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub n_boot: usize,
    pub seed: u64,
    pub cost_ratios: Vec<CostRatio>,
    pub prevalence: Option<f64>,
}

/// Group summary plus the two significance tests for one metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupComparison {
    pub metric: String,
    pub n_pd: usize,
    pub n_control: usize,
    pub mean_pd: f64,
    pub sd_pd: f64,
    pub mean_control: f64,
    pub sd_control: f64,
    pub mann_whitney_u: f64,
    pub unadjusted_p: f64,
    /// Wald p of the metric term in the adjusted logistic model; absent when
    /// the model could not be fit (reason recorded in `adjusted_note`).
    pub adjusted_p: Option<f64>,
    pub adjusted_covariates: Vec<String>,
    pub separation_flagged: bool,
    pub adjusted_note: Option<String>,
    pub auc: f64,
    pub auc_ci_low: f64,
    pub auc_ci_high: f64,
}

/// Paired comparison of two metrics on their common subjects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DelongComparison {
    pub metric_a: String,
    pub metric_b: String,
    pub n_pd: usize,
    pub n_control: usize,
    pub auc_a: f64,
    pub auc_b: f64,
    pub z: f64,
    pub p: f64,
}

/// Cut-point table for one metric (scores oriented so PD is high).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutPointTable {
    pub metric: String,
    pub rows: Vec<CutPoint>,
}

/// Five-number summary for plotting, whiskers at the most extreme values
/// still within 1.5 interquartile ranges of the box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxplotRow {
    pub metric: String,
    pub group: Group,
    pub n: usize,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
}

/// Everything compare_metrics produces; the report module renders it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub comparisons: Vec<GroupComparison>,
    pub delong: Vec<DelongComparison>,
    pub cutpoints: Vec<CutPointTable>,
    pub roc_curves: Vec<(String, RocCurve)>,
    pub boxplots: Vec<BoxplotRow>,
    pub notes: Vec<String>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn boxplot_row(metric: &str, group: Group, values: &[f64]) -> Result<BoxplotRow> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return Err(Error::EmptyInput {
            what: format!("boxplot values for {metric}"),
        });
    }
    let q1 = interpolated_quantile(&sorted, 0.25);
    let median = interpolated_quantile(&sorted, 0.5);
    let q3 = interpolated_quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_low = sorted
        .iter()
        .copied()
        .find(|v| *v >= lo_fence)
        .unwrap_or(sorted[0]);
    let whisker_high = sorted
        .iter()
        .rev()
        .copied()
        .find(|v| *v <= hi_fence)
        .unwrap_or(sorted[sorted.len() - 1]);
    Ok(BoxplotRow {
        metric: metric.to_string(),
        group,
        n: sorted.len(),
        whisker_low,
        q1,
        median,
        q3,
        whisker_high,
    })
}

/// Builds the oriented subject-level cohort for one metric: subjects with a
/// score for it, scores negated when low values indicate disease.
fn oriented_cohort(
    metric: &MetricColumn,
    subjects: &BTreeMap<String, SubjectCovariates>,
) -> Result<ScoredCohort> {
    let mut entries = Vec::new();
    for (id, raw) in &metric.scores {
        let info = subjects.get(id).ok_or_else(|| Error::UnknownSubject {
            subject_id: id.clone(),
            context: format!("scores for metric {}", metric.name),
        })?;
        let score = if metric.pd_high { *raw } else { -raw };
        entries.push(ScoredEntry::new(id.clone(), score, info.group));
    }
    ScoredCohort::new(entries)
}

/// Lines up several metrics into group comparisons, ROC/AUC summaries,
/// cut-point tables, pairwise correlated-ROC tests, and box-plot data.
pub fn compare_metrics(
    metrics: &[MetricColumn],
    subjects: &BTreeMap<String, SubjectCovariates>,
    opts: &CompareOptions,
) -> Result<MetricsReport> {
    if metrics.is_empty() {
        return Err(Error::EmptyInput {
            what: "metric list".into(),
        });
    }
    let mut comparisons = Vec::new();
    let mut cutpoints = Vec::new();
    let mut roc_curves = Vec::new();
    let mut boxplots = Vec::new();
    let mut notes = Vec::new();

    for metric in metrics {
        if metric.scores.is_empty() {
            return Err(Error::EmptyInput {
                what: format!("scores for metric {}", metric.name),
            });
        }
        let cohort = oriented_cohort(metric, subjects)?;
        cohort.require_both_groups()?;

        // Raw-scale group summaries and the rank test.
        let raw_pd: Vec<f64> = cohort
            .entries
            .iter()
            .filter(|e| e.group == Group::Pd)
            .map(|e| if metric.pd_high { e.score } else { -e.score })
            .collect();
        let raw_control: Vec<f64> = cohort
            .entries
            .iter()
            .filter(|e| e.group == Group::Control)
            .map(|e| if metric.pd_high { e.score } else { -e.score })
            .collect();
        let (u, unadjusted_p) = mann_whitney_u(&raw_pd, &raw_control)?;

        // Adjusted significance: logistic regression of the label on the raw
        // metric plus demographic covariates (typing speed only when asked).
        let mut covariate_names = vec![
            "sex".to_string(),
            "age".to_string(),
            "education_years".to_string(),
        ];
        if metric.speed_covariate {
            covariate_names.push("typing_speed".to_string());
        }
        let mut reg_entries = Vec::new();
        let mut dropped_missing = 0usize;
        for (id, raw) in &metric.scores {
            let info = &subjects[id];
            let speed = if metric.speed_covariate {
                match info.typing_speed {
                    Some(s) => Some(s),
                    None => {
                        dropped_missing += 1;
                        continue;
                    }
                }
            } else {
                None
            };
            let mut entry = ScoredEntry::new(id.clone(), *raw, info.group);
            entry.covariates.insert("sex".into(), info.sex);
            entry.covariates.insert("age".into(), info.age);
            entry
                .covariates
                .insert("education_years".into(), info.education_years);
            if let Some(s) = speed {
                entry.covariates.insert("typing_speed".into(), s);
            }
            reg_entries.push(entry);
        }
        if dropped_missing > 0 {
            notes.push(format!(
                "{}: {} subject(s) lacked typing speed and were excluded from the adjusted model",
                metric.name, dropped_missing
            ));
        }
        let covariate_refs: Vec<&str> = covariate_names.iter().map(String::as_str).collect();
        let (adjusted_p, separation_flagged, adjusted_note) = match ScoredCohort::new(reg_entries)
            .and_then(|c| logistic_fit(&c, &metric.name, &covariate_refs))
        {
            Ok(fit) => {
                let p = fit.term(&metric.name).map(|t| t.p);
                (p, fit.separation, None)
            }
            Err(err) => (None, false, Some(err.to_string())),
        };
        if let Some(note) = &adjusted_note {
            notes.push(format!("{}: adjusted model unavailable ({note})", metric.name));
        }

        // Discrimination on the oriented scale.
        let curve = roc_curve(&cohort)?;
        let (ci_low, ci_high) = bootstrap_auc_ci(&cohort, opts.n_boot, opts.seed)?;
        let mut rows = Vec::new();
        for ratio in &opts.cost_ratios {
            let cp = match opts.prevalence {
                Some(pi) => {
                    youden_cutpoint_with_prevalence(&cohort, ratio.cost_fn, ratio.cost_fp, pi)?
                }
                None => youden_cutpoint(&cohort, ratio.cost_fn, ratio.cost_fp)?,
            };
            rows.push(cp);
        }

        let (n_pd, n_control) = cohort.counts();
        comparisons.push(GroupComparison {
            metric: metric.name.clone(),
            n_pd,
            n_control,
            mean_pd: mean(&raw_pd),
            sd_pd: sample_sd(&raw_pd),
            mean_control: mean(&raw_control),
            sd_control: sample_sd(&raw_control),
            mann_whitney_u: u,
            unadjusted_p,
            adjusted_p,
            adjusted_covariates: covariate_names,
            separation_flagged,
            adjusted_note,
            auc: curve.auc,
            auc_ci_low: ci_low,
            auc_ci_high: ci_high,
        });
        cutpoints.push(CutPointTable {
            metric: metric.name.clone(),
            rows,
        });
        roc_curves.push((metric.name.clone(), curve));
        boxplots.push(boxplot_row(&metric.name, Group::Pd, &raw_pd)?);
        boxplots.push(boxplot_row(&metric.name, Group::Control, &raw_control)?);
    }

    // Pairwise correlated-ROC tests on common subjects.
    let mut delong = Vec::new();
    for i in 0..metrics.len() {
        for j in i + 1..metrics.len() {
            let (a, b) = (&metrics[i], &metrics[j]);
            let common: Vec<&String> = a
                .scores
                .keys()
                .filter(|id| b.scores.contains_key(*id))
                .collect();
            if common.is_empty() {
                return Err(Error::EmptyInput {
                    what: format!("common subjects for {} vs {}", a.name, b.name),
                });
            }
            let build = |m: &MetricColumn| -> Result<ScoredCohort> {
                let entries = common
                    .iter()
                    .map(|id| {
                        let raw = m.scores[*id];
                        let score = if m.pd_high { raw } else { -raw };
                        ScoredEntry::new((*id).clone(), score, subjects[*id].group)
                    })
                    .collect();
                ScoredCohort::new(entries)
            };
            let ca = build(a)?;
            let cb = build(b)?;
            let (n_pd, n_control) = ca.counts();
            if n_pd < 2 || n_control < 2 {
                notes.push(format!(
                    "{} vs {}: too few common subjects per group for a paired AUC test",
                    a.name, b.name
                ));
                continue;
            }
            let res = delong_test(&ca, &cb)?;
            delong.push(DelongComparison {
                metric_a: a.name.clone(),
                metric_b: b.name.clone(),
                n_pd,
                n_control,
                auc_a: res.auc_a,
                auc_b: res.auc_b,
                z: res.z,
                p: res.p,
            });
        }
    }

    Ok(MetricsReport {
        comparisons,
        delong,
        cutpoints,
        roc_curves,
        boxplots,
        notes,
    })
}

/// Report for window-level scores: rank test, ROC, cut-points and box plots.
/// Covariate adjustment is skipped — it is defined per subject, not per
/// window — and the n columns count windows.
pub fn window_level_report(
    metric_name: &str,
    cohort: &ScoredCohort,
    opts: &CompareOptions,
) -> Result<MetricsReport> {
    cohort.require_both_groups()?;
    let pd = cohort.group_scores(Group::Pd);
    let control = cohort.group_scores(Group::Control);
    let (u, unadjusted_p) = mann_whitney_u(&pd, &control)?;
    let curve = roc_curve(cohort)?;
    let (ci_low, ci_high) = bootstrap_auc_ci(cohort, opts.n_boot, opts.seed)?;
    let mut rows = Vec::new();
    for ratio in &opts.cost_ratios {
        let cp = match opts.prevalence {
            Some(pi) => youden_cutpoint_with_prevalence(cohort, ratio.cost_fn, ratio.cost_fp, pi)?,
            None => youden_cutpoint(cohort, ratio.cost_fn, ratio.cost_fp)?,
        };
        rows.push(cp);
    }
    let (n_pd, n_control) = cohort.counts();
    let note = "window-level mode: every window scored independently; covariate adjustment skipped";
    Ok(MetricsReport {
        comparisons: vec![GroupComparison {
            metric: metric_name.to_string(),
            n_pd,
            n_control,
            mean_pd: mean(&pd),
            sd_pd: sample_sd(&pd),
            mean_control: mean(&control),
            sd_control: sample_sd(&control),
            mann_whitney_u: u,
            unadjusted_p,
            adjusted_p: None,
            adjusted_covariates: Vec::new(),
            separation_flagged: false,
            adjusted_note: Some(note.to_string()),
            auc: curve.auc,
            auc_ci_low: ci_low,
            auc_ci_high: ci_high,
        }],
        delong: Vec::new(),
        cutpoints: vec![CutPointTable {
            metric: metric_name.to_string(),
            rows,
        }],
        roc_curves: vec![(metric_name.to_string(), curve)],
        boxplots: vec![
            boxplot_row(metric_name, Group::Pd, &pd)?,
            boxplot_row(metric_name, Group::Control, &control)?,
        ],
        notes: vec![note.to_string()],
    })
}
