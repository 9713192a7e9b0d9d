//! Rendering of evaluation results: aligned text tables for humans, JSON for
//! machines, and CSV point files for external plotting tools.

use std::io::Write;

use crate::ensemble::CrossValidation;
use crate::error::{Error, Result};
use crate::evalstats::{MetricsReport, RocCurve};

/// Formats a p-value for tables: three decimals, with a floor label below
/// 0.001 the way clinical tables print it.
fn fmt_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}

fn fmt3(v: f64) -> String {
    format!("{v:.3}")
}

/// Pads rows into aligned columns (first row is the header).
fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(cell);
            if i + 1 < row.len() {
                for _ in cell.len()..widths[i] {
                    line.push(' ');
                }
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn provenance_header(provenance: &[String]) -> String {
    let mut out = String::new();
    for line in provenance {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Human-readable evaluation report: group comparison, pairwise AUC tests,
/// and operating points, headed by the configuration that produced it.
pub fn render_metrics_text(report: &MetricsReport, provenance: &[String]) -> String {
    let mut out = provenance_header(provenance);

    out.push_str("\n== Group comparison ==\n");
    let mut rows = vec![vec![
        "metric".to_string(),
        "n PD".to_string(),
        "n CT".to_string(),
        "PD mean (sd)".to_string(),
        "control mean (sd)".to_string(),
        "U".to_string(),
        "p".to_string(),
        "adj. p".to_string(),
        "AUC (95% CI)".to_string(),
    ]];
    for c in &report.comparisons {
        rows.push(vec![
            c.metric.clone(),
            c.n_pd.to_string(),
            c.n_control.to_string(),
            format!("{} ({})", fmt3(c.mean_pd), fmt3(c.sd_pd)),
            format!("{} ({})", fmt3(c.mean_control), fmt3(c.sd_control)),
            format!("{:.1}", c.mann_whitney_u),
            fmt_p(c.unadjusted_p),
            match c.adjusted_p {
                Some(p) => fmt_p(p),
                None => "-".to_string(),
            },
            format!(
                "{} ({}-{})",
                fmt3(c.auc),
                fmt3(c.auc_ci_low),
                fmt3(c.auc_ci_high)
            ),
        ]);
    }
    out.push_str(&align(&rows));

    if !report.delong.is_empty() {
        out.push_str("\n== Pairwise AUC comparison ==\n");
        let mut rows = vec![vec![
            "metrics".to_string(),
            "n PD".to_string(),
            "n CT".to_string(),
            "AUC A".to_string(),
            "AUC B".to_string(),
            "z".to_string(),
            "p".to_string(),
        ]];
        for d in &report.delong {
            rows.push(vec![
                format!("{} vs {}", d.metric_a, d.metric_b),
                d.n_pd.to_string(),
                d.n_control.to_string(),
                fmt3(d.auc_a),
                fmt3(d.auc_b),
                fmt3(d.z),
                fmt_p(d.p),
            ]);
        }
        out.push_str(&align(&rows));
    }

    if !report.cutpoints.is_empty() {
        out.push_str("\n== Operating points ==\n");
        let mut rows = vec![vec![
            "metric".to_string(),
            "cost FN/FP".to_string(),
            "threshold".to_string(),
            "Se".to_string(),
            "Sp".to_string(),
            "accuracy".to_string(),
            "TP".to_string(),
            "FN".to_string(),
            "TN".to_string(),
            "FP".to_string(),
        ]];
        for table in &report.cutpoints {
            for r in &table.rows {
                rows.push(vec![
                    table.metric.clone(),
                    format!("{}/{}", r.cost_fn, r.cost_fp),
                    fmt3(r.threshold),
                    fmt3(r.sensitivity),
                    fmt3(r.specificity),
                    fmt3(r.accuracy),
                    r.true_positives.to_string(),
                    r.false_negatives.to_string(),
                    r.true_negatives.to_string(),
                    r.false_positives.to_string(),
                ]);
            }
        }
        out.push_str(&align(&rows));
    }

    if !report.notes.is_empty() {
        out.push_str("\nnotes:\n");
        for n in &report.notes {
            out.push_str("- ");
            out.push_str(n);
            out.push('\n');
        }
    }
    out
}

/// Human-readable cross-dataset validation table: one row per direction plus
/// the pooled held-out scores.
pub fn render_crossval_text(cv: &CrossValidation, provenance: &[String]) -> String {
    let mut out = provenance_header(provenance);
    out.push_str("\n== Cross-dataset validation ==\n");
    let mut rows = vec![vec![
        "train -> test".to_string(),
        "n PD".to_string(),
        "n CT".to_string(),
        "AUC".to_string(),
        "95% CI".to_string(),
    ]];
    for fold in &cv.folds {
        rows.push(vec![
            format!("{} -> {}", fold.train_tag, fold.test_tag),
            fold.n_pd.to_string(),
            fold.n_control.to_string(),
            fmt3(fold.auc),
            format!("{}-{}", fmt3(fold.ci_low), fmt3(fold.ci_high)),
        ]);
    }
    rows.push(vec![
        "combined".to_string(),
        cv.combined_n_pd.to_string(),
        cv.combined_n_control.to_string(),
        fmt3(cv.combined_auc),
        format!(
            "{}-{}",
            fmt3(cv.combined_ci_low),
            fmt3(cv.combined_ci_high)
        ),
    ]);
    out.push_str(&align(&rows));
    out
}

/// Machine-readable evaluation report.
pub fn metrics_json(report: &MetricsReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::invalid("report", e.to_string()))
}

/// Machine-readable cross-validation result.
pub fn crossval_json(cv: &CrossValidation) -> Result<String> {
    serde_json::to_string_pretty(cv).map_err(|e| Error::invalid("report", e.to_string()))
}

/// ROC points for plotting, one row per candidate threshold.
pub fn write_roc_csv<W: Write>(curve: &RocCurve, mut w: W) -> std::io::Result<()> {
    writeln!(w, "threshold,sensitivity,specificity")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.threshold, p.sensitivity, p.specificity)?;
    }
    Ok(())
}

/// All chosen operating points across metrics and cost ratios.
pub fn write_cutpoints_csv<W: Write>(report: &MetricsReport, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "metric,cost_fn,cost_fp,threshold,sensitivity,specificity,accuracy,tp,fn,tn,fp"
    )?;
    for table in &report.cutpoints {
        for r in &table.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                table.metric,
                r.cost_fn,
                r.cost_fp,
                r.threshold,
                r.sensitivity,
                r.specificity,
                r.accuracy,
                r.true_positives,
                r.false_negatives,
                r.true_negatives,
                r.false_positives
            )?;
        }
    }
    Ok(())
}

/// Five-number summaries per metric and group, for box plots.
pub fn write_boxplots_csv<W: Write>(report: &MetricsReport, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "metric,group,n,whisker_low,q1,median,q3,whisker_high"
    )?;
    for b in &report.boxplots {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            b.metric,
            b.group.as_str(),
            b.n,
            b.whisker_low,
            b.q1,
            b.median,
            b.q3,
            b.whisker_high
        )?;
    }
    Ok(())
}
