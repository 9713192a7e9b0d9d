//! Implementations of the `nqi` subcommands. Each function is a pure mapping
//! from (input files, configuration) to output files: reruns produce
//! byte-identical results, and every file is written atomically so failures
//! never leave partial outputs behind.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::path::Path;

use crate::config::RunConfig;
use crate::ensemble::{self, TrainingCorpus};
use crate::error::{Error, Result};
use crate::evalstats::{self, CompareOptions, ScoredCohort, ScoredEntry};
use crate::featurize;
use crate::fsutil::atomic_write;
use crate::keystroke::{self, CohortDataset, TypingSession, ValidationPolicy};
use crate::report;
use crate::synthcohort::{self, CohortSpec};

fn policy(config: &RunConfig) -> ValidationPolicy {
    ValidationPolicy {
        max_hold_s: config.max_hold_s,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Mean typing speed (keys per minute) per subject over the sessions where
/// it is defined; subjects with no measurable session are omitted.
fn subject_typing_speeds(sessions: &[TypingSession]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for s in sessions {
        if let Ok(speed) = s.typing_speed() {
            let cell = acc.entry(s.subject_id.as_str()).or_insert((0.0, 0));
            cell.0 += speed;
            cell.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(id, (sum, n))| (id.to_string(), sum / n as f64))
        .collect()
}

const SPEEDS_HEADER: &str = "subject_id,typing_speed";

fn write_speeds(speeds: &BTreeMap<String, f64>) -> String {
    let mut out = String::from(SPEEDS_HEADER);
    out.push('\n');
    for (id, v) in speeds {
        out.push_str(&format!("{id},{v}\n"));
    }
    out
}

fn read_speeds(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let source = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SPEEDS_HEADER => {}
        Some(_) => return Err(Error::malformed(&source, 1, "unexpected header")),
        None => return Ok(BTreeMap::new()),
    }
    let mut out = BTreeMap::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::malformed(
                &source,
                lineno,
                format!("expected 2 fields, got {}", fields.len()),
            ));
        }
        let v: f64 = fields[1]
            .parse()
            .map_err(|e| Error::malformed(&source, lineno, format!("typing_speed: {e}")))?;
        if !v.is_finite() {
            return Err(Error::malformed(&source, lineno, "non-finite typing_speed"));
        }
        if out.insert(fields[0].to_string(), v).is_some() {
            return Err(Error::malformed(
                &source,
                lineno,
                format!("duplicate subject {}", fields[0]),
            ));
        }
    }
    Ok(out)
}

/// `featurize`: keystroke log → window feature CSV (plus, optionally, the
/// per-subject typing speeds used later as a covariate).
pub fn cmd_featurize(
    log: &Path,
    out: &Path,
    speeds_out: Option<&Path>,
    config: &RunConfig,
) -> Result<()> {
    config.validate()?;
    let sessions = keystroke::ingest_log(log, &policy(config))?;
    if sessions.is_empty() {
        eprintln!("warning: {} contains no sessions", log.display());
    }
    for s in &sessions {
        if s.warnings.total() > 0 {
            eprintln!(
                "warning: {}/{}: dropped {} event(s) during validation ({} ineligible key, {} non-positive hold, {} over the stuck-key cutoff)",
                s.subject_id,
                s.session_id,
                s.warnings.total(),
                s.warnings.other_key,
                s.warnings.nonpositive_hold,
                s.warnings.excessive_hold,
            );
        }
    }
    let rows = featurize::featurize_dataset(&sessions, config.window_s, config.min_keys);
    let produced: BTreeSet<(&str, &str)> = rows
        .iter()
        .map(|r| (r.subject_id.as_str(), r.session_id.as_str()))
        .collect();
    for s in &sessions {
        if !produced.contains(&(s.subject_id.as_str(), s.session_id.as_str())) {
            eprintln!(
                "warning: {}/{}: no window reached {} hold times; session contributes no features",
                s.subject_id, s.session_id, config.min_keys
            );
        }
    }
    let mut buf = Vec::new();
    featurize::write_features(&rows, &mut buf).map_err(|e| Error::io(out, e))?;
    atomic_write(out, &buf)?;
    if let Some(speeds_path) = speeds_out {
        let speeds = subject_typing_speeds(&sessions);
        atomic_write(speeds_path, write_speeds(&speeds).as_bytes())?;
    }
    Ok(())
}

/// Provenance tag for a training corpus: the sorted distinct dataset tags of
/// the subjects it came from.
fn corpus_tag(cohort: &CohortDataset) -> String {
    let tags: BTreeSet<&str> = cohort.subjects.iter().map(|s| s.dataset.as_str()).collect();
    tags.into_iter().collect::<Vec<_>>().join("+")
}

/// `train`: feature CSV + metadata CSV → model file.
pub fn cmd_train(features: &Path, metadata: &Path, model_out: &Path, config: &RunConfig) -> Result<()> {
    config.validate()?;
    let rows = featurize::read_features(features)?;
    let subjects = keystroke::read_metadata(metadata)?;
    let cohort = CohortDataset::new(subjects, Vec::new())?;
    let corpus = TrainingCorpus::from_features(
        &rows,
        &cohort,
        config.normalization_constant,
        corpus_tag(&cohort),
    )?;
    let model = ensemble::train_ensemble(&corpus, config)?;
    ensemble::save_model(&model, model_out)
}

/// `score`: model + keystroke log → window scores and/or subject scores.
/// With no output paths, the subject table goes to standard output.
pub fn cmd_score(
    model_path: &Path,
    log: &Path,
    windows_out: Option<&Path>,
    subjects_out: Option<&Path>,
    config: &RunConfig,
) -> Result<()> {
    config.validate()?;
    let model = ensemble::load_model(model_path)?;
    let sessions = keystroke::ingest_log(log, &policy(config))?;
    let rows = featurize::featurize_dataset(&sessions, config.window_s, config.min_keys);
    if rows.is_empty() {
        return Err(Error::InsufficientData {
            reason: format!(
                "no window in {} reached {} hold times",
                log.display(),
                config.min_keys
            ),
        });
    }
    let window_scores = ensemble::score_windows(&model, &rows);
    let rollup = ensemble::subject_rollup(&window_scores)?;
    if let Some(path) = windows_out {
        let mut buf = Vec::new();
        ensemble::write_window_scores(&window_scores, &mut buf).map_err(|e| Error::io(path, e))?;
        atomic_write(path, &buf)?;
    }
    match subjects_out {
        Some(path) => {
            let mut buf = Vec::new();
            ensemble::write_subject_scores(&rollup, &mut buf).map_err(|e| Error::io(path, e))?;
            atomic_write(path, &buf)?;
        }
        None => {
            if windows_out.is_none() {
                let mut buf = Vec::new();
                ensemble::write_subject_scores(&rollup, &mut buf)
                    .map_err(|e| Error::io(Path::new("stdout"), e))?;
                print!("{}", String::from_utf8_lossy(&buf));
            }
        }
    }
    Ok(())
}

fn load_cohort(log: &Path, metadata: &Path, config: &RunConfig) -> Result<CohortDataset> {
    let sessions = keystroke::ingest_log(log, &policy(config))?;
    let subjects = keystroke::read_metadata(metadata)?;
    CohortDataset::new(subjects, sessions)
}

/// `crossval`: two disjoint cohorts → models trained on each, scored on the
/// other, with per-fold and pooled discrimination tables.
pub fn cmd_crossval(
    log_a: &Path,
    metadata_a: &Path,
    log_b: &Path,
    metadata_b: &Path,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<()> {
    config.validate()?;
    ensure_dir(out_dir)?;
    let fold_a = load_cohort(log_a, metadata_a, config)?;
    let fold_b = load_cohort(log_b, metadata_b, config)?;
    let cv = ensemble::cross_validate(&fold_a, &fold_b, config)?;

    for fold in &cv.folds {
        let rollup: BTreeMap<String, f64> = fold
            .subject_scores
            .iter()
            .map(|s| (s.subject_id.clone(), s.value))
            .collect();
        let mut buf = Vec::new();
        ensemble::write_subject_scores(&rollup, &mut buf).map_err(|e| Error::io(out_dir, e))?;
        atomic_write(&out_dir.join(format!("scores_{}.csv", fold.test_tag)), &buf)?;
    }
    let combined: BTreeMap<String, f64> = cv
        .folds
        .iter()
        .flat_map(|f| f.subject_scores.iter())
        .map(|s| (s.subject_id.clone(), s.value))
        .collect();
    let mut buf = Vec::new();
    ensemble::write_subject_scores(&combined, &mut buf).map_err(|e| Error::io(out_dir, e))?;
    atomic_write(&out_dir.join("scores_combined.csv"), &buf)?;

    let text = report::render_crossval_text(&cv, &config.provenance_lines());
    atomic_write(&out_dir.join("crossval_report.txt"), text.as_bytes())?;
    atomic_write(
        &out_dir.join("crossval.json"),
        report::crossval_json(&cv)?.as_bytes(),
    )?;
    print!("{text}");
    Ok(())
}

/// `evaluate`: subject scores + metadata → group comparison, pairwise AUC
/// tests, operating points, ROC/box-plot point files.
///
/// `per_window` switches the score input to the window-score CSV and reports
/// window-level discrimination instead (no covariate adjustment).
#[allow(clippy::too_many_arguments)]
pub fn cmd_evaluate(
    scores: &Path,
    metadata: &Path,
    speeds: Option<&Path>,
    per_window: bool,
    prevalence: Option<f64>,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<()> {
    config.validate()?;
    if let Some(pi) = prevalence {
        if !(pi.is_finite() && 0.0 < pi && pi < 1.0) {
            return Err(Error::invalid(
                "evaluation",
                format!("prevalence {pi} outside (0, 1)"),
            ));
        }
    }
    ensure_dir(out_dir)?;
    let subjects = keystroke::read_metadata(metadata)?;
    let cohort_meta = CohortDataset::new(subjects, Vec::new())?;
    let options = CompareOptions {
        n_boot: config.n_boot,
        seed: config.master_seed,
        cost_ratios: config.cost_ratios.clone(),
        prevalence,
    };

    let metrics_report = if per_window {
        let file = std::fs::File::open(scores).map_err(|e| Error::io(scores, e))?;
        let window_scores = ensemble::read_window_scores(
            BufReader::new(file),
            &scores.display().to_string(),
        )?;
        if window_scores.is_empty() {
            return Err(Error::EmptyInput {
                what: format!("window scores in {}", scores.display()),
            });
        }
        let mut entries = Vec::with_capacity(window_scores.len());
        for s in &window_scores {
            let record = cohort_meta
                .subject(&s.subject_id)
                .ok_or_else(|| Error::UnknownSubject {
                    subject_id: s.subject_id.clone(),
                    context: "window scores".into(),
                })?;
            let id = format!(
                "{}/{}/{}",
                s.subject_id,
                s.session_id.as_deref().unwrap_or(""),
                s.window_index.map_or(String::new(), |i| i.to_string())
            );
            entries.push(ScoredEntry::new(id, s.value, record.group));
        }
        let window_cohort = ScoredCohort::per_window(entries)?;
        evalstats::window_level_report("nqi_window", &window_cohort, &options)?
    } else {
        let file = std::fs::File::open(scores).map_err(|e| Error::io(scores, e))?;
        let nqi = ensemble::read_subject_scores(
            BufReader::new(file),
            &scores.display().to_string(),
        )?;
        if nqi.is_empty() {
            return Err(Error::EmptyInput {
                what: format!("subject scores in {}", scores.display()),
            });
        }
        let speed_map = match speeds {
            Some(path) => read_speeds(path)?,
            None => BTreeMap::new(),
        };
        let (metrics, covariates) = ensemble::evaluation_inputs(&cohort_meta, &nqi, &speed_map)?;
        evalstats::compare_metrics(&metrics, &covariates, &options)?
    };

    let text = report::render_metrics_text(&metrics_report, &config.provenance_lines());
    atomic_write(&out_dir.join("report.txt"), text.as_bytes())?;
    atomic_write(
        &out_dir.join("report.json"),
        report::metrics_json(&metrics_report)?.as_bytes(),
    )?;
    for (name, curve) in &metrics_report.roc_curves {
        let mut buf = Vec::new();
        report::write_roc_csv(curve, &mut buf).map_err(|e| Error::io(out_dir, e))?;
        atomic_write(&out_dir.join(format!("roc_{name}.csv")), &buf)?;
    }
    let mut buf = Vec::new();
    report::write_cutpoints_csv(&metrics_report, &mut buf).map_err(|e| Error::io(out_dir, e))?;
    atomic_write(&out_dir.join("cutpoints.csv"), &buf)?;
    let mut buf = Vec::new();
    report::write_boxplots_csv(&metrics_report, &mut buf).map_err(|e| Error::io(out_dir, e))?;
    atomic_write(&out_dir.join("boxplots.csv"), &buf)?;
    print!("{text}");
    Ok(())
}

/// File names `simulate` writes into its output directory.
pub const SIM_LOG_NAME: &str = "keystrokes.csv";
pub const SIM_METADATA_NAME: &str = "subjects.csv";

/// `simulate`: cohort spec → keystroke log and metadata files.
pub fn cmd_simulate(spec: &CohortSpec, out_dir: &Path, master_seed: u64) -> Result<()> {
    ensure_dir(out_dir)?;
    let cohort = synthcohort::generate_cohort(spec, master_seed)?;
    let mut log_buf = Vec::new();
    keystroke::write_log(&cohort.sessions, &mut log_buf).map_err(|e| Error::io(out_dir, e))?;
    atomic_write(&out_dir.join(SIM_LOG_NAME), &log_buf)?;
    let mut meta_buf = Vec::new();
    keystroke::write_metadata(&cohort.subjects, &mut meta_buf)
        .map_err(|e| Error::io(out_dir, e))?;
    atomic_write(&out_dir.join(SIM_METADATA_NAME), &meta_buf)?;
    eprintln!(
        "simulated {} subjects ({} affected, {} controls), {} sessions",
        cohort.subjects.len(),
        spec.n_pd,
        spec.n_control,
        cohort.sessions.len()
    );
    Ok(())
}

/// Loads a cohort spec from a TOML file.
pub fn read_cohort_spec(path: &Path) -> Result<CohortSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: CohortSpec = toml::from_str(&text).map_err(|e| Error::Config {
        reason: format!("{}: {e}", path.display()),
    })?;
    spec.validate()?;
    Ok(spec)
}
