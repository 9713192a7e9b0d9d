//! Bagged linear-SVR ensemble: training corpora, bootstrap resampling,
//! median aggregation into per-window nQi, session/subject rollups,
//! cross-dataset validation, grid search, and the model file format.
//!
//! Determinism contract: (corpus, parameters, master seed) fully determine
//! every serialized byte of a trained model regardless of thread count. Each
//! unit's bootstrap generator is derived from (master_seed, unit index), and
//! parallel iteration is by index, so scheduling cannot reorder randomness.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{BaggingUnit, RunConfig};
use crate::error::{Error, Result};
use crate::evalstats::{self, roc, ScoredCohort, ScoredEntry};
use crate::featurize::{self, FeatureRow, FeatureVector, FEATURE_DIM};
use crate::keystroke::{CohortDataset, Dataset, Group};
use crate::seeds::{self, domain};

/// Model file format version; bump on any incompatible layout change.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// One training row: a window's feature vector with its subject's
/// normalized clinical target.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRow {
    pub subject_id: String,
    pub session_id: String,
    pub window_index: usize,
    pub features: [f64; FEATURE_DIM],
    /// Motor-exam total scaled into [0, 1].
    pub target: f64,
}

/// Feature rows joined with normalized targets, ready for bagging.
#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    pub rows: Vec<CorpusRow>,
    pub normalization_constant: f64,
    /// Tag describing where the rows came from (e.g. a dataset name).
    pub provenance: String,
}

impl TrainingCorpus {
    /// Joins feature rows with subject records; each target is the subject's
    /// motor score divided by `normalization_constant`.
    pub fn from_features(
        rows: &[FeatureRow],
        cohort: &CohortDataset,
        normalization_constant: f64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if !(normalization_constant.is_finite() && normalization_constant > 0.0) {
            return Err(Error::invalid(
                "training corpus",
                "normalization constant must be positive",
            ));
        }
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            let record = cohort
                .subject(&row.subject_id)
                .ok_or_else(|| Error::UnknownSubject {
                    subject_id: row.subject_id.clone(),
                    context: "feature rows".into(),
                })?;
            let target = f64::from(record.updrs3) / normalization_constant;
            if !(0.0..=1.0).contains(&target) {
                return Err(Error::invalid(
                    "training corpus",
                    format!(
                        "subject {}: normalized target {target} outside [0, 1]",
                        row.subject_id
                    ),
                ));
            }
            out.push(CorpusRow {
                subject_id: row.subject_id.clone(),
                session_id: row.session_id.clone(),
                window_index: row.window_index,
                features: row.features.as_array(),
                target,
            });
        }
        Ok(TrainingCorpus {
            rows: out,
            normalization_constant,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct subject ids in sorted order.
    pub fn subject_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.rows.iter().map(|r| r.subject_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Uniform resample of `corpus.len()` rows with replacement.
pub fn bootstrap_sample(corpus: &TrainingCorpus, seed: u64) -> TrainingCorpus {
    bootstrap_sample_by(corpus, seed, BaggingUnit::Window)
}

/// Resample by window row or by whole subject, per the bagging knob.
pub fn bootstrap_sample_by(
    corpus: &TrainingCorpus,
    seed: u64,
    unit: BaggingUnit,
) -> TrainingCorpus {
    let indices = bootstrap_indices(corpus, seed, unit);
    TrainingCorpus {
        rows: indices.iter().map(|&i| corpus.rows[i].clone()).collect(),
        normalization_constant: corpus.normalization_constant,
        provenance: corpus.provenance.clone(),
    }
}

/// Index form of the bootstrap, used internally to avoid cloning rows.
fn bootstrap_indices(corpus: &TrainingCorpus, seed: u64, unit: BaggingUnit) -> Vec<usize> {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    match unit {
        BaggingUnit::Window => {
            let l = corpus.rows.len();
            (0..l).map(|_| rng.random_range(0..l)).collect()
        }
        BaggingUnit::Subject => {
            let ids = corpus.subject_ids();
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, row) in corpus.rows.iter().enumerate() {
                by_subject.entry(row.subject_id.as_str()).or_default().push(i);
            }
            let mut out = Vec::with_capacity(corpus.rows.len());
            for _ in 0..ids.len() {
                let pick = ids[rng.random_range(0..ids.len())];
                out.extend_from_slice(&by_subject[pick]);
            }
            out
        }
    }
}

/// One trained regression unit: a hyperplane over the feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearUnit {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Per-feature affine scaling applied before every unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl FeatureScaling {
    fn apply(&self, x: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut out = *x;
        for i in 0..FEATURE_DIM {
            out[i] = (out[i] - self.means[i]) / self.stds[i];
        }
        out
    }
}

/// A bagged ensemble plus everything needed to reproduce or apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub format_version: u32,
    pub c: f64,
    pub epsilon: f64,
    pub n_models: usize,
    pub master_seed: u64,
    pub normalization_constant: f64,
    /// Tag of the corpus the model was trained on.
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_scaling: Option<FeatureScaling>,
    pub units: Vec<LinearUnit>,
}

impl EnsembleModel {
    /// Structural checks shared by training and deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(
                "model file",
                format!(
                    "format version {} (this build reads {})",
                    self.format_version, MODEL_FORMAT_VERSION
                ),
            ));
        }
        if self.units.len() != self.n_models {
            return Err(Error::invalid(
                "model file",
                format!("{} units but n_models = {}", self.units.len(), self.n_models),
            ));
        }
        if self.units.is_empty() {
            return Err(Error::EmptyInput {
                what: "ensemble units".into(),
            });
        }
        for (i, u) in self.units.iter().enumerate() {
            if u.weights.len() != FEATURE_DIM {
                return Err(Error::DimensionMismatch {
                    expected: FEATURE_DIM,
                    got: u.weights.len(),
                });
            }
            if u.weights.iter().any(|w| !w.is_finite()) || !u.bias.is_finite() {
                return Err(Error::invalid("model file", format!("unit {i} not finite")));
            }
        }
        if let Some(s) = &self.feature_scaling {
            if s.means.len() != FEATURE_DIM || s.stds.len() != FEATURE_DIM {
                return Err(Error::DimensionMismatch {
                    expected: FEATURE_DIM,
                    got: s.means.len().min(s.stds.len()),
                });
            }
            if s.stds.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::invalid("model file", "non-positive feature scale"));
            }
        }
        if !(self.c.is_finite() && self.c > 0.0)
            || !(self.epsilon.is_finite() && self.epsilon >= 0.0)
        {
            return Err(Error::invalid("model file", "invalid c or epsilon"));
        }
        Ok(())
    }
}

/// A score attached to a subject, optionally narrowed to session/window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NqiScore {
    pub subject_id: String,
    pub session_id: Option<String>,
    pub window_index: Option<usize>,
    pub value: f64,
}

/// Trains the bagged ensemble. Every unit must converge; a failed unit
/// aborts training and names its index.
pub fn train_ensemble(corpus: &TrainingCorpus, config: &RunConfig) -> Result<EnsembleModel> {
    if corpus.rows.is_empty() {
        return Err(Error::EmptyInput {
            what: "training corpus".into(),
        });
    }
    let distinct = corpus
        .rows
        .iter()
        .any(|r| r.features != corpus.rows[0].features || r.target != corpus.rows[0].target);
    if corpus.rows.len() < 2 {
        return Err(Error::InsufficientData {
            reason: "training needs at least 2 corpus rows".into(),
        });
    }
    // A corpus of identical rows is degenerate but well-defined (constant
    // targets); `distinct` only gates nothing here — recorded for clarity.
    let _ = distinct;
    if config.n_models == 0 {
        return Err(Error::invalid("ensemble", "n_models must be positive"));
    }

    let scaling = if config.standardize_features {
        Some(fit_scaling(corpus))
    } else {
        None
    };
    let scaled: Vec<[f64; FEATURE_DIM]> = match &scaling {
        Some(s) => corpus.rows.iter().map(|r| s.apply(&r.features)).collect(),
        None => corpus.rows.iter().map(|r| r.features).collect(),
    };

    let results: Vec<Result<LinearUnit>> = (0..config.n_models)
        .into_par_iter()
        .map(|m| {
            let seed = seeds::derive_seed(config.master_seed, domain::ENSEMBLE_UNIT, m as u64);
            let indices = bootstrap_indices(corpus, seed, config.bagging_unit);
            let inputs: Vec<Vec<f64>> = indices.iter().map(|&i| scaled[i].to_vec()).collect();
            let targets: Vec<f64> = indices.iter().map(|&i| corpus.rows[i].target).collect();
            let problem = crate::svr::SvrProblem::new(inputs, targets, config.c, config.epsilon)?;
            let model = crate::svr::train_svr(&problem, config.tol, config.max_iter)?;
            Ok(LinearUnit {
                weights: model.weights,
                bias: model.bias,
            })
        })
        .collect();

    let mut units = Vec::with_capacity(config.n_models);
    for (m, res) in results.into_iter().enumerate() {
        match res {
            Ok(unit) => units.push(unit),
            Err(e) => {
                return Err(Error::EnsembleUnit {
                    unit: m,
                    source: Box::new(e),
                })
            }
        }
    }

    let model = EnsembleModel {
        format_version: MODEL_FORMAT_VERSION,
        c: config.c,
        epsilon: config.epsilon,
        n_models: config.n_models,
        master_seed: config.master_seed,
        normalization_constant: config.normalization_constant,
        provenance: corpus.provenance.clone(),
        feature_scaling: scaling,
        units,
    };
    model.validate()?;
    Ok(model)
}

fn fit_scaling(corpus: &TrainingCorpus) -> FeatureScaling {
    let n = corpus.rows.len() as f64;
    let mut means = vec![0.0; FEATURE_DIM];
    for r in &corpus.rows {
        for (m, v) in means.iter_mut().zip(&r.features) {
            *m += v;
        }
    }
    for m in means.iter_mut() {
        *m /= n;
    }
    let mut stds = vec![0.0; FEATURE_DIM];
    for r in &corpus.rows {
        for i in 0..FEATURE_DIM {
            let d = r.features[i] - means[i];
            stds[i] += d * d;
        }
    }
    for s in stds.iter_mut() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0; // constant feature: leave it centered, unscaled
        }
    }
    FeatureScaling { means, stds }
}

/// Median of the unit predictions for one window (midpoint of the two
/// central order statistics when the unit count is even).
pub fn window_nqi(model: &EnsembleModel, features: &FeatureVector) -> f64 {
    let raw = features.as_array();
    let x = match &model.feature_scaling {
        Some(s) => s.apply(&raw),
        None => raw,
    };
    let mut preds: Vec<f64> = model
        .units
        .iter()
        .map(|u| u.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + u.bias)
        .collect();
    preds.sort_by(f64::total_cmp);
    let n = preds.len();
    if n % 2 == 1 {
        preds[n / 2]
    } else {
        0.5 * (preds[n / 2 - 1] + preds[n / 2])
    }
}

/// Scores every feature row; output keeps the input's ordering.
pub fn score_windows(model: &EnsembleModel, rows: &[FeatureRow]) -> Vec<NqiScore> {
    rows.iter()
        .map(|row| NqiScore {
            subject_id: row.subject_id.clone(),
            session_id: Some(row.session_id.clone()),
            window_index: Some(row.window_index),
            value: window_nqi(model, &row.features),
        })
        .collect()
}

/// Collapses window scores into one value per subject: the mean over
/// sessions of each session's mean window score.
pub fn subject_rollup(window_scores: &[NqiScore]) -> Result<BTreeMap<String, f64>> {
    // subject -> session -> (sum, count)
    let mut acc: BTreeMap<&str, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
    for s in window_scores {
        let session = s.session_id.as_deref().ok_or_else(|| {
            Error::invalid("window scores", "missing session id in window score")
        })?;
        let cell = acc
            .entry(s.subject_id.as_str())
            .or_default()
            .entry(session)
            .or_insert((0.0, 0));
        cell.0 += s.value;
        cell.1 += 1;
    }
    let mut out = BTreeMap::new();
    for (subject, sessions) in acc {
        let mut total = 0.0;
        for (sum, count) in sessions.values() {
            total += sum / *count as f64;
        }
        out.insert(subject.to_string(), total / sessions.len() as f64);
    }
    Ok(out)
}

/// Featurizes one subject's sessions and rolls their windows up to a single
/// score. Errors when no window survives the hold-time minimum.
pub fn subject_nqi(
    model: &EnsembleModel,
    dataset: &CohortDataset,
    subject_id: &str,
    config: &RunConfig,
) -> Result<NqiScore> {
    if dataset.subject(subject_id).is_none() {
        return Err(Error::UnknownSubject {
            subject_id: subject_id.to_string(),
            context: "subject scoring".into(),
        });
    }
    let sessions: Vec<_> = dataset
        .sessions_of(subject_id)
        .into_iter()
        .cloned()
        .collect();
    let rows = featurize::featurize_dataset(&sessions, config.window_s, config.min_keys);
    if rows.is_empty() {
        return Err(Error::InsufficientData {
            reason: format!("subject {subject_id} has no window with enough hold times"),
        });
    }
    let scores = score_windows(model, &rows);
    let rollup = subject_rollup(&scores)?;
    Ok(NqiScore {
        subject_id: subject_id.to_string(),
        session_id: None,
        window_index: None,
        value: rollup[subject_id],
    })
}

/// One direction of the two-fold cross-dataset validation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldResult {
    pub train_tag: String,
    pub test_tag: String,
    pub subject_scores: Vec<NqiScore>,
    pub n_pd: usize,
    pub n_control: usize,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Both folds plus the pooled held-out scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub combined_n_pd: usize,
    pub combined_n_control: usize,
    pub combined_auc: f64,
    pub combined_ci_low: f64,
    pub combined_ci_high: f64,
}

fn uniform_dataset_tag(cohort: &CohortDataset) -> Result<Dataset> {
    let first = cohort
        .subjects
        .first()
        .ok_or_else(|| Error::EmptyInput {
            what: "cohort metadata".into(),
        })?
        .dataset;
    if cohort.subjects.iter().any(|s| s.dataset != first) {
        return Err(Error::invalid(
            "cross-validation fold",
            "mixed dataset tags within one fold",
        ));
    }
    Ok(first)
}

/// Scores the held-out cohort with a model trained on the other one, in both
/// directions, then pools the held-out scores without retraining.
pub fn cross_validate(
    fold_a: &CohortDataset,
    fold_b: &CohortDataset,
    config: &RunConfig,
) -> Result<CrossValidation> {
    let tag_a = uniform_dataset_tag(fold_a)?.as_str().to_string();
    let tag_b = uniform_dataset_tag(fold_b)?.as_str().to_string();
    let overlap: Vec<String> = fold_a
        .subjects
        .iter()
        .filter(|s| fold_b.subject(&s.subject_id).is_some())
        .map(|s| s.subject_id.clone())
        .collect();
    if !overlap.is_empty() {
        return Err(Error::SubjectOverlap { subjects: overlap });
    }

    let mut folds = Vec::with_capacity(2);
    let mut combined_entries = Vec::new();
    let mut combined_scores = Vec::new();
    for (fold_idx, (train, test, train_tag, test_tag)) in [
        (fold_a, fold_b, &tag_a, &tag_b),
        (fold_b, fold_a, &tag_b, &tag_a),
    ]
    .into_iter()
    .enumerate()
    {
        let train_rows = featurize::featurize_dataset(&train.sessions, config.window_s, config.min_keys);
        let corpus = TrainingCorpus::from_features(
            &train_rows,
            train,
            config.normalization_constant,
            train_tag.clone(),
        )?;
        let model = train_ensemble(&corpus, config)?;

        let test_rows =
            featurize::featurize_dataset(&test.sessions, config.window_s, config.min_keys);
        let window_scores = score_windows(&model, &test_rows);
        let rollup = subject_rollup(&window_scores)?;
        let mut subject_scores = Vec::with_capacity(rollup.len());
        let mut entries = Vec::with_capacity(rollup.len());
        for (subject_id, value) in &rollup {
            let record = test.subject(subject_id).ok_or_else(|| Error::UnknownSubject {
                subject_id: subject_id.clone(),
                context: "held-out scoring".into(),
            })?;
            subject_scores.push(NqiScore {
                subject_id: subject_id.clone(),
                session_id: None,
                window_index: None,
                value: *value,
            });
            entries.push(ScoredEntry::new(subject_id.clone(), *value, record.group));
        }
        let cohort = ScoredCohort::new(entries.clone())?;
        let curve = roc::roc_curve(&cohort)?;
        let seed = seeds::derive_seed(config.master_seed, domain::CV_FOLD, fold_idx as u64);
        let (ci_low, ci_high) = roc::bootstrap_auc_ci(&cohort, config.n_boot, seed)?;
        let (n_pd, n_control) = cohort.counts();
        folds.push(FoldResult {
            train_tag: train_tag.clone(),
            test_tag: test_tag.clone(),
            subject_scores: subject_scores.clone(),
            n_pd,
            n_control,
            auc: curve.auc,
            ci_low,
            ci_high,
        });
        combined_entries.extend(entries);
        combined_scores.extend(subject_scores);
    }

    let combined = ScoredCohort::new(combined_entries)?;
    let combined_curve = roc::roc_curve(&combined)?;
    let seed = seeds::derive_seed(config.master_seed, domain::CV_FOLD, 2);
    let (combined_ci_low, combined_ci_high) =
        roc::bootstrap_auc_ci(&combined, config.n_boot, seed)?;
    let (combined_n_pd, combined_n_control) = combined.counts();
    let _ = combined_scores;
    Ok(CrossValidation {
        folds,
        combined_n_pd,
        combined_n_control,
        combined_auc: combined_curve.auc,
        combined_ci_low,
        combined_ci_high,
    })
}

/// One grid cell of the leave-one-subject-out search.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridCell {
    pub c: f64,
    pub epsilon: f64,
    pub loo_auc: f64,
}

/// Grid search result: the winning point and the full table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearch {
    pub c: f64,
    pub epsilon: f64,
    pub loo_auc: f64,
    pub table: Vec<GridCell>,
}

/// Leave-one-subject-out AUC over a (C, epsilon) grid; ties break toward
/// smaller C, then smaller epsilon.
pub fn grid_search_params(
    cohort: &CohortDataset,
    c_grid: &[f64],
    eps_grid: &[f64],
    config: &RunConfig,
) -> Result<GridSearch> {
    if c_grid.is_empty()
        || eps_grid.is_empty()
        || c_grid.iter().any(|c| !(c.is_finite() && *c > 0.0))
        || eps_grid.iter().any(|e| !(e.is_finite() && *e >= 0.0))
    {
        return Err(Error::DegenerateGrid {
            reason: "grids must be non-empty with positive C and non-negative epsilon".into(),
        });
    }
    let n_pd = cohort
        .subjects
        .iter()
        .filter(|s| s.group == Group::Pd)
        .count();
    let n_control = cohort.subjects.len() - n_pd;
    if n_pd < 2 || n_control < 2 {
        return Err(Error::InsufficientData {
            reason: "grid search needs at least 2 subjects per group".into(),
        });
    }

    let all_rows = featurize::featurize_dataset(&cohort.sessions, config.window_s, config.min_keys);
    let mut cs = c_grid.to_vec();
    cs.sort_by(f64::total_cmp);
    cs.dedup();
    let mut epss = eps_grid.to_vec();
    epss.sort_by(f64::total_cmp);
    epss.dedup();

    let mut table = Vec::with_capacity(cs.len() * epss.len());
    let mut best: Option<GridCell> = None;
    for &c in &cs {
        for &eps in &epss {
            let mut point_config = config.clone();
            point_config.c = c;
            point_config.epsilon = eps;
            let mut entries = Vec::new();
            for held_out in &cohort.subjects {
                let train_rows: Vec<FeatureRow> = all_rows
                    .iter()
                    .filter(|r| r.subject_id != held_out.subject_id)
                    .cloned()
                    .collect();
                let test_rows: Vec<FeatureRow> = all_rows
                    .iter()
                    .filter(|r| r.subject_id == held_out.subject_id)
                    .cloned()
                    .collect();
                if test_rows.is_empty() {
                    continue; // subject contributed no scorable window
                }
                let corpus = TrainingCorpus::from_features(
                    &train_rows,
                    cohort,
                    config.normalization_constant,
                    "loo",
                )?;
                let model = train_ensemble(&corpus, &point_config)?;
                let rollup = subject_rollup(&score_windows(&model, &test_rows))?;
                entries.push(ScoredEntry::new(
                    held_out.subject_id.clone(),
                    rollup[&held_out.subject_id],
                    held_out.group,
                ));
            }
            let auc = roc::roc_curve(&ScoredCohort::new(entries)?)?.auc;
            let cell = GridCell {
                c,
                epsilon: eps,
                loo_auc: auc,
            };
            table.push(cell);
            // Strict improvement only: earlier (smaller C, then smaller
            // epsilon) cells win ties.
            if best.map_or(true, |b| auc > b.loo_auc) {
                best = Some(cell);
            }
        }
    }
    let best = best.expect("non-empty grid");
    Ok(GridSearch {
        c: best.c,
        epsilon: best.epsilon,
        loo_auc: best.loo_auc,
        table,
    })
}

/// Serializes the model as versioned JSON (atomically via a temp file).
pub fn save_model(model: &EnsembleModel, path: &Path) -> Result<()> {
    model.validate()?;
    let json = serde_json::to_string_pretty(model)
        .map_err(|e| Error::invalid("model file", e.to_string()))?;
    crate::fsutil::atomic_write(path, json.as_bytes())
}

/// Reads and validates a model file.
pub fn load_model(path: &Path) -> Result<EnsembleModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: EnsembleModel = serde_json::from_str(&text).map_err(|e| {
        Error::invalid(
            "model file",
            format!("{}: {e}", path.display()),
        )
    })?;
    model.validate()?;
    Ok(model)
}

/// Writes window scores as CSV (`subject_id,session_id,window_index,nqi`).
pub fn write_window_scores<W: Write>(scores: &[NqiScore], mut w: W) -> std::io::Result<()> {
    writeln!(w, "subject_id,session_id,window_index,nqi")?;
    for s in scores {
        writeln!(
            w,
            "{},{},{},{}",
            s.subject_id,
            s.session_id.as_deref().unwrap_or(""),
            s.window_index.map_or(String::new(), |i| i.to_string()),
            s.value
        )?;
    }
    Ok(())
}

/// Reads a window-score CSV produced by [`write_window_scores`].
pub fn read_window_scores<R: BufRead>(reader: R, source: &str) -> Result<Vec<NqiScore>> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Error::io(source, e)),
        None => return Ok(Vec::new()),
    };
    if header.trim_end() != "subject_id,session_id,window_index,nqi" {
        return Err(Error::malformed(source, 1, "unexpected header"));
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::malformed(
                source,
                lineno,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let window_index = if fields[2].is_empty() {
            None
        } else {
            Some(fields[2].parse::<usize>().map_err(|e| {
                Error::malformed(source, lineno, format!("window_index: {e}"))
            })?)
        };
        let value: f64 = fields[3]
            .parse()
            .map_err(|e| Error::malformed(source, lineno, format!("nqi: {e}")))?;
        if !value.is_finite() {
            return Err(Error::malformed(source, lineno, "non-finite nqi"));
        }
        out.push(NqiScore {
            subject_id: fields[0].to_string(),
            session_id: if fields[1].is_empty() {
                None
            } else {
                Some(fields[1].to_string())
            },
            window_index,
            value,
        });
    }
    Ok(out)
}

/// Writes the subject rollup CSV (`subject_id,nqi`).
pub fn write_subject_scores<W: Write>(
    rollup: &BTreeMap<String, f64>,
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "subject_id,nqi")?;
    for (subject, value) in rollup {
        writeln!(w, "{subject},{value}")?;
    }
    Ok(())
}

/// Reads a subject-score CSV produced by [`write_subject_scores`].
pub fn read_subject_scores<R: BufRead>(reader: R, source: &str) -> Result<BTreeMap<String, f64>> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(Error::io(source, e)),
        None => return Ok(BTreeMap::new()),
    };
    if header.trim_end() != "subject_id,nqi" {
        return Err(Error::malformed(source, 1, "unexpected header"));
    }
    let mut out = BTreeMap::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(Error::malformed(
                source,
                lineno,
                format!("expected 2 fields, got {}", fields.len()),
            ));
        }
        let value: f64 = fields[1]
            .parse()
            .map_err(|e| Error::malformed(source, lineno, format!("nqi: {e}")))?;
        if !value.is_finite() {
            return Err(Error::malformed(source, lineno, "non-finite nqi"));
        }
        if out.insert(fields[0].to_string(), value).is_some() {
            return Err(Error::malformed(
                source,
                lineno,
                format!("duplicate subject {}", fields[0]),
            ));
        }
    }
    Ok(out)
}

/// Per-metric comparison input assembled from scores and metadata; shared by
/// the evaluate and cross-validation commands.
pub fn evaluation_inputs(
    cohort: &CohortDataset,
    nqi_by_subject: &BTreeMap<String, f64>,
    typing_speed: &BTreeMap<String, f64>,
) -> Result<(
    Vec<evalstats::MetricColumn>,
    BTreeMap<String, evalstats::SubjectCovariates>,
)> {
    let mut subjects = BTreeMap::new();
    let mut tapping_single = BTreeMap::new();
    let mut tapping_alternating = BTreeMap::new();
    for record in &cohort.subjects {
        subjects.insert(
            record.subject_id.clone(),
            evalstats::SubjectCovariates {
                group: record.group,
                sex: record.sex.as_indicator(),
                age: record.age,
                education_years: record.education_years,
                typing_speed: typing_speed.get(&record.subject_id).copied(),
            },
        );
        if let Some(v) = record.tapping_single {
            tapping_single.insert(record.subject_id.clone(), v);
        }
        if let Some(v) = record.tapping_alternating {
            tapping_alternating.insert(record.subject_id.clone(), v);
        }
    }
    let mut metrics = vec![evalstats::MetricColumn {
        name: "nqi".into(),
        pd_high: true,
        speed_covariate: true,
        scores: nqi_by_subject.clone(),
    }];
    if !tapping_single.is_empty() {
        metrics.push(evalstats::MetricColumn {
            name: "tapping_single".into(),
            pd_high: false,
            speed_covariate: false,
            scores: tapping_single,
        });
    }
    if !tapping_alternating.is_empty() {
        metrics.push(evalstats::MetricColumn {
            name: "tapping_alternating".into(),
            pd_high: false,
            speed_covariate: false,
            scores: tapping_alternating,
        });
    }
    Ok((metrics, subjects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keystroke::{Sex, SubjectRecord};

    fn test_config(n_models: usize) -> RunConfig {
        RunConfig {
            n_models,
            n_boot: 100,
            ..RunConfig::default()
        }
    }

    fn row(subject: &str, session: &str, idx: usize, f: [f64; FEATURE_DIM], target: f64) -> CorpusRow {
        CorpusRow {
            subject_id: subject.into(),
            session_id: session.into(),
            window_index: idx,
            features: f,
            target,
        }
    }

    fn toy_corpus() -> TrainingCorpus {
        let mut rows = Vec::new();
        for i in 0..12 {
            let t = (i % 4) as f64 * 0.1;
            let mut f = [0.0; FEATURE_DIM];
            f[0] = t + 0.05;
            f[1] = 0.5 - t * 0.2;
            f[2] = 0.01 * i as f64;
            f[3] = 1.0 - t;
            f[4] = t;
            rows.push(row(&format!("s{}", i % 4), "a", i / 4, f, t));
        }
        TrainingCorpus {
            rows,
            normalization_constant: 108.0,
            provenance: "test".into(),
        }
    }

    #[test]
    fn bootstrap_of_single_row_repeats_it() {
        let corpus = TrainingCorpus {
            rows: vec![row("s", "a", 0, [0.1; FEATURE_DIM], 0.2)],
            normalization_constant: 108.0,
            provenance: "t".into(),
        };
        let sample = bootstrap_sample(&corpus, 9);
        assert_eq!(sample.rows.len(), 1);
        assert_eq!(sample.rows[0], corpus.rows[0]);
    }

    #[test]
    fn bootstrap_is_deterministic_per_seed() {
        let corpus = toy_corpus();
        let a = bootstrap_sample(&corpus, 42);
        let b = bootstrap_sample(&corpus, 42);
        let c = bootstrap_sample(&corpus, 43);
        assert_eq!(a.rows, b.rows);
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn bootstrap_frequencies_look_multinomial() {
        // 10^4 draws from 5 rows: each row's count within 3 sigma of 2000.
        let corpus = TrainingCorpus {
            rows: (0..5)
                .map(|i| row(&format!("s{i}"), "a", 0, [i as f64; FEATURE_DIM], 0.1))
                .collect(),
            normalization_constant: 108.0,
            provenance: "t".into(),
        };
        let mut counts = [0usize; 5];
        for seed in 0..2000u64 {
            let sample = bootstrap_sample(&corpus, seed);
            for r in &sample.rows {
                counts[r.features[0] as usize] += 1;
            }
        }
        let total: f64 = 2000.0 * 5.0;
        let expect = total / 5.0;
        let sigma = (total * 0.2 * 0.8).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() <= 3.0 * sigma,
                "row {i}: {c} vs {expect} ± {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn subject_bagging_keeps_subject_blocks_together() {
        let corpus = toy_corpus();
        let sample = bootstrap_sample_by(&corpus, 7, BaggingUnit::Subject);
        // Each drawn subject contributes all of its 3 rows contiguously.
        assert_eq!(sample.rows.len() % 3, 0);
        for chunk in sample.rows.chunks(3) {
            assert!(chunk.iter().all(|r| r.subject_id == chunk[0].subject_id));
        }
    }

    #[test]
    fn identical_rows_train_to_the_constant_predictor() {
        let corpus = TrainingCorpus {
            rows: (0..6)
                .map(|_| row("s", "a", 0, [0.3; FEATURE_DIM], 0.25))
                .collect(),
            normalization_constant: 108.0,
            provenance: "t".into(),
        };
        let model = train_ensemble(&corpus, &test_config(5)).unwrap();
        for unit in &model.units {
            assert!(unit.weights.iter().all(|w| w.abs() < 1e-12));
            assert!((unit.bias - 0.25).abs() < 1e-12);
        }
        let x = FeatureVector::from_array([0.3; FEATURE_DIM]);
        assert!((window_nqi(&model, &x) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ensemble_of_one_equals_its_single_unit() {
        let corpus = toy_corpus();
        let config = test_config(1);
        let model = train_ensemble(&corpus, &config).unwrap();
        assert_eq!(model.units.len(), 1);
        let x = FeatureVector::from_array(corpus.rows[3].features);
        let unit = &model.units[0];
        let expected: f64 = unit
            .weights
            .iter()
            .zip(&corpus.rows[3].features)
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + unit.bias;
        assert_eq!(window_nqi(&model, &x), expected);
    }

    #[test]
    fn training_is_identical_across_thread_counts() {
        let corpus = toy_corpus();
        let config = test_config(8);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| train_ensemble(&corpus, &config).unwrap());
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| train_ensemble(&corpus, &config).unwrap());
        assert_eq!(
            serde_json::to_string(&single).unwrap(),
            serde_json::to_string(&many).unwrap()
        );
    }

    #[test]
    fn median_is_the_midpoint_for_even_counts() {
        let mut model = EnsembleModel {
            format_version: MODEL_FORMAT_VERSION,
            c: 1.0,
            epsilon: 0.1,
            n_models: 4,
            master_seed: 0,
            normalization_constant: 108.0,
            provenance: "t".into(),
            feature_scaling: None,
            units: vec![
                LinearUnit { weights: vec![0.0; FEATURE_DIM], bias: 0.1 },
                LinearUnit { weights: vec![0.0; FEATURE_DIM], bias: 0.9 },
                LinearUnit { weights: vec![0.0; FEATURE_DIM], bias: 0.2 },
                LinearUnit { weights: vec![0.0; FEATURE_DIM], bias: 0.4 },
            ],
        };
        let x = FeatureVector::from_array([0.0; FEATURE_DIM]);
        assert!((window_nqi(&model, &x) - 0.3).abs() < 1e-15);
        model.units.truncate(3);
        model.n_models = 3;
        assert_eq!(window_nqi(&model, &x), 0.2);
    }

    #[test]
    fn majority_agreement_pins_the_median() {
        let mut units = vec![
            LinearUnit {
                weights: vec![0.0; FEATURE_DIM],
                bias: 0.33
            };
            6
        ];
        units.push(LinearUnit { weights: vec![0.0; FEATURE_DIM], bias: 9.9 });
        units.push(LinearUnit { weights: vec![0.0; FEATURE_DIM], bias: -5.0 });
        units.push(LinearUnit { weights: vec![0.0; FEATURE_DIM], bias: 100.0 });
        let model = EnsembleModel {
            format_version: MODEL_FORMAT_VERSION,
            c: 1.0,
            epsilon: 0.1,
            n_models: units.len(),
            master_seed: 0,
            normalization_constant: 108.0,
            provenance: "t".into(),
            feature_scaling: None,
            units,
        };
        let x = FeatureVector::from_array([0.0; FEATURE_DIM]);
        assert_eq!(window_nqi(&model, &x), 0.33);
    }

    #[test]
    fn model_file_round_trips_exactly() {
        let corpus = toy_corpus();
        let model = train_ensemble(&corpus, &test_config(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn model_validation_catches_corruption() {
        let corpus = toy_corpus();
        let mut model = train_ensemble(&corpus, &test_config(2)).unwrap();
        model.units.pop();
        assert!(model.validate().is_err());
        let mut model2 = train_ensemble(&corpus, &test_config(2)).unwrap();
        model2.format_version = 999;
        assert!(model2.validate().is_err());
        let mut model3 = train_ensemble(&corpus, &test_config(2)).unwrap();
        model3.units[0].weights.pop();
        assert!(model3.validate().is_err());
    }

    #[test]
    fn failed_unit_reports_its_index() {
        let corpus = toy_corpus();
        let mut config = test_config(3);
        config.max_iter = 0; // no unit can converge
        match train_ensemble(&corpus, &config) {
            Err(Error::EnsembleUnit { unit, .. }) => assert_eq!(unit, 0),
            other => panic!("expected unit failure, got {other:?}"),
        }
    }

    #[test]
    fn rollup_averages_sessions_then_subjects() {
        let scores = vec![
            NqiScore { subject_id: "s1".into(), session_id: Some("a".into()), window_index: Some(0), value: 0.1 },
            NqiScore { subject_id: "s1".into(), session_id: Some("a".into()), window_index: Some(1), value: 0.3 },
            NqiScore { subject_id: "s1".into(), session_id: Some("b".into()), window_index: Some(0), value: 0.3 },
            NqiScore { subject_id: "s2".into(), session_id: Some("a".into()), window_index: Some(0), value: 0.5 },
        ];
        let rollup = subject_rollup(&scores).unwrap();
        // s1: session a mean 0.2, session b mean 0.3 -> 0.25.
        assert!((rollup["s1"] - 0.25).abs() < 1e-15);
        assert_eq!(rollup["s2"], 0.5);
    }

    fn synthetic_cohort(tag: Dataset, prefix: &str, n_per_group: usize, shift: f64) -> CohortDataset {
        use crate::keystroke::{KeyClass, KeyEvent, TypingSession};
        let mut subjects = Vec::new();
        let mut sessions = Vec::new();
        for i in 0..n_per_group * 2 {
            let pd = i % 2 == 0;
            let id = format!("{prefix}{i}");
            subjects.push(SubjectRecord {
                subject_id: id.clone(),
                group: if pd { Group::Pd } else { Group::Control },
                dataset: tag,
                updrs3: if pd { 25 } else { 2 },
                sex: if i % 3 == 0 { Sex::Female } else { Sex::Male },
                age: 60.0 + i as f64,
                education_years: 12.0,
                tapping_single: None,
                tapping_alternating: None,
            });
            // One session of evenly spaced keystrokes; PD holds longer and
            // more variably.
            let mut events = Vec::new();
            let base_hold = if pd { 0.14 + shift } else { 0.10 };
            for k in 0..200 {
                let press = k as f64 * 0.45;
                let wobble = if pd { 0.04 * ((k % 7) as f64 / 6.0) } else { 0.005 * ((k % 3) as f64) };
                events.push(KeyEvent {
                    key_class: KeyClass::Alnum,
                    press_s: press,
                    release_s: press + base_hold + wobble,
                });
            }
            sessions.push(TypingSession {
                subject_id: id.clone(),
                session_id: "s1".into(),
                events,
                warnings: Default::default(),
            });
        }
        CohortDataset::new(subjects, sessions).unwrap()
    }

    #[test]
    fn cross_validation_scores_both_folds_and_pools_them() {
        let a = synthetic_cohort(Dataset::Denovo, "a", 4, 0.0);
        let b = synthetic_cohort(Dataset::Earlypd, "b", 4, 0.01);
        let mut config = test_config(4);
        config.n_boot = 50;
        let cv = cross_validate(&a, &b, &config).unwrap();
        assert_eq!(cv.folds.len(), 2);
        assert_eq!(cv.folds[0].train_tag, "denovo");
        assert_eq!(cv.folds[0].test_tag, "earlypd");
        assert_eq!(cv.folds[1].train_tag, "earlypd");
        assert_eq!(cv.combined_n_pd, 8);
        assert_eq!(cv.combined_n_control, 8);
        // The injected effect is strong: both folds separate well.
        assert!(cv.folds[0].auc > 0.5, "fold auc {}", cv.folds[0].auc);
        assert!(cv.folds[1].auc > 0.5);
        for fold in &cv.folds {
            assert!(fold.ci_low <= fold.auc && fold.auc <= fold.ci_high);
        }
    }

    #[test]
    fn cross_validation_rejects_overlapping_subjects() {
        let a = synthetic_cohort(Dataset::Denovo, "x", 2, 0.0);
        let b = synthetic_cohort(Dataset::Earlypd, "x", 2, 0.0);
        let config = test_config(2);
        assert!(matches!(
            cross_validate(&a, &b, &config),
            Err(Error::SubjectOverlap { .. })
        ));
    }

    #[test]
    fn cross_validation_rejects_mixed_tags() {
        let mut a = synthetic_cohort(Dataset::Denovo, "a", 2, 0.0);
        a.subjects[0].dataset = Dataset::Earlypd;
        let b = synthetic_cohort(Dataset::Earlypd, "b", 2, 0.0);
        let config = test_config(2);
        assert!(cross_validate(&a, &b, &config).is_err());
    }

    #[test]
    fn grid_search_prefers_smaller_params_on_ties() {
        let cohort = synthetic_cohort(Dataset::Paramest, "g", 3, 0.0);
        let mut config = test_config(2);
        config.n_boot = 10;
        let gs = grid_search_params(&cohort, &[0.5, 0.1], &[0.05, 0.1], &config).unwrap();
        assert_eq!(gs.table.len(), 4);
        // Table is sorted by (c, eps); the winner is the first cell
        // achieving the maximum AUC.
        let max_auc = gs.table.iter().map(|c| c.loo_auc).fold(f64::MIN, f64::max);
        let first_max = gs
            .table
            .iter()
            .find(|cell| cell.loo_auc == max_auc)
            .unwrap();
        assert_eq!((gs.c, gs.epsilon), (first_max.c, first_max.epsilon));
        assert_eq!(gs.loo_auc, max_auc);
    }

    #[test]
    fn singleton_grid_returns_that_point() {
        let cohort = synthetic_cohort(Dataset::Paramest, "g", 2, 0.0);
        let config = test_config(2);
        let gs = grid_search_params(&cohort, &[0.094], &[0.052], &config).unwrap();
        assert_eq!((gs.c, gs.epsilon), (0.094, 0.052));
        assert_eq!(gs.table.len(), 1);
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        let cohort = synthetic_cohort(Dataset::Paramest, "g", 2, 0.0);
        let config = test_config(2);
        assert!(matches!(
            grid_search_params(&cohort, &[], &[0.05], &config),
            Err(Error::DegenerateGrid { .. })
        ));
        assert!(matches!(
            grid_search_params(&cohort, &[-1.0], &[0.05], &config),
            Err(Error::DegenerateGrid { .. })
        ));
    }

    #[test]
    fn subject_nqi_requires_surviving_windows() {
        let cohort = synthetic_cohort(Dataset::Denovo, "a", 2, 0.0);
        let config = test_config(2);
        let rows = featurize::featurize_dataset(&cohort.sessions, config.window_s, config.min_keys);
        let corpus =
            TrainingCorpus::from_features(&rows, &cohort, 108.0, "denovo").unwrap();
        let model = train_ensemble(&corpus, &config).unwrap();
        let score = subject_nqi(&model, &cohort, "a0", &config).unwrap();
        assert_eq!(score.subject_id, "a0");
        assert!(score.value.is_finite());
        assert!(matches!(
            subject_nqi(&model, &cohort, "ghost", &config),
            Err(Error::UnknownSubject { .. })
        ));

        // A subject whose only session is too short to fill one window.
        use crate::keystroke::{KeyClass, KeyEvent, TypingSession};
        let mut subjects = cohort.subjects.clone();
        subjects.push(SubjectRecord {
            subject_id: "tiny".into(),
            group: Group::Control,
            dataset: Dataset::Denovo,
            updrs3: 1,
            sex: Sex::Male,
            age: 50.0,
            education_years: 10.0,
            tapping_single: None,
            tapping_alternating: None,
        });
        let mut sessions = cohort.sessions.clone();
        sessions.push(TypingSession {
            subject_id: "tiny".into(),
            session_id: "s1".into(),
            events: (0..29)
                .map(|k| KeyEvent {
                    key_class: KeyClass::Alnum,
                    press_s: k as f64,
                    release_s: k as f64 + 0.1,
                })
                .collect(),
            warnings: Default::default(),
        });
        let bigger = CohortDataset::new(subjects, sessions).unwrap();
        assert!(matches!(
            subject_nqi(&model, &bigger, "tiny", &config),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn corpus_targets_are_validated() {
        let cohort = synthetic_cohort(Dataset::Denovo, "a", 2, 0.0);
        let rows = featurize::featurize_dataset(&cohort.sessions, 90.0, 30);
        assert!(TrainingCorpus::from_features(&rows, &cohort, 108.0, "t").is_ok());
        // Normalization constant smaller than a target pushes it past 1.
        assert!(TrainingCorpus::from_features(&rows, &cohort, 10.0, "t").is_err());
        assert!(TrainingCorpus::from_features(&rows, &cohort, -1.0, "t").is_err());
    }

    #[test]
    fn subject_score_csv_round_trips_and_rejects_duplicates() {
        let mut rollup = BTreeMap::new();
        rollup.insert("s1".to_string(), 0.2571428571428571);
        rollup.insert("s2".to_string(), 1.0 / 7.0);
        let mut buf = Vec::new();
        write_subject_scores(&rollup, &mut buf).unwrap();
        let parsed = read_subject_scores(std::io::Cursor::new(&buf), "mem").unwrap();
        assert_eq!(rollup, parsed);

        let dup = "subject_id,nqi\ns1,0.1\ns1,0.2\n";
        assert!(matches!(
            read_subject_scores(std::io::Cursor::new(dup.as_bytes()), "mem"),
            Err(Error::MalformedRecord { line: 3, .. })
        ));
    }

    #[test]
    fn window_score_csv_round_trips() {
        let scores = vec![
            NqiScore {
                subject_id: "s1".into(),
                session_id: Some("a".into()),
                window_index: Some(0),
                value: 0.123456789012345,
            },
            NqiScore {
                subject_id: "s2".into(),
                session_id: Some("b".into()),
                window_index: Some(3),
                value: 1.0 / 3.0,
            },
        ];
        let mut buf = Vec::new();
        write_window_scores(&scores, &mut buf).unwrap();
        let parsed = read_window_scores(std::io::Cursor::new(&buf), "mem").unwrap();
        assert_eq!(scores, parsed);
    }
}
