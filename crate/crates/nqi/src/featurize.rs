//! Hold-time windowing and per-window feature extraction.
//!
//! A session's hold-time series is cut into fixed-length, non-overlapping
//! windows anchored at the first press. Windows with too few hold times are
//! dropped (their indices stay reserved). Each surviving window becomes a
//! 7-element feature vector: outlier fraction, quartile skewness, flight
//! overlap, and a 4-bin hold-time histogram, in that order.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::keystroke::{HoldSample, TypingSession};

/// Length of [`FeatureVector::as_array`].
pub const FEATURE_DIM: usize = 7;

/// Histogram bin width in seconds; bins cover [0, 0.5).
const HIST_BIN_S: f64 = 0.125;
const HIST_BINS: usize = 4;

/// Tukey fence multiplier for the outlier fraction.
const FENCE_IQR_MULT: f64 = 1.5;

/// One surviving window of a session's hold-time series.
///
/// Times are relative to the first press of the series, so a uniform shift of
/// the session leaves the window contents unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldTimeWindow {
    /// Position on the window grid; indices of dropped windows are not reused.
    pub window_index: usize,
    /// Window start on the re-anchored time axis (`index * window_s`).
    pub start_s: f64,
    /// Re-anchored press times of the window's keystrokes.
    pub press_times: Vec<f64>,
    /// Hold times aligned with `press_times`.
    pub hold_times: Vec<f64>,
    /// Raw `release(k) - press(k+1)` for consecutive keystrokes whose presses
    /// both fall in this window; positive values are rollovers.
    pub overlap_gaps: Vec<f64>,
}

/// Feature vector of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    /// Fraction of hold times strictly outside the Tukey fences.
    pub outlier_fraction: f64,
    /// (q2 - q1) / (q3 - q1); 0.5 when the IQR collapses.
    pub iqr_skewness: f64,
    /// Mean clamped rollover overlap across consecutive-press pairs.
    pub flight_overlap: f64,
    /// Hold-time mass per 125 ms bin over [0, 0.5); >= 0.5 s counts toward
    /// the denominator only.
    pub histogram: [f64; HIST_BINS],
}

impl FeatureVector {
    /// Fixed regression input order.
    pub fn as_array(&self) -> [f64; FEATURE_DIM] {
        [
            self.outlier_fraction,
            self.iqr_skewness,
            self.flight_overlap,
            self.histogram[0],
            self.histogram[1],
            self.histogram[2],
            self.histogram[3],
        ]
    }

    pub fn from_array(a: [f64; FEATURE_DIM]) -> Self {
        FeatureVector {
            outlier_fraction: a[0],
            iqr_skewness: a[1],
            flight_overlap: a[2],
            histogram: [a[3], a[4], a[5], a[6]],
        }
    }
}

/// Cuts a press-ordered hold-time series into windows of `window_s` seconds,
/// anchored at the first press; windows with fewer than `min_keys` hold times
/// are dropped.
pub fn partition_windows(
    series: &[HoldSample],
    window_s: f64,
    min_keys: usize,
) -> Vec<HoldTimeWindow> {
    assert!(window_s > 0.0, "window length must be positive");
    if series.is_empty() {
        return Vec::new();
    }
    debug_assert!(
        series.windows(2).all(|w| w[0].press_s <= w[1].press_s),
        "hold series must be press-ordered"
    );
    let anchor = series[0].press_s;
    let mut windows: Vec<HoldTimeWindow> = Vec::new();
    for (k, sample) in series.iter().enumerate() {
        let rel = sample.press_s - anchor;
        let idx = (rel / window_s).floor() as usize;
        if windows.last().map(|w| w.window_index) != Some(idx) {
            windows.push(HoldTimeWindow {
                window_index: idx,
                start_s: idx as f64 * window_s,
                press_times: Vec::new(),
                hold_times: Vec::new(),
                overlap_gaps: Vec::new(),
            });
        }
        let w = windows.last_mut().unwrap();
        // Pair with the previous keystroke only when both presses share the
        // window.
        if !w.press_times.is_empty() {
            let prev = k - 1;
            let gap = (series[prev].press_s - anchor + series[prev].hold_s) - rel;
            w.overlap_gaps.push(gap);
        }
        w.press_times.push(rel);
        w.hold_times.push(sample.hold_s);
    }
    windows.retain(|w| w.hold_times.len() >= min_keys);
    windows
}

/// Quantile of pre-sorted values by linear interpolation of order statistics.
pub fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "p must be in [0, 1]");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// First, second, and third quartiles by linear interpolation.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput {
            what: "quartiles input".into(),
        });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((
        interpolated_quantile(&sorted, 0.25),
        interpolated_quantile(&sorted, 0.50),
        interpolated_quantile(&sorted, 0.75),
    ))
}

/// Fraction of hold times strictly outside `[q1 - 1.5 IQR, q3 + 1.5 IQR]`.
pub fn outlier_fraction(window: &HoldTimeWindow) -> f64 {
    let (q1, _, q3) = quartiles(&window.hold_times).expect("window is non-empty");
    let iqr = q3 - q1;
    let lo = q1 - FENCE_IQR_MULT * iqr;
    let hi = q3 + FENCE_IQR_MULT * iqr;
    let n_out = window
        .hold_times
        .iter()
        .filter(|&&h| h < lo || h > hi)
        .count();
    n_out as f64 / window.hold_times.len() as f64
}

/// Quartile-based skewness `(q2 - q1) / (q3 - q1)`; 0.5 on a collapsed IQR.
pub fn iqr_skewness(window: &HoldTimeWindow) -> f64 {
    let (q1, q2, q3) = quartiles(&window.hold_times).expect("window is non-empty");
    if q3 - q1 == 0.0 {
        0.5
    } else {
        (q2 - q1) / (q3 - q1)
    }
}

/// Mean over consecutive-press pairs of `max(0, release(k) - press(k+1))`;
/// 0 when the window has fewer than two keystrokes.
pub fn flight_overlap(window: &HoldTimeWindow) -> f64 {
    if window.overlap_gaps.is_empty() {
        return 0.0;
    }
    let sum: f64 = window.overlap_gaps.iter().map(|g| g.max(0.0)).sum();
    sum / window.overlap_gaps.len() as f64
}

/// Hold-time histogram over four 125 ms bins covering [0, 0.5); values at or
/// above 0.5 s land in no bin but stay in the denominator.
pub fn ht_histogram(window: &HoldTimeWindow) -> [f64; HIST_BINS] {
    let mut counts = [0usize; HIST_BINS];
    for &h in &window.hold_times {
        if h < HIST_BINS as f64 * HIST_BIN_S {
            // Bin edges are exact binary fractions, so this floor matches
            // explicit range tests bit for bit.
            let bin = (h / HIST_BIN_S).floor() as usize;
            counts[bin.min(HIST_BINS - 1)] += 1;
        }
    }
    let n = window.hold_times.len() as f64;
    [
        counts[0] as f64 / n,
        counts[1] as f64 / n,
        counts[2] as f64 / n,
        counts[3] as f64 / n,
    ]
}

/// Assembles the full per-window feature vector.
pub fn feature_vector(window: &HoldTimeWindow) -> FeatureVector {
    FeatureVector {
        outlier_fraction: outlier_fraction(window),
        iqr_skewness: iqr_skewness(window),
        flight_overlap: flight_overlap(window),
        histogram: ht_histogram(window),
    }
}

/// One featurized window of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub subject_id: String,
    pub session_id: String,
    pub window_index: usize,
    pub features: FeatureVector,
}

/// Featurizes one session.
pub fn featurize_session(
    session: &TypingSession,
    window_s: f64,
    min_keys: usize,
) -> Vec<FeatureRow> {
    partition_windows(&session.hold_times(), window_s, min_keys)
        .iter()
        .map(|w| FeatureRow {
            subject_id: session.subject_id.clone(),
            session_id: session.session_id.clone(),
            window_index: w.window_index,
            features: feature_vector(w),
        })
        .collect()
}

/// Featurizes many sessions; rows come back sorted by
/// (subject, session, window index).
pub fn featurize_dataset(
    sessions: &[TypingSession],
    window_s: f64,
    min_keys: usize,
) -> Vec<FeatureRow> {
    let mut rows: Vec<FeatureRow> = sessions
        .iter()
        .flat_map(|s| featurize_session(s, window_s, min_keys))
        .collect();
    rows.sort_by(|a, b| {
        (&a.subject_id, &a.session_id, a.window_index).cmp(&(
            &b.subject_id,
            &b.session_id,
            b.window_index,
        ))
    });
    rows
}

const FEATURES_HEADER: &str = "subject_id,session_id,window_index,v_out,v_iqr,v_de,h0,h1,h2,h3";

/// Writes feature rows as CSV.
pub fn write_features<W: Write>(rows: &[FeatureRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{FEATURES_HEADER}")?;
    for r in rows {
        let a = r.features.as_array();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.subject_id, r.session_id, r.window_index, a[0], a[1], a[2], a[3], a[4], a[5], a[6]
        )?;
    }
    Ok(())
}

/// Reads a feature CSV produced by [`write_features`].
pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features_reader(BufReader::new(file), &path.display().to_string())
}

/// Reader-based variant of [`read_features`].
pub fn read_features_reader<R: BufRead>(reader: R, source: &str) -> Result<Vec<FeatureRow>> {
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            if trimmed != FEATURES_HEADER {
                return Err(Error::malformed(
                    source,
                    line_no,
                    format!("expected header {FEATURES_HEADER:?}"),
                ));
            }
            continue;
        }
        let f: Vec<&str> = trimmed.split(',').collect();
        if f.len() != 10 {
            return Err(Error::malformed(
                source,
                line_no,
                format!("expected 10 fields, got {}", f.len()),
            ));
        }
        let window_index: usize = f[2].trim().parse().map_err(|_| {
            Error::malformed(source, line_no, format!("window_index {:?} invalid", f[2]))
        })?;
        let mut vals = [0.0f64; FEATURE_DIM];
        for (k, v) in vals.iter_mut().enumerate() {
            let field = f[3 + k].trim();
            *v = field.parse().map_err(|_| {
                Error::malformed(source, line_no, format!("feature {field:?} is not a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::malformed(source, line_no, "feature must be finite"));
            }
        }
        rows.push(FeatureRow {
            subject_id: f[0].trim().to_string(),
            session_id: f[1].trim().to_string(),
            window_index,
            features: FeatureVector::from_array(vals),
        });
    }
    Ok(rows)
}
