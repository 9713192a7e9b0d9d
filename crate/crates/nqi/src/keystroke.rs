//! Keystroke log and subject metadata ingestion.
//!
//! A typing session is a time-ordered list of key press/release events. The
//! downstream pipeline only ever consumes hold times (release minus press) of
//! eligible keys, so ingestion validates timestamps, drops artifacts under an
//! explicit policy, and keeps per-reason drop counts instead of failing on
//! recoverable rows.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Key class of an event; `Other` marks modifier/navigation keys that never
/// enter the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyClass {
    Alnum,
    Symbol,
    Space,
    Other,
}

impl KeyClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            KeyClass::Alnum => "alnum",
            KeyClass::Symbol => "symbol",
            KeyClass::Space => "space",
            KeyClass::Other => "other",
        }
    }

    /// Eligible keys contribute hold times; `Other` does not.
    pub fn is_eligible(&self) -> bool {
        !matches!(self, KeyClass::Other)
    }
}

impl FromStr for KeyClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "alnum" => Ok(KeyClass::Alnum),
            "symbol" => Ok(KeyClass::Symbol),
            "space" => Ok(KeyClass::Space),
            "other" => Ok(KeyClass::Other),
            _ => Err(format!(
                "unknown key_class {s:?} (expected alnum, symbol, space, or other)"
            )),
        }
    }
}

impl fmt::Display for KeyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One key press/release pair, session-relative seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub key_class: KeyClass,
    pub press_s: f64,
    pub release_s: f64,
}

impl KeyEvent {
    /// Seconds the key stayed down.
    pub fn hold_time(&self) -> f64 {
        self.release_s - self.press_s
    }
}

/// Why events were dropped during validation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    /// key_class was `other`.
    pub other_key: usize,
    /// release_s <= press_s.
    pub nonpositive_hold: usize,
    /// hold time exceeded the stuck-key cutoff.
    pub excessive_hold: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.other_key + self.nonpositive_hold + self.excessive_hold
    }
}

/// All validated events of one recording session for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct TypingSession {
    pub subject_id: String,
    pub session_id: String,
    /// Eligible events, ordered by press time (ties by release time).
    pub events: Vec<KeyEvent>,
    /// Counts of events removed during ingestion.
    pub warnings: DropCounts,
}

/// One press with its hold time; the unit every feature is built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldSample {
    pub press_s: f64,
    pub hold_s: f64,
}

impl TypingSession {
    /// Hold-time series of eligible events, in press order.
    pub fn hold_times(&self) -> Vec<HoldSample> {
        self.events
            .iter()
            .filter(|e| e.key_class.is_eligible())
            .map(|e| HoldSample {
                press_s: e.press_s,
                hold_s: e.hold_time(),
            })
            .collect()
    }

    /// Eligible key presses per minute over the press span.
    ///
    /// Undefined for sessions with fewer than two eligible events or a zero
    /// press span.
    pub fn typing_speed(&self) -> Result<f64> {
        let presses: Vec<f64> = self
            .events
            .iter()
            .filter(|e| e.key_class.is_eligible())
            .map(|e| e.press_s)
            .collect();
        if presses.len() < 2 {
            return Err(Error::UndefinedTypingSpeed {
                reason: format!(
                    "session {}/{} has {} eligible events, need at least 2",
                    self.subject_id,
                    self.session_id,
                    presses.len()
                ),
            });
        }
        let span = presses.last().unwrap() - presses.first().unwrap();
        if span <= 0.0 {
            return Err(Error::UndefinedTypingSpeed {
                reason: format!(
                    "session {}/{} has zero press span",
                    self.subject_id, self.session_id
                ),
            });
        }
        Ok(presses.len() as f64 * 60.0 / span)
    }
}

/// Event-level validation knobs applied at ingestion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationPolicy {
    /// Hold times above this many seconds are treated as stuck keys.
    pub max_hold_s: f64,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        ValidationPolicy { max_hold_s: 2.0 }
    }
}

/// Diagnosis group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Pd,
    Control,
}

impl Group {
    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Pd => "pd",
            Group::Control => "control",
        }
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pd" => Ok(Group::Pd),
            "control" => Ok(Group::Control),
            _ => Err(format!("unknown group {s:?} (expected pd or control)")),
        }
    }
}

/// Which study arm a subject belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Denovo,
    Earlypd,
    Paramest,
}

impl Dataset {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dataset::Denovo => "denovo",
            Dataset::Earlypd => "earlypd",
            Dataset::Paramest => "paramest",
        }
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "denovo" => Ok(Dataset::Denovo),
            "earlypd" => Ok(Dataset::Earlypd),
            "paramest" => Ok(Dataset::Paramest),
            _ => Err(format!(
                "unknown dataset {s:?} (expected denovo, earlypd, or paramest)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::Male => "m",
            Sex::Female => "f",
        }
    }

    /// 0/1 encoding used by the adjusted models.
    pub fn as_indicator(&self) -> f64 {
        match self {
            Sex::Male => 0.0,
            Sex::Female => 1.0,
        }
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "m" => Ok(Sex::Male),
            "f" => Ok(Sex::Female),
            _ => Err(format!("unknown sex {s:?} (expected m or f)")),
        }
    }
}

/// Clinical and demographic record for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub group: Group,
    pub dataset: Dataset,
    /// Motor exam total, 0..=108. Recorded for controls too.
    pub updrs3: u32,
    pub sex: Sex,
    pub age: f64,
    pub education_years: f64,
    /// Single-key tapping count, when administered.
    pub tapping_single: Option<f64>,
    /// Alternating two-key tapping count, when administered.
    pub tapping_alternating: Option<f64>,
}

/// A set of subjects with their recorded sessions.
#[derive(Debug, Clone, Default)]
pub struct CohortDataset {
    pub subjects: Vec<SubjectRecord>,
    pub sessions: Vec<TypingSession>,
}

impl CohortDataset {
    pub fn new(subjects: Vec<SubjectRecord>, sessions: Vec<TypingSession>) -> Result<Self> {
        let ds = CohortDataset { subjects, sessions };
        ds.validate()?;
        Ok(ds)
    }

    /// Every session must belong to a listed subject and subject ids must be
    /// unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.subjects {
            if !seen.insert(s.subject_id.as_str()) {
                return Err(Error::invalid(
                    "metadata",
                    format!("duplicate subject_id {:?}", s.subject_id),
                ));
            }
        }
        for sess in &self.sessions {
            if !seen.contains(sess.subject_id.as_str()) {
                return Err(Error::UnknownSubject {
                    subject_id: sess.subject_id.clone(),
                    context: format!("session {}", sess.session_id),
                });
            }
        }
        Ok(())
    }

    pub fn subject(&self, subject_id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }

    pub fn sessions_of(&self, subject_id: &str) -> Vec<&TypingSession> {
        self.sessions
            .iter()
            .filter(|s| s.subject_id == subject_id)
            .collect()
    }
}

const LOG_HEADER: &str = "subject_id,session_id,key_class,press_s,release_s";
const METADATA_HEADER: &str =
    "subject_id,group,dataset,updrs3,sex,age,education_years,tapping_single,tapping_alternating";

fn valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn parse_time(field: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| format!("{what} {field:?} is not a number"))?;
    if !v.is_finite() {
        return Err(format!("{what} must be finite, got {field:?}"));
    }
    if v < 0.0 {
        return Err(format!("{what} must be non-negative, got {field:?}"));
    }
    Ok(v)
}

#[derive(Deserialize)]
struct RawEventRecord {
    subject_id: String,
    session_id: String,
    key_class: String,
    press_s: f64,
    release_s: f64,
}

fn parse_log_line_csv(line: &str) -> std::result::Result<RawEventRecord, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, got {}", fields.len()));
    }
    Ok(RawEventRecord {
        subject_id: fields[0].trim().to_string(),
        session_id: fields[1].trim().to_string(),
        key_class: fields[2].trim().to_string(),
        press_s: parse_time(fields[3], "press_s")?,
        release_s: parse_time(fields[4], "release_s")?,
    })
}

/// Reads a keystroke log from a file; comma-separated with a header, or
/// line-delimited JSON records with the same fields.
pub fn ingest_log(path: &Path, policy: &ValidationPolicy) -> Result<Vec<TypingSession>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_log_reader(BufReader::new(file), &path.display().to_string(), policy)
}

/// Reader-based variant of [`ingest_log`]; `source` labels error messages.
pub fn ingest_log_reader<R: BufRead>(
    reader: R,
    source: &str,
    policy: &ValidationPolicy,
) -> Result<Vec<TypingSession>> {
    if !(policy.max_hold_s.is_finite() && policy.max_hold_s > 0.0) {
        return Err(Error::invalid("validation policy", "max_hold_s must be positive"));
    }
    let mut groups: BTreeMap<(String, String), (Vec<KeyEvent>, DropCounts)> = BTreeMap::new();
    let mut json_mode = false;
    let mut saw_any_line = false;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !saw_any_line {
            saw_any_line = true;
            if trimmed.starts_with('{') {
                json_mode = true;
            } else {
                if trimmed != LOG_HEADER {
                    return Err(Error::malformed(
                        source,
                        line_no,
                        format!("expected header {LOG_HEADER:?}, got {trimmed:?}"),
                    ));
                }
                continue;
            }
        }
        let raw = if json_mode {
            serde_json::from_str::<RawEventRecord>(trimmed)
                .map_err(|e| Error::malformed(source, line_no, e.to_string()))
        } else {
            parse_log_line_csv(trimmed).map_err(|e| Error::malformed(source, line_no, e))
        }?;
        if !raw.press_s.is_finite() || !raw.release_s.is_finite() || raw.press_s < 0.0 {
            return Err(Error::malformed(
                source,
                line_no,
                "press_s/release_s must be finite and non-negative",
            ));
        }
        if !valid_id(&raw.subject_id) || !valid_id(&raw.session_id) {
            return Err(Error::malformed(
                source,
                line_no,
                format!(
                    "ids must be non-empty [A-Za-z0-9_.-], got subject {:?} session {:?}",
                    raw.subject_id, raw.session_id
                ),
            ));
        }
        let key_class: KeyClass = raw
            .key_class
            .parse()
            .map_err(|e: String| Error::malformed(source, line_no, e))?;

        let entry = groups
            .entry((raw.subject_id, raw.session_id))
            .or_default();
        let event = KeyEvent {
            key_class,
            press_s: raw.press_s,
            release_s: raw.release_s,
        };
        if !key_class.is_eligible() {
            entry.1.other_key += 1;
        } else if event.release_s <= event.press_s {
            entry.1.nonpositive_hold += 1;
        } else if event.hold_time() > policy.max_hold_s {
            entry.1.excessive_hold += 1;
        } else {
            entry.0.push(event);
        }
    }

    Ok(groups
        .into_iter()
        .map(|((subject_id, session_id), (mut events, warnings))| {
            events.sort_by(|a, b| {
                a.press_s
                    .total_cmp(&b.press_s)
                    .then(a.release_s.total_cmp(&b.release_s))
            });
            TypingSession {
                subject_id,
                session_id,
                events,
                warnings,
            }
        })
        .collect())
}

/// Writes sessions back out in the comma-separated log format.
pub fn write_log<W: Write>(sessions: &[TypingSession], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for s in sessions {
        for e in &s.events {
            writeln!(
                w,
                "{},{},{},{},{}",
                s.subject_id, s.session_id, e.key_class, e.press_s, e.release_s
            )?;
        }
    }
    Ok(())
}

fn parse_opt_f64(field: &str, what: &str) -> std::result::Result<Option<f64>, String> {
    let t = field.trim();
    if t.is_empty() {
        return Ok(None);
    }
    let v: f64 = t
        .parse()
        .map_err(|_| format!("{what} {field:?} is not a number"))?;
    if !v.is_finite() {
        return Err(format!("{what} must be finite"));
    }
    Ok(Some(v))
}

/// Reads the subject metadata table.
pub fn read_metadata(path: &Path) -> Result<Vec<SubjectRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metadata_reader(BufReader::new(file), &path.display().to_string())
}

/// Reader-based variant of [`read_metadata`].
pub fn read_metadata_reader<R: BufRead>(reader: R, source: &str) -> Result<Vec<SubjectRecord>> {
    let mut out = Vec::new();
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
            if trimmed != METADATA_HEADER {
                return Err(Error::malformed(
                    source,
                    line_no,
                    format!("expected header {METADATA_HEADER:?}"),
                ));
            }
            continue;
        }
        let f: Vec<&str> = trimmed.split(',').collect();
        if f.len() != 9 {
            return Err(Error::malformed(
                source,
                line_no,
                format!("expected 9 fields, got {}", f.len()),
            ));
        }
        let fail = |e: String| Error::malformed(source, line_no, e);
        let subject_id = f[0].trim().to_string();
        if !valid_id(&subject_id) {
            return Err(fail(format!("invalid subject_id {subject_id:?}")));
        }
        let updrs3: i64 = f[3]
            .trim()
            .parse()
            .map_err(|_| fail(format!("updrs3 {:?} is not an integer", f[3])))?;
        if !(0..=108).contains(&updrs3) {
            return Err(fail(format!("updrs3 {updrs3} outside 0..=108")));
        }
        let age = parse_time(f[5], "age").map_err(fail)?;
        let education_years = parse_time(f[6], "education_years").map_err(fail)?;
        out.push(SubjectRecord {
            subject_id,
            group: f[1].trim().parse().map_err(fail)?,
            dataset: f[2].trim().parse().map_err(fail)?,
            updrs3: updrs3 as u32,
            sex: f[4].trim().parse().map_err(fail)?,
            age,
            education_years,
            tapping_single: parse_opt_f64(f[7], "tapping_single").map_err(fail)?,
            tapping_alternating: parse_opt_f64(f[8], "tapping_alternating").map_err(fail)?,
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &out {
        if !seen.insert(s.subject_id.as_str()) {
            return Err(Error::invalid(
                "metadata",
                format!("duplicate subject_id {:?}", s.subject_id),
            ));
        }
    }
    Ok(out)
}

/// Writes the subject metadata table.
pub fn write_metadata<W: Write>(subjects: &[SubjectRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{METADATA_HEADER}")?;
    for s in subjects {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.subject_id,
            s.group.as_str(),
            s.dataset.as_str(),
            s.updrs3,
            s.sex.as_str(),
            s.age,
            s.education_years,
            opt(s.tapping_single),
            opt(s.tapping_alternating)
        )?;
    }
    Ok(())
}
