//! Synthetic typing cohorts with controllable motor impairment.
//!
//! The generator is a per-keystroke two-state Markov chain: a baseline state
//! emits lognormal hold times around the typist's habitual value, and a
//! "burst" state inflates the log-scale spread and adds a fixed shift —
//! producing exactly the within-session heteroscedasticity and outlier mass
//! the variance-oriented features respond to. Inter-press gaps follow the
//! typing rate, with an explicit probability of rollover (pressing the next
//! key before releasing the previous one).
//!
//! Determinism: every session is a pure function of (profile, impairment,
//! seed), and cohort generation derives one seed per subject and one per
//! session, so results are identical regardless of generation order or
//! thread count.

use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keystroke::{
    CohortDataset, Dataset, Group, KeyClass, KeyEvent, Sex, SubjectRecord, TypingSession,
};
use crate::seeds::{self, domain};

/// Habitual typing characteristics of one simulated subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TypistProfile {
    /// Typical hold time in seconds (the lognormal's median).
    pub mean_ht: f64,
    /// Log-scale spread of hold times.
    pub ht_sigma: f64,
    /// Typing rate in keys per minute.
    pub keys_per_min: f64,
    /// Probability that a press lands before the previous release.
    pub rollover_prob: f64,
    /// Session length in minutes.
    pub session_minutes: f64,
}

impl Default for TypistProfile {
    fn default() -> Self {
        TypistProfile {
            mean_ht: 0.105,
            ht_sigma: 0.35,
            keys_per_min: 100.0,
            rollover_prob: 0.12,
            session_minutes: 15.0,
        }
    }
}

impl TypistProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mean_ht", self.mean_ht),
            ("ht_sigma", self.ht_sigma),
            ("keys_per_min", self.keys_per_min),
            ("session_minutes", self.session_minutes),
        ];
        for (name, v) in positive {
            // ht_sigma = 0 is allowed (noise-free typist); the rest must be
            // strictly positive.
            let ok = if name == "ht_sigma" {
                v.is_finite() && v >= 0.0
            } else {
                v.is_finite() && v > 0.0
            };
            if !ok {
                return Err(Error::invalid(
                    "typist profile",
                    format!("{name} = {v} out of range"),
                ));
            }
        }
        if !(self.rollover_prob.is_finite() && (0.0..=1.0).contains(&self.rollover_prob)) {
            return Err(Error::invalid(
                "typist profile",
                format!("rollover_prob = {} outside [0, 1]", self.rollover_prob),
            ));
        }
        Ok(())
    }
}

/// Two-state burst impairment applied to affected subjects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImpairmentParams {
    /// Per-keystroke probability of entering the burst state.
    pub burst_enter_prob: f64,
    /// Per-keystroke probability of leaving the burst state.
    pub burst_exit_prob: f64,
    /// Multiplier on the log-scale hold-time spread while bursting (≥ 1).
    pub burst_sigma_multiplier: f64,
    /// Seconds added to every hold time while bursting (≥ 0).
    pub burst_mean_shift: f64,
    /// Center of the motor-score draw for affected subjects.
    pub target_updrs3: u32,
}

impl Default for ImpairmentParams {
    fn default() -> Self {
        ImpairmentParams::strong()
    }
}

impl ImpairmentParams {
    /// Pronounced impairment: long heteroscedastic bursts.
    pub fn strong() -> Self {
        ImpairmentParams {
            burst_enter_prob: 0.05,
            burst_exit_prob: 0.2,
            burst_sigma_multiplier: 2.0,
            burst_mean_shift: 0.08,
            target_updrs3: 21,
        }
    }

    /// Label-only arm: affected subjects keep their clinical scores but type
    /// exactly like everyone else (multiplier 1, shift 0).
    pub fn null_effect() -> Self {
        ImpairmentParams {
            burst_sigma_multiplier: 1.0,
            burst_mean_shift: 0.0,
            ..ImpairmentParams::strong()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("burst_enter_prob", self.burst_enter_prob),
            ("burst_exit_prob", self.burst_exit_prob),
        ] {
            if !(p.is_finite() && 0.0 < p && p < 1.0) {
                return Err(Error::invalid(
                    "impairment params",
                    format!("{name} = {p} outside (0, 1)"),
                ));
            }
        }
        if !(self.burst_sigma_multiplier.is_finite() && self.burst_sigma_multiplier >= 1.0) {
            return Err(Error::invalid(
                "impairment params",
                format!(
                    "burst_sigma_multiplier = {} must be >= 1",
                    self.burst_sigma_multiplier
                ),
            ));
        }
        if !(self.burst_mean_shift.is_finite() && self.burst_mean_shift >= 0.0) {
            return Err(Error::invalid(
                "impairment params",
                format!("burst_mean_shift = {} must be >= 0", self.burst_mean_shift),
            ));
        }
        if self.target_updrs3 > 108 {
            return Err(Error::invalid(
                "impairment params",
                format!("target_updrs3 = {} above 108", self.target_updrs3),
            ));
        }
        Ok(())
    }
}

/// Kept holds never exceed the default stuck-key cutoff, so generated logs
/// survive ingest validation without drops.
const HOLD_CAP_S: f64 = 2.0;

/// Chain parameters used when no impairment is supplied. The burst state is
/// still simulated (consuming the same random draws) but has no effect, so a
/// null-effect impairment reproduces an unimpaired session bit for bit.
const NULL_CHAIN: (f64, f64, f64, f64) = (0.05, 0.2, 1.0, 0.0);

/// Simulates one typing session. Pure in (profile, impairment, seed).
pub fn generate_session(
    subject_id: &str,
    session_id: &str,
    profile: &TypistProfile,
    impairment: Option<&ImpairmentParams>,
    seed: u64,
) -> Result<TypingSession> {
    profile.validate()?;
    if let Some(imp) = impairment {
        imp.validate()?;
    }
    let (enter, exit, multiplier, shift) = impairment
        .map(|i| {
            (
                i.burst_enter_prob,
                i.burst_exit_prob,
                i.burst_sigma_multiplier,
                i.burst_mean_shift,
            )
        })
        .unwrap_or(NULL_CHAIN);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let duration_s = profile.session_minutes * 60.0;
    // Mean resting gap solving for the requested overall press rate:
    // rollover presses land mid-hold, the rest wait out the hold plus a gap.
    let mean_hold = profile.mean_ht * (0.5 * profile.ht_sigma * profile.ht_sigma).exp();
    let target_interval = 60.0 / profile.keys_per_min;
    let r = profile.rollover_prob;
    let mean_gap =
        (((target_interval - r * 0.55 * mean_hold) / (1.0 - r).max(1e-9)) - mean_hold).max(0.005);

    let mut events = Vec::with_capacity((duration_s / target_interval) as usize + 8);
    let mut press = 0.0_f64;
    let mut bursting = false;
    while press < duration_s {
        // Fixed draw order per keystroke keeps seeds comparable across
        // impairment settings: state transition, hold noise, key class,
        // pacing branch, pacing value.
        let u_tr: f64 = rng.random();
        if bursting {
            if u_tr < exit {
                bursting = false;
            }
        } else if u_tr < enter {
            bursting = true;
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let (sigma, add) = if bursting {
            (profile.ht_sigma * multiplier, shift)
        } else {
            (profile.ht_sigma, 0.0)
        };
        let hold = (profile.mean_ht * (sigma * z).exp() + add).min(HOLD_CAP_S);

        let u_key: f64 = rng.random();
        let key_class = if u_key < 0.16 {
            KeyClass::Space
        } else if u_key < 0.20 {
            KeyClass::Symbol
        } else {
            KeyClass::Alnum
        };
        events.push(KeyEvent {
            key_class,
            press_s: press,
            release_s: press + hold,
        });

        let u_branch: f64 = rng.random();
        press = if u_branch < profile.rollover_prob {
            // Next press lands inside the current hold.
            let frac = 0.2 + 0.7 * rng.random::<f64>();
            press + (frac * hold).max(1e-4)
        } else {
            let u: f64 = rng.random();
            let gap = -mean_gap * (1.0 - u).ln();
            press + hold + gap
        };
    }

    Ok(TypingSession {
        subject_id: subject_id.to_string(),
        session_id: session_id.to_string(),
        events,
        warnings: Default::default(),
    })
}

/// Everything needed to generate one labeled cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_pd: usize,
    pub n_control: usize,
    /// Dataset tag stamped into metadata (also prefixes subject ids, so two
    /// cohorts with different tags never share a subject).
    pub dataset: Dataset,
    pub sessions_per_subject: usize,
    pub profile: TypistProfile,
    /// Applied to PD subjects only; controls always type unimpaired.
    pub impairment: ImpairmentParams,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_pd: 40,
            n_control: 40,
            dataset: Dataset::Denovo,
            sessions_per_subject: 1,
            profile: TypistProfile::default(),
            impairment: ImpairmentParams::strong(),
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_pd < 1 || self.n_control < 1 {
            return Err(Error::invalid(
                "cohort spec",
                format!(
                    "need at least 1 subject per group (got {} affected, {} controls)",
                    self.n_pd, self.n_control
                ),
            ));
        }
        if self.sessions_per_subject < 1 {
            return Err(Error::invalid(
                "cohort spec",
                "sessions_per_subject must be at least 1",
            ));
        }
        self.profile.validate()?;
        self.impairment.validate()
    }
}

/// Motor-score draw used for controls: tight around the healthy range.
const CONTROL_UPDRS_MEAN: f64 = 1.9;
const CONTROL_UPDRS_SD: f64 = 1.8;
const CONTROL_UPDRS_MAX: u32 = 5;
/// Spread of affected subjects' motor scores around the target.
const PD_UPDRS_SD: f64 = 7.7;

fn draw_updrs(rng: &mut ChaCha8Rng, group: Group, target: u32) -> u32 {
    let z: f64 = StandardNormal.sample(rng);
    match group {
        Group::Pd => {
            let v = (f64::from(target) + PD_UPDRS_SD * z).round();
            v.clamp(0.0, 108.0) as u32
        }
        Group::Control => {
            let v = (CONTROL_UPDRS_MEAN + CONTROL_UPDRS_SD * z).round();
            v.clamp(0.0, f64::from(CONTROL_UPDRS_MAX)) as u32
        }
    }
}

/// Generates one labeled cohort: metadata plus typing sessions.
///
/// Subject index alone determines each subject's seed, so generation is
/// reproducible and parallelizable. Typing-profile jitter is drawn the same
/// way for both groups; only the impairment (and score center) differs.
pub fn generate_cohort(spec: &CohortSpec, master_seed: u64) -> Result<CohortDataset> {
    spec.validate()?;
    let total = spec.n_pd + spec.n_control;
    let generated: Vec<Result<(SubjectRecord, Vec<TypingSession>)>> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let subject_seed = seeds::derive_seed(master_seed, domain::COHORT_SUBJECT, idx as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
            let group = if idx < spec.n_pd {
                Group::Pd
            } else {
                Group::Control
            };
            let subject_id = format!(
                "{}_{}{:03}",
                spec.dataset.as_str(),
                match group {
                    Group::Pd => "pd",
                    Group::Control => "ct",
                },
                if idx < spec.n_pd { idx + 1 } else { idx - spec.n_pd + 1 }
            );

            // Per-subject trait jitter, drawn identically for both groups.
            let z_ht: f64 = StandardNormal.sample(&mut rng);
            let z_sigma: f64 = StandardNormal.sample(&mut rng);
            let z_rate: f64 = StandardNormal.sample(&mut rng);
            let profile = TypistProfile {
                mean_ht: spec.profile.mean_ht * (0.08 * z_ht).exp(),
                ht_sigma: spec.profile.ht_sigma * (0.10 * z_sigma).exp(),
                keys_per_min: spec.profile.keys_per_min * (0.08 * z_rate).exp(),
                ..spec.profile
            };

            let age_z: f64 = StandardNormal.sample(&mut rng);
            let edu_z: f64 = StandardNormal.sample(&mut rng);
            let sex = if rng.random::<f64>() < 0.5 {
                Sex::Female
            } else {
                Sex::Male
            };
            let updrs3 = draw_updrs(&mut rng, group, spec.impairment.target_updrs3);
            let record = SubjectRecord {
                subject_id: subject_id.clone(),
                group,
                dataset: spec.dataset,
                updrs3,
                sex,
                age: (60.0 + 9.0 * age_z).clamp(35.0, 90.0),
                education_years: (14.0 + 3.0 * edu_z).clamp(6.0, 24.0).round(),
                tapping_single: None,
                tapping_alternating: None,
            };

            let impairment = match group {
                Group::Pd => Some(&spec.impairment),
                Group::Control => None,
            };
            let mut sessions = Vec::with_capacity(spec.sessions_per_subject);
            for k in 0..spec.sessions_per_subject {
                let session_seed = seeds::derive_seed(subject_seed, domain::SESSION, k as u64);
                sessions.push(generate_session(
                    &subject_id,
                    &format!("s{}", k + 1),
                    &profile,
                    impairment,
                    session_seed,
                )?);
            }
            Ok((record, sessions))
        })
        .collect();

    let mut subjects = Vec::with_capacity(total);
    let mut sessions = Vec::new();
    for item in generated {
        let (record, mut subject_sessions) = item?;
        subjects.push(record);
        sessions.append(&mut subject_sessions);
    }
    // Canonical ordering (the same one log ingestion produces), so a
    // write-out/read-back round trip is the identity.
    subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    sessions.sort_by(|a, b| {
        (&a.subject_id, &a.session_id).cmp(&(&b.subject_id, &b.session_id))
    });
    CohortDataset::new(subjects, sessions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize;

    #[test]
    fn zero_spread_typist_holds_exactly_the_mean() {
        let profile = TypistProfile {
            ht_sigma: 0.0,
            session_minutes: 1.0,
            ..TypistProfile::default()
        };
        let session = generate_session("s", "a", &profile, None, 7).unwrap();
        assert!(!session.events.is_empty());
        for e in &session.events {
            assert!((e.hold_time() - profile.mean_ht).abs() < 1e-6);
        }
    }

    #[test]
    fn sessions_are_deterministic_per_seed() {
        let profile = TypistProfile {
            session_minutes: 2.0,
            ..TypistProfile::default()
        };
        let a = generate_session("s", "a", &profile, None, 11).unwrap();
        let b = generate_session("s", "a", &profile, None, 11).unwrap();
        let c = generate_session("s", "a", &profile, None, 12).unwrap();
        assert_eq!(a.events, b.events);
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn null_effect_impairment_reproduces_unimpaired_sessions_exactly() {
        let profile = TypistProfile {
            session_minutes: 3.0,
            ..TypistProfile::default()
        };
        let null = ImpairmentParams::null_effect();
        let plain = generate_session("s", "a", &profile, None, 5).unwrap();
        let nulled = generate_session("s", "a", &profile, Some(&null), 5).unwrap();
        assert_eq!(plain.events, nulled.events);

        // Even with different chain dynamics, a zero-effect burst state
        // cannot change the emitted holds.
        let other_chain = ImpairmentParams {
            burst_enter_prob: 0.5,
            burst_exit_prob: 0.01,
            ..ImpairmentParams::null_effect()
        };
        let other = generate_session("s", "a", &profile, Some(&other_chain), 5).unwrap();
        assert_eq!(plain.events, other.events);
    }

    #[test]
    fn fifteen_minutes_at_one_hundred_kpm_fills_the_windows() {
        let profile = TypistProfile::default();
        let session = generate_session("s", "a", &profile, None, 3).unwrap();
        let n = session.events.len() as f64;
        assert!(
            (1300.0..=1700.0).contains(&n),
            "expected about 1500 events, got {n}"
        );
        let rows = featurize::featurize_session(&session, 90.0, 30);
        assert!(rows.len() >= 9, "only {} windows survived", rows.len());
    }

    #[test]
    fn holds_are_positive_finite_and_presses_increase() {
        let profile = TypistProfile {
            session_minutes: 3.0,
            ..TypistProfile::default()
        };
        let imp = ImpairmentParams::strong();
        for seed in [1, 2, 3] {
            let s = generate_session("s", "a", &profile, Some(&imp), seed).unwrap();
            let mut last = f64::NEG_INFINITY;
            for e in &s.events {
                assert!(e.hold_time() > 0.0 && e.hold_time().is_finite());
                assert!(e.hold_time() <= HOLD_CAP_S);
                assert!(e.press_s > last);
                last = e.press_s;
            }
        }
    }

    fn slow_hold_fraction(imp: &ImpairmentParams, seed: u64) -> f64 {
        let profile = TypistProfile {
            session_minutes: 10.0,
            ..TypistProfile::default()
        };
        let s = generate_session("s", "a", &profile, Some(imp), seed).unwrap();
        let slow = s.events.iter().filter(|e| e.hold_time() > 0.5).count();
        slow as f64 / s.events.len() as f64
    }

    #[test]
    fn slow_hold_mass_grows_with_burst_severity() {
        for seed in [4, 5] {
            let fractions: Vec<f64> = [1.0, 1.5, 2.0, 3.0]
                .iter()
                .map(|&m| {
                    slow_hold_fraction(
                        &ImpairmentParams {
                            burst_sigma_multiplier: m,
                            burst_mean_shift: 0.0,
                            ..ImpairmentParams::strong()
                        },
                        seed,
                    )
                })
                .collect();
            for pair in fractions.windows(2) {
                assert!(pair[1] >= pair[0], "multiplier sweep not monotone: {fractions:?}");
            }
            assert!(fractions[3] > fractions[0]);

            let by_shift: Vec<f64> = [0.0, 0.2, 0.45]
                .iter()
                .map(|&shift| {
                    slow_hold_fraction(
                        &ImpairmentParams {
                            burst_sigma_multiplier: 1.5,
                            burst_mean_shift: shift,
                            ..ImpairmentParams::strong()
                        },
                        seed,
                    )
                })
                .collect();
            for pair in by_shift.windows(2) {
                assert!(pair[1] >= pair[0], "shift sweep not monotone: {by_shift:?}");
            }
            assert!(by_shift[2] > by_shift[0]);
        }
    }

    #[test]
    fn parameter_validation_rejects_nonsense() {
        let bad_profile = TypistProfile {
            keys_per_min: 0.0,
            ..TypistProfile::default()
        };
        assert!(generate_session("s", "a", &bad_profile, None, 1).is_err());
        let bad_rollover = TypistProfile {
            rollover_prob: 1.5,
            ..TypistProfile::default()
        };
        assert!(bad_rollover.validate().is_err());

        let mut imp = ImpairmentParams::strong();
        imp.burst_enter_prob = 0.0;
        assert!(imp.validate().is_err());
        imp = ImpairmentParams::strong();
        imp.burst_exit_prob = 1.0;
        assert!(imp.validate().is_err());
        imp = ImpairmentParams::strong();
        imp.burst_sigma_multiplier = 0.9;
        assert!(imp.validate().is_err());
        imp = ImpairmentParams::strong();
        imp.burst_mean_shift = -0.1;
        assert!(imp.validate().is_err());
    }

    fn small_spec(n_pd: usize, n_control: usize) -> CohortSpec {
        CohortSpec {
            n_pd,
            n_control,
            profile: TypistProfile {
                session_minutes: 3.0,
                ..TypistProfile::default()
            },
            ..CohortSpec::default()
        }
    }

    #[test]
    fn cohorts_have_complete_metadata_and_are_deterministic() {
        let spec = small_spec(3, 4);
        let a = generate_cohort(&spec, 17).unwrap();
        let b = generate_cohort(&spec, 17).unwrap();
        assert_eq!(a.subjects, b.subjects);
        assert_eq!(a.sessions, b.sessions);

        assert_eq!(a.subjects.len(), 7);
        let n_pd = a.subjects.iter().filter(|s| s.group == Group::Pd).count();
        assert_eq!(n_pd, 3);
        for s in &a.subjects {
            assert_eq!(s.dataset, Dataset::Denovo);
            match s.group {
                Group::Pd => assert!(s.updrs3 <= 108),
                Group::Control => assert!(s.updrs3 <= CONTROL_UPDRS_MAX),
            }
            assert!((35.0..=90.0).contains(&s.age));
            assert_eq!(a.sessions_of(&s.subject_id).len(), 1);
        }

        let c = generate_cohort(&spec, 18).unwrap();
        assert_ne!(a.sessions, c.sessions);
    }

    #[test]
    fn zero_counts_are_rejected() {
        assert!(generate_cohort(&small_spec(0, 3), 1).is_err());
        assert!(generate_cohort(&small_spec(3, 0), 1).is_err());
    }

    #[test]
    fn generated_logs_survive_ingest_unchanged() {
        use crate::keystroke::{ingest_log_reader, write_log, ValidationPolicy};
        let spec = small_spec(2, 2);
        let cohort = generate_cohort(&spec, 23).unwrap();
        let mut buf = Vec::new();
        write_log(&cohort.sessions, &mut buf).unwrap();
        let back = ingest_log_reader(
            std::io::Cursor::new(&buf),
            "mem",
            &ValidationPolicy::default(),
        )
        .unwrap();
        assert_eq!(cohort.sessions, back);
        for s in &back {
            assert_eq!(s.warnings.total(), 0);
        }
    }

    #[test]
    fn disjoint_generated_folds_cross_validate() {
        let fold_a = generate_cohort(&small_spec(3, 3), 31).unwrap();
        let fold_b = generate_cohort(
            &CohortSpec {
                dataset: Dataset::Earlypd,
                ..small_spec(3, 3)
            },
            32,
        )
        .unwrap();
        let config = crate::config::RunConfig {
            n_models: 2,
            n_boot: 20,
            ..crate::config::RunConfig::default()
        };
        let cv = crate::ensemble::cross_validate(&fold_a, &fold_b, &config).unwrap();
        assert_eq!(cv.folds.len(), 2);
        assert_eq!(cv.combined_n_pd, 6);
        assert_eq!(cv.combined_n_control, 6);
    }

    #[test]
    fn different_subjects_get_different_typing() {
        let spec = small_spec(2, 2);
        let cohort = generate_cohort(&spec, 41).unwrap();
        let ids: Vec<&str> = cohort
            .subjects
            .iter()
            .map(|s| s.subject_id.as_str())
            .collect();
        assert_eq!(ids.len(), 4);
        let first_holds: Vec<f64> = cohort.sessions[0]
            .events
            .iter()
            .take(10)
            .map(KeyEvent::hold_time)
            .collect();
        let second_holds: Vec<f64> = cohort.sessions[1]
            .events
            .iter()
            .take(10)
            .map(KeyEvent::hold_time)
            .collect();
        assert_ne!(first_holds, second_holds);
    }
}
