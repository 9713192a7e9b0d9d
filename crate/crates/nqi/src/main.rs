//! `nqi` command-line interface.
//!
//! Subcommands cover the full pipeline: `simulate` emits synthetic cohorts,
//! `featurize` turns keystroke logs into window features, `train` fits the
//! bagged regression ensemble, `score` applies a model, `crossval` runs the
//! two-fold cross-dataset validation, and `evaluate` produces the statistical
//! report. Every command is deterministic given its inputs, the configuration,
//! and the master seed.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use nqi::config::{BaggingUnit, CostRatio, RunConfig};
use nqi::error::Error;
use nqi::keystroke::Dataset;
use nqi::synthcohort::{CohortSpec, ImpairmentParams};
use nqi::{cli, Result};

#[derive(Parser)]
#[command(
    name = "nqi",
    version,
    about = "Keystroke-dynamics motor assessment: featurization, ensemble regression, and evaluation",
    propagate_version = true
)]
struct Cli {
    /// TOML configuration file; explicit flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (default: all cores). Outputs are identical for any
    /// thread count.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: ConfigOverrides,

    #[command(subcommand)]
    command: Command,
}

/// Optional overrides for every tunable; unset flags keep the config-file
/// value, and absent file values keep the built-in default.
#[derive(Args)]
struct ConfigOverrides {
    /// Window length in seconds [default: 90].
    #[arg(long, global = true, value_name = "SECONDS")]
    window_s: Option<f64>,

    /// Minimum hold times a window needs to survive [default: 30].
    #[arg(long, global = true, value_name = "N")]
    min_keys: Option<usize>,

    /// Stuck-key cutoff in seconds; longer holds are dropped [default: 2].
    #[arg(long, global = true, value_name = "SECONDS")]
    max_hold_s: Option<f64>,

    /// Slack penalty weight of the regression units [default: 0.094].
    #[arg(long, global = true, value_name = "C")]
    c: Option<f64>,

    /// Dead-band half-width of the regression loss [default: 0.052].
    #[arg(long, global = true, value_name = "EPS")]
    epsilon: Option<f64>,

    /// Number of bagged regression units [default: 200].
    #[arg(long, global = true, value_name = "N")]
    n_models: Option<usize>,

    /// Clinical-score divisor for regression targets [default: 108].
    #[arg(long, global = true, value_name = "K")]
    normalization_constant: Option<f64>,

    /// Master seed; all randomized stages derive from it [default: 42].
    #[arg(long, global = true, value_name = "SEED")]
    master_seed: Option<u64>,

    /// Solver stopping tolerance [default: 1e-8].
    #[arg(long, global = true, value_name = "TOL")]
    tol: Option<f64>,

    /// Solver iteration cap [default: 10000000].
    #[arg(long, global = true, value_name = "N")]
    max_iter: Option<usize>,

    /// Bootstrap replicates for confidence intervals [default: 2000].
    #[arg(long, global = true, value_name = "N")]
    n_boot: Option<usize>,

    /// Misclassification cost pairs as FN/FP, comma separated
    /// [default: 1/1,2/1,1/2].
    #[arg(long, global = true, value_name = "LIST")]
    cost_ratios: Option<String>,

    /// Standardize features to training-corpus z-scores [default: false].
    #[arg(long, global = true, value_name = "BOOL")]
    standardize_features: Option<bool>,

    /// Bootstrap resampling unit: window or subject [default: window].
    #[arg(long, global = true, value_name = "UNIT")]
    bagging_unit: Option<String>,
}

impl ConfigOverrides {
    fn apply(&self, config: &mut RunConfig) -> Result<()> {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    config.$field = v;
                }
            };
        }
        set!(window_s);
        set!(min_keys);
        set!(max_hold_s);
        set!(c);
        set!(epsilon);
        set!(n_models);
        set!(normalization_constant);
        set!(master_seed);
        set!(tol);
        set!(max_iter);
        set!(n_boot);
        set!(standardize_features);
        if let Some(list) = &self.cost_ratios {
            config.cost_ratios = parse_cost_ratios(list)?;
        }
        if let Some(unit) = &self.bagging_unit {
            config.bagging_unit = match unit.as_str() {
                "window" => BaggingUnit::Window,
                "subject" => BaggingUnit::Subject,
                other => {
                    return Err(Error::Config {
                        reason: format!("bagging_unit: expected window or subject, got {other}"),
                    })
                }
            };
        }
        Ok(())
    }
}

fn parse_cost_ratios(list: &str) -> Result<Vec<CostRatio>> {
    let mut out = Vec::new();
    for part in list.split(',') {
        let Some((num, den)) = part.split_once('/') else {
            return Err(Error::Config {
                reason: format!("cost_ratios: {part:?} is not of the form FN/FP"),
            });
        };
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|e| Error::Config {
                reason: format!("cost_ratios: {s:?}: {e}"),
            })
        };
        out.push(CostRatio::new(parse(num)?, parse(den)?));
    }
    Ok(out)
}

#[derive(Subcommand)]
enum Command {
    /// Convert a keystroke log into window-feature rows.
    Featurize {
        /// Keystroke log (CSV or JSON lines).
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Output feature CSV.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write per-subject typing speeds (keys/min) to this CSV.
        #[arg(long, value_name = "FILE")]
        speeds_out: Option<PathBuf>,
    },
    /// Train the bagged regression ensemble on features plus clinical scores.
    Train {
        /// Feature CSV from `featurize`.
        #[arg(long, value_name = "FILE")]
        features: PathBuf,
        /// Subject metadata CSV.
        #[arg(long, value_name = "FILE")]
        metadata: PathBuf,
        /// Output model file (JSON).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score a keystroke log with a trained model.
    Score {
        /// Model file from `train`.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Keystroke log to score.
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Write per-window scores to this CSV.
        #[arg(long, value_name = "FILE")]
        windows_out: Option<PathBuf>,
        /// Write per-subject scores to this CSV (with no output flags the
        /// subject table prints to standard output).
        #[arg(long, value_name = "FILE")]
        subjects_out: Option<PathBuf>,
    },
    /// Train on each of two disjoint cohorts and score the other.
    Crossval {
        /// Keystroke log of the first cohort.
        #[arg(long, value_name = "FILE")]
        log_a: PathBuf,
        /// Metadata of the first cohort.
        #[arg(long, value_name = "FILE")]
        metadata_a: PathBuf,
        /// Keystroke log of the second cohort.
        #[arg(long, value_name = "FILE")]
        log_b: PathBuf,
        /// Metadata of the second cohort.
        #[arg(long, value_name = "FILE")]
        metadata_b: PathBuf,
        /// Directory for reports and held-out score files.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Compare scores between groups: rank tests, adjusted models, ROC/AUC,
    /// operating points, and plot data.
    Evaluate {
        /// Subject-score CSV (or window-score CSV with --per-window).
        #[arg(long, value_name = "FILE")]
        scores: PathBuf,
        /// Subject metadata CSV.
        #[arg(long, value_name = "FILE")]
        metadata: PathBuf,
        /// Optional per-subject typing speeds, used as a covariate in the
        /// adjusted model for the nqi metric.
        #[arg(long, value_name = "FILE")]
        speeds: Option<PathBuf>,
        /// Treat the score file as window-level scores.
        #[arg(long)]
        per_window: bool,
        /// Assume this disease prevalence when picking operating points
        /// (default: the cohort's own case fraction).
        #[arg(long, value_name = "P")]
        prevalence: Option<f64>,
        /// Directory for the report and point files.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Generate a synthetic cohort: keystroke log plus metadata.
    Simulate {
        /// Cohort spec TOML; flags below override its fields.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Output directory (keystrokes.csv, subjects.csv).
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Number of affected subjects [default: 40].
        #[arg(long, value_name = "N")]
        n_pd: Option<usize>,
        /// Number of control subjects [default: 40].
        #[arg(long, value_name = "N")]
        n_control: Option<usize>,
        /// Dataset tag: denovo, earlypd, or paramest [default: denovo].
        #[arg(long, value_name = "TAG")]
        dataset: Option<String>,
        /// Sessions per subject [default: 1].
        #[arg(long, value_name = "N")]
        sessions_per_subject: Option<usize>,
        /// Session length in minutes [default: 15].
        #[arg(long, value_name = "MIN")]
        session_minutes: Option<f64>,
        /// Typing rate in keys per minute [default: 100].
        #[arg(long, value_name = "KPM")]
        keys_per_min: Option<f64>,
        /// Typical hold time in seconds [default: 0.105].
        #[arg(long, value_name = "S")]
        mean_ht: Option<f64>,
        /// Log-scale hold-time spread [default: 0.35].
        #[arg(long, value_name = "SIGMA")]
        ht_sigma: Option<f64>,
        /// Probability a press precedes the previous release [default: 0.12].
        #[arg(long, value_name = "P")]
        rollover_prob: Option<f64>,
        /// Zero out the impairment effect (labels stay, typing doesn't
        /// change); burst flags below still apply afterwards.
        #[arg(long)]
        null_effect: bool,
        /// Per-keystroke probability of entering a burst [default: 0.05].
        #[arg(long, value_name = "P")]
        burst_enter_prob: Option<f64>,
        /// Per-keystroke probability of leaving a burst [default: 0.2].
        #[arg(long, value_name = "P")]
        burst_exit_prob: Option<f64>,
        /// Hold-time spread multiplier inside bursts [default: 2].
        #[arg(long, value_name = "M")]
        burst_sigma_multiplier: Option<f64>,
        /// Seconds added to hold times inside bursts [default: 0.08].
        #[arg(long, value_name = "S")]
        burst_mean_shift: Option<f64>,
        /// Center of the affected subjects' clinical-score draw [default: 21].
        #[arg(long, value_name = "SCORE")]
        target_updrs3: Option<u32>,
    },
}

fn build_cohort_spec(
    spec_path: Option<&PathBuf>,
    n_pd: Option<usize>,
    n_control: Option<usize>,
    dataset: Option<&str>,
    sessions_per_subject: Option<usize>,
    session_minutes: Option<f64>,
    keys_per_min: Option<f64>,
    mean_ht: Option<f64>,
    ht_sigma: Option<f64>,
    rollover_prob: Option<f64>,
    null_effect: bool,
    burst_enter_prob: Option<f64>,
    burst_exit_prob: Option<f64>,
    burst_sigma_multiplier: Option<f64>,
    burst_mean_shift: Option<f64>,
    target_updrs3: Option<u32>,
) -> Result<CohortSpec> {
    let mut spec = match spec_path {
        Some(path) => cli::read_cohort_spec(path)?,
        None => CohortSpec::default(),
    };
    if let Some(v) = n_pd {
        spec.n_pd = v;
    }
    if let Some(v) = n_control {
        spec.n_control = v;
    }
    if let Some(tag) = dataset {
        spec.dataset = Dataset::from_str(tag).map_err(|e| Error::Config { reason: e })?;
    }
    if let Some(v) = sessions_per_subject {
        spec.sessions_per_subject = v;
    }
    if let Some(v) = session_minutes {
        spec.profile.session_minutes = v;
    }
    if let Some(v) = keys_per_min {
        spec.profile.keys_per_min = v;
    }
    if let Some(v) = mean_ht {
        spec.profile.mean_ht = v;
    }
    if let Some(v) = ht_sigma {
        spec.profile.ht_sigma = v;
    }
    if let Some(v) = rollover_prob {
        spec.profile.rollover_prob = v;
    }
    if null_effect {
        spec.impairment = ImpairmentParams {
            target_updrs3: spec.impairment.target_updrs3,
            ..ImpairmentParams::null_effect()
        };
    }
    if let Some(v) = burst_enter_prob {
        spec.impairment.burst_enter_prob = v;
    }
    if let Some(v) = burst_exit_prob {
        spec.impairment.burst_exit_prob = v;
    }
    if let Some(v) = burst_sigma_multiplier {
        spec.impairment.burst_sigma_multiplier = v;
    }
    if let Some(v) = burst_mean_shift {
        spec.impairment.burst_mean_shift = v;
    }
    if let Some(v) = target_updrs3 {
        spec.impairment.target_updrs3 = v;
    }
    spec.validate()?;
    Ok(spec)
}

fn dispatch(command: Command, config: &RunConfig) -> Result<()> {
    match command {
        Command::Featurize { log, out, speeds_out } => {
            cli::cmd_featurize(&log, &out, speeds_out.as_deref(), config)
        }
        Command::Train {
            features,
            metadata,
            out,
        } => cli::cmd_train(&features, &metadata, &out, config),
        Command::Score {
            model,
            log,
            windows_out,
            subjects_out,
        } => cli::cmd_score(
            &model,
            &log,
            windows_out.as_deref(),
            subjects_out.as_deref(),
            config,
        ),
        Command::Crossval {
            log_a,
            metadata_a,
            log_b,
            metadata_b,
            out_dir,
        } => cli::cmd_crossval(&log_a, &metadata_a, &log_b, &metadata_b, &out_dir, config),
        Command::Evaluate {
            scores,
            metadata,
            speeds,
            per_window,
            prevalence,
            out_dir,
        } => cli::cmd_evaluate(
            &scores,
            &metadata,
            speeds.as_deref(),
            per_window,
            prevalence,
            &out_dir,
            config,
        ),
        Command::Simulate {
            spec,
            out_dir,
            n_pd,
            n_control,
            dataset,
            sessions_per_subject,
            session_minutes,
            keys_per_min,
            mean_ht,
            ht_sigma,
            rollover_prob,
            null_effect,
            burst_enter_prob,
            burst_exit_prob,
            burst_sigma_multiplier,
            burst_mean_shift,
            target_updrs3,
        } => {
            let cohort_spec = build_cohort_spec(
                spec.as_ref(),
                n_pd,
                n_control,
                dataset.as_deref(),
                sessions_per_subject,
                session_minutes,
                keys_per_min,
                mean_ht,
                ht_sigma,
                rollover_prob,
                null_effect,
                burst_enter_prob,
                burst_exit_prob,
                burst_sigma_multiplier,
                burst_mean_shift,
                target_updrs3,
            )?;
            cli::cmd_simulate(&cohort_spec, &out_dir, config.master_seed)
        }
    }
}

fn run(cli_args: Cli) -> Result<()> {
    let mut config = match &cli_args.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    cli_args.overrides.apply(&mut config)?;
    config.validate()?;

    match cli_args.threads {
        Some(0) => Err(Error::Config {
            reason: "threads: must be at least 1".into(),
        }),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config {
                reason: format!("thread pool: {e}"),
            })?
            .install(|| dispatch(cli_args.command, &config)),
        None => dispatch(cli_args.command, &config),
    }
}

fn main() {
    let cli_args = Cli::parse();
    if let Err(e) = run(cli_args) {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}
