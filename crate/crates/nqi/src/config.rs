//! Run configuration shared by the CLI and the pipeline entry points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Misclassification cost pair for cut-point selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRatio {
    /// Cost of calling a true case healthy.
    pub cost_fn: f64,
    /// Cost of calling a healthy subject a case.
    pub cost_fp: f64,
}

impl CostRatio {
    pub const fn new(cost_fn: f64, cost_fp: f64) -> Self {
        CostRatio { cost_fn, cost_fp }
    }

    /// Label used in reports, e.g. `2/1`.
    pub fn label(&self) -> String {
        fn side(v: f64) -> String {
            if (v - v.round()).abs() < 1e-12 {
                format!("{}", v.round() as i64)
            } else {
                format!("{v}")
            }
        }
        format!("{}/{}", side(self.cost_fn), side(self.cost_fp))
    }
}

/// Which unit bootstrap resampling draws when bagging regression units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaggingUnit {
    /// Resample individual window rows (default).
    #[default]
    Window,
    /// Resample whole subjects, keeping each subject's rows together.
    Subject,
}

/// Tunable parameters for the full pipeline, loadable from a TOML file.
///
/// CLI flags override file values; file values override these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Window length in seconds.
    pub window_s: f64,
    /// Minimum hold times a window needs to survive.
    pub min_keys: usize,
    /// Hold times above this many seconds are dropped as stuck keys.
    pub max_hold_s: f64,
    /// Slack penalty weight of the regression units.
    pub c: f64,
    /// Dead-band half-width of the regression loss.
    pub epsilon: f64,
    /// Number of bagged regression units.
    pub n_models: usize,
    /// Targets are clinical scores divided by this constant.
    pub normalization_constant: f64,
    /// Master seed; every randomized stage derives child seeds from it.
    pub master_seed: u64,
    /// Solver stopping tolerance on the KKT violation.
    pub tol: f64,
    /// Solver iteration cap.
    pub max_iter: usize,
    /// Bootstrap replicates for confidence intervals.
    pub n_boot: usize,
    /// Misclassification cost pairs evaluated for cut-points.
    pub cost_ratios: Vec<CostRatio>,
    /// Standardize features to training-corpus z-scores before regression.
    pub standardize_features: bool,
    /// Bootstrap resampling unit for bagging.
    pub bagging_unit: BaggingUnit,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            window_s: 90.0,
            min_keys: 30,
            max_hold_s: 2.0,
            c: 0.094,
            epsilon: 0.052,
            n_models: 200,
            normalization_constant: 108.0,
            master_seed: 42,
            tol: 1e-8,
            max_iter: 10_000_000,
            n_boot: 2000,
            cost_ratios: vec![
                CostRatio::new(1.0, 1.0),
                CostRatio::new(2.0, 1.0),
                CostRatio::new(1.0, 2.0),
            ],
            standardize_features: false,
            bagging_unit: BaggingUnit::Window,
        }
    }
}

impl RunConfig {
    /// Rejects values that would make downstream stages meaningless.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, reason: &str| Err(Error::Config {
            reason: format!("{what}: {reason}"),
        });
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return bad("window_s", "must be a positive number of seconds");
        }
        if self.min_keys == 0 {
            return bad("min_keys", "must be at least 1");
        }
        if !(self.max_hold_s.is_finite() && self.max_hold_s > 0.0) {
            return bad("max_hold_s", "must be positive");
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return bad("c", "must be positive");
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon", "must be non-negative");
        }
        if self.n_models == 0 {
            return bad("n_models", "must be at least 1");
        }
        if !(self.normalization_constant.is_finite() && self.normalization_constant > 0.0) {
            return bad("normalization_constant", "must be positive");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad("tol", "must be positive");
        }
        if self.n_boot == 0 {
            return bad("n_boot", "must be at least 1");
        }
        if self.cost_ratios.is_empty() {
            return bad("cost_ratios", "must list at least one cost pair");
        }
        for r in &self.cost_ratios {
            if !(r.cost_fn.is_finite() && r.cost_fn > 0.0 && r.cost_fp.is_finite() && r.cost_fp > 0.0)
            {
                return bad("cost_ratios", "costs must be positive");
            }
        }
        Ok(())
    }

    /// Loads a TOML config file.
    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config {
            reason: format!("{}: {e}", path.display()),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes to TOML (used to echo effective settings into reports).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// `key = value` lines for report provenance headers.
    pub fn provenance_lines(&self) -> Vec<String> {
        let ratios: Vec<String> = self.cost_ratios.iter().map(|r| r.label()).collect();
        vec![
            format!("window_s = {}", self.window_s),
            format!("min_keys = {}", self.min_keys),
            format!("max_hold_s = {}", self.max_hold_s),
            format!("c = {}", self.c),
            format!("epsilon = {}", self.epsilon),
            format!("n_models = {}", self.n_models),
            format!("normalization_constant = {}", self.normalization_constant),
            format!("master_seed = {}", self.master_seed),
            format!("tol = {:e}", self.tol),
            format!("n_boot = {}", self.n_boot),
            format!("cost_ratios = {}", ratios.join(",")),
            format!("standardize_features = {}", self.standardize_features),
            format!(
                "bagging_unit = {}",
                match self.bagging_unit {
                    BaggingUnit::Window => "window",
                    BaggingUnit::Subject => "subject",
                }
            ),
        ]
    }
}
