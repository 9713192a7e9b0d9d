//! Covariate-adjusted logistic regression with Wald tests.
//!
//! Maximum likelihood by iteratively reweighted least squares (Newton steps
//! with step halving on deviance increases), converged when the score norm
//! ‖Xᵀ(y − μ)‖∞ drops to 1e-8. The design is checked for full rank up
//! front; perfect or quasi-perfect separation is detected and flagged on the
//! result rather than reported as a clean fit.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::keystroke::Group;

use super::ScoredCohort;

const GRADIENT_TOL: f64 = 1e-8;
const MAX_ITER: usize = 200;
const MAX_HALVINGS: usize = 30;
/// Linear predictors beyond this magnitude pin probabilities to 0/1 in f64
/// far past any clinical plausibility; used for separation detection.
const ETA_SEPARATION: f64 = 20.0;

/// One fitted coefficient with its Wald test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticTerm {
    pub name: String,
    pub coef: f64,
    pub std_err: f64,
    pub z: f64,
    pub p: f64,
}

/// A maximum-likelihood fit; `separation` marks unstable estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticFit {
    pub terms: Vec<LogisticTerm>,
    pub n: usize,
    pub converged: bool,
    pub separation: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub deviance: f64,
}

impl LogisticFit {
    pub fn term(&self, name: &str) -> Option<&LogisticTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Fits label ~ intercept + metric + covariates on the cohort entries.
///
/// The metric is the entry score; covariates are looked up by name in each
/// entry's covariate map (a missing key is an error). PD codes as 1.
pub fn logistic_fit(
    cohort: &ScoredCohort,
    metric: &str,
    covariates: &[&str],
) -> Result<LogisticFit> {
    if cohort.entries.is_empty() {
        return Err(Error::EmptyInput {
            what: "regression cohort".into(),
        });
    }
    let n = cohort.entries.len();
    let p = 2 + covariates.len();
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    for e in &cohort.entries {
        x.push(1.0);
        x.push(e.score);
        for name in covariates {
            let v = e.covariates.get(*name).ok_or_else(|| {
                Error::invalid(
                    "regression design",
                    format!("subject {} lacks covariate {name}", e.subject_id),
                )
            })?;
            x.push(*v);
        }
        y.push(if e.group == Group::Pd { 1.0 } else { 0.0 });
    }
    let mut names = vec!["intercept".to_string(), metric.to_string()];
    names.extend(covariates.iter().map(|c| c.to_string()));
    fit_logistic_raw(&x, &y, &names)
}

/// Core fit on a dense row-major design matrix (n rows, names.len() cols).
pub fn fit_logistic_raw(x: &[f64], y: &[f64], names: &[String]) -> Result<LogisticFit> {
    let p = names.len();
    let n = y.len();
    if p == 0 || n == 0 || x.len() != n * p {
        return Err(Error::DimensionMismatch {
            expected: n * p,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !(*v == 0.0 || *v == 1.0)) {
        return Err(Error::invalid(
            "regression design",
            "non-finite predictor or non-binary outcome",
        ));
    }

    // Rank check on XᵀX with a relative pivot tolerance.
    let mut xtx = vec![0.0; p * p];
    for row in 0..n {
        let r = &x[row * p..(row + 1) * p];
        for i in 0..p {
            for j in 0..=i {
                xtx[i * p + j] += r[i] * r[j];
            }
        }
    }
    for i in 0..p {
        for j in i + 1..p {
            xtx[i * p + j] = xtx[j * p + i];
        }
    }
    let max_diag = (0..p).map(|i| xtx[i * p + i]).fold(0.0f64, f64::max);
    if cholesky(&xtx, p, 1e-10 * max_diag).is_none() {
        return Err(Error::RankDeficient {
            reason: "collinear columns in the design matrix".into(),
        });
    }

    let mut beta = vec![0.0; p];
    let mut eta = vec![0.0; n];
    let mut mu = vec![0.5; n];
    let mut deviance = deviance_of(y, &eta);
    let mut converged = false;
    let mut iterations = 0;
    let mut singular_information = false;

    while iterations < MAX_ITER {
        // Score vector g = Xᵀ(y - mu).
        let mut g = vec![0.0; p];
        for row in 0..n {
            let resid = y[row] - mu[row];
            let r = &x[row * p..(row + 1) * p];
            for i in 0..p {
                g[i] += r[i] * resid;
            }
        }
        if g.iter().all(|v| v.abs() <= GRADIENT_TOL) {
            converged = true;
            break;
        }
        iterations += 1;

        // Information matrix H = XᵀWX, W = mu(1-mu).
        let mut h = vec![0.0; p * p];
        for row in 0..n {
            let w = mu[row] * (1.0 - mu[row]);
            if w == 0.0 {
                continue;
            }
            let r = &x[row * p..(row + 1) * p];
            for i in 0..p {
                for j in 0..=i {
                    h[i * p + j] += w * r[i] * r[j];
                }
            }
        }
        mirror_lower(&mut h, p);
        let chol = match cholesky(&h, p, 1e-14 * max_diag.max(1.0)) {
            Some(c) => c,
            None => {
                // Weights collapsed: probabilities pinned at 0/1.
                singular_information = true;
                break;
            }
        };
        let delta = chol.solve(&g);

        // Step halving keeps the deviance non-increasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = beta
                .iter()
                .zip(&delta)
                .map(|(b, d)| b + step * d)
                .collect();
            let trial_eta: Vec<f64> = (0..n)
                .map(|row| {
                    let r = &x[row * p..(row + 1) * p];
                    r.iter().zip(&trial).map(|(a, b)| a * b).sum()
                })
                .collect();
            let trial_dev = deviance_of(y, &trial_eta);
            if trial_dev <= deviance + 1e-12 {
                beta = trial;
                eta = trial_eta;
                for (m, e) in mu.iter_mut().zip(&eta) {
                    *m = sigmoid(*e);
                }
                deviance = trial_dev;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // no productive direction left
        }
    }

    let max_eta = eta.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    let separation =
        deviance <= 1e-6 || (!converged && max_eta > ETA_SEPARATION) || singular_information;

    // Wald statistics from the observed information at the final estimate.
    let mut h = vec![0.0; p * p];
    for row in 0..n {
        let w = mu[row] * (1.0 - mu[row]);
        let r = &x[row * p..(row + 1) * p];
        for i in 0..p {
            for j in 0..=i {
                h[i * p + j] += w * r[i] * r[j];
            }
        }
    }
    mirror_lower(&mut h, p);
    let cov_diag = match cholesky(&h, p, 0.0) {
        Some(chol) => chol.inverse_diagonal(),
        None => vec![f64::INFINITY; p],
    };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let terms = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let se = cov_diag[i].max(0.0).sqrt();
            let (z, p_val) = if se.is_finite() && se > 0.0 {
                let z = beta[i] / se;
                (z, (2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0))
            } else {
                (0.0, 1.0)
            };
            LogisticTerm {
                name: name.clone(),
                coef: beta[i],
                std_err: se,
                z,
                p: p_val,
            }
        })
        .collect();

    let log_likelihood = -0.5 * deviance;
    Ok(LogisticFit {
        terms,
        n,
        converged,
        separation,
        iterations,
        log_likelihood,
        deviance,
    })
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// -2 log-likelihood, computed stably via softplus.
fn deviance_of(y: &[f64], eta: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (yi, ei) in y.iter().zip(eta) {
        // ln(1 + e^eta) = max(eta, 0) + ln(1 + e^-|eta|)
        let softplus = ei.max(0.0) + (-ei.abs()).exp().ln_1p();
        ll += yi * ei - softplus;
    }
    -2.0 * ll
}

fn mirror_lower(a: &mut [f64], p: usize) {
    for i in 0..p {
        for j in i + 1..p {
            a[i * p + j] = a[j * p + i];
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
struct Cholesky {
    l: Vec<f64>,
    p: usize,
}

/// Factors `a` (p×p row-major); returns None when a pivot falls at or below
/// `pivot_tol`, signalling rank deficiency at that tolerance.
fn cholesky(a: &[f64], p: usize, pivot_tol: f64) -> Option<Cholesky> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= pivot_tol {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Some(Cholesky { l, p })
}

impl Cholesky {
    /// Solves A x = b via forward/back substitution.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let p = self.p;
        let mut y = vec![0.0; p];
        for i in 0..p {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * p + k] * y[k];
            }
            y[i] = s / self.l[i * p + i];
        }
        let mut x = vec![0.0; p];
        for i in (0..p).rev() {
            let mut s = y[i];
            for k in i + 1..p {
                s -= self.l[k * p + i] * x[k];
            }
            x[i] = s / self.l[i * p + i];
        }
        x
    }

    /// Diagonal of A⁻¹ via p unit-vector solves.
    fn inverse_diagonal(&self) -> Vec<f64> {
        let p = self.p;
        (0..p)
            .map(|i| {
                let mut e = vec![0.0; p];
                e[i] = 1.0;
                self.solve(&e)[i]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstats::ScoredEntry;

    fn entry(id: &str, score: f64, group: Group, covs: &[(&str, f64)]) -> ScoredEntry {
        let mut e = ScoredEntry::new(id, score, group);
        for (k, v) in covs {
            e.covariates.insert((*k).into(), *v);
        }
        e
    }

    #[test]
    fn symmetric_noise_covariate_gets_a_zero_coefficient() {
        // Balanced outcomes, covariate orthogonal to the label by symmetry.
        let entries = vec![
            entry("a", 0.5, Group::Pd, &[("x", 1.0)]),
            entry("b", 0.5, Group::Pd, &[("x", -1.0)]),
            entry("c", 0.5, Group::Control, &[("x", 1.0)]),
            entry("d", 0.5, Group::Control, &[("x", -1.0)]),
            entry("e", 0.4, Group::Pd, &[("x", 2.0)]),
            entry("f", 0.4, Group::Pd, &[("x", -2.0)]),
            entry("g", 0.4, Group::Control, &[("x", 2.0)]),
            entry("h", 0.4, Group::Control, &[("x", -2.0)]),
        ];
        let cohort = ScoredCohort::new(entries).unwrap();
        // Metric has zero variance across labels too: both coefs ~0.
        let fit = logistic_fit(&cohort, "metric", &["x"]).unwrap();
        assert!(fit.converged);
        assert!(!fit.separation);
        assert!(fit.term("x").unwrap().coef.abs() < 1e-6);
        assert!(fit.term("metric").unwrap().coef.abs() < 1e-6);
        assert!((fit.term("x").unwrap().p - 1.0).abs() < 1e-6);
    }

    #[test]
    fn intercept_only_reproduces_the_logit_of_the_base_rate() {
        // 3 of 4 positive: intercept = ln(3).
        let x = vec![1.0, 1.0, 1.0, 1.0];
        let y = vec![1.0, 1.0, 1.0, 0.0];
        let fit = fit_logistic_raw(&x, &y, &["intercept".into()]).unwrap();
        assert!(fit.converged);
        assert!((fit.terms[0].coef - 3.0f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn beats_a_dense_grid_on_a_small_problem() {
        let xs = [-1.2, -0.7, -0.3, 0.1, 0.4, 0.9, 1.3, 1.8];
        let ys = [0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut design = Vec::new();
        for &v in &xs {
            design.push(1.0);
            design.push(v);
        }
        let fit =
            fit_logistic_raw(&design, &ys, &["intercept".into(), "x".into()]).unwrap();
        assert!(fit.converged);
        let ll_of = |b0: f64, b1: f64| {
            let mut ll = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let eta: f64 = b0 + b1 * x;
                ll += y * eta - (eta.max(0.0) + (-eta.abs()).exp().ln_1p());
            }
            ll
        };
        let mut best_grid = f64::NEG_INFINITY;
        let mut i = -80;
        while i <= 80 {
            let mut j = -80;
            while j <= 80 {
                best_grid = best_grid.max(ll_of(i as f64 * 0.1, j as f64 * 0.1));
                j += 1;
            }
            i += 1;
        }
        assert!(
            fit.log_likelihood >= best_grid - 1e-9,
            "fit {} vs grid {best_grid}",
            fit.log_likelihood
        );
    }

    #[test]
    fn shifting_a_covariate_moves_only_the_intercept() {
        let data = [
            (0.31, 60.0, Group::Pd),
            (0.07, 55.0, Group::Control),
            (0.25, 71.0, Group::Pd),
            (0.11, 62.0, Group::Control),
            (0.28, 58.0, Group::Pd),
            (0.16, 66.0, Group::Control),
            (0.19, 69.0, Group::Pd),
            (0.09, 52.0, Group::Control),
            (0.22, 64.0, Group::Pd),
            (0.13, 59.0, Group::Control),
        ];
        let build = |shift: f64| {
            let entries = data
                .iter()
                .enumerate()
                .map(|(i, (s, age, g))| entry(&format!("s{i}"), *s, *g, &[("age", age + shift)]))
                .collect();
            ScoredCohort::new(entries).unwrap()
        };
        let f0 = logistic_fit(&build(0.0), "nqi", &["age"]).unwrap();
        let f1 = logistic_fit(&build(25.0), "nqi", &["age"]).unwrap();
        assert!((f0.term("nqi").unwrap().coef - f1.term("nqi").unwrap().coef).abs() < 1e-6);
        assert!((f0.term("age").unwrap().coef - f1.term("age").unwrap().coef).abs() < 1e-6);
        assert!((f0.term("nqi").unwrap().p - f1.term("nqi").unwrap().p).abs() < 1e-6);
        assert!(
            (f0.term("intercept").unwrap().coef - f1.term("intercept").unwrap().coef).abs() > 0.1
        );
    }

    #[test]
    fn perfect_separation_is_flagged_not_silent() {
        let entries = vec![
            entry("a", 1.0, Group::Pd, &[]),
            entry("b", 2.0, Group::Pd, &[]),
            entry("c", 3.0, Group::Pd, &[]),
            entry("d", -1.0, Group::Control, &[]),
            entry("e", -2.0, Group::Control, &[]),
            entry("f", -3.0, Group::Control, &[]),
        ];
        let cohort = ScoredCohort::new(entries).unwrap();
        let fit = logistic_fit(&cohort, "m", &[]).unwrap();
        assert!(fit.separation, "separated data must be flagged");
    }

    #[test]
    fn duplicate_columns_are_rank_deficient() {
        let entries = vec![
            entry("a", 0.5, Group::Pd, &[("dup", 0.5)]),
            entry("b", 0.1, Group::Control, &[("dup", 0.1)]),
            entry("c", 0.6, Group::Pd, &[("dup", 0.6)]),
            entry("d", 0.2, Group::Control, &[("dup", 0.2)]),
        ];
        let cohort = ScoredCohort::new(entries).unwrap();
        assert!(matches!(
            logistic_fit(&cohort, "m", &["dup"]),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn missing_covariate_is_an_error() {
        let entries = vec![
            entry("a", 0.5, Group::Pd, &[("x", 1.0)]),
            entry("b", 0.1, Group::Control, &[]),
        ];
        let cohort = ScoredCohort::new(entries).unwrap();
        assert!(logistic_fit(&cohort, "m", &["x"]).is_err());
    }

    #[test]
    fn informative_metric_gets_a_positive_coefficient_and_small_p() {
        use rand::RngExt;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut entries = Vec::new();
        for i in 0..120 {
            let pd = i % 2 == 0;
            let noise: f64 = rng.random::<f64>() - 0.5;
            // Heavy overlap: a moderate effect keeps the Wald test in its
            // well-behaved regime (near-separation would inflate the SE).
            let score = if pd { 0.25 } else { 0.18 } + 0.2 * noise;
            let age = 55.0 + 20.0 * rng.random::<f64>();
            entries.push(entry(
                &format!("s{i}"),
                score,
                if pd { Group::Pd } else { Group::Control },
                &[("age", age)],
            ));
        }
        let cohort = ScoredCohort::new(entries).unwrap();
        let fit = logistic_fit(&cohort, "nqi", &["age"]).unwrap();
        assert!(fit.converged && !fit.separation);
        let term = fit.term("nqi").unwrap();
        assert!(term.coef > 0.0);
        assert!(term.p < 0.05, "p = {}", term.p);
        assert!(term.p >= 0.0);
    }

    #[test]
    fn cholesky_solves_a_known_system() {
        // A = [[4,2],[2,3]], b = [2, 0] -> x = A^{-1} b = [0.75, -0.5].
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let chol = cholesky(&a, 2, 0.0).unwrap();
        let x = chol.solve(&[2.0, 0.0]);
        assert!((x[0] - 0.75).abs() < 1e-12);
        assert!((x[1] + 0.5).abs() < 1e-12);
        // inverse diag of A: [3/8, 1/2].
        let d = chol.inverse_diagonal();
        assert!((d[0] - 0.375).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
    }
}
