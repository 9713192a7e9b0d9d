//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is deliberately written in the most direct style
//! available — dense loops, exhaustive scans, an off-the-shelf interior-point
//! QP solver — so that agreement with the library is evidence of correctness
//! rather than the same idea written down twice.

#![allow(dead_code)] // each integration-test binary uses a subset

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use nqi::svr::SvrProblem;

// ---------------------------------------------------------------------------
// Reference tube-regression solve (interior-point QP)
// ---------------------------------------------------------------------------

pub struct ReferenceSvr {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Optimal primal value, obtained as the negated optimum of the dual QP
    /// (strong duality holds: convex QP over a non-empty box).
    pub objective: f64,
}

/// Solves the ε-insensitive regression dual as an explicit QP.
///
/// Stacking x = [a*; a] (2l variables), the dual is
///
///   minimize   ½ xᵀ P x + qᵀ x,      P = [[K, -K], [-K, K]],
///              q = [ε - z; ε + z]    (K the Gram matrix of the inputs)
///   subject to Σ a* - Σ a = 0,       0 ≤ x ≤ C.
///
/// The recovered primal is w = Σ (a*_i - a_i) x_i; the multiplier on the
/// equality row is the bias b (from stationarity at any strictly free
/// coordinate, and within the optimal-bias interval otherwise).
pub fn reference_svr(problem: &SvrProblem) -> ReferenceSvr {
    let l = problem.len();
    let d = problem.dim();
    let two_l = 2 * l;

    let mut gram = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in 0..l {
            let mut s = 0.0;
            for t in 0..d {
                s += problem.input(i)[t] * problem.input(j)[t];
            }
            gram[i][j] = s;
        }
    }

    let mut p_rows = vec![vec![0.0; two_l]; two_l];
    for i in 0..l {
        for j in 0..l {
            p_rows[i][j] = gram[i][j];
            p_rows[i][l + j] = -gram[i][j];
            p_rows[l + i][j] = -gram[i][j];
            p_rows[l + i][l + j] = gram[i][j];
        }
    }
    let mut q = vec![0.0; two_l];
    for i in 0..l {
        q[i] = problem.epsilon() - problem.targets()[i];
        q[l + i] = problem.epsilon() + problem.targets()[i];
    }

    // Row 0: equality Σa* - Σa = 0 (zero cone); rows 1..=2l: x + s = C;
    // rows 2l+1..=4l: -x + s = 0 (both with nonnegative slack).
    let mut a_rows = vec![vec![0.0; two_l]; 1 + 2 * two_l];
    for i in 0..l {
        a_rows[0][i] = 1.0;
        a_rows[0][l + i] = -1.0;
    }
    for j in 0..two_l {
        a_rows[1 + j][j] = 1.0;
        a_rows[1 + two_l + j][j] = -1.0;
    }
    let mut b = vec![0.0];
    b.extend(std::iter::repeat(problem.c()).take(two_l));
    b.extend(std::iter::repeat(0.0).take(two_l));

    let cones = [
        SupportedConeT::ZeroConeT(1),
        SupportedConeT::NonnegativeConeT(2 * two_l),
    ];
    let settings = DefaultSettings {
        verbose: false,
        max_iter: 500,
        tol_gap_abs: 1e-12,
        tol_gap_rel: 1e-12,
        tol_feas: 1e-12,
        ..DefaultSettings::default()
    };
    let p_mat = CscMatrix::from(&p_rows);
    let a_mat = CscMatrix::from(&a_rows);
    let mut solver =
        DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, settings).expect("QP setup");
    solver.solve();
    assert_eq!(
        solver.solution.status,
        SolverStatus::Solved,
        "reference QP did not reach full accuracy"
    );

    let x = &solver.solution.x;
    let mut weights = vec![0.0; d];
    for i in 0..l {
        let beta = x[i] - x[l + i];
        for (w, xi) in weights.iter_mut().zip(problem.input(i)) {
            *w += beta * xi;
        }
    }
    ReferenceSvr {
        weights,
        bias: solver.solution.z[0],
        objective: -solver.solution.obj_val,
    }
}

/// Random dense regression problem for solver comparisons.
pub fn random_problem(rng: &mut ChaCha8Rng, max_points: usize, dim: usize) -> SvrProblem {
    let l = rng.random_range(2..=max_points);
    let c = rng.random_range(0.01..=10.0);
    let epsilon = rng.random_range(0.01..=0.2);
    let mut inputs = Vec::with_capacity(l);
    let mut targets = Vec::with_capacity(l);
    for _ in 0..l {
        inputs.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        targets.push(rng.random_range(0.0..1.0));
    }
    SvrProblem::new(inputs, targets, c, epsilon).expect("random problem is well-formed")
}

// ---------------------------------------------------------------------------
// Naive window featurizer
// ---------------------------------------------------------------------------

/// Recomputes the 7 window features from the window's press and hold times
/// with plain loops and explicit range tests.
pub fn naive_window_features(press: &[f64], hold: &[f64]) -> [f64; 7] {
    let n = hold.len();
    assert!(n > 0 && press.len() == n);

    let mut sorted = hold.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |p: f64| -> f64 {
        let h = (sorted.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(sorted.len() - 1);
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    };
    let q1 = quantile(0.25);
    let q2 = quantile(0.50);
    let q3 = quantile(0.75);

    let lo_fence = q1 - 1.5 * (q3 - q1);
    let hi_fence = q3 + 1.5 * (q3 - q1);
    let n_out = hold.iter().filter(|&&h| h < lo_fence || h > hi_fence).count();
    let v_out = n_out as f64 / n as f64;

    let v_iqr = if q3 - q1 == 0.0 {
        0.5
    } else {
        (q2 - q1) / (q3 - q1)
    };

    let v_de = if n < 2 {
        0.0
    } else {
        let mut sum = 0.0;
        for k in 0..n - 1 {
            let overlap = press[k] + hold[k] - press[k + 1];
            if overlap > 0.0 {
                sum += overlap;
            }
        }
        sum / (n - 1) as f64
    };

    let mut counts = [0usize; 4];
    for &h in hold {
        if h < 0.125 {
            counts[0] += 1;
        } else if h < 0.25 {
            counts[1] += 1;
        } else if h < 0.375 {
            counts[2] += 1;
        } else if h < 0.5 {
            counts[3] += 1;
        }
    }

    [
        v_out,
        v_iqr,
        v_de,
        counts[0] as f64 / n as f64,
        counts[1] as f64 / n as f64,
        counts[2] as f64 / n as f64,
        counts[3] as f64 / n as f64,
    ]
}

// ---------------------------------------------------------------------------
// Rank statistics by brute force
// ---------------------------------------------------------------------------

/// Pair count of (first over second), ties at half weight.
pub fn pairwise_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for &x in a {
        for &y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// AUC as the normalized pairwise count.
pub fn pairwise_auc(pd: &[f64], control: &[f64]) -> f64 {
    pairwise_u(pd, control) / (pd.len() as f64 * control.len() as f64)
}

/// Exact two-sided rank-test p for tie-free samples, by enumerating every
/// assignment of the combined sample's positions to the first group. The
/// two-sided region is |U - mn/2| ≥ |u_obs - mn/2|; all quantities involved
/// are exactly representable, so the comparisons are exact.
pub fn enumerated_mw_p(a: &[f64], b: &[f64]) -> f64 {
    let m = a.len();
    let n = b.len();
    let total = m + n;
    assert!(total <= 16, "enumeration oracle is exponential in n");
    let values: Vec<f64> = a.iter().chain(b).copied().collect();
    let center = (m * n) as f64 / 2.0;
    let dev_obs = (pairwise_u(a, b) - center).abs();

    let mut arrangements = 0u64;
    let mut extreme = 0u64;
    for mask in 0u32..(1 << total) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let mut ga = Vec::with_capacity(m);
        let mut gb = Vec::with_capacity(n);
        for (pos, &v) in values.iter().enumerate() {
            if mask & (1 << pos) != 0 {
                ga.push(v);
            } else {
                gb.push(v);
            }
        }
        arrangements += 1;
        if (pairwise_u(&ga, &gb) - center).abs() >= dev_obs {
            extreme += 1;
        }
    }
    extreme as f64 / arrangements as f64
}

// ---------------------------------------------------------------------------
// Exhaustive operating-point scan
// ---------------------------------------------------------------------------

pub struct OracleCut {
    pub threshold: f64,
    pub objective: f64,
    pub true_positives: usize,
    pub true_negatives: usize,
}

/// Scans every candidate threshold (both infinities plus midpoints of
/// adjacent distinct scores) and scores cost_fn·TP + cost_fp·TN by direct
/// counting; ties keep the higher threshold.
pub fn exhaustive_youden(pd: &[f64], control: &[f64], cost_fn: f64, cost_fp: f64) -> OracleCut {
    let mut distinct: Vec<f64> = pd.iter().chain(control).copied().collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    for pair in distinct.windows(2) {
        candidates.push(0.5 * (pair[0] + pair[1]));
    }
    candidates.push(f64::INFINITY);

    let mut best: Option<OracleCut> = None;
    for &t in &candidates {
        let tp = pd.iter().filter(|&&v| v > t).count();
        let tn = control.iter().filter(|&&v| v <= t).count();
        let objective = cost_fn * tp as f64 + cost_fp * tn as f64;
        if best.as_ref().is_none_or(|b| objective >= b.objective) {
            best = Some(OracleCut {
                threshold: t,
                objective,
                true_positives: tp,
                true_negatives: tn,
            });
        }
    }
    best.expect("candidate list is never empty")
}

// ---------------------------------------------------------------------------
// Logistic likelihood oracle
// ---------------------------------------------------------------------------

/// Bernoulli log-likelihood at `beta` on a row-major design matrix,
/// in the overflow-safe form y·η - ln(1 + e^η).
pub fn logistic_ll(x: &[f64], y: &[f64], beta: &[f64]) -> f64 {
    let p = beta.len();
    let mut ll = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let mut eta = 0.0;
        for j in 0..p {
            eta += x[i * p + j] * beta[j];
        }
        let log1pe = if eta > 33.0 { eta } else { eta.exp().ln_1p() };
        ll += yi * eta - log1pe;
    }
    ll
}

/// Best log-likelihood over a dense axis-aligned grid centred at `center`
/// (steps^dim points spanning ±radius on every axis).
pub fn grid_max_ll(x: &[f64], y: &[f64], center: &[f64], radius: f64, steps: usize) -> f64 {
    assert!(steps >= 2);
    let dim = center.len();
    let mut idx = vec![0usize; dim];
    let mut best = f64::NEG_INFINITY;
    loop {
        let beta: Vec<f64> = (0..dim)
            .map(|j| center[j] - radius + 2.0 * radius * idx[j] as f64 / (steps - 1) as f64)
            .collect();
        let ll = logistic_ll(x, y, &beta);
        if ll > best {
            best = ll;
        }
        let mut j = 0;
        loop {
            idx[j] += 1;
            if idx[j] < steps {
                break;
            }
            idx[j] = 0;
            j += 1;
            if j == dim {
                return best;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

/// Unbiased sample variance.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    assert!(n > 1.0);
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Standard normal draw via Box-Muller, so the oracles do not share a
/// distribution implementation with the library.
pub fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
