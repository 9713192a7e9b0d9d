//! Linear support-vector regression with an epsilon-insensitive loss.
//!
//! Trains by deterministic pairwise coordinate ascent on the dual of
//!
//! ```text
//! min 1/2 ||w||^2 + C * sum_i (xi_i + xi*_i)
//! s.t. |w.x_i + b - z_i| <= eps + slack,  slack >= 0
//! ```
//!
//! The dual has one variable pair (a*_i, a_i) per training point, box bounds
//! [0, C], and a single equality constraint from the free bias, so updates
//! move a pair of coordinates at a time. Pair selection is by maximal KKT
//! violation with a second-order gain rule and index-order tie-breaks, which
//! makes every run bit-reproducible for a given problem. The stopping rule is
//! an explicit KKT violation bound; the bias is the midpoint of the optimal
//! interval, which keeps flat directions (and target translation) exact.

use crate::error::{Error, Result};

/// Curvature guard for pairs with identical inputs.
const TAU: f64 = 1e-12;
/// Rebuild the gradient from scratch this often to cancel additive drift.
const GRAD_REFRESH_ITERS: usize = 8192;

/// A fully specified training problem.
#[derive(Debug, Clone)]
pub struct SvrProblem {
    x: Vec<f64>,
    dim: usize,
    targets: Vec<f64>,
    c: f64,
    epsilon: f64,
}

impl SvrProblem {
    /// Validates shapes and parameter ranges.
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>, c: f64, epsilon: f64) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyInput {
                what: "svr training set".into(),
            });
        }
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        let dim = inputs[0].len();
        if dim == 0 {
            return Err(Error::invalid("svr inputs", "zero-dimensional inputs"));
        }
        let mut x = Vec::with_capacity(inputs.len() * dim);
        for row in &inputs {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("svr inputs", "non-finite feature value"));
            }
            x.extend_from_slice(row);
        }
        if targets.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("svr targets", "non-finite target"));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::invalid("svr params", "c must be positive"));
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::invalid("svr params", "epsilon must be non-negative"));
        }
        Ok(SvrProblem {
            x,
            dim,
            targets,
            c,
            epsilon,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }
}

/// A trained linear unit with its optimality certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Primal objective value at (weights, bias).
    pub objective: f64,
    /// Maximum KKT violation certified at the end of training.
    pub kkt_residual: f64,
    /// Dual pair (a*_i in [0..l], a_i in [l..2l]); retained for
    /// re-certification, not persisted.
    pub dual_coefs: Vec<f64>,
}

impl SvrModel {
    /// `w.x + b` without shape checks (caller guarantees dimensions).
    pub fn predict_raw(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.weights.len());
        dot(&self.weights, x) + self.bias
    }
}

/// Prediction with a dimension check.
pub fn predict(model: &SvrModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: model.weights.len(),
            got: x.len(),
        });
    }
    Ok(model.predict_raw(x))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (u, v) in a.iter().zip(b) {
        s += u * v;
    }
    s
}

/// Primal objective of (w, b) on `problem`.
pub fn primal_objective(problem: &SvrProblem, weights: &[f64], bias: f64) -> f64 {
    let mut slack = 0.0;
    for i in 0..problem.len() {
        let r = dot(weights, problem.input(i)) + bias - problem.targets[i];
        slack += (r.abs() - problem.epsilon).max(0.0);
    }
    0.5 * dot(weights, weights) + problem.c * slack
}

struct DualState {
    l: usize,
    gram: Vec<f64>,
    /// 2l dual variables: slot i is a*_i, slot l+i is a_i.
    gamma: Vec<f64>,
    /// Gradient of the dual objective at `gamma`.
    grad: Vec<f64>,
}

impl DualState {
    fn new(problem: &SvrProblem) -> Self {
        let l = problem.len();
        let mut gram = vec![0.0; l * l];
        for i in 0..l {
            for j in 0..=i {
                let v = dot(problem.input(i), problem.input(j));
                gram[i * l + j] = v;
                gram[j * l + i] = v;
            }
        }
        let mut state = DualState {
            l,
            gram,
            gamma: vec![0.0; 2 * l],
            grad: vec![0.0; 2 * l],
        };
        state.rebuild_gradient(problem);
        state
    }

    fn beta(&self, i: usize) -> f64 {
        self.gamma[i] - self.gamma[self.l + i]
    }

    /// grad[t] = y_t * (K beta)_i + eps - y_t * z_i, with y = +1 on the a*
    /// half and -1 on the a half.
    fn rebuild_gradient(&mut self, problem: &SvrProblem) {
        let l = self.l;
        for i in 0..l {
            let mut kb = 0.0;
            let row = &self.gram[i * l..(i + 1) * l];
            for j in 0..l {
                let b = self.beta(j);
                if b != 0.0 {
                    kb += row[j] * b;
                }
            }
            let e = problem.epsilon;
            let z = problem.targets[i];
            self.grad[i] = kb + e - z;
            self.grad[l + i] = -kb + e + z;
        }
    }

    /// Optimality bounds: the bias must lie in [m, M] at the optimum.
    /// Returns (m, arg_m, M) where arg_m maximizes the violation on the
    /// "can increase" side; smallest index wins ties.
    fn violation_bounds(&self, c: f64) -> (f64, usize, f64) {
        let l = self.l;
        let mut m = f64::NEG_INFINITY;
        let mut arg_m = usize::MAX;
        let mut big_m = f64::INFINITY;
        for t in 0..2 * l {
            let up = if t < l {
                self.gamma[t] < c
            } else {
                self.gamma[t] > 0.0
            };
            let low = if t < l {
                self.gamma[t] > 0.0
            } else {
                self.gamma[t] < c
            };
            // val = -y_t * grad[t]
            let val = if t < l { -self.grad[t] } else { self.grad[t] };
            if up && val > m {
                m = val;
                arg_m = t;
            }
            if low && val < big_m {
                big_m = val;
            }
        }
        (m, arg_m, big_m)
    }
}

/// Trains to KKT violation `tol` within `max_iter` pair updates.
///
/// On iteration exhaustion the best iterate is returned inside the error.
pub fn train_svr(problem: &SvrProblem, tol: f64, max_iter: usize) -> Result<SvrModel> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::invalid("svr params", "tol must be positive"));
    }
    let l = problem.len();
    let c = problem.c;
    let mut st = DualState::new(problem);
    let mut iterations = 0usize;
    let mut converged = false;

    loop {
        if iterations > 0 && iterations % GRAD_REFRESH_ITERS == 0 {
            st.rebuild_gradient(problem);
        }
        let (m, s, big_m) = st.violation_bounds(c);
        if m - big_m <= tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }

        // Second index: maximal second-order gain among admissible partners,
        // smallest index on ties.
        let i = s % l;
        let krow_i = &st.gram[i * l..(i + 1) * l];
        let kii = krow_i[i];
        let mut best_u = usize::MAX;
        let mut best_gain = f64::NEG_INFINITY;
        for t in 0..2 * l {
            let low = if t < l {
                st.gamma[t] > 0.0
            } else {
                st.gamma[t] < c
            };
            if !low {
                continue;
            }
            let val = if t < l { -st.grad[t] } else { st.grad[t] };
            if val >= m {
                continue;
            }
            let j = t % l;
            let a = (kii + st.gram[j * l + j] - 2.0 * krow_i[j]).max(TAU);
            let diff = m - val;
            let gain = diff * diff / a;
            if gain > best_gain {
                best_gain = gain;
                best_u = t;
            }
        }
        debug_assert_ne!(best_u, usize::MAX, "violating pair must exist");
        let u = best_u;
        let j = u % l;

        // Step along (d gamma_s, d gamma_u) = (y_s, -y_u) * delta, which
        // shifts beta mass from point j to point i and keeps the equality
        // constraint exact.
        let val_u = if u < l { -st.grad[u] } else { st.grad[u] };
        let a = (kii + st.gram[j * l + j] - 2.0 * krow_i[j]).max(TAU);
        let mut delta = (m - val_u) / a;
        // Box caps; `s` moves toward its open side, `u` away from its own.
        let cap_s = if s < l { c - st.gamma[s] } else { st.gamma[s] };
        let cap_u = if u < l { st.gamma[u] } else { c - st.gamma[u] };
        let mut clip_s = false;
        let mut clip_u = false;
        if delta >= cap_s {
            delta = cap_s;
            clip_s = true;
        }
        if delta >= cap_u {
            delta = cap_u;
            clip_u = true;
            clip_s = delta == cap_s;
        }
        if s < l {
            st.gamma[s] += delta;
            if clip_s {
                st.gamma[s] = c;
            }
        } else {
            st.gamma[s] -= delta;
            if clip_s {
                st.gamma[s] = 0.0;
            }
        }
        if u < l {
            st.gamma[u] -= delta;
            if clip_u {
                st.gamma[u] = 0.0;
            }
        } else {
            st.gamma[u] += delta;
            if clip_u {
                st.gamma[u] = c;
            }
        }
        // beta_i grows by delta, beta_j shrinks: rank-two gradient update.
        let krow_j = &st.gram[j * l..(j + 1) * l];
        for v in 0..l {
            let d = delta * (krow_i[v] - krow_j[v]);
            st.grad[v] += d;
            st.grad[l + v] -= d;
        }
        iterations += 1;
    }

    // Finalize from the duals: fresh weights, fresh gradient, midpoint bias.
    let dim = problem.dim;
    let mut weights = vec![0.0; dim];
    for i in 0..l {
        let b = st.beta(i);
        if b != 0.0 {
            let xi = problem.input(i);
            for (w, v) in weights.iter_mut().zip(xi) {
                *w += b * v;
            }
        }
    }
    st.rebuild_gradient(problem);
    let (m, _, big_m) = st.violation_bounds(c);
    debug_assert!(m.is_finite() && big_m.is_finite());
    let bias = 0.5 * (m + big_m);
    let mut model = SvrModel {
        weights,
        bias,
        objective: 0.0,
        kkt_residual: 0.0,
        dual_coefs: st.gamma.clone(),
    };
    model.objective = primal_objective(problem, &model.weights, model.bias);
    model.kkt_residual = kkt_check(&model, problem);

    if converged {
        Ok(model)
    } else {
        let residual = (m - big_m).max(0.0);
        Err(Error::Convergence {
            iterations,
            residual,
            tol,
            best: Box::new(model),
        })
    }
}

/// Maximum violation of the optimality conditions of `model` on `problem`.
///
/// Checks dual feasibility, the bias equality constraint, weight/dual
/// consistency, pairwise complementarity, and the per-point conditions tying
/// each dual pair to the signed residual. Requires a model that still carries
/// its dual coefficients (freshly trained, not deserialized).
pub fn kkt_check(model: &SvrModel, problem: &SvrProblem) -> f64 {
    let l = problem.len();
    assert_eq!(
        model.dual_coefs.len(),
        2 * l,
        "model does not carry duals for this problem"
    );
    assert_eq!(model.weights.len(), problem.dim);
    let c = problem.c;
    let eps = problem.epsilon;
    let mut worst = 0.0f64;
    let mut upd = |v: f64| {
        if v > worst {
            worst = v;
        }
    };

    // Weights must equal sum_i beta_i x_i.
    let mut w_from_duals = vec![0.0; problem.dim];
    let mut beta_sum = 0.0;
    for i in 0..l {
        let beta = model.dual_coefs[i] - model.dual_coefs[l + i];
        beta_sum += beta;
        if beta != 0.0 {
            for (w, v) in w_from_duals.iter_mut().zip(problem.input(i)) {
                *w += beta * v;
            }
        }
    }
    for (a, b) in w_from_duals.iter().zip(&model.weights) {
        upd((a - b).abs());
    }
    upd(beta_sum.abs());

    for i in 0..l {
        let a_star = model.dual_coefs[i];
        let a = model.dual_coefs[l + i];
        // Bound feasibility and pairwise complementarity.
        upd((-a_star).max(a_star - c));
        upd((-a).max(a - c));
        upd(a_star.min(a));
        // e = z - (w.x + b): a* binds above the tube, a below it.
        let e = problem.targets[i] - (dot(&model.weights, problem.input(i)) + model.bias);
        if a_star >= c {
            upd(eps - e);
        } else if a_star > 0.0 {
            upd((e - eps).abs());
        } else {
            upd(e - eps);
        }
        if a >= c {
            upd(e + eps);
        } else if a > 0.0 {
            upd((e + eps).abs());
        } else {
            upd(-e - eps);
        }
    }
    worst
}
