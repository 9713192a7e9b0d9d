//! Two-sided Mann-Whitney U test.
//!
//! Small tie-free samples (combined n ≤ 12) get an exact permutation
//! p-value by counting rank arrangements; everything else uses the normal
//! approximation with tie and continuity corrections. The U statistic itself
//! always counts (a over b) pairs with ties at half weight.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

use super::roc::midranks;

/// Largest combined sample size handled by exact enumeration.
const EXACT_LIMIT: usize = 12;

/// Returns (U of the first group, two-sided p).
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput {
            what: "rank test group".into(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("rank test", "non-finite value"));
    }
    let m = a.len();
    let n = b.len();
    let mut combined = Vec::with_capacity(m + n);
    combined.extend_from_slice(a);
    combined.extend_from_slice(b);
    let ranks = midranks(&combined);
    let r_a: f64 = ranks[..m].iter().sum();
    let u = r_a - (m * (m + 1)) as f64 / 2.0;

    // Tie scan on the sorted combined sample.
    let mut sorted = combined.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0; // sum over runs of t^3 - t
    let mut has_ties = false;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        if j - i > 1 {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        i = j;
    }

    let p = if !has_ties && m + n <= EXACT_LIMIT {
        exact_two_sided_p(m, n, u)
    } else {
        normal_two_sided_p(m, n, u, tie_term)
    };
    Ok((u, p))
}

/// Exact null distribution of U by dynamic programming over arrangements:
/// f(m, n, u) = f(m-1, n, u-n) + f(m, n-1, u).
fn exact_two_sided_p(m: usize, n: usize, u: f64) -> f64 {
    let u_obs = u.round() as i64;
    debug_assert!((u - u_obs as f64).abs() < 1e-9, "tie-free U is an integer");
    let max_u = m * n;
    // table[i][j][u] built bottom-up; store only counts per u for each (i, j).
    let mut table = vec![vec![Vec::<u64>::new(); n + 1]; m + 1];
    for j in 0..=n {
        table[0][j] = vec![1];
    }
    for i in 1..=m {
        table[i][0] = vec![1];
        for j in 1..=n {
            let cap = i * j;
            let mut counts = vec![0u64; cap + 1];
            // Last merged element is from group a (beats all j b's): u - j,
            // or from group b: u unchanged.
            for (u_val, slot) in counts.iter_mut().enumerate() {
                if u_val >= j {
                    if let Some(&c) = table[i - 1][j].get(u_val - j) {
                        *slot += c;
                    }
                }
                if let Some(&c) = table[i][j - 1].get(u_val) {
                    *slot += c;
                }
            }
            table[i][j] = counts;
        }
    }
    let dist = &table[m][n];
    let total: u64 = dist.iter().sum();
    let mirror = max_u as i64 - u_obs;
    let lo = u_obs.min(mirror).max(0) as usize;
    let hi = u_obs.max(mirror).min(max_u as i64) as usize;
    let lower: u64 = dist[..=lo].iter().sum();
    let upper: u64 = dist[hi..].iter().sum();
    ((lower + upper) as f64 / total as f64).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_two_sided_p(m: usize, n: usize, u: f64, tie_term: f64) -> f64 {
    let mf = m as f64;
    let nf = n as f64;
    let big_n = mf + nf;
    let mu = mf * nf / 2.0;
    let var = mf * nf / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - normal.cdf(z))).clamp(0.0, 1.0)
}
