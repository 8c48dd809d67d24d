//! Long-only minimum-variance weights:
//! `min wᵀΣw  s.t.  Σw = 1, w ≥ 0, μᵀw ≥ r_min`.
//!
//! The problem is a small convex QP, solved exactly by enumerating supports:
//! for each support and each status of the return constraint the equality
//! KKT system is solved directly, and the cheapest feasible candidate wins.
//! The optimum always appears among the candidates.

use crate::error::{bail, Result};
use crate::features::MarketData;
use crate::metrics::TRADING_DAYS;

/// Largest universe handled by support enumeration (2^l candidates).
pub const MAX_ENUMERATED: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct MarkowitzInput {
    /// Annualised expected returns.
    pub mu: Vec<f64>,
    /// Annualised covariance, row-major `l × l`.
    pub sigma: Vec<Vec<f64>>,
    /// Annualised minimum portfolio return; `None` drops the constraint.
    pub r_min: Option<f64>,
}

impl MarkowitzInput {
    pub fn objective(&self, w: &[f64]) -> f64 {
        let l = w.len();
        (0..l)
            .map(|i| (0..l).map(|j| w[i] * self.sigma[i][j] * w[j]).sum::<f64>())
            .sum()
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting;
/// `None` when the matrix is numerically singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Some(x)
}

/// Stationary point of the problem restricted to `support`, with the
/// return constraint as an equality when `target` is given.
fn kkt_candidate(input: &MarkowitzInput, support: &[usize], target: Option<f64>) -> Option<Vec<f64>> {
    let k = support.len();
    let n = k + 1 + usize::from(target.is_some());
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for (p, &i) in support.iter().enumerate() {
        for (q, &j) in support.iter().enumerate() {
            a[p][q] = 2.0 * input.sigma[i][j];
        }
        a[p][k] = 1.0;
        a[k][p] = 1.0;
        if target.is_some() {
            a[p][k + 1] = input.mu[i];
            a[k + 1][p] = input.mu[i];
        }
    }
    b[k] = 1.0;
    if let Some(r) = target {
        b[k + 1] = r;
    }
    let x = solve(a, b)?;
    let mut w = vec![0.0; input.mu.len()];
    for (p, &i) in support.iter().enumerate() {
        w[i] = x[p];
    }
    Some(w)
}

pub fn markowitz_weights(input: &MarkowitzInput) -> Result<Vec<f64>> {
    let l = input.mu.len();
    if l == 0 {
        bail!(Domain, "Markowitz with no assets");
    }
    if input.sigma.len() != l || input.sigma.iter().any(|r| r.len() != l) {
        bail!(Shape, "covariance must be {l}×{l}");
    }
    if l > MAX_ENUMERATED {
        bail!(Domain, "Markowitz enumeration supports at most {MAX_ENUMERATED} assets, got {l}");
    }
    if input.mu.iter().chain(input.sigma.iter().flatten()).any(|v| !v.is_finite()) {
        bail!(Numeric, "non-finite Markowitz inputs");
    }
    let max_mu = input.mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if let Some(r) = input.r_min {
        if r > max_mu + 1e-12 * max_mu.abs().max(1.0) {
            bail!(Infeasible, "minimum return {r} exceeds the best expected return {max_mu}");
        }
    }
    let tol = 1e-12;
    let feasible = |w: &[f64]| {
        w.iter().all(|&x| x >= -tol)
            && input
                .r_min
                .is_none_or(|r| input.mu.iter().zip(w).map(|(m, x)| m * x).sum::<f64>() >= r - tol * r.abs().max(1.0))
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << l) {
        let support: Vec<usize> = (0..l).filter(|i| mask & (1 << i) != 0).collect();
        let targets = std::iter::once(None).chain(input.r_min.map(Some));
        for target in targets {
            let Some(mut w) = kkt_candidate(input, &support, target) else {
                continue;
            };
            if !feasible(&w) {
                continue;
            }
            for x in &mut w {
                *x = x.max(0.0);
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            let obj = input.objective(&w);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, w));
            }
        }
    }
    match best {
        Some((_, w)) => Ok(w),
        None => bail!(Infeasible, "no feasible long-only portfolio"),
    }
}

/// Smallest pivot of an LDLᵀ factorisation; negative means indefinite.
fn min_pivot(s: &[Vec<f64>]) -> f64 {
    let n = s.len();
    let mut l = vec![vec![0.0; n]; n];
    let mut d = vec![0.0; n];
    let mut worst = f64::INFINITY;
    for j in 0..n {
        d[j] = s[j][j] - (0..j).map(|k| l[j][k] * l[j][k] * d[k]).sum::<f64>();
        worst = worst.min(d[j]);
        for i in j + 1..n {
            let v = s[i][j] - (0..j).map(|k| l[i][k] * l[j][k] * d[k]).sum::<f64>();
            l[i][j] = if d[j].abs() > 1e-300 { v / d[j] } else { 0.0 };
        }
    }
    worst
}

/// Annualised mean and covariance from returns days
/// `t + 1 − window ..= t`, with the minimum return defaulting to the
/// equal-weight portfolio's.
pub fn estimate_markowitz(data: &MarketData, t: usize, window: usize, r_min: Option<f64>) -> Result<MarkowitzInput> {
    if window < 2 || t + 1 < window || t >= data.len() {
        bail!(Range, "need {window} days of history ending at index {t}");
    }
    let l = data.strategy_count();
    let cols: Vec<&[f64]> = data.strategies.iter().map(|s| &s.values[t + 1 - window..=t]).collect();
    let n = window as f64;
    let means: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let mut sigma = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in 0..=i {
            let c = cols[i]
                .iter()
                .zip(cols[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum::<f64>()
                / n
                * TRADING_DAYS;
            sigma[i][j] = c;
            sigma[j][i] = c;
        }
    }
    let trace: f64 = (0..l).map(|i| sigma[i][i]).sum();
    let load = 1e-8 * trace.max(f64::MIN_POSITIVE) / l as f64;
    for _ in 0..20 {
        if min_pivot(&sigma) >= -1e-10 {
            break;
        }
        for (i, row) in sigma.iter_mut().enumerate() {
            row[i] += load;
        }
    }
    let mu: Vec<f64> = means.iter().map(|m| m * TRADING_DAYS).collect();
    let r_min = Some(r_min.unwrap_or_else(|| mu.iter().sum::<f64>() / l as f64));
    Ok(MarkowitzInput { mu, sigma, r_min })
}
