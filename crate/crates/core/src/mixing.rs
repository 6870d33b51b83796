//! Exact mixing coefficients on finite probability models.
//!
//! For two finite-valued random variables the beta coefficient is the total
//! variation distance between the joint law and the product of the marginals,
//! and the alpha coefficient is a maximum over pairs of events. Both are
//! computed exactly here, which turns the Davydov- and Ibragimov-type
//! covariance inequalities into finite sums that can be checked directly.

use rand::Rng;

use crate::stats::linear_fit;
use crate::{Error, Result};

/// Largest alphabet accepted by the exhaustive alpha enumeration (2^12 subsets).
pub const ALPHA_ENUMERATION_CAP: usize = 12;
/// Absolute tolerance for probability masses and row sums.
pub const MASS_TOL: f64 = 1e-12;
/// Slack allowed in every inequality verdict.
pub const CHECK_TOL: f64 = 1e-10;
/// Tolerance for the stationarity identity `pi P = pi`.
pub const STATIONARITY_TOL: f64 = 1e-10;

const POWER_ITERATION_TOL: f64 = 1e-12;
const POWER_ITERATION_MAX: usize = 1_000_000;

/// Exact joint probability table of two finite-valued random variables.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteJointDistribution {
    rows: usize,
    cols: usize,
    joint: Vec<f64>,
    marginal_x: Vec<f64>,
    marginal_y: Vec<f64>,
}

impl FiniteJointDistribution {
    /// Builds a distribution from a row-major `rows x cols` table.
    pub fn from_flat(rows: usize, cols: usize, joint: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Validation("empty alphabet".into()));
        }
        if joint.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} entries for a {rows}x{cols} table, got {}",
                rows * cols,
                joint.len()
            )));
        }
        if let Some(bad) = joint.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Validation(format!("invalid probability {bad}")));
        }
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Validation(format!("total mass {total} != 1")));
        }
        let marginal_x = (0..rows)
            .map(|i| joint[i * cols..(i + 1) * cols].iter().sum())
            .collect();
        let marginal_y = (0..cols)
            .map(|j| (0..rows).map(|i| joint[i * cols + j]).sum())
            .collect();
        Ok(Self {
            rows,
            cols,
            joint,
            marginal_x,
            marginal_y,
        })
    }

    pub fn from_rows(table: &[Vec<f64>]) -> Result<Self> {
        let cols = table.first().map_or(0, Vec::len);
        if table.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged joint table".into()));
        }
        Self::from_flat(table.len(), cols, table.concat())
    }

    /// The independent coupling of two marginals.
    pub fn product(px: &[f64], py: &[f64]) -> Result<Self> {
        let joint = px
            .iter()
            .flat_map(|a| py.iter().map(move |b| a * b))
            .collect();
        Self::from_flat(px.len(), py.len(), joint)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.joint[i * self.cols + j]
    }

    pub fn joint(&self) -> &[f64] {
        &self.joint
    }

    pub fn marginal_x(&self) -> &[f64] {
        &self.marginal_x
    }

    pub fn marginal_y(&self) -> &[f64] {
        &self.marginal_y
    }

    /// Product-measure mass of cell `(i, j)`.
    pub fn product_mass(&self, i: usize, j: usize) -> f64 {
        self.marginal_x[i] * self.marginal_y[j]
    }

    /// Same law with both alphabets relabeled: new cell `(a, b)` is old `(perm_x[a], perm_y[b])`.
    pub fn permuted(&self, perm_x: &[usize], perm_y: &[usize]) -> Result<Self> {
        let joint = perm_x
            .iter()
            .flat_map(|&i| perm_y.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.p(i, j))
            .collect();
        Self::from_flat(self.rows, self.cols, joint)
    }

    /// Essential supremum of the density w.r.t. the product of marginals.
    pub fn density_sup(&self) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let q = self.product_mass(i, j);
                let p = self.p(i, j);
                if q > 0.0 {
                    sup = sup.max(p / q);
                } else if p > 0.0 {
                    return Err(Error::AbsoluteContinuity(format!(
                        "cell ({i}, {j}) has joint mass {p} but zero product mass"
                    )));
                }
            }
        }
        Ok(sup)
    }
}

/// Beta coefficient: half the L^1 distance between the joint law and the
/// product of its marginals.
pub fn beta_exact(j: &FiniteJointDistribution) -> f64 {
    let mut sum = 0.0;
    for i in 0..j.rows {
        for k in 0..j.cols {
            sum += (j.p(i, k) - j.product_mass(i, k)).abs();
        }
    }
    0.5 * sum
}

/// Alpha coefficient: `max |P(A x B) - P(A)P(B)|` over subsets of both alphabets.
///
/// For a fixed `A` the best `B` collects either all positive or all negative
/// column gaps, so only the subsets of the row alphabet are enumerated.
pub fn alpha_exact(j: &FiniteJointDistribution) -> Result<f64> {
    if j.rows > ALPHA_ENUMERATION_CAP || j.cols > ALPHA_ENUMERATION_CAP {
        return Err(Error::Size(format!(
            "alphabets {}x{} exceed the enumeration cap {ALPHA_ENUMERATION_CAP}",
            j.rows, j.cols
        )));
    }
    let mut best: f64 = 0.0;
    let mut gaps = vec![0.0; j.cols];
    for mask in 1u32..(1 << j.rows) {
        let mut pa = 0.0;
        gaps.iter_mut().for_each(|g| *g = 0.0);
        for i in (0..j.rows).filter(|i| mask & (1 << i) != 0) {
            pa += j.marginal_x[i];
            for (c, g) in gaps.iter_mut().enumerate() {
                *g += j.p(i, c);
            }
        }
        let (mut pos, mut neg) = (0.0, 0.0);
        for (g, py) in gaps.iter().zip(&j.marginal_y) {
            let d = g - pa * py;
            if d > 0.0 {
                pos += d;
            } else {
                neg -= d;
            }
        }
        best = best.max(pos).max(neg);
    }
    Ok(best)
}

/// Finite-state stationary Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    states: usize,
    transition: Vec<f64>,
    stationary: Vec<f64>,
}

impl FiniteChain {
    /// Validates a row-stochastic matrix, requires irreducibility (so that the
    /// stationary law is unique) and computes it by lazy power iteration.
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::Validation("empty transition matrix".into()));
        }
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("transition matrix must be square".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Validation(format!("row {i} has an invalid entry")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > MASS_TOL {
                return Err(Error::Validation(format!("row {i} sums to {s}")));
            }
        }
        let transition = rows.concat();
        if !is_irreducible(m, &transition) {
            return Err(Error::Validation(
                "chain is reducible; stationary distribution is not unique".into(),
            ));
        }
        let stationary = lazy_power_iteration(m, &transition)?;
        let chain = Self {
            states: m,
            transition,
            stationary,
        };
        let drift = chain
            .step_distribution(&chain.stationary)
            .iter()
            .zip(&chain.stationary)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if drift > STATIONARITY_TOL {
            return Err(Error::Validation(format!(
                "power iteration did not reach stationarity (drift {drift})"
            )));
        }
        Ok(chain)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.transition[i * self.states + j]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// `(P + I) / 2`, same stationary law with nonnegative spectrum.
    pub fn lazy(&self) -> Result<Self> {
        let m = self.states;
        let rows: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| 0.5 * self.p(i, j) + if i == j { 0.5 } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(&rows)
    }

    /// Row vector times transition matrix.
    pub fn step_distribution(&self, v: &[f64]) -> Vec<f64> {
        let m = self.states;
        let mut out = vec![0.0; m];
        for (i, vi) in v.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += vi * self.transition[i * m + j];
            }
        }
        out
    }

    /// `P^n` in row-major order.
    pub fn power(&self, n: usize) -> Vec<f64> {
        let m = self.states;
        let mut result: Vec<f64> = (0..m * m)
            .map(|k| if k / m == k % m { 1.0 } else { 0.0 })
            .collect();
        let mut base = self.transition.clone();
        let mut e = n;
        while e > 0 {
            if e & 1 == 1 {
                result = matmul(m, &result, &base);
            }
            base = matmul(m, &base, &base);
            e >>= 1;
        }
        result
    }

    /// Joint law of `(X_0, X_n)` under stationarity.
    pub fn lag_joint(&self, n: usize) -> FiniteJointDistribution {
        let m = self.states;
        let pn = self.power(n);
        let mut joint: Vec<f64> = (0..m * m).map(|k| self.stationary[k / m] * pn[k]).collect();
        // Absorb rounding so that the table validates at MASS_TOL.
        let total: f64 = joint.iter().sum();
        joint.iter_mut().for_each(|p| *p /= total);
        FiniteJointDistribution::from_flat(m, m, joint)
            .expect("stationary lag joint is a valid distribution")
    }
}

fn matmul(m: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += aik * b[k * m + j];
            }
        }
    }
    out
}

fn is_irreducible(m: usize, transition: &[f64]) -> bool {
    let reach_all = |forward: bool| {
        let mut seen = vec![false; m];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                let w = if forward {
                    transition[i * m + j]
                } else {
                    transition[j * m + i]
                };
                if w > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach_all(true) && reach_all(false)
}

fn lazy_power_iteration(m: usize, transition: &[f64]) -> Result<Vec<f64>> {
    let mut v = vec![1.0 / m as f64; m];
    for _ in 0..POWER_ITERATION_MAX {
        let mut next = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                next[j] += v[i] * transition[i * m + j];
            }
        }
        let mut delta: f64 = 0.0;
        for j in 0..m {
            next[j] = 0.5 * (next[j] + v[j]);
            delta = delta.max((next[j] - v[j]).abs());
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        v = next;
        if delta < POWER_ITERATION_TOL {
            return Ok(polish_stationary(m, transition, v));
        }
    }
    Err(Error::Validation(format!(
        "power iteration did not converge in {POWER_ITERATION_MAX} steps"
    )))
}

/// Keeps iterating a converged vector until the updates stop shrinking, so
/// that `pi P = pi` holds to rounding rather than to the stopping tolerance.
fn polish_stationary(m: usize, transition: &[f64], mut v: Vec<f64>) -> Vec<f64> {
    let mut last = f64::INFINITY;
    for _ in 0..POWER_ITERATION_MAX {
        let mut next = vec![0.0; m];
        for i in 0..m {
            for j in 0..m {
                next[j] += v[i] * transition[i * m + j];
            }
        }
        let mut delta: f64 = 0.0;
        for j in 0..m {
            next[j] = 0.5 * (next[j] + v[j]);
            delta = delta.max((next[j] - v[j]).abs());
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        if delta >= last {
            break;
        }
        v = next;
        last = delta;
        if delta == 0.0 {
            break;
        }
    }
    v
}

/// Lag-`n` beta coefficient of a stationary chain,
/// `sum_x pi(x) * TV(P^n(x, .), pi)`.
pub fn markov_beta_lag(c: &FiniteChain, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Domain("lag must be at least 1".into()));
    }
    let m = c.states;
    let pn = c.power(n);
    let mut beta = 0.0;
    for x in 0..m {
        let tv: f64 = (0..m)
            .map(|y| (pn[x * m + y] - c.stationary[y]).abs())
            .sum();
        beta += c.stationary[x] * 0.5 * tv;
    }
    Ok(beta)
}

/// Lag-`n` alpha coefficient of a stationary chain.
pub fn markov_alpha_lag(c: &FiniteChain, n: usize) -> Result<f64> {
    alpha_exact(&c.lag_joint(n))
}

/// Log-linear fit `beta(n) ~ kappa0 * exp(-kappa1 * n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingDecayFit {
    pub lags: Vec<usize>,
    pub betas: Vec<f64>,
    pub kappa0: f64,
    pub kappa1: f64,
    pub r_squared: f64,
}

pub fn fit_geometric_decay(lags: &[usize], betas: &[f64]) -> Result<MixingDecayFit> {
    if lags.len() != betas.len() {
        return Err(Error::Shape("lags and betas differ in length".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(Error::Validation(format!("beta value {b} outside [0, 1]")));
    }
    let (kept_lags, kept_betas): (Vec<usize>, Vec<f64>) = lags
        .iter()
        .zip(betas)
        .filter(|(_, b)| **b > 0.0)
        .map(|(l, b)| (*l, *b))
        .unzip();
    if kept_lags.len() < 3 {
        return Err(Error::Fit(format!(
            "need at least 3 lags with positive beta, have {}",
            kept_lags.len()
        )));
    }
    let x: Vec<f64> = kept_lags.iter().map(|&l| l as f64).collect();
    let y: Vec<f64> = kept_betas.iter().map(|b| b.ln()).collect();
    let fit = linear_fit(&x, &y);
    Ok(MixingDecayFit {
        lags: kept_lags,
        betas: kept_betas,
        kappa0: fit.intercept.exp(),
        // Non-mixing (constant) data may give a slope of -0.0 or tiny positive noise.
        kappa1: (-fit.slope).max(0.0),
        r_squared: fit.r_squared,
    })
}

/// Both sides of an inequality check and its verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

impl CheckOutcome {
    /// `holds` iff `lhs <= rhs + CHECK_TOL`.
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            holds: lhs <= rhs + CHECK_TOL,
        }
    }
}

/// Davydov-type inequality for `h` on the joint alphabet (row-major, same
/// shape as the joint table) and Hölder exponent `p` (`f64::INFINITY` for the
/// bounded form).
pub fn davydov_check(j: &FiniteJointDistribution, h: &[f64], p: f64) -> Result<CheckOutcome> {
    if h.len() != j.rows * j.cols {
        return Err(Error::Shape(format!(
            "h has {} entries, joint alphabet has {}",
            h.len(),
            j.rows * j.cols
        )));
    }
    if p.is_nan() || p < 1.0 {
        return Err(Error::Domain(format!(
            "Hölder exponent p = {p} must be >= 1"
        )));
    }
    let mut joint_int = 0.0;
    let mut product_int = 0.0;
    for i in 0..j.rows {
        for k in 0..j.cols {
            let hv = h[i * j.cols + k];
            joint_int += hv * j.p(i, k);
            product_int += hv * j.product_mass(i, k);
        }
    }
    let lhs = (joint_int - product_int).abs();
    let beta = beta_exact(j);

    let rhs = if p.is_infinite() {
        let sup = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        2.0 * sup * beta
    } else {
        let g_sup = j.density_sup()?;
        let inv_q = 1.0 - 1.0 / p;
        let mut norm = 0.0;
        for i in 0..j.rows {
            for k in 0..j.cols {
                norm += h[i * j.cols + k].abs().powf(p) * j.product_mass(i, k);
            }
        }
        let norm = norm.powf(1.0 / p);
        2f64.powf(inv_q) * (1.0 + g_sup).powf(1.0 / p) * norm * beta.powf(inv_q)
    };
    Ok(CheckOutcome::new(lhs, rhs))
}

/// Ibragimov product inequality for `Z_i = funcs[i](X_{lags[i]})` on a
/// stationary chain.
///
/// The alpha coefficient at each split is that of the chain states on both
/// sides of the split, `alpha(X_{lags[k]}, X_{lags[k+1]})`; by the Markov
/// property this is the alpha coefficient between the past and future state
/// sigma-fields, which contain those generated by the `Z_i`.
pub fn ibragimov_check(
    chain: &FiniteChain,
    funcs: &[Vec<f64>],
    lags: &[usize],
) -> Result<CheckOutcome> {
    let n = funcs.len();
    if n == 0 || n != lags.len() {
        return Err(Error::Shape(
            "need as many lags as functions, at least one".into(),
        ));
    }
    let m = chain.states;
    for (i, f) in funcs.iter().enumerate() {
        if f.len() != m {
            return Err(Error::Shape(format!(
                "function {i} is not defined on {m} states"
            )));
        }
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!(
                "function {i} must be finite and non-negative"
            )));
        }
    }
    if lags.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("lags must be strictly increasing".into()));
    }

    // E[prod Z_i] by propagating the weighted state distribution forward.
    let mut v: Vec<f64> = chain
        .stationary
        .iter()
        .zip(&funcs[0])
        .map(|(p, f)| p * f)
        .collect();
    for i in 1..n {
        let pn = chain.power(lags[i] - lags[i - 1]);
        let mut next = vec![0.0; m];
        for (a, va) in v.iter().enumerate() {
            for (b, nb) in next.iter_mut().enumerate() {
                *nb += va * pn[a * m + b];
            }
        }
        v = next.iter().zip(&funcs[i]).map(|(x, f)| x * f).collect();
    }
    let e_prod: f64 = v.iter().sum();
    let prod_e: f64 = funcs
        .iter()
        .map(|f| {
            f.iter()
                .zip(&chain.stationary)
                .map(|(a, p)| a * p)
                .sum::<f64>()
        })
        .product();
    let lhs = (e_prod - prod_e).abs();

    let mut alpha: f64 = 0.0;
    for k in 1..n {
        alpha = alpha.max(markov_alpha_lag(chain, lags[k] - lags[k - 1])?);
    }
    let sup_prod: f64 = funcs
        .iter()
        .map(|f| {
            f.iter()
                .zip(&chain.stationary)
                .filter(|(_, p)| **p > 0.0)
                .fold(0.0f64, |s, (v, _)| s.max(*v))
        })
        .product();
    let rhs = (n - 1) as f64 * alpha * sup_prod;
    Ok(CheckOutcome::new(lhs, rhs))
}

/// Random joint distribution with strictly positive cells.
pub fn random_joint<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> FiniteJointDistribution {
    let mut w: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random::<f64>().powi(3) + 1e-6)
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    // Re-normalize once more so the sum is 1 to the last bit or two.
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    FiniteJointDistribution::from_flat(rows, cols, w).expect("random joint is valid")
}

/// Random irreducible chain with strictly positive transitions.
pub fn random_chain<R: Rng + ?Sized>(rng: &mut R, states: usize) -> FiniteChain {
    let rows: Vec<Vec<f64>> = (0..states)
        .map(|_| {
            let w: Vec<f64> = (0..states).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    FiniteChain::new(&rows).expect("random chain is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// All set partitions of {0..n} as block-label vectors (restricted growth strings).
    fn set_partitions(n: usize) -> Vec<Vec<usize>> {
        fn rec(pos: usize, n: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos == n {
                out.push(cur.clone());
                return;
            }
            for b in 0..=max + 1 {
                cur.push(b);
                rec(pos + 1, n, max.max(b), cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        let mut cur = vec![0];
        rec(1, n, 0, &mut cur, &mut out);
        out
    }

    /// Supremum of the dependence gap over all pairs of finite partitions.
    fn beta_partition_oracle(j: &FiniteJointDistribution) -> f64 {
        let mut best: f64 = 0.0;
        for u in set_partitions(j.rows()) {
            let nu = u.iter().max().unwrap() + 1;
            for v in set_partitions(j.cols()) {
                let nv = v.iter().max().unwrap() + 1;
                let mut cell = vec![0.0; nu * nv];
                let mut pu = vec![0.0; nu];
                let mut pv = vec![0.0; nv];
                for a in 0..j.rows() {
                    for b in 0..j.cols() {
                        cell[u[a] * nv + v[b]] += j.p(a, b);
                    }
                    pu[u[a]] += j.marginal_x()[a];
                }
                for b in 0..j.cols() {
                    pv[v[b]] += j.marginal_y()[b];
                }
                let mut s = 0.0;
                for a in 0..nu {
                    for b in 0..nv {
                        s += (cell[a * nv + b] - pu[a] * pv[b]).abs();
                    }
                }
                best = best.max(0.5 * s);
            }
        }
        best
    }

    /// Supremum over all events of the product space (total variation form).
    fn beta_event_oracle(j: &FiniteJointDistribution) -> f64 {
        let cells = j.rows() * j.cols();
        let mut best: f64 = 0.0;
        for mask in 0u32..(1 << cells) {
            let mut d = 0.0;
            for c in (0..cells).filter(|c| mask & (1 << c) != 0) {
                let (a, b) = (c / j.cols(), c % j.cols());
                d += j.p(a, b) - j.product_mass(a, b);
            }
            best = best.max(d.abs());
        }
        best
    }

    /// Double subset enumeration for alpha.
    fn alpha_oracle(j: &FiniteJointDistribution) -> f64 {
        let mut best: f64 = 0.0;
        for ma in 0u32..(1 << j.rows()) {
            for mb in 0u32..(1 << j.cols()) {
                let mut pab = 0.0;
                let mut pa = 0.0;
                let mut pb = 0.0;
                for a in (0..j.rows()).filter(|a| ma & (1 << a) != 0) {
                    pa += j.marginal_x()[a];
                    for b in (0..j.cols()).filter(|b| mb & (1 << b) != 0) {
                        pab += j.p(a, b);
                    }
                }
                for b in (0..j.cols()).filter(|b| mb & (1 << b) != 0) {
                    pb += j.marginal_y()[b];
                }
                best = best.max((pab - pa * pb).abs());
            }
        }
        best
    }

    fn bernoulli_identity() -> FiniteJointDistribution {
        FiniteJointDistribution::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap()
    }

    fn two_state() -> FiniteChain {
        FiniteChain::new(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap()
    }

    #[test]
    fn set_partition_counts_are_bell_numbers() {
        let counts: Vec<usize> = (1..=5).map(|n| set_partitions(n).len()).collect();
        assert_eq!(counts, vec![1, 2, 5, 15, 52]);
    }

    #[test]
    fn validation_rejects_bad_tables() {
        assert!(matches!(
            FiniteJointDistribution::from_rows(&[vec![0.6, -0.1], vec![0.25, 0.25]]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            FiniteJointDistribution::from_rows(&[vec![0.5, 0.1], vec![0.25, 0.25]]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            FiniteJointDistribution::from_flat(2, 2, vec![1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn marginals_are_row_and_column_sums() {
        let j = FiniteJointDistribution::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap();
        assert_eq!(j.marginal_x(), &[0.1 + 0.2, 0.3 + 0.4]);
        assert_eq!(j.marginal_y(), &[0.1 + 0.3, 0.2 + 0.4]);
    }

    #[test]
    fn beta_of_product_is_zero() {
        let j = FiniteJointDistribution::product(&[0.2, 0.3, 0.5], &[0.25, 0.75]).unwrap();
        assert!(beta_exact(&j) < 1e-15);
        assert!(alpha_exact(&j).unwrap() < 1e-15);
    }

    #[test]
    fn identity_coupling_attains_known_values() {
        let j = bernoulli_identity();
        assert!((beta_exact(&j) - 0.5).abs() < 1e-15);
        assert!((alpha_exact(&j).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn beta_matches_event_and_partition_oracles_on_3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let j = random_joint(&mut rng, 3, 3);
            let b = beta_exact(&j);
            assert!((b - beta_event_oracle(&j)).abs() < 1e-12);
            assert!((b - beta_partition_oracle(&j)).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_matches_double_enumeration_and_orderings() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let j = random_joint(&mut rng, rows, cols);
            let a = alpha_exact(&j).unwrap();
            assert!((a - alpha_oracle(&j)).abs() < 1e-12);
            assert!(a <= 0.25 + 1e-12);
            assert!(2.0 * a <= beta_exact(&j) + 1e-12);
        }
    }

    #[test]
    fn alpha_rejects_oversized_alphabets() {
        let j = FiniteJointDistribution::product(&[1.0 / 13.0; 13], &[1.0]).unwrap();
        assert!(matches!(alpha_exact(&j), Err(Error::Size(_))));
    }

    #[test]
    fn iid_chain_has_zero_beta() {
        let c = FiniteChain::new(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        for n in 1..5 {
            assert!(markov_beta_lag(&c, n).unwrap() < 1e-15);
        }
    }

    #[test]
    fn two_cycle_never_mixes() {
        let c = FiniteChain::new(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!((c.stationary()[0] - 0.5).abs() < 1e-12);
        for n in 1..8 {
            assert!((markov_beta_lag(&c, n).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn lag_beta_matches_explicit_joint() {
        let c = two_state();
        for n in 1..=3 {
            let pn = c.power(n);
            let pi = c.stationary();
            let joint: Vec<Vec<f64>> = (0..2)
                .map(|x| (0..2).map(|y| pi[x] * pn[x * 2 + y]).collect())
                .collect();
            let oracle = beta_exact(&FiniteJointDistribution::from_rows(&joint).unwrap());
            assert!((markov_beta_lag(&c, n).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn lag_zero_is_rejected() {
        assert!(matches!(
            markov_beta_lag(&two_state(), 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn reducible_chain_is_rejected() {
        let r = FiniteChain::new(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn stationary_distribution_of_two_state_chain() {
        let c = two_state();
        assert!((c.stationary()[0] - 2.0 / 3.0).abs() < 1e-11);
    }

    #[test]
    fn fit_recovers_exact_exponential() {
        let lags: Vec<usize> = (1..=10).collect();
        let betas: Vec<f64> = lags.iter().map(|&n| (-0.5 * n as f64).exp()).collect();
        let fit = fit_geometric_decay(&lags, &betas).unwrap();
        assert!((fit.kappa0 - 1.0).abs() < 1e-9);
        assert!((fit.kappa1 - 0.5).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fit_of_constant_sequence_has_zero_rate() {
        let fit = fit_geometric_decay(&[1, 2, 3, 4], &[0.5; 4]).unwrap();
        assert!(fit.kappa1.abs() < 1e-9);
    }

    #[test]
    fn fit_drops_zero_betas_and_requires_three() {
        let fit = fit_geometric_decay(&[1, 2, 3, 4], &[0.5, 0.25, 0.0, 0.0625]).unwrap();
        assert_eq!(fit.lags, vec![1, 2, 4]);
        assert!(matches!(
            fit_geometric_decay(&[1, 2, 3], &[0.5, 0.0, 0.1]),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn fit_rate_matches_second_eigenvalue() {
        // Eigenvalues of a 2x2 stochastic matrix: 1 and trace - 1.
        let c = FiniteChain::new(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let lambda2: f64 = 0.7 + 0.6 - 1.0;
        let lags: Vec<usize> = (1..=8).collect();
        let betas: Vec<f64> = lags
            .iter()
            .map(|&n| markov_beta_lag(&c, n).unwrap())
            .collect();
        let fit = fit_geometric_decay(&lags, &betas).unwrap();
        let expect = -lambda2.abs().ln();
        assert!((fit.kappa1 - expect).abs() < 0.05 * expect);
    }

    #[test]
    fn davydov_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = random_joint(&mut rng, 3, 4);
        let constant = vec![2.5; 12];
        for p in [1.0, 2.0, f64::INFINITY] {
            let out = davydov_check(&j, &constant, p).unwrap();
            assert!(out.lhs < 1e-14 && out.holds);
        }
        let prod = FiniteJointDistribution::product(&[0.5, 0.5], &[0.1, 0.9]).unwrap();
        let h = vec![1.0, -3.0, 4.0, 0.5];
        let out = davydov_check(&prod, &h, 2.0).unwrap();
        assert!(out.lhs < 1e-15 && out.holds);
    }

    #[test]
    fn davydov_rejects_bad_inputs() {
        let j = bernoulli_identity();
        assert!(matches!(
            davydov_check(&j, &[1.0; 3], 2.0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            davydov_check(&j, &[1.0; 4], 0.5),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn davydov_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let j = random_joint(&mut rng, rows, cols);
            let h: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-3.0..3.0))
                .collect();
            let mut lhs = None;
            for p in [1.5, 2.0, 3.0, f64::INFINITY] {
                let out = davydov_check(&j, &h, p).unwrap();
                assert!(out.holds, "p={p}: {out:?}");
                // The left side does not depend on p.
                assert_eq!(*lhs.get_or_insert(out.lhs), out.lhs);
            }
            let bounded = davydov_check(&j, &h, f64::INFINITY).unwrap();
            let sup = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert_eq!(bounded.rhs, 2.0 * sup * beta_exact(&j));
        }
    }

    #[test]
    fn ibragimov_trivial_cases() {
        let c = two_state();
        let single = ibragimov_check(&c, &[vec![1.0, 3.0]], &[4]).unwrap();
        assert_eq!((single.lhs, single.rhs), (0.0, 0.0));
        assert!(single.holds);

        let iid = FiniteChain::new(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        let out = ibragimov_check(&iid, &[vec![1.0, 2.0], vec![0.5, 4.0]], &[0, 1]).unwrap();
        assert!(out.lhs < 1e-15 && out.holds);

        let constant = ibragimov_check(&c, &[vec![2.0, 2.0], vec![3.0, 3.0]], &[0, 2]).unwrap();
        assert!(constant.lhs < 1e-14);
    }

    #[test]
    fn ibragimov_rejects_negative_functions() {
        let r = ibragimov_check(&two_state(), &[vec![1.0, -1.0]], &[0]);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn ibragimov_holds_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..100 {
            let states = rng.random_range(2..=4);
            let chain = random_chain(&mut rng, states);
            let n = rng.random_range(2..=4);
            let funcs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..states).map(|_| rng.random_range(0.0..2.0)).collect())
                .collect();
            let mut lags = vec![rng.random_range(0..3)];
            for _ in 1..n {
                let last = *lags.last().unwrap();
                lags.push(last + rng.random_range(1..4));
            }
            let out = ibragimov_check(&chain, &funcs, &lags).unwrap();
            assert!(out.holds, "{out:?}");
        }
    }

    #[test]
    fn lazy_chain_beta_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let states = rng.random_range(2..=4);
            let lazy = random_chain(&mut rng, states).lazy().unwrap();
            let betas: Vec<f64> = (1..=10)
                .map(|n| markov_beta_lag(&lazy, n).unwrap())
                .collect();
            assert!(betas.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{betas:?}");
        }
    }

    proptest! {
        #[test]
        fn coefficient_orderings(cells in proptest::collection::vec(0.0f64..1.0, 25), rows in 1usize..=5, cols in 1usize..=5) {
            let mut w = cells[..rows * cols].to_vec();
            let s: f64 = w.iter().sum();
            prop_assume!(s > 1e-3);
            w.iter_mut().for_each(|x| *x /= s);
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            let j = FiniteJointDistribution::from_flat(rows, cols, w).unwrap();
            let a = alpha_exact(&j).unwrap();
            let b = beta_exact(&j);
            prop_assert!((0.0..=0.25 + 1e-12).contains(&a));
            prop_assert!(2.0 * a <= b + 1e-12);
            prop_assert!(b <= 1.0 + 1e-12);
        }

        #[test]
        fn beta_is_relabeling_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let j = random_joint(&mut rng, rows, cols);
            let mut px: Vec<usize> = (0..rows).collect();
            let mut py: Vec<usize> = (0..cols).collect();
            use rand::seq::SliceRandom;
            px.shuffle(&mut rng);
            py.shuffle(&mut rng);
            let k = j.permuted(&px, &py).unwrap();
            prop_assert!((beta_exact(&j) - beta_exact(&k)).abs() < 1e-14);
        }
    }
}
