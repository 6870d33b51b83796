//! Exponential bounds for `n^{-1} |sum_k f(X_k, X_t)|` under geometric
//! beta-mixing, and the Monte Carlo machinery used to test them.
//!
//! The bound evaluators are closed-form and pure. The constants `C`, `a1`
//! and `a2` appearing in them have no explicit formula, so they are exposed
//! as parameters; [`calibrate_laplace_constant`] and
//! [`calibrate_corollary_a1`] pick the smallest log-grid value that dominates
//! Monte Carlo estimates at the smallest admissible size, after which
//! domination at larger sizes is a genuine check of the functional form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::process::{
    simulate_contractive_chain, simulate_contractive_chain_on, ContractiveChainSpec,
};
use crate::rng::{replication_seed, Stream};
use crate::stats::{linear_fit, mean};
use crate::{Error, Result};

const CONJUGACY_TOL: f64 = 1e-12;
/// Interval of the log-uniform grid searched for the infimum over `B`.
pub const TRUNCATION_GRID_MIN: f64 = 1.0 + 1e-3;
pub const TRUNCATION_GRID_MAX: f64 = 1e6;
pub const TRUNCATION_GRID_POINTS: usize = 240;
const GOLDEN_REL_TOL: f64 = 1e-6;
/// Bins of the pilot estimate of the conditional centering `E f(X_0, y)`.
pub const PILOT_BINS: usize = 512;
pub const DEFAULT_PILOT_DRAWS: usize = 1_000_000;

/// Every symbol appearing in the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub kappa0: f64,
    pub kappa1: f64,
    /// Constant of the Laplace transform bound.
    pub c: f64,
    pub a1: f64,
    pub a2: f64,
    pub gamma: f64,
    /// Interval length of the Laplace transform bound.
    pub a: f64,
    /// Function bound (or truncation level).
    pub b: f64,
    pub epsilon: f64,
    pub n: u64,
    pub t: u64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub u: f64,
    pub k: f64,
}

impl Default for BoundParams {
    fn default() -> Self {
        Self {
            kappa0: 1.0,
            kappa1: 1.0,
            c: 1.0,
            a1: 1.0,
            a2: 1.0,
            gamma: 0.01,
            a: 14.0,
            b: 1.0,
            epsilon: 0.1,
            n: 100,
            t: 1,
            p: 1.5,
            q: 3.0,
            r: 2.0,
            u: 2.0,
            k: 3.0,
        }
    }
}

impl BoundParams {
    /// Checks `1/p + 1/q = 1`, `1/r + 1/u = 1` and `p, q, r, u, k > 1`.
    pub fn validate_exponents(&self) -> Result<()> {
        for (name, v) in [
            ("p", self.p),
            ("q", self.q),
            ("r", self.r),
            ("u", self.u),
            ("k", self.k),
        ] {
            if !(v > 1.0) {
                return Err(Error::Domain(format!("{name} = {v} must be > 1")));
            }
        }
        if (1.0 / self.p + 1.0 / self.q - 1.0).abs() > CONJUGACY_TOL {
            return Err(Error::Domain("p and q are not Hölder conjugate".into()));
        }
        if (1.0 / self.r + 1.0 / self.u - 1.0).abs() > CONJUGACY_TOL {
            return Err(Error::Domain("r and u are not Hölder conjugate".into()));
        }
        Ok(())
    }
}

/// Largest `gamma` admissible in the Laplace transform bound for given `kappa1`, `B`, `A`.
pub fn max_admissible_gamma(kappa1: f64, b: f64, a: f64) -> f64 {
    (kappa1.min(1.0) / 2.0).min(kappa1 / (4.0 * a.ln())) / b
}

/// The two terms of the Laplace transform bound, in order.
pub fn laplace_bound_terms(params: &BoundParams) -> Result<(f64, f64)> {
    let BoundParams {
        kappa0,
        kappa1,
        c,
        gamma,
        a,
        b,
        ..
    } = *params;
    if !(kappa0 > 0.0 && kappa1 > 0.0) {
        return Err(Error::Domain("kappa0 and kappa1 must be positive".into()));
    }
    if !(c > 0.0 && b > 0.0) {
        return Err(Error::Domain("C and B must be positive".into()));
    }
    if !(a >= 14.0f64.max(2.0 * kappa1)) {
        return Err(Error::Domain(format!(
            "A = {a} violates A >= max(14, 2 kappa1)"
        )));
    }
    let gb = gamma * b;
    let cap = (kappa1.min(1.0) / 2.0).min(kappa1 / (4.0 * a.ln()));
    if !(gb > 0.0 && gb <= cap) {
        return Err(Error::Domain(format!(
            "gamma * B = {gb} violates 0 < gamma B <= min((1 ^ kappa1)/2, kappa1/(4 log A)) = {cap}"
        )));
    }
    let log_a = a.ln();
    let first = 3.0 * kappa0 * (-kappa1 * a / (4.0 * log_a)).exp();
    let second = (c * gb * gb * a * log_a + gb * a / log_a).exp();
    Ok((first, second))
}

/// Bound on `E exp(gamma sum_{k <= A} f(X_k, X_t))` for centered `|f| <= B`.
pub fn laplace_bound(params: &BoundParams) -> Result<f64> {
    let (first, second) = laplace_bound_terms(params)?;
    Ok(first + second)
}

/// `eps n / (B log n log log n)`, the exponent scale of the large deviation rate.
pub fn rate_argument(n: u64, epsilon: f64, b: f64) -> Result<f64> {
    if n < 3 {
        return Err(Error::Domain(format!(
            "n = {n} < 3 makes log log n non-positive"
        )));
    }
    let nf = n as f64;
    let log_n = nf.ln();
    Ok(epsilon * nf / (b * log_n * log_n.ln()))
}

/// `a1 exp(-a2 eps n / (B log n log log n))`.
pub fn corollary_bound(params: &BoundParams) -> Result<f64> {
    let BoundParams {
        a1,
        a2,
        b,
        epsilon,
        n,
        ..
    } = *params;
    if !(a1 > 0.0 && a2 > 0.0 && b > 0.0) {
        return Err(Error::Domain("a1, a2 and B must be positive".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Domain(format!("epsilon = {epsilon} must be >= 0")));
    }
    Ok(a1 * (-a2 * rate_argument(n, epsilon, b)?).exp())
}

/// `f = plus + zero + minus` with `zero = clamp(f, -B, B)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationTriple {
    pub plus: f64,
    pub zero: f64,
    pub minus: f64,
}

impl TruncationTriple {
    pub fn reconstruct(&self) -> f64 {
        self.plus + self.zero + self.minus
    }
}

/// `plus = value - min(value, B)`, `zero = clamp(value, -B, B)`,
/// `minus = value - max(value, -B)`, with `plus + zero + minus == value`
/// bit for bit.
///
/// When `|value| > 2B` the excess `value -/+ B` may not be representable and
/// no float excess reconstructs `value` against the clamped core. The core is
/// then shrunk towards zero to a multiple of `ulp(value)` (a change below one
/// ulp of `value`), which makes the subtraction exact.
pub fn truncate(value: f64, b: f64) -> TruncationTriple {
    debug_assert!(b > 0.0);
    let mut zero = value.clamp(-b, b);
    let mut excess = value - zero;
    if excess + zero != value {
        let ulp = value.abs().next_up() - value.abs();
        zero = ((b / ulp).floor() * ulp).copysign(value);
        excess = value - zero;
    }
    if value > b {
        TruncationTriple {
            plus: excess,
            zero,
            minus: 0.0,
        }
    } else if value < -b {
        TruncationTriple {
            plus: 0.0,
            zero,
            minus: excess,
        }
    } else {
        TruncationTriple {
            plus: 0.0,
            zero,
            minus: 0.0,
        }
    }
}

/// Moments entering the unbounded-function bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// `E[f^{pr}]^{1/(pr)}`.
    pub m_pr: f64,
    /// `E[f^k]`.
    pub m_k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnboundedBound {
    pub value: f64,
    pub argmin_b: f64,
}

/// The three-term expression minimized over `B > 1` in the unbounded bound.
pub fn unbounded_expression(params: &BoundParams, moments: &Moments, b: f64) -> Result<f64> {
    let BoundParams {
        a1,
        a2,
        epsilon,
        n,
        p,
        u,
        k,
        ..
    } = *params;
    let eps = epsilon;
    let nf = n as f64;
    let first = a1 / eps * (-a2 * rate_argument(n, eps, b)?).exp();
    let second = 4.0 / eps / (k - 1.0) * b.powf(-(k - 1.0)) * moments.m_k;
    let third =
        a1 / (nf * eps) * moments.m_pr * b.powf(-k / (p * u)) * moments.m_k.powf(1.0 / (p * u));
    Ok(first + second + third)
}

/// Infimum over `B` of [`unbounded_expression`] on the default 240-point grid.
pub fn unbounded_bound(params: &BoundParams, moments: &Moments) -> Result<UnboundedBound> {
    unbounded_bound_on_grid(params, moments, TRUNCATION_GRID_POINTS)
}

/// Log-uniform grid search on `[1 + 1e-3, 1e6]` refined by golden-section
/// search (in `log B`) between the neighbours of the best grid point.
pub fn unbounded_bound_on_grid(
    params: &BoundParams,
    moments: &Moments,
    points: usize,
) -> Result<UnboundedBound> {
    params.validate_exponents()?;
    if !(params.epsilon > 0.0 && params.a1 > 0.0 && params.a2 > 0.0) {
        return Err(Error::Domain("epsilon, a1 and a2 must be positive".into()));
    }
    if !(moments.m_pr > 0.0 && moments.m_k > 0.0) || moments.m_pr.is_nan() || moments.m_k.is_nan() {
        return Err(Error::Moment("moments must be positive".into()));
    }
    if points < 2 {
        return Err(Error::Domain("grid needs at least two points".into()));
    }
    let lo = TRUNCATION_GRID_MIN.ln();
    let hi = TRUNCATION_GRID_MAX.ln();
    let log_grid: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect();
    let eval = |log_b: f64| -> f64 {
        match unbounded_expression(params, moments, log_b.exp()) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    };
    let values: Vec<f64> = log_grid.iter().map(|&lb| eval(lb)).collect();
    let (best, best_val) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, v)| (i, *v))
        .expect("non-empty grid");
    if !best_val.is_finite() {
        return Err(Error::Moment(
            "expression is infinite on the whole grid".into(),
        ));
    }
    let left = log_grid[best.saturating_sub(1)];
    let right = log_grid[(best + 1).min(points - 1)];
    let (log_b, val) = golden_section(eval, left, right, GOLDEN_REL_TOL);
    if val < best_val {
        Ok(UnboundedBound {
            value: val,
            argmin_b: log_b.exp(),
        })
    } else {
        Ok(UnboundedBound {
            value: best_val,
            argmin_b: log_grid[best].exp(),
        })
    }
}

/// Golden-section minimization of `f` on `[a, b]`; stops when the bracket is
/// narrower than `rel_tol` in `B = exp(x)` relative terms.
fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, rel_tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > rel_tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let candidates = [(a, f(a)), (c, fc), (d, fd), (b, f(b))];
    candidates
        .into_iter()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("four candidates")
}

/// Bounded aggregating functions `f(x, y)` with their declared bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AggregatingFunction {
    Zero,
    /// `f(x, y) = x`.
    Identity,
    /// `sign(x) min(|x|, 1)`.
    Clipped,
    /// `sin(x) cos(y)`.
    SineCosine,
    /// `1{|x - y| <= radius}`; needs a pilot estimate of its centering.
    BallIndicator {
        radius: f64,
    },
}

impl AggregatingFunction {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "zero" => Ok(Self::Zero),
            "identity" => Ok(Self::Identity),
            "clipped" => Ok(Self::Clipped),
            "sine-cosine" => Ok(Self::SineCosine),
            "ball-indicator" => Ok(Self::BallIndicator { radius: 1.0 }),
            other => Err(Error::Config(format!(
                "unsupported aggregating function '{other}'"
            ))),
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Identity => x,
            Self::Clipped => x.clamp(-1.0, 1.0),
            Self::SineCosine => x.sin() * y.cos(),
            Self::BallIndicator { radius } => {
                if (x - y).abs() <= radius {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Bound `B` on `|f - E f(X_0, y)|` for paths of `process`.
    pub fn bound(&self, process: &ContractiveChainSpec) -> f64 {
        match self {
            Self::Zero | Self::Clipped | Self::SineCosine | Self::BallIndicator { .. } => 1.0,
            Self::Identity => process.state_bound(),
        }
    }

    /// `E f(X_0, y)` in closed form. Every supported map is odd and every
    /// innovation symmetric, so the stationary law is symmetric and odd
    /// functions of `x` integrate to zero.
    fn analytic_centering(&self) -> Option<f64> {
        match self {
            Self::Zero | Self::Identity | Self::Clipped | Self::SineCosine => Some(0.0),
            Self::BallIndicator { .. } => None,
        }
    }
}

/// Monte Carlo estimate of `y -> E f(X_0, y)` on a uniform grid, linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotCentering {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
    /// Largest standard error across the grid.
    pub max_standard_error: f64,
}

impl PilotCentering {
    /// Draws `draws` nearly independent states (a chain thinned so that the
    /// contraction factor between kept states is below 1e-6).
    pub fn estimate(
        f: &AggregatingFunction,
        process: &ContractiveChainSpec,
        draws: usize,
        seed: u64,
    ) -> Result<Self> {
        let l = process.map.lipschitz();
        let thin = if l <= 0.0 {
            1
        } else {
            ((1e-6f64).ln() / l.ln()).ceil().clamp(1.0, 200.0) as usize
        };
        let path = simulate_contractive_chain_on(process, draws * thin, seed, Stream::Pilot)?;
        let sample: Vec<f64> = path.iter().step_by(thin).copied().collect();
        let bound = process.state_bound();
        let (lo, hi) = (-bound, bound);
        let stats: Vec<(f64, f64)> = (0..PILOT_BINS)
            .into_par_iter()
            .map(|g| {
                let y = lo + (hi - lo) * g as f64 / (PILOT_BINS - 1) as f64;
                let (mut s, mut s2) = (0.0, 0.0);
                for &x in &sample {
                    let v = f.eval(x, y);
                    s += v;
                    s2 += v * v;
                }
                let m = s / sample.len() as f64;
                let var = (s2 / sample.len() as f64 - m * m).max(0.0);
                (m, (var / sample.len() as f64).sqrt())
            })
            .collect();
        Ok(Self {
            lo,
            hi,
            values: stats.iter().map(|s| s.0).collect(),
            max_standard_error: stats.iter().map(|s| s.1).fold(0.0, f64::max),
        })
    }

    pub fn at(&self, y: f64) -> f64 {
        let pos =
            ((y - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0) * (self.values.len() - 1) as f64;
        let i = (pos.floor() as usize).min(self.values.len() - 2);
        let frac = pos - i as f64;
        self.values[i] + frac * (self.values[i + 1] - self.values[i])
    }
}

/// An aggregating function together with its centering `E f(X_0, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredFunction {
    pub function: AggregatingFunction,
    pilot: Option<PilotCentering>,
}

impl CenteredFunction {
    /// Uses the analytic centering when available, otherwise a pilot of `pilot_draws` states.
    pub fn new(
        function: AggregatingFunction,
        process: &ContractiveChainSpec,
        pilot_draws: usize,
        seed: u64,
    ) -> Result<Self> {
        let pilot = match function.analytic_centering() {
            Some(_) => None,
            None => Some(PilotCentering::estimate(
                &function,
                process,
                pilot_draws,
                seed,
            )?),
        };
        Ok(Self { function, pilot })
    }

    pub fn pilot(&self) -> Option<&PilotCentering> {
        self.pilot.as_ref()
    }

    pub fn centering(&self, y: f64) -> f64 {
        match &self.pilot {
            Some(p) => p.at(y),
            None => self.function.analytic_centering().unwrap_or(0.0),
        }
    }

    /// `sum_k (f(X_k, y) - E f(X_0, y))` with `y = X_t` (1-based `t`).
    pub fn centered_sum(&self, path: &[f64], t: usize) -> f64 {
        let y = path[t - 1];
        let m = self.centering(y);
        path.iter().map(|&x| self.function.eval(x, y) - m).sum()
    }
}

/// Fraction of replications whose centered normalized sum reaches `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub epsilon: f64,
    pub n: u64,
    pub reps: u64,
    pub p_hat: f64,
    /// 95% normal-approximation half width.
    pub ci_half_width: f64,
}

impl TailEstimate {
    pub fn from_deviations(deviations: &[f64], n: u64, epsilon: f64) -> Self {
        let reps = deviations.len();
        let hits = deviations.iter().filter(|d| **d >= epsilon).count();
        let p_hat = hits as f64 / reps as f64;
        Self {
            epsilon,
            n,
            reps: reps as u64,
            p_hat,
            ci_half_width: 1.96 * (p_hat * (1.0 - p_hat) / reps as f64).sqrt(),
        }
    }
}

fn check_mc_inputs(n: usize, t: usize, reps: usize) -> Result<()> {
    if n == 0 || t == 0 || t > n {
        return Err(Error::Domain(format!(
            "need 1 <= t <= n, got t = {t}, n = {n}"
        )));
    }
    if reps < 100 {
        return Err(Error::Domain(format!("reps = {reps} < 100")));
    }
    Ok(())
}

/// `n^{-1} |sum_k (f(X_k, X_t) - E f(X_0, x)|_{x = X_t})|` for each replication,
/// in replication order. Replication `r` uses seed `seed ^ r`.
pub fn deviation_samples(
    f: &CenteredFunction,
    process: &ContractiveChainSpec,
    n: usize,
    t: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_mc_inputs(n, t, reps)?;
    (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let path = simulate_contractive_chain(process, n, replication_seed(seed, r))?;
            Ok((f.centered_sum(&path, t) / n as f64).abs())
        })
        .collect()
}

pub fn empirical_tail(
    f: &CenteredFunction,
    process: &ContractiveChainSpec,
    n: usize,
    t: usize,
    epsilon: f64,
    reps: usize,
    seed: u64,
) -> Result<TailEstimate> {
    let dev = deviation_samples(f, process, n, t, reps, seed)?;
    Ok(TailEstimate::from_deviations(&dev, n as u64, epsilon))
}

/// Tail estimates on an epsilon grid from one shared set of replications.
pub fn empirical_tail_grid(
    f: &CenteredFunction,
    process: &ContractiveChainSpec,
    n: usize,
    t: usize,
    epsilons: &[f64],
    reps: usize,
    seed: u64,
) -> Result<Vec<TailEstimate>> {
    let dev = deviation_samples(f, process, n, t, reps, seed)?;
    Ok(epsilons
        .iter()
        .map(|&e| TailEstimate::from_deviations(&dev, n as u64, e))
        .collect())
}

/// Monte Carlo mean of `exp(gamma sum_{k=1}^{floor A} (f(X_k, X_t) - centering))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceEstimate {
    pub mean: f64,
    pub standard_error: f64,
    /// Some replication overflowed; `mean` is then `+inf`.
    pub overflow: bool,
}

pub fn empirical_laplace(
    f: &CenteredFunction,
    process: &ContractiveChainSpec,
    gamma: f64,
    a: f64,
    t: usize,
    reps: usize,
    seed: u64,
) -> Result<LaplaceEstimate> {
    let n = a.floor() as usize;
    check_mc_inputs(n, t, reps)?;
    let values: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let path = simulate_contractive_chain(process, n, replication_seed(seed, r))?;
            Ok((gamma * f.centered_sum(&path, t)).exp())
        })
        .collect::<Result<_>>()?;
    if values.iter().any(|v| v.is_infinite()) {
        return Ok(LaplaceEstimate {
            mean: f64::INFINITY,
            standard_error: f64::INFINITY,
            overflow: true,
        });
    }
    let m = mean(&values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps as f64 - 1.0);
    Ok(LaplaceEstimate {
        mean: m,
        standard_error: (var / reps as f64).sqrt(),
        overflow: false,
    })
}

/// Fit of `-log p_hat = -log a1 + a2 x_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub a1: f64,
    pub a2: f64,
    pub r_squared: f64,
    pub points: usize,
}

pub fn rate_fit(tails: &[TailEstimate], b: f64, epsilon: f64) -> Result<RateFit> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for t in tails.iter().filter(|t| t.p_hat > 0.0 && t.p_hat < 1.0) {
        x.push(rate_argument(t.n, epsilon, b)?);
        y.push(-t.p_hat.ln());
    }
    if x.len() < 4 {
        return Err(Error::Fit(format!(
            "need at least 4 tail estimates strictly inside (0, 1), have {}",
            x.len()
        )));
    }
    let fit = linear_fit(&x, &y);
    Ok(RateFit {
        a1: (-fit.intercept).exp(),
        a2: fit.slope,
        r_squared: fit.r_squared,
        points: x.len(),
    })
}

/// Log grid `10^{-6}, ..., 10^{6}` with 20 points per decade.
pub fn calibration_grid() -> Vec<f64> {
    (-120..=120).map(|i| 10f64.powf(i as f64 / 20.0)).collect()
}

/// Smallest grid `C` for which the Laplace bound at `params` reaches `target`.
pub fn calibrate_laplace_constant(params: &BoundParams, target: f64) -> Result<f64> {
    for c in calibration_grid() {
        if laplace_bound(&BoundParams { c, ..*params })? >= target {
            return Ok(c);
        }
    }
    Err(Error::Fit(format!("no grid value of C reaches {target}")))
}

/// Smallest grid `a1` for which `a1 exp(-a2 x_n)` dominates `p_hat + ci` at the
/// smallest `n` among `tails`.
pub fn calibrate_corollary_a1(
    a2: f64,
    tails: &[TailEstimate],
    b: f64,
    epsilon: f64,
) -> Result<f64> {
    let first = tails
        .iter()
        .min_by_key(|t| t.n)
        .ok_or_else(|| Error::Fit("no tail estimates".into()))?;
    let target = first.p_hat + first.ci_half_width;
    let decay = (-a2 * rate_argument(first.n, epsilon, b)?).exp();
    calibration_grid()
        .into_iter()
        .find(|a1| a1 * decay >= target)
        .ok_or_else(|| Error::Fit(format!("no grid value of a1 reaches {target}")))
}

/// `P(Z > z)` for a standard normal `Z` (Chebyshev fit to erfc, relative error < 1.2e-7).
pub fn normal_upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{Innovation, LipschitzMap};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_params() -> BoundParams {
        BoundParams {
            kappa0: 1.0,
            kappa1: 1.0,
            c: 1.0,
            b: 1.0,
            a: 14.0,
            gamma: 0.5f64.min(1.0 / (4.0 * 14f64.ln())),
            ..BoundParams::default()
        }
    }

    fn uniform_chain(a: f64) -> ContractiveChainSpec {
        ContractiveChainSpec::new(
            LipschitzMap::Linear { a },
            Innovation::Uniform { half_width: 1.0 },
        )
    }

    #[test]
    fn laplace_bound_at_boundary_gamma() {
        let p = unit_params();
        let log_a = 14f64.ln();
        let gb = p.gamma;
        let expect = 3.0 * (-14.0 / (4.0 * log_a)).exp()
            + (gb * gb * 14.0 * log_a + gb * 14.0 / log_a).exp();
        assert!((laplace_bound(&p).unwrap() - expect).abs() <= 1e-15 * expect);
    }

    #[test]
    fn laplace_bound_small_gamma_limit() {
        let p = BoundParams {
            gamma: 1e-12,
            ..unit_params()
        };
        let limit = 3.0 * (-14.0 / (4.0 * 14f64.ln())).exp() + 1.0;
        assert!((laplace_bound(&p).unwrap() - limit).abs() < 1e-9);
    }

    #[test]
    fn doubling_c_raises_only_the_second_term() {
        let p = unit_params();
        let (f1, s1) = laplace_bound_terms(&p).unwrap();
        let (f2, s2) = laplace_bound_terms(&BoundParams { c: 2.0, ..p }).unwrap();
        assert_eq!(f1, f2);
        assert!(s2 > s1);
    }

    #[test]
    fn laplace_bound_names_violated_constraint() {
        let err = laplace_bound(&BoundParams {
            a: 10.0,
            ..unit_params()
        })
        .unwrap_err();
        assert!(err.to_string().contains("A >= max(14, 2 kappa1)"));
        let err = laplace_bound(&BoundParams {
            gamma: 1.0,
            ..unit_params()
        })
        .unwrap_err();
        assert!(err.to_string().contains("gamma B"));
        assert!(laplace_bound(&BoundParams {
            gamma: 0.0,
            ..unit_params()
        })
        .is_err());
    }

    #[test]
    fn corollary_bound_examples() {
        let p = BoundParams {
            a1: 1.0,
            a2: 1.0,
            b: 1.0,
            epsilon: 0.0,
            n: 100,
            ..BoundParams::default()
        };
        assert_eq!(corollary_bound(&p).unwrap(), 1.0);
        let p = BoundParams { epsilon: 1.0, ..p };
        let l = 100f64.ln();
        let expect = (-100.0 / (l * l.ln())).exp();
        assert!((corollary_bound(&p).unwrap() - expect).abs() <= 1e-15 * expect);
        assert!(matches!(
            corollary_bound(&BoundParams { n: 2, ..p }),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn corollary_bound_decreases_from_sixteen() {
        let base = BoundParams {
            epsilon: 0.3,
            ..BoundParams::default()
        };
        let values: Vec<f64> = (16..5000)
            .map(|n| corollary_bound(&BoundParams { n, ..base }).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
        // Along n = 2^j the value underflows, so strictness is checked on the exponent.
        let exponents: Vec<f64> = (4..=40)
            .map(|j| rate_argument(1 << j, base.epsilon, base.b).unwrap())
            .collect();
        assert!(exponents.windows(2).all(|w| w[1] > w[0]));
        let dyadic: Vec<f64> = (4..=40)
            .map(|j| corollary_bound(&BoundParams { n: 1 << j, ..base }).unwrap())
            .collect();
        assert!(dyadic.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*dyadic.last().unwrap(), 0.0);
    }

    #[test]
    fn truncation_examples() {
        let cases = [
            (0.5, (0.0, 0.5, 0.0)),
            (2.0, (1.0, 1.0, 0.0)),
            (-3.0, (0.0, -1.0, -2.0)),
        ];
        for (v, (p, z, m)) in cases {
            let t = truncate(v, 1.0);
            assert_eq!((t.plus, t.zero, t.minus), (p, z, m));
        }
    }

    #[test]
    fn truncation_core_shrinks_only_when_rounding_forces_it() {
        // ulp(v) = 2 and v - 3 is a tie: no float excess reconstructs v
        // against a core of 3, so the core drops to 2.
        let v = 2f64.powi(53) + 10.0;
        assert_ne!((v - 3.0) + 3.0, v);
        let t = truncate(v, 3.0);
        assert_eq!(t.reconstruct(), v);
        assert_eq!(t.zero, 2.0);
        // Cores below one ulp vanish.
        let t = truncate(-v, 1.0);
        assert_eq!((t.zero, t.minus), (0.0, -v));
        // Representable excess keeps the exact clamp.
        let t = truncate(1e17 + 16.0, 0.3);
        assert_eq!((t.zero, t.reconstruct()), (0.3, 1e17 + 16.0));
    }

    proptest! {
        #[test]
        fn truncation_is_exact(v in proptest::num::f64::NORMAL, b in 1e-3f64..1e3) {
            let t = truncate(v, b);
            prop_assert_eq!(t.reconstruct(), v);
            prop_assert!(t.plus >= 0.0);
            prop_assert!(t.minus <= 0.0);
            prop_assert!(t.zero.abs() <= b);
        }

        #[test]
        fn truncation_is_exact_at_moderate_ratios(x in -1e3f64..1e3, e in 0i32..60, b in 1e-1f64..1e1) {
            let v = x * 2f64.powi(e);
            let t = truncate(v, b);
            prop_assert_eq!(t.reconstruct(), v);
            prop_assert!(t.zero.abs() <= b);
            prop_assert!(t.plus >= 0.0 && t.minus <= 0.0);
        }
    }

    fn moments_unit() -> Moments {
        Moments {
            m_pr: 1.0,
            m_k: 1.0,
        }
    }

    #[test]
    fn second_term_hand_value() {
        // a1 tiny so that only the truncation term matters at B = 2, k = 3.
        let eps = 0.7;
        let p = BoundParams {
            a1: 1e-300,
            epsilon: eps,
            ..BoundParams::default()
        };
        let v = unbounded_expression(&p, &moments_unit(), 2.0).unwrap();
        assert!((v - 0.5 / eps).abs() < 1e-12);
    }

    #[test]
    fn unbounded_bound_vanishes_for_large_epsilon() {
        let p = BoundParams {
            n: 1000,
            ..BoundParams::default()
        };
        let values: Vec<f64> = [1.0, 10.0, 100.0, 1e4]
            .iter()
            .map(|&epsilon| {
                unbounded_bound(&BoundParams { epsilon, ..p }, &moments_unit())
                    .unwrap()
                    .value
            })
            .collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
        assert!(values[3] < 1e-3);
    }

    #[test]
    fn unbounded_bound_below_fixed_b_evaluations() {
        let p = BoundParams {
            n: 500,
            epsilon: 0.5,
            a1: 2.0,
            a2: 0.5,
            ..BoundParams::default()
        };
        let m = Moments {
            m_pr: 2.0,
            m_k: 5.0,
        };
        let best = unbounded_bound(&p, &m).unwrap();
        assert!(best.value <= unbounded_expression(&p, &m, 2.0).unwrap());
        assert!(best.value <= unbounded_expression(&p, &m, 500.0).unwrap());
        assert!(best.argmin_b > 1.0);
    }

    #[test]
    fn unbounded_bound_matches_finer_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let p = BoundParams {
                a1: rng.random_range(0.1..10.0),
                a2: rng.random_range(0.05..2.0),
                epsilon: rng.random_range(0.05..2.0),
                n: rng.random_range(10..100_000),
                ..BoundParams::default()
            };
            let m = Moments {
                m_pr: rng.random_range(0.5..20.0),
                m_k: rng.random_range(0.5..200.0),
            };
            let coarse = unbounded_bound(&p, &m).unwrap().value;
            let fine = unbounded_bound_on_grid(&p, &m, 10 * TRUNCATION_GRID_POINTS)
                .unwrap()
                .value;
            assert!((coarse - fine).abs() <= 1e-6 * fine, "{coarse} vs {fine}");
        }
    }

    #[test]
    fn unbounded_bound_rejects_bad_inputs() {
        let p = BoundParams {
            q: 2.0,
            ..BoundParams::default()
        };
        assert!(matches!(
            unbounded_bound(&p, &moments_unit()),
            Err(Error::Domain(_))
        ));
        let bad = Moments {
            m_pr: 0.0,
            m_k: 1.0,
        };
        assert!(matches!(
            unbounded_bound(&BoundParams::default(), &bad),
            Err(Error::Moment(_))
        ));
        let huge = Moments {
            m_pr: f64::INFINITY,
            m_k: f64::INFINITY,
        };
        assert!(matches!(
            unbounded_bound(&BoundParams::default(), &huge),
            Err(Error::Moment(_))
        ));
    }

    #[test]
    fn zero_function_never_deviates() {
        let process = uniform_chain(0.5);
        let f = CenteredFunction::new(AggregatingFunction::Zero, &process, 0, 0).unwrap();
        for eps in [1e-9, 0.1, 1.0] {
            assert_eq!(
                empirical_tail(&f, &process, 50, 10, eps, 100, 3)
                    .unwrap()
                    .p_hat,
                0.0
            );
        }
    }

    #[test]
    fn iid_identity_matches_clt_tail() {
        let process = uniform_chain(0.0);
        let f = CenteredFunction::new(AggregatingFunction::Identity, &process, 0, 0).unwrap();
        let n = 10_000usize;
        let reps = 10_000;
        let sd = (1.0f64 / 3.0).sqrt();
        let eps = 3.0 / (n as f64).sqrt() * sd;
        let tail = empirical_tail(&f, &process, n, n, eps, reps, 2024).unwrap();
        let p = 2.0 * normal_upper_tail(3.0);
        assert!((p - 0.0027).abs() < 1e-4);
        let se = (p * (1.0 - p) / reps as f64).sqrt();
        assert!((tail.p_hat - p).abs() < 3.0 * se, "{tail:?}");
    }

    #[test]
    fn tails_are_nested_in_epsilon() {
        let process = uniform_chain(0.5);
        let f = CenteredFunction::new(AggregatingFunction::SineCosine, &process, 0, 0).unwrap();
        let eps: Vec<f64> = (1..20).map(|i| i as f64 * 0.01).collect();
        let tails = empirical_tail_grid(&f, &process, 200, 100, &eps, 500, 1).unwrap();
        assert!(tails.windows(2).all(|w| w[1].p_hat <= w[0].p_hat));
    }

    #[test]
    fn tails_shrink_with_n() {
        let process = uniform_chain(0.5);
        let f = CenteredFunction::new(AggregatingFunction::Clipped, &process, 0, 0).unwrap();
        let mut prev: Option<TailEstimate> = None;
        for n in [100, 200, 400, 800] {
            let t = empirical_tail(&f, &process, n, 1, 0.1, 1000, 8).unwrap();
            if let Some(p) = prev {
                assert!(t.p_hat <= p.p_hat + 2.0 * (t.ci_half_width + p.ci_half_width));
            }
            prev = Some(t);
        }
    }

    #[test]
    fn tail_input_validation() {
        let process = uniform_chain(0.5);
        let f = CenteredFunction::new(AggregatingFunction::Clipped, &process, 0, 0).unwrap();
        assert!(empirical_tail(&f, &process, 10, 11, 0.1, 100, 0).is_err());
        assert!(empirical_tail(&f, &process, 10, 1, 0.1, 99, 0).is_err());
        assert!(matches!(
            AggregatingFunction::from_name("cubic"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pilot_centering_of_ball_indicator() {
        let process = uniform_chain(0.0);
        let f = AggregatingFunction::BallIndicator { radius: 0.5 };
        let centered = CenteredFunction::new(f, &process, 200_000, 4).unwrap();
        let pilot = centered.pilot().unwrap();
        // X_0 ~ U[-1, 1]: P(|X_0 - y| <= 0.5) = 0.5 for |y| <= 0.5.
        assert!((centered.centering(0.0) - 0.5).abs() < 4.0 * pilot.max_standard_error + 0.01);
        assert!((centered.centering(0.9) - 0.3).abs() < 4.0 * pilot.max_standard_error + 0.01);
    }

    #[test]
    fn laplace_trivial_cases() {
        let process = uniform_chain(0.5);
        let f = CenteredFunction::new(AggregatingFunction::Clipped, &process, 0, 0).unwrap();
        let e = empirical_laplace(&f, &process, 0.0, 20.0, 5, 100, 1).unwrap();
        assert_eq!(e.mean, 1.0);
        let zero = CenteredFunction::new(AggregatingFunction::Zero, &process, 0, 0).unwrap();
        let e = empirical_laplace(&zero, &process, 0.3, 20.0, 5, 100, 1).unwrap();
        assert_eq!(e.mean, 1.0);
    }

    #[test]
    fn laplace_overflow_is_flagged() {
        let process = uniform_chain(0.5);
        let f = CenteredFunction::new(AggregatingFunction::Identity, &process, 0, 0).unwrap();
        let e = empirical_laplace(&f, &process, 1e6, 50.0, 5, 100, 1).unwrap();
        assert!(e.overflow && e.mean.is_infinite());
    }

    fn synthetic_tails(a1: f64, a2: f64, eps: f64, b: f64) -> Vec<TailEstimate> {
        [50u64, 100, 200, 400, 800]
            .iter()
            .map(|&n| TailEstimate {
                epsilon: eps,
                n,
                reps: 10_000,
                p_hat: a1 * (-a2 * rate_argument(n, eps, b).unwrap()).exp(),
                ci_half_width: 0.0,
            })
            .collect()
    }

    #[test]
    fn rate_fit_recovers_synthetic_constants() {
        let fit = rate_fit(&synthetic_tails(1.0, 1.0, 0.05, 1.0), 1.0, 0.05).unwrap();
        assert!((fit.a2 - 1.0).abs() < 1e-9);
        assert!((fit.r_squared - 1.0).abs() < 1e-9);
        let fit = rate_fit(&synthetic_tails(0.5, 2.0, 0.05, 1.0), 1.0, 0.05).unwrap();
        assert!((fit.a1 - 0.5).abs() < 1e-9);
        assert!((fit.a2 - 2.0).abs() < 1e-9);
    }

    #[test]
    fn rate_fit_drops_degenerate_points() {
        let mut tails = synthetic_tails(0.5, 2.0, 0.05, 1.0);
        tails[0].p_hat = 1.0;
        tails[4].p_hat = 0.0;
        assert!(matches!(rate_fit(&tails, 1.0, 0.05), Err(Error::Fit(_))));
    }

    #[test]
    fn calibration_picks_smallest_dominating_grid_value() {
        let p = unit_params();
        let target = laplace_bound(&BoundParams { c: 3.0, ..p }).unwrap();
        let c = calibrate_laplace_constant(&p, target).unwrap();
        assert!(c >= 3.0 && c < 3.0 * 10f64.powf(0.05) + 1e-12);
        let tails = synthetic_tails(0.5, 2.0, 0.05, 1.0);
        let a1 = calibrate_corollary_a1(2.0, &tails, 1.0, 0.05).unwrap();
        assert!(a1 >= 0.5 - 1e-12 && a1 < 0.5 * 10f64.powf(0.05) + 1e-12);
    }

    #[test]
    fn normal_tail_values() {
        assert!((normal_upper_tail(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_upper_tail(1.96) - 0.024997895).abs() < 1e-8);
    }
}
