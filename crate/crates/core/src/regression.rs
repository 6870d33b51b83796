//! Nadaraya–Watson regression on curve-valued covariates, normalized by
//! small-ball probabilities rather than a bandwidth power.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::process::{
    make_regression_sample, simulate_far1, simulate_far1_on, Far1Spec, FunctionalPath,
    RegressionFunctional,
};
use crate::quadrature::{integrate, trapezoid_weights, weighted_dot};
use crate::rng::{replication_seed, Stream};
use crate::stats::quantile_sorted;
use crate::{Error, Result};

const KERNEL_CHECK_POINTS: usize = 1000;
const KERNEL_CHECK_TOL: f64 = 1e-9;
const M_QUADRATURE_POINTS: usize = 1000;
const TAU_TOL: f64 = 1e-9;
const THETA_FLOOR: f64 = 1e-3;
const MIN_BANDWIDTH: f64 = 1e-12;

/// Kernels supported on `[0, 1]`, non-increasing there, with `K(1) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    Uniform,
    /// `2 - s`.
    DownslopeLinear,
    /// `1.5 - 0.5 s^2`.
    QuadraticDecreasing,
}

impl Kernel {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "uniform" => Ok(Self::Uniform),
            "downslope-linear" => Ok(Self::DownslopeLinear),
            "quadratic-decreasing" => Ok(Self::QuadraticDecreasing),
            other => Err(Error::Config(format!("unsupported kernel '{other}'"))),
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        if !(0.0..=1.0).contains(&s) {
            return 0.0;
        }
        match self {
            Self::Uniform => 1.0,
            Self::DownslopeLinear => 2.0 - s,
            Self::QuadraticDecreasing => 1.5 - 0.5 * s * s,
        }
    }

    /// `K'(s)` on `[0, 1)`.
    pub fn derivative(&self, s: f64) -> f64 {
        match self {
            Self::Uniform => 0.0,
            Self::DownslopeLinear => -1.0,
            Self::QuadraticDecreasing => -s,
        }
    }

    /// Finite-difference check of `K' <= 0` on `[0, 1)`, `K(1) > 0`, and zero outside.
    pub fn validate(&self) -> Result<()> {
        if !(self.eval(1.0) > 0.0) {
            return Err(Error::Model("K(1) must be positive".into()));
        }
        if self.eval(-1e-9) != 0.0 || self.eval(1.0 + 1e-9) != 0.0 {
            return Err(Error::Model("kernel must vanish outside [0, 1]".into()));
        }
        let step = 1.0 / KERNEL_CHECK_POINTS as f64;
        for i in 0..KERNEL_CHECK_POINTS - 1 {
            let s = i as f64 * step;
            if self.eval(s + step) - self.eval(s) > KERNEL_CHECK_TOL {
                return Err(Error::Model(format!("kernel increases near s = {s}")));
            }
        }
        Ok(())
    }
}

/// `(int_0^1 x(u)^2 du)^{1/2}` by the trapezoid rule.
pub fn hilbert_norm(curve: &[f64], grid: &[f64]) -> Result<f64> {
    if curve.len() != grid.len() {
        return Err(Error::Shape(format!(
            "curve has {} points, grid has {}",
            curve.len(),
            grid.len()
        )));
    }
    crate::quadrature::check_grid(grid)?;
    let w = trapezoid_weights(grid);
    Ok(weighted_dot(&w, curve, curve).sqrt())
}

/// A defined estimate at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NwEstimate {
    pub psi_hat: f64,
    /// `(n F(h))^{-1} sum K(d_k / h)`; `None` when the small-ball probability is zero.
    pub f_hat: Option<f64>,
    /// `(n F(h))^{-1} sum Y_k K(d_k / h)`.
    pub g_hat: Option<f64>,
    pub n_effective: usize,
}

/// Either an estimate or the empty-neighbourhood outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Defined(NwEstimate),
    /// No training point within the bandwidth.
    Undefined,
}

impl Estimate {
    pub fn defined(&self) -> Option<&NwEstimate> {
        match self {
            Self::Defined(e) => Some(e),
            Self::Undefined => None,
        }
    }
}

/// Estimator from precomputed distances `d_k = ||X_k - x||` and the small-ball
/// probability `F_x(h)` (possibly estimated).
pub fn nadaraya_watson_from_distances(
    kernel: Kernel,
    distances: &[f64],
    responses: &[f64],
    h: f64,
    small_ball: f64,
) -> Result<Estimate> {
    if distances.len() != responses.len() {
        return Err(Error::Shape(
            "distances and responses differ in length".into(),
        ));
    }
    if !(h > 0.0) {
        return Err(Error::Bandwidth(format!("bandwidth {h} must be positive")));
    }
    if !(0.0..=1.0).contains(&small_ball) {
        return Err(Error::Domain(format!(
            "small-ball probability {small_ball} outside [0, 1]"
        )));
    }
    let (mut den, mut num, mut n_effective) = (0.0, 0.0, 0);
    for (&d, &y) in distances.iter().zip(responses) {
        let s = d / h;
        if s <= 1.0 {
            let k = kernel.eval(s);
            den += k;
            num += y * k;
            n_effective += 1;
        }
    }
    if n_effective == 0 {
        return Ok(Estimate::Undefined);
    }
    let norm = distances.len() as f64 * small_ball;
    let (f_hat, g_hat) = if small_ball > 0.0 {
        (Some(den / norm), Some(num / norm))
    } else {
        (None, None)
    };
    Ok(Estimate::Defined(NwEstimate {
        psi_hat: num / den,
        f_hat,
        g_hat,
        n_effective,
    }))
}

/// Empirical small-ball probabilities `F_x(h) = P(||X_0 - x|| <= h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallBallModel {
    pub h_grid: Vec<f64>,
    pub f_hat: Vec<f64>,
    /// Set for finite-dimensional surrogates, where `tau(s) = s^d`.
    pub dimension: Option<usize>,
    sorted: Vec<f64>,
}

impl SmallBallModel {
    /// From distances of `m >= 100` reference draws to the query point.
    pub fn from_distances(
        mut distances: Vec<f64>,
        h_grid: &[f64],
        dimension: Option<usize>,
    ) -> Result<Self> {
        if distances.len() < 100 {
            return Err(Error::Size(format!(
                "reference sample of {} < 100",
                distances.len()
            )));
        }
        if distances.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Validation("distances must be non-negative".into()));
        }
        if h_grid.is_empty() || h_grid[0] <= 0.0 || h_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain(
                "bandwidth grid must be positive and increasing".into(),
            ));
        }
        distances.sort_by(f64::total_cmp);
        let mut model = Self {
            h_grid: h_grid.to_vec(),
            f_hat: Vec::new(),
            dimension,
            sorted: distances,
        };
        model.f_hat = h_grid.iter().map(|&h| model.f_at(h)).collect();
        if model.f_hat.iter().all(|f| *f == 0.0) {
            return Err(Error::Bandwidth(
                "no reference draw within the largest bandwidth".into(),
            ));
        }
        Ok(model)
    }

    pub fn reference_size(&self) -> usize {
        self.sorted.len()
    }

    /// `F_hat(h)` at any `h`: a right-continuous step function, 0 for `h < 0`.
    pub fn f_at(&self, h: f64) -> f64 {
        let count = self.sorted.partition_point(|d| *d <= h);
        count as f64 / self.sorted.len() as f64
    }

    /// Binomial standard error of `F_hat(h)`.
    pub fn standard_error(&self, h: f64) -> f64 {
        let f = self.f_at(h);
        (f * (1.0 - f) / self.sorted.len() as f64).sqrt()
    }

    /// `F_hat(h s) / F_hat(h)` at the smallest grid bandwidth with `F_hat > 0`.
    pub fn tau_hat(&self, s: f64) -> f64 {
        let h = self
            .h_grid
            .iter()
            .zip(&self.f_hat)
            .find(|(_, f)| **f > 0.0)
            .map(|(h, _)| *h)
            .expect("construction guarantees a positive entry");
        self.tau_hat_at(s, h)
    }

    /// `F_hat(h s) / F_hat(h)`; zero when `F_hat(h) = 0`.
    pub fn tau_hat_at(&self, s: f64, h: f64) -> f64 {
        let base = self.f_at(h);
        if base == 0.0 {
            0.0
        } else {
            self.f_at(h * s) / base
        }
    }
}

/// Small-ball model of `x` against the curves of `reference`.
pub fn estimate_small_ball(
    x: &[f64],
    h_grid: &[f64],
    reference: &FunctionalPath,
) -> Result<SmallBallModel> {
    if x.len() != reference.grid().len() {
        return Err(Error::Shape(
            "query curve does not match the reference grid".into(),
        ));
    }
    let d = reference
        .curves()
        .iter()
        .map(|c| reference.distance(c, x))
        .collect();
    SmallBallModel::from_distances(d, h_grid, None)
}

/// `M = K(1) - int_0^1 K'(s) tau(s) ds` by a 1000-point trapezoid rule.
pub fn m_constant<F: Fn(f64) -> f64>(kernel: Kernel, tau: F) -> Result<f64> {
    for i in 0..M_QUADRATURE_POINTS {
        let s = i as f64 / (M_QUADRATURE_POINTS - 1) as f64;
        let v = tau(s);
        if !(-TAU_TOL..=1.0 + TAU_TOL).contains(&v) {
            return Err(Error::Domain(format!("tau({s}) = {v} outside [0, 1]")));
        }
    }
    let m = kernel.eval(1.0)
        - integrate(
            |s| kernel.derivative(s) * tau(s),
            0.0,
            1.0,
            M_QUADRATURE_POINTS,
        );
    if m <= 0.0 {
        return Err(Error::Model(format!("M = {m} is not positive")));
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth {
    pub h: f64,
    /// `n^{2 theta - 2} (log n)^2 (log log n)^2`.
    pub summand: f64,
}

/// `h_n` = empirical `n^{-theta}` quantile of pilot distances, so that
/// `F(h_n) ~ n^{-theta}`. `theta` is floored at `1e-3`.
pub fn bandwidth_schedule(n: u64, theta: f64, pilot: &[f64]) -> Result<Bandwidth> {
    if !(theta < 0.5) || theta < 0.0 || theta.is_nan() {
        return Err(Error::Domain(format!("theta = {theta} outside (0, 1/2)")));
    }
    if pilot.is_empty() {
        return Err(Error::Size("empty pilot distance sample".into()));
    }
    if n < 3 {
        return Err(Error::Domain(format!("n = {n} < 3")));
    }
    let theta = theta.max(THETA_FLOOR);
    let nf = n as f64;
    let mut sorted = pilot.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = quantile_sorted(&sorted, nf.powf(-theta)).max(MIN_BANDWIDTH);
    let (l, ll) = (nf.ln(), nf.ln().ln());
    Ok(Bandwidth {
        h,
        summand: nf.powf(2.0 * theta - 2.0) * l * l * ll * ll,
    })
}

/// Query time within a sample of size `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TimeRule {
    /// `t = n`.
    #[default]
    Last,
    Fixed {
        t: usize,
    },
}

impl TimeRule {
    pub fn index(&self, n: usize) -> Result<usize> {
        match *self {
            Self::Last => Ok(n),
            Self::Fixed { t } if (1..=n).contains(&t) => Ok(t),
            Self::Fixed { t } => Err(Error::Domain(format!("t = {t} outside 1..={n}"))),
        }
    }
}

/// A trained estimator: kernel, bandwidth, training sample and an
/// independent reference sample for `F_x(h)`.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    pub kernel: Kernel,
    pub bandwidth: f64,
    training: FunctionalPath,
    reference: FunctionalPath,
}

/// Output of [`RegressionFit::evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub estimate: Estimate,
    pub small_ball: SmallBallModel,
    /// `K(1) - int K'(s) F_hat(h s) / F_hat(h) ds`; `None` when `F_hat(h) = 0`.
    pub m_hat: Option<f64>,
}

impl RegressionFit {
    pub fn new(
        kernel: Kernel,
        bandwidth: f64,
        training: FunctionalPath,
        reference: FunctionalPath,
    ) -> Result<Self> {
        kernel.validate()?;
        if !(bandwidth > 0.0) {
            return Err(Error::Bandwidth(format!(
                "bandwidth {bandwidth} must be positive"
            )));
        }
        if training.responses().is_none() {
            return Err(Error::Validation("training sample has no responses".into()));
        }
        if training.grid() != reference.grid() {
            return Err(Error::Shape("training and reference grids differ".into()));
        }
        Ok(Self {
            kernel,
            bandwidth,
            training,
            reference,
        })
    }

    pub fn training(&self) -> &FunctionalPath {
        &self.training
    }

    pub fn nadaraya_watson(&self, x: &[f64]) -> Result<Estimate> {
        Ok(self.evaluate(x)?.estimate)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<PointEstimate> {
        if x.len() != self.training.grid().len() {
            return Err(Error::Shape(
                "query curve does not match the training grid".into(),
            ));
        }
        let small_ball =
            estimate_small_ball(x, &[self.bandwidth], &self.reference).or_else(|e| match e {
                // An empty reference ball still yields a psi estimate.
                Error::Bandwidth(_) => {
                    let d = self
                        .reference
                        .curves()
                        .iter()
                        .map(|c| self.reference.distance(c, x))
                        .collect();
                    Ok(SmallBallModel {
                        h_grid: vec![self.bandwidth],
                        f_hat: vec![0.0],
                        dimension: None,
                        sorted: sorted(d),
                    })
                }
                other => Err(other),
            })?;
        let f = small_ball.f_hat[0];
        let distances: Vec<f64> = self
            .training
            .curves()
            .iter()
            .map(|c| self.training.distance(c, x))
            .collect();
        let responses = self.training.responses().expect("checked at construction");
        let estimate =
            nadaraya_watson_from_distances(self.kernel, &distances, responses, self.bandwidth, f)?;
        let m_hat = if f > 0.0 {
            Some(m_constant(self.kernel, |s| {
                small_ball.tau_hat_at(s, self.bandwidth)
            })?)
        } else {
            None
        };
        Ok(PointEstimate {
            estimate,
            small_ball,
            m_hat,
        })
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Model of the dynamic-forecast experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    pub far: Far1Spec,
    pub grid_size: usize,
    pub functional: RegressionFunctional,
    pub noise_sd: f64,
    pub kernel: Kernel,
    pub theta: f64,
    /// Curves in each replication's reference sample.
    pub reference_size: usize,
    #[serde(default)]
    pub time_rule: TimeRule,
}

/// Per-n summary of the dynamic-forecast experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForecastRow {
    pub n: usize,
    pub forecast_median: f64,
    pub forecast_q90: f64,
    pub f_hat_median: f64,
    pub f_hat_q90: f64,
    pub g_hat_median: f64,
    pub g_hat_q90: f64,
    pub undefined_fraction: f64,
    /// Median bandwidth across replications.
    pub bandwidth_median: f64,
    /// Mean of `F_hat(h)^{-2}` over defined replications (reported, not certified finite).
    pub inverse_small_ball_moment: f64,
}

struct RepOutcome {
    forecast: f64,
    f_err: f64,
    g_err: f64,
    h: f64,
    f: f64,
}

fn forecast_replication(
    cfg: &ForecastConfig,
    n_grid: &[usize],
    seed: u64,
) -> Result<Vec<Option<RepOutcome>>> {
    let n_max = *n_grid.iter().max().expect("non-empty grid");
    let path = simulate_far1(&cfg.far, n_max, cfg.grid_size, seed)?;
    let path = make_regression_sample(&path, &cfg.functional, cfg.noise_sd, seed)?;
    let reference = simulate_far1_on(
        &cfg.far,
        cfg.reference_size,
        cfg.grid_size,
        seed,
        Stream::Reference,
    )?;
    let half = cfg.reference_size / 2;
    let refs = reference.curves();
    let pilot: Vec<f64> = (0..half)
        .map(|i| reference.distance(&refs[i], &refs[i + half]))
        .collect();
    let psi = cfg.functional.evaluator(path.grid());
    n_grid
        .iter()
        .map(|&n| {
            let h = bandwidth_schedule(n as u64, cfg.theta, &pilot)?.h;
            let t = cfg.time_rule.index(n)?;
            let fit = RegressionFit::new(cfg.kernel, h, path.prefix(n), reference.clone())?;
            let x = &path.curves()[t - 1];
            let point = fit.evaluate(x)?;
            let truth = psi.eval(x);
            Ok(match (point.estimate, point.m_hat) {
                (
                    Estimate::Defined(NwEstimate {
                        psi_hat,
                        f_hat: Some(f_hat),
                        g_hat: Some(g_hat),
                        ..
                    }),
                    Some(m),
                ) => Some(RepOutcome {
                    forecast: (psi_hat - truth).abs(),
                    f_err: (f_hat - m).abs(),
                    g_err: (g_hat - truth * m).abs(),
                    h,
                    f: point.small_ball.f_hat[0],
                }),
                _ => None,
            })
        })
        .collect()
}

/// Median and 90th percentile of `|psi_hat(X_t) - psi(X_t)|`, `|f_hat - M_hat|`
/// and `|g_hat - psi(X_t) M_hat|` per `n`, over `reps >= 200` replications.
/// Replication `r` uses one path of length `max n_grid`, truncated to each `n`.
pub fn dynamic_forecast_experiment(
    cfg: &ForecastConfig,
    n_grid: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<ForecastRow>> {
    if reps < 200 {
        return Err(Error::Domain(format!("reps = {reps} < 200")));
    }
    if n_grid.is_empty() || n_grid.iter().any(|n| *n < 3) {
        return Err(Error::Domain(
            "n grid must be non-empty with every n >= 3".into(),
        ));
    }
    if cfg.reference_size < 200 {
        return Err(Error::Size(format!(
            "reference size {} < 200",
            cfg.reference_size
        )));
    }
    if !(cfg.noise_sd >= 0.0) {
        return Err(Error::Domain("noise sd must be >= 0".into()));
    }
    let outcomes: Vec<Vec<Option<RepOutcome>>> = (0..reps as u64)
        .into_par_iter()
        .map(|r| forecast_replication(cfg, n_grid, replication_seed(seed, r)))
        .collect::<Result<_>>()?;
    n_grid
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let defined: Vec<&RepOutcome> = outcomes.iter().filter_map(|o| o[i].as_ref()).collect();
            let undefined_fraction = 1.0 - defined.len() as f64 / reps as f64;
            if undefined_fraction > 0.5 {
                return Err(Error::Bandwidth(format!(
                    "{:.1}% undefined estimates at n = {n}",
                    100.0 * undefined_fraction
                )));
            }
            let col = |g: fn(&RepOutcome) -> f64| sorted(defined.iter().map(|o| g(o)).collect());
            let (fc, fe, ge, hs) = (
                col(|o| o.forecast),
                col(|o| o.f_err),
                col(|o| o.g_err),
                col(|o| o.h),
            );
            let moment = defined.iter().map(|o| o.f.powi(-2)).sum::<f64>() / defined.len() as f64;
            Ok(ForecastRow {
                n,
                forecast_median: quantile_sorted(&fc, 0.5),
                forecast_q90: quantile_sorted(&fc, 0.9),
                f_hat_median: quantile_sorted(&fe, 0.5),
                f_hat_q90: quantile_sorted(&fe, 0.9),
                g_hat_median: quantile_sorted(&ge, 0.5),
                g_hat_q90: quantile_sorted(&ge, 0.9),
                undefined_fraction,
                bandwidth_median: quantile_sorted(&hs, 0.5),
                inverse_small_ball_moment: moment,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{CurveNoise, OperatorKernel, WeightCurve};
    use crate::quadrature::uniform_grid;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const KERNELS: [Kernel; 3] = [
        Kernel::Uniform,
        Kernel::DownslopeLinear,
        Kernel::QuadraticDecreasing,
    ];

    #[test]
    fn kernels_satisfy_conditions() {
        for k in KERNELS {
            k.validate().unwrap();
            assert_eq!(k.eval(1.5), 0.0);
            assert_eq!(k.eval(-0.1), 0.0);
        }
        assert!(matches!(
            Kernel::from_name("gaussian"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hilbert_norm_examples() {
        let g = uniform_grid(256);
        assert!((hilbert_norm(&vec![1.0; 256], &g).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(hilbert_norm(&vec![0.0; 256], &g).unwrap(), 0.0);
        let s: Vec<f64> = g
            .iter()
            .map(|u| (2.0 * std::f64::consts::PI * u).sin())
            .collect();
        assert!((hilbert_norm(&s, &g).unwrap() - 0.5f64.sqrt()).abs() < 1e-4);
        assert!(matches!(hilbert_norm(&[1.0; 3], &g), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_computed_five_points() {
        let est = nadaraya_watson_from_distances(
            Kernel::DownslopeLinear,
            &[0.1, 0.2, 0.9, 1.5, 2.0],
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            1.0,
            0.5,
        )
        .unwrap();
        let e = est.defined().unwrap();
        assert!((e.psi_hat - 8.8 / 4.8).abs() <= 1e-12 * (8.8 / 4.8));
        assert_eq!(e.n_effective, 3);
        assert!((e.f_hat.unwrap() - 4.8 / 2.5).abs() < 1e-12);
    }

    #[test]
    fn constant_responses_and_single_neighbour() {
        let d = [0.3, 0.5, 2.0];
        let e =
            nadaraya_watson_from_distances(Kernel::QuadraticDecreasing, &d, &[7.0; 3], 1.0, 0.1)
                .unwrap();
        assert!((e.defined().unwrap().psi_hat - 7.0).abs() < 1e-14);
        let e = nadaraya_watson_from_distances(Kernel::Uniform, &d, &[1.0, 2.0, 3.0], 0.4, 0.1)
            .unwrap();
        assert_eq!(e.defined().unwrap().psi_hat, 1.0);
        let e = nadaraya_watson_from_distances(Kernel::Uniform, &d, &[1.0, 2.0, 3.0], 0.1, 0.1)
            .unwrap();
        assert_eq!(e, Estimate::Undefined);
    }

    proptest! {
        #[test]
        fn estimator_properties(
            pts in proptest::collection::vec((0.0f64..2.0, -5.0f64..5.0), 1..40),
            c in 0.1f64..3.0,
            b in -2.0f64..2.0,
            kidx in 0usize..3,
        ) {
            let kernel = KERNELS[kidx];
            let (d, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let est = nadaraya_watson_from_distances(kernel, &d, &y, 1.0, 0.3).unwrap();
            if let Estimate::Defined(e) = est {
                let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(e.psi_hat >= lo - 1e-12 && e.psi_hat <= hi + 1e-12);
                let ratio = e.g_hat.unwrap() / e.f_hat.unwrap();
                prop_assert!((ratio - e.psi_hat).abs() <= 1e-12 * e.psi_hat.abs().max(1.0));
                // Far points do not change the estimate.
                let mut d2 = d.clone();
                let mut y2 = y.clone();
                d2.push(1.5);
                y2.push(1e6);
                let e2 = nadaraya_watson_from_distances(kernel, &d2, &y2, 1.0, 0.3).unwrap();
                prop_assert_eq!(e2.defined().unwrap().psi_hat, e.psi_hat);
                let ys: Vec<f64> = y.iter().map(|v| c * v + b).collect();
                let e3 = nadaraya_watson_from_distances(kernel, &d, &ys, 1.0, 0.3).unwrap();
                let expect = c * e.psi_hat + b;
                prop_assert!((e3.defined().unwrap().psi_hat - expect).abs() <= 1e-10 * expect.abs().max(1.0));
            } else {
                prop_assert!(d.iter().all(|v| *v > 1.0));
            }
        }
    }

    fn unit_ball_distances(d: usize, m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| loop {
                let p: Vec<f64> = (0..d).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                let r = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                if r <= 1.0 {
                    break r;
                }
            })
            .collect()
    }

    #[test]
    fn small_ball_extremes_and_monotonicity() {
        let dist = unit_ball_distances(2, 1000, 1);
        let grid: Vec<f64> = (1..=20).map(|i| i as f64 * 0.06).collect();
        let model = SmallBallModel::from_distances(dist.clone(), &grid, Some(2)).unwrap();
        assert_eq!(*model.f_hat.last().unwrap(), 1.0);
        assert!(model.f_hat.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(model.f_at(-1e-9), 0.0);
        let min = dist.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(model.f_at(min * 0.999), 0.0);
        assert!(model.tau_hat(0.5) <= 1.0);
        assert!(matches!(
            SmallBallModel::from_distances(dist, &[min * 0.5], None),
            Err(Error::Bandwidth(_))
        ));
    }

    #[test]
    fn m_constant_examples() {
        assert!((m_constant(Kernel::Uniform, |s| s * s).unwrap() - 1.0).abs() < 1e-12);
        assert!((m_constant(Kernel::DownslopeLinear, |s| s).unwrap() - 1.5).abs() < 1e-6);
        assert!((m_constant(Kernel::DownslopeLinear, |s| s * s).unwrap() - 4.0 / 3.0).abs() < 1e-6);
        for k in KERNELS {
            assert!(m_constant(k, |s| s.sqrt()).unwrap() >= k.eval(1.0));
        }
        assert!(m_constant(Kernel::Uniform, |_| 2.0).is_err());
    }

    #[test]
    fn bandwidth_schedule_properties() {
        let pilot = unit_ball_distances(2, 100_000, 3);
        let max = pilot.iter().cloned().fold(0.0, f64::max);
        let h = bandwidth_schedule(10_000, 1e-9, &pilot).unwrap().h;
        assert!(h > 0.95 * max);
        let bw = bandwidth_schedule(10_000, 0.4, &pilot).unwrap();
        let model = SmallBallModel::from_distances(pilot.clone(), &[bw.h], Some(2)).unwrap();
        let target = 10_000f64.powf(-0.4);
        assert!(model.f_hat[0] > target / 2.0 && model.f_hat[0] < target * 2.0);
        assert!(bandwidth_schedule(100, 0.5, &pilot).is_err());
        assert!(bandwidth_schedule(100, -0.1, &pilot).is_err());
    }

    #[test]
    fn bandwidth_summands_are_summable() {
        let s: Vec<f64> = (4..=60)
            .map(|j| {
                let n = 2f64.powi(j);
                let b = bandwidth_schedule(n as u64, 0.4, &[1.0]).unwrap();
                b.summand * n // mass of the dyadic block [n, 2n)
            })
            .collect();
        let ratios: Vec<f64> = s.windows(2).map(|w| w[1] / w[0]).collect();
        // Block ratios approach 2^{2 theta - 1} = 2^{-0.2} < 1 from above.
        assert!(ratios[ratios.len() - 10..].iter().all(|r| *r < 0.95));
        assert!(ratios.last().unwrap() > &2f64.powf(-0.2));
    }

    fn constant_config() -> ForecastConfig {
        ForecastConfig {
            far: Far1Spec::new(OperatorKernel::Separable { c: 0.0 }, CurveNoise::None),
            grid_size: 16,
            functional: RegressionFunctional::Linear {
                weight: WeightCurve::Sine,
                scale: 1.0,
            },
            noise_sd: 0.0,
            kernel: Kernel::DownslopeLinear,
            theta: 0.3,
            reference_size: 200,
            time_rule: TimeRule::Last,
        }
    }

    #[test]
    fn constant_process_has_zero_error() {
        let rows = dynamic_forecast_experiment(&constant_config(), &[10, 20], 200, 5).unwrap();
        for r in rows {
            assert_eq!(r.forecast_median, 0.0);
            assert_eq!(r.forecast_q90, 0.0);
            assert_eq!(r.undefined_fraction, 0.0);
        }
    }

    #[test]
    fn experiment_validates_inputs() {
        let cfg = constant_config();
        assert!(dynamic_forecast_experiment(&cfg, &[10], 199, 0).is_err());
        assert!(dynamic_forecast_experiment(&cfg, &[], 200, 0).is_err());
        let fixed = ForecastConfig {
            time_rule: TimeRule::Fixed { t: 50 },
            ..cfg
        };
        assert!(dynamic_forecast_experiment(&fixed, &[10], 200, 0).is_err());
    }

    #[test]
    fn fit_rejects_unlabelled_training() {
        let cfg = constant_config();
        let p = simulate_far1(&cfg.far, 10, 16, 0).unwrap();
        assert!(RegressionFit::new(Kernel::Uniform, 0.1, p.clone(), p).is_err());
    }
}
