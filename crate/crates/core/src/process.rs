//! Seeded simulators for stationary, geometrically beta-mixing processes.
//!
//! Every generator is a pure function of `(spec, n, seed)`: the same inputs
//! give the same path bit for bit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mixing::{beta_exact, FiniteJointDistribution};
use crate::quadrature::{self, trapezoid_weights, uniform_grid, weighted_dot};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

pub const DEFAULT_BURN_IN: usize = 1000;
pub const DEFAULT_GRID_SIZE: usize = 64;

/// A scalar path `X_1, ..., X_n`.
pub type PathSample = Vec<f64>;

/// Lipschitz map of the contractive chain `X_k = map(X_{k-1}) + eps_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LipschitzMap {
    Linear {
        a: f64,
    },
    /// `a * clamp(x, -clip, clip)`.
    ClippedLinear {
        a: f64,
        clip: f64,
    },
    /// `a * x + b * sin(x)`.
    SinePerturbed {
        a: f64,
        b: f64,
    },
}

impl LipschitzMap {
    /// Declared Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::Linear { a } | Self::ClippedLinear { a, .. } => a.abs(),
            Self::SinePerturbed { a, b } => a.abs() + b.abs(),
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Self::Linear { a } => a * x,
            Self::ClippedLinear { a, clip } => a * x.clamp(-clip, clip),
            Self::SinePerturbed { a, b } => a * x + b * x.sin(),
        }
    }

    /// Builds a map from its name; `b` is the clip level or sine weight.
    pub fn from_name(name: &str, a: f64, b: f64) -> Result<Self> {
        match name {
            "linear" => Ok(Self::Linear { a }),
            "clipped-linear" => Ok(Self::ClippedLinear { a, clip: b }),
            "sine-perturbed" => Ok(Self::SinePerturbed { a, b }),
            other => Err(Error::Config(format!("unsupported map '{other}'"))),
        }
    }
}

/// Innovation law of the contractive chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Innovation {
    /// Uniform on `[-half_width, half_width]`.
    Uniform { half_width: f64 },
    /// Centered Gaussian with scale `sigma`, conditioned on `|eps| <= bound`.
    TruncatedGaussian { sigma: f64, bound: f64 },
    /// Zero innovations. Only meaningful for deterministic tests: the chain
    /// is then not mixing.
    None,
}

impl Innovation {
    pub fn from_name(name: &str, scale: f64, bound: f64) -> Result<Self> {
        match name {
            "uniform" => Ok(Self::Uniform { half_width: scale }),
            "truncated-gaussian" => Ok(Self::TruncatedGaussian {
                sigma: scale,
                bound,
            }),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("unsupported innovation '{other}'"))),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Self::Uniform { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
            Self::TruncatedGaussian { sigma, bound } => loop {
                let z: f64 = StandardNormal.sample(rng);
                let e = sigma * z;
                if e.abs() <= bound {
                    break e;
                }
            },
            Self::None => 0.0,
        }
    }

    /// Variance of one innovation.
    pub fn variance(&self) -> f64 {
        match *self {
            Self::Uniform { half_width } => half_width * half_width / 3.0,
            Self::TruncatedGaussian { sigma, bound } => {
                let b = bound / sigma;
                let pdf = (-0.5 * b * b).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let mass = 1.0 - 2.0 * crate::concentration::normal_upper_tail(b);
                sigma * sigma * (1.0 - 2.0 * b * pdf / mass)
            }
            Self::None => 0.0,
        }
    }

    /// Supremum of `|eps|`.
    pub fn bound(&self) -> f64 {
        match *self {
            Self::Uniform { half_width } => half_width,
            Self::TruncatedGaussian { bound, .. } => bound,
            Self::None => 0.0,
        }
    }
}

/// Stationary contractive Markov chain `X_k = map(X_{k-1}) + eps_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractiveChainSpec {
    pub map: LipschitzMap,
    pub innovation: Innovation,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub x0: f64,
}

fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

impl ContractiveChainSpec {
    pub fn new(map: LipschitzMap, innovation: Innovation) -> Self {
        Self {
            map,
            innovation,
            burn_in: DEFAULT_BURN_IN,
            x0: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.map.lipschitz();
        if !(l < 1.0) {
            return Err(Error::Contraction(format!(
                "Lipschitz constant {l} is not < 1"
            )));
        }
        if let LipschitzMap::ClippedLinear { clip, .. } = self.map {
            if !(clip > 0.0) {
                return Err(Error::Config("clip level must be positive".into()));
            }
        }
        match self.innovation {
            Innovation::Uniform { half_width } if !(half_width > 0.0) => {
                Err(Error::Config("uniform half width must be positive".into()))
            }
            Innovation::TruncatedGaussian { sigma, bound } if !(sigma > 0.0 && bound > 0.0) => Err(
                Error::Config("truncated gaussian needs sigma > 0 and bound > 0".into()),
            ),
            _ => Ok(()),
        }
    }

    /// True when the innovations carry no absolutely continuous part.
    pub fn is_degenerate(&self) -> bool {
        matches!(self.innovation, Innovation::None)
    }

    /// Almost-sure bound on `|X_k|` in stationarity.
    pub fn state_bound(&self) -> f64 {
        match self.map {
            LipschitzMap::ClippedLinear { a, clip } => a.abs() * clip + self.innovation.bound(),
            _ => self.innovation.bound() / (1.0 - self.map.lipschitz()),
        }
    }

    /// Stationary variance, available for the linear map only.
    pub fn stationary_variance(&self) -> Option<f64> {
        match self.map {
            LipschitzMap::Linear { a } => Some(self.innovation.variance() / (1.0 - a * a)),
            _ => None,
        }
    }

    /// Long-run variance of the path for the linear map.
    pub fn long_run_variance(&self) -> Option<f64> {
        match self.map {
            LipschitzMap::Linear { a } => {
                Some(self.innovation.variance() / ((1.0 - a) * (1.0 - a)))
            }
            _ => None,
        }
    }

    /// Advances one step.
    pub fn step(&self, x: f64, rng: &mut ChaCha8Rng) -> f64 {
        self.map.apply(x) + self.innovation.sample(rng)
    }
}

/// Simulates `n` states after discarding `burn_in` steps from `x0`.
pub fn simulate_contractive_chain(
    spec: &ContractiveChainSpec,
    n: usize,
    seed: u64,
) -> Result<PathSample> {
    simulate_contractive_chain_on(spec, n, seed, Stream::Path)
}

/// As [`simulate_contractive_chain`], drawing from `stream` of `seed`.
pub fn simulate_contractive_chain_on(
    spec: &ContractiveChainSpec,
    n: usize,
    seed: u64,
    stream: Stream,
) -> Result<PathSample> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Domain("path length must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, stream);
    let mut x = spec.x0;
    for _ in 0..spec.burn_in {
        x = spec.step(x, &mut rng);
    }
    let mut path = Vec::with_capacity(n);
    for _ in 0..n {
        x = spec.step(x, &mut rng);
        path.push(x);
    }
    Ok(path)
}

/// Empirical beta coefficients of a path discretized into `bins` equal-mass
/// bins: the binned joint of `(X_k, X_{k+lag})` is fed to the exact
/// coefficient.
pub fn binned_beta_proxy(path: &[f64], bins: usize, lags: &[usize]) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::Domain("need at least two bins".into()));
    }
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    if path.len() <= max_lag + bins {
        return Err(Error::Domain(
            "path too short for the requested lags".into(),
        ));
    }
    let mut sorted = path.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (1..bins).map(|b| sorted[b * sorted.len() / bins]).collect();
    let labels: Vec<usize> = path
        .iter()
        .map(|x| edges.partition_point(|e| e <= x))
        .collect();
    lags.iter()
        .map(|&lag| {
            let pairs = labels.len() - lag;
            let mut counts = vec![0usize; bins * bins];
            for k in 0..pairs {
                counts[labels[k] * bins + labels[k + lag]] += 1;
            }
            let joint = counts.iter().map(|&c| c as f64 / pairs as f64).collect();
            Ok(beta_exact(&FiniteJointDistribution::from_flat(
                bins, bins, joint,
            )?))
        })
        .collect()
}

/// Curves sampled on a common grid, optionally with scalar responses.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalPath {
    grid: Vec<f64>,
    weights: Vec<f64>,
    curves: Vec<Vec<f64>>,
    responses: Option<Vec<f64>>,
}

impl FunctionalPath {
    pub fn new(grid: Vec<f64>, curves: Vec<Vec<f64>>, responses: Option<Vec<f64>>) -> Result<Self> {
        quadrature::check_grid(&grid)?;
        let g = grid.len();
        for (k, c) in curves.iter().enumerate() {
            if c.len() != g {
                return Err(Error::Shape(format!(
                    "curve {k} has {} points, grid has {g}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "curve {k} has a non-finite value"
                )));
            }
        }
        if let Some(r) = &responses {
            if r.len() != curves.len() {
                return Err(Error::Shape("responses and curves differ in length".into()));
            }
        }
        let weights = trapezoid_weights(&grid);
        Ok(Self {
            grid,
            weights,
            curves,
            responses,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn curves(&self) -> &[Vec<f64>] {
        &self.curves
    }

    pub fn responses(&self) -> Option<&[f64]> {
        self.responses.as_deref()
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        weighted_dot(&self.weights, a, b)
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        quadrature::weighted_distance(&self.weights, a, b)
    }

    /// First `n` curves (and responses).
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            grid: self.grid.clone(),
            weights: self.weights.clone(),
            curves: self.curves[..n].to_vec(),
            responses: self.responses.as_ref().map(|r| r[..n].to_vec()),
        }
    }
}

/// Integral kernel of the FAR(1) autoregressive operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorKernel {
    /// `c * phi(u) * phi(v)` with `phi` the unit-norm first sine mode; `|c|` is the operator norm.
    Separable { c: f64 },
    /// Gaussian bump `exp(-(u-v)^2 / (2 width^2))` rescaled to operator norm `rho`.
    GaussianBump { rho: f64, width: f64 },
}

impl OperatorKernel {
    pub fn norm_bound(&self) -> f64 {
        match *self {
            Self::Separable { c } => c.abs(),
            Self::GaussianBump { rho, .. } => rho.abs(),
        }
    }
}

/// Curve-valued innovations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CurveNoise {
    /// `sum_{j=1}^{terms} (scale / j) xi_j sqrt(2) sin(j pi u)` with
    /// `xi_j ~ U[-sqrt 3, sqrt 3]` (unit variance, bounded).
    KarhunenLoeve {
        terms: usize,
        scale: f64,
    },
    None,
}

/// Starting curve before burn-in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCurve {
    #[default]
    Zero,
    /// The unit-norm eigenfunction of the separable kernel.
    Eigenfunction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Far1Spec {
    pub kernel: OperatorKernel,
    pub noise: CurveNoise,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default)]
    pub initial: InitialCurve,
}

impl Far1Spec {
    pub fn new(kernel: OperatorKernel, noise: CurveNoise) -> Self {
        Self {
            kernel,
            noise,
            burn_in: DEFAULT_BURN_IN,
            initial: InitialCurve::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rho = self.kernel.norm_bound();
        if !(rho < 1.0) {
            return Err(Error::Contraction(format!(
                "operator norm bound {rho} is not < 1"
            )));
        }
        if let OperatorKernel::GaussianBump { width, .. } = self.kernel {
            if !(width > 0.0) {
                return Err(Error::Config("bump width must be positive".into()));
            }
        }
        if let CurveNoise::KarhunenLoeve { terms, scale } = self.noise {
            if terms == 0 || !(scale > 0.0) {
                return Err(Error::Config(
                    "Karhunen-Loeve noise needs terms >= 1 and scale > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.noise, CurveNoise::None)
    }
}

/// `sqrt(2) sin(pi u)` rescaled to unit norm under the trapezoid weights.
pub fn unit_sine_mode(grid: &[f64]) -> Vec<f64> {
    let w = trapezoid_weights(grid);
    let raw: Vec<f64> = grid
        .iter()
        .map(|u| std::f64::consts::SQRT_2 * (std::f64::consts::PI * u).sin())
        .collect();
    let norm = weighted_dot(&w, &raw, &raw).sqrt();
    raw.into_iter().map(|v| v / norm).collect()
}

/// Discretized operator: `(A x)(u_i) = sum_j K(u_i, u_j) w_j x(u_j)`.
fn operator_matrix(kernel: &OperatorKernel, grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    let w = trapezoid_weights(grid);
    match *kernel {
        OperatorKernel::Separable { c } => {
            let phi = unit_sine_mode(grid);
            (0..g * g)
                .map(|k| c * phi[k / g] * phi[k % g] * w[k % g])
                .collect()
        }
        OperatorKernel::GaussianBump { rho, width } => {
            let raw: Vec<f64> = (0..g * g)
                .map(|k| {
                    let d = grid[k / g] - grid[k % g];
                    (-d * d / (2.0 * width * width)).exp()
                })
                .collect();
            let scale = rho / weighted_operator_norm(&raw, &w);
            (0..g * g).map(|k| scale * raw[k] * w[k % g]).collect()
        }
    }
}

/// Largest eigenvalue of the symmetric `W^{1/2} K W^{1/2}` by power iteration,
/// i.e. the norm of `K` as an operator on the weighted L^2 space.
fn weighted_operator_norm(kernel: &[f64], w: &[f64]) -> f64 {
    let g = w.len();
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let mut v = vec![1.0 / (g as f64).sqrt(); g];
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let mut next = vec![0.0; g];
        for i in 0..g {
            next[i] = (0..g)
                .map(|j| sw[i] * kernel[i * g + j] * sw[j] * v[j])
                .sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        next.iter_mut().for_each(|x| *x /= norm);
        let done = (norm - lambda).abs() <= 1e-14 * norm;
        lambda = norm;
        v = next;
        if done {
            break;
        }
    }
    lambda
}

fn sample_curve_noise(
    noise: &CurveNoise,
    modes: &[Vec<f64>],
    g: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut eps = vec![0.0; g];
    if let CurveNoise::KarhunenLoeve { scale, .. } = *noise {
        let r = 3f64.sqrt();
        for (j, mode) in modes.iter().enumerate() {
            let coef = scale / (j + 1) as f64 * r * (2.0 * rng.random::<f64>() - 1.0);
            for (e, m) in eps.iter_mut().zip(mode) {
                *e += coef * m;
            }
        }
    }
    eps
}

/// Simulates `X_k = A X_{k-1} + eps_k` on a uniform grid of `grid_size` points.
pub fn simulate_far1(
    spec: &Far1Spec,
    n: usize,
    grid_size: usize,
    seed: u64,
) -> Result<FunctionalPath> {
    simulate_far1_on(spec, n, grid_size, seed, Stream::Path)
}

/// As [`simulate_far1`], drawing from `stream` of `seed`.
pub fn simulate_far1_on(
    spec: &Far1Spec,
    n: usize,
    grid_size: usize,
    seed: u64,
    stream: Stream,
) -> Result<FunctionalPath> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Domain("path length must be at least 1".into()));
    }
    if grid_size < 8 {
        return Err(Error::Domain(format!("grid size {grid_size} < 8")));
    }
    let grid = uniform_grid(grid_size);
    let g = grid_size;
    let a = operator_matrix(&spec.kernel, &grid);
    let modes: Vec<Vec<f64>> = match spec.noise {
        CurveNoise::KarhunenLoeve { terms, .. } => (1..=terms)
            .map(|j| {
                grid.iter()
                    .map(|u| std::f64::consts::SQRT_2 * (j as f64 * std::f64::consts::PI * u).sin())
                    .collect()
            })
            .collect(),
        CurveNoise::None => Vec::new(),
    };
    let mut rng = stream_rng(seed, stream);
    let mut x = match spec.initial {
        InitialCurve::Zero => vec![0.0; g],
        InitialCurve::Eigenfunction => unit_sine_mode(&grid),
    };
    let step = |x: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        let eps = sample_curve_noise(&spec.noise, &modes, g, rng);
        (0..g)
            .map(|i| {
                let row = &a[i * g..(i + 1) * g];
                row.iter().zip(x).map(|(aij, xj)| aij * xj).sum::<f64>() + eps[i]
            })
            .collect()
    };
    for _ in 0..spec.burn_in {
        x = step(&x, &mut rng);
    }
    let mut curves = Vec::with_capacity(n);
    for _ in 0..n {
        x = step(&x, &mut rng);
        curves.push(x.clone());
    }
    FunctionalPath::new(grid, curves, None)
}

/// Weight curve of a linear regression functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightCurve {
    /// Unit-norm first sine mode.
    Sine,
    /// Constant 1.
    Constant,
    /// `u`.
    Ramp,
}

impl WeightCurve {
    pub fn on_grid(&self, grid: &[f64]) -> Vec<f64> {
        match self {
            Self::Sine => unit_sine_mode(grid),
            Self::Constant => vec![1.0; grid.len()],
            Self::Ramp => grid.to_vec(),
        }
    }
}

/// Lipschitz regression functional `psi: H -> R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RegressionFunctional {
    /// `<x, scale * w>`.
    Linear { weight: WeightCurve, scale: f64 },
    /// `||x||`.
    Norm,
}

impl RegressionFunctional {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Self::Linear {
                weight: WeightCurve::Sine,
                scale: 1.0,
            }),
            "norm" => Ok(Self::Norm),
            other => Err(Error::Config(format!("unsupported functional '{other}'"))),
        }
    }

    /// Evaluates the functional on curves over `grid`.
    pub fn evaluator(&self, grid: &[f64]) -> FunctionalEvaluator {
        let weights = trapezoid_weights(grid);
        let direction = match *self {
            Self::Linear { weight, scale } => Some(
                weight
                    .on_grid(grid)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect(),
            ),
            Self::Norm => None,
        };
        FunctionalEvaluator { weights, direction }
    }
}

/// A functional bound to a grid.
#[derive(Debug, Clone)]
pub struct FunctionalEvaluator {
    weights: Vec<f64>,
    direction: Option<Vec<f64>>,
}

impl FunctionalEvaluator {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.direction {
            Some(w) => weighted_dot(&self.weights, x, w),
            None => weighted_dot(&self.weights, x, x).sqrt(),
        }
    }

    /// Lipschitz constant w.r.t. the grid norm.
    pub fn lipschitz(&self) -> f64 {
        match &self.direction {
            Some(w) => weighted_dot(&self.weights, w, w).sqrt(),
            None => 1.0,
        }
    }
}

/// Fills responses `Y_k = psi(X_k) + eps_k` with i.i.d. `N(0, noise_sd^2)` noise.
pub fn make_regression_sample(
    path: &FunctionalPath,
    psi: &RegressionFunctional,
    noise_sd: f64,
    seed: u64,
) -> Result<FunctionalPath> {
    if !(noise_sd >= 0.0) {
        return Err(Error::Domain(format!("noise sd {noise_sd} must be >= 0")));
    }
    let eval = psi.evaluator(path.grid());
    let mut rng = stream_rng(seed, Stream::Noise);
    let responses = path
        .curves()
        .iter()
        .map(|c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            eval.eval(c) + noise_sd * z
        })
        .collect();
    FunctionalPath::new(
        path.grid().to_vec(),
        path.curves().to_vec(),
        Some(responses),
    )
}
