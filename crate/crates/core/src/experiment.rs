//! Config-driven experiment suites, their CSV reports and run manifests.
//!
//! A run is a pure function of its resolved config: report bodies are
//! byte-identical across reruns and worker counts; only the manifest carries
//! a timestamp.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concentration::{
    calibrate_corollary_a1, calibrate_laplace_constant, corollary_bound, deviation_samples,
    empirical_laplace, laplace_bound, max_admissible_gamma, rate_argument, rate_fit, truncate,
    unbounded_bound, unbounded_bound_on_grid, AggregatingFunction, BoundParams, CenteredFunction,
    Moments, TailEstimate, DEFAULT_PILOT_DRAWS, TRUNCATION_GRID_POINTS,
};
use crate::io::{format_checks, read_chain, read_joint, CheckRecord};
use crate::mixing::{
    alpha_exact, beta_exact, davydov_check, fit_geometric_decay, ibragimov_check, markov_beta_lag,
    random_chain, random_joint, CheckOutcome, FiniteChain, FiniteJointDistribution,
};
use crate::process::{
    binned_beta_proxy, simulate_contractive_chain_on, ContractiveChainSpec, CurveNoise, Far1Spec,
    Innovation, LipschitzMap, OperatorKernel, RegressionFunctional, WeightCurve, DEFAULT_GRID_SIZE,
};
use crate::regression::{
    dynamic_forecast_experiment, m_constant, nadaraya_watson_from_distances, ForecastConfig,
    ForecastRow, Kernel, TimeRule,
};
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "BETAMIX_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "betamix-out";

pub const CONCENTRATION_HEADER: &str = "experiment_id,n,epsilon,B,p_hat,ci,bound_value,seed";
pub const FKR_HEADER: &str =
    "n,rep_quantile_level,forecast_error,f_hat_error,g_hat_error,undefined_fraction";
pub const PLOT_HEADER: &str = "series,x,y,y_lo,y_hi";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Mixing,
    Concentration,
    Fkr,
    VerifyAll,
}

impl Suite {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mixing => "mixing",
            Self::Concentration => "concentration",
            Self::Fkr => "fkr",
            Self::VerifyAll => "verify-all",
        }
    }

    fn is_monte_carlo(&self) -> bool {
        matches!(self, Self::Concentration | Self::Fkr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessConfig {
    #[serde(default = "default_chain")]
    pub chain: ContractiveChainSpec,
    #[serde(default = "default_far")]
    pub far: Far1Spec,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            chain: default_chain(),
            far: default_far(),
            grid_size: DEFAULT_GRID_SIZE,
        }
    }
}

fn default_chain() -> ContractiveChainSpec {
    ContractiveChainSpec::new(
        LipschitzMap::Linear { a: 0.5 },
        Innovation::Uniform { half_width: 1.0 },
    )
}

fn default_far() -> Far1Spec {
    Far1Spec::new(
        OperatorKernel::Separable { c: 0.5 },
        CurveNoise::KarhunenLoeve {
            terms: 3,
            scale: 1.0,
        },
    )
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_SIZE
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n_grid: Option<Vec<usize>>,
    pub epsilon_grid: Option<Vec<f64>>,
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    /// Random joint distributions checked.
    pub joints: usize,
    /// Random chains checked.
    pub chains: usize,
    pub max_alphabet: usize,
    pub max_states: usize,
    /// Lags `1..=decay_lags` of the geometric decay fit.
    pub decay_lags: usize,
    /// Optional matrix files checked in addition to the random instances.
    pub chain_file: Option<String>,
    pub joint_file: Option<String>,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            joints: 200,
            chains: 100,
            max_alphabet: 5,
            max_states: 4,
            decay_lags: 12,
            chain_file: None,
            joint_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConcentrationConfig {
    pub function: AggregatingFunction,
    /// Fixed index `t` of `f(X_k, X_t)`.
    pub t: usize,
    pub pilot_draws: usize,
    pub laplace_function: AggregatingFunction,
    /// Interval lengths; the first calibrates `C`.
    pub laplace_a: Vec<f64>,
    pub laplace_reps: usize,
    /// Settings of the binned beta proxy that supplies `kappa0`, `kappa1`.
    pub proxy_steps: usize,
    pub proxy_bins: usize,
    pub proxy_lags: Vec<usize>,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        Self {
            function: AggregatingFunction::Clipped,
            t: 1,
            pilot_draws: DEFAULT_PILOT_DRAWS,
            laplace_function: AggregatingFunction::Clipped,
            laplace_a: vec![14.0, 20.0, 50.0, 100.0],
            laplace_reps: 100_000,
            proxy_steps: 1_000_000,
            proxy_bins: 8,
            proxy_lags: vec![1, 2, 3, 4, 5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FkrConfig {
    pub kernel: Kernel,
    pub functional: RegressionFunctional,
    pub noise_sd: f64,
    pub reference_size: usize,
    pub time_rule: TimeRule,
}

impl Default for FkrConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::DownslopeLinear,
            functional: RegressionFunctional::Linear {
                weight: WeightCurve::Sine,
                scale: 1.0,
            },
            noise_sd: 0.1,
            reference_size: 4000,
            time_rule: TimeRule::Last,
        }
    }
}

/// The config file schema. Every field except `seed` has a default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: Option<Suite>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub output_path: Option<String>,
    #[serde(default)]
    pub process: ProcessConfig,
    #[serde(default)]
    pub grids: GridConfig,
    #[serde(default)]
    pub mixing: MixingConfig,
    #[serde(default)]
    pub concentration: ConcentrationConfig,
    #[serde(default)]
    pub fkr: FkrConfig,
}

/// Command-line values that take precedence over config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub output_path: Option<String>,
    pub n_grid: Option<Vec<usize>>,
    pub epsilon_grid: Option<Vec<f64>>,
    pub theta: Option<f64>,
    pub kernel: Option<Kernel>,
}

/// A config with every default filled in; recorded verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub suite: Suite,
    pub seed: u64,
    pub reps: usize,
    pub output_path: String,
    pub process: ProcessConfig,
    pub grids: ResolvedGrids,
    pub mixing: MixingConfig,
    pub concentration: ConcentrationConfig,
    pub fkr: FkrConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedGrids {
    pub n_grid: Vec<usize>,
    pub epsilon_grid: Vec<f64>,
    pub theta: f64,
}

impl ExperimentConfig {
    /// Parses TOML; a `.json` run manifest is accepted too and yields its recorded config.
    pub fn parse(text: &str, path_hint: Option<&Path>) -> Result<Self> {
        let is_json = path_hint
            .and_then(|p| p.extension())
            .is_some_and(|e| e == "json");
        if is_json {
            let value: serde_json::Value =
                serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
            let inner = value
                .get("resolved_config")
                .ok_or_else(|| Error::Config("manifest has no resolved_config".into()))?;
            return serde_json::from_value(inner.clone())
                .map_err(|e| Error::Config(format!("manifest: {e}")));
        }
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, Some(path))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.reps.is_some() {
            self.reps = o.reps;
        }
        if o.output_path.is_some() {
            self.output_path.clone_from(&o.output_path);
        }
        if o.n_grid.is_some() {
            self.grids.n_grid.clone_from(&o.n_grid);
        }
        if o.epsilon_grid.is_some() {
            self.grids.epsilon_grid.clone_from(&o.epsilon_grid);
        }
        if o.theta.is_some() {
            self.grids.theta = o.theta;
        }
        if let Some(k) = o.kernel {
            self.fkr.kernel = k;
        }
    }

    /// Fills per-suite defaults and validates. `suite` comes from the
    /// subcommand when the file does not name one.
    pub fn resolve(self, suite: Suite, default_output: &str) -> Result<ResolvedConfig> {
        if let Some(s) = self.suite {
            if s != suite {
                return Err(Error::Config(format!(
                    "config declares suite '{}' but '{}' was requested",
                    s.name(),
                    suite.name()
                )));
            }
        }
        let seed = self
            .seed
            .ok_or_else(|| Error::Config("missing field `seed` (no wall-clock default)".into()))?;
        let reps = self.reps.unwrap_or(match suite {
            Suite::Fkr => 200,
            _ => 10_000,
        });
        let n_grid = self.grids.n_grid.unwrap_or_else(|| match suite {
            Suite::Fkr => vec![200, 800, 3200],
            _ => vec![200, 400, 800, 1600, 3200],
        });
        let cfg = ResolvedConfig {
            suite,
            seed,
            reps,
            output_path: self
                .output_path
                .unwrap_or_else(|| default_output.to_string()),
            process: self.process,
            grids: ResolvedGrids {
                n_grid,
                epsilon_grid: self.grids.epsilon_grid.unwrap_or_else(|| vec![0.015, 0.02]),
                theta: self.grids.theta.unwrap_or(0.4),
            },
            mixing: self.mixing,
            concentration: self.concentration,
            fkr: self.fkr,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ResolvedConfig {
    fn validate(&self) -> Result<()> {
        let g = &self.grids;
        if g.n_grid.is_empty() || g.epsilon_grid.is_empty() {
            return Err(Error::Config(
                "grids.n_grid and grids.epsilon_grid must be non-empty".into(),
            ));
        }
        if g.n_grid.iter().any(|n| *n < 3) {
            return Err(Error::Config("grids.n_grid entries must be >= 3".into()));
        }
        if g.epsilon_grid.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Config(
                "grids.epsilon_grid entries must be positive".into(),
            ));
        }
        if !(g.theta > 0.0 && g.theta < 0.5) {
            return Err(Error::Config(format!(
                "grids.theta = {} outside (0, 1/2)",
                g.theta
            )));
        }
        if self.suite.is_monte_carlo() && self.reps < 100 {
            return Err(Error::Config(format!(
                "reps = {} < 100 for a Monte Carlo suite",
                self.reps
            )));
        }
        let m = &self.mixing;
        if !(2..=12).contains(&m.max_alphabet)
            || !(2..=12).contains(&m.max_states)
            || m.decay_lags < 3
        {
            return Err(Error::Config(
                "mixing: max_alphabet and max_states must be in 2..=12, decay_lags >= 3".into(),
            ));
        }
        self.process
            .chain
            .validate()
            .map_err(|e| Error::Config(format!("process.chain: {e}")))?;
        self.process
            .far
            .validate()
            .map_err(|e| Error::Config(format!("process.far: {e}")))?;
        let c = &self.concentration;
        if c.t == 0 || c.t > *g.n_grid.iter().min().expect("non-empty") {
            return Err(Error::Config(
                "concentration.t must lie in 1..=min(n_grid)".into(),
            ));
        }
        if c.laplace_a.is_empty() {
            return Err(Error::Config(
                "concentration.laplace_a must be non-empty".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the resolved config in TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        }))
    }
}

/// Everything a suite produces: named checks plus report tables.
#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckRecord>,
    /// `(file name, CSV contents)`.
    pub tables: Vec<(String, String)>,
}

impl SuiteReport {
    fn check(&mut self, name: impl Into<String>, outcome: CheckOutcome, seed: u64) {
        self.checks.push(CheckRecord {
            check_name: name.into(),
            outcome,
            seed,
        });
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.outcome.holds)
            .map(|c| c.check_name.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.outcome.holds)
    }
}

fn strict(lhs: f64, rhs: f64) -> CheckOutcome {
    CheckOutcome {
        lhs,
        rhs,
        holds: lhs < rhs,
    }
}

pub fn run_suite(cfg: &ResolvedConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    match cfg.suite {
        Suite::Mixing => mixing_checks(cfg, &mut report)?,
        Suite::VerifyAll => {
            mixing_checks(cfg, &mut report)?;
            formula_checks(cfg, &mut report)?;
        }
        Suite::Concentration => concentration_suite(cfg, &mut report)?,
        Suite::Fkr => fkr_suite(cfg, &mut report)?,
    }
    report
        .tables
        .insert(0, ("checks.csv".into(), format_checks(&report.checks)));
    Ok(report)
}

/// Second eigenvalue of a two-state chain.
fn two_state_lambda(c: &FiniteChain) -> f64 {
    c.p(0, 0) + c.p(1, 1) - 1.0
}

fn mixing_checks(cfg: &ResolvedConfig, report: &mut SuiteReport) -> Result<()> {
    let m = &cfg.mixing;
    let seed = cfg.seed;
    let mut rng = stream_rng(seed, Stream::Instances);
    for i in 0..m.joints {
        let rows = rng.random_range(1..=m.max_alphabet);
        let cols = rng.random_range(1..=m.max_alphabet);
        let j = random_joint(&mut rng, rows, cols);
        let h: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        for p in [1.5, 2.0, 3.0, f64::INFINITY] {
            report.check(format!("davydov_p{p}_{i}"), davydov_check(&j, &h, p)?, seed);
        }
        ordering_checks(&j, &format!("{i}"), seed, report)?;
    }
    for i in 0..m.chains {
        let states = rng.random_range(2..=m.max_states);
        let chain = random_chain(&mut rng, states);
        let count = rng.random_range(2..=4);
        let funcs: Vec<Vec<f64>> = (0..count)
            .map(|_| (0..states).map(|_| rng.random_range(0.0..2.0)).collect())
            .collect();
        let mut lags = vec![rng.random_range(0..3usize)];
        for _ in 1..count {
            let last = *lags.last().expect("non-empty");
            lags.push(last + rng.random_range(1..4usize));
        }
        report.check(
            format!("ibragimov_{i}"),
            ibragimov_check(&chain, &funcs, &lags)?,
            seed,
        );
    }

    let reference = FiniteChain::new(&[vec![0.9, 0.1], vec![0.2, 0.8]])?;
    decay_checks(
        &reference,
        m.decay_lags,
        Some(-two_state_lambda(&reference).abs().ln()),
        "reference",
        seed,
        report,
    )?;

    if let Some(path) = &m.chain_file {
        let chain = read_chain(Path::new(path))?;
        let oracle = (chain.states() == 2).then(|| -two_state_lambda(&chain).abs().ln());
        decay_checks(&chain, m.decay_lags, oracle, "file_chain", seed, report)?;
        if chain.states() <= 4 {
            for n in 1..=m.decay_lags {
                let direct = beta_exact(&chain.lag_joint(n));
                let lag = markov_beta_lag(&chain, n)?;
                report.check(
                    format!("file_chain_lag_beta_{n}"),
                    CheckOutcome::new((lag - direct).abs(), 1e-12),
                    seed,
                );
            }
        }
    }
    if let Some(path) = &m.joint_file {
        ordering_checks(&read_joint(Path::new(path))?, "file_joint", seed, report)?;
    }
    Ok(())
}

fn ordering_checks(
    j: &FiniteJointDistribution,
    tag: &str,
    seed: u64,
    report: &mut SuiteReport,
) -> Result<()> {
    let b = beta_exact(j);
    if j.rows() <= 12 && j.cols() <= 12 {
        let a = alpha_exact(j)?;
        report.check(
            format!("alpha_quarter_{tag}"),
            CheckOutcome::new(a, 0.25),
            seed,
        );
        report.check(
            format!("alpha_beta_{tag}"),
            CheckOutcome::new(2.0 * a, b),
            seed,
        );
    }
    report.check(format!("beta_unit_{tag}"), CheckOutcome::new(b, 1.0), seed);
    Ok(())
}

fn decay_checks(
    chain: &FiniteChain,
    max_lag: usize,
    kappa1_oracle: Option<f64>,
    tag: &str,
    seed: u64,
    report: &mut SuiteReport,
) -> Result<()> {
    let lags: Vec<usize> = (1..=max_lag).collect();
    let betas = lags
        .iter()
        .map(|&n| markov_beta_lag(chain, n))
        .collect::<Result<Vec<_>>>()?;
    match fit_geometric_decay(&lags, &betas) {
        Ok(fit) => {
            report.check(
                format!("{tag}_decay_r2"),
                CheckOutcome::new(0.99, fit.r_squared),
                seed,
            );
            if let Some(k) = kappa1_oracle {
                report.check(
                    format!("{tag}_decay_kappa1"),
                    CheckOutcome::new((fit.kappa1 - k).abs(), 0.05 * k),
                    seed,
                );
            }
        }
        Err(_) => report.check(format!("{tag}_decay_fit"), strict(f64::NAN, f64::NAN), seed),
    }
    Ok(())
}

/// Exact checks of the closed-form evaluators.
fn formula_checks(cfg: &ResolvedConfig, report: &mut SuiteReport) -> Result<()> {
    let seed = cfg.seed;
    let mut rng = stream_rng(seed, Stream::Instances);
    rng.set_word_pos(1 << 40);

    let mismatches = (0..1_000_000)
        .filter(|_| {
            let v = rng.random_range(-1e6..1e6) * 10f64.powi(rng.random_range(-6..12));
            let b = 10f64.powf(rng.random_range(-3.0..3.0));
            truncate(v, b).reconstruct() != v
        })
        .count();
    report.check(
        "truncate_exact",
        CheckOutcome::new(mismatches as f64, 0.0),
        seed,
    );

    let est = nadaraya_watson_from_distances(
        Kernel::DownslopeLinear,
        &[0.1, 0.2, 0.9, 1.5, 2.0],
        &[1.0, 2.0, 3.0, 4.0, 5.0],
        1.0,
        1.0,
    )?;
    let psi = est.defined().map_or(f64::NAN, |e| e.psi_hat);
    report.check(
        "nadaraya_watson_hand_example",
        CheckOutcome::new((psi - 8.8 / 4.8).abs(), 1e-12 * 8.8 / 4.8),
        seed,
    );

    let m1 = m_constant(Kernel::DownslopeLinear, |s| s)?;
    report.check(
        "m_constant_tau_linear",
        CheckOutcome::new((m1 - 1.5).abs(), 1e-6),
        seed,
    );
    let m2 = m_constant(Kernel::DownslopeLinear, |s| s * s)?;
    report.check(
        "m_constant_tau_quadratic",
        CheckOutcome::new((m2 - 4.0 / 3.0).abs(), 1e-6),
        seed,
    );

    let base = BoundParams {
        epsilon: 0.3,
        ..BoundParams::default()
    };
    let values = (16..10_000u64)
        .map(|n| corollary_bound(&BoundParams { n, ..base }))
        .collect::<Result<Vec<_>>>()?;
    let increases = values.windows(2).filter(|w| w[1] >= w[0]).count();
    report.check(
        "corollary_strictly_decreasing",
        CheckOutcome::new(increases as f64, 0.0),
        seed,
    );

    let p = BoundParams {
        kappa0: 1.0,
        kappa1: 1.0,
        c: 1.0,
        b: 1.0,
        a: 14.0,
        gamma: max_admissible_gamma(1.0, 1.0, 14.0),
        ..BoundParams::default()
    };
    let floor = 3.0 * (-14.0 / (4.0 * 14f64.ln())).exp() + 1.0;
    report.check(
        "laplace_above_gamma_limit",
        CheckOutcome::new(floor, laplace_bound(&p)?),
        seed,
    );

    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let params = BoundParams {
            a1: rng.random_range(0.1..10.0),
            a2: rng.random_range(0.05..2.0),
            epsilon: rng.random_range(0.05..2.0),
            n: rng.random_range(10..100_000),
            ..BoundParams::default()
        };
        let moments = Moments {
            m_pr: rng.random_range(0.5..20.0),
            m_k: rng.random_range(0.5..200.0),
        };
        let coarse = unbounded_bound(&params, &moments)?.value;
        let fine = unbounded_bound_on_grid(&params, &moments, 10 * TRUNCATION_GRID_POINTS)?.value;
        worst = worst.max((coarse - fine).abs() / fine);
    }
    report.check("unbounded_finer_grid", CheckOutcome::new(worst, 1e-6), seed);
    Ok(())
}

/// `kappa0`, `kappa1` of the chain from the binned beta proxy.
fn mixing_constants(cfg: &ResolvedConfig) -> Result<(f64, f64)> {
    let c = &cfg.concentration;
    let path = simulate_contractive_chain_on(
        &cfg.process.chain,
        c.proxy_steps,
        cfg.seed,
        Stream::Reference,
    )?;
    let betas = binned_beta_proxy(&path, c.proxy_bins, &c.proxy_lags)?;
    let fit = fit_geometric_decay(&c.proxy_lags, &betas)?;
    Ok((fit.kappa0, fit.kappa1))
}

fn concentration_suite(cfg: &ResolvedConfig, report: &mut SuiteReport) -> Result<()> {
    let chain = &cfg.process.chain;
    let c = &cfg.concentration;
    let seed = cfg.seed;
    let f = CenteredFunction::new(c.function, chain, c.pilot_draws, seed)?;
    let b = c.function.bound(chain);

    // One set of replications per n, shared by every epsilon.
    let deviations = cfg
        .grids
        .n_grid
        .iter()
        .map(|&n| deviation_samples(&f, chain, n, c.t, cfg.reps, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut csv = format!("{CONCENTRATION_HEADER}\n");
    for &eps in &cfg.grids.epsilon_grid {
        let tails: Vec<TailEstimate> = cfg
            .grids
            .n_grid
            .iter()
            .zip(&deviations)
            .map(|(&n, d)| TailEstimate::from_deviations(d, n as u64, eps))
            .collect();
        let id = format!("tail_eps{eps}");
        let calibrated = rate_fit(&tails, b, eps)
            .and_then(|fit| Ok((fit, calibrate_corollary_a1(fit.a2, &tails, b, eps)?)));
        let bound_at = |n: u64, fit_a1: Option<(f64, f64)>| -> Result<f64> {
            match fit_a1 {
                Some((a1, a2)) => corollary_bound(&BoundParams {
                    a1,
                    a2,
                    b,
                    epsilon: eps,
                    n,
                    ..BoundParams::default()
                }),
                None => Ok(f64::NAN),
            }
        };
        match &calibrated {
            Ok((fit, a1)) => {
                report.check(
                    format!("rate_slope_positive_eps{eps}"),
                    strict(0.0, fit.a2),
                    seed,
                );
                report.check(
                    format!("rate_r2_eps{eps}"),
                    strict(0.9, fit.r_squared),
                    seed,
                );
                for t in &tails {
                    let bound = bound_at(t.n, Some((*a1, fit.a2)))?;
                    report.check(
                        format!("corollary_dominates_eps{eps}_n{}", t.n),
                        CheckOutcome::new(t.p_hat + t.ci_half_width, bound),
                        seed,
                    );
                }
            }
            Err(_) => report.check(
                format!("rate_fit_eps{eps}"),
                strict(f64::NAN, f64::NAN),
                seed,
            ),
        }
        for t in &tails {
            let bound = bound_at(t.n, calibrated.as_ref().ok().map(|(fit, a1)| (*a1, fit.a2)))?;
            writeln!(
                csv,
                "{id},{},{eps},{b},{},{},{bound},{seed}",
                t.n, t.p_hat, t.ci_half_width
            )
            .unwrap();
        }
    }
    report.tables.push(("concentration.csv".into(), csv));

    laplace_checks(cfg, report)
}

fn laplace_checks(cfg: &ResolvedConfig, report: &mut SuiteReport) -> Result<()> {
    let chain = &cfg.process.chain;
    let c = &cfg.concentration;
    let seed = cfg.seed;
    let (kappa0, kappa1) = mixing_constants(cfg)?;
    let lf = CenteredFunction::new(c.laplace_function, chain, c.pilot_draws, seed)?;
    let b = c.laplace_function.bound(chain);
    let mut calibrated_c = None;
    let mut csv = String::from("A,gamma,kappa0,kappa1,estimate,standard_error,C,bound\n");
    for &a in &c.laplace_a {
        let gamma = max_admissible_gamma(kappa1, b, a);
        let params = BoundParams {
            kappa0,
            kappa1,
            gamma,
            a,
            b,
            ..BoundParams::default()
        };
        let t = c.t.min(a.floor() as usize);
        let est = empirical_laplace(&lf, chain, gamma, a, t, c.laplace_reps, seed)?;
        let target = est.mean + 1.96 * est.standard_error;
        let cc = match calibrated_c {
            Some(v) => v,
            None => {
                let v = calibrate_laplace_constant(&params, target)?;
                calibrated_c = Some(v);
                v
            }
        };
        let bound = laplace_bound(&BoundParams { c: cc, ..params })?;
        report.check(
            format!("laplace_dominates_A{a}"),
            CheckOutcome::new(target, bound),
            seed,
        );
        writeln!(
            csv,
            "{a},{gamma},{kappa0},{kappa1},{},{},{cc},{bound}",
            est.mean, est.standard_error
        )
        .unwrap();
    }
    report.tables.push(("laplace.csv".into(), csv));
    Ok(())
}

pub fn forecast_config(cfg: &ResolvedConfig) -> ForecastConfig {
    ForecastConfig {
        far: cfg.process.far,
        grid_size: cfg.process.grid_size,
        functional: cfg.fkr.functional,
        noise_sd: cfg.fkr.noise_sd,
        kernel: cfg.fkr.kernel,
        theta: cfg.grids.theta,
        reference_size: cfg.fkr.reference_size,
        time_rule: cfg.fkr.time_rule,
    }
}

pub fn format_forecast_rows(rows: &[ForecastRow]) -> String {
    let mut csv = format!("{FKR_HEADER}\n");
    for r in rows {
        writeln!(
            csv,
            "{},0.5,{},{},{},{}",
            r.n, r.forecast_median, r.f_hat_median, r.g_hat_median, r.undefined_fraction
        )
        .unwrap();
        writeln!(
            csv,
            "{},0.9,{},{},{},{}",
            r.n, r.forecast_q90, r.f_hat_q90, r.g_hat_q90, r.undefined_fraction
        )
        .unwrap();
    }
    csv
}

fn fkr_suite(cfg: &ResolvedConfig, report: &mut SuiteReport) -> Result<()> {
    let seed = cfg.seed;
    let mut n_grid = cfg.grids.n_grid.clone();
    n_grid.sort_unstable();
    n_grid.dedup();
    let rows = dynamic_forecast_experiment(&forecast_config(cfg), &n_grid, cfg.reps, seed)?;
    let (first, last) = (rows[0], rows[rows.len() - 1]);
    report.check(
        "forecast_median_decreases",
        strict(last.forecast_median, first.forecast_median),
        seed,
    );
    for w in rows.windows(2) {
        report.check(
            format!("f_hat_median_decreases_n{}_n{}", w[0].n, w[1].n),
            strict(w[1].f_hat_median, w[0].f_hat_median),
            seed,
        );
    }
    for r in &rows {
        report.check(
            format!("undefined_fraction_n{}", r.n),
            strict(r.undefined_fraction, 0.1),
            seed,
        );
    }
    report
        .tables
        .push(("fkr.csv".into(), format_forecast_rows(&rows)));
    let mut diag = String::from("n,bandwidth_median,inverse_small_ball_moment\n");
    for r in &rows {
        writeln!(
            diag,
            "{},{},{}",
            r.n, r.bandwidth_median, r.inverse_small_ball_moment
        )
        .unwrap();
    }
    report.tables.push(("fkr_diagnostics.csv".into(), diag));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ManifestCheck<'a> {
    name: &'a str,
    holds: bool,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    suite: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    timestamp_unix: u64,
    passed: bool,
    failed_checks: Vec<&'a str>,
    checks: Vec<ManifestCheck<'a>>,
    resolved_config: &'a ResolvedConfig,
}

/// Writes report tables and `manifest.json` into the config's output directory.
pub fn write_outputs(cfg: &ResolvedConfig, report: &SuiteReport) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output_path);
    std::fs::create_dir_all(&dir)?;
    for (name, body) in &report.tables {
        std::fs::write(dir.join(name), body)?;
    }
    let manifest = Manifest {
        suite: cfg.suite.name(),
        version: VERSION,
        seed: cfg.seed,
        config_sha256: cfg.hash()?,
        timestamp_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        passed: report.passed(),
        failed_checks: report.failed(),
        checks: report
            .checks
            .iter()
            .map(|c| ManifestCheck {
                name: &c.check_name,
                holds: c.outcome.holds,
            })
            .collect(),
        resolved_config: cfg,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(dir)
}

/// Report kinds understood by [`emit_plotdata`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Concentration,
    Fkr,
}

impl PlotKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "concentration" => Ok(Self::Concentration),
            "fkr" => Ok(Self::Fkr),
            other => Err(Error::Config(format!("unknown report kind '{other}'"))),
        }
    }
}

fn schema_error(msg: impl Into<String>) -> Error {
    Error::Config(format!("schema mismatch: {}", msg.into()))
}

fn parse_field(v: &str, line: usize) -> Result<f64> {
    v.parse()
        .map_err(|_| schema_error(format!("line {line}: '{v}' is not a number")))
}

/// Long-format `(series, x, y, y_lo, y_hi)` rows from a wide report.
pub fn emit_plotdata(report: &str, kind: PlotKind) -> Result<String> {
    let mut lines = report.lines();
    let header = lines.next().unwrap_or("");
    let expected = match kind {
        PlotKind::Concentration => CONCENTRATION_HEADER,
        PlotKind::Fkr => FKR_HEADER,
    };
    if header.trim() != expected {
        return Err(schema_error(format!("expected header '{expected}'")));
    }
    let width = expected.split(',').count();
    let mut out = format!("{PLOT_HEADER}\n");
    let mut fkr: Vec<(f64, f64, [f64; 3])> = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let lno = i + 2;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(schema_error(format!("line {lno}: expected {width} fields")));
        }
        match kind {
            PlotKind::Concentration => {
                let n = parse_field(f[1], lno)?;
                let (eps, p, ci) = (
                    parse_field(f[2], lno)?,
                    parse_field(f[4], lno)?,
                    parse_field(f[5], lno)?,
                );
                if n < 3.0 {
                    return Err(schema_error(format!("line {lno}: n < 3")));
                }
                let x = rate_argument(n as u64, 1.0, 1.0)?;
                writeln!(out, "eps={eps},{x},{p},{},{}", (p - ci).max(0.0), p + ci).unwrap();
            }
            PlotKind::Fkr => {
                let vals = [
                    parse_field(f[2], lno)?,
                    parse_field(f[3], lno)?,
                    parse_field(f[4], lno)?,
                ];
                fkr.push((parse_field(f[0], lno)?, parse_field(f[1], lno)?, vals));
            }
        }
    }
    if kind == PlotKind::Fkr {
        for (s, name) in ["forecast_error", "f_hat_error", "g_hat_error"]
            .iter()
            .enumerate()
        {
            for &(n, _, vals) in fkr.iter().filter(|r| r.1 == 0.5) {
                let hi = fkr
                    .iter()
                    .find(|r| r.0 == n && r.1 == 0.9)
                    .map_or(vals[s], |r| r.2[s]);
                writeln!(out, "{name},{n},{},{},{hi}", vals[s], vals[s]).unwrap();
            }
        }
    }
    Ok(out)
}
