//! Monte-Carlo and exact oracles for the probabilistic claims the algorithms
//! rest on. Nothing here depends on the policies, so a policy bug cannot hide
//! an oracle bug.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::env::{ActionSet, EnvConfig, EnvError, Environment, RegretTrace};
use crate::estimation::{concentration_multiplier, EstimationError, EstimatorState};
use crate::glm::LinkSpec;
use crate::linalg::{inv_sqrt, LinalgError, SpdFactor, SymMatrix};
use crate::perturbation::{draw_zeta, perturb_features, score_distribution_params, PerturbationScheme};
use crate::rng::{self, stream, StreamRng};

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("unknown check `{0}`")]
    UnknownCheck(String),
    #[error("invalid oracle input: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// Pass when `statistic >= threshold`.
    AtLeast,
    /// Pass when `statistic <= threshold`.
    AtMost,
    /// Pass when `statistic < threshold`.
    Below,
}

impl Comparison {
    pub fn holds(self, statistic: f64, threshold: f64) -> bool {
        match self {
            Comparison::AtLeast => statistic >= threshold,
            Comparison::AtMost => statistic <= threshold,
            Comparison::Below => statistic < threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub check: String,
    pub statistic: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub pass: bool,
    pub n_samples: u64,
    pub seed: u64,
}

impl OracleReport {
    pub fn new(
        check: impl Into<String>,
        statistic: f64,
        threshold: f64,
        comparison: Comparison,
        n: u64,
        seed: u64,
    ) -> Self {
        Self {
            check: check.into(),
            statistic,
            threshold,
            comparison,
            pass: comparison.holds(statistic, threshold),
            n_samples: n,
            seed,
        }
    }
}

/// Binomial standard error `sqrt(p (1 - p) / n)`.
pub fn binomial_se(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Uniformly random unit vector.
pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let g: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let n = g.norm();
        if n > 0.0 {
            return g / n;
        }
    }
}

fn oracle_rng(seed: u64, check: &str) -> StreamRng {
    stream(seed, &format!("verify/{check}"))
}

/// Fraction of `n` draws with `u^T zeta >= 1`.
pub fn tail_frequency<R: Rng + ?Sized>(scheme: &PerturbationScheme, u: &DVector<f64>, n: u64, rng: &mut R) -> f64 {
    let hits = (0..n).filter(|_| draw_zeta(scheme, u.len(), rng).dot(u) >= 1.0).count();
    hits as f64 / n as f64
}

/// Estimates `P(u^T zeta >= 1)` along a random unit `u` and compares it with
/// the scheme's anti-concentration constant minus three standard errors.
pub fn check_anti_concentration(scheme: &PerturbationScheme, dim: usize, n_samples: u64, seed: u64) -> OracleReport {
    let mut rng = oracle_rng(seed, "anti_concentration");
    let u = random_unit(dim, &mut rng);
    let est = tail_frequency(scheme, &u, n_samples, &mut rng);
    let p = scheme.anti_concentration_p();
    let threshold = p - 3.0 * binomial_se(p, n_samples);
    OracleReport::new(
        "anti_concentration",
        est,
        threshold,
        Comparison::AtLeast,
        n_samples,
        seed,
    )
}

/// Fraction of `n` draws with `|u^T zeta| <= radius`.
pub fn coverage_frequency<R: Rng + ?Sized>(
    scheme: &PerturbationScheme,
    u: &DVector<f64>,
    radius: f64,
    n: u64,
    rng: &mut R,
) -> f64 {
    let hits = (0..n)
        .filter(|_| draw_zeta(scheme, u.len(), rng).dot(u).abs() <= radius)
        .count();
    hits as f64 / n as f64
}

/// Estimates `P(|u^T zeta| <= sqrt(c log(c'/delta)))`; passes when it is at
/// least `1 - delta` minus three standard errors.
pub fn check_concentration(
    scheme: &PerturbationScheme,
    dim: usize,
    delta: f64,
    n_samples: u64,
    seed: u64,
) -> Result<OracleReport, VerificationError> {
    let (c, c_prime) = scheme.concentration_constants();
    let radius = concentration_multiplier(c, c_prime, delta)?;
    let mut rng = oracle_rng(seed, "concentration");
    let u = random_unit(dim, &mut rng);
    let est = coverage_frequency(scheme, &u, radius, n_samples, &mut rng);
    let threshold = 1.0 - delta - 3.0 * binomial_se(delta, n_samples);
    Ok(OracleReport::new(
        format!("concentration(delta={delta})"),
        est,
        threshold,
        Comparison::AtLeast,
        n_samples,
        seed,
    ))
}

/// `2 d log(1 + T / (d lambda))`.
pub fn epl_bound(dim: usize, horizon: usize, lambda: f64) -> f64 {
    let d = dim as f64;
    2.0 * d * (1.0 + horizon as f64 / (d * lambda)).ln()
}

/// `sum_t min(1, |x_t|^2_{V_t^{-1}}) <= 2 d log(1 + T/(d lambda))`, no
/// tolerance.
pub fn check_epl(trace: &RegretTrace, lambda: f64, dim: usize) -> OracleReport {
    let horizon = trace.records.len();
    let sum = trace.records.last().map_or(0.0, |r| r.epl_sum);
    OracleReport::new(
        "epl",
        sum,
        epl_bound(dim, horizon, lambda),
        Comparison::AtMost,
        horizon as u64,
        trace.run_id,
    )
}

/// Tracks `V_t = lambda I + sum x_tau x_tau^T` over the chosen arms of a run
/// and reports `|x_t|_{V_t^{-1}}` before each update.
#[derive(Debug, Clone)]
pub struct EllipticalPotential {
    v: SymMatrix,
    factor: SpdFactor,
    sum: f64,
}

impl EllipticalPotential {
    pub fn new(dim: usize, lambda: f64) -> Result<Self, VerificationError> {
        if !(lambda > 0.0) {
            return Err(VerificationError::Invalid(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        let v = SymMatrix::scaled_identity(dim, lambda);
        let factor = v.factor()?;
        Ok(Self { v, factor, sum: 0.0 })
    }

    /// Returns `|x|_{V^{-1}}` and then adds `x x^T` to `V`.
    pub fn observe(&mut self, x: &DVector<f64>) -> Result<f64, VerificationError> {
        let w = self.factor.inv_norm(x.as_slice())?;
        self.sum += (w * w).min(1.0);
        self.v.add_outer(x, 1.0);
        self.factor = self.v.factor()?;
        Ok(w)
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `samples` and
/// `N(mean, std^2)`.
pub fn ks_distance_normal(samples: &mut [f64], mean: f64, std: f64) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let normal = Normal::new(mean, std).expect("positive std");
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let f = normal.cdf(s);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// `n` feature-perturbed scores `x_tilde^T theta_hat` of a frozen state.
pub fn fp_score_samples<R: Rng + ?Sized>(
    x: &DVector<f64>,
    state: &EstimatorState,
    c_t: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>, VerificationError> {
    let actions = ActionSet::new(state.t(), vec![x.clone()]);
    let scheme = PerturbationScheme::gaussian();
    (0..n)
        .map(|_| {
            let xt = perturb_features(&actions, state, c_t, &scheme, rng)?;
            Ok(xt[0].dot(state.theta_hat()))
        })
        .collect()
}

/// `n` Thompson scores `x^T (theta_hat + c_t G^{-1/2} zeta)`.
pub fn ts_score_samples<R: Rng + ?Sized>(
    x: &DVector<f64>,
    state: &EstimatorState,
    c_t: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>, VerificationError> {
    let root = inv_sqrt(state.h_hat())?;
    // x^T G^{-1/2} zeta = (G^{-1/2} x)^T zeta
    let dir = root.mul_vec(x) * c_t;
    let mean = x.dot(state.theta_hat());
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_fn(x.len(), |_, _| StandardNormal.sample(rng));
            mean + dir.dot(&z)
        })
        .collect())
}

/// KS distance of the FP and TS score samples from the closed-form
/// Gaussian; one report per method. With `c_t = 0` every sample must equal
/// the mean exactly.
pub fn check_score_marginal(
    x: &DVector<f64>,
    state: &EstimatorState,
    c_t: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<OracleReport>, VerificationError> {
    if state.link().kind != crate::glm::LinkKind::Linear {
        return Err(VerificationError::Invalid(
            "score marginal check needs the linear link".into(),
        ));
    }
    let (mean, std) = score_distribution_params(x, state, c_t)?;
    let mut rng = oracle_rng(seed, "score_marginal");
    let mut fp = fp_score_samples(x, state, c_t, n_samples, &mut rng)?;
    let mut ts = ts_score_samples(x, state, c_t, n_samples, &mut rng)?;
    let n = n_samples as u64;
    let mut reports = Vec::new();
    for (name, samples) in [("score_marginal_fp", &mut fp), ("score_marginal_ts", &mut ts)] {
        let report = if std == 0.0 {
            let dev = samples.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max);
            OracleReport::new(name, dev, 0.0, Comparison::AtMost, n, seed)
        } else {
            let ks = ks_distance_normal(samples, mean, std);
            OracleReport::new(name, ks, 0.01, Comparison::Below, n, seed)
        };
        reports.push(report);
    }
    Ok(reports)
}

/// Instance for [`check_beta_coverage`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageConfig {
    pub env: EnvConfig,
    pub lambda: f64,
    pub delta: f64,
}

impl CoverageConfig {
    /// Linear, `d = 2`, `K = 10`, `T = 500`, `S = 1`, `lambda = 1`, `delta = 0.1`.
    pub fn linear_default() -> Self {
        Self {
            env: EnvConfig::new(LinkSpec::linear(), 2, 10, 500, 1.0),
            lambda: 1.0,
            delta: 0.1,
        }
    }
}

/// `|theta_hat_T - theta*|_{H_hat_T}` and `beta_T(delta)` for one run of
/// uniform logging.
pub fn coverage_run(cfg: &CoverageConfig, run_seed: u64) -> Result<(f64, f64), VerificationError> {
    let mut env = Environment::generate(cfg.env, stream(run_seed, rng::INSTANCE_STREAM))?;
    let mut logging = stream(run_seed, rng::POLICY_STREAM);
    let mut rewards = stream(run_seed, rng::REWARD_STREAM);
    let mut est = EstimatorState::new(cfg.env.link, cfg.env.dim, cfg.lambda)?;
    for _ in 0..cfg.env.horizon {
        let actions = env.next_actions();
        let arm = logging.random_range(0..actions.len());
        let r = env.step(&actions, arm, &mut rewards)?;
        est.push(actions.get(arm), r)?;
    }
    match est.refit() {
        Ok(_) | Err(EstimationError::NoConvergence { .. }) => {}
        Err(e) => return Err(e.into()),
    }
    let diff = est.theta_hat() - env.theta_star();
    let dist = diff.dot(&est.h_hat().mul_vec(&diff)).max(0.0).sqrt();
    let beta = est.confidence(cfg.delta, cfg.env.horizon)?.beta()?;
    Ok((dist, beta))
}

/// Fraction of `n_runs` histories with `|theta_hat_T - theta*|_{H_hat_T} >
/// beta_T(delta)`; passes when at most `delta`.
pub fn check_beta_coverage(cfg: &CoverageConfig, n_runs: u64, seed: u64) -> Result<OracleReport, VerificationError> {
    let mut exceed = 0u64;
    for run in 0..n_runs {
        let (dist, beta) = coverage_run(cfg, rng::run_seed(seed, run))?;
        if dist > beta {
            exceed += 1;
        }
    }
    Ok(OracleReport::new(
        "beta_coverage",
        exceed as f64 / n_runs.max(1) as f64,
        cfg.delta,
        Comparison::AtMost,
        n_runs,
        seed,
    ))
}

/// Names accepted by [`run_check`].
pub const CHECK_NAMES: [&str; 6] = [
    "anti_concentration",
    "anti_concentration_ball",
    "concentration",
    "score_marginal",
    "epl",
    "beta_coverage",
];

/// A frozen linear estimator for the score-marginal check: `d = 3`,
/// `lambda = 1`, 20 random observations.
pub fn frozen_linear_state(seed: u64) -> Result<(DVector<f64>, EstimatorState), VerificationError> {
    let mut rng = oracle_rng(seed, "frozen_state");
    let mut est = EstimatorState::new(LinkSpec::linear(), 3, 1.0)?;
    let theta = DVector::from_column_slice(&[0.6, -0.3, 0.2]);
    for _ in 0..20 {
        let x = random_unit(3, &mut rng);
        let noise: f64 = StandardNormal.sample(&mut rng);
        est.push(&x, x.dot(&theta) + noise)?;
    }
    est.refit()?;
    Ok((random_unit(3, &mut rng), est))
}

/// EPL over `runs` uniform-logging runs of a linear instance with `d = 5`,
/// `K = 20`, `T = 2000`, `lambda = 1e-4`: one report per run.
pub fn epl_suite(runs: u64, seed: u64) -> Result<Vec<OracleReport>, VerificationError> {
    let (dim, horizon, lambda) = (5, 2000, 1e-4);
    let cfg = EnvConfig::new(LinkSpec::linear(), dim, 20, horizon, 1.0);
    (0..runs)
        .map(|run| {
            let s = rng::run_seed(seed, run);
            let mut env = Environment::generate(cfg, stream(s, rng::INSTANCE_STREAM))?;
            let mut logging = stream(s, rng::POLICY_STREAM);
            let mut tracker = EllipticalPotential::new(dim, lambda)?;
            let mut trace = RegretTrace::new(run, "uniform");
            for _ in 0..horizon {
                let actions = env.next_actions();
                let arm = logging.random_range(0..actions.len());
                let w = tracker.observe(actions.get(arm))?;
                trace.push(arm, env.regret_of(&actions, arm)?, w, 1.0);
            }
            Ok(check_epl(&trace, lambda, dim))
        })
        .collect()
}

/// Runs one named check at its reference size.
pub fn run_check(name: &str, seed: u64) -> Result<Vec<OracleReport>, VerificationError> {
    let gaussian = PerturbationScheme::gaussian();
    Ok(match name {
        "anti_concentration" => vec![check_anti_concentration(&gaussian, 2, 1_000_000, seed)],
        "anti_concentration_ball" => vec![check_anti_concentration(
            &PerturbationScheme::uniform_ball(),
            2,
            1_000_000,
            seed,
        )],
        "concentration" => vec![
            check_concentration(&gaussian, 2, 0.1, 1_000_000, seed)?,
            check_concentration(&gaussian, 2, 0.01, 1_000_000, seed)?,
        ],
        "score_marginal" => {
            let (x, state) = frozen_linear_state(seed)?;
            check_score_marginal(&x, &state, 1.0, 100_000, seed)?
        }
        "epl" => epl_suite(5, seed)?,
        "beta_coverage" => vec![check_beta_coverage(&CoverageConfig::linear_default(), 200, seed)?],
        other => return Err(VerificationError::UnknownCheck(other.to_string())),
    })
}
