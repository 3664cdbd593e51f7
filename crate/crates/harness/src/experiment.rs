//! Seeded, parallel repetitions of bandit runs and their aggregation.

use std::time::Instant;

use fp_bandits::env::{EnvError, InstanceConstants};
use fp_bandits::estimation::FitStats;
use fp_bandits::rng::{self, stream};
use fp_bandits::verification::{check_epl, EllipticalPotential, VerificationError};
use fp_bandits::{Environment, OracleReport, Policy, PolicyConfig, PolicyError, RegretTrace};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {run_id} of {policy}: {source}")]
    Run {
        policy: String,
        run_id: u64,
        source: RunError,
    },
    #[error("cannot build thread pool: {0}")]
    Threads(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
}

/// Everything one (policy, run) pair produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub policy: String,
    pub run_id: u64,
    /// Cumulative regret after each round.
    pub cum_regret: Vec<f64>,
    pub trace: Option<RegretTrace>,
    pub constants: Option<InstanceConstants>,
    pub epl: OracleReport,
    pub fit_stats: FitStats,
}

impl RunOutcome {
    pub fn final_regret(&self) -> f64 {
        self.cum_regret.last().copied().unwrap_or(0.0)
    }
}

/// Plays one policy on run `run_id`. The instance, the context sequence and
/// the reward noise depend only on `(base_seed, run_id)`, so every policy of
/// an experiment faces the same instance.
pub fn run_single(cfg: &ExperimentConfig, policy_cfg: &PolicyConfig, run_id: u64) -> Result<RunOutcome, RunError> {
    let seed = rng::run_seed(cfg.base_seed, run_id);
    let env_cfg = cfg.env;
    let horizon = env_cfg.horizon;
    let mut env = Environment::generate(env_cfg, stream(seed, rng::INSTANCE_STREAM))?;
    let mut rewards = stream(seed, rng::REWARD_STREAM);
    let mut policy = Policy::new(
        policy_cfg.clone(),
        env_cfg.dim,
        horizon,
        stream(seed, rng::POLICY_STREAM),
    )?;
    let mut potential = EllipticalPotential::new(env_cfg.dim, policy_cfg.lambda)?;
    let mut trace = RegretTrace::new(run_id, policy_cfg.label());
    trace.records.reserve(horizon);

    for _ in 0..horizon {
        let actions = env.next_actions();
        let arm = policy.select(&actions)?;
        let reward = env.step(&actions, arm, &mut rewards)?;
        let regret = env.regret_of(&actions, arm)?;
        let x = actions.get(arm);
        let width = potential.observe(x)?;
        let kappa_term = if cfg.record_diagnostics {
            env.optimal_derivative(&actions)
        } else {
            f64::NAN
        };
        trace.push(arm, regret, width, kappa_term);
        policy.update(x, reward)?;
    }

    let constants = cfg
        .record_diagnostics
        .then(|| env.instance_constants(&trace, policy.estimator().theta_hat()));
    let epl = check_epl(&trace, policy_cfg.lambda, env_cfg.dim);
    Ok(RunOutcome {
        policy: trace.policy.clone(),
        run_id,
        cum_regret: trace.records.iter().map(|r| r.cum_regret).collect(),
        trace: cfg.record_traces.then_some(trace),
        constants,
        epl,
        fit_stats: policy.estimator().stats(),
    })
}

/// Mean and spread of one policy's cumulative regret across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAggregate {
    pub policy: String,
    pub n_runs: u64,
    /// Mean cumulative regret at `t = 1..=T`.
    pub mean: Vec<f64>,
    /// Sample standard deviation (divisor `n - 1`, zero for one run).
    pub std: Vec<f64>,
    /// Final cumulative regret of every run, in run order.
    pub final_regret: Vec<f64>,
}

impl PolicyAggregate {
    pub fn from_runs(policy: String, runs: &[&[f64]]) -> Self {
        let n = runs.len();
        let horizon = runs.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; horizon];
        let mut std = vec![0.0; horizon];
        for t in 0..horizon {
            let m = runs.iter().map(|r| r[t]).sum::<f64>() / n as f64;
            mean[t] = m;
            if n > 1 {
                let ss: f64 = runs.iter().map(|r| (r[t] - m).powi(2)).sum();
                std[t] = (ss / (n - 1) as f64).sqrt();
            }
        }
        Self {
            policy,
            n_runs: n as u64,
            mean,
            std,
            final_regret: runs.iter().map(|r| r.last().copied().unwrap_or(0.0)).collect(),
        }
    }

    pub fn final_mean(&self) -> f64 {
        self.mean.last().copied().unwrap_or(0.0)
    }

    pub fn final_std(&self) -> f64 {
        self.std.last().copied().unwrap_or(0.0)
    }

    /// Standard error of the final mean.
    pub fn final_se(&self) -> f64 {
        self.final_std() / (self.n_runs as f64).sqrt()
    }

    /// Linear-interpolated quantile of the final regrets, `q` in `[0, 1]`.
    pub fn final_quantile(&self, q: f64) -> f64 {
        let mut v = self.final_regret.clone();
        if v.is_empty() {
            return f64::NAN;
        }
        v.sort_by(|a, b| a.total_cmp(b));
        let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    pub horizon: usize,
    pub policies: Vec<PolicyAggregate>,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    pub version: String,
    pub wall_time_secs: f64,
}

impl AggregateResult {
    pub fn policy(&self, label: &str) -> Option<&PolicyAggregate> {
        self.policies.iter().find(|p| p.policy == label)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub aggregate: AggregateResult,
    /// Policy-major, then run order.
    pub runs: Vec<RunOutcome>,
}

impl ExperimentResult {
    pub fn epl_reports(&self) -> impl Iterator<Item = (&str, &OracleReport)> {
        self.runs.iter().map(|r| (r.policy.as_str(), &r.epl))
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.canonical_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs every (policy, run) pair on the current rayon pool. Results are
/// ordered by policy then run id whatever the scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    let jobs: Vec<(usize, u64)> = (0..cfg.policies.len())
        .flat_map(|p| (0..cfg.n_runs).map(move |r| (p, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(p, r)| {
            let pc = &cfg.policies[p];
            run_single(cfg, pc, r).map_err(|source| ExperimentError::Run {
                policy: pc.label(),
                run_id: r,
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = cfg.n_runs as usize;
    let policies = cfg
        .policies
        .iter()
        .enumerate()
        .map(|(p, pc)| {
            let slices: Vec<&[f64]> = runs[p * n..(p + 1) * n]
                .iter()
                .map(|r| r.cum_regret.as_slice())
                .collect();
            PolicyAggregate::from_runs(pc.label(), &slices)
        })
        .collect();
    let aggregate = AggregateResult {
        horizon: cfg.env.horizon,
        policies,
        config_hash: config_hash(cfg),
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        aggregate,
        runs,
    })
}

/// [`run_experiment`] on a dedicated pool of `threads` workers.
pub fn run_experiment_with_threads(
    cfg: &ExperimentConfig,
    threads: usize,
) -> Result<ExperimentResult, ExperimentError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ExperimentError::Threads(e.to_string()))?;
    pool.install(|| run_experiment(cfg))
}
