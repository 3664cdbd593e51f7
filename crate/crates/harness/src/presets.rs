//! Built-in replication presets.
//!
//! | preset | link | d | K | T | S | runs | policies |
//! |---|---|---|---|---|---|---|---|
//! | `linear-fig2` | linear | 20 (desk 10) | 100 (desk 50) | 20000 (desk 5000) | 2 | 100 (desk 50) | all six |
//! | `logistic-fig2` | logistic, floor 0.25 | 10 | 100 (desk 50) | 10000 (desk 5000) | 4 | 100 (desk 50) | all six |
//! | `regret-vs-d-fig3b` | linear | 5, 10, 20 | 50 | 20000 (desk 5000) | 2 | 100 (desk 50) | FP, TS |
//!
//! Every preset uses a fresh arm set per round, `lambda = 1e-4`,
//! `delta = 1/T`, `c_t = 1` for the randomized rules, `beta_t(delta)` for
//! UCB, `epsilon = 0.05` with the `sqrt(T/t)` schedule, and PHE noise scale 1.
//! Logistic policies clip `theta_hat` to `|theta| <= 4`.

use fp_bandits::{Algorithm, CtMode, EnvConfig, LinkSpec, PolicyConfig};

use crate::config::ExperimentConfig;

pub const PRESET_NAMES: [&str; 3] = ["linear-fig2", "logistic-fig2", "regret-vs-d-fig3b"];

pub const LAMBDA: f64 = 1e-4;

/// One experiment of a preset; `tag` names its output subdirectory (empty
/// for single-experiment presets).
#[derive(Debug, Clone, PartialEq)]
pub struct PresetRun {
    pub tag: String,
    pub config: ExperimentConfig,
}

fn policy(alg: Algorithm, link: LinkSpec, name: &str) -> PolicyConfig {
    let base = PolicyConfig::new(alg, link).named(name).with_lambda(LAMBDA);
    match alg {
        Algorithm::Ucb => base.with_c_t(CtMode::Theory),
        _ => base.with_c_t(CtMode::Fixed(1.0)),
    }
}

pub fn linear_policies() -> Vec<PolicyConfig> {
    let l = LinkSpec::linear();
    vec![
        policy(Algorithm::Fp, l, "lin_fp"),
        policy(Algorithm::Ts, l, "lin_ts"),
        policy(Algorithm::Phe, l, "lin_phe"),
        policy(Algorithm::RandUcb, l, "rand_lin_ucb"),
        policy(Algorithm::Ucb, l, "lin_ucb"),
        policy(Algorithm::EpsGreedy, l, "eps_greedy"),
    ]
}

pub fn logistic_link() -> LinkSpec {
    LinkSpec::logistic().with_derivative_floor(0.25)
}

pub fn logistic_policies(bound: f64) -> Vec<PolicyConfig> {
    let l = logistic_link();
    [
        (Algorithm::Fp, "glm_fp"),
        (Algorithm::Ts, "glm_ts"),
        (Algorithm::Phe, "glm_phe"),
        (Algorithm::RandUcb, "rand_ucb_glm"),
        (Algorithm::Ucb, "glm_ucb"),
        (Algorithm::EpsGreedy, "eps_greedy"),
    ]
    .into_iter()
    .map(|(a, n)| policy(a, l, n).with_theta_bound(bound))
    .collect()
}

pub fn linear_fig2(desk: bool) -> ExperimentConfig {
    let (d, k, t, runs) = if desk {
        (10, 50, 5_000, 50)
    } else {
        (20, 100, 20_000, 100)
    };
    let env = EnvConfig::new(LinkSpec::linear(), d, k, t, 2.0);
    ExperimentConfig::new(env, linear_policies(), runs, 0)
}

pub fn logistic_fig2(desk: bool) -> ExperimentConfig {
    let (k, t, runs) = if desk { (50, 5_000, 50) } else { (100, 10_000, 100) };
    let env = EnvConfig::new(logistic_link(), 10, k, t, 4.0);
    ExperimentConfig::new(env, logistic_policies(4.0), runs, 0)
}

pub const FIG3B_DIMS: [usize; 3] = [5, 10, 20];

pub fn regret_vs_d(dim: usize, desk: bool) -> ExperimentConfig {
    let (t, runs) = if desk { (5_000, 50) } else { (20_000, 100) };
    let env = EnvConfig::new(LinkSpec::linear(), dim, 50, t, 2.0);
    let l = LinkSpec::linear();
    let policies = vec![policy(Algorithm::Fp, l, "lin_fp"), policy(Algorithm::Ts, l, "lin_ts")];
    let mut cfg = ExperimentConfig::new(env, policies, runs, 0);
    cfg.record_traces = false;
    cfg
}

/// The experiments of preset `name`, or `None` for an unknown name.
pub fn preset(name: &str, desk: bool) -> Option<Vec<PresetRun>> {
    let single = |config| {
        vec![PresetRun {
            tag: String::new(),
            config,
        }]
    };
    Some(match name {
        "linear-fig2" => single(linear_fig2(desk)),
        "logistic-fig2" => single(logistic_fig2(desk)),
        "regret-vs-d-fig3b" => FIG3B_DIMS
            .iter()
            .map(|&d| PresetRun {
                tag: format!("d{d}"),
                config: regret_vs_d(d, desk),
            })
            .collect(),
        _ => return None,
    })
}
