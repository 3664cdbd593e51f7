//! Synthetic contextual bandit instances and regret accounting.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::glm::{LinkKind, LinkSpec};
use crate::rng::StreamRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Invalid(String),
    #[error("arm {chosen} out of range for {arms} arms")]
    ArmOutOfRange { chosen: usize, arms: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// One arm set drawn at generation and presented every round (`|C| = 1`).
    FixedArmSet,
    /// A fresh arm set every round (`|C| = T`).
    #[default]
    FreshEachRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureNormalization {
    /// `h / max(1, |h|)`: keeps interior points.
    #[default]
    Ball,
    /// `h / |h|`: every arm on the unit sphere.
    Sphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub link: LinkSpec,
    pub dim: usize,
    pub arms: usize,
    pub horizon: usize,
    #[serde(default)]
    pub context_mode: ContextMode,
    /// `S`, the norm of `theta*`.
    pub norm_bound: f64,
    /// Gaussian reward noise scale, linear link only.
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub features: FeatureNormalization,
}

fn default_sigma() -> f64 {
    1.0
}

impl EnvConfig {
    pub fn new(link: LinkSpec, dim: usize, arms: usize, horizon: usize, norm_bound: f64) -> Self {
        Self {
            link,
            dim,
            arms,
            horizon,
            context_mode: ContextMode::FreshEachRound,
            norm_bound,
            noise_sigma: 1.0,
            features: FeatureNormalization::Ball,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Invalid(m.to_string()));
        if self.arms < 2 {
            return bad("arms must be at least 2");
        }
        if self.dim < 1 {
            return bad("dim must be at least 1");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(self.norm_bound > 0.0) || !self.norm_bound.is_finite() {
            return bad("norm_bound must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be nonnegative");
        }
        if self.link.kind == LinkKind::Poisson && self.norm_bound > 1.0 {
            return bad("poisson instances keep logits in [-1, 1]; norm_bound must be <= 1");
        }
        Ok(())
    }
}

/// The feature vectors presented in one round, one per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSet {
    round: usize,
    features: Vec<DVector<f64>>,
}

impl ActionSet {
    pub fn new(round: usize, features: Vec<DVector<f64>>) -> Self {
        Self { round, features }
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, |x| x.len())
    }

    pub fn features(&self) -> &[DVector<f64>] {
        &self.features
    }

    pub fn get(&self, arm: usize) -> &DVector<f64> {
        &self.features[arm]
    }

    fn with_round(&self, round: usize) -> Self {
        Self {
            round,
            features: self.features.clone(),
        }
    }
}

fn gaussian_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| StandardNormal.sample(rng))
}

fn draw_arms<R: Rng + ?Sized>(cfg: &EnvConfig, round: usize, rng: &mut R) -> ActionSet {
    let features = (0..cfg.arms)
        .map(|_| {
            let h = gaussian_vector(cfg.dim, rng);
            let n = h.norm();
            let scale = match cfg.features {
                FeatureNormalization::Ball => n.max(1.0),
                FeatureNormalization::Sphere => n,
            };
            if scale > 0.0 {
                h / scale
            } else {
                h
            }
        })
        .collect();
    ActionSet::new(round, features)
}

/// A generated instance: `theta*` plus the context stream.
#[derive(Debug, Clone)]
pub struct Environment {
    cfg: EnvConfig,
    theta_star: DVector<f64>,
    fixed: Option<ActionSet>,
    contexts: StreamRng,
    contexts_start: StreamRng,
    next_round: usize,
}

impl Environment {
    /// Draws `theta* = S g / |g|` and, for a fixed arm set, the arms. The
    /// remainder of `instance_rng` becomes the context stream.
    pub fn generate(cfg: EnvConfig, mut instance_rng: StreamRng) -> Result<Self, EnvError> {
        cfg.validate()?;
        let mut g = gaussian_vector(cfg.dim, &mut instance_rng);
        while g.norm() == 0.0 {
            g = gaussian_vector(cfg.dim, &mut instance_rng);
        }
        let theta_star = &g * (cfg.norm_bound / g.norm());
        let fixed = match cfg.context_mode {
            ContextMode::FixedArmSet => Some(draw_arms(&cfg, 1, &mut instance_rng)),
            ContextMode::FreshEachRound => None,
        };
        Ok(Self {
            cfg,
            theta_star,
            fixed,
            contexts_start: instance_rng.clone(),
            contexts: instance_rng,
            next_round: 1,
        })
    }

    /// An environment with a given `theta*` and a fixed arm set.
    pub fn with_fixed_arms(cfg: EnvConfig, theta_star: DVector<f64>, arms: Vec<DVector<f64>>) -> Self {
        let rng = crate::rng::stream(0, crate::rng::INSTANCE_STREAM);
        Self {
            cfg: EnvConfig {
                context_mode: ContextMode::FixedArmSet,
                arms: arms.len(),
                ..cfg
            },
            theta_star,
            fixed: Some(ActionSet::new(1, arms)),
            contexts_start: rng.clone(),
            contexts: rng,
            next_round: 1,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    /// The arm set of the next round. Must be called once per round, in
    /// order; the sequence depends only on the instance stream.
    pub fn next_actions(&mut self) -> ActionSet {
        let round = self.next_round;
        self.next_round += 1;
        match &self.fixed {
            Some(a) => a.with_round(round),
            None => draw_arms(&self.cfg, round, &mut self.contexts),
        }
    }

    /// `mu(x^T theta*)`.
    pub fn expected_reward(&self, x: &DVector<f64>) -> f64 {
        self.cfg.link.mu(x.dot(&self.theta_star))
    }

    /// Index of `argmax_x mu(x^T theta*)`, lowest index on ties.
    pub fn optimal_arm(&self, actions: &ActionSet) -> usize {
        argmax(actions.features().iter().map(|x| self.expected_reward(x)))
    }

    /// Samples the reward of `chosen`.
    pub fn step<R: Rng + ?Sized>(&self, actions: &ActionSet, chosen: usize, rng: &mut R) -> Result<f64, EnvError> {
        check_arm(actions, chosen)?;
        let z = actions.get(chosen).dot(&self.theta_star);
        Ok(self.cfg.link.sample_reward(z, self.cfg.noise_sigma, rng))
    }

    /// `mu(x*^T theta*) - mu(x_chosen^T theta*)`.
    pub fn regret_of(&self, actions: &ActionSet, chosen: usize) -> Result<f64, EnvError> {
        check_arm(actions, chosen)?;
        let best = self.expected_reward(actions.get(self.optimal_arm(actions)));
        Ok(best - self.expected_reward(actions.get(chosen)))
    }

    /// `mu'(x*^T theta*)` at the optimal arm of `actions`.
    pub fn optimal_derivative(&self, actions: &ActionSet) -> f64 {
        let x = actions.get(self.optimal_arm(actions));
        self.cfg.link.mu_dot_exact(x.dot(&self.theta_star))
    }

    /// Empirical `kappa*` (mean of the optimal-arm derivatives recorded in
    /// `trace`) and a lower-bound proxy for `kappa`: the minimum derivative
    /// over every presented arm at `theta*` and at `theta_hat`. The context
    /// stream is replayed from its start for the latter.
    pub fn instance_constants(&self, trace: &RegretTrace, theta_hat: &DVector<f64>) -> InstanceConstants {
        let kappa_star = if trace.records.is_empty() {
            f64::NAN
        } else {
            trace.records.iter().map(|r| r.kappa_star_term).sum::<f64>() / trace.records.len() as f64
        };
        let link = self.cfg.link;
        let mut replay = Self {
            contexts: self.contexts_start.clone(),
            next_round: 1,
            ..self.clone()
        };
        let rounds = trace.records.len().max(1);
        let mut kappa = f64::INFINITY;
        for _ in 0..rounds {
            let actions = replay.next_actions();
            for x in actions.features() {
                for theta in [&self.theta_star, theta_hat] {
                    kappa = kappa.min(link.mu_dot_exact(x.dot(theta)));
                }
            }
            if self.fixed.is_some() {
                break;
            }
        }
        InstanceConstants { kappa_star, kappa }
    }
}

fn check_arm(actions: &ActionSet, chosen: usize) -> Result<(), EnvError> {
    if chosen >= actions.len() {
        return Err(EnvError::ArmOutOfRange {
            chosen,
            arms: actions.len(),
        });
    }
    Ok(())
}

/// Index of the largest value, lowest index on ties; NaN never wins.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceConstants {
    pub kappa_star: f64,
    pub kappa: f64,
}

/// One round of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub chosen: usize,
    pub inst_regret: f64,
    pub cum_regret: f64,
    /// `|x_t|_{V_t^{-1}}` with `V_t` the vanilla Gram of the chosen arms.
    pub width: f64,
    /// `mu'(x_{t*}^T theta*)`.
    pub kappa_star_term: f64,
    /// Running `sum min(1, |x_tau|^2_{V_tau^{-1}})`.
    pub epl_sum: f64,
}

/// Per-round regret of one policy on one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretTrace {
    pub run_id: u64,
    pub policy: String,
    pub records: Vec<TraceRecord>,
}

impl RegretTrace {
    pub fn new(run_id: u64, policy: impl Into<String>) -> Self {
        Self {
            run_id,
            policy: policy.into(),
            records: Vec::new(),
        }
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    /// Appends a round; `width` is `|x_t|_{V_t^{-1}}`.
    pub fn push(&mut self, chosen: usize, inst_regret: f64, width: f64, kappa_star_term: f64) {
        let (cum, epl) = self.records.last().map_or((0.0, 0.0), |r| (r.cum_regret, r.epl_sum));
        self.records.push(TraceRecord {
            t: self.records.len() + 1,
            chosen,
            inst_regret,
            cum_regret: cum + inst_regret,
            width,
            kappa_star_term,
            epl_sum: epl + (width * width).min(1.0),
        });
    }
}
