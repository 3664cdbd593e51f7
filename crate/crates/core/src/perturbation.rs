//! Perturbing distributions for feature-level exploration.
//!
//! A distribution `D` is usable when, for every unit vector `u`,
//!
//! * `P(|u^T zeta| <= sqrt(c log(c'/delta))) >= 1 - delta` (concentration), and
//! * `P(u^T zeta >= 1) >= p` (anti-concentration).
//!
//! The standard Gaussian satisfies both with `c = c' = 2` and
//! `p = 1/(4 sqrt(e pi))`. The uniform distribution on the ball of radius
//! `sqrt(d)` has `p = 1/(16 sqrt(3 pi))`; its `(2, 2)` pair is supported by
//! simulation rather than a closed-form bound.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::ActionSet;
use crate::estimation::{EstimationError, EstimatorState, THETA_NORM_FLOOR};
use crate::linalg::SpdFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationDistribution {
    #[default]
    GaussianStd,
    UniformBall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// One `zeta_t` shared by every arm of the round.
    #[default]
    Coupled,
    /// Independent `zeta_{t,i}` per arm. Ablation only.
    Uncoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PerturbationScheme {
    #[serde(default)]
    pub distribution: PerturbationDistribution,
    #[serde(default)]
    pub coupling: Coupling,
}

impl PerturbationScheme {
    pub fn gaussian() -> Self {
        Self::default()
    }

    pub fn uniform_ball() -> Self {
        Self {
            distribution: PerturbationDistribution::UniformBall,
            coupling: Coupling::Coupled,
        }
    }

    pub fn uncoupled(mut self) -> Self {
        self.coupling = Coupling::Uncoupled;
        self
    }

    /// The concentration constants `(c, c')`.
    pub fn concentration_constants(&self) -> (f64, f64) {
        (2.0, 2.0)
    }

    /// Anti-concentration probability `p`.
    pub fn anti_concentration_p(&self) -> f64 {
        use std::f64::consts::{E, PI};
        match self.distribution {
            PerturbationDistribution::GaussianStd => 1.0 / (4.0 * (E * PI).sqrt()),
            PerturbationDistribution::UniformBall => 1.0 / (16.0 * (3.0 * PI).sqrt()),
        }
    }

    pub fn draw_zeta<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> DVector<f64> {
        draw_zeta(self, dim, rng)
    }
}

/// One perturbation vector. Gaussian: `N(0, I_d)`. Uniform ball: a Gaussian
/// direction scaled to radius `sqrt(d) U^{1/d}`.
pub fn draw_zeta<R: Rng + ?Sized>(scheme: &PerturbationScheme, dim: usize, rng: &mut R) -> DVector<f64> {
    let g = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
    match scheme.distribution {
        PerturbationDistribution::GaussianStd => g,
        PerturbationDistribution::UniformBall => {
            let n = g.norm();
            if n == 0.0 {
                return g;
            }
            let u: f64 = rng.random();
            let radius = (dim as f64).sqrt() * u.powf(1.0 / dim as f64);
            g * (radius / n)
        }
    }
}

/// The draws of one round: one shared vector, or one per arm.
#[derive(Debug, Clone, PartialEq)]
pub enum ZetaDraw {
    Shared(DVector<f64>),
    PerArm(Vec<DVector<f64>>),
}

impl ZetaDraw {
    pub fn sample<R: Rng + ?Sized>(scheme: &PerturbationScheme, dim: usize, arms: usize, rng: &mut R) -> Self {
        match scheme.coupling {
            Coupling::Coupled => ZetaDraw::Shared(draw_zeta(scheme, dim, rng)),
            Coupling::Uncoupled => ZetaDraw::PerArm((0..arms).map(|_| draw_zeta(scheme, dim, rng)).collect()),
        }
    }

    fn get(&self, arm: usize) -> &DVector<f64> {
        match self {
            ZetaDraw::Shared(z) => z,
            ZetaDraw::PerArm(zs) => &zs[arm],
        }
    }
}

/// `x_i + c_t |x_i|_{G^{-1}} / max(|theta|, 1e-6) * zeta_i` for every arm.
pub fn perturb_with(
    features: &[DVector<f64>],
    gram: &SpdFactor,
    theta: &DVector<f64>,
    c_t: f64,
    zeta: &ZetaDraw,
) -> Result<Vec<DVector<f64>>, EstimationError> {
    let norm = theta.norm().max(THETA_NORM_FLOOR);
    features
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let scale = c_t * gram.inv_norm(x.as_slice())? / norm;
            let mut out = x.clone();
            out.axpy(scale, zeta.get(i), 1.0);
            Ok(out)
        })
        .collect()
}

/// Perturbs every arm of `actions` around the estimator's `theta_hat`, with
/// widths measured in `H_hat^{-1}`.
pub fn perturb_features<R: Rng + ?Sized>(
    actions: &ActionSet,
    state: &EstimatorState,
    c_t: f64,
    scheme: &PerturbationScheme,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>, EstimationError> {
    let zeta = ZetaDraw::sample(scheme, state.dim(), actions.len(), rng);
    perturb_with(actions.features(), state.gram_factor(), state.theta_hat(), c_t, &zeta)
}

/// Mean and standard deviation of the Gaussian score `x^T theta_hat +
/// c_t |x|_{G^{-1}} z`, with `G = V` for the linear link and `H_hat` otherwise.
pub fn score_distribution_params(
    x: &DVector<f64>,
    state: &EstimatorState,
    c_t: f64,
) -> Result<(f64, f64), EstimationError> {
    let mean = x.dot(state.theta_hat());
    let std = c_t * state.gram_factor().inv_norm(x.as_slice())?;
    Ok((mean, std))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::LinkSpec;
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    fn state_with(theta: &[f64], link: LinkSpec) -> EstimatorState {
        // a single observation along e_1 then overwrite theta through a fit
        let d = theta.len();
        let mut s = EstimatorState::new(link, d, 1.0).unwrap();
        let target = DVector::from_column_slice(theta);
        // push x = theta/|theta| with reward chosen so the ridge fit lands on theta
        if target.norm() > 0.0 {
            let x = &target / target.norm();
            // ridge: theta = (I + x x^T)^{-1} x r = x r / 2
            s.push(&x, 2.0 * target.norm()).unwrap();
            s.refit().unwrap();
        }
        s
    }

    #[test]
    fn constants() {
        assert_abs_diff_eq!(
            PerturbationScheme::gaussian().anti_concentration_p(),
            0.085_549_570_078_054_13,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            PerturbationScheme::uniform_ball().anti_concentration_p(),
            0.020_358_437_995_954_997,
            epsilon = 1e-15
        );
        assert_eq!(PerturbationScheme::gaussian().concentration_constants(), (2.0, 2.0));
    }

    #[test]
    fn gaussian_coordinates_have_unit_variance() {
        let mut rng = stream(5, "zeta");
        let s = PerturbationScheme::gaussian();
        let n = 100_000;
        let d = 3;
        let mut sums = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for _ in 0..n {
            let z = s.draw_zeta(d, &mut rng);
            for i in 0..d {
                sums[i] += z[i];
                sq[i] += z[i] * z[i];
            }
        }
        for i in 0..d {
            let m = sums[i] / n as f64;
            let var = sq[i] / n as f64 - m * m;
            assert!((0.98..=1.02).contains(&var), "var {var}");
        }
    }

    #[test]
    fn uniform_ball_respects_support() {
        let mut rng = stream(6, "zeta");
        let s = PerturbationScheme::uniform_ball();
        for d in [1, 2, 5, 20] {
            for _ in 0..10_000 {
                assert!(s.draw_zeta(d, &mut rng).norm() <= (d as f64).sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn coupled_scheme_draws_one_vector_per_round() {
        let mut a = stream(8, "zeta");
        let mut b = stream(8, "zeta");
        let draw = ZetaDraw::sample(&PerturbationScheme::gaussian(), 4, 50, &mut a);
        let single = draw_zeta(&PerturbationScheme::gaussian(), 4, &mut b);
        assert_eq!(draw, ZetaDraw::Shared(single));
        // both streams consumed the same amount
        assert_eq!(rand::RngCore::next_u64(&mut a), rand::RngCore::next_u64(&mut b));

        let per_arm = ZetaDraw::sample(&PerturbationScheme::gaussian().uncoupled(), 4, 7, &mut a);
        assert!(matches!(per_arm, ZetaDraw::PerArm(ref v) if v.len() == 7));
    }

    #[test]
    fn zero_scale_or_zero_noise_leaves_features() {
        let s = state_with(&[0.3, -0.2], LinkSpec::linear());
        let actions = ActionSet::new(
            1,
            vec![
                DVector::from_column_slice(&[0.5, 0.1]),
                DVector::from_column_slice(&[-0.2, 0.9]),
            ],
        );
        let mut rng = stream(1, "p");
        let out = perturb_features(&actions, &s, 0.0, &PerturbationScheme::gaussian(), &mut rng).unwrap();
        assert_eq!(out, actions.features());
        let zero = ZetaDraw::Shared(DVector::zeros(2));
        let out = perturb_with(actions.features(), s.gram_factor(), s.theta_hat(), 3.0, &zero).unwrap();
        assert_eq!(out, actions.features());
    }

    #[test]
    fn hand_evaluated_perturbation() {
        // x = e1, H = I, theta = e2, c = 1, zeta = (0, 1)  ->  (1, 1), score 1
        let gram = crate::linalg::SymMatrix::identity(2).factor().unwrap();
        let theta = DVector::from_column_slice(&[0.0, 1.0]);
        let x = vec![DVector::from_column_slice(&[1.0, 0.0])];
        let zeta = ZetaDraw::Shared(DVector::from_column_slice(&[0.0, 1.0]));
        let out = perturb_with(&x, &gram, &theta, 1.0, &zeta).unwrap();
        assert_eq!(out[0], DVector::from_column_slice(&[1.0, 1.0]));
        assert_eq!(out[0].dot(&theta), 1.0);
    }

    #[test]
    fn score_params() {
        let s = EstimatorState::new(LinkSpec::linear(), 2, 1.0).unwrap();
        let x = DVector::from_column_slice(&[1.0, 0.0]);
        assert_eq!(score_distribution_params(&x, &s, 0.0).unwrap().1, 0.0);
        assert_eq!(score_distribution_params(&x, &s, 1.7).unwrap(), (0.0, 1.7));

        let s = state_with(&[0.3, 0.0], LinkSpec::linear());
        let (m, sd1) = score_distribution_params(&x, &s, 1.0).unwrap();
        assert_abs_diff_eq!(m, 0.3, epsilon = 1e-15);
        let (_, sd3) = score_distribution_params(&x, &s, 3.0).unwrap();
        assert_abs_diff_eq!(sd3, 3.0 * sd1, epsilon = 1e-15);
    }

    #[test]
    fn coupled_equal_width_arms_keep_greedy_order() {
        // arms with identical |x|_{H^{-1}} receive the same score shift, so the
        // perturbed argmax equals the greedy argmax on every round
        let mut rng = stream(21, "rank");
        let d = 3;
        let s = state_with(&[0.4, -0.7, 0.2], LinkSpec::linear());
        let gram = crate::linalg::SymMatrix::identity(d).factor().unwrap();
        for _ in 0..1000 {
            let arms: Vec<DVector<f64>> = (0..6)
                .map(|_| {
                    let g = draw_zeta(&PerturbationScheme::gaussian(), d, &mut rng);
                    &g / g.norm()
                })
                .collect();
            let zeta = ZetaDraw::sample(&PerturbationScheme::gaussian(), d, arms.len(), &mut rng);
            let out = perturb_with(&arms, &gram, s.theta_hat(), 2.0, &zeta).unwrap();
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                    .0
            };
            let greedy: Vec<f64> = arms.iter().map(|x| x.dot(s.theta_hat())).collect();
            let pert: Vec<f64> = out.iter().map(|x| x.dot(s.theta_hat())).collect();
            assert_eq!(argmax(&greedy), argmax(&pert));
        }
    }
}
