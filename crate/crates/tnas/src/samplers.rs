//! The differentiable map from architecture parameters to simplex mixture
//! weights: deterministic softmax, straight-through Gumbel sampling, and
//! Dirichlet sampling with pathwise Gamma reparameterization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tnas_autodiff::{gamma_reparam, gumbel_straight_through, Scalar, Tensor, Var};

use crate::error::Result;

type AdResult<T> = tnas_autodiff::Result<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Softmax,
    GumbelSt,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Anneal {
    None,
    Linear { start: f64, end: f64, steps: usize },
    Exponential { start: f64, end: f64, steps: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub tau: f64,
    pub anneal: Anneal,
    pub seed: u64,
    pub dirichlet_epsilon: f64,
    /// L2 anchor scale added to the validation loss during architecture
    /// updates.
    pub reg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            strategy: Strategy::Dirichlet,
            tau: 1.0,
            anneal: Anneal::None,
            seed: 0,
            dirichlet_epsilon: 1e-3,
            reg_scale: 1e-3,
        }
    }
}

/// Temperature at `step` under the configured schedule, clamped to the
/// schedule's end value once past its horizon.
pub fn anneal_step(cfg: &SamplerConfig, step: usize) -> f64 {
    match cfg.anneal {
        Anneal::None => cfg.tau,
        Anneal::Linear { start, end, steps } => {
            if steps == 0 || step >= steps {
                end
            } else {
                start + (end - start) * (step as f64 / steps as f64)
            }
        }
        Anneal::Exponential { start, end, steps } => {
            if steps == 0 || step >= steps {
                end
            } else {
                start * (end / start).powf(step as f64 / steps as f64)
            }
        }
    }
}

/// Deterministic softmax(alpha / tau); the gradient is the exact softmax
/// Jacobian.
pub fn sample_softmax<T: Scalar>(alpha: &Var<T>, tau: f64) -> AdResult<Var<T>> {
    alpha.scale(T::from_f64(1.0 / tau)).softmax(0)
}

/// One-hot forward at argmax(alpha + Gumbel noise), softmax((alpha+g)/tau)
/// Jacobian backward.
pub fn sample_gumbel_st<T: Scalar>(alpha: &Var<T>, tau: f64, rng: &mut ChaCha8Rng) -> AdResult<Var<T>> {
    gumbel_straight_through(alpha, T::from_f64(tau), rng)
}

/// Dirichlet(softplus(alpha) + epsilon) sample via reparameterized Gamma
/// draws normalized on the simplex.
pub fn sample_dirichlet<T: Scalar>(
    alpha: &Var<T>,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> AdResult<Var<T>> {
    let n = alpha.numel();
    let eps = alpha.tape().constant(&Tensor::full(vec![n], T::from_f64(epsilon)));
    let concentration = alpha.softplus().add(&eps)?;
    let gammas = gamma_reparam(&concentration, rng)?;
    Ok(gammas.normalize_sum())
}

/// `scale * ||alpha||^2`, the L2 anchor added to the validation loss.
pub fn anchor_regularizer<T: Scalar>(alpha: &Var<T>, scale: f64) -> AdResult<Var<T>> {
    Ok(alpha.mul(alpha)?.sum().scale(T::from_f64(scale)))
}

/// Stateful sampler owning its noise stream.
pub struct Sampler {
    pub cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Sampler { cfg, rng }
    }

    /// Mixture weights for one dimension's parameters at a given step.
    pub fn sample<T: Scalar>(&mut self, alpha: &Var<T>, step: usize) -> Result<Var<T>> {
        let tau = anneal_step(&self.cfg, step);
        let mix = match self.cfg.strategy {
            Strategy::Softmax => sample_softmax(alpha, tau)?,
            Strategy::GumbelSt => sample_gumbel_st(alpha, tau, &mut self.rng)?,
            Strategy::Dirichlet => {
                sample_dirichlet(alpha, self.cfg.dirichlet_epsilon, &mut self.rng)?
            }
        };
        Ok(mix)
    }
}
