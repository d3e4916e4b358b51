//! Noise schedules, closed-form forward noising, the simplified denoising
//! objective and DDPM ancestral sampling.
//!
//! Timesteps are 1-indexed: `t` ranges over `1..=T` and `t = T` is the
//! noisiest step.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::{self, normal_vec};

/// Coefficients of a `T`-step variance-preserving diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// Parameters of the linear β schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// β linearly interpolated from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule", "step count must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "schedule",
                alloc::format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule", "step count must be at least 1"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(
                "schedule",
                alloc::format!("beta {b} outside (0, 1)"),
            ));
        }
        let mut prod = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
        let sigmas = betas.iter().map(|b| libm::sqrt(*b)).collect();
        Ok(Self {
            betas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                horizon: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Reverse-step standard deviation; σ_t² = β_t.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }
}

/// A data point together with its condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
}

/// Anything that predicts the noise component of `x_t`.
pub trait NoisePredictor: Sync {
    fn x_dim(&self) -> usize;

    fn predict(&self, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>>;
}

/// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_dim("q_sample noise", x0.len(), eps.len())?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One term of the denoising objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseItem {
    pub x0: Vec<f64>,
    pub c: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Mean of `‖ε − ε̂(x_t, t, c)‖²` over the batch, with unit time weighting.
pub fn denoise_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    batch: &[DenoiseItem],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("denoising batch"));
    }
    let terms = batch
        .iter()
        .map(|item| {
            let x_t = q_sample(&item.x0, item.t, &item.eps, sched)?;
            let pred = predictor.predict(&x_t, item.t, &item.c)?;
            check_dim("denoiser output", item.eps.len(), pred.len())?;
            Ok(math::sq_dist(&item.eps, &pred))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(math::pairwise_sum(&terms) / batch.len() as f64)
}

/// One reverse step `x_t → x_{t−1}` with ε-parameterized mean.
///
/// `z` is the standard normal draw; it is ignored at `t = 1`, which returns
/// the mean.
pub fn reverse_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    z: &[f64],
    sched: &NoiseSchedule,
) -> Vec<f64> {
    let beta = sched.beta(t);
    let inv_sqrt_alpha = 1.0 / libm::sqrt(1.0 - beta);
    let coef = beta / libm::sqrt(1.0 - sched.alpha_bar(t));
    let sigma = if t > 1 { sched.sigma(t) } else { 0.0 };
    x_t.iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((x, e), z)| inv_sqrt_alpha * (x - coef * e) + sigma * z)
        .collect()
}

/// Draws `x_T ~ N(0, I)` and runs the reverse chain down to `x_0`.
pub fn ancestral_sample<P, R>(
    predictor: &P,
    c: &[f64],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Sample>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let d = predictor.x_dim();
    let mut x = normal_vec(rng, d);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = predictor.predict(&x, t, c)?;
        check_dim("denoiser output", d, eps_hat.len())?;
        let z = if t > 1 {
            normal_vec(rng, d)
        } else {
            alloc::vec![0.0; d]
        };
        x = reverse_step(&x, &eps_hat, t, &z, sched);
    }
    if !math::all_finite(&x) {
        return Err(Error::NonFinite("ancestral sample".into()));
    }
    Ok(Sample { x, c: c.to_vec() })
}
