//! Committee-based evaluation of sampled outputs and paired model comparison.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::sample_condition;
use crate::diffusion::{ancestral_sample, NoisePredictor, NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::math;
use crate::rewards::RewardCommittee;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean committee score of the samples, per dimension.
    pub per_dim_mean: Vec<f64>,
    /// Unweighted mean of `per_dim_mean`.
    pub aggregate: f64,
    /// Per-dimension win rate against a baseline model, when one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub win_rate: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval_accuracy: Option<Vec<f64>>,
    pub n_samples: usize,
    /// Base seed of the sampling streams.
    pub seed: u64,
}

/// A seeded grid of evaluation conditions.
pub fn eval_prompts(n: usize, d_c: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = math::seeded(seed);
    (0..n).map(|_| sample_condition(&mut rng, d_c, scale)).collect()
}

fn check_request(prompts: &[Vec<f64>], n_per_prompt: usize) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::Empty("evaluation prompts"));
    }
    if n_per_prompt == 0 {
        return Err(Error::invalid("evaluation", "samples per prompt must be positive"));
    }
    Ok(())
}

/// Draws `n_per_prompt` samples for every prompt. Slot `p·n + j` uses stream
/// `p·n + j` of `base_seed`, so two models sampled with the same seed share
/// their noise slot by slot.
pub fn sample_outputs<P, E>(
    model: &P,
    prompts: &[Vec<f64>],
    n_per_prompt: usize,
    sched: &NoiseSchedule,
    base_seed: u64,
    exec: &E,
) -> Result<Vec<Sample>>
where
    P: NoisePredictor + ?Sized,
    E: Executor,
{
    check_request(prompts, n_per_prompt)?;
    exec.map_indexed(prompts.len() * n_per_prompt, |slot| {
        let c = &prompts[slot / n_per_prompt];
        ancestral_sample(model, c, sched, &mut math::stream(base_seed, slot as u64))
    })
    .into_iter()
    .collect()
}

fn score(committee: &RewardCommittee, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| committee.eval_all(&s.x, &s.c)).collect()
}

pub fn evaluate_model<P, R, E>(
    model: &P,
    committee: &RewardCommittee,
    prompts: &[Vec<f64>],
    n_per_prompt: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    exec: &E,
) -> Result<EvalReport>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
    E: Executor,
{
    check_request(prompts, n_per_prompt)?;
    let seed = rng.next_u64();
    let samples = sample_outputs(model, prompts, n_per_prompt, sched, seed, exec)?;
    let scores = score(committee, &samples)?;
    let n = samples.len() as f64;
    let per_dim_mean: Vec<f64> = (0..committee.len())
        .map(|k| {
            let col: Vec<f64> = scores.iter().map(|s| s[k]).collect();
            math::pairwise_sum(&col) / n
        })
        .collect();
    let aggregate = per_dim_mean.iter().sum::<f64>() / per_dim_mean.len() as f64;
    Ok(EvalReport {
        per_dim_mean,
        aggregate,
        win_rate: None,
        interval_accuracy: None,
        n_samples: samples.len(),
        seed,
    })
}

/// Fraction of prompt-paired samples where `a` scores higher than `b`, per
/// dimension; ties count one half. Both models see the same noise in each
/// slot, which makes `rate(a, b) + rate(b, a) = 1` exactly.
#[allow(clippy::too_many_arguments)]
pub fn compare_models<P, Q, R, E>(
    a: &P,
    b: &Q,
    committee: &RewardCommittee,
    prompts: &[Vec<f64>],
    n_per_prompt: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
    exec: &E,
) -> Result<Vec<f64>>
where
    P: NoisePredictor + ?Sized,
    Q: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
    E: Executor,
{
    check_request(prompts, n_per_prompt)?;
    let seed = rng.next_u64();
    let sa = score(committee, &sample_outputs(a, prompts, n_per_prompt, sched, seed, exec)?)?;
    let sb = score(committee, &sample_outputs(b, prompts, n_per_prompt, sched, seed, exec)?)?;
    let n = sa.len() as f64;
    Ok((0..committee.len())
        .map(|k| {
            let wins: Vec<f64> = sa
                .iter()
                .zip(&sb)
                .map(|(x, y)| {
                    if x[k] > y[k] {
                        1.0
                    } else if x[k] == y[k] {
                        0.5
                    } else {
                        0.0
                    }
                })
                .collect();
            math::pairwise_sum(&wins) / n
        })
        .collect())
}
