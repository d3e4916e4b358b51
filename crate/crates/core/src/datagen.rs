//! Synthetic preference data with controllable dimensional conflict.
//!
//! Each pair draws a condition `c`, builds two candidates near the anchors of
//! two *different* reward dimensions, and lets an annotator with
//! Dirichlet-distributed weights pick the candidate with the larger weighted
//! reward. Spiky annotators (small concentration) let a single dimension
//! dominate the judgment, which is exactly what produces conflict sets.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::dpo::{Origin, PreferencePair};
use crate::error::{Error, Result};
use crate::exec::{Executor, Serial};
use crate::math::{self, normal_vec};
use crate::rewards::{reward_diffs, RewardCommittee};

/// Bound on redraws for a single pair before giving up.
pub const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenProfile {
    pub n_pairs: usize,
    pub d: usize,
    pub d_c: usize,
    pub committee: RewardCommittee,
    /// Symmetric Dirichlet concentration of the annotator weights.
    pub concentration: f64,
    /// Standard deviation of the perturbation around each anchor.
    pub noise_scale: f64,
    /// Conditions are drawn uniformly from `[-scale, scale]^d_c`.
    pub condition_scale: f64,
    pub seed: u64,
}

impl GenProfile {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::invalid("profile", "n_pairs must be at least 1"));
        }
        if self.d == 0 {
            return Err(Error::invalid("profile", "d must be positive"));
        }
        if self.committee.len() < 2 {
            return Err(Error::invalid("profile", "the generator needs at least two reward dimensions"));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::invalid("profile", "concentration must be positive"));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("profile", "noise_scale must be positive"));
        }
        if !(self.condition_scale >= 0.0 && self.condition_scale.is_finite()) {
            return Err(Error::invalid("profile", "condition_scale must be non-negative"));
        }
        Ok(())
    }
}

pub fn sample_condition<R: Rng + ?Sized>(rng: &mut R, d_c: usize, scale: f64) -> Vec<f64> {
    (0..d_c)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect()
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, concentration: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|_| Error::invalid("concentration", alloc::format!("{concentration}")))?;
    for _ in 0..MAX_REDRAWS {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = g.iter().sum();
        if s > 0.0 && s.is_finite() {
            return Ok(g.into_iter().map(|v| v / s).collect());
        }
    }
    Err(Error::TooManyTies(MAX_REDRAWS))
}

fn gen_pair<R: Rng + ?Sized>(profile: &GenProfile, rng: &mut R) -> Result<PreferencePair> {
    let k = profile.committee.len();
    let specs = profile.committee.specs();
    for _ in 0..MAX_REDRAWS {
        let c = sample_condition(rng, profile.d_c, profile.condition_scale);
        let ka = rng.random_range(0..k);
        let kb = (ka + 1 + rng.random_range(0..k - 1)) % k;
        let mut xa = specs[ka].anchor(&c, profile.d);
        let mut xb = specs[kb].anchor(&c, profile.d);
        for (x, n) in xa.iter_mut().zip(normal_vec(rng, profile.d)) {
            *x += profile.noise_scale * n;
        }
        for (x, n) in xb.iter_mut().zip(normal_vec(rng, profile.d)) {
            *x += profile.noise_scale * n;
        }
        let weights = sample_dirichlet(rng, profile.concentration, k)?;
        let ra = profile.committee.eval_all(&xa, &c)?;
        let rb = profile.committee.eval_all(&xb, &c)?;
        let sa = math::dot(&weights, &ra);
        let sb = math::dot(&weights, &rb);
        if sa == sb || ra.iter().zip(&rb).any(|(a, b)| a == b) {
            continue;
        }
        let (w, l, rw, rl) = if sa > sb {
            (xa, xb, ra, rb)
        } else {
            (xb, xa, rb, ra)
        };
        return Ok(PreferencePair {
            c,
            x0_w: w,
            x0_l: l,
            delta_r: Some(rw.iter().zip(&rl).map(|(a, b)| a - b).collect()),
            weights: Some(weights),
            origin: Origin::Human,
        });
    }
    Err(Error::TooManyTies(MAX_REDRAWS))
}

pub fn gen_dataset(profile: &GenProfile) -> Result<Vec<PreferencePair>> {
    gen_dataset_with(profile, &Serial)
}

/// Pair `i` is generated from its own stream of `profile.seed`, so the output
/// does not depend on the executor.
pub fn gen_dataset_with<E: Executor>(profile: &GenProfile, exec: &E) -> Result<Vec<PreferencePair>> {
    profile.validate()?;
    exec.map_indexed(profile.n_pairs, |i| {
        gen_pair(profile, &mut math::stream(profile.seed, i as u64))
    })
    .into_iter()
    .collect()
}

/// Per-dimension agreement of `sign(Δr_k)` with the holistic label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimConflict {
    pub p_a: f64,
    pub p_c: f64,
    pub p_tie: f64,
}

pub fn conflict_stats(dataset: &[PreferencePair], committee: &RewardCommittee) -> Result<Vec<DimConflict>> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let k = committee.len();
    let mut counts = alloc::vec![[0usize; 3]; k];
    for pair in dataset {
        for (cnt, d) in counts.iter_mut().zip(reward_diffs(committee, pair)?) {
            let slot = if d > 0.0 {
                0
            } else if d < 0.0 {
                1
            } else {
                2
            };
            cnt[slot] += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok(counts
        .into_iter()
        .map(|[a, c, t]| DimConflict {
            p_a: a as f64 / n,
            p_c: c as f64 / n,
            p_tie: t as f64 / n,
        })
        .collect())
}
