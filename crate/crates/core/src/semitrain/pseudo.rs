//! Implicit-classifier pseudo-labels and the losses built on them.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::thresholds::{ThresholdTable, TimestepIntervals};
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::dpo::{self, DpoItem, NoiseDraw, PreferencePair};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::math::{self, neg_log_sigmoid};
use crate::model::DenoiserParams;

/// Margin logit of the frozen previous-iteration model. Its sign is the
/// predicted preference and `|z|` the confidence.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_logit<P, Q>(
    frozen: &P,
    reference: &Q,
    pair: &PreferencePair,
    t: usize,
    eps: &[f64],
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    Q: NoisePredictor + ?Sized,
{
    dpo::margin_logit(frozen, reference, pair, t, eps, beta, sched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Swap,
    Reject,
}

/// One pseudo-labeling probe of a noisy pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    /// Index into the pair list that was labeled.
    pub pair_index: usize,
    pub t: usize,
    pub eps: Vec<f64>,
    pub z: f64,
    pub confidence: f64,
    pub decision: Decision,
    pub interval: usize,
}

impl PseudoLabelRecord {
    pub fn is_accepted(&self) -> bool {
        self.decision != Decision::Reject
    }

    pub fn draw(&self) -> NoiseDraw {
        NoiseDraw {
            t: self.t,
            eps: self.eps.clone(),
        }
    }
}

/// Scores every pair at `draws_per_pair` stratified timesteps, one per equal
/// slice of the timeline. Pair `i` draws from stream `i` of a base seed taken
/// from `rng`. Records come back undecided (`Reject`) with `interval` unset
/// (0) until [`decide`] runs.
#[allow(clippy::too_many_arguments)]
pub fn score_pairs<R, E>(
    pairs: &[PreferencePair],
    frozen: &DenoiserParams,
    reference: &DenoiserParams,
    draws_per_pair: usize,
    beta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
    exec: &E,
) -> Result<Vec<PseudoLabelRecord>>
where
    R: Rng + ?Sized,
    E: Executor,
{
    dpo::check_beta(beta)?;
    let strata = TimestepIntervals::new(sched.steps(), draws_per_pair)?;
    let base = rng.next_u64();
    let per_pair = exec.map_indexed(pairs.len(), |i| {
        let pair = &pairs[i];
        let mut r = math::stream(base, i as u64);
        (0..draws_per_pair)
            .map(|s| {
                let t = strata.sample_t(s, &mut r);
                let eps = math::normal_vec(&mut r, pair.x0_w.len());
                let z = pseudo_logit(frozen, reference, pair, t, &eps, beta, sched)?;
                Ok(PseudoLabelRecord {
                    pair_index: i,
                    t,
                    eps,
                    z,
                    confidence: libm::fabs(z),
                    decision: Decision::Reject,
                    interval: 0,
                })
            })
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(pairs.len() * draws_per_pair);
    for recs in per_pair {
        out.extend(recs?);
    }
    Ok(out)
}

/// Applies the table: accepted iff `|z| > τ_{α(t)}`, then keep for `z > 0`
/// and swap for `z < 0`. `z = 0` never passes since `τ ≥ 0`.
pub fn decide(records: &mut [PseudoLabelRecord], thresholds: &ThresholdTable) -> Result<()> {
    let layout = thresholds.layout()?;
    for r in records {
        r.interval = layout.index_of(r.t)?;
        let tau = thresholds.tau[r.interval];
        r.decision = if r.confidence > tau && r.z > 0.0 {
            Decision::Keep
        } else if r.confidence > tau && r.z < 0.0 {
            Decision::Swap
        } else {
            Decision::Reject
        };
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn apply_pseudo_labels<R, E>(
    unlabeled: &[PreferencePair],
    frozen: &DenoiserParams,
    reference: &DenoiserParams,
    thresholds: &ThresholdTable,
    draws_per_pair: usize,
    beta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
    exec: &E,
) -> Result<Vec<PseudoLabelRecord>>
where
    R: Rng + ?Sized,
    E: Executor,
{
    let mut records = score_pairs(unlabeled, frozen, reference, draws_per_pair, beta, sched, rng, exec)?;
    decide(&mut records, thresholds)?;
    Ok(records)
}

/// Per-interval fraction of probes where the implicit classifier agrees
/// with the stored winner (`z > 0`; a zero logit counts as wrong). Each pair
/// is probed `draws_per_pair` times in every interval with `t` uniform
/// inside it.
#[allow(clippy::too_many_arguments)]
pub fn measure_interval_accuracy<R, E>(
    frozen: &DenoiserParams,
    reference: &DenoiserParams,
    clean_test: &[PreferencePair],
    intervals: &TimestepIntervals,
    draws_per_pair: usize,
    beta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
    exec: &E,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    E: Executor,
{
    if clean_test.is_empty() {
        return Err(Error::Empty("clean test split"));
    }
    if draws_per_pair == 0 {
        return Err(Error::invalid("accuracy probes", "draws per pair must be positive"));
    }
    dpo::check_beta(beta)?;
    let n = intervals.count();
    let base = rng.next_u64();
    let per_pair = exec.map_indexed(clean_test.len(), |i| {
        let pair = &clean_test[i];
        let mut r = math::stream(base, i as u64);
        let mut hits = vec![0usize; n];
        for (j, h) in hits.iter_mut().enumerate() {
            for _ in 0..draws_per_pair {
                let t = intervals.sample_t(j, &mut r);
                let eps = math::normal_vec(&mut r, pair.x0_w.len());
                if pseudo_logit(frozen, reference, pair, t, &eps, beta, sched)? > 0.0 {
                    *h += 1;
                }
            }
        }
        Ok(hits)
    });
    let mut totals = vec![0usize; n];
    for hits in per_pair {
        for (t, h) in totals.iter_mut().zip(hits?) {
            *t += h;
        }
    }
    let probes = (clean_test.len() * draws_per_pair) as f64;
    Ok(totals.into_iter().map(|h| h as f64 / probes).collect())
}

/// Clean-set DPO loss with fresh noise draws from `rng`.
pub fn anchor_loss<R: Rng + ?Sized>(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    labeled_batch: &[PreferencePair],
    beta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    if labeled_batch.is_empty() {
        return Err(Error::Empty("anchor batch"));
    }
    let draws: Vec<NoiseDraw> = labeled_batch
        .iter()
        .map(|p| dpo::draw_noise(rng, sched, p.x0_w.len()))
        .collect();
    let items: Vec<DpoItem<'_>> = labeled_batch.iter().zip(&draws).map(|(p, d)| DpoItem::new(p, d)).collect();
    dpo::dpo_loss(params, reference, &items, beta, sched)
}

/// Batch items for accepted records; swap records exchange winner and loser.
pub fn pseudo_items<'a>(
    records: &[&PseudoLabelRecord],
    pairs: &'a [PreferencePair],
    draws: &'a [NoiseDraw],
) -> Result<Vec<DpoItem<'a>>> {
    records
        .iter()
        .zip(draws)
        .map(|(r, draw)| {
            let pair = pairs.get(r.pair_index).ok_or_else(|| {
                Error::invalid("pseudo-label record", alloc::format!("pair {} out of range", r.pair_index))
            })?;
            match r.decision {
                Decision::Keep => Ok(DpoItem::new(pair, draw)),
                Decision::Swap => Ok(DpoItem {
                    pair,
                    draw,
                    swapped: true,
                }),
                Decision::Reject => Err(Error::invalid("pseudo-label record", "rejected record in loss")),
            }
        })
        .collect()
}

/// Mean `−ln σ(ẑ)` over accepted records, with `ẑ` recomputed under the
/// current `params` at each record's own `(t, ε)`. No records gives 0.
pub fn pseudo_label_loss(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    accepted: &[&PseudoLabelRecord],
    pairs: &[PreferencePair],
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if accepted.is_empty() {
        return Ok(0.0);
    }
    let draws: Vec<NoiseDraw> = accepted.iter().map(|r| r.draw()).collect();
    let items = pseudo_items(accepted, pairs, &draws)?;
    let terms = items
        .iter()
        .map(|it| Ok(neg_log_sigmoid(dpo::item_logit(params, reference, it, beta, sched)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(math::pairwise_sum(&terms) / terms.len() as f64)
}

/// `anchor_loss + pseudo_label_loss`.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss<R: Rng + ?Sized>(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    labeled_batch: &[PreferencePair],
    accepted: &[&PseudoLabelRecord],
    pairs: &[PreferencePair],
    beta: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let anchor = anchor_loss(params, reference, labeled_batch, beta, sched, rng)?;
    Ok(anchor + pseudo_label_loss(params, reference, accepted, pairs, beta, sched)?)
}
