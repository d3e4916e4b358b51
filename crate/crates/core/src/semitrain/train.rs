//! Minibatch training loops: denoising pretraining and the composite DPO
//! objective.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pseudo::{pseudo_items, PseudoLabelRecord};
use crate::diffusion::{q_sample, DenoiseItem, NoiseSchedule};
use crate::dpo::{self, DpoItem, NoiseDraw, PreferencePair};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::math::{self, SeededRng};
use crate::model::{init_params, Arch, DenoiserParams, GradVector, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Leading fraction of the steps with a linear learning-rate ramp.
    pub warmup_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            warmup_fraction: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate", alloc::format!("{}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", alloc::format!("{}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup fraction", alloc::format!("{}", self.warmup_fraction)));
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = libm::ceil(self.warmup_fraction * self.steps as f64) as usize;
        if step < warm {
            self.lr * (step + 1) as f64 / warm as f64
        } else {
            self.lr
        }
    }
}

/// Weights of the anchor and pseudo-label terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub anchor: f64,
    pub pseudo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            anchor: 1.0,
            pseudo: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// Weighted objective of the batch.
    pub loss: f64,
    pub anchor: f64,
    /// Mean pseudo-label term; 0 when there are no accepted records.
    pub pseudo: f64,
    pub grad_norm: f64,
}

/// What one training phase sees: clean pairs for the anchor term and, for
/// self-training, the noisy pairs with their accepted records.
#[derive(Debug, Clone, Copy)]
pub struct PhaseData<'a> {
    pub anchor: &'a [PreferencePair],
    pub pseudo_pairs: &'a [PreferencePair],
    pub accepted: &'a [&'a PseudoLabelRecord],
}

impl<'a> PhaseData<'a> {
    pub fn anchor_only(anchor: &'a [PreferencePair]) -> Self {
        Self {
            anchor,
            pseudo_pairs: &[],
            accepted: &[],
        }
    }
}

fn split_terms(len: usize, terms: Vec<(f64, GradVector)>) -> (Vec<f64>, GradVector) {
    let mut losses = Vec::with_capacity(terms.len());
    let mut grads = Vec::with_capacity(terms.len());
    for (l, g) in terms {
        losses.push(l);
        grads.push(g.0);
    }
    (losses, GradVector(math::tree_sum(grads, len)))
}

/// Loss and gradient of one minibatch of the weighted objective. Item
/// gradients are computed through `exec` and reduced in a fixed tree.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<E: Executor>(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    anchor: &[DpoItem<'_>],
    pseudo: &[DpoItem<'_>],
    weights: LossWeights,
    beta: f64,
    sched: &NoiseSchedule,
    exec: &E,
) -> Result<(StepLog, GradVector)> {
    if anchor.is_empty() {
        return Err(Error::Empty("anchor batch"));
    }
    let na = anchor.len();
    let wa = weights.anchor / na as f64;
    let wp = if pseudo.is_empty() {
        0.0
    } else {
        weights.pseudo / pseudo.len() as f64
    };
    let terms = exec.map_indexed(na + pseudo.len(), |i| {
        let (item, w) = if i < na {
            (&anchor[i], wa)
        } else {
            (&pseudo[i - na], wp)
        };
        let (l, g) = dpo::loss_and_gradient(params, reference, item, beta, sched)?;
        Ok((l, g.scaled(w)))
    });
    let terms = terms.into_iter().collect::<Result<Vec<_>>>()?;
    let (losses, grad) = split_terms(params.len(), terms);
    let anchor_mean = math::pairwise_sum(&losses[..na]) / na as f64;
    let pseudo_mean = if pseudo.is_empty() {
        0.0
    } else {
        math::pairwise_sum(&losses[na..]) / pseudo.len() as f64
    };
    let loss = weights.anchor * anchor_mean + weights.pseudo * pseudo_mean;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("training gradient".into()));
    }
    let log = StepLog {
        step: 0,
        lr: 0.0,
        loss,
        anchor: anchor_mean,
        pseudo: pseudo_mean,
        grad_norm: libm::sqrt(grad.norm_sq()),
    };
    Ok((log, grad))
}

/// Trains from `init` on the weighted anchor + pseudo-label objective. Each
/// step samples `batch_size` anchor pairs with replacement and fresh
/// `(t, ε)`, plus `batch_size` accepted records with replacement when there
/// are any. All randomness comes from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_phase<E: Executor>(
    init: &DenoiserParams,
    reference: &DenoiserParams,
    data: PhaseData<'_>,
    weights: LossWeights,
    optim: &OptimConfig,
    beta: f64,
    sched: &NoiseSchedule,
    seed: u64,
    exec: &E,
) -> Result<(DenoiserParams, Vec<StepLog>)> {
    optim.validate()?;
    dpo::check_beta(beta)?;
    if data.anchor.is_empty() {
        return Err(Error::Empty("anchor set"));
    }
    let mut rng = math::seeded(seed);
    let mut params = init.clone();
    let mut opt = Sgd::new(optim.momentum);
    let mut logs = Vec::with_capacity(optim.steps);
    let b = optim.batch_size;
    for step in 0..optim.steps {
        let (anchor_pairs, anchor_draws) = sample_anchor(&mut rng, data.anchor, b, sched);
        let anchor: Vec<DpoItem<'_>> = anchor_pairs
            .iter()
            .zip(&anchor_draws)
            .map(|(p, d)| DpoItem::new(p, d))
            .collect();
        let picked: Vec<&PseudoLabelRecord> = if data.accepted.is_empty() {
            Vec::new()
        } else {
            (0..b)
                .map(|_| data.accepted[rng.random_range(0..data.accepted.len())])
                .collect()
        };
        let pseudo_draws: Vec<NoiseDraw> = picked.iter().map(|r| r.draw()).collect();
        let pseudo = pseudo_items(&picked, data.pseudo_pairs, &pseudo_draws)?;
        let (mut log, grad) =
            batch_objective(&params, reference, &anchor, &pseudo, weights, beta, sched, exec)?;
        let lr = optim.lr_at(step);
        opt.step(&mut params, &grad, lr)?;
        log.step = step;
        log.lr = lr;
        logs.push(log);
    }
    Ok((params, logs))
}

fn sample_anchor<'a>(
    rng: &mut SeededRng,
    pairs: &'a [PreferencePair],
    b: usize,
    sched: &NoiseSchedule,
) -> (Vec<&'a PreferencePair>, Vec<NoiseDraw>) {
    let mut picked = Vec::with_capacity(b);
    let mut draws = Vec::with_capacity(b);
    for _ in 0..b {
        let p = &pairs[rng.random_range(0..pairs.len())];
        draws.push(dpo::draw_noise(rng, sched, p.x0_w.len()));
        picked.push(p);
    }
    (picked, draws)
}

/// Plain Diffusion-DPO on `pairs`.
#[allow(clippy::too_many_arguments)]
pub fn train_dpo<E: Executor>(
    init: &DenoiserParams,
    reference: &DenoiserParams,
    pairs: &[PreferencePair],
    optim: &OptimConfig,
    beta: f64,
    sched: &NoiseSchedule,
    seed: u64,
    exec: &E,
) -> Result<(DenoiserParams, Vec<StepLog>)> {
    let data = PhaseData::anchor_only(pairs);
    train_phase(init, reference, data, LossWeights::default(), optim, beta, sched, seed, exec)
}

/// Mean denoising loss of `batch` with its exact gradient.
pub fn denoise_loss_and_gradient<E: Executor>(
    params: &DenoiserParams,
    batch: &[DenoiseItem],
    sched: &NoiseSchedule,
    exec: &E,
) -> Result<(f64, GradVector)> {
    if batch.is_empty() {
        return Err(Error::Empty("denoising batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let terms = exec.map_indexed(batch.len(), |i| {
        let item = &batch[i];
        let x_t = q_sample(&item.x0, item.t, &item.eps, sched)?;
        let trace = params.trace(&x_t, item.t, &item.c)?;
        let up: Vec<f64> = trace
            .output()
            .iter()
            .zip(&item.eps)
            .map(|(o, e)| 2.0 * (o - e))
            .collect();
        let mut g = vec![0.0; params.len()];
        trace.accumulate(params, &up, scale, &mut g)?;
        Ok((math::sq_dist(&item.eps, trace.output()), GradVector(g)))
    });
    let terms = terms.into_iter().collect::<Result<Vec<_>>>()?;
    let (l, grad) = split_terms(params.len(), terms);
    let loss = math::pairwise_sum(&l) * scale;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    Ok((loss, grad))
}

/// Fits a fresh denoiser to every winner and loser sample of `pairs` with
/// the denoising objective. Returns the model and the per-step batch losses.
pub fn pretrain_reference<E: Executor>(
    arch: &Arch,
    pairs: &[PreferencePair],
    optim: &OptimConfig,
    sched: &NoiseSchedule,
    seed: u64,
    exec: &E,
) -> Result<(DenoiserParams, Vec<f64>)> {
    optim.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("pretraining data"));
    }
    let mut rng = math::seeded(math::mix_seed(seed, 0));
    let mut params = init_params(arch, &mut rng)?;
    let mut rng = math::seeded(math::mix_seed(seed, 1));
    let mut opt = Sgd::new(optim.momentum);
    let mut losses = Vec::with_capacity(optim.steps);
    for step in 0..optim.steps {
        let batch: Vec<DenoiseItem> = (0..optim.batch_size)
            .map(|_| {
                let k = rng.random_range(0..2 * pairs.len());
                let p = &pairs[k / 2];
                let x0 = if k % 2 == 0 { &p.x0_w } else { &p.x0_l };
                let draw = dpo::draw_noise(&mut rng, sched, x0.len());
                DenoiseItem {
                    x0: x0.clone(),
                    c: p.c.clone(),
                    t: draw.t,
                    eps: draw.eps,
                }
            })
            .collect();
        let (loss, grad) = denoise_loss_and_gradient(&params, &batch, sched, exec)?;
        opt.step(&mut params, &grad, optim.lr_at(step))?;
        losses.push(loss);
    }
    Ok((params, losses))
}
