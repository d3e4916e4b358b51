//! Diffusion-DPO objective and the gradient-variance diagnostics.
//!
//! The per-timestep log-density ratios are realized with the usual
//! ε-prediction surrogate: winner and loser are noised with the same `(t, ε)`
//! and
//!
//! ```text
//! z = −β · [ (‖ε − ε_θ(x_tʷ)‖² − ‖ε − ε_ref(x_tʷ)‖²)
//!          − (‖ε − ε_θ(x_tˡ)‖² − ‖ε − ε_ref(x_tˡ)‖²) ]
//! ```
//!
//! Any positive time weighting is folded into `β`. The loss of a pair is
//! `−ln σ(z)` and its gradient factors as `−f·Δφ` with `f = (1 − σ(z))·β` and
//! `Δφ = −(∇‖ε − ε_θ(x_tʷ)‖² − ∇‖ε − ε_θ(x_tˡ)‖²)`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoisePredictor, NoiseSchedule};
use crate::error::{check_dim, Error, Result};
use crate::exec::Executor;
use crate::math::{self, neg_log_sigmoid, sigmoid};
use crate::model::{DenoiserParams, GradVector, Trace};

/// Desk-scale default. With the small denoiser, values in the thousands
/// saturate the logit within a few SGD steps.
pub const DEFAULT_BETA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    #[default]
    Human,
    Pseudo,
}

/// A condition with a preferred and a dispreferred sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub c: Vec<f64>,
    pub x0_w: Vec<f64>,
    pub x0_l: Vec<f64>,
    /// Ground-truth `r_k(x0_w, c) − r_k(x0_l, c)` for every committee member.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_r: Option<Vec<f64>>,
    /// Annotator scalarization weights that produced the label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub origin: Origin,
}

impl PreferencePair {
    pub fn new(c: Vec<f64>, x0_w: Vec<f64>, x0_l: Vec<f64>) -> Self {
        Self {
            c,
            x0_w,
            x0_l,
            delta_r: None,
            weights: None,
            origin: Origin::Human,
        }
    }

    /// Winner and loser exchanged; reward differences negate.
    pub fn swapped(&self) -> Self {
        Self {
            c: self.c.clone(),
            x0_w: self.x0_l.clone(),
            x0_l: self.x0_w.clone(),
            delta_r: self
                .delta_r
                .as_ref()
                .map(|d| d.iter().map(|v| -v).collect()),
            weights: self.weights.clone(),
            origin: self.origin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("pair loser", self.x0_w.len(), self.x0_l.len())?;
        if self.x0_w == self.x0_l {
            return Err(Error::invalid("preference pair", "winner equals loser"));
        }
        let finite = math::all_finite(&self.c)
            && math::all_finite(&self.x0_w)
            && math::all_finite(&self.x0_l);
        if !finite {
            return Err(Error::NonFinite("preference pair".into()));
        }
        if let Some(d) = &self.delta_r {
            if d.iter().any(|v| !v.is_finite() || *v == 0.0) {
                return Err(Error::invalid(
                    "preference pair",
                    "reward differences must be finite and nonzero",
                ));
            }
        }
        Ok(())
    }
}

/// A timestep with the noise shared by both branches of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)`.
pub fn draw_noise<R: rand::Rng + ?Sized>(rng: &mut R, sched: &NoiseSchedule, dim: usize) -> NoiseDraw {
    let t = rng.random_range(1..=sched.steps());
    NoiseDraw {
        t,
        eps: math::normal_vec(rng, dim),
    }
}

fn sq_err<P: NoisePredictor + ?Sized>(
    model: &P,
    x_t: &[f64],
    t: usize,
    c: &[f64],
    eps: &[f64],
) -> Result<f64> {
    let pred = model.predict(x_t, t, c)?;
    check_dim("denoiser output", eps.len(), pred.len())?;
    Ok(math::sq_dist(eps, &pred))
}

/// The implicit-classifier logit `z` of a pair at `(t, ε)`.
#[allow(clippy::too_many_arguments)]
pub fn margin_logit<P, Q>(
    model: &P,
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
    oriented_logit(model, reference, &pair.c, &pair.x0_w, &pair.x0_l, t, eps, beta, sched)
}

#[allow(clippy::too_many_arguments)]
fn oriented_logit<P, Q>(
    model: &P,
    reference: &Q,
    c: &[f64],
    winner: &[f64],
    loser: &[f64],
    t: usize,
    eps: &[f64],
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    Q: NoisePredictor + ?Sized,
{
    check_beta(beta)?;
    let xw = q_sample(winner, t, eps, sched)?;
    let xl = q_sample(loser, t, eps, sched)?;
    let w_theta = sq_err(model, &xw, t, c, eps)?;
    let w_ref = sq_err(reference, &xw, t, c, eps)?;
    let l_theta = sq_err(model, &xl, t, c, eps)?;
    let l_ref = sq_err(reference, &xl, t, c, eps)?;
    Ok(logit_from_errors(w_theta, w_ref, l_theta, l_ref, beta))
}

fn logit_from_errors(w_theta: f64, w_ref: f64, l_theta: f64, l_ref: f64, beta: f64) -> f64 {
    -beta * ((w_theta - w_ref) - (l_theta - l_ref))
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("beta", alloc::format!("{beta} (must be positive)")))
    }
}

/// One term of a DPO batch. `swapped` exchanges winner and loser.
#[derive(Debug, Clone, Copy)]
pub struct DpoItem<'a> {
    pub pair: &'a PreferencePair,
    pub draw: &'a NoiseDraw,
    pub swapped: bool,
}

impl<'a> DpoItem<'a> {
    pub fn new(pair: &'a PreferencePair, draw: &'a NoiseDraw) -> Self {
        Self {
            pair,
            draw,
            swapped: false,
        }
    }

    fn oriented(&self) -> (&'a [f64], &'a [f64]) {
        if self.swapped {
            (&self.pair.x0_l, &self.pair.x0_w)
        } else {
            (&self.pair.x0_w, &self.pair.x0_l)
        }
    }
}

/// Mean of `−ln σ(z)` over the batch.
pub fn dpo_loss(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    batch: &[DpoItem<'_>],
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("DPO batch"));
    }
    let terms = batch
        .iter()
        .map(|item| Ok(neg_log_sigmoid(item_logit(params, reference, item, beta, sched)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(math::pairwise_sum(&terms) / batch.len() as f64)
}

/// Logit of one batch item, honoring its orientation.
pub fn item_logit(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    item: &DpoItem<'_>,
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let (w, l) = item.oriented();
    let (t, eps) = (item.draw.t, &item.draw.eps);
    oriented_logit(params, reference, &item.pair.c, w, l, t, eps, beta, sched)
}

/// Factors of the per-sample gradient `g = −f·Δφ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradDecomposition {
    /// `f = (1 − σ(z))·β`.
    pub f: f64,
    pub delta_phi: GradVector,
    pub z: f64,
    pub t: usize,
}

impl GradDecomposition {
    /// `g = −f·Δφ`, the gradient of `−ln σ(z)`.
    pub fn gradient(&self) -> GradVector {
        self.delta_phi.scaled(-self.f)
    }

    pub fn loss(&self) -> f64 {
        neg_log_sigmoid(self.z)
    }
}

struct Branches {
    z: f64,
    eps: Vec<f64>,
    trace_w: Trace,
    trace_l: Trace,
}

fn branches(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    item: &DpoItem<'_>,
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<Branches> {
    check_beta(beta)?;
    let (w, l) = item.oriented();
    let (t, eps, c) = (item.draw.t, &item.draw.eps, &item.pair.c);
    let xw = q_sample(w, t, eps, sched)?;
    let xl = q_sample(l, t, eps, sched)?;
    let trace_w = params.trace(&xw, t, c)?;
    let trace_l = params.trace(&xl, t, c)?;
    let w_theta = math::sq_dist(eps, trace_w.output());
    let l_theta = math::sq_dist(eps, trace_l.output());
    let w_ref = sq_err(reference, &xw, t, c, eps)?;
    let l_ref = sq_err(reference, &xl, t, c, eps)?;
    Ok(Branches {
        z: logit_from_errors(w_theta, w_ref, l_theta, l_ref, beta),
        eps: eps.clone(),
        trace_w,
        trace_l,
    })
}

/// `2·(ε_θ − ε)`, the upstream of `‖ε − ε_θ‖²`.
fn sq_err_upstream(eps: &[f64], pred: &[f64]) -> Vec<f64> {
    pred.iter().zip(eps).map(|(p, e)| 2.0 * (p - e)).collect()
}

pub fn grad_decompose_item(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    item: &DpoItem<'_>,
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<GradDecomposition> {
    let b = branches(params, reference, item, beta, sched)?;
    let mut delta_phi = GradVector::zeros(params.len());
    let up_w = sq_err_upstream(&b.eps, b.trace_w.output());
    let up_l = sq_err_upstream(&b.eps, b.trace_l.output());
    b.trace_w.accumulate(params, &up_w, -1.0, &mut delta_phi.0)?;
    b.trace_l.accumulate(params, &up_l, 1.0, &mut delta_phi.0)?;
    Ok(GradDecomposition {
        f: sigmoid(-b.z) * beta,
        delta_phi,
        z: b.z,
        t: item.draw.t,
    })
}

/// Decomposes the gradient of `−ln σ(z)` for `pair` at `(t, ε)`.
#[allow(clippy::too_many_arguments)]
pub fn grad_decompose(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    pair: &PreferencePair,
    t: usize,
    eps: &[f64],
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<GradDecomposition> {
    let draw = NoiseDraw { t, eps: eps.to_vec() };
    grad_decompose_item(params, reference, &DpoItem::new(pair, &draw), beta, sched)
}

/// Loss of one item with its gradient, accumulated in a single pass
/// (`dℓ/dz · ∇z`) rather than through `f` and `Δφ`.
pub fn loss_and_gradient(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    item: &DpoItem<'_>,
    beta: f64,
    sched: &NoiseSchedule,
) -> Result<(f64, GradVector)> {
    let b = branches(params, reference, item, beta, sched)?;
    // ∇z = −β(∇‖e_w‖² − ∇‖e_l‖²), dℓ/dz = −σ(−z)
    let dl_dz = -sigmoid(-b.z);
    let mut g = GradVector::zeros(params.len());
    let up_w = sq_err_upstream(&b.eps, b.trace_w.output());
    let up_l = sq_err_upstream(&b.eps, b.trace_l.output());
    b.trace_w.accumulate(params, &up_w, -beta * dl_dz, &mut g.0)?;
    b.trace_l.accumulate(params, &up_l, beta * dl_dz, &mut g.0)?;
    Ok((neg_log_sigmoid(b.z), g))
}

/// `ξ = ⟨−g, v_k⟩ = f · sign(Δr_k) · ‖Δφ‖²`.
pub fn oracle_inner_product(decomp: &GradDecomposition, delta_r_k: f64) -> Result<f64> {
    if delta_r_k == 0.0 || delta_r_k.is_nan() {
        return Err(Error::ZeroRewardDifference);
    }
    let sign = if delta_r_k > 0.0 { 1.0 } else { -1.0 };
    Ok(decomp.f * sign * decomp.delta_phi.norm_sq())
}

/// `p_a · p_c · (m_a + m_c)²`.
pub fn variance_lower_bound(p_a: f64, p_c: f64, m_a: f64, m_c: f64) -> Result<f64> {
    let probs_ok = (0.0..=1.0).contains(&p_a)
        && (0.0..=1.0).contains(&p_c)
        && libm::fabs(p_a + p_c - 1.0) <= 1e-12;
    if !probs_ok {
        return Err(Error::invalid(
            "probabilities",
            alloc::format!("p_a = {p_a}, p_c = {p_c} must be non-negative and sum to 1"),
        ));
    }
    if !(m_a >= 0.0 && m_c >= 0.0) {
        return Err(Error::invalid(
            "magnitudes",
            alloc::format!("m_a = {m_a}, m_c = {m_c} must be non-negative"),
        ));
    }
    let s = m_a + m_c;
    Ok(p_a * p_c * s * s)
}

/// Population statistics of `ξ` split by alignment (`Δr_k > 0`) and
/// conflict (`Δr_k < 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub var_xi: f64,
    pub p_a: f64,
    pub p_c: f64,
    pub m_a: f64,
    pub m_c: f64,
    pub bound: f64,
    pub intra: f64,
    pub inter: f64,
}

impl VarianceReport {
    /// `var_xi ≥ bound` up to a relative rounding slack of 1e-9.
    pub fn bound_holds(&self) -> bool {
        self.var_xi >= self.bound - 1e-9 * self.var_xi.max(1.0)
    }
}

/// Treats `(pair, draw)` as a uniform finite population and decomposes
/// `Var[ξ]` by the law of total variance. Pairs tied on dimension `k` have
/// no oracle direction and are left out.
#[allow(clippy::too_many_arguments)]
pub fn variance_report<E: Executor>(
    params: &DenoiserParams,
    reference: &DenoiserParams,
    dataset: &[PreferencePair],
    k: usize,
    draws: &[NoiseDraw],
    beta: f64,
    sched: &NoiseSchedule,
    exec: &E,
) -> Result<VarianceReport> {
    check_dim("noise draws per pair", dataset.len(), draws.len())?;
    let signs = dataset
        .iter()
        .map(|p| {
            let d = p
                .delta_r
                .as_ref()
                .ok_or_else(|| Error::invalid("variance report", "pair without reward differences"))?;
            d.get(k).copied().ok_or(Error::RewardIndex {
                index: k,
                size: d.len(),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let active: Vec<usize> = (0..dataset.len()).filter(|&i| signs[i] != 0.0).collect();
    if active.len() < 2 {
        return Err(Error::invalid(
            "variance report",
            "need at least two pairs with a nonzero reward difference",
        ));
    }
    let xis = exec
        .map_indexed(active.len(), |j| {
            let i = active[j];
            let decomp = grad_decompose(
                params,
                reference,
                &dataset[i],
                draws[i].t,
                &draws[i].eps,
                beta,
                sched,
            )?;
            oracle_inner_product(&decomp, signs[i])
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    let aligned: Vec<bool> = active.iter().map(|&i| signs[i] > 0.0).collect();
    population_report(&xis, &aligned)
}

/// Law-of-total-variance split of a finite population of `ξ` values.
pub fn population_report(xis: &[f64], aligned: &[bool]) -> Result<VarianceReport> {
    check_dim("alignment flags", xis.len(), aligned.len())?;
    if xis.is_empty() {
        return Err(Error::Empty("variance population"));
    }
    if !math::all_finite(xis) {
        return Err(Error::NonFinite("inner products".into()));
    }
    let n = xis.len() as f64;
    let a: Vec<f64> = xis.iter().zip(aligned).filter(|(_, a)| **a).map(|(x, _)| *x).collect();
    let c: Vec<f64> = xis.iter().zip(aligned).filter(|(_, a)| !**a).map(|(x, _)| *x).collect();

    let mean = math::pairwise_sum(xis) / n;
    let var_xi = centered_mean_sq(xis, mean);

    let p_a = a.len() as f64 / n;
    let p_c = c.len() as f64 / n;
    let (m_a, var_a) = if a.is_empty() {
        (0.0, 0.0)
    } else {
        let m = math::pairwise_sum(&a) / a.len() as f64;
        (m, centered_mean_sq(&a, m))
    };
    let (m_c, var_c) = if c.is_empty() {
        (0.0, 0.0)
    } else {
        let m = -math::pairwise_sum(&c) / c.len() as f64;
        (m, centered_mean_sq(&c, -m))
    };
    let intra = p_a * var_a + p_c * var_c;
    let da = m_a - mean;
    let dc = -m_c - mean;
    let inter = p_a * da * da + p_c * dc * dc;
    // A population with negative ξ in A (or positive in C) cannot arise from
    // decompositions, but the split above stays valid; clamp for the bound.
    let bound = variance_lower_bound(p_a, 1.0 - p_a, m_a.max(0.0), m_c.max(0.0))?;
    Ok(VarianceReport {
        var_xi,
        p_a,
        p_c,
        m_a,
        m_c,
        bound,
        intra,
        inter,
    })
}

fn centered_mean_sq(xs: &[f64], mean: f64) -> f64 {
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    math::pairwise_sum(&dev) / xs.len() as f64
}
