//! Cold start followed by iterative self-training.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pseudo::{decide, measure_interval_accuracy, score_pairs, Decision, PseudoLabelRecord};
use super::thresholds::{build_thresholds, ThresholdParams, ThresholdTable, TimestepIntervals};
use super::train::{pretrain_reference, train_phase, LossWeights, OptimConfig, PhaseData, StepLog};
use crate::diffusion::NoiseSchedule;
use crate::dpo::{Origin, PreferencePair, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::evalrep::{eval_prompts, evaluate_model, EvalReport};
use crate::exec::Executor;
use crate::math::{self, mix_seed, SeededRng};
use crate::model::{Arch, DenoiserParams};
use crate::rewards::{consensus_partition, PartitionedDataset, RewardCommittee};

const TAG_PRETRAIN: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_TRAIN: u64 = 3;
const TAG_PSEUDO: u64 = 4;
const TAG_ACCURACY: u64 = 5;
const TAG_PROMPTS: u64 = 6;
const TAG_EVAL: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Every non-test pair is trusted as labeled, no pseudo-labels.
    DpoAll,
    /// Stops after the cold start.
    CleanOnly,
    #[default]
    Semi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub prompts: usize,
    pub samples_per_prompt: usize,
    /// Half-width of the uniform condition box.
    pub condition_scale: f64,
    pub seed: u64,
}

impl EvalConfig {
    /// The fixed condition grid scored after every iteration.
    pub fn prompts(&self, d_c: usize) -> Vec<Vec<f64>> {
        eval_prompts(self.prompts, d_c, self.condition_scale, mix_seed(self.seed, TAG_PROMPTS))
    }

    /// Sampling generator shared by every evaluation of a run, so that
    /// iterations and modes are scored on common noise.
    pub fn rng(&self) -> SeededRng {
        math::seeded(mix_seed(self.seed, TAG_EVAL))
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 50,
            samples_per_prompt: 4,
            condition_scale: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: TrainMode,
    /// Self-training rounds after the cold start.
    pub iterations: usize,
    pub beta: f64,
    pub weights: LossWeights,
    pub thresholds: ThresholdParams,
    /// Stratified timestep draws per noisy pair for pseudo-labeling.
    pub pseudo_draws: usize,
    /// Probes per clean test pair and interval for accuracy measurement.
    pub accuracy_draws: usize,
    pub test_fraction: f64,
    pub pretrain: OptimConfig,
    pub cold: OptimConfig,
    pub iter: OptimConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Semi,
            iterations: 2,
            beta: DEFAULT_BETA,
            weights: LossWeights::default(),
            thresholds: ThresholdParams::default(),
            pseudo_draws: 4,
            accuracy_draws: 16,
            test_fraction: 0.02,
            pretrain: OptimConfig {
                steps: 2000,
                lr: 1e-2,
                momentum: 0.9,
                batch_size: 64,
                warmup_fraction: 0.1,
            },
            cold: OptimConfig {
                steps: 500,
                lr: 1e-3,
                ..OptimConfig::default()
            },
            iter: OptimConfig {
                steps: 500,
                lr: 1e-4,
                ..OptimConfig::default()
            },
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        crate::dpo::check_beta(self.beta)?;
        self.thresholds.validate()?;
        self.pretrain.validate()?;
        self.cold.validate()?;
        self.iter.validate()?;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("test fraction", alloc::format!("{}", self.test_fraction)));
        }
        if self.pseudo_draws == 0 || self.accuracy_draws == 0 {
            return Err(Error::invalid("probe draws", "must be positive"));
        }
        let w = self.weights;
        if !(w.anchor >= 0.0 && w.pseudo >= 0.0 && w.anchor.is_finite() && w.pseudo.is_finite()) {
            return Err(Error::invalid("loss weights", "must be finite and non-negative"));
        }
        if self.eval.prompts == 0 || self.eval.samples_per_prompt == 0 {
            return Err(Error::invalid("evaluation", "prompt and sample counts must be positive"));
        }
        Ok(())
    }

    /// Number of trained models, cold start included.
    pub fn rounds(&self) -> usize {
        match self.mode {
            TrainMode::CleanOnly => 1,
            _ => self.iterations + 1,
        }
    }
}

/// Seed of the training phase of iteration `i`.
pub fn phase_seed(seed: u64, iteration: usize) -> u64 {
    mix_seed(mix_seed(seed, TAG_TRAIN), iteration as u64)
}

/// Seeded hold-out of `⌈fraction·n⌉` items. Returns `(train, test)`
/// indices, each ascending.
pub fn split_clean(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Empty("clean labeled set"));
    }
    let n_test = (libm::ceil(fraction * n as f64) as usize).max(1);
    if n_test >= n {
        return Err(Error::invalid(
            "clean split",
            alloc::format!("{n} labeled pairs leave no training data"),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut math::seeded(seed));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mode: TrainMode,
    pub steps: usize,
    pub lr: f64,
    pub n_anchor: usize,
    pub n_records: usize,
    pub n_accepted: usize,
    pub n_keep: usize,
    pub n_swap: usize,
    pub acceptance_fraction: f64,
    /// Among accepted records with known reward differences, the fraction
    /// whose orientation agrees with the sign of `Σ_k Δr_k`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate_agreement: Option<f64>,
    pub final_loss: f64,
    /// Weighted batch objective at every step.
    pub losses: Vec<f64>,
    /// Committee scores of ancestral samples, with per-interval classifier
    /// accuracy on the clean test split.
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub iteration: usize,
    pub params: DenoiserParams,
    /// Absent for the cold start and for runs without pseudo-labels.
    pub thresholds: Option<ThresholdTable>,
    pub steps: Vec<StepLog>,
    pub metrics: IterationMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub reference: DenoiserParams,
    pub pretrain_losses: Vec<f64>,
    pub partition: PartitionedDataset,
    /// Indices into `partition.labeled`.
    pub clean_train: Vec<usize>,
    pub clean_test: Vec<usize>,
    pub iterations: Vec<IterationState>,
}

impl PipelineOutcome {
    pub fn last(&self) -> &IterationState {
        // at least the cold start always runs
        &self.iterations[self.iterations.len() - 1]
    }
}

/// Receives artifacts as the pipeline produces them. Every hook defaults to
/// doing nothing; an error aborts the run.
pub trait PipelineObserver {
    fn on_reference(&mut self, _reference: &DenoiserParams, _losses: &[f64]) -> Result<()> {
        Ok(())
    }

    fn on_partition(&mut self, _partition: &PartitionedDataset, _clean_test: &[usize]) -> Result<()> {
        Ok(())
    }

    fn on_thresholds(&mut self, _table: &ThresholdTable) -> Result<()> {
        Ok(())
    }

    /// All records of an iteration, rejected ones included. `pair_index`
    /// points into `partition.unlabeled`.
    fn on_pseudo_labels(&mut self, _iteration: usize, _records: &[PseudoLabelRecord]) -> Result<()> {
        Ok(())
    }

    fn on_iteration(&mut self, _state: &IterationState) -> Result<()> {
        Ok(())
    }
}

impl PipelineObserver for () {}

/// Pretrains the reference on all candidates of `dataset`, then runs
/// [`run_from_reference`].
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline<E: Executor, O: PipelineObserver>(
    cfg: &PipelineConfig,
    arch: &Arch,
    sched: &NoiseSchedule,
    committee: &RewardCommittee,
    dataset: &[PreferencePair],
    exec: &E,
    observer: &mut O,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    arch.validate()?;
    let seed = mix_seed(cfg.seed, TAG_PRETRAIN);
    let (reference, losses) = pretrain_reference(arch, dataset, &cfg.pretrain, sched, seed, exec)?;
    observer.on_reference(&reference, &losses)?;
    let mut out = run_from_reference(cfg, &reference, sched, committee, dataset, exec, observer)?;
    out.pretrain_losses = losses;
    Ok(out)
}

/// Partitions, holds out the clean test split, trains the cold start from
/// the reference and then `iterations` self-training rounds, each starting
/// from and labeling with the previous model.
#[allow(clippy::too_many_arguments)]
pub fn run_from_reference<E: Executor, O: PipelineObserver>(
    cfg: &PipelineConfig,
    reference: &DenoiserParams,
    sched: &NoiseSchedule,
    committee: &RewardCommittee,
    dataset: &[PreferencePair],
    exec: &E,
    observer: &mut O,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let arch = reference.arch();
    if arch.horizon != sched.steps() {
        return Err(Error::invalid(
            "denoiser horizon",
            alloc::format!("{} differs from the schedule's {}", arch.horizon, sched.steps()),
        ));
    }
    let partition = consensus_partition(dataset, committee)?;
    let (train_idx, test_idx) = split_clean(partition.labeled.len(), cfg.test_fraction, mix_seed(cfg.seed, TAG_SPLIT))?;
    observer.on_partition(&partition, &test_idx)?;
    let clean_train: Vec<PreferencePair> = train_idx.iter().map(|&i| partition.labeled[i].clone()).collect();
    let clean_test: Vec<PreferencePair> = test_idx.iter().map(|&i| partition.labeled[i].clone()).collect();
    let noisy: Vec<PreferencePair> = partition
        .unlabeled
        .iter()
        .map(|p| PreferencePair {
            origin: Origin::Pseudo,
            ..p.clone()
        })
        .collect();
    let anchor_set: Vec<PreferencePair> = match cfg.mode {
        TrainMode::DpoAll => {
            let held: Vec<usize> = test_idx.iter().map(|&i| partition.labeled_index[i]).collect();
            dataset
                .iter()
                .enumerate()
                .filter(|(i, _)| held.binary_search(i).is_err())
                .map(|(_, p)| p.clone())
                .collect()
        }
        _ => clean_train,
    };

    let layout = TimestepIntervals::new(sched.steps(), cfg.thresholds.intervals)?;
    let prompts = cfg.eval.prompts(arch.cond_dim);
    let ctx = RoundContext {
        cfg,
        reference,
        sched,
        committee,
        exec,
        layout,
        prompts: &prompts,
        anchor: &anchor_set,
        noisy: &noisy,
        clean_test: &clean_test,
    };

    let mut states: Vec<IterationState> = Vec::with_capacity(cfg.rounds());
    let mut accuracy: Vec<f64> = Vec::new();
    for i in 0..cfg.rounds() {
        let prev = states.last();
        let state = ctx
            .round(i, prev, &accuracy, observer)
            .map_err(|e| e.at_iteration(i))?;
        observer.on_iteration(&state).map_err(|e| e.at_iteration(i))?;
        accuracy = state.metrics.eval.interval_accuracy.clone().unwrap_or_default();
        states.push(state);
    }

    Ok(PipelineOutcome {
        reference: reference.clone(),
        pretrain_losses: Vec::new(),
        partition,
        clean_train: train_idx,
        clean_test: test_idx,
        iterations: states,
    })
}

struct RoundContext<'a, E> {
    cfg: &'a PipelineConfig,
    reference: &'a DenoiserParams,
    sched: &'a NoiseSchedule,
    committee: &'a RewardCommittee,
    exec: &'a E,
    layout: TimestepIntervals,
    prompts: &'a [Vec<f64>],
    anchor: &'a [PreferencePair],
    noisy: &'a [PreferencePair],
    clean_test: &'a [PreferencePair],
}

impl<E: Executor> RoundContext<'_, E> {
    fn round<O: PipelineObserver>(
        &self,
        i: usize,
        prev: Option<&IterationState>,
        prev_accuracy: &[f64],
        observer: &mut O,
    ) -> Result<IterationState> {
        let cfg = self.cfg;
        let (init, optim) = match prev {
            None => (self.reference, &cfg.cold),
            Some(s) => (&s.params, &cfg.iter),
        };
        let self_train = i > 0 && cfg.mode == TrainMode::Semi;

        let mut records = Vec::new();
        let mut table = None;
        if self_train {
            let mut rng = math::seeded(mix_seed(mix_seed(cfg.seed, TAG_PSEUDO), i as u64));
            records = score_pairs(
                self.noisy,
                init,
                self.reference,
                cfg.pseudo_draws,
                cfg.beta,
                self.sched,
                &mut rng,
                self.exec,
            )?;
            let confidences: Vec<(usize, f64)> = records.iter().map(|r| (r.t, r.confidence)).collect();
            let previous = prev.and_then(|s| s.thresholds.as_ref());
            let t = build_thresholds(
                &confidences,
                prev_accuracy,
                &cfg.thresholds,
                self.sched.steps(),
                previous,
                i,
            )?;
            decide(&mut records, &t)?;
            observer.on_thresholds(&t)?;
            observer.on_pseudo_labels(i, &records)?;
            table = Some(t);
        }
        let accepted: Vec<&PseudoLabelRecord> = records.iter().filter(|r| r.is_accepted()).collect();
        debug_assert!(self.anchor.iter().all(|p| p.origin == Origin::Human));
        let data = PhaseData {
            anchor: self.anchor,
            pseudo_pairs: self.noisy,
            accepted: &accepted,
        };
        let (params, steps) = train_phase(
            init,
            self.reference,
            data,
            cfg.weights,
            optim,
            cfg.beta,
            self.sched,
            phase_seed(cfg.seed, i),
            self.exec,
        )?;

        let mut rng = math::seeded(mix_seed(mix_seed(cfg.seed, TAG_ACCURACY), i as u64));
        let interval_accuracy = measure_interval_accuracy(
            &params,
            self.reference,
            self.clean_test,
            &self.layout,
            cfg.accuracy_draws,
            cfg.beta,
            self.sched,
            &mut rng,
            self.exec,
        )?;
        let mut rng = cfg.eval.rng();
        let mut eval = evaluate_model(
            &params,
            self.committee,
            self.prompts,
            cfg.eval.samples_per_prompt,
            self.sched,
            &mut rng,
            self.exec,
        )?;
        eval.interval_accuracy = Some(interval_accuracy);

        let losses: Vec<f64> = steps.iter().map(|s| s.loss).collect();
        let tail = (losses.len() / 10).max(1).min(losses.len());
        let final_loss = if losses.is_empty() {
            0.0
        } else {
            math::pairwise_sum(&losses[losses.len() - tail..]) / tail as f64
        };
        let n_keep = accepted.iter().filter(|r| r.decision == Decision::Keep).count();
        let metrics = IterationMetrics {
            iteration: i,
            mode: cfg.mode,
            steps: optim.steps,
            lr: optim.lr,
            n_anchor: self.anchor.len(),
            n_records: records.len(),
            n_accepted: accepted.len(),
            n_keep,
            n_swap: accepted.len() - n_keep,
            acceptance_fraction: if records.is_empty() {
                0.0
            } else {
                accepted.len() as f64 / records.len() as f64
            },
            aggregate_agreement: aggregate_agreement(&accepted, self.noisy),
            final_loss,
            losses,
            eval,
        };
        Ok(IterationState {
            iteration: i,
            params,
            thresholds: table,
            steps,
            metrics,
        })
    }
}

fn aggregate_agreement(accepted: &[&PseudoLabelRecord], pairs: &[PreferencePair]) -> Option<f64> {
    let mut known = 0usize;
    let mut agree = 0usize;
    for r in accepted {
        let Some(d) = pairs.get(r.pair_index).and_then(|p| p.delta_r.as_ref()) else {
            continue;
        };
        let total: f64 = d.iter().sum();
        if total == 0.0 {
            continue;
        }
        known += 1;
        if (total > 0.0) == (r.decision == Decision::Keep) {
            agree += 1;
        }
    }
    (known > 0).then(|| agree as f64 / known as f64)
}
