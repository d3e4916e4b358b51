//! Pseudo-labeling, the composite objective and the self-training driver.

use std::sync::Mutex;

use proptest::prelude::*;
use rand::Rng;
use semidpo_core::datagen::{gen_dataset, GenProfile};
use semidpo_core::diffusion::NoiseSchedule;
use semidpo_core::dpo::{draw_noise, margin_logit, DpoItem, NoiseDraw, Origin, PreferencePair};
use semidpo_core::exec::{Executor, Serial};
use semidpo_core::math::{self, neg_log_sigmoid, SeededRng};
use semidpo_core::model::{init_params, Activation, Arch, DenoiserParams};
use semidpo_core::rewards::{PartitionedDataset, RewardCommittee};
use semidpo_core::semitrain::{
    anchor_loss, apply_pseudo_labels, build_thresholds, composite_loss, measure_interval_accuracy,
    phase_seed, pseudo_label_loss, pseudo_logit, run_from_reference, run_pipeline, train_dpo,
    Decision, IterationState, OptimConfig, PipelineConfig, PipelineObserver, PseudoLabelRecord,
    ThresholdParams, ThresholdTable, TimestepIntervals, TrainMode,
};
use semidpo_core::Result;

const BETA: f64 = 5.0;

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
}

fn small_arch() -> Arch {
    Arch {
        x_dim: 3,
        cond_dim: 3,
        time_dim: 4,
        hidden: vec![12],
        activation: Activation::Tanh,
        horizon: 100,
    }
}

fn jitter(p: &DenoiserParams, rng: &mut SeededRng, scale: f64) -> DenoiserParams {
    let theta = p
        .theta()
        .iter()
        .map(|v| v + scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    DenoiserParams::new(p.arch().clone(), theta).unwrap()
}

fn models(seed: u64) -> (DenoiserParams, DenoiserParams, SeededRng) {
    let mut rng = math::seeded(seed);
    let reference = init_params(&small_arch(), &mut rng).unwrap();
    let frozen = jitter(&reference, &mut rng, 0.3);
    (frozen, reference, rng)
}

fn pairs(rng: &mut SeededRng, n: usize) -> Vec<PreferencePair> {
    (0..n)
        .map(|_| {
            PreferencePair::new(
                math::normal_vec(rng, 3),
                math::normal_vec(rng, 3),
                math::normal_vec(rng, 3),
            )
        })
        .collect()
}

fn layout() -> TimestepIntervals {
    TimestepIntervals::new(100, 10).unwrap()
}

fn profile(n_pairs: usize, seed: u64) -> GenProfile {
    GenProfile {
        n_pairs,
        d: 3,
        d_c: 3,
        committee: RewardCommittee::standard(),
        concentration: 1.0,
        noise_scale: 0.3,
        condition_scale: 1.0,
        seed,
    }
}

fn quick(steps: usize, lr: f64) -> OptimConfig {
    OptimConfig {
        steps,
        lr,
        momentum: 0.9,
        batch_size: 16,
        warmup_fraction: 0.1,
    }
}

fn small_config(mode: TrainMode, iterations: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        mode,
        iterations,
        seed: 9,
        pretrain: quick(150, 1e-2),
        cold: quick(40, 1e-3),
        iter: quick(40, 1e-4),
        ..PipelineConfig::default()
    };
    cfg.eval.prompts = 6;
    cfg.eval.samples_per_prompt = 2;
    cfg.accuracy_draws = 2;
    cfg.test_fraction = 0.1;
    cfg
}

#[test]
fn infinite_thresholds_reject_everything() {
    let s = sched();
    let (frozen, reference, mut rng) = models(1);
    let unlabeled = pairs(&mut rng, 40);
    let table = ThresholdTable::uniform(layout(), f64::INFINITY, 1);
    let records = apply_pseudo_labels(&unlabeled, &frozen, &reference, &table, 4, BETA, &s, &mut rng, &Serial).unwrap();
    assert_eq!(records.len(), 160);
    assert!(records.iter().all(|r| r.decision == Decision::Reject));
    let accepted: Vec<&PseudoLabelRecord> = records.iter().filter(|r| r.is_accepted()).collect();
    assert_eq!(pseudo_label_loss(&frozen, &reference, &accepted, &unlabeled, BETA, &s).unwrap(), 0.0);
}

#[test]
fn zero_thresholds_accept_every_nonzero_logit() {
    let s = sched();
    let (frozen, reference, mut rng) = models(2);
    let unlabeled = pairs(&mut rng, 40);
    let table = ThresholdTable::uniform(layout(), 0.0, 1);
    let records = apply_pseudo_labels(&unlabeled, &frozen, &reference, &table, 4, BETA, &s, &mut rng, &Serial).unwrap();
    assert!(records.iter().all(|r| r.z != 0.0));
    assert!(records.iter().all(|r| r.is_accepted()));
    for r in &records {
        let want = if r.z > 0.0 { Decision::Keep } else { Decision::Swap };
        assert_eq!(r.decision, want);
        assert_eq!(r.confidence, r.z.abs());
        assert_eq!(r.interval, layout().index_of(r.t).unwrap());
    }
    assert!(records.iter().any(|r| r.decision == Decision::Swap));
}

#[test]
fn records_are_stratified_and_reproducible() {
    let s = sched();
    let (frozen, reference, mut rng) = models(3);
    let unlabeled = pairs(&mut rng, 10);
    let table = ThresholdTable::uniform(layout(), 0.0, 1);
    let a = apply_pseudo_labels(&unlabeled, &frozen, &reference, &table, 4, BETA, &s, &mut math::seeded(5), &Serial).unwrap();
    let b = apply_pseudo_labels(&unlabeled, &frozen, &reference, &table, 4, BETA, &s, &mut math::seeded(5), &Serial).unwrap();
    assert_eq!(a, b);
    for (i, chunk) in a.chunks(4).enumerate() {
        for (j, r) in chunk.iter().enumerate() {
            assert_eq!(r.pair_index, i);
            assert!(r.t > 25 * j && r.t <= 25 * (j + 1), "draw {j} at t {}", r.t);
            let z = pseudo_logit(&frozen, &reference, &unlabeled[i], r.t, &r.eps, BETA, &s).unwrap();
            assert_eq!(z, r.z);
        }
    }
}

#[test]
fn swapped_record_loss_negates_the_logit() {
    let s = sched();
    let (frozen, reference, mut rng) = models(4);
    let unlabeled = pairs(&mut rng, 30);
    let table = ThresholdTable::uniform(layout(), 0.0, 1);
    let records = apply_pseudo_labels(&unlabeled, &frozen, &reference, &table, 2, BETA, &s, &mut rng, &Serial).unwrap();
    let current = jitter(&frozen, &mut rng, 0.05);
    for r in records.iter().take(20) {
        let z_now = margin_logit(&current, &reference, &unlabeled[r.pair_index], r.t, &r.eps, BETA, &s).unwrap();
        let want = match r.decision {
            Decision::Keep => neg_log_sigmoid(z_now),
            Decision::Swap => neg_log_sigmoid(-z_now),
            Decision::Reject => unreachable!("τ = 0 accepts all"),
        };
        let got = pseudo_label_loss(&current, &reference, &[r], &unlabeled, BETA, &s).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
    let all: Vec<&PseudoLabelRecord> = records.iter().collect();
    let at_ref = pseudo_label_loss(&reference, &reference, &all, &unlabeled, BETA, &s).unwrap();
    assert!((at_ref - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn anchor_and_composite_losses() {
    let s = sched();
    let (params, reference, mut rng) = models(6);
    let labeled = pairs(&mut rng, 12);
    let unlabeled = pairs(&mut rng, 12);
    assert!(anchor_loss(&params, &reference, &[], BETA, &s, &mut rng).is_err());
    let at_ref = anchor_loss(&reference, &reference, &labeled, BETA, &s, &mut rng).unwrap();
    assert!((at_ref - std::f64::consts::LN_2).abs() < 1e-12);

    // anchor loss replays the same (t, ε) draws from an identically seeded rng
    let anchor = anchor_loss(&params, &reference, &labeled, BETA, &s, &mut math::seeded(77)).unwrap();
    let mut replay = math::seeded(77);
    let draws: Vec<NoiseDraw> = labeled.iter().map(|p| draw_noise(&mut replay, &s, p.x0_w.len())).collect();
    let terms: f64 = labeled
        .iter()
        .zip(&draws)
        .map(|(p, d)| neg_log_sigmoid(margin_logit(&params, &reference, p, d.t, &d.eps, BETA, &s).unwrap()))
        .sum();
    assert!((anchor - terms / labeled.len() as f64).abs() < 1e-12);

    let table = ThresholdTable::uniform(layout(), 0.0, 1);
    let records = apply_pseudo_labels(&unlabeled, &params, &reference, &table, 2, BETA, &s, &mut rng, &Serial).unwrap();
    let accepted: Vec<&PseudoLabelRecord> = records.iter().collect();
    let pseudo = pseudo_label_loss(&params, &reference, &accepted, &unlabeled, BETA, &s).unwrap();
    let total = composite_loss(&params, &reference, &labeled, &accepted, &unlabeled, BETA, &s, &mut math::seeded(77)).unwrap();
    assert!((total - (anchor + pseudo)).abs() < 1e-12);
    let bare = composite_loss(&params, &reference, &labeled, &[], &unlabeled, BETA, &s, &mut math::seeded(77)).unwrap();
    assert_eq!(bare, anchor);
    let both = composite_loss(&reference, &reference, &labeled, &accepted, &unlabeled, BETA, &s, &mut rng).unwrap();
    assert!((both - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn overfit_model_classifies_its_training_pairs() {
    let s = sched();
    let (_, reference, mut rng) = models(7);
    let test = pairs(&mut rng, 6);
    let (fit, _) = train_dpo(&reference, &reference, &test, &quick(1500, 3e-3), BETA, &s, 1, &Serial).unwrap();
    let acc = measure_interval_accuracy(&fit, &reference, &test, &layout(), 8, BETA, &s, &mut rng, &Serial).unwrap();
    let mean = acc.iter().sum::<f64>() / acc.len() as f64;
    assert!(mean > 0.95, "accuracy {acc:?}");
    let flat = measure_interval_accuracy(&reference, &reference, &test, &layout(), 8, BETA, &s, &mut rng, &Serial).unwrap();
    assert!(flat.iter().all(|a| *a == 0.0));
}

#[test]
fn accuracy_estimates_agree_across_disjoint_probe_sets() {
    let s = sched();
    let (frozen, reference, mut rng) = models(8);
    let test = pairs(&mut rng, 100);
    let draws = 10;
    let a = measure_interval_accuracy(&frozen, &reference, &test, &layout(), draws, BETA, &s, &mut math::seeded(1), &Serial).unwrap();
    let b = measure_interval_accuracy(&frozen, &reference, &test, &layout(), draws, BETA, &s, &mut math::seeded(2), &Serial).unwrap();
    let n = (test.len() * draws) as f64;
    for (x, y) in a.iter().zip(&b) {
        let p = 0.5 * (x + y);
        let sd = (2.0 * p * (1.0 - p) / n).sqrt();
        assert!((x - y).abs() <= 3.0 * sd.max(1.0 / n), "{x} vs {y}");
    }
    let empty: Vec<PreferencePair> = Vec::new();
    assert!(measure_interval_accuracy(&frozen, &reference, &empty, &layout(), draws, BETA, &s, &mut rng, &Serial).is_err());
}

/// Splits the index range across scoped threads.
struct Threads(usize);

impl Executor for Threads {
    fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let chunk = n.div_ceil(self.0).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|lo| {
                    let f = &f;
                    scope.spawn(move || (lo..(lo + chunk).min(n)).map(f).collect::<Vec<T>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        })
    }
}

#[derive(Default)]
struct Recorder {
    partition: Option<PartitionedDataset>,
    records: Vec<(usize, Vec<PseudoLabelRecord>)>,
    tables: Vec<ThresholdTable>,
    seen: Vec<usize>,
}

impl PipelineObserver for Recorder {
    fn on_partition(&mut self, partition: &PartitionedDataset, _clean_test: &[usize]) -> Result<()> {
        self.partition = Some(partition.clone());
        Ok(())
    }

    fn on_thresholds(&mut self, table: &ThresholdTable) -> Result<()> {
        self.tables.push(table.clone());
        Ok(())
    }

    fn on_pseudo_labels(&mut self, iteration: usize, records: &[PseudoLabelRecord]) -> Result<()> {
        self.records.push((iteration, records.to_vec()));
        Ok(())
    }

    fn on_iteration(&mut self, state: &IterationState) -> Result<()> {
        self.seen.push(state.iteration);
        Ok(())
    }
}

fn reference_for(data: &[PreferencePair], cfg: &PipelineConfig) -> DenoiserParams {
    let s = sched();
    semidpo_core::semitrain::pretrain_reference(&small_arch(), data, &cfg.pretrain, &s, 3, &Serial)
        .unwrap()
        .0
}

#[test]
fn cold_start_is_plain_dpo_on_the_clean_train_split() {
    let s = sched();
    let data = gen_dataset(&profile(300, 21)).unwrap();
    let cfg = small_config(TrainMode::Semi, 0);
    let reference = reference_for(&data, &cfg);
    let out = run_from_reference(&cfg, &reference, &s, &RewardCommittee::standard(), &data, &Serial, &mut ()).unwrap();
    assert_eq!(out.iterations.len(), 1);
    let clean: Vec<PreferencePair> = out.clean_train.iter().map(|&i| out.partition.labeled[i].clone()).collect();
    let (params, logs) = train_dpo(&reference, &reference, &clean, &cfg.cold, cfg.beta, &s, phase_seed(cfg.seed, 0), &Serial).unwrap();
    assert_eq!(out.last().params, params);
    let losses: Vec<f64> = logs.iter().map(|l| l.loss).collect();
    assert_eq!(out.last().metrics.losses, losses);
    assert_eq!(out.last().metrics.n_anchor, clean.len());
    assert!(out.last().thresholds.is_none());
}

#[test]
fn pseudo_labels_come_from_the_frozen_previous_model() {
    let s = sched();
    let data = gen_dataset(&profile(300, 22)).unwrap();
    let cfg = small_config(TrainMode::Semi, 2);
    let reference = reference_for(&data, &cfg);
    let mut rec = Recorder::default();
    let out = run_from_reference(&cfg, &reference, &s, &RewardCommittee::standard(), &data, &Serial, &mut rec).unwrap();
    assert_eq!(out.iterations.len(), 3);
    assert_eq!(rec.seen, vec![0, 1, 2]);
    assert_eq!(rec.tables.len(), 2);
    let unlabeled = &rec.partition.as_ref().unwrap().unlabeled;
    for (i, records) in &rec.records {
        let frozen = &out.iterations[i - 1].params;
        assert_eq!(records.len(), unlabeled.len() * cfg.pseudo_draws);
        for r in records.iter().step_by(7) {
            let z = pseudo_logit(frozen, &reference, &unlabeled[r.pair_index], r.t, &r.eps, cfg.beta, &s).unwrap();
            assert_eq!(z, r.z);
        }
        let m = &out.iterations[*i].metrics;
        assert_eq!(m.n_records, records.len());
        assert_eq!(m.n_accepted, records.iter().filter(|r| r.is_accepted()).count());
        assert_eq!(out.iterations[*i].thresholds.as_ref(), Some(&rec.tables[i - 1]));
    }
}

#[test]
fn clean_and_noisy_sets_stay_separate() {
    let s = sched();
    let data = gen_dataset(&profile(300, 23)).unwrap();
    let committee = RewardCommittee::standard();
    let mut cfg = small_config(TrainMode::Semi, 1);
    let reference = reference_for(&data, &cfg);
    let mut rec = Recorder::default();
    let semi = run_from_reference(&cfg, &reference, &s, &committee, &data, &Serial, &mut rec).unwrap();
    let p = &semi.partition;
    assert_eq!(p.labeled.len() + p.unlabeled.len(), data.len());
    assert!(p.labeled.iter().all(|x| x.origin == Origin::Human));
    for (_, records) in &rec.records {
        assert!(records.iter().all(|r| r.pair_index < p.unlabeled.len()));
    }
    assert!(semi.clean_test.iter().all(|i| semi.clean_train.binary_search(i).is_err()));
    assert_eq!(semi.iterations[1].metrics.n_anchor, semi.clean_train.len());

    cfg.mode = TrainMode::DpoAll;
    let all = run_from_reference(&cfg, &reference, &s, &committee, &data, &Serial, &mut ()).unwrap();
    assert_eq!(all.clean_test, semi.clean_test);
    assert_eq!(all.iterations[0].metrics.n_anchor, data.len() - all.clean_test.len());
    assert_eq!(all.iterations[1].metrics.n_records, 0);

    cfg.mode = TrainMode::CleanOnly;
    let clean = run_from_reference(&cfg, &reference, &s, &committee, &data, &Serial, &mut ()).unwrap();
    assert_eq!(clean.iterations.len(), 1);
    assert_eq!(clean.iterations[0].params, semi.iterations[0].params);
}

#[test]
fn empty_clean_set_fails_before_training() {
    let s = sched();
    let mut data = gen_dataset(&profile(50, 24)).unwrap();
    // make every pair non-unanimous by swapping the clean ones
    let committee = RewardCommittee::standard();
    for p in &mut data {
        let d = semidpo_core::rewards::reward_diffs(&committee, p).unwrap();
        if d.iter().all(|v| *v > 0.0) {
            *p = p.swapped();
        }
    }
    let cfg = small_config(TrainMode::Semi, 1);
    let reference = init_params(&small_arch(), &mut math::seeded(1)).unwrap();
    let mut rec = Recorder::default();
    let err = run_from_reference(&cfg, &reference, &s, &committee, &data, &Serial, &mut rec).unwrap_err();
    assert!(err.to_string().contains("clean"), "{err}");
    assert!(rec.seen.is_empty());
}

#[test]
fn worker_count_does_not_change_results() {
    let s = sched();
    let data = gen_dataset(&profile(200, 25)).unwrap();
    let committee = RewardCommittee::standard();
    let cfg = small_config(TrainMode::Semi, 1);
    let arch = small_arch();
    let serial = run_pipeline(&cfg, &arch, &s, &committee, &data, &Serial, &mut ()).unwrap();
    let threaded = run_pipeline(&cfg, &arch, &s, &committee, &data, &Threads(3), &mut ()).unwrap();
    assert_eq!(serial.reference, threaded.reference);
    assert_eq!(serial.pretrain_losses, threaded.pretrain_losses);
    for (a, b) in serial.iterations.iter().zip(&threaded.iterations) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn observer_errors_abort_the_run() {
    struct Failing(Mutex<usize>);
    impl PipelineObserver for Failing {
        fn on_iteration(&mut self, _state: &IterationState) -> Result<()> {
            *self.0.lock().unwrap() += 1;
            Err(semidpo_core::Error::Observer("stop".into()))
        }
    }
    let s = sched();
    let data = gen_dataset(&profile(200, 26)).unwrap();
    let cfg = small_config(TrainMode::Semi, 2);
    let reference = reference_for(&data, &cfg);
    let mut obs = Failing(Mutex::new(0));
    assert!(run_from_reference(&cfg, &reference, &s, &RewardCommittee::standard(), &data, &Serial, &mut obs).is_err());
    assert_eq!(*obs.0.lock().unwrap(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn thresholds_rise_with_percentile_and_falling_accuracy(
        values in prop::collection::vec((1usize..=100, 0.0f64..5.0), 1..200),
        p_lo in 0.05f64..0.9,
        dp in 0.0f64..0.09,
        acc in prop::collection::vec(0.0f64..1.0, 10),
    ) {
        let lo = ThresholdParams { percentile: p_lo, ..ThresholdParams::default() };
        let hi = ThresholdParams { percentile: p_lo + dp, ..ThresholdParams::default() };
        let ones = [1.0; 10];
        let a = build_thresholds(&values, &ones, &lo, 100, None, 1).unwrap();
        let b = build_thresholds(&values, &ones, &hi, 100, None, 1).unwrap();
        let gated = build_thresholds(&values, &acc, &lo, 100, None, 1).unwrap();
        for (j, &acc_j) in acc.iter().enumerate() {
            prop_assert!(b.tau[j] >= a.tau[j]);
            prop_assert!(gated.tau[j] >= a.tau[j]);
            if acc_j < lo.acc_floor && a.tau[j].is_finite() {
                prop_assert!(gated.tau[j] > a.tau[j]);
            }
        }
        let again = build_thresholds(&values, &acc, &lo, 100, Some(&gated), 2).unwrap();
        for j in 0..10 {
            prop_assert!(again.tau[j] >= gated.tau[j]);
            prop_assert!(again.raise_levels[j] >= gated.raise_levels[j]);
        }
    }
}

#[test]
fn dpo_items_honor_orientation() {
    let s = sched();
    let (p, r, mut rng) = models(30);
    let pair = pairs(&mut rng, 1).remove(0);
    let d = draw_noise(&mut rng, &s, 3);
    let mut item = DpoItem::new(&pair, &d);
    let z = semidpo_core::dpo::item_logit(&p, &r, &item, BETA, &s).unwrap();
    item.swapped = true;
    assert_eq!(semidpo_core::dpo::item_logit(&p, &r, &item, BETA, &s).unwrap(), -z);
}
