//! The five subcommands. Each returns a human-readable summary for stdout;
//! files carry the machine-readable results.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use semidpo_core::datagen::{conflict_stats, gen_dataset_with, DimConflict};
use semidpo_core::diffusion::NoiseSchedule;
use semidpo_core::dpo::{variance_report, NoiseDraw, PreferencePair, VarianceReport};
use semidpo_core::evalrep::{compare_models, evaluate_model, EvalReport};
use semidpo_core::math;
use semidpo_core::model::DenoiserParams;
use semidpo_core::rewards::{consensus_partition, PartitionStats, PartitionedDataset};
use semidpo_core::semitrain::{
    measure_interval_accuracy, run_from_reference, run_pipeline, IterationMetrics, IterationState,
    PipelineObserver, PseudoLabelRecord, ThresholdTable, TimestepIntervals, TrainMode,
};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset, DatasetHeader, DATASET_VERSION};
use crate::error::{CliError, CliResult};
use crate::metrics::JsonlWriter;
use crate::parallel::Workers;
use crate::TOOL;

/// A validated config with its hash and worker pool.
pub struct Context {
    pub cfg: RunConfig,
    pub hash: String,
    pub workers: Workers,
}

impl Context {
    pub fn new(cfg: RunConfig) -> CliResult<Self> {
        cfg.validate()?;
        Ok(Self {
            hash: cfg.hash(),
            workers: Workers::new(cfg.workers)?,
            cfg,
        })
    }

    fn schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(self.cfg.schedule.build()?)
    }

    fn checkpoint_header(&self, label: &str) -> CheckpointHeader {
        let arch = self.cfg.arch();
        CheckpointHeader {
            n_params: arch.param_count(),
            arch,
            seed: self.cfg.train.seed,
            label: label.to_string(),
            tool: TOOL.to_string(),
            config_hash: self.hash.clone(),
        }
    }

    fn load_model(&self, path: &Path) -> CliResult<DenoiserParams> {
        let (_, params) = load_checkpoint(path)?;
        let want = self.cfg.arch();
        if *params.arch() != want {
            return Err(CliError::format(
                path,
                format!("architecture {:?} does not match the config's {:?}", params.arch(), want),
            ));
        }
        Ok(params)
    }
}

/// Wraps an output body with the tool version and config hash.
#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    tool: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(ctx: &Context, path: &Path, body: T) -> CliResult<()> {
    let stamped = Stamped {
        tool: TOOL,
        config_hash: &ctx.hash,
        body,
    };
    let mut text = serde_json::to_string_pretty(&stamped).expect("report serializes");
    text.push('\n');
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        None => Ok(()),
    }
}

fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn dataset_header(ctx: &Context, like: Option<&DatasetHeader>) -> DatasetHeader {
    let cfg = &ctx.cfg;
    DatasetHeader {
        version: DATASET_VERSION,
        d: like.map_or(cfg.data.d, |h| h.d),
        d_c: like.map_or(cfg.data.d_c, |h| h.d_c),
        k: like.map_or(cfg.committee.len(), |h| h.k),
        seed: like.map_or(cfg.data.seed, |h| h.seed),
        tool: TOOL.to_string(),
        config_hash: ctx.hash.clone(),
    }
}

fn conflict_table(ctx: &Context, stats: &[DimConflict]) -> String {
    let mut s = String::from("dim  name        p_a     p_c     p_tie\n");
    for (k, (c, spec)) in stats.iter().zip(ctx.cfg.committee.specs()).enumerate() {
        let _ = writeln!(s, "{k:<4} {:<10} {:.4}  {:.4}  {:.4}", spec.name(), c.p_a, c.p_c, c.p_tie);
    }
    s
}

/// Generates the synthetic dataset and writes it to `out`.
pub fn cmd_gen(ctx: &Context, out: &Path) -> CliResult<String> {
    let profile = ctx.cfg.gen_profile();
    let pairs = gen_dataset_with(&profile, &ctx.workers)?;
    save_dataset(out, &dataset_header(ctx, None), &pairs)?;
    let stats = conflict_stats(&pairs, &ctx.cfg.committee)?;
    Ok(format!(
        "wrote {} pairs to {}\n{}",
        pairs.len(),
        out.display(),
        conflict_table(ctx, &stats)
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutputs {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub stats: PathBuf,
}

impl FilterOutputs {
    /// `<stem>.labeled.jsonl`, `<stem>.unlabeled.jsonl` and
    /// `<stem>.partition.json` inside `out_dir`.
    pub fn for_dataset(dataset: &Path, out_dir: &Path) -> Self {
        let stem = dataset
            .file_stem()
            .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned());
        Self {
            labeled: out_dir.join(format!("{stem}.labeled.jsonl")),
            unlabeled: out_dir.join(format!("{stem}.unlabeled.jsonl")),
            stats: out_dir.join(format!("{stem}.partition.json")),
        }
    }
}

#[derive(Serialize)]
struct PartitionFile<'a> {
    stats: &'a PartitionStats,
    labeled_fraction: f64,
    committee: Vec<&'static str>,
}

/// Consensus-partitions a dataset file into clean and noisy files.
pub fn cmd_filter(ctx: &Context, dataset: &Path, out: &FilterOutputs) -> CliResult<String> {
    let (header, pairs) = load_dataset(dataset)?;
    let part = consensus_partition(&pairs, &ctx.cfg.committee)?;
    let h = dataset_header(ctx, Some(&header));
    save_dataset(&out.labeled, &h, &part.labeled)?;
    save_dataset(&out.unlabeled, &h, &part.unlabeled)?;
    let names: Vec<&'static str> = ctx.cfg.committee.specs().iter().map(|s| s.name()).collect();
    write_json(
        ctx,
        &out.stats,
        PartitionFile {
            stats: &part.stats,
            labeled_fraction: part.stats.labeled_fraction(),
            committee: names,
        },
    )?;
    let mut s = format!(
        "{} pairs: {} labeled ({:.4}), {} unlabeled\n",
        part.stats.n_total,
        part.stats.n_labeled,
        part.stats.labeled_fraction(),
        part.stats.n_unlabeled
    );
    for (k, (a, spec)) in part.stats.agreement.iter().zip(ctx.cfg.committee.specs()).enumerate() {
        let _ = writeln!(s, "dim {k} {:<10} agrees on {a} pairs", spec.name());
    }
    let _ = writeln!(s, "wrote {} and {}", out.labeled.display(), out.unlabeled.display());
    Ok(s)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricsLine<'a> {
    Run {
        tool: &'a str,
        config_hash: &'a str,
        dataset_sha256: &'a str,
        config: &'a RunConfig,
    },
    Reference {
        steps: usize,
        first_loss: Option<f64>,
        final_loss: Option<f64>,
        losses: &'a [f64],
    },
    Partition {
        stats: &'a PartitionStats,
        labeled_fraction: f64,
        /// Dataset indices of the held-out clean test pairs.
        clean_test: Vec<usize>,
    },
    Iteration(&'a IterationMetrics),
}

#[derive(Serialize)]
struct RecordLine<'a> {
    dataset_index: usize,
    #[serde(flatten)]
    record: &'a PseudoLabelRecord,
}

/// Persists pipeline artifacts as they are produced.
struct FileObserver<'a> {
    ctx: &'a Context,
    out_dir: PathBuf,
    metrics: JsonlWriter,
    thresholds: JsonlWriter,
    unlabeled_index: Vec<usize>,
    failure: Option<CliError>,
}

impl FileObserver<'_> {
    fn guard(&mut self, r: CliResult<()>) -> semidpo_core::Result<()> {
        r.map_err(|e| {
            let msg = e.to_string();
            self.failure = Some(e);
            semidpo_core::Error::Observer(msg)
        })
    }

    fn write_reference(&mut self, reference: &DenoiserParams, losses: &[f64]) -> CliResult<()> {
        let path = self.out_dir.join("reference.ckpt");
        save_checkpoint(&path, &self.ctx.checkpoint_header("reference"), reference)?;
        self.metrics.append(&MetricsLine::Reference {
            steps: losses.len(),
            first_loss: losses.first().copied(),
            final_loss: losses.last().copied(),
            losses,
        })
    }

    fn write_records(&self, iteration: usize, records: &[PseudoLabelRecord]) -> CliResult<()> {
        let mut w = JsonlWriter::create(&self.out_dir.join(format!("pseudo_labels_iter{iteration}.jsonl")))?;
        for r in records {
            w.append(&RecordLine {
                dataset_index: self.unlabeled_index[r.pair_index],
                record: r,
            })?;
        }
        Ok(())
    }

    fn write_iteration(&mut self, state: &IterationState) -> CliResult<()> {
        let label = format!("iter{}", state.iteration);
        let path = self.out_dir.join(format!("{label}.ckpt"));
        save_checkpoint(&path, &self.ctx.checkpoint_header(&label), &state.params)?;
        self.metrics.append(&MetricsLine::Iteration(&state.metrics))
    }
}

impl PipelineObserver for FileObserver<'_> {
    fn on_reference(&mut self, reference: &DenoiserParams, losses: &[f64]) -> semidpo_core::Result<()> {
        let r = self.write_reference(reference, losses);
        self.guard(r)
    }

    fn on_partition(&mut self, partition: &PartitionedDataset, clean_test: &[usize]) -> semidpo_core::Result<()> {
        self.unlabeled_index = partition.unlabeled_index.clone();
        let r = self.metrics.append(&MetricsLine::Partition {
            stats: &partition.stats,
            labeled_fraction: partition.stats.labeled_fraction(),
            clean_test: clean_test.iter().map(|&i| partition.labeled_index[i]).collect(),
        });
        self.guard(r)
    }

    fn on_thresholds(&mut self, table: &ThresholdTable) -> semidpo_core::Result<()> {
        let r = self.thresholds.append(table);
        self.guard(r)
    }

    fn on_pseudo_labels(&mut self, iteration: usize, records: &[PseudoLabelRecord]) -> semidpo_core::Result<()> {
        let r = self.write_records(iteration, records);
        self.guard(r)
    }

    fn on_iteration(&mut self, state: &IterationState) -> semidpo_core::Result<()> {
        let r = self.write_iteration(state);
        self.guard(r)
    }
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::DpoAll => "dpo_all",
        TrainMode::CleanOnly => "clean_only",
        TrainMode::Semi => "semi",
    }
}

/// Runs the training pipeline in `cfg.train.mode`, writing checkpoints,
/// metrics, threshold tables and pseudo-label records to `out_dir`. With
/// `reference`, pretraining is skipped and that checkpoint is used.
pub fn cmd_train(ctx: &Context, dataset: &Path, out_dir: &Path, reference: Option<&Path>) -> CliResult<String> {
    let (_, pairs) = load_dataset(dataset)?;
    let sched = ctx.schedule()?;
    let given = reference.map(|p| ctx.load_model(p)).transpose()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut metrics = JsonlWriter::create(&out_dir.join("metrics.jsonl"))?;
    let digest = file_sha256(dataset)?;
    metrics.append(&MetricsLine::Run {
        tool: TOOL,
        config_hash: &ctx.hash,
        dataset_sha256: &digest,
        config: &ctx.cfg,
    })?;
    let mut obs = FileObserver {
        ctx,
        out_dir: out_dir.to_path_buf(),
        metrics,
        thresholds: JsonlWriter::create(&out_dir.join("thresholds.jsonl"))?,
        unlabeled_index: Vec::new(),
        failure: None,
    };
    let cfg = &ctx.cfg;
    let result = match &given {
        Some(r) => obs
            .write_reference(r, &[])
            .and_then(|_| Ok(run_from_reference(&cfg.train, r, &sched, &cfg.committee, &pairs, &ctx.workers, &mut obs)?)),
        None => Ok(run_pipeline(&cfg.train, &cfg.arch(), &sched, &cfg.committee, &pairs, &ctx.workers, &mut obs)?),
    };
    let outcome = match (result, obs.failure.take()) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };

    let stats = &outcome.partition.stats;
    let mut s = format!(
        "mode {}: {} pairs, {} labeled ({:.4}), {} clean test\n",
        mode_name(cfg.train.mode),
        stats.n_total,
        stats.n_labeled,
        stats.labeled_fraction(),
        outcome.clean_test.len()
    );
    s.push_str("iter  aggregate   accepted  final_loss  acc(low t)  acc(high t)\n");
    for st in &outcome.iterations {
        let m = &st.metrics;
        let acc = m.eval.interval_accuracy.clone().unwrap_or_default();
        let third = (acc.len() / 3).max(1).min(acc.len().max(1));
        let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        let _ = writeln!(
            s,
            "{:<5} {:<11.5} {:<9} {:<11.5} {:<11.4} {:.4}",
            m.iteration,
            m.eval.aggregate,
            m.n_accepted,
            m.final_loss,
            mean(&acc[..third.min(acc.len())]),
            mean(&acc[acc.len().saturating_sub(third)..])
        );
    }
    let _ = writeln!(s, "artifacts in {}", out_dir.display());
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnoseEntry {
    pub dim: usize,
    pub name: &'static str,
    /// `None` is the whole timeline.
    pub bucket: Option<usize>,
    /// 1-based inclusive timestep range.
    pub t_min: usize,
    pub t_max: usize,
    #[serde(flatten)]
    pub report: VarianceReport,
    pub bound_holds: bool,
}

/// One `(t, ε)` per pair, `t` uniform in `[t_min, t_max]`.
fn diagnose_draws(seed: u64, n: usize, t_min: usize, t_max: usize, dim: usize) -> Vec<NoiseDraw> {
    use rand::Rng;
    (0..n)
        .map(|i| {
            let mut r = math::stream(seed, i as u64);
            let t = r.random_range(t_min..=t_max);
            NoiseDraw {
                t,
                eps: math::normal_vec(&mut r, dim),
            }
        })
        .collect()
}

/// Variance decomposition of `ξ` per reward dimension, over the whole
/// timeline and per timestep bucket.
pub fn diagnose_entries(
    ctx: &Context,
    params: &DenoiserParams,
    reference: &DenoiserParams,
    pairs: &[PreferencePair],
) -> CliResult<Vec<DiagnoseEntry>> {
    let sched = ctx.schedule()?;
    let cfg = &ctx.cfg;
    let layout = TimestepIntervals::new(sched.steps(), cfg.diagnose.buckets)?;
    let k_max = pairs
        .iter()
        .filter_map(|p| p.delta_r.as_ref().map(Vec::len))
        .min()
        .ok_or_else(|| CliError::Config("diagnose needs pairs with reward differences".into()))?;
    let mut ranges = vec![(None, 1, sched.steps())];
    ranges.extend((0..layout.count()).map(|j| {
        let (lo, hi) = layout.bounds(j);
        (Some(j), lo + 1, hi)
    }));
    let mut out = Vec::new();
    for (slot, &(bucket, t_min, t_max)) in ranges.iter().enumerate() {
        let seed = math::mix_seed(cfg.diagnose.seed, slot as u64);
        let draws = diagnose_draws(seed, pairs.len(), t_min, t_max, cfg.data.d);
        for k in 0..k_max {
            let report = variance_report(params, reference, pairs, k, &draws, cfg.train.beta, &sched, &ctx.workers)?;
            let name = cfg.committee.spec(k).map_or("unnamed", |s| s.name());
            out.push(DiagnoseEntry {
                dim: k,
                name,
                bucket,
                t_min,
                t_max,
                bound_holds: report.bound_holds(),
                report,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DiagnoseFile<'a> {
    checkpoint_sha256: String,
    dataset_sha256: String,
    entries: &'a [DiagnoseEntry],
}

pub fn cmd_diagnose(
    ctx: &Context,
    checkpoint: &Path,
    dataset: &Path,
    reference: &Path,
    out: &Path,
) -> CliResult<String> {
    let params = ctx.load_model(checkpoint)?;
    let reference = ctx.load_model(reference)?;
    let (_, pairs) = load_dataset(dataset)?;
    let entries = diagnose_entries(ctx, &params, &reference, &pairs)?;
    write_json(
        ctx,
        out,
        DiagnoseFile {
            checkpoint_sha256: file_sha256(checkpoint)?,
            dataset_sha256: file_sha256(dataset)?,
            entries: &entries,
        },
    )?;
    let mut s = String::from("dim  name        bucket  var_xi        bound         p_c\n");
    for e in entries.iter().filter(|e| e.bucket.is_none()) {
        let _ = writeln!(
            s,
            "{:<4} {:<10}  all     {:<13.6e} {:<13.6e} {:.4}",
            e.dim, e.name, e.report.var_xi, e.report.bound, e.report.p_c
        );
    }
    let violations = entries.iter().filter(|e| !e.bound_holds).count();
    let _ = writeln!(s, "{} reports, {violations} bound violations, written to {}", entries.len(), out.display());
    if violations > 0 {
        return Err(CliError::BoundViolated(violations));
    }
    Ok(s)
}

pub struct EvalInputs<'a> {
    pub checkpoint: &'a Path,
    pub baseline: Option<&'a Path>,
    /// With `reference`, classifier accuracy per interval is measured on
    /// the consensus-clean pairs of this dataset.
    pub dataset: Option<&'a Path>,
    pub reference: Option<&'a Path>,
    pub out: &'a Path,
    pub csv: Option<&'a Path>,
}

pub fn eval_report(ctx: &Context, inputs: &EvalInputs<'_>) -> CliResult<EvalReport> {
    let cfg = &ctx.cfg;
    let sched = ctx.schedule()?;
    let params = ctx.load_model(inputs.checkpoint)?;
    let prompts = cfg.train.eval.prompts(cfg.data.d_c);
    let n = cfg.train.eval.samples_per_prompt;
    let mut report = evaluate_model(
        &params,
        &cfg.committee,
        &prompts,
        n,
        &sched,
        &mut cfg.train.eval.rng(),
        &ctx.workers,
    )?;
    if let Some(b) = inputs.baseline {
        let base = ctx.load_model(b)?;
        let rates = compare_models(
            &params,
            &base,
            &cfg.committee,
            &prompts,
            n,
            &sched,
            &mut cfg.train.eval.rng(),
            &ctx.workers,
        )?;
        report.win_rate = Some(rates);
    }
    if let (Some(d), Some(r)) = (inputs.dataset, inputs.reference) {
        let reference = ctx.load_model(r)?;
        let (_, pairs) = load_dataset(d)?;
        let clean = consensus_partition(&pairs, &cfg.committee)?.labeled;
        let layout = TimestepIntervals::new(sched.steps(), cfg.train.thresholds.intervals)?;
        let acc = measure_interval_accuracy(
            &params,
            &reference,
            &clean,
            &layout,
            cfg.train.accuracy_draws,
            cfg.train.beta,
            &sched,
            &mut math::seeded(cfg.train.eval.seed),
            &ctx.workers,
        )?;
        report.interval_accuracy = Some(acc);
    }
    Ok(report)
}

pub fn eval_csv(ctx: &Context, report: &EvalReport) -> String {
    let mut s = String::from("dim,name,mean,win_rate\n");
    for (k, m) in report.per_dim_mean.iter().enumerate() {
        let name = ctx.cfg.committee.spec(k).map_or("unnamed", |s| s.name());
        let win = report
            .win_rate
            .as_ref()
            .map_or(String::new(), |w| w[k].to_string());
        let _ = writeln!(s, "{k},{name},{m},{win}");
    }
    let _ = writeln!(s, ",aggregate,{},", report.aggregate);
    s
}

pub fn cmd_eval(ctx: &Context, inputs: &EvalInputs<'_>) -> CliResult<String> {
    let report = eval_report(ctx, inputs)?;
    write_json(ctx, inputs.out, &report)?;
    if let Some(csv) = inputs.csv {
        ensure_parent(csv)?;
        std::fs::write(csv, eval_csv(ctx, &report)).map_err(|e| CliError::io(csv, e))?;
    }
    let mut s = format!("{} samples, aggregate {:.6}\n", report.n_samples, report.aggregate);
    for (k, m) in report.per_dim_mean.iter().enumerate() {
        let name = ctx.cfg.committee.spec(k).map_or("unnamed", |s| s.name());
        let _ = write!(s, "dim {k} {name:<10} mean {m:.6}");
        if let Some(w) = &report.win_rate {
            let _ = write!(s, "  win rate {:.4}", w[k]);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "written to {}", inputs.out.display());
    Ok(s)
}
