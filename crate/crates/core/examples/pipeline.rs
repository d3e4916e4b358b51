//! Runs a short semi-supervised pipeline on a small synthetic dataset and
//! prints the committee score of every round.

use semidpo_core::datagen::{conflict_stats, gen_dataset, GenProfile};
use semidpo_core::diffusion::NoiseSchedule;
use semidpo_core::exec::Serial;
use semidpo_core::model::{Activation, Arch};
use semidpo_core::rewards::RewardCommittee;
use semidpo_core::semitrain::{run_pipeline, OptimConfig, PipelineConfig};

fn main() -> semidpo_core::Result<()> {
    let committee = RewardCommittee::standard();
    let profile = GenProfile {
        n_pairs: 2000,
        d: 4,
        d_c: 4,
        committee: committee.clone(),
        concentration: 1.0,
        noise_scale: 0.3,
        condition_scale: 1.0,
        seed: 0,
    };
    let data = gen_dataset(&profile)?;
    for (k, c) in conflict_stats(&data, &committee)?.iter().enumerate() {
        println!("dim {k}: p_c {:.3}", c.p_c);
    }

    let sched = NoiseSchedule::linear(100, 1e-4, 0.02)?;
    let arch = Arch {
        x_dim: 4,
        cond_dim: 4,
        time_dim: 8,
        hidden: vec![32, 32],
        activation: Activation::Tanh,
        horizon: 100,
    };
    let defaults = PipelineConfig::default();
    let cfg = PipelineConfig {
        pretrain: OptimConfig {
            steps: 500,
            ..defaults.pretrain
        },
        cold: OptimConfig {
            steps: 200,
            ..defaults.cold
        },
        iter: OptimConfig {
            steps: 200,
            ..defaults.iter
        },
        ..defaults
    };
    let out = run_pipeline(&cfg, &arch, &sched, &committee, &data, &Serial, &mut ())?;
    println!(
        "{} clean, {} noisy pairs",
        out.partition.labeled.len(),
        out.partition.unlabeled.len()
    );
    for state in &out.iterations {
        let m = &state.metrics;
        println!(
            "iter {}: aggregate {:.4}, {} pseudo-labels accepted",
            m.iteration, m.eval.aggregate, m.n_accepted
        );
    }
    Ok(())
}
