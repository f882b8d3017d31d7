//! Scratch timing/ordering probe for the pendulum suite (not part of the
//! test suite).

use greybox::eval::{run_replications, Experiment, PendulumSuiteConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let n_reps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);

    let mut cfg = PendulumSuiteConfig::desk_scale();
    cfg.n_train = n_train;
    cfg.n_test = 200;
    cfg.n_counterfactual = 200;
    cfg.n_encoder_sims = 1000;
    cfg.encoder_cfg.max_epochs = 15;
    cfg.hybrid_cfg.max_epochs = epochs;
    cfg.data_driven_cfg.max_epochs = epochs;

    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..n_reps as u64).map(|i| 1000 + i).collect();
    let out = run_replications(&Experiment::Pendulum(cfg), &seeds);
    println!("elapsed: {:.1}s for {n_reps} reps", t0.elapsed().as_secs_f64());
    for f in &out.failures {
        println!("FAILURE rep {}: {}", f.0, f.1);
    }
    for a in &out.aggregates {
        println!(
            "{:<12} {:<8} {} = {:.6} (sem {:?})",
            a.model, a.split, a.metric, a.mean, a.sem
        );
    }
}
