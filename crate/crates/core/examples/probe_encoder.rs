//! Scratch probe: encoder identifiability at desk scale (not part of the
//! test suite).

use greybox::datagen::{
    gen_encoder_pretraining_data, gen_pendulum_dataset, BetaRanges, PendulumSampleSpec,
    TauDistribution,
};
use greybox::eval::median;
use greybox::odeint::{InterventionSchedule, Trajectory};
use greybox::training::{infer_beta, pretrain_encoder, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(25);

    let spec = PendulumSampleSpec::default();
    let ranges = BetaRanges::default();
    let t0 = Instant::now();

    // tau != 0: both parameters identifiable.
    let ds = gen_encoder_pretraining_data(n, &ranges, &spec, TauDistribution::Train, 11).unwrap();
    let mut cfg = TrainConfig::encoder_default();
    cfg.max_epochs = epochs;
    cfg.seed = 42;
    let (net, report) = pretrain_encoder(&ds, &cfg, None).unwrap();
    println!(
        "trained {} epochs in {:.1}s, best val {:.5}",
        report.epochs.len(),
        t0.elapsed().as_secs_f64(),
        report.best_val
    );

    let inputs: Vec<(&Trajectory, &InterventionSchedule)> = ds
        .val
        .iter()
        .map(|r| (&r.trajectory, &r.schedule))
        .collect();
    let est = infer_beta(&net, &inputs);
    let mut m_err: Vec<f64> = Vec::new();
    let mut l_err: Vec<f64> = Vec::new();
    for (e, r) in est.iter().zip(ds.val.iter()) {
        m_err.push((e[0] - r.label[0]).abs() / r.label[0]);
        l_err.push((e[1] - r.label[1]).abs() / r.label[1]);
    }
    println!(
        "tau!=0: median rel err m = {:.3}, l_cm = {:.3}",
        median(&mut m_err),
        median(&mut l_err)
    );

    // tau == 0: m unidentifiable; compare m MSE vs label-mean prediction.
    let ds0 = gen_encoder_pretraining_data(n, &ranges, &spec, TauDistribution::Zero, 12).unwrap();
    let (net0, _) = pretrain_encoder(&ds0, &cfg, None).unwrap();
    let inputs0: Vec<(&Trajectory, &InterventionSchedule)> = ds0
        .val
        .iter()
        .map(|r| (&r.trajectory, &r.schedule))
        .collect();
    let est0 = infer_beta(&net0, &inputs0);
    let m_mean = ds0.train.iter().map(|r| r.label[0]).sum::<f64>() / ds0.train.len() as f64;
    let mut mse_net = 0.0;
    let mut mse_mean = 0.0;
    let mut l0_err: Vec<f64> = Vec::new();
    for (e, r) in est0.iter().zip(ds0.val.iter()) {
        mse_net += (e[0] - r.label[0]).powi(2);
        mse_mean += (m_mean - r.label[0]).powi(2);
        l0_err.push((e[1] - r.label[1]).abs() / r.label[1]);
    }
    mse_net /= ds0.val.len() as f64;
    mse_mean /= ds0.val.len() as f64;
    println!(
        "tau==0: m MSE net = {:.4}, mean-pred = {:.4}, ratio = {:.3}; l_cm median rel err = {:.3}",
        mse_net,
        mse_mean,
        mse_net / mse_mean,
        median(&mut l0_err)
    );

    // Transfer check: what does the encoder output on cylinder data?
    let cyl_spec = PendulumSampleSpec {
        n: 200,
        ..Default::default()
    };
    let cyl = gen_pendulum_dataset(&cyl_spec, TauDistribution::Train, 99).unwrap();
    let cin: Vec<(&Trajectory, &InterventionSchedule)> = cyl
        .records
        .iter()
        .map(|r| (&r.trajectory, &r.schedule))
        .collect();
    let cyl_beta = infer_beta(&net, &cin);
    let (mut m_min, mut m_max, mut l_min, mut l_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for b in &cyl_beta {
        m_min = m_min.min(b[0]);
        m_max = m_max.max(b[0]);
        l_min = l_min.min(b[1]);
        l_max = l_max.max(b[1]);
    }
    println!("cylinder transfer: m_hat in [{m_min:.2}, {m_max:.2}], l_hat in [{l_min:.2}, {l_max:.2}]");
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
