//! End-to-end checks of the two-stage training procedure at toy scale.

use greybox::datagen::{
    gen_encoder_pretraining_data, gen_pendulum_dataset, BetaRanges, PendulumSampleSpec,
    TauDistribution,
};
use greybox::gradcheck::{fd_gradient_at, relative_error_at, FD_STEP};
use greybox::hybrid::{build_model, Case, HybridModel, ModelConfig, ModelKind, NetDims};
use greybox::odeint::{integrate_differentiable, InterventionSchedule, OdeRhs, TimeGrid};
use greybox::tape::{Engine, Tape};
use greybox::tensor::Tensor;
use greybox::training::{
    pretrain_encoder, train_corrections_pendulum, TrainConfig,
};

fn small_model(kind: ModelKind, seed: u64) -> HybridModel {
    build_model(
        kind,
        Case::Pendulum,
        &ModelConfig {
            dims: Some(NetDims {
                hidden_dim: 16,
                num_blocks: 2,
                init_gain: 0.5,
            }),
            balance: None,
        },
        seed,
    )
}

/// Trajectory-loss gradients through the unrolled RK4 solver match central
/// finite differences.
#[test]
fn unrolled_trajectory_gradient_matches_finite_differences() {
    let model = small_model(ModelKind::Hybrid, 3);
    let beta = [[4.0f64, 2.1f64]];
    let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
    let eta = InterventionSchedule::constant(grid.num_points(), 11.0);
    let x0 = [0.1, -0.05];
    // Fixed synthetic target.
    let target: Vec<f64> = (0..grid.num_points() * 2)
        .map(|i| 0.05 * (i as f64 * 0.7).sin())
        .collect();

    let loss_for = |m: &HybridModel| -> f64 {
        let rhs = greybox::hybrid::PendulumModelRhs::new(m, &beta).unwrap();
        let mut e = greybox::tape::EvalEngine::new();
        let ctx = rhs.bind(&mut e, false);
        let x0v = e.constant(Tensor::matrix(1, 2, x0.to_vec()));
        let states =
            greybox::odeint::integrate_on(&mut e, &rhs, &ctx, x0v, &grid, &mut |p| {
                Tensor::matrix(1, 1, eta.value(p).to_vec())
            })
            .unwrap();
        let mut acc = 0.0;
        for (p, s) in states.iter().enumerate() {
            for (c, v) in s.data().iter().enumerate() {
                let d = v - target[p * 2 + c];
                acc += d * d;
            }
        }
        acc
    };

    // Autodiff gradient.
    let mut tape = Tape::new();
    let rhs = greybox::hybrid::PendulumModelRhs::new(&model, &beta).unwrap();
    let ctx = rhs.bind(&mut tape, true);
    let x0v = tape.constant(Tensor::matrix(1, 2, x0.to_vec()));
    let states = integrate_differentiable(&mut tape, &rhs, &ctx, x0v, &grid, &[&eta]).unwrap();
    let mut acc = None;
    for (p, s) in states.iter().enumerate() {
        let tv = tape.constant(Tensor::matrix(
            1,
            2,
            target[p * 2..p * 2 + 2].to_vec(),
        ));
        let d = tape.sub(s, &tv);
        let sq = tape.mul(&d, &d);
        let su = tape.sum_all(&sq);
        acc = Some(match acc {
            None => su,
            Some(a) => tape.add(&a, &su),
        });
    }
    let grads = tape.backward(acc.unwrap()).unwrap();
    let ad: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();

    // Finite differences on a deterministic subset of parameters.
    let mut m = model.clone();
    let flat0: Vec<f64> = m
        .params()
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    let total = flat0.len();
    let probe: Vec<usize> = (0..60).map(|i| (i * 97) % total).collect();
    let fd = fd_gradient_at(
        |flat| {
            let mut off = 0;
            for p in m.params_mut() {
                let n = p.numel();
                p.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
            loss_for(&m)
        },
        &flat0,
        FD_STEP,
        &probe,
    );
    let err = relative_error_at(&ad, &fd, &probe);
    assert!(err < 1e-4, "relative error {err}");
}

/// On windows with eta identically zero, the eta-gated networks receive
/// exactly zero gradient.
#[test]
fn eta_gated_networks_get_zero_gradient_without_intervention() {
    let model = small_model(ModelKind::Hybrid, 9);
    let beta = [[3.7f64, 2.0f64]];
    let grid = TimeGrid::new(0.0, 0.1, 8).unwrap();
    let eta = InterventionSchedule::zeros(grid.num_points(), 1);

    let mut tape = Tape::new();
    let rhs = greybox::hybrid::PendulumModelRhs::new(&model, &beta).unwrap();
    let ctx = rhs.bind(&mut tape, true);
    let x0v = tape.constant(Tensor::matrix(1, 2, vec![0.2, 0.0]));
    let states = integrate_differentiable(&mut tape, &rhs, &ctx, x0v, &grid, &[&eta]).unwrap();
    let last = states.last().unwrap();
    let sq = tape.mul(last, last);
    let loss = tape.sum_all(&sq);
    let grads = tape.backward(loss).unwrap();

    let per_net = model.nets[0].params().len();
    // Networks bind in order [theta_psi, theta_eta, omega_psi, omega_eta].
    for (i, range_start) in [(1usize, per_net), (3usize, 3 * per_net)] {
        for g in &grads[range_start..range_start + per_net] {
            assert!(
                g.data().iter().all(|&v| v == 0.0),
                "eta net {i} received nonzero gradient"
            );
        }
        let _ = i;
    }
    // Psi networks do receive gradient.
    assert!(grads[0..per_net]
        .iter()
        .any(|g| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn zero_max_epochs_returns_model_unchanged() {
    let spec = PendulumSampleSpec {
        n: 6,
        ..Default::default()
    };
    let data = gen_pendulum_dataset(&spec, TauDistribution::Train, 2).unwrap();
    let mut model = small_model(ModelKind::DataDrivenOnly, 5);
    let before: Vec<Vec<f64>> = model.params().iter().map(|p| p.data().to_vec()).collect();
    let mut cfg = TrainConfig::pendulum_data_driven_default();
    cfg.max_epochs = 0;
    let report = train_corrections_pendulum(&mut model, &data, None, &cfg, None).unwrap();
    assert!(report.epochs.is_empty());
    for (a, b) in before.iter().zip(model.params()) {
        assert_eq!(a, b.data());
    }
}

/// Step 2 must not touch the encoder: weights stay bit-identical.
#[test]
fn stage_separation_keeps_encoder_frozen() {
    let spec = PendulumSampleSpec {
        n: 12,
        ..Default::default()
    };
    let pre = gen_encoder_pretraining_data(
        30,
        &BetaRanges::default(),
        &spec,
        TauDistribution::Train,
        4,
    )
    .unwrap();
    let mut enc_cfg = TrainConfig::encoder_default();
    enc_cfg.max_epochs = 2;
    enc_cfg.batch_size = 16;
    let (encoder, _) = pretrain_encoder(&pre, &enc_cfg, None).unwrap();
    let before: Vec<Vec<f64>> = encoder.params().iter().map(|p| p.data().to_vec()).collect();

    let data = gen_pendulum_dataset(&spec, TauDistribution::Train, 6).unwrap();
    let mut model = small_model(ModelKind::Hybrid, 11);
    let mut cfg = TrainConfig::pendulum_hybrid_default();
    cfg.max_epochs = 2;
    cfg.batch_size = 16;
    train_corrections_pendulum(&mut model, &data, Some(&encoder), &cfg, None).unwrap();

    for (a, b) in before.iter().zip(encoder.params()) {
        assert_eq!(a, b.data());
    }
}

/// Same seed, same data, same config: identical epoch logs across runs.
#[test]
fn seeded_training_is_reproducible() {
    let spec = PendulumSampleSpec {
        n: 10,
        ..Default::default()
    };
    let data = gen_pendulum_dataset(&spec, TauDistribution::Train, 8).unwrap();
    let run = || {
        let mut model = small_model(ModelKind::DataDrivenOnly, 21);
        let mut cfg = TrainConfig::pendulum_data_driven_default();
        cfg.max_epochs = 3;
        cfg.batch_size = 16;
        cfg.seed = 13;
        train_corrections_pendulum(&mut model, &data, None, &cfg, None).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.epochs.len(), b.epochs.len());
    for (ra, rb) in a.epochs.iter().zip(b.epochs.iter()) {
        assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
        assert_eq!(ra.val_loss.to_bits(), rb.val_loss.to_bits());
    }
}

/// A short hybrid run on real cylinder data should reduce validation loss
/// below the mechanistic-only level it starts near.
#[test]
fn hybrid_training_reduces_validation_loss() {
    let spec = PendulumSampleSpec {
        n: 30,
        ..Default::default()
    };
    let pre = gen_encoder_pretraining_data(
        60,
        &BetaRanges::default(),
        &spec,
        TauDistribution::Train,
        14,
    )
    .unwrap();
    let mut enc_cfg = TrainConfig::encoder_default();
    enc_cfg.max_epochs = 3;
    let (encoder, _) = pretrain_encoder(&pre, &enc_cfg, None).unwrap();

    let data = gen_pendulum_dataset(&spec, TauDistribution::Train, 15).unwrap();
    let mut model = small_model(ModelKind::Hybrid, 31);
    let mut cfg = TrainConfig::pendulum_hybrid_default();
    cfg.max_epochs = 8;
    cfg.batch_size = 16;
    cfg.learning_rate = 2e-3;
    let report = train_corrections_pendulum(&mut model, &data, Some(&encoder), &cfg, None).unwrap();
    let first = report.epochs.first().unwrap().val_loss;
    assert!(
        report.best_val < first,
        "val loss did not improve: {first} -> {}",
        report.best_val
    );
}
