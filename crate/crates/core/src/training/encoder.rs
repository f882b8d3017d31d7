//! Encoder pretraining (two-stage procedure, step 1): map a trajectory
//! prefix plus intervention to the mechanistic parameter estimate by
//! minimizing MSE against simulation labels.

use super::{EpochRow, TrainConfig, TrainReport, ValTracker};
use crate::adam::{AdamConfig, AdamState};
use crate::datagen::pendulum::{EncoderDataset, LabeledRecord};
use crate::error::{Error, Result};
use crate::nn::{BnMode, EncoderConfig, EncoderNet};
use crate::odeint::{InterventionSchedule, Trajectory};
use crate::seeds;
use crate::tape::{Engine, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;

/// Grid points consumed by the encoder (the first 10 s at dt = 0.1).
pub const ENCODER_WINDOW_LEN: usize = 100;

/// Per-step features: state channels then intervention channels, steps
/// concatenated in time order.
pub fn flatten_window(
    traj: &Trajectory,
    sched: &InterventionSchedule,
    start: usize,
    len: usize,
) -> Vec<f64> {
    let k = traj.state_dim();
    let r = sched.eta_dim();
    let mut out = Vec::with_capacity(len * (k + r));
    for p in start..start + len {
        out.extend_from_slice(traj.state(p));
        out.extend_from_slice(sched.value(p));
    }
    out
}

/// Flattened prefix windows and labels for a record list.
pub fn encoder_windows(records: &[LabeledRecord], window_len: usize) -> (Tensor, Tensor) {
    let n = records.len();
    let feat = window_len * 3;
    let mut x = Vec::with_capacity(n * feat);
    let mut y = Vec::with_capacity(n * 2);
    for r in records {
        x.extend(flatten_window(&r.trajectory, &r.schedule, 0, window_len));
        y.extend_from_slice(&r.label);
    }
    (Tensor::matrix(n, feat, x), Tensor::matrix(n, 2, y))
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let cols = x.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::matrix(idx.len(), cols, data)
}

fn mse_rows(pred: &Tensor, target: &Tensor) -> f64 {
    let n = pred.rows() as f64;
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

/// Train an encoder on labeled point-mass simulations; returns the
/// best-validation network.
pub fn pretrain_encoder(
    data: &EncoderDataset,
    cfg: &TrainConfig,
    run_dir: Option<&std::path::Path>,
) -> Result<(EncoderNet, TrainReport)> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("encoder pretraining needs train and val records"));
    }
    let window_len = ENCODER_WINDOW_LEN.min(data.train[0].trajectory.num_points());
    let (x_train, y_train) = encoder_windows(&data.train, window_len);
    let (x_val, y_val) = encoder_windows(&data.val, window_len);

    let enc_cfg = EncoderConfig {
        window_len,
        feat_dim: 3,
        hidden_dim: 128,
        output_dim: 2,
    };
    let mut net = EncoderNet::new(enc_cfg, &mut seeds::rng(cfg.seed, "encoder-init"));
    let mut adam_cfg = AdamConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut adam = AdamState::new(&net.params());
    let mut shuffle_rng = seeds::rng(cfg.seed, "encoder-batches");

    let n_train = data.train.len();
    let mut indices: Vec<usize> = (0..n_train).collect();
    let mut tracker = ValTracker::new(cfg.early_stop_tol);
    let mut best_net = net.clone();
    let mut report = TrainReport::empty();

    for epoch in 0..cfg.max_epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in indices.chunks(cfg.batch_size) {
            let xb = gather_rows(&x_train, chunk);
            let yb = gather_rows(&y_train, chunk);
            let b = chunk.len() as f64;

            let mut tape = Tape::new();
            let vals = net.bind(&mut tape, true);
            let xv = tape.constant(xb);
            let (out, stats) = vals.forward(&mut tape, &net, &xv, BnMode::Train);
            let yv = tape.constant(yb);
            let d = tape.sub(&out, &yv);
            let sq = tape.mul(&d, &d);
            let s = tape.sum_all(&sq);
            let loss = tape.scale(&s, 1.0 / b);
            let loss_val = tape.value(&loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss_val;
            n_batches += 1;

            let grads = tape.backward(loss)?;
            net.update_running(&stats);
            adam.step(&adam_cfg, &mut net.params_mut(), &grads)?;
        }
        let train_loss = epoch_loss / n_batches.max(1) as f64;

        let val_pred = net.infer(&x_val);
        let val_loss = mse_rows(&val_pred, &y_val);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        report.epochs.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            lr: adam_cfg.lr,
        });

        let (improved, stop, drop_lr) =
            tracker.observe(epoch, val_loss, cfg.early_stop_patience, &cfg.scheduler);
        if improved {
            best_net = net.clone();
        }
        if drop_lr {
            adam_cfg.lr *= cfg.scheduler.as_ref().unwrap().factor;
        }
        if stop {
            break;
        }
    }
    let (best_epoch, best_val) = tracker.best();
    report.best_epoch = best_epoch;
    report.best_val = best_val;

    if let Some(dir) = run_dir {
        super::write_run_artifacts(
            dir,
            &serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
            &report,
        )?;
        crate::hybrid::save_encoder(&best_net, &dir.join("encoder_best.ckpt"))?;
        crate::hybrid::save_encoder(&net, &dir.join("encoder_final.ckpt"))?;
    }
    Ok((best_net, report))
}

/// Batched inference: one (m̂, l̂_cm) row per record prefix.
pub fn infer_beta(
    net: &EncoderNet,
    trajs: &[(&Trajectory, &InterventionSchedule)],
) -> Vec<[f64; 2]> {
    let len = net.config.window_len;
    let feat = net.config.input_dim();
    let mut x = Vec::with_capacity(trajs.len() * feat);
    for (t, s) in trajs {
        x.extend(flatten_window(t, s, 0, len));
    }
    let out = net.infer(&Tensor::matrix(trajs.len(), feat, x));
    out.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::pendulum::{
        gen_encoder_pretraining_data, BetaRanges, PendulumSampleSpec, TauDistribution,
    };

    #[test]
    fn constant_label_dataset_trains_toward_zero_loss() {
        // All labels identical: the bias alone can fit them, so the loss
        // must fall fast and stay finite.
        let spec = PendulumSampleSpec {
            n: 40,
            ..Default::default()
        };
        let mut ds = gen_encoder_pretraining_data(
            40,
            &BetaRanges::default(),
            &spec,
            TauDistribution::Train,
            3,
        )
        .unwrap();
        for r in ds.train.iter_mut().chain(ds.val.iter_mut()) {
            r.label = [0.5, 0.25];
        }
        let mut cfg = TrainConfig::encoder_default();
        cfg.batch_size = 16;
        cfg.max_epochs = 20;
        cfg.learning_rate = 0.05;
        cfg.seed = 5;
        let (_, report) = pretrain_encoder(&ds, &cfg, None).unwrap();
        let first = report.epochs.first().unwrap().val_loss;
        let last = report.best_val;
        assert!(last < first, "val loss should decrease: {first} -> {last}");
        assert!(last < 0.05, "residual val loss {last}");
    }

    #[test]
    fn identical_windows_give_identical_estimates() {
        let spec = PendulumSampleSpec {
            n: 10,
            ..Default::default()
        };
        let ds = gen_encoder_pretraining_data(
            10,
            &BetaRanges::default(),
            &spec,
            TauDistribution::Train,
            9,
        )
        .unwrap();
        let mut cfg = TrainConfig::encoder_default();
        cfg.batch_size = 8;
        cfg.max_epochs = 1;
        let (net, _) = pretrain_encoder(&ds, &cfg, None).unwrap();
        let r = &ds.train[0];
        let beta = infer_beta(
            &net,
            &[
                (&r.trajectory, &r.schedule),
                (&r.trajectory, &r.schedule),
            ],
        );
        assert_eq!(beta[0], beta[1]);
    }
}
