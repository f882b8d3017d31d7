//! Two-stage training: encoder pretraining on simulated labeled data, then
//! frozen-encoder correction training on observed trajectories, with
//! window-based batching and composition guarantees.

mod corrections;
mod encoder;
mod windows;

pub use corrections::{train_corrections_pendulum, train_corrections_pk};
pub use encoder::{encoder_windows, flatten_window, infer_beta, pretrain_encoder, ENCODER_WINDOW_LEN};
pub use windows::{sample_window_batch, WindowRef, WindowSource};

use crate::error::{Error, Result};
use crate::odeint::Trajectory;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without (val improvement > tol) before stopping.
    pub early_stop_patience: usize,
    pub early_stop_tol: f64,
    /// Learning-rate reduction on validation plateau.
    pub scheduler: Option<SchedulerConfig>,
    /// Window length in integration steps (a window spans window_len+1 points).
    pub window_len: usize,
    /// Minimum fraction of each batch starting at t = 0.
    pub zero_start_min: f64,
    /// Minimum fraction of each batch containing nonzero intervention.
    pub nonzero_eta_min: f64,
    /// Fraction of training trajectories held out for early stopping.
    pub val_fraction: f64,
    /// Global-norm gradient clip; None disables.
    pub grad_clip: Option<f64>,
    /// Batches per epoch; None means ceil(n_train / batch_size).
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Encoder pretraining defaults: Adam 1e-3, batch 256, weight decay
    /// 1e-5, plateau halving with patience 5, tolerance 1e-4, 25 epochs.
    pub fn encoder_default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            max_epochs: 25,
            early_stop_patience: 5,
            early_stop_tol: 1e-4,
            scheduler: Some(SchedulerConfig {
                factor: 0.5,
                patience: 5,
            }),
            window_len: 0,
            zero_start_min: 0.0,
            nonzero_eta_min: 0.0,
            val_fraction: 0.2,
            grad_clip: None,
            steps_per_epoch: None,
            seed: 0,
        }
    }

    /// Pendulum hybrid corrections: Adam 2e-4, batch 64, stop after 12
    /// non-improving epochs.
    pub fn pendulum_hybrid_default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 2e-4,
            weight_decay: 0.0,
            max_epochs: 60,
            early_stop_patience: 12,
            early_stop_tol: 0.0,
            scheduler: None,
            window_len: 20,
            zero_start_min: 0.15,
            nonzero_eta_min: 0.15,
            val_fraction: 0.1,
            grad_clip: Some(10.0),
            steps_per_epoch: None,
            seed: 0,
        }
    }

    /// Pendulum data-driven baseline: Adam 1e-3, batch 64, patience 12.
    pub fn pendulum_data_driven_default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            ..Self::pendulum_hybrid_default()
        }
    }

    /// PK training: Adam 1e-3, batch 32, 100 epochs, 40 s windows
    /// (80 steps), 15% zero-start and 15% nonzero-intervention per batch.
    pub fn pk_default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            max_epochs: 100,
            early_stop_patience: 100,
            early_stop_tol: 0.0,
            scheduler: None,
            window_len: 80,
            zero_start_min: 0.15,
            nonzero_eta_min: 0.15,
            val_fraction: 0.1,
            grad_clip: Some(10.0),
            steps_per_epoch: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("zero_start_min", self.zero_start_min),
            ("nonzero_eta_min", self.nonzero_eta_min),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!("{name} must be in [0,1], got {f}")));
            }
        }
        if self.zero_start_min + self.nonzero_eta_min > 1.0 {
            return Err(Error::config(
                "batch composition fractions must sum to at most 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    PlainMse,
    RelativeMse,
}

/// Reconstruction-loss shape: mean over points of the per-point sum of
/// squared channel errors, each channel divided by its normalizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub normalizers: Vec<f64>,
}

impl LossSpec {
    pub fn plain(channels: usize) -> Self {
        LossSpec {
            kind: LossKind::PlainMse,
            normalizers: vec![1.0; channels],
        }
    }

    /// PK relative MSE: Cp normalized by the 25 ug/mL safety limit, Ce by
    /// the 3.5 ug/mL typical target.
    pub fn pk_relative() -> Self {
        LossSpec {
            kind: LossKind::RelativeMse,
            normalizers: vec![25.0, 3.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.normalizers.iter().any(|&n| !(n > 0.0)) {
            return Err(Error::config("loss normalizers must be positive"));
        }
        Ok(())
    }
}

/// Mean over grid points of the squared channel errors (channels summed,
/// normalized per [`LossSpec`]). Trajectories must have identical shapes.
pub fn reconstruction_loss(pred: &Trajectory, target: &Trajectory, spec: &LossSpec) -> Result<f64> {
    if pred.state_dim() != target.state_dim() || pred.num_points() != target.num_points() {
        return Err(Error::Shape {
            context: "reconstruction_loss",
            expected: vec![target.num_points(), target.state_dim()],
            got: vec![pred.num_points(), pred.state_dim()],
        });
    }
    if spec.normalizers.len() != pred.state_dim() {
        return Err(Error::Shape {
            context: "loss normalizers",
            expected: vec![pred.state_dim()],
            got: vec![spec.normalizers.len()],
        });
    }
    let k = pred.state_dim();
    let mut acc = 0.0;
    for (p, t) in pred.states().chunks_exact(k).zip(target.states().chunks_exact(k)) {
        for ((a, b), n) in p.iter().zip(t.iter()).zip(spec.normalizers.iter()) {
            let d = (a - b) / n;
            acc += d * d;
        }
    }
    Ok(acc / pred.num_points() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainReport {
    pub fn empty() -> Self {
        TrainReport {
            epochs: Vec::new(),
            best_epoch: 0,
            best_val: f64::INFINITY,
        }
    }
}

/// Validation-driven plateau/early-stop bookkeeping shared by both loops.
pub(crate) struct ValTracker {
    best: f64,
    best_epoch: usize,
    since_improve: usize,
    since_lr_drop: usize,
    tol: f64,
}

impl ValTracker {
    pub fn new(tol: f64) -> Self {
        ValTracker {
            best: f64::INFINITY,
            best_epoch: 0,
            since_improve: 0,
            since_lr_drop: 0,
            tol,
        }
    }

    /// Returns (improved, should_stop, should_drop_lr).
    pub fn observe(
        &mut self,
        epoch: usize,
        val: f64,
        patience: usize,
        scheduler: &Option<SchedulerConfig>,
    ) -> (bool, bool, bool) {
        let improved = val < self.best - self.tol;
        if improved {
            self.best = val;
            self.best_epoch = epoch;
            self.since_improve = 0;
            self.since_lr_drop = 0;
        } else {
            self.since_improve += 1;
            self.since_lr_drop += 1;
        }
        let stop = self.since_improve > patience;
        let drop_lr = match scheduler {
            Some(s) if self.since_lr_drop > s.patience => {
                self.since_lr_drop = 0;
                true
            }
            _ => false,
        };
        (improved, stop, drop_lr)
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Run-directory artifacts: resolved config snapshot and the per-epoch CSV.
pub(crate) fn write_run_artifacts(
    run_dir: &std::path::Path,
    cfg_json: &serde_json::Value,
    report: &TrainReport,
) -> Result<()> {
    std::fs::create_dir_all(run_dir)?;
    let cfg_text = serde_json::to_string_pretty(cfg_json)
        .map_err(|e| Error::Config(format!("config snapshot: {e}")))?;
    std::fs::write(run_dir.join("config.json"), cfg_text)?;
    let mut csv = String::from("epoch,train_loss,val_loss,lr\n");
    for row in &report.epochs {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch,
            crate::textio::fmt_g17(row.train_loss),
            crate::textio::fmt_g17(row.val_loss),
            crate::textio::fmt_g17(row.lr)
        ));
    }
    std::fs::write(run_dir.join("epochs.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeint::TimeGrid;

    fn traj(vals: Vec<f64>, k: usize) -> Trajectory {
        let points = vals.len() / k;
        Trajectory::new(
            TimeGrid::new(0.0, 0.1, points - 1).unwrap(),
            k,
            vals,
        )
    }

    #[test]
    fn identical_trajectories_have_zero_loss() {
        let a = traj(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2);
        let loss = reconstruction_loss(&a, &a, &LossSpec::plain(2)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn pendulum_loss_single_point_error() {
        // dtheta = 1 at one of T points, batch 1 -> loss = 1/T.
        let t_points = 5;
        let mut a = vec![0.0; t_points * 2];
        let b = vec![0.0; t_points * 2];
        a[2 * 3] = 1.0; // theta error of 1 at point 3
        let loss =
            reconstruction_loss(&traj(a, 2), &traj(b, 2), &LossSpec::plain(2)).unwrap();
        assert!((loss - 1.0 / t_points as f64).abs() < 1e-15);
    }

    #[test]
    fn pk_relative_loss_saturated_cp_error() {
        // dCp = 25 everywhere, dCe = 0 -> loss = 1.
        let t_points = 7;
        let mut a = vec![0.0; t_points * 2];
        let b = vec![0.0; t_points * 2];
        for p in 0..t_points {
            a[p * 2] = 25.0;
        }
        let loss =
            reconstruction_loss(&traj(a, 2), &traj(b, 2), &LossSpec::pk_relative()).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = traj(vec![0.0; 10], 2);
        let b = traj(vec![0.0; 12], 2);
        assert!(reconstruction_loss(&a, &b, &LossSpec::plain(2)).is_err());
    }

    #[test]
    fn config_fraction_validation() {
        let mut cfg = TrainConfig::pk_default();
        cfg.zero_start_min = 0.7;
        cfg.nonzero_eta_min = 0.5;
        assert!(cfg.validate().is_err());
        cfg.nonzero_eta_min = 0.3;
        assert!(cfg.validate().is_ok());
    }
}
