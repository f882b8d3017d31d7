//! Pendulum experiments: full-horizon reconstruction on in-distribution and
//! OOD intervention sets, and post-switch counterfactual outcome prediction.

use super::{mean, sem};
use crate::datagen::pendulum::{CounterfactualRecord, PendulumDataset, COUNTERFACTUAL_TAUS};
use crate::error::Result;
use crate::hybrid::{HybridModel, ModelKind, PendulumModelRhs};
use crate::nn::EncoderNet;
use crate::odeint::{integrate_batch_lenient, InterventionSchedule, TimeGrid, Trajectory};
use crate::training::infer_beta;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconCell {
    pub model: String,
    pub split: String,
    /// Mean over samples of the per-trajectory MSE (channel errors summed,
    /// averaged over grid points).
    pub mean_mse: f64,
    pub sem: Option<f64>,
    pub n: usize,
    /// Trajectories dropped for non-finite rollouts.
    pub excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconReport {
    pub cells: Vec<ReconCell>,
    pub per_trajectory: Vec<(String, String, Vec<f64>)>,
}

/// Rows per parallel rollout chunk; fixed so results never depend on the
/// worker count (rows are independent, so chunking is value-neutral).
const ROLLOUT_CHUNK: usize = 100;

fn rollout_chunks(
    model: &HybridModel,
    beta: &[[f64; 2]],
    x0s: &[Vec<f64>],
    grid: &TimeGrid,
    etas: &[&InterventionSchedule],
) -> Result<Vec<Trajectory>> {
    use rayon::prelude::*;
    let n = x0s.len();
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(ROLLOUT_CHUNK)
        .map(|lo| (lo, (lo + ROLLOUT_CHUNK).min(n)))
        .collect();
    let done: Vec<Result<Vec<Trajectory>>> = ranges
        .par_iter()
        .map(|&(lo, hi)| {
            let rhs = PendulumModelRhs::new(model, &beta[lo..hi])?;
            integrate_batch_lenient(&rhs, &x0s[lo..hi], grid, &etas[lo..hi])
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for r in done {
        out.extend(r?);
    }
    Ok(out)
}

fn beta_for(model: &HybridModel, encoder: Option<&EncoderNet>, data: &PendulumDataset) -> Vec<[f64; 2]> {
    match model.kind {
        ModelKind::DataDrivenOnly => vec![[1.0, 1.0]; data.records.len()],
        _ => {
            let enc = encoder.expect("encoder required for beta inference");
            let inputs: Vec<(&Trajectory, &InterventionSchedule)> = data
                .records
                .iter()
                .map(|r| (&r.trajectory, &r.schedule))
                .collect();
            infer_beta(enc, &inputs)
        }
    }
}

/// Roll out every record from its initial state under its recorded
/// intervention and score against the ground truth.
pub fn eval_reconstruction(
    models: &[(&str, &HybridModel)],
    encoder: Option<&EncoderNet>,
    splits: &[(&str, &PendulumDataset)],
) -> Result<ReconReport> {
    let mut cells = Vec::new();
    let mut per_traj = Vec::new();
    for (model_name, model) in models {
        for (split_name, data) in splits {
            let beta = beta_for(model, encoder, data);
            let grid = data.records[0].trajectory.grid;
            let x0s: Vec<Vec<f64>> = data
                .records
                .iter()
                .map(|r| r.trajectory.state(0).to_vec())
                .collect();
            let etas: Vec<&InterventionSchedule> =
                data.records.iter().map(|r| &r.schedule).collect();
            let preds = rollout_chunks(model, &beta, &x0s, &grid, &etas)?;

            let mut mses = Vec::new();
            let mut excluded = 0;
            for (pred, rec) in preds.iter().zip(&data.records) {
                if !pred.states().iter().all(|v| v.is_finite()) {
                    excluded += 1;
                    continue;
                }
                mses.push(pred.mse_vs(&rec.trajectory));
            }
            cells.push(ReconCell {
                model: model_name.to_string(),
                split: split_name.to_string(),
                mean_mse: mean(&mses),
                sem: sem(&mses),
                n: mses.len(),
                excluded,
            });
            per_traj.push((model_name.to_string(), split_name.to_string(), mses));
        }
    }
    Ok(ReconReport {
        cells,
        per_trajectory: per_traj,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfTauCell {
    pub model: String,
    pub tau: f64,
    /// Distance to the nearest training torque value.
    pub train_distance: f64,
    pub mean_mse: f64,
    pub sem: Option<f64>,
    pub n: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfOutcomeReport {
    pub cells: Vec<CfTauCell>,
}

/// Torque values the training interventions cover (tau = 10 + 0.5k, k 0..4).
pub const TRAIN_TAUS: [f64; 5] = [10.0, 10.5, 11.0, 11.5, 12.0];

pub fn distance_from_training(tau: f64) -> f64 {
    TRAIN_TAUS
        .iter()
        .map(|t| (tau - t).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Predict each record's post-switch branches from the true switch state
/// and score against the hidden ground truth. The encoder sees only the
/// 10 s prefix under the factual torque.
pub fn eval_counterfactual_outcomes(
    models: &[(&str, &HybridModel)],
    encoder: Option<&EncoderNet>,
    records: &[CounterfactualRecord],
) -> Result<CfOutcomeReport> {
    let mut cells = Vec::new();
    let prefix_inputs: Vec<(&Trajectory, &InterventionSchedule)> = records
        .iter()
        .map(|r| (&r.prefix, &r.prefix_schedule))
        .collect();
    for (model_name, model) in models {
        let beta = match model.kind {
            ModelKind::DataDrivenOnly => vec![[1.0, 1.0]; records.len()],
            _ => infer_beta(
                encoder.expect("encoder required for beta inference"),
                &prefix_inputs,
            ),
        };
        let branch_grid = records[0].branches[0].grid;
        let x0s: Vec<Vec<f64>> = records
            .iter()
            .map(|r| r.prefix.state(r.prefix.num_points() - 1).to_vec())
            .collect();

        for (ti, &tau) in COUNTERFACTUAL_TAUS.iter().enumerate() {
            let sched = InterventionSchedule::constant(branch_grid.num_points(), tau);
            let etas: Vec<&InterventionSchedule> = (0..records.len()).map(|_| &sched).collect();
            let preds = rollout_chunks(model, &beta, &x0s, &branch_grid, &etas)?;
            let mut mses = Vec::new();
            let mut excluded = 0;
            for (pred, rec) in preds.iter().zip(records) {
                if !pred.states().iter().all(|v| v.is_finite()) {
                    excluded += 1;
                    continue;
                }
                // The switch state is given; score the hidden steps.
                let truth = &rec.branches[ti];
                let k = pred.state_dim();
                let mut acc = 0.0;
                let hidden = pred.num_points() - 1;
                for p in 1..pred.num_points() {
                    for (a, b) in pred.state(p).iter().zip(truth.state(p)) {
                        acc += (a - b) * (a - b);
                    }
                }
                let _ = k;
                mses.push(acc / hidden as f64);
            }
            cells.push(CfTauCell {
                model: model_name.to_string(),
                tau,
                train_distance: distance_from_training(tau),
                mean_mse: mean(&mses),
                sem: sem(&mses),
                n: mses.len(),
                excluded,
            });
        }
    }
    Ok(CfOutcomeReport { cells })
}
