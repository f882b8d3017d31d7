//! Correction training (two-stage procedure, step 2): windows of observed
//! trajectories are reconstructed by differentiable RK4 rollouts and the
//! networks fitted by Adam, with the mechanistic core and any encoder kept
//! frozen.

use super::windows::{sample_window_batch, WindowRef, WindowSource};
use super::{EpochRow, LossSpec, TrainConfig, TrainReport, ValTracker};
use crate::adam::{clip_global_norm, AdamConfig, AdamState};
use crate::datagen::pendulum::PendulumDataset;
use crate::datagen::pk::{PkDataset, PkRecord, SplitGroup};
use crate::error::{Error, Result};
use crate::hybrid::{Case, HybridModel, ModelKind, PendulumModelRhs, PkModelRhs};
use crate::nn::EncoderNet;
use crate::odeint::{
    integrate_differentiable, InterventionSchedule, OdeRhs, TimeGrid, Trajectory,
};
use crate::seeds;
use crate::tape::{Engine, Tape};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

/// Rows per parallel tape chunk; fixed so results never depend on the
/// worker count.
const CHUNK_ROWS: usize = 8;

struct ChunkOutcome {
    loss_sum: f64,
    grads: Vec<Tensor>,
}

fn accumulate_chunks(done: Vec<Result<ChunkOutcome>>, scale: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut iter = done.into_iter();
    let first = iter.next().expect("at least one chunk")?;
    let mut loss = first.loss_sum;
    let mut grads = first.grads;
    for r in iter {
        let c = r?;
        loss += c.loss_sum;
        for (g, cg) in grads.iter_mut().zip(c.grads.iter()) {
            for (a, b) in g.data_mut().iter_mut().zip(cg.data()) {
                *a += b;
            }
        }
    }
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    Ok((loss * scale, grads))
}

/// Seeded train/validation split over record indices.
fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeds::rng(seed, "val-split"));
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Deterministic validation windows: stride-window coverage of every record.
fn stride_windows(n_records: usize, max_start: usize, window_len: usize) -> Vec<WindowRef> {
    let mut out = Vec::new();
    for traj in 0..n_records {
        let mut s = 0;
        loop {
            out.push(WindowRef { traj, start: s });
            if s >= max_start {
                break;
            }
            s = (s + window_len).min(max_start);
        }
    }
    out
}

// ── pendulum ────────────────────────────────────────────────────────

struct PendulumTask<'a> {
    records: Vec<&'a crate::datagen::pendulum::PendulumRecord>,
    beta: Vec<[f64; 2]>,
    grid: TimeGrid,
    window_len: usize,
}

impl PendulumTask<'_> {
    fn window_inputs(
        &self,
        windows: &[WindowRef],
    ) -> (Vec<f64>, Vec<[f64; 2]>, Vec<f64>, Vec<InterventionSchedule>) {
        let mut x0 = Vec::with_capacity(windows.len() * 2);
        let mut beta = Vec::with_capacity(windows.len());
        let mut starts = Vec::with_capacity(windows.len());
        let mut scheds = Vec::with_capacity(windows.len());
        for w in windows {
            let r = self.records[w.traj];
            x0.extend_from_slice(r.trajectory.state(w.start));
            beta.push(self.beta[w.traj]);
            starts.push(self.grid.time(w.start));
            scheds.push(r.schedule.slice(w.start, self.window_len + 1));
        }
        (x0, beta, starts, scheds)
    }

    /// Sum over windows and steps of squared channel errors, with gradients.
    fn chunk_eval(&self, model: &HybridModel, windows: &[WindowRef]) -> Result<ChunkOutcome> {
        let b = windows.len();
        let w = self.window_len;
        let (x0, beta, starts, scheds) = self.window_inputs(windows);
        let rhs = PendulumModelRhs::new(model, &beta)?.with_base_times(starts);
        let mut tape = Tape::new();
        let ctx = rhs.bind(&mut tape, true);
        let x0v = tape.constant(Tensor::matrix(b, 2, x0));
        let rel_grid = TimeGrid::new(0.0, self.grid.dt, w)?;
        let sched_refs: Vec<&InterventionSchedule> = scheds.iter().collect();
        let states =
            integrate_differentiable(&mut tape, &rhs, &ctx, x0v, &rel_grid, &sched_refs)?;

        let mut acc = None;
        for step in 1..=w {
            let mut target = Vec::with_capacity(b * 2);
            for win in windows {
                target.extend_from_slice(
                    self.records[win.traj].trajectory.state(win.start + step),
                );
            }
            let tv = tape.constant(Tensor::matrix(b, 2, target));
            let err = tape.sub(&states[step], &tv);
            let sq = tape.mul(&err, &err);
            let s = tape.sum_all(&sq);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(&a, &s),
            });
        }
        let loss = acc.expect("window_len >= 1");
        let loss_sum = tape.value(&loss).item();
        let grads = tape.backward(loss)?;
        Ok(ChunkOutcome { loss_sum, grads })
    }

    fn val_loss(&self, model: &HybridModel, windows: &[WindowRef]) -> Result<f64> {
        use crate::tape::EvalEngine;
        let b = windows.len();
        let w = self.window_len;
        let (x0, beta, starts, scheds) = self.window_inputs(windows);
        let rhs = PendulumModelRhs::new(model, &beta)?.with_base_times(starts);
        let mut e = EvalEngine::new();
        let ctx = rhs.bind(&mut e, false);
        let x0v = e.constant(Tensor::matrix(b, 2, x0));
        let rel_grid = TimeGrid::new(0.0, self.grid.dt, w)?;
        let sched_refs: Vec<&InterventionSchedule> = scheds.iter().collect();
        let states = crate::odeint::integrate_on(&mut e, &rhs, &ctx, x0v, &rel_grid, &mut |p| {
            let mut data = Vec::with_capacity(b);
            for s in &sched_refs {
                data.extend_from_slice(s.value(p));
            }
            Tensor::matrix(b, 1, data)
        })?;
        let mut acc = 0.0;
        for step in 1..=w {
            for (i, win) in windows.iter().enumerate() {
                let pred = &states[step].data()[i * 2..(i + 1) * 2];
                let truth = self.records[win.traj].trajectory.state(win.start + step);
                for (p, t) in pred.iter().zip(truth) {
                    acc += (p - t) * (p - t);
                }
            }
        }
        Ok(acc / (b * w) as f64)
    }
}

/// Fit correction networks (or the data-driven dynamics) on a pendulum
/// dataset; the encoder, when given, supplies frozen per-trajectory
/// parameter estimates. Mechanistic-only models return immediately.
pub fn train_corrections_pendulum(
    model: &mut HybridModel,
    data: &PendulumDataset,
    encoder: Option<&EncoderNet>,
    cfg: &TrainConfig,
    run_dir: Option<&std::path::Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.case != Case::Pendulum {
        return Err(Error::config("pendulum training on a non-pendulum model"));
    }
    if model.kind == ModelKind::MechanisticOnly || cfg.max_epochs == 0 {
        return Ok(TrainReport::empty());
    }
    if data.records.is_empty() {
        return Err(Error::config("empty training dataset"));
    }

    // Frozen conditioning: beta_hat per trajectory from the encoder prefix.
    let beta: Vec<[f64; 2]> = match model.kind {
        ModelKind::Hybrid => {
            let enc = encoder.ok_or_else(|| {
                Error::missing("encoder checkpoint (pendulum parameters are unobserved)")
            })?;
            let inputs: Vec<(&Trajectory, &InterventionSchedule)> = data
                .records
                .iter()
                .map(|r| (&r.trajectory, &r.schedule))
                .collect();
            super::encoder::infer_beta(enc, &inputs)
        }
        _ => vec![[1.0, 1.0]; data.records.len()],
    };

    let (train_idx, val_idx) = split_indices(data.records.len(), cfg.val_fraction, cfg.seed);
    if model.kind == ModelKind::Hybrid {
        let rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| beta[i].to_vec()).collect();
        model.norm.fit_beta(&rows);
    }

    let grid = data.records[0].trajectory.grid;
    let make_task = |idx: &[usize]| PendulumTask {
        records: idx.iter().map(|&i| &data.records[i]).collect(),
        beta: idx.iter().map(|&i| beta[i]).collect(),
        grid,
        window_len: cfg.window_len,
    };
    let train_task = make_task(&train_idx);
    let val_task = make_task(&val_idx);

    let train_scheds: Vec<&InterventionSchedule> = train_task
        .records
        .iter()
        .map(|r| &r.schedule)
        .collect();
    let source = WindowSource::new(&train_scheds, grid.num_steps, cfg.window_len)?;
    let val_windows = stride_windows(val_task.records.len(), source.max_start(), cfg.window_len);

    run_loop(
        model,
        cfg,
        train_idx.len(),
        &source,
        |m, wins| train_task.chunk_eval(m, wins),
        |m| val_task.val_loss(m, &val_windows),
        run_dir,
    )
}

// ── pharmacokinetics ────────────────────────────────────────────────

struct PkTask<'a> {
    records: Vec<&'a PkRecord>,
    grid: TimeGrid,
    window_len: usize,
    normalizers: [f64; 2],
    data_driven: bool,
}

impl PkTask<'_> {
    fn observed(&self, rec: &PkRecord, point: usize) -> [f64; 2] {
        let s = rec.trajectory.state(point);
        [s[0] / rec.oracle_params.v1, s[3]]
    }

    /// Window-start state under the model parameterization: concentrations
    /// are anchored to the observation, peripheral amounts teacher-forced
    /// from the stored simulation.
    fn start_state(&self, rec: &PkRecord, point: usize) -> Vec<f64> {
        let [cp, ce] = self.observed(rec, point);
        if self.data_driven {
            vec![cp, ce]
        } else {
            let s = rec.trajectory.state(point);
            vec![cp * rec.prior_params.v1, s[1], s[2], ce]
        }
    }

    fn window_inputs(
        &self,
        windows: &[WindowRef],
    ) -> (
        Vec<f64>,
        Vec<crate::mechanistic::PkParams>,
        Vec<crate::mechanistic::PatientCovariates>,
        Vec<f64>,
        Vec<InterventionSchedule>,
    ) {
        let k = if self.data_driven { 2 } else { 4 };
        let mut x0 = Vec::with_capacity(windows.len() * k);
        let mut priors = Vec::with_capacity(windows.len());
        let mut covs = Vec::with_capacity(windows.len());
        let mut starts = Vec::with_capacity(windows.len());
        let mut scheds = Vec::with_capacity(windows.len());
        for w in windows {
            let r = self.records[w.traj];
            x0.extend(self.start_state(r, w.start));
            priors.push(r.prior_params);
            covs.push(r.cov);
            starts.push(self.grid.time(w.start));
            scheds.push(r.schedule.slice(w.start, self.window_len + 1));
        }
        (x0, priors, covs, starts, scheds)
    }

    fn chunk_eval(&self, model: &HybridModel, windows: &[WindowRef]) -> Result<ChunkOutcome> {
        let b = windows.len();
        let w = self.window_len;
        let k = model.state_dim();
        let (x0, priors, covs, starts, scheds) = self.window_inputs(windows);
        let rhs = PkModelRhs::new(model, &priors, &covs)?.with_base_times(starts);
        let mut tape = Tape::new();
        let ctx = rhs.bind(&mut tape, true);
        let x0v = tape.constant(Tensor::matrix(b, k, x0));
        let rel_grid = TimeGrid::new(0.0, self.grid.dt, w)?;
        let sched_refs: Vec<&InterventionSchedule> = scheds.iter().collect();
        let states =
            integrate_differentiable(&mut tape, &rhs, &ctx, x0v, &rel_grid, &sched_refs)?;

        // Readout of observed concentrations from the model state.
        let inv_v1 = tape.constant(Tensor::vector(
            priors.iter().map(|p| 1.0 / p.v1).collect(),
        ));
        let mut acc = None;
        for step in 1..=w {
            let (mut cp_t, mut ce_t) = (Vec::with_capacity(b), Vec::with_capacity(b));
            for win in windows {
                let [cp, ce] = self.observed(self.records[win.traj], win.start + step);
                cp_t.push(cp);
                ce_t.push(ce);
            }
            let (cp_pred, ce_pred) = if self.data_driven {
                (tape.col(&states[step], 0), tape.col(&states[step], 1))
            } else {
                let a1 = tape.col(&states[step], 0);
                (tape.mul(&a1, &inv_v1), tape.col(&states[step], 3))
            };
            let cp_tv = tape.constant(Tensor::vector(cp_t));
            let ce_tv = tape.constant(Tensor::vector(ce_t));
            let dcp = {
                let d = tape.sub(&cp_pred, &cp_tv);
                tape.scale(&d, 1.0 / self.normalizers[0])
            };
            let dce = {
                let d = tape.sub(&ce_pred, &ce_tv);
                tape.scale(&d, 1.0 / self.normalizers[1])
            };
            let sq_cp = tape.mul(&dcp, &dcp);
            let sq_ce = tape.mul(&dce, &dce);
            let s1 = tape.sum_all(&sq_cp);
            let s2 = tape.sum_all(&sq_ce);
            let s = tape.add(&s1, &s2);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(&a, &s),
            });
        }
        let loss = acc.expect("window_len >= 1");
        let loss_sum = tape.value(&loss).item();
        let grads = tape.backward(loss)?;
        Ok(ChunkOutcome { loss_sum, grads })
    }

    fn val_loss(&self, model: &HybridModel, windows: &[WindowRef]) -> Result<f64> {
        use crate::tape::EvalEngine;
        let b = windows.len();
        let w = self.window_len;
        let k = model.state_dim();
        let (x0, priors, covs, starts, scheds) = self.window_inputs(windows);
        let rhs = PkModelRhs::new(model, &priors, &covs)?.with_base_times(starts);
        let mut e = EvalEngine::new();
        let ctx = rhs.bind(&mut e, false);
        let x0v = e.constant(Tensor::matrix(b, k, x0));
        let rel_grid = TimeGrid::new(0.0, self.grid.dt, w)?;
        let sched_refs: Vec<&InterventionSchedule> = scheds.iter().collect();
        let states = crate::odeint::integrate_on(&mut e, &rhs, &ctx, x0v, &rel_grid, &mut |p| {
            let mut data = Vec::with_capacity(b);
            for s in &sched_refs {
                data.extend_from_slice(s.value(p));
            }
            Tensor::matrix(b, 1, data)
        })?;
        let mut acc = 0.0;
        for step in 1..=w {
            let st = states[step].data();
            for (i, win) in windows.iter().enumerate() {
                let rec = self.records[win.traj];
                let [cp_true, ce_true] = self.observed(rec, win.start + step);
                let (cp, ce) = if self.data_driven {
                    (st[i * 2], st[i * 2 + 1])
                } else {
                    (st[i * 4] / rec.prior_params.v1, st[i * 4 + 3])
                };
                let d0 = (cp - cp_true) / self.normalizers[0];
                let d1 = (ce - ce_true) / self.normalizers[1];
                acc += d0 * d0 + d1 * d1;
            }
        }
        Ok(acc / (b * w) as f64)
    }
}

/// Fit PK correction networks (or the 2-state data-driven dynamics) on the
/// training split of a PK dataset using the relative reconstruction loss.
pub fn train_corrections_pk(
    model: &mut HybridModel,
    data: &PkDataset,
    cfg: &TrainConfig,
    loss: &LossSpec,
    run_dir: Option<&std::path::Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    loss.validate()?;
    if model.case != Case::Pk {
        return Err(Error::config("pk training on a non-pk model"));
    }
    if model.kind == ModelKind::MechanisticOnly || cfg.max_epochs == 0 {
        return Ok(TrainReport::empty());
    }
    if loss.normalizers.len() != 2 {
        return Err(Error::config("pk loss needs (Cp, Ce) normalizers"));
    }
    let records: Vec<&PkRecord> = data.group(SplitGroup::Train).collect();
    if records.is_empty() {
        return Err(Error::config("pk dataset has no training-split records"));
    }

    // Covariate standardization over the training split.
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| crate::hybrid::pk_cov_features(&r.cov).to_vec())
        .collect();
    model.norm.fit_beta(&rows);

    let (train_idx, val_idx) = split_indices(records.len(), cfg.val_fraction, cfg.seed);
    let grid = records[0].trajectory.grid;
    let data_driven = model.kind == ModelKind::DataDrivenOnly;
    let normalizers = [loss.normalizers[0], loss.normalizers[1]];
    let make_task = |idx: &[usize]| PkTask {
        records: idx.iter().map(|&i| records[i]).collect(),
        grid,
        window_len: cfg.window_len,
        normalizers,
        data_driven,
    };
    let train_task = make_task(&train_idx);
    let val_task = make_task(&val_idx);

    let train_scheds: Vec<&InterventionSchedule> = train_task
        .records
        .iter()
        .map(|r| &r.schedule)
        .collect();
    let source = WindowSource::new(&train_scheds, grid.num_steps, cfg.window_len)?;
    let val_windows = stride_windows(val_task.records.len(), source.max_start(), cfg.window_len);

    run_loop(
        model,
        cfg,
        train_idx.len(),
        &source,
        |m, wins| train_task.chunk_eval(m, wins),
        |m| val_task.val_loss(m, &val_windows),
        run_dir,
    )
}

// ── shared loop ─────────────────────────────────────────────────────

fn run_loop(
    model: &mut HybridModel,
    cfg: &TrainConfig,
    n_train: usize,
    source: &WindowSource,
    chunk_eval: impl Fn(&HybridModel, &[WindowRef]) -> Result<ChunkOutcome> + Sync,
    val_eval: impl Fn(&HybridModel) -> Result<f64>,
    run_dir: Option<&std::path::Path>,
) -> Result<TrainReport> {
    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| n_train.div_ceil(cfg.batch_size))
        .max(1);
    let scale = 1.0 / (cfg.batch_size * cfg.window_len) as f64;
    let adam_cfg = AdamConfig {
        lr: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut adam = AdamState::new(&model.params());
    let mut rng = seeds::rng(cfg.seed, "correction-batches");
    let mut tracker = ValTracker::new(cfg.early_stop_tol);
    let mut best_nets = model.nets.clone();
    let mut best_norm = model.norm.clone();
    let mut report = TrainReport::empty();

    for epoch in 0..cfg.max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let batch = sample_window_batch(
                source,
                cfg.batch_size,
                cfg.zero_start_min,
                cfg.nonzero_eta_min,
                &mut rng,
            )?;
            let chunks: Vec<&[WindowRef]> = batch.chunks(CHUNK_ROWS).collect();
            let outcomes: Vec<Result<ChunkOutcome>> = chunks
                .par_iter()
                .map(|c| chunk_eval(&*model, c))
                .collect();
            let (loss, mut grads) = accumulate_chunks(outcomes, scale)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss;
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(&adam_cfg, &mut model.params_mut(), &grads)?;
        }
        let train_loss = epoch_loss / steps_per_epoch as f64;
        let val_loss = val_eval(&*model)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        report.epochs.push(EpochRow {
            epoch,
            train_loss,
            val_loss,
            lr: adam_cfg.lr,
        });
        let (improved, stop, _) =
            tracker.observe(epoch, val_loss, cfg.early_stop_patience, &None);
        if improved {
            best_nets = model.nets.clone();
            best_norm = model.norm.clone();
        }
        if stop {
            break;
        }
    }
    // Keep the best-validation weights.
    model.nets = best_nets;
    model.norm = best_norm;
    let (best_epoch, best_val) = tracker.best();
    report.best_epoch = best_epoch;
    report.best_val = best_val;

    if let Some(dir) = run_dir {
        super::write_run_artifacts(
            dir,
            &serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?,
            &report,
        )?;
    }
    Ok(report)
}
