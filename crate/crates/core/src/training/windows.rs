//! Window-based batch sampling with composition guarantees: a floor on
//! zero-start windows and on windows containing nonzero intervention, the
//! remainder uniform over valid start indices.

use crate::error::{Error, Result};
use crate::odeint::InterventionSchedule;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub traj: usize,
    pub start: usize,
}

/// Precomputed sampling view over a set of equal-length trajectories.
pub struct WindowSource {
    num_trajs: usize,
    /// Last valid start index (inclusive).
    max_start: usize,
    /// Per trajectory, start indices whose window sees nonzero intervention.
    nonzero_starts: Vec<Vec<usize>>,
    /// Trajectories with at least one nonzero-eta start.
    nonzero_trajs: Vec<usize>,
}

impl WindowSource {
    /// `num_steps` is the shared trajectory length in integration steps.
    pub fn new(
        schedules: &[&InterventionSchedule],
        num_steps: usize,
        window_len: usize,
    ) -> Result<Self> {
        if window_len == 0 || window_len > num_steps {
            return Err(Error::config(format!(
                "window_len {window_len} must be in 1..={num_steps}"
            )));
        }
        let max_start = num_steps - window_len;
        let nonzero_starts: Vec<Vec<usize>> = schedules
            .iter()
            .map(|s| {
                (0..=max_start)
                    // The window integrates intervals [start, start+window_len).
                    .filter(|&st| s.any_nonzero_in(st, st + window_len))
                    .collect()
            })
            .collect();
        let nonzero_trajs = nonzero_starts
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_empty())
            .map(|(i, _)| i)
            .collect();
        Ok(WindowSource {
            num_trajs: schedules.len(),
            max_start,
            nonzero_starts,
            nonzero_trajs,
        })
    }

    pub fn max_start(&self) -> usize {
        self.max_start
    }
}

/// One batch of window references honoring the composition floors:
/// at least `ceil(zero_start_min * batch)` windows start at t = 0 and at
/// least `ceil(nonzero_eta_min * batch)` contain nonzero intervention.
pub fn sample_window_batch(
    source: &WindowSource,
    batch_size: usize,
    zero_start_min: f64,
    nonzero_eta_min: f64,
    rng: &mut impl Rng,
) -> Result<Vec<WindowRef>> {
    let n_zero = (zero_start_min * batch_size as f64).ceil() as usize;
    let n_eta = (nonzero_eta_min * batch_size as f64).ceil() as usize;
    if n_zero + n_eta > batch_size {
        return Err(Error::Infeasible(format!(
            "composition floors ({n_zero} + {n_eta}) exceed batch size {batch_size}"
        )));
    }
    if n_eta > 0 && source.nonzero_trajs.is_empty() {
        return Err(Error::Infeasible(
            "dataset has no windows with nonzero intervention".into(),
        ));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..n_zero {
        out.push(WindowRef {
            traj: rng.gen_range(0..source.num_trajs),
            start: 0,
        });
    }
    for _ in 0..n_eta {
        let traj = source.nonzero_trajs[rng.gen_range(0..source.nonzero_trajs.len())];
        let starts = &source.nonzero_starts[traj];
        out.push(WindowRef {
            traj,
            start: starts[rng.gen_range(0..starts.len())],
        });
    }
    while out.len() < batch_size {
        out.push(WindowRef {
            traj: rng.gen_range(0..source.num_trajs),
            start: rng.gen_range(0..=source.max_start),
        });
    }
    Ok(out)
}
