//! Pendulum datasets: cylinder-generated training/test sets, point-mass
//! simulations for encoder pretraining, and the torque-switch counterfactual
//! evaluation set.

use crate::error::Result;
use crate::mechanistic::pendulum::{PendulumParams, PendulumRhs};
use crate::odeint::{integrate_batch, InterventionSchedule, TimeGrid, Trajectory};
use crate::seeds;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Sampling ranges for the cylinder generative process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumSampleSpec {
    pub n: usize,
    pub m_range: (f64, f64),
    pub length_range: (f64, f64),
    pub radius_range: (f64, f64),
    pub theta0_range: (f64, f64),
    pub omega0_range: (f64, f64),
    pub dt: f64,
    pub t_max: f64,
}

impl Default for PendulumSampleSpec {
    fn default() -> Self {
        PendulumSampleSpec {
            n: 5000,
            m_range: (3.5, 4.0),
            length_range: (4.0, 4.5),
            radius_range: (2.0, 2.5),
            theta0_range: (-0.2, 0.2),
            omega0_range: (-0.1, 0.1),
            dt: 0.1,
            t_max: 10.0,
        }
    }
}

impl PendulumSampleSpec {
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn grid(&self) -> TimeGrid {
        let steps = (self.t_max / self.dt).round() as usize;
        TimeGrid::new(0.0, self.dt, steps).expect("valid grid")
    }
}

/// Constant-torque distribution: tau = 10 + 0.5 k.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauDistribution {
    /// k uniform over {0..4}: tau in {10, 10.5, 11, 11.5, 12}.
    Train,
    /// k uniform over {5, 6, 7}: tau in {12.5, 13, 13.5}.
    Ood,
    /// tau = 0 (identifiability probes).
    Zero,
}

impl TauDistribution {
    pub fn sample(self, rng: &mut impl Rng) -> (u8, f64) {
        match self {
            TauDistribution::Train => {
                let k = rng.gen_range(0..=4u8);
                (k, 10.0 + 0.5 * k as f64)
            }
            TauDistribution::Ood => {
                let k = rng.gen_range(5..=7u8);
                (k, 10.0 + 0.5 * k as f64)
            }
            TauDistribution::Zero => (0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendulumRecord {
    pub trajectory: Trajectory,
    pub schedule: InterventionSchedule,
    /// Generative parameters; diagnostics only, never fed to training.
    pub true_params: PendulumParams,
    pub k: u8,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendulumDataset {
    pub spec: PendulumSampleSpec,
    pub intervention: TauDistribution,
    pub seed: u64,
    pub records: Vec<PendulumRecord>,
}

fn sample_range(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    rng.gen_range(range.0..range.1)
}

/// Cylinder-dynamics dataset under the given torque distribution.
pub fn gen_pendulum_dataset(
    spec: &PendulumSampleSpec,
    intervention: TauDistribution,
    seed: u64,
) -> Result<PendulumDataset> {
    let mut rng = seeds::rng(seed, "pendulum-data");
    let grid = spec.grid();
    let mut params = Vec::with_capacity(spec.n);
    let mut x0s = Vec::with_capacity(spec.n);
    let mut taus = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let m = sample_range(&mut rng, spec.m_range);
        let length = sample_range(&mut rng, spec.length_range);
        let radius = sample_range(&mut rng, spec.radius_range);
        let theta0 = sample_range(&mut rng, spec.theta0_range);
        let omega0 = sample_range(&mut rng, spec.omega0_range);
        let (k, tau) = intervention.sample(&mut rng);
        params.push(PendulumParams::cylinder(m, length, radius));
        x0s.push(vec![theta0, omega0]);
        taus.push((k, tau));
    }
    let schedules: Vec<InterventionSchedule> = taus
        .iter()
        .map(|&(_, tau)| InterventionSchedule::constant(grid.num_points(), tau))
        .collect();
    let schedule_refs: Vec<&InterventionSchedule> = schedules.iter().collect();
    let rhs = PendulumRhs::new(&params);
    let trajs = integrate_batch(&rhs, &x0s, &grid, &schedule_refs)?;

    let records = trajs
        .into_iter()
        .zip(schedules)
        .zip(params)
        .zip(taus)
        .map(|(((trajectory, schedule), true_params), (k, tau))| PendulumRecord {
            trajectory,
            schedule,
            true_params,
            k,
            tau,
        })
        .collect();
    Ok(PendulumDataset {
        spec: *spec,
        intervention,
        seed,
        records,
    })
}

/// Parameter ranges for the point-mass pretraining prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaRanges {
    pub m: (f64, f64),
    pub l_cm: (f64, f64),
}

impl Default for BetaRanges {
    fn default() -> Self {
        // Covers the cylinder's induced l_cm = L/2 in [2, 2.25] with margin.
        BetaRanges {
            m: (3.0, 5.0),
            l_cm: (1.5, 3.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub trajectory: Trajectory,
    pub schedule: InterventionSchedule,
    /// (m, l_cm) generative labels.
    pub label: [f64; 2],
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderDataset {
    pub ranges: BetaRanges,
    pub intervention: TauDistribution,
    pub seed: u64,
    pub train: Vec<LabeledRecord>,
    pub val: Vec<LabeledRecord>,
}

/// Labeled point-mass simulations for encoder pretraining; 80/20
/// train/validation split.
pub fn gen_encoder_pretraining_data(
    n: usize,
    ranges: &BetaRanges,
    spec: &PendulumSampleSpec,
    intervention: TauDistribution,
    seed: u64,
) -> Result<EncoderDataset> {
    let mut rng = seeds::rng(seed, "encoder-pretraining-data");
    let grid = spec.grid();
    let mut params = Vec::with_capacity(n);
    let mut x0s = Vec::with_capacity(n);
    let mut taus = Vec::with_capacity(n);
    for _ in 0..n {
        let m = sample_range(&mut rng, ranges.m);
        let l_cm = sample_range(&mut rng, ranges.l_cm);
        let theta0 = sample_range(&mut rng, spec.theta0_range);
        let omega0 = sample_range(&mut rng, spec.omega0_range);
        let (_, tau) = intervention.sample(&mut rng);
        params.push(PendulumParams::point_mass(m, l_cm));
        x0s.push(vec![theta0, omega0]);
        taus.push(tau);
    }
    let schedules: Vec<InterventionSchedule> = taus
        .iter()
        .map(|&tau| InterventionSchedule::constant(grid.num_points(), tau))
        .collect();
    let schedule_refs: Vec<&InterventionSchedule> = schedules.iter().collect();
    let rhs = PendulumRhs::new(&params);
    let trajs = integrate_batch(&rhs, &x0s, &grid, &schedule_refs)?;

    let mut records: Vec<LabeledRecord> = trajs
        .into_iter()
        .zip(schedules)
        .zip(params)
        .zip(taus)
        .map(|(((trajectory, schedule), p), tau)| LabeledRecord {
            trajectory,
            schedule,
            label: [p.m, p.l_cm],
            tau,
        })
        .collect();
    let n_train = (n as f64 * 0.8).ceil() as usize;
    let val = records.split_off(n_train.min(records.len()));
    Ok(EncoderDataset {
        ranges: *ranges,
        intervention,
        seed,
        train: records,
        val,
    })
}

/// One intervention-switch evaluation unit: a 10 s prefix under tau = 10,
/// then one ground-truth branch per counterfactual torque 6 + k, k in 0..=5,
/// each starting from the true state at the switch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    pub prefix: Trajectory,
    pub prefix_schedule: InterventionSchedule,
    pub true_params: PendulumParams,
    /// Branches indexed by k: torque 6 + k over the second half.
    pub branches: Vec<Trajectory>,
}

pub const COUNTERFACTUAL_TAUS: [f64; 6] = [6.0, 7.0, 8.0, 9.0, 10.0, 11.0];
pub const PREFIX_TAU: f64 = 10.0;

pub fn gen_pendulum_counterfactuals(
    n: usize,
    spec: &PendulumSampleSpec,
    seed: u64,
) -> Result<Vec<CounterfactualRecord>> {
    let mut rng = seeds::rng(seed, "pendulum-counterfactual");
    let grid = spec.grid();
    let mut params = Vec::with_capacity(n);
    let mut x0s = Vec::with_capacity(n);
    for _ in 0..n {
        let m = sample_range(&mut rng, spec.m_range);
        let length = sample_range(&mut rng, spec.length_range);
        let radius = sample_range(&mut rng, spec.radius_range);
        params.push(PendulumParams::cylinder(m, length, radius));
        x0s.push(vec![
            sample_range(&mut rng, spec.theta0_range),
            sample_range(&mut rng, spec.omega0_range),
        ]);
    }
    let rhs = PendulumRhs::new(&params);
    let prefix_schedule = InterventionSchedule::constant(grid.num_points(), PREFIX_TAU);
    let prefix_refs: Vec<&InterventionSchedule> = (0..n).map(|_| &prefix_schedule).collect();
    let prefixes = integrate_batch(&rhs, &x0s, &grid, &prefix_refs)?;

    // Branch grid starts at the switch time.
    let branch_grid = TimeGrid::new(grid.t_max(), spec.dt, grid.num_steps)?;
    let switch_states: Vec<Vec<f64>> = prefixes
        .iter()
        .map(|t| t.state(t.num_points() - 1).to_vec())
        .collect();
    let mut branches_per_tau = Vec::with_capacity(COUNTERFACTUAL_TAUS.len());
    for &tau in COUNTERFACTUAL_TAUS.iter() {
        let sched = InterventionSchedule::constant(branch_grid.num_points(), tau);
        let refs: Vec<&InterventionSchedule> = (0..n).map(|_| &sched).collect();
        branches_per_tau.push(integrate_batch(&rhs, &switch_states, &branch_grid, &refs)?);
    }

    let mut out = Vec::with_capacity(n);
    for (i, (prefix, true_params)) in prefixes.into_iter().zip(params).enumerate() {
        let branches = branches_per_tau.iter().map(|b| b[i].clone()).collect();
        out.push(CounterfactualRecord {
            prefix,
            prefix_schedule: prefix_schedule.clone(),
            true_params,
            branches,
        });
    }
    Ok(out)
}
