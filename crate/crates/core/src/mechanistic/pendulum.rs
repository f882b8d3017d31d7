//! Point-mass and cylindrical pendulum dynamics.
//!
//! Both variants reduce to
//!   dθ/dt = ω
//!   dω/dt = -(g·l_cm·m / I_s)·sin θ + τ / I_s
//! with the moment of inertia I_s = m·l_cm² for a point mass and
//! I_s = ¼mR² + ⅓mL² for a uniform cylinder pivoted at its edge
//! (center of mass at l_cm = L/2).

use crate::engine_prelude::*;
use crate::odeint::OdeRhs;
use serde::{Deserialize, Serialize};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    PointMass,
    Cylinder { length: f64, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub m: f64,
    /// Pivot-to-center-of-mass distance.
    pub l_cm: f64,
    pub geometry: Geometry,
    pub g: f64,
}

impl PendulumParams {
    pub fn point_mass(m: f64, l_cm: f64) -> Self {
        assert!(m > 0.0 && l_cm > 0.0);
        PendulumParams {
            m,
            l_cm,
            geometry: Geometry::PointMass,
            g: GRAVITY,
        }
    }

    /// Uniform cylinder of the given length and radius, pivoted at its edge.
    pub fn cylinder(m: f64, length: f64, radius: f64) -> Self {
        assert!(m > 0.0 && length > 0.0 && radius > 0.0);
        PendulumParams {
            m,
            l_cm: length / 2.0,
            geometry: Geometry::Cylinder { length, radius },
            g: GRAVITY,
        }
    }

    pub fn moment_of_inertia(&self) -> f64 {
        match self.geometry {
            Geometry::PointMass => self.m * self.l_cm * self.l_cm,
            Geometry::Cylinder { length, radius } => {
                0.25 * self.m * radius * radius + self.m * length * length / 3.0
            }
        }
    }

    /// (coefficient of sin θ, coefficient of τ) in dω/dt; shared by the
    /// scalar and engine paths so they agree bitwise.
    pub fn rhs_coefficients(&self) -> (f64, f64) {
        match self.geometry {
            Geometry::PointMass => (
                -(self.g / self.l_cm),
                1.0 / (self.m * self.l_cm * self.l_cm),
            ),
            Geometry::Cylinder { length, radius } => {
                let i_per_m = 0.25 * radius * radius + length * length / 3.0;
                (
                    -(self.g * self.l_cm / i_per_m),
                    1.0 / (self.m * i_per_m),
                )
            }
        }
    }

    /// Small-angle period 2π·sqrt(I_s / (m·g·l_cm)).
    pub fn small_angle_period(&self) -> f64 {
        let i_s = self.moment_of_inertia();
        std::f64::consts::TAU * (i_s / (self.m * self.g * self.l_cm)).sqrt()
    }

    /// Total energy ½·I_s·ω² − m·g·l_cm·cos θ (potential zero at the pivot).
    pub fn energy(&self, state: PendulumState) -> f64 {
        0.5 * self.moment_of_inertia() * state.omega * state.omega
            - self.m * self.g * self.l_cm * state.theta.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    /// Unwrapped angle, radians.
    pub theta: f64,
    pub omega: f64,
}

impl PendulumState {
    pub fn new(theta: f64, omega: f64) -> Self {
        PendulumState { theta, omega }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.theta, self.omega]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        PendulumState {
            theta: s[0],
            omega: s[1],
        }
    }
}

fn rhs_with_coeffs(state: PendulumState, coeffs: (f64, f64), tau: f64) -> [f64; 2] {
    let (sin_coeff, torque_coeff) = coeffs;
    [
        state.omega,
        state.theta.sin() * sin_coeff + tau * torque_coeff,
    ]
}

/// dState/dt for the point-mass pendulum under external torque `tau`.
pub fn pendulum_rhs_pointmass(
    _t: f64,
    state: PendulumState,
    params: &PendulumParams,
    tau: f64,
) -> [f64; 2] {
    debug_assert!(matches!(params.geometry, Geometry::PointMass));
    rhs_with_coeffs(state, params.rhs_coefficients(), tau)
}

/// dState/dt for the edge-pivoted cylinder under external torque `tau`.
pub fn pendulum_rhs_cylinder(
    _t: f64,
    state: PendulumState,
    params: &PendulumParams,
    tau: f64,
) -> [f64; 2] {
    debug_assert!(matches!(params.geometry, Geometry::Cylinder { .. }));
    rhs_with_coeffs(state, params.rhs_coefficients(), tau)
}

/// Batched pendulum dynamics; one parameter set per batch row.
pub struct PendulumRhs {
    sin_coeff: Vec<f64>,
    torque_coeff: Vec<f64>,
}

pub struct PendulumRhsCtx<V> {
    sin_coeff: V,
    torque_coeff: V,
}

impl PendulumRhs {
    pub fn new(params: &[PendulumParams]) -> Self {
        let (sin_coeff, torque_coeff) = params.iter().map(|p| p.rhs_coefficients()).unzip();
        PendulumRhs {
            sin_coeff,
            torque_coeff,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.sin_coeff.len()
    }

    /// Shared by the hybrid model: evaluates (dθ/dt, dω/dt) from
    /// already-extracted state and torque columns.
    pub fn eval_channels<E: Engine>(
        &self,
        e: &mut E,
        ctx: &PendulumRhsCtx<E::Val>,
        theta: &E::Val,
        omega: &E::Val,
        tau: &E::Val,
    ) -> [E::Val; 2] {
        let s = e.sin(theta);
        let grav = e.mul(&s, &ctx.sin_coeff);
        let forced = e.mul(tau, &ctx.torque_coeff);
        let domega = e.add(&grav, &forced);
        [omega.clone(), domega]
    }
}

impl OdeRhs for PendulumRhs {
    type Ctx<E: Engine> = PendulumRhsCtx<E::Val>;

    fn state_dim(&self) -> usize {
        2
    }

    fn bind<E: Engine>(&self, e: &mut E, _trainable: bool) -> Self::Ctx<E> {
        PendulumRhsCtx {
            sin_coeff: e.constant(Tensor::vector(self.sin_coeff.clone())),
            torque_coeff: e.constant(Tensor::vector(self.torque_coeff.clone())),
        }
    }

    fn eval<E: Engine>(
        &self,
        e: &mut E,
        ctx: &Self::Ctx<E>,
        _t: f64,
        x: &E::Val,
        eta: &E::Val,
    ) -> E::Val {
        let theta = e.col(x, 0);
        let omega = e.col(x, 1);
        let tau = e.col(eta, 0);
        let [dtheta, domega] = self.eval_channels(e, ctx, &theta, &omega, &tau);
        e.stack_cols(&[dtheta, domega])
    }
}

/// Mean period from upward zero crossings of the given channel, linearly
/// interpolated between grid points. Returns None with fewer than two
/// crossings.
pub fn measure_period(traj: &crate::odeint::Trajectory, channel: usize) -> Option<f64> {
    let vals: Vec<f64> = traj.channel(channel).collect();
    let mut crossings = Vec::new();
    for k in 0..vals.len() - 1 {
        if vals[k] < 0.0 && vals[k + 1] >= 0.0 {
            let frac = -vals[k] / (vals[k + 1] - vals[k]);
            crossings.push(traj.grid.time(k) + frac * traj.grid.dt);
        }
    }
    if crossings.len() < 2 {
        return None;
    }
    let total = crossings.last().unwrap() - crossings.first().unwrap();
    Some(total / (crossings.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeint::{integrate, InterventionSchedule, TimeGrid};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn equilibrium_has_zero_derivative() {
        let pm = PendulumParams::point_mass(1.0, 1.0);
        let cyl = PendulumParams::cylinder(4.0, 4.0, 2.0);
        let origin = PendulumState::new(0.0, 0.0);
        assert_eq!(pendulum_rhs_pointmass(0.0, origin, &pm, 0.0), [0.0, 0.0]);
        assert_eq!(pendulum_rhs_cylinder(0.0, origin, &cyl, 0.0), [0.0, 0.0]);
    }

    #[test]
    fn pointmass_at_right_angle_feels_full_gravity() {
        let p = PendulumParams::point_mass(1.0, 1.0);
        let d = pendulum_rhs_pointmass(0.0, PendulumState::new(FRAC_PI_2, 0.0), &p, 0.0);
        assert!((d[1] + 9.81).abs() < 1e-12);
    }

    #[test]
    fn pointmass_torque_scaling() {
        // m = 2, l = 1, theta = 0, tau = 4 -> domega = tau/(m l^2) = 2.
        let p = PendulumParams::point_mass(2.0, 1.0);
        let d = pendulum_rhs_pointmass(0.0, PendulumState::new(0.0, 0.0), &p, 4.0);
        assert!((d[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cylinder_at_right_angle() {
        // m=4, L=4, R=2: domega = -9.81 * 2 / (1 + 16/3).
        let p = PendulumParams::cylinder(4.0, 4.0, 2.0);
        let d = pendulum_rhs_cylinder(0.0, PendulumState::new(FRAC_PI_2, 0.0), &p, 0.0);
        let expect = -9.81 * 2.0 / (1.0 + 16.0 / 3.0);
        assert!((d[1] - expect).abs() < 1e-12, "{} vs {expect}", d[1]);
        assert!((expect + 3.0979).abs() < 1e-4);
    }

    #[test]
    fn scalar_and_engine_paths_agree_bitwise() {
        let params = [
            PendulumParams::point_mass(3.2, 2.1),
            PendulumParams::cylinder(3.7, 4.2, 2.3),
        ];
        let rhs = PendulumRhs::new(&params);
        let mut e = EvalEngine::new();
        let ctx = rhs.bind(&mut e, false);
        let x = e.constant(Tensor::matrix(2, 2, vec![0.3, -0.1, -0.7, 0.4]));
        let eta = e.constant(Tensor::matrix(2, 1, vec![11.0, 12.5]));
        let d = rhs.eval(&mut e, &ctx, 0.0, &x, &eta);

        let d0 = rhs_with_coeffs(
            PendulumState::new(0.3, -0.1),
            params[0].rhs_coefficients(),
            11.0,
        );
        let d1 = rhs_with_coeffs(
            PendulumState::new(-0.7, 0.4),
            params[1].rhs_coefficients(),
            12.5,
        );
        assert_eq!(d.data(), &[d0[0], d0[1], d1[0], d1[1]]);
    }

    #[test]
    fn small_angle_period_matches_formula() {
        // theta0 = 0.01, tau = 0: measured period within 0.5% of
        // 2*pi*sqrt(I_s/(m g l_cm)), for both geometries.
        for params in [
            PendulumParams::point_mass(4.0, 2.0),
            PendulumParams::cylinder(4.0, 4.2, 2.2),
        ] {
            let grid = TimeGrid::new(0.0, 0.1, 200).unwrap();
            let eta = InterventionSchedule::zeros(grid.num_points(), 1);
            let rhs = PendulumRhs::new(&[params]);
            let traj = integrate(&rhs, &[0.01, 0.0], &grid, &eta).unwrap();
            let period = measure_period(&traj, 0).expect("enough crossings");
            let expect = params.small_angle_period();
            let rel = (period - expect).abs() / expect;
            assert!(rel < 5e-3, "period {period} vs {expect} (rel {rel})");
        }
    }

    #[test]
    fn thin_rod_vs_tip_mass_frequency_ratio() {
        // A thin rod (R -> 0) pivoted at its edge oscillates sqrt(3/2) faster
        // than a point mass hung at the rod's full length.
        let length = 4.0;
        let rod = PendulumParams::cylinder(4.0, length, 1e-9);
        let tip_mass = PendulumParams::point_mass(4.0, length);
        let measure = |p: PendulumParams| {
            let grid = TimeGrid::new(0.0, 0.05, 600).unwrap();
            let eta = InterventionSchedule::zeros(grid.num_points(), 1);
            let rhs = PendulumRhs::new(&[p]);
            let traj = integrate(&rhs, &[0.01, 0.0], &grid, &eta).unwrap();
            measure_period(&traj, 0).unwrap()
        };
        let ratio = measure(tip_mass) / measure(rod);
        let expect = (1.5f64).sqrt();
        assert!(
            (ratio - expect).abs() / expect < 5e-3,
            "ratio {ratio} vs {expect}"
        );
    }

    #[test]
    fn unforced_energy_drift_is_small() {
        // Frictionless, tau = 0, dt = 0.1 over 10 s: |E(t) - E(0)| / |E(0)| < 1e-5.
        let params = PendulumParams::cylinder(4.0, 4.0, 2.0);
        let grid = TimeGrid::new(0.0, 0.1, 100).unwrap();
        let eta = InterventionSchedule::zeros(grid.num_points(), 1);
        let rhs = PendulumRhs::new(&[params]);
        let traj = integrate(&rhs, &[0.2, 0.0], &grid, &eta).unwrap();
        let e0 = params.energy(PendulumState::new(0.2, 0.0));
        for k in 0..traj.num_points() {
            let e = params.energy(PendulumState::from_slice(traj.state(k)));
            let drift = (e - e0).abs() / e0.abs();
            assert!(drift < 1e-5, "step {k}: relative drift {drift}");
        }
    }
}
