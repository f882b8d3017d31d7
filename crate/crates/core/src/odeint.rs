//! Fixed-step classical RK4 integration of a parameterized right-hand side.
//!
//! The same unrolled loop runs on [`EvalEngine`] for plain simulation and on
//! a [`Tape`] for differentiable rollouts, so parametric-only dynamics give
//! bit-identical trajectories on both paths. Values are batched `[B, k]`
//! tensors; all kernels are row-independent, so a batch row equals the
//! corresponding single-trajectory run exactly.

use crate::engine_prelude::*;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Uniform time grid; point `k` is `t0 + k * dt` computed by multiplication,
/// never by accumulation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub num_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, num_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::config(format!("time grid dt must be positive, got {dt}")));
        }
        if num_steps == 0 {
            return Err(Error::config("time grid needs at least one step"));
        }
        Ok(TimeGrid { t0, dt, num_steps })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn num_points(&self) -> usize {
        self.num_steps + 1
    }

    pub fn t_max(&self) -> f64 {
        self.time(self.num_steps)
    }
}

/// Piecewise-constant intervention: the value stored at point `k` applies on
/// the whole interval `[t_k, t_{k+1})`, including the intra-step RK4 stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSchedule {
    eta_dim: usize,
    /// `[num_points, eta_dim]` row-major.
    values: Vec<f64>,
}

impl InterventionSchedule {
    pub fn new(eta_dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len() % eta_dim.max(1), 0);
        InterventionSchedule { eta_dim, values }
    }

    pub fn zeros(num_points: usize, eta_dim: usize) -> Self {
        InterventionSchedule {
            eta_dim,
            values: vec![0.0; num_points * eta_dim],
        }
    }

    /// Scalar intervention held constant over the whole grid.
    pub fn constant(num_points: usize, value: f64) -> Self {
        InterventionSchedule {
            eta_dim: 1,
            values: vec![value; num_points],
        }
    }

    pub fn eta_dim(&self) -> usize {
        self.eta_dim
    }

    pub fn num_points(&self) -> usize {
        self.values.len() / self.eta_dim
    }

    pub fn value(&self, point: usize) -> &[f64] {
        &self.values[point * self.eta_dim..(point + 1) * self.eta_dim]
    }

    pub fn value_mut(&mut self, point: usize) -> &mut [f64] {
        &mut self.values[point * self.eta_dim..(point + 1) * self.eta_dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// True if any channel is nonzero at any point in `[start, end)`.
    pub fn any_nonzero_in(&self, start: usize, end: usize) -> bool {
        self.values[start * self.eta_dim..end * self.eta_dim]
            .iter()
            .any(|&v| v != 0.0)
    }

    /// Restrict to points `[start, start+len)`.
    pub fn slice(&self, start: usize, len: usize) -> InterventionSchedule {
        InterventionSchedule {
            eta_dim: self.eta_dim,
            values: self.values[start * self.eta_dim..(start + len) * self.eta_dim].to_vec(),
        }
    }
}

/// One unit's observed states over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    state_dim: usize,
    /// `[num_points, state_dim]` row-major.
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, state_dim: usize, states: Vec<f64>) -> Self {
        assert_eq!(states.len(), grid.num_points() * state_dim);
        Trajectory {
            grid,
            state_dim,
            states,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn num_points(&self) -> usize {
        self.grid.num_points()
    }

    pub fn state(&self, point: usize) -> &[f64] {
        &self.states[point * self.state_dim..(point + 1) * self.state_dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.states.iter().skip(c).step_by(self.state_dim).copied()
    }

    /// Mean over time and channels of squared differences against another
    /// trajectory of the same shape, channel errors summed per point.
    pub fn mse_vs(&self, other: &Trajectory) -> f64 {
        assert_eq!(self.states.len(), other.states.len());
        let sq: f64 = self
            .states
            .iter()
            .zip(other.states.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sq / self.num_points() as f64
    }
}

/// A right-hand side dX/dt = F(t, X, beta, eta) evaluable on any engine.
///
/// `bind` loads weights and per-row constants; `eval` must be pure given the
/// bound context. Implementations receive `eta` as a `[B, eta_dim]` value.
pub trait OdeRhs {
    type Ctx<E: Engine>;

    fn state_dim(&self) -> usize;
    fn eta_dim(&self) -> usize {
        1
    }
    fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> Self::Ctx<E>;
    fn eval<E: Engine>(
        &self,
        e: &mut E,
        ctx: &Self::Ctx<E>,
        t: f64,
        x: &E::Val,
        eta: &E::Val,
    ) -> E::Val;
}

/// Core RK4 loop over an engine. `eta_at(k)` supplies the `[B, eta_dim]`
/// interval-start intervention for step `k`. Returns the state at every grid
/// point, `x0` first.
pub fn integrate_on<E: Engine, R: OdeRhs>(
    e: &mut E,
    rhs: &R,
    ctx: &R::Ctx<E>,
    x0: E::Val,
    grid: &TimeGrid,
    eta_at: &mut dyn FnMut(usize) -> Tensor,
) -> Result<Vec<E::Val>> {
    integrate_on_impl(e, rhs, ctx, x0, grid, eta_at, true)
}

fn integrate_on_impl<E: Engine, R: OdeRhs>(
    e: &mut E,
    rhs: &R,
    ctx: &R::Ctx<E>,
    x0: E::Val,
    grid: &TimeGrid,
    eta_at: &mut dyn FnMut(usize) -> Tensor,
    finite_checks: bool,
) -> Result<Vec<E::Val>> {
    let dt = grid.dt;
    let mut states = Vec::with_capacity(grid.num_points());
    if finite_checks {
        e.value(&x0).check_finite("initial state", 0)?;
    }
    states.push(x0);
    for k in 0..grid.num_steps {
        let x = states.last().unwrap().clone();
        let t = grid.time(k);
        let eta = e.constant(eta_at(k));

        let k1 = rhs.eval(e, ctx, t, &x, &eta);
        let x2 = {
            let s = e.scale(&k1, dt / 2.0);
            e.add(&x, &s)
        };
        let k2 = rhs.eval(e, ctx, t + dt / 2.0, &x2, &eta);
        let x3 = {
            let s = e.scale(&k2, dt / 2.0);
            e.add(&x, &s)
        };
        let k3 = rhs.eval(e, ctx, t + dt / 2.0, &x3, &eta);
        let x4 = {
            let s = e.scale(&k3, dt);
            e.add(&x, &s)
        };
        let k4 = rhs.eval(e, ctx, t + dt, &x4, &eta);

        let mut sum = {
            let s2 = e.scale(&k2, 2.0);
            e.add(&k1, &s2)
        };
        sum = {
            let s3 = e.scale(&k3, 2.0);
            e.add(&sum, &s3)
        };
        sum = e.add(&sum, &k4);
        let incr = e.scale(&sum, dt / 6.0);
        let x_next = e.add(&x, &incr);
        if finite_checks {
            e.value(&x_next).check_finite("state", k + 1)?;
        }
        states.push(x_next);
    }
    Ok(states)
}

fn gather_eta(schedules: &[&InterventionSchedule], eta_dim: usize, point: usize) -> Tensor {
    let b = schedules.len();
    let mut data = Vec::with_capacity(b * eta_dim);
    for s in schedules {
        data.extend_from_slice(s.value(point));
    }
    Tensor::matrix(b, eta_dim, data)
}

/// Integrate one unit on the plain evaluation engine.
pub fn integrate<R: OdeRhs>(
    rhs: &R,
    x0: &[f64],
    grid: &TimeGrid,
    eta: &InterventionSchedule,
) -> Result<Trajectory> {
    let mut out = integrate_batch(rhs, &[x0.to_vec()], grid, &[eta])?;
    Ok(out.pop().unwrap())
}

/// Like [`integrate_batch`] but without finiteness aborts: rows that
/// diverge carry NaN/Inf in their trajectories and are left to the caller
/// to detect (rows are independent, so healthy rows are unaffected).
pub fn integrate_batch_lenient<R: OdeRhs>(
    rhs: &R,
    x0s: &[Vec<f64>],
    grid: &TimeGrid,
    etas: &[&InterventionSchedule],
) -> Result<Vec<Trajectory>> {
    integrate_batch_impl(rhs, x0s, grid, etas, false)
}

/// Integrate a batch of units sharing one grid (and one bound RHS context).
pub fn integrate_batch<R: OdeRhs>(
    rhs: &R,
    x0s: &[Vec<f64>],
    grid: &TimeGrid,
    etas: &[&InterventionSchedule],
) -> Result<Vec<Trajectory>> {
    integrate_batch_impl(rhs, x0s, grid, etas, true)
}

fn integrate_batch_impl<R: OdeRhs>(
    rhs: &R,
    x0s: &[Vec<f64>],
    grid: &TimeGrid,
    etas: &[&InterventionSchedule],
    finite_checks: bool,
) -> Result<Vec<Trajectory>> {
    let b = x0s.len();
    let k = rhs.state_dim();
    assert_eq!(etas.len(), b, "one schedule per unit");
    for (x0, eta) in x0s.iter().zip(etas.iter()) {
        if x0.len() != k {
            return Err(Error::Shape {
                context: "integrate initial state",
                expected: vec![k],
                got: vec![x0.len()],
            });
        }
        if eta.num_points() < grid.num_points() || eta.eta_dim() != rhs.eta_dim() {
            return Err(Error::Shape {
                context: "intervention schedule",
                expected: vec![grid.num_points(), rhs.eta_dim()],
                got: vec![eta.num_points(), eta.eta_dim()],
            });
        }
    }
    let mut e = EvalEngine::new();
    let ctx = rhs.bind(&mut e, false);
    let flat: Vec<f64> = x0s.iter().flatten().copied().collect();
    let x0 = e.constant(Tensor::matrix(b, k, flat));
    let eta_dim = rhs.eta_dim();
    let states = integrate_on_impl(
        &mut e,
        rhs,
        &ctx,
        x0,
        grid,
        &mut |p| gather_eta(etas, eta_dim, p),
        finite_checks,
    )?;

    let mut per_unit: Vec<Vec<f64>> = vec![Vec::with_capacity(grid.num_points() * k); b];
    for st in &states {
        for (i, row) in st.data().chunks_exact(k).enumerate() {
            per_unit[i].extend_from_slice(row);
        }
    }
    Ok(per_unit
        .into_iter()
        .map(|states| Trajectory::new(*grid, k, states))
        .collect())
}

/// Differentiable rollout: every RK4 stage is recorded on the tape, so any
/// functional of the returned per-point values can be backpropagated to the
/// parameters registered by `rhs.bind(tape, true)`.
pub fn integrate_differentiable<R: OdeRhs>(
    tape: &mut Tape,
    rhs: &R,
    ctx: &R::Ctx<Tape>,
    x0: Var,
    grid: &TimeGrid,
    etas: &[&InterventionSchedule],
) -> Result<Vec<Var>> {
    let eta_dim = rhs.eta_dim();
    integrate_on(tape, rhs, ctx, x0, grid, &mut |p| {
        gather_eta(etas, eta_dim, p)
    })
}

/// CSV export: header `t,x1..xk,eta1..etar`, one row per grid point, 17
/// significant digits throughout.
pub fn write_trajectory_csv(
    w: &mut impl std::io::Write,
    traj: &Trajectory,
    eta: &InterventionSchedule,
) -> Result<()> {
    use crate::textio::fmt_g17;
    let k = traj.state_dim();
    let r = eta.eta_dim();
    let mut header = String::from("t");
    for c in 1..=k {
        header.push_str(&format!(",x{c}"));
    }
    for c in 1..=r {
        header.push_str(&format!(",eta{c}"));
    }
    writeln!(w, "{header}")?;
    for p in 0..traj.num_points() {
        let mut row = fmt_g17(traj.grid.time(p));
        for v in traj.state(p) {
            row.push(',');
            row.push_str(&fmt_g17(*v));
        }
        for v in eta.value(p) {
            row.push(',');
            row.push_str(&fmt_g17(*v));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Inverse of [`write_trajectory_csv`]; the grid is reconstructed from the
/// time column.
pub fn read_trajectory_csv(
    text: &str,
    file: &str,
) -> Result<(Trajectory, InterventionSchedule)> {
    use crate::textio::{parse_f64, split_csv};
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        file: file.into(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols = split_csv(header);
    let k = cols.iter().filter(|c| c.starts_with('x')).count();
    let r = cols.iter().filter(|c| c.starts_with("eta")).count();
    if cols.first() != Some(&"t") || k == 0 {
        return Err(Error::Parse {
            file: file.into(),
            line: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut etas = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields = split_csv(line);
        if fields.len() != 1 + k + r {
            return Err(Error::Parse {
                file: file.into(),
                line: line_no,
                msg: format!("expected {} fields, got {}", 1 + k + r, fields.len()),
            });
        }
        times.push(parse_f64(fields[0], file, line_no)?);
        for f in &fields[1..1 + k] {
            states.push(parse_f64(f, file, line_no)?);
        }
        for f in &fields[1 + k..] {
            etas.push(parse_f64(f, file, line_no)?);
        }
    }
    if times.len() < 2 {
        return Err(Error::Parse {
            file: file.into(),
            line: 1,
            msg: "need at least two grid points".into(),
        });
    }
    let dt = times[1] - times[0];
    let grid = TimeGrid::new(times[0], dt, times.len() - 1)?;
    Ok((
        Trajectory::new(grid, k, states),
        InterventionSchedule::new(r, etas),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// dX/dt = 0
    struct ZeroRhs(usize);
    impl OdeRhs for ZeroRhs {
        type Ctx<E: Engine> = ();
        fn state_dim(&self) -> usize {
            self.0
        }
        fn bind<E: Engine>(&self, _e: &mut E, _t: bool) -> () {}
        fn eval<E: Engine>(&self, e: &mut E, _c: &(), _t: f64, x: &E::Val, _eta: &E::Val) -> E::Val {
            e.scale(x, 0.0)
        }
    }

    /// dX/dt = X
    struct ExpRhs;
    impl OdeRhs for ExpRhs {
        type Ctx<E: Engine> = ();
        fn state_dim(&self) -> usize {
            1
        }
        fn bind<E: Engine>(&self, _e: &mut E, _t: bool) -> () {}
        fn eval<E: Engine>(&self, _e: &mut E, _c: &(), _t: f64, x: &E::Val, _eta: &E::Val) -> E::Val {
            x.clone()
        }
    }

    /// theta'' = -theta as a first-order system.
    struct HarmonicRhs;
    impl OdeRhs for HarmonicRhs {
        type Ctx<E: Engine> = ();
        fn state_dim(&self) -> usize {
            2
        }
        fn bind<E: Engine>(&self, _e: &mut E, _t: bool) -> () {}
        fn eval<E: Engine>(&self, e: &mut E, _c: &(), _t: f64, x: &E::Val, _eta: &E::Val) -> E::Val {
            let theta = e.col(x, 0);
            let omega = e.col(x, 1);
            let dtheta = omega;
            let domega = e.scale(&theta, -1.0);
            e.stack_cols(&[dtheta, domega])
        }
    }

    /// dX/dt = w for a trainable scalar w.
    struct GrowthRhs {
        w: f64,
    }
    struct GrowthCtx<V> {
        w: V,
    }
    impl OdeRhs for GrowthRhs {
        type Ctx<E: Engine> = GrowthCtx<E::Val>;
        fn state_dim(&self) -> usize {
            1
        }
        fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> GrowthCtx<E::Val> {
            let t = Tensor::matrix(1, 1, vec![self.w]);
            GrowthCtx {
                w: if trainable { e.param(t) } else { e.constant(t) },
            }
        }
        fn eval<E: Engine>(
            &self,
            _e: &mut E,
            c: &GrowthCtx<E::Val>,
            _t: f64,
            _x: &E::Val,
            _eta: &E::Val,
        ) -> E::Val {
            c.w.clone()
        }
    }

    /// dX/dt = X^2: blows up in finite time from x0 > 0.
    struct BlowupRhs;
    impl OdeRhs for BlowupRhs {
        type Ctx<E: Engine> = ();
        fn state_dim(&self) -> usize {
            1
        }
        fn bind<E: Engine>(&self, _e: &mut E, _t: bool) -> () {}
        fn eval<E: Engine>(&self, e: &mut E, _c: &(), _t: f64, x: &E::Val, _eta: &E::Val) -> E::Val {
            e.mul(x, x)
        }
    }

    #[test]
    fn zero_rhs_keeps_state_constant() {
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let eta = InterventionSchedule::zeros(grid.num_points(), 1);
        let traj = integrate(&ZeroRhs(2), &[1.5, -2.0], &grid, &eta).unwrap();
        for k in 0..grid.num_points() {
            assert_eq!(traj.state(k), &[1.5, -2.0]);
        }
    }

    #[test]
    fn exponential_growth_matches_closed_form() {
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let eta = InterventionSchedule::zeros(grid.num_points(), 1);
        let traj = integrate(&ExpRhs, &[1.0], &grid, &eta).unwrap();
        let err = (traj.state(10)[0] - std::f64::consts::E).abs();
        assert!(err <= 3e-6, "|X(1) - e| = {err}");
    }

    #[test]
    fn harmonic_oscillator_shows_order_four_convergence() {
        let run = |dt: f64, steps: usize| -> f64 {
            let grid = TimeGrid::new(0.0, dt, steps).unwrap();
            let eta = InterventionSchedule::zeros(grid.num_points(), 1);
            let traj = integrate(&HarmonicRhs, &[1.0, 0.0], &grid, &eta).unwrap();
            (0..grid.num_points())
                .map(|k| (traj.state(k)[0] - grid.time(k).cos()).abs())
                .fold(0.0, f64::max)
        };
        let e1 = run(0.1, 40);
        let e2 = run(0.05, 80);
        let ratio = e1 / e2;
        assert!(
            (12.0..=20.0).contains(&ratio),
            "halving dt gave error ratio {ratio}"
        );
    }

    #[test]
    fn batch_rows_match_single_runs_bitwise() {
        let grid = TimeGrid::new(0.0, 0.05, 30).unwrap();
        let eta1 = InterventionSchedule::zeros(grid.num_points(), 1);
        let eta2 = InterventionSchedule::zeros(grid.num_points(), 1);
        let batch = integrate_batch(
            &HarmonicRhs,
            &[vec![1.0, 0.0], vec![0.3, -0.2]],
            &grid,
            &[&eta1, &eta2],
        )
        .unwrap();
        let solo1 = integrate(&HarmonicRhs, &[1.0, 0.0], &grid, &eta1).unwrap();
        let solo2 = integrate(&HarmonicRhs, &[0.3, -0.2], &grid, &eta2).unwrap();
        assert_eq!(batch[0].states(), solo1.states());
        assert_eq!(batch[1].states(), solo2.states());
    }

    #[test]
    fn differentiable_rollout_matches_plain_bitwise() {
        let grid = TimeGrid::new(0.0, 0.1, 20).unwrap();
        let eta = InterventionSchedule::zeros(grid.num_points(), 1);
        let plain = integrate(&HarmonicRhs, &[0.7, 0.1], &grid, &eta).unwrap();

        let mut tape = Tape::new();
        let ctx = HarmonicRhs.bind(&mut tape, true);
        let x0 = tape.constant(Tensor::matrix(1, 2, vec![0.7, 0.1]));
        let vals =
            integrate_differentiable(&mut tape, &HarmonicRhs, &ctx, x0, &grid, &[&eta]).unwrap();
        for (k, v) in vals.iter().enumerate() {
            assert_eq!(tape.value(v).data(), plain.state(k));
        }
    }

    #[test]
    fn linear_growth_gradient_is_horizon_length() {
        // loss = X(T) with dX/dt = w -> dloss/dw = T - t0.
        let grid = TimeGrid::new(0.0, 0.1, 25).unwrap();
        let eta = InterventionSchedule::zeros(grid.num_points(), 1);
        let rhs = GrowthRhs { w: 0.37 };
        let mut tape = Tape::new();
        let ctx = rhs.bind(&mut tape, true);
        let x0 = tape.constant(Tensor::matrix(1, 1, vec![0.0]));
        let vals = integrate_differentiable(&mut tape, &rhs, &ctx, x0, &grid, &[&eta]).unwrap();
        let last = *vals.last().unwrap();
        let loss = tape.sum_all(&last);
        let grads = tape.backward(loss).unwrap();
        let expect = grid.t_max() - grid.t0;
        assert!(
            (grads[0].item() - expect).abs() < 1e-12,
            "got {}, want {expect}",
            grads[0].item()
        );
    }

    #[test]
    fn blowup_reports_step_index() {
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let eta = InterventionSchedule::zeros(grid.num_points(), 1);
        let err = integrate(&BlowupRhs, &[5.0], &grid, &eta).unwrap_err();
        match err {
            Error::NonFinite { step, .. } => assert!(step >= 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_csv_round_trips_bitwise() {
        let grid = TimeGrid::new(0.0, 0.1, 12).unwrap();
        let eta = InterventionSchedule::constant(grid.num_points(), 11.5);
        let traj = integrate(&HarmonicRhs, &[0.9, -0.3], &grid, &eta).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj, &eta).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,x2,eta1\n"));
        let (t2, e2) = read_trajectory_csv(&text, "mem").unwrap();
        assert_eq!(traj.states(), t2.states());
        assert_eq!(eta.values(), e2.values());
        assert_eq!(traj.grid, t2.grid);
    }

    #[test]
    fn grid_times_have_no_accumulation_drift() {
        let grid = TimeGrid::new(0.0, 0.1, 1000).unwrap();
        assert_eq!(grid.time(1000), 0.1 * 1000.0);
        assert_eq!(grid.time(500), 0.1 * 500.0);
    }
}
