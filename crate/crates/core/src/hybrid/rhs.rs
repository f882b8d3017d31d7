//! Engine right-hand sides for the three model kinds of each case study.
//!
//! Hybrid composition, per state channel:
//!   dX/dt = parametric + psi-network + eta-network · η(t)
//! with the PK effect-site channel instead using a positive multiplicative
//! time-constant correction plus an additive term:
//!   dCe/dt = (dCe/dt)_p · softplus(gain-net) + psi-net
//! Correction networks see only (t, X(t), β̂); the intervention enters the
//! model solely through the multiplicative gates (hybrid) or as a plain
//! input feature (data-driven).

use super::{Case, HybridModel, ModelKind, PK_COV_DIM};
use crate::engine_prelude::*;
use crate::error::{Error, Result};
use crate::mechanistic::covariates::{PatientCovariates, Sex};
use crate::mechanistic::pendulum::{PendulumParams, PendulumRhs, PendulumRhsCtx};
use crate::mechanistic::pk::{PkParams, PkRhs, PkRhsCtx};
use crate::nn::ResidualMlpVals;
use crate::odeint::OdeRhs;

fn scaled<E: Engine>(e: &mut E, v: &E::Val, weight: f64) -> E::Val {
    if weight == 1.0 {
        v.clone()
    } else {
        e.scale(v, weight)
    }
}

fn time_feature(base_times: &[f64], rows: usize, t: f64, scale: f64) -> Tensor {
    if base_times.is_empty() {
        Tensor::full(vec![rows], t / scale)
    } else {
        debug_assert_eq!(base_times.len(), rows);
        Tensor::vector(base_times.iter().map(|b| (b + t) / scale).collect())
    }
}

/// Raw covariate feature vector fed (standardized) to PK networks.
pub fn pk_cov_features(cov: &PatientCovariates) -> [f64; PK_COV_DIM] {
    [
        cov.age,
        if cov.sex == Sex::Female { 1.0 } else { 0.0 },
        cov.weight,
        cov.height,
        if cov.opioid { 1.0 } else { 0.0 },
    ]
}

/// Splits `[B, d]` standardized conditioning rows into per-feature columns.
fn columns(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return Vec::new();
    }
    let d = rows[0].len();
    (0..d)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

// ── pendulum ────────────────────────────────────────────────────────

pub struct PendulumModelRhs<'m> {
    model: &'m HybridModel,
    prior: Option<PendulumRhs>,
    /// Standardized conditioning columns, `[feature][row]`.
    beta_cols: Vec<Vec<f64>>,
    /// Per-row absolute time of the rollout's t = 0 (window starts).
    base_times: Vec<f64>,
}

pub struct PendulumModelCtx<V> {
    prior: Option<PendulumRhsCtx<V>>,
    nets: Vec<ResidualMlpVals<V>>,
    beta_cols: Vec<V>,
}

impl<'m> PendulumModelRhs<'m> {
    /// `beta_hat` carries one (m̂, l̂_cm) row per batch unit; the data-driven
    /// kind ignores it.
    pub fn new(model: &'m HybridModel, beta_hat: &[[f64; 2]]) -> Result<Self> {
        if model.case != Case::Pendulum {
            return Err(Error::config("pendulum rhs on a non-pendulum model"));
        }
        let prior = match model.kind {
            ModelKind::DataDrivenOnly => None,
            _ => {
                if beta_hat.is_empty() {
                    return Err(Error::missing("mechanistic parameters (beta) for rollout"));
                }
                // Encoder estimates are unconstrained; the parametric core
                // needs strictly positive mass and length, so floor them.
                Some(PendulumRhs::new(
                    &beta_hat
                        .iter()
                        .map(|b| PendulumParams::point_mass(b[0].max(1e-3), b[1].max(1e-3)))
                        .collect::<Vec<_>>(),
                ))
            }
        };
        let beta_cols = if model.kind == ModelKind::Hybrid {
            let rows: Vec<Vec<f64>> = beta_hat
                .iter()
                .map(|b| model.norm.standardize_beta(&b[..]))
                .collect();
            columns(&rows)
        } else {
            Vec::new()
        };
        Ok(PendulumModelRhs {
            model,
            prior,
            beta_cols,
            base_times: Vec::new(),
        })
    }

    /// Absolute start time per batch row; the networks' time feature is
    /// (base + t)/time_scale. Defaults to zero (absolute-time rollouts).
    pub fn with_base_times(mut self, base_times: Vec<f64>) -> Self {
        self.base_times = base_times;
        self
    }
}

impl OdeRhs for PendulumModelRhs<'_> {
    type Ctx<E: Engine> = PendulumModelCtx<E::Val>;

    fn state_dim(&self) -> usize {
        2
    }

    fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> Self::Ctx<E> {
        PendulumModelCtx {
            prior: self.prior.as_ref().map(|p| p.bind(e, false)),
            nets: self
                .model
                .nets
                .iter()
                .map(|n| n.bind(e, trainable))
                .collect(),
            beta_cols: self
                .beta_cols
                .iter()
                .map(|c| e.constant(Tensor::vector(c.clone())))
                .collect(),
        }
    }

    fn eval<E: Engine>(
        &self,
        e: &mut E,
        ctx: &Self::Ctx<E>,
        t: f64,
        x: &E::Val,
        eta: &E::Val,
    ) -> E::Val {
        let norm = &self.model.norm;
        let theta = e.col(x, 0);
        let omega = e.col(x, 1);
        let tau = e.col(eta, 0);
        let rows = e.value(&theta).numel();
        let t_col = e.constant(time_feature(&self.base_times, rows, t, norm.time_scale));

        match self.model.kind {
            ModelKind::MechanisticOnly => {
                let [dtheta, domega] = self.prior.as_ref().unwrap().eval_channels(
                    e,
                    ctx.prior.as_ref().unwrap(),
                    &theta,
                    &omega,
                    &tau,
                );
                e.stack_cols(&[dtheta, domega])
            }
            ModelKind::DataDrivenOnly => {
                let tau_in = e.scale(&tau, 1.0 / norm.eta_scale);
                let th_in = e.scale(&theta, 1.0 / norm.state_scales[0]);
                let om_in = e.scale(&omega, 1.0 / norm.state_scales[1]);
                let feats = e.stack_cols(&[t_col, th_in, om_in, tau_in]);
                let dtheta = {
                    let out = ctx.nets[0].forward(e, &feats);
                    e.col(&out, 0)
                };
                let domega = {
                    let out = ctx.nets[1].forward(e, &feats);
                    e.col(&out, 0)
                };
                e.stack_cols(&[dtheta, domega])
            }
            ModelKind::Hybrid => {
                let [dtheta_p, domega_p] = self.prior.as_ref().unwrap().eval_channels(
                    e,
                    ctx.prior.as_ref().unwrap(),
                    &theta,
                    &omega,
                    &tau,
                );
                let th_in = e.scale(&theta, 1.0 / norm.state_scales[0]);
                let om_in = e.scale(&omega, 1.0 / norm.state_scales[1]);
                let feats = e.stack_cols(&[
                    t_col,
                    th_in,
                    om_in,
                    ctx.beta_cols[0].clone(),
                    ctx.beta_cols[1].clone(),
                ]);
                let bal = &self.model.balance;
                let net_col = |e: &mut E, vals: &ResidualMlpVals<E::Val>| {
                    let out = vals.forward(e, &feats);
                    e.col(&out, 0)
                };
                let f_psi = net_col(e, &ctx.nets[0]);
                let f_psi = scaled(e, &f_psi, bal.f_psi);
                let f_eta = {
                    let raw = net_col(e, &ctx.nets[1]);
                    let gated = e.mul(&raw, &tau);
                    scaled(e, &gated, bal.f_eta)
                };
                let dtheta = {
                    let s = e.add(&dtheta_p, &f_psi);
                    e.add(&s, &f_eta)
                };
                let g_psi = net_col(e, &ctx.nets[2]);
                let g_psi = scaled(e, &g_psi, bal.g_a);
                let g_eta = {
                    let raw = net_col(e, &ctx.nets[3]);
                    let gated = e.mul(&raw, &tau);
                    scaled(e, &gated, bal.g_b)
                };
                let domega = {
                    let s = e.add(&domega_p, &g_psi);
                    e.add(&s, &g_eta)
                };
                e.stack_cols(&[dtheta, domega])
            }
        }
    }
}

// ── pharmacokinetics ────────────────────────────────────────────────

pub struct PkModelRhs<'m> {
    model: &'m HybridModel,
    prior: Option<PkRhs>,
    /// Standardized covariate columns, `[feature][row]`.
    cov_cols: Vec<Vec<f64>>,
    /// Per-row absolute time of the rollout's t = 0 (window starts).
    base_times: Vec<f64>,
}

pub struct PkModelCtx<V> {
    prior: Option<PkRhsCtx<V>>,
    nets: Vec<ResidualMlpVals<V>>,
    cov_cols: Vec<V>,
}

impl<'m> PkModelRhs<'m> {
    /// `prior_params` holds one prior-table parameter set per batch unit
    /// (unused by the data-driven kind); `covs` the matching covariates
    /// (unused by the mechanistic kind).
    pub fn new(
        model: &'m HybridModel,
        prior_params: &[PkParams],
        covs: &[PatientCovariates],
    ) -> Result<Self> {
        if model.case != Case::Pk {
            return Err(Error::config("pk rhs on a non-pk model"));
        }
        let prior = match model.kind {
            ModelKind::DataDrivenOnly => None,
            _ => {
                if prior_params.is_empty() {
                    return Err(Error::missing("prior PkParams for rollout"));
                }
                Some(PkRhs::new(prior_params))
            }
        };
        let cov_cols = if model.kind == ModelKind::MechanisticOnly {
            Vec::new()
        } else {
            let rows: Vec<Vec<f64>> = covs
                .iter()
                .map(|c| model.norm.standardize_beta(&pk_cov_features(c)))
                .collect();
            if rows.is_empty() {
                return Err(Error::missing("patient covariates for rollout"));
            }
            columns(&rows)
        };
        Ok(PkModelRhs {
            model,
            prior,
            cov_cols,
            base_times: Vec::new(),
        })
    }

    /// Absolute start time per batch row; the networks' time feature is
    /// (base + t)/time_scale. Defaults to zero (absolute-time rollouts).
    pub fn with_base_times(mut self, base_times: Vec<f64>) -> Self {
        self.base_times = base_times;
        self
    }
}

impl OdeRhs for PkModelRhs<'_> {
    type Ctx<E: Engine> = PkModelCtx<E::Val>;

    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn bind<E: Engine>(&self, e: &mut E, trainable: bool) -> Self::Ctx<E> {
        PkModelCtx {
            prior: self.prior.as_ref().map(|p| p.bind(e, false)),
            nets: self
                .model
                .nets
                .iter()
                .map(|n| n.bind(e, trainable))
                .collect(),
            cov_cols: self
                .cov_cols
                .iter()
                .map(|c| e.constant(Tensor::vector(c.clone())))
                .collect(),
        }
    }

    fn eval<E: Engine>(
        &self,
        e: &mut E,
        ctx: &Self::Ctx<E>,
        t: f64,
        x: &E::Val,
        eta: &E::Val,
    ) -> E::Val {
        let norm = &self.model.norm;
        let u = e.col(eta, 0);
        let rows = e.value(&u).numel();
        let t_col = e.constant(time_feature(&self.base_times, rows, t, norm.time_scale));

        match self.model.kind {
            ModelKind::MechanisticOnly => {
                let prior = self.prior.as_ref().unwrap();
                let pctx = ctx.prior.as_ref().unwrap();
                let a1 = e.col(x, 0);
                let a2 = e.col(x, 1);
                let a3 = e.col(x, 2);
                let ce = e.col(x, 3);
                let [da1, da2, da3, dce] = prior.eval_channels(e, pctx, &a1, &a2, &a3, &ce, &u);
                e.stack_cols(&[da1, da2, da3, dce])
            }
            ModelKind::DataDrivenOnly => {
                let cp = e.col(x, 0);
                let ce = e.col(x, 1);
                let cp_in = e.scale(&cp, 1.0 / norm.state_scales[0]);
                let ce_in = e.scale(&ce, 1.0 / norm.state_scales[1]);
                let u_in = e.scale(&u, 1.0 / norm.eta_scale);
                let mut cols = vec![t_col, cp_in, ce_in];
                cols.extend(ctx.cov_cols.iter().cloned());
                cols.push(u_in);
                let feats = e.stack_cols(&cols);
                let dcp = {
                    let out = ctx.nets[0].forward(e, &feats);
                    e.col(&out, 0)
                };
                let dce = {
                    let out = ctx.nets[1].forward(e, &feats);
                    e.col(&out, 0)
                };
                e.stack_cols(&[dcp, dce])
            }
            ModelKind::Hybrid => {
                let prior = self.prior.as_ref().unwrap();
                let pctx = ctx.prior.as_ref().unwrap();
                let a1 = e.col(x, 0);
                let a2 = e.col(x, 1);
                let a3 = e.col(x, 2);
                let ce = e.col(x, 3);
                let [da1_p, da2_p, da3_p, dce_p] =
                    prior.eval_channels(e, pctx, &a1, &a2, &a3, &ce, &u);

                let mut cols = vec![
                    t_col,
                    e.scale(&a1, 1.0 / norm.state_scales[0]),
                    e.scale(&a2, 1.0 / norm.state_scales[1]),
                    e.scale(&a3, 1.0 / norm.state_scales[2]),
                    e.scale(&ce, 1.0 / norm.state_scales[3]),
                ];
                cols.extend(ctx.cov_cols.iter().cloned());
                let feats = e.stack_cols(&cols);
                let bal = &self.model.balance;
                let net_col = |e: &mut E, vals: &ResidualMlpVals<E::Val>| {
                    let out = vals.forward(e, &feats);
                    e.col(&out, 0)
                };
                let f_psi = net_col(e, &ctx.nets[0]);
                let f_psi = scaled(e, &f_psi, bal.f_psi);
                let f_eta = {
                    let raw = net_col(e, &ctx.nets[1]);
                    let gated = e.mul(&raw, &u);
                    scaled(e, &gated, bal.f_eta)
                };
                let da1 = {
                    let s = e.add(&da1_p, &f_psi);
                    e.add(&s, &f_eta)
                };

                // Positive multiplicative time-constant correction on Ce.
                let gain_raw = net_col(e, &ctx.nets[2]);
                let gain = {
                    let sp = e.softplus(&gain_raw);
                    if bal.g_a == 1.0 {
                        sp
                    } else {
                        let ones = e.constant(Tensor::full(vec![rows], 1.0));
                        let dev = e.sub(&sp, &ones);
                        let dev = e.scale(&dev, bal.g_a);
                        e.add(&ones, &dev)
                    }
                };
                let ce_psi = net_col(e, &ctx.nets[3]);
                let ce_psi = scaled(e, &ce_psi, bal.g_b);
                let dce = {
                    let scaled_p = e.mul(&dce_p, &gain);
                    e.add(&scaled_p, &ce_psi)
                };
                e.stack_cols(&[da1, da2_p, da3_p, dce])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hybrid::{build_model, ModelConfig};
    use crate::mechanistic::pk::pk_rhs;
    use crate::mechanistic::pk::PkState;
    use crate::odeint::{integrate, InterventionSchedule, TimeGrid};

    fn test_cov() -> PatientCovariates {
        PatientCovariates {
            age: 44.0,
            sex: Sex::Male,
            weight: 80.0,
            height: 178.0,
            opioid: false,
        }
    }

    fn prior_params() -> PkParams {
        crate::mechanistic::PkParamTable::prior()
            .params_for(&test_cov())
            .unwrap()
    }

    #[test]
    fn zero_weight_pendulum_hybrid_reduces_to_point_mass() {
        let mut model = build_model(ModelKind::Hybrid, Case::Pendulum, &ModelConfig::default(), 5);
        model.zero_correction_weights();
        let beta = [[3.8, 2.1]];
        let hybrid_rhs = PendulumModelRhs::new(&model, &beta).unwrap();

        let mech = build_model(
            ModelKind::MechanisticOnly,
            Case::Pendulum,
            &ModelConfig::default(),
            5,
        );
        let mech_rhs = PendulumModelRhs::new(&mech, &beta).unwrap();

        let grid = TimeGrid::new(0.0, 0.1, 100).unwrap();
        let eta = InterventionSchedule::constant(grid.num_points(), 11.0);
        let a = integrate(&hybrid_rhs, &[0.1, 0.0], &grid, &eta).unwrap();
        let b = integrate(&mech_rhs, &[0.1, 0.0], &grid, &eta).unwrap();
        let max_diff = a
            .states()
            .iter()
            .zip(b.states())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-10, "max abs diff {max_diff}");
    }

    #[test]
    fn zero_weight_pk_hybrid_reduces_to_prior() {
        let mut model = build_model(ModelKind::Hybrid, Case::Pk, &ModelConfig::default(), 5);
        model.zero_correction_weights();
        let pp = [prior_params()];
        let covs = [test_cov()];
        let hybrid_rhs = PkModelRhs::new(&model, &pp, &covs).unwrap();

        let mech = build_model(ModelKind::MechanisticOnly, Case::Pk, &ModelConfig::default(), 5);
        let mech_rhs = PkModelRhs::new(&mech, &pp, &covs).unwrap();

        let grid = TimeGrid::new(0.0, 0.5, 420).unwrap();
        let mut eta = InterventionSchedule::zeros(grid.num_points(), 1);
        for b in 0..5 {
            eta.value_mut(b * 20)[0] = 60.0;
        }
        let a = integrate(&hybrid_rhs, &[0.0; 4], &grid, &eta).unwrap();
        let b = integrate(&mech_rhs, &[0.0; 4], &grid, &eta).unwrap();
        let max_diff = a
            .states()
            .iter()
            .zip(b.states())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-10, "max abs diff {max_diff}");
    }

    #[test]
    fn mechanistic_pk_model_matches_scalar_rhs() {
        let model = build_model(ModelKind::MechanisticOnly, Case::Pk, &ModelConfig::default(), 1);
        let pp = [prior_params()];
        let covs = [test_cov()];
        let rhs = PkModelRhs::new(&model, &pp, &covs).unwrap();
        let mut e = EvalEngine::new();
        let ctx = rhs.bind(&mut e, false);
        let state = PkState {
            a1: 20.0,
            a2: 2.0,
            a3: 0.5,
            ce: 1.2,
        };
        let x = e.constant(Tensor::matrix(1, 4, state.to_array().to_vec()));
        let eta = e.constant(Tensor::matrix(1, 1, vec![30.0]));
        let d = rhs.eval(&mut e, &ctx, 3.0, &x, &eta);
        assert_eq!(d.data(), &pk_rhs(3.0, state, &pp[0], 30.0));
    }

    #[test]
    fn eta_networks_are_silent_without_intervention() {
        // With tau == 0 the trajectories are invariant to the eta-gated
        // network weights.
        let beta = [[4.0, 2.2]];
        let grid = TimeGrid::new(0.0, 0.1, 50).unwrap();
        let eta = InterventionSchedule::zeros(grid.num_points(), 1);

        let run = |seed: u64, scramble_eta_nets: bool| {
            let mut model =
                build_model(ModelKind::Hybrid, Case::Pendulum, &ModelConfig::default(), 7);
            if scramble_eta_nets {
                let mut rng = crate::seeds::rng(seed, "scramble");
                for idx in [1usize, 3] {
                    for p in model.nets[idx].params_mut() {
                        for v in p.data_mut() {
                            *v += rand::Rng::gen_range(&mut rng, -0.5..0.5);
                        }
                    }
                }
            }
            let rhs = PendulumModelRhs::new(&model, &beta).unwrap();
            integrate(&rhs, &[0.15, -0.05], &grid, &eta).unwrap()
        };
        let base = run(0, false);
        let scrambled = run(123, true);
        assert_eq!(base.states(), scrambled.states());
    }

    #[test]
    fn torque_sensitivity_matches_gate_structure() {
        // Holding the state fixed, domega/dt is affine in tau with slope
        // 1/(m l^2) + G_eta(t, X, beta): finite slopes at different deltas
        // agree, and a nonzero gate shifts the slope off the parametric term.
        let mut model = build_model(ModelKind::Hybrid, Case::Pendulum, &ModelConfig::default(), 3);
        // Give the eta nets clearly nonzero output.
        model.nets[1].output_proj.b.data_mut()[0] = 0.3;
        model.nets[3].output_proj.b.data_mut()[0] = -0.2;
        let beta = [[3.9f64, 2.05f64]];
        let rhs = PendulumModelRhs::new(&model, &beta).unwrap();

        let eval_at = |tau: f64| -> Vec<f64> {
            let mut e = EvalEngine::new();
            let ctx = rhs.bind(&mut e, false);
            let x = e.constant(Tensor::matrix(1, 2, vec![0.2, -0.1]));
            let eta = e.constant(Tensor::matrix(1, 1, vec![tau]));
            rhs.eval(&mut e, &ctx, 1.0, &x, &eta).data().to_vec()
        };

        let base = eval_at(10.0);
        let slope_a = (eval_at(10.75)[1] - base[1]) / 0.75;
        let slope_b = (eval_at(12.0)[1] - base[1]) / 2.0;
        assert!((slope_a - slope_b).abs() < 1e-9, "{slope_a} vs {slope_b}");

        let parametric_slope = 1.0 / (beta[0][0] * beta[0][1] * beta[0][1]);
        assert!(
            (slope_a - parametric_slope).abs() > 1e-3,
            "gate output should shift the sensitivity away from the bare parametric term"
        );
    }

    #[test]
    fn pk_ce_gain_is_positive_for_random_weights() {
        // Property: for any gain-network weights, the multiplicative Ce
        // correction stays > 0, so dCe/dt keeps the sign of its parametric
        // part when the additive term is silenced.
        let pp = [prior_params()];
        let covs = [test_cov()];
        for seed in 0..30u64 {
            let mut model = build_model(ModelKind::Hybrid, Case::Pk, &ModelConfig::default(), seed);
            let mut rng = crate::seeds::rng(seed, "scramble-gain");
            for p in model.nets[2].params_mut() {
                for v in p.data_mut() {
                    *v = rand::Rng::gen_range(&mut rng, -3.0..3.0);
                }
            }
            model.nets[3].zero_weights();
            let rhs = PkModelRhs::new(&model, &pp, &covs).unwrap();
            let mut e = EvalEngine::new();
            let ctx = rhs.bind(&mut e, false);

            let state = PkState {
                a1: rand::Rng::gen_range(&mut rng, 1.0..300.0),
                a2: 0.0,
                a3: 0.0,
                ce: rand::Rng::gen_range(&mut rng, 0.0..10.0),
            };
            let x = e.constant(Tensor::matrix(1, 4, state.to_array().to_vec()));
            let eta = e.constant(Tensor::matrix(1, 1, vec![0.0]));
            let d = rhs.eval(&mut e, &ctx, 10.0, &x, &eta);
            let dce_p = pk_rhs(10.0, state, &pp[0], 0.0)[3];
            if dce_p != 0.0 {
                let gain = d.data()[3] / dce_p;
                assert!(gain > 0.0, "seed {seed}: gain {gain} not positive");
            }
        }
    }
}
