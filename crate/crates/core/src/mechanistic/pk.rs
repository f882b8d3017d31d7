//! Three-compartment mammillary pharmacokinetics with an effect site.
//!
//! States are compartment amounts A1..A3 (mg) plus the effect-site
//! concentration Ce (µg/mL). Plasma concentration is Cp = A1/V1; Ce lags Cp
//! with first-order rate ke0. Time is in seconds, volumes in liters, so
//! concentrations come out in mg/L = µg/mL.

use crate::engine_prelude::*;
use crate::odeint::OdeRhs;
use serde::{Deserialize, Serialize};

/// Rate constants in 1/s, volumes in liters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkParams {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub k10: f64,
    pub k12: f64,
    pub k21: f64,
    pub k13: f64,
    pub k31: f64,
    pub ke0: f64,
}

impl PkParams {
    pub fn validate(&self) -> crate::Result<()> {
        let fields = [
            ("v1", self.v1),
            ("v2", self.v2),
            ("v3", self.v3),
            ("k10", self.k10),
            ("k12", self.k12),
            ("k21", self.k21),
            ("k13", self.k13),
            ("k31", self.k31),
            ("ke0", self.ke0),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(crate::Error::config(format!(
                    "pk parameter {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn cp(&self, a1: f64) -> f64 {
        a1 / self.v1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkState {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub ce: f64,
}

impl PkState {
    pub const ZERO: PkState = PkState {
        a1: 0.0,
        a2: 0.0,
        a3: 0.0,
        ce: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.a1, self.a2, self.a3, self.ce]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        PkState {
            a1: s[0],
            a2: s[1],
            a3: s[2],
            ce: s[3],
        }
    }
}

/// dState/dt under infusion rate `u` (mg/s).
pub fn pk_rhs(_t: f64, state: PkState, p: &PkParams, u: f64) -> [f64; 4] {
    let loss1 = -(p.k10 + p.k12 + p.k13);
    let inv_v1 = 1.0 / p.v1;
    let a1k21 = state.a2 * p.k21;
    let a3k31 = state.a3 * p.k31;
    let da1 = (state.a1 * loss1 + a1k21) + (a3k31 + u);
    let da2 = state.a1 * p.k12 - a1k21;
    let da3 = state.a1 * p.k13 - a3k31;
    let dce = p.ke0 * (state.a1 * inv_v1 - state.ce);
    [da1, da2, da3, dce]
}

/// Batched PK dynamics; one parameter set per batch row.
pub struct PkRhs {
    loss1: Vec<f64>,
    k12: Vec<f64>,
    k21: Vec<f64>,
    k13: Vec<f64>,
    k31: Vec<f64>,
    ke0: Vec<f64>,
    inv_v1: Vec<f64>,
}

pub struct PkRhsCtx<V> {
    loss1: V,
    k12: V,
    k21: V,
    k13: V,
    k31: V,
    ke0: V,
    inv_v1: V,
}

impl PkRhs {
    pub fn new(params: &[PkParams]) -> Self {
        PkRhs {
            loss1: params.iter().map(|p| -(p.k10 + p.k12 + p.k13)).collect(),
            k12: params.iter().map(|p| p.k12).collect(),
            k21: params.iter().map(|p| p.k21).collect(),
            k13: params.iter().map(|p| p.k13).collect(),
            k31: params.iter().map(|p| p.k31).collect(),
            ke0: params.iter().map(|p| p.ke0).collect(),
            inv_v1: params.iter().map(|p| 1.0 / p.v1).collect(),
        }
    }

    pub fn batch_len(&self) -> usize {
        self.loss1.len()
    }

    /// Shared by the hybrid model: evaluates the four parametric channel
    /// derivatives from already-extracted state columns.
    pub fn eval_channels<E: Engine>(
        &self,
        e: &mut E,
        ctx: &PkRhsCtx<E::Val>,
        a1: &E::Val,
        a2: &E::Val,
        a3: &E::Val,
        ce: &E::Val,
        u: &E::Val,
    ) -> [E::Val; 4] {
        let a2k21 = e.mul(a2, &ctx.k21);
        let a3k31 = e.mul(a3, &ctx.k31);
        let da1 = {
            let t1 = e.mul(a1, &ctx.loss1);
            let t1 = e.add(&t1, &a2k21);
            let t2 = e.add(&a3k31, u);
            e.add(&t1, &t2)
        };
        let da2 = {
            let t = e.mul(a1, &ctx.k12);
            e.sub(&t, &a2k21)
        };
        let da3 = {
            let t = e.mul(a1, &ctx.k13);
            e.sub(&t, &a3k31)
        };
        let dce = {
            let cp = e.mul(a1, &ctx.inv_v1);
            let diff = e.sub(&cp, ce);
            e.mul(&ctx.ke0, &diff)
        };
        [da1, da2, da3, dce]
    }
}

impl OdeRhs for PkRhs {
    type Ctx<E: Engine> = PkRhsCtx<E::Val>;

    fn state_dim(&self) -> usize {
        4
    }

    fn bind<E: Engine>(&self, e: &mut E, _trainable: bool) -> Self::Ctx<E> {
        PkRhsCtx {
            loss1: e.constant(Tensor::vector(self.loss1.clone())),
            k12: e.constant(Tensor::vector(self.k12.clone())),
            k21: e.constant(Tensor::vector(self.k21.clone())),
            k13: e.constant(Tensor::vector(self.k13.clone())),
            k31: e.constant(Tensor::vector(self.k31.clone())),
            ke0: e.constant(Tensor::vector(self.ke0.clone())),
            inv_v1: e.constant(Tensor::vector(self.inv_v1.clone())),
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
        let a1 = e.col(x, 0);
        let a2 = e.col(x, 1);
        let a3 = e.col(x, 2);
        let ce = e.col(x, 3);
        let u = e.col(eta, 0);
        let [da1, da2, da3, dce] = self.eval_channels(e, ctx, &a1, &a2, &a3, &ce, &u);
        e.stack_cols(&[da1, da2, da3, dce])
    }
}
