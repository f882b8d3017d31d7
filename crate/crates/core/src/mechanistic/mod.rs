//! Closed-form parametric dynamics: pendulum variants, three-compartment
//! pharmacokinetics, and the covariate → PK-parameter tables.

pub mod covariates;
pub mod pendulum;
pub mod pk;

pub use covariates::{lbm_james, PatientCovariates, PkParamTable, Sex, TableKind};
pub use pendulum::{
    measure_period, pendulum_rhs_cylinder, pendulum_rhs_pointmass, Geometry, PendulumParams,
    PendulumRhs, PendulumState, GRAVITY,
};
pub use pk::{pk_rhs, PkParams, PkRhs, PkState};
