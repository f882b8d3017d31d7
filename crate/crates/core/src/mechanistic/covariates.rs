//! Patient covariates and the covariate → PK-parameter tables.
//!
//! Two table families cover the experiment roles: a `linear` model (fixed
//! central volume, linear covariate adjustments, James lean-body-mass input)
//! and an `allometric` model (power-of-weight scaling with age factors).
//! Coefficient values live in editable TOML files shipped with the repo;
//! nothing in the test suite depends on the specific constants, only on
//! structural properties of the mapping.

use crate::error::{Error, Result};
use crate::mechanistic::pk::PkParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientCovariates {
    /// Years.
    pub age: f64,
    pub sex: Sex,
    /// Kilograms.
    pub weight: f64,
    /// Centimeters.
    pub height: f64,
    /// Opioid treatment prior to induction.
    pub opioid: bool,
}

impl PatientCovariates {
    pub fn bmi(&self) -> f64 {
        let h_m = self.height / 100.0;
        self.weight / (h_m * h_m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.age > 0.0 && self.weight > 0.0 && self.height > 0.0) {
            return Err(Error::config(format!(
                "covariates must be positive: age={}, weight={}, height={}",
                self.age, self.weight, self.height
            )));
        }
        Ok(())
    }
}

/// James equation: lean body mass from weight (kg) and height (cm).
/// Quadratic in weight, so it degrades non-monotonically at high BMI.
pub fn lbm_james(sex: Sex, weight: f64, height: f64) -> f64 {
    let r = weight / height;
    match sex {
        Sex::Male => 1.1 * weight - 128.0 * r * r,
        Sex::Female => 1.07 * weight - 148.0 * r * r,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableKind {
    Linear,
    Allometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LbmFormula {
    James,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateTimeUnit {
    Min,
    S,
}

impl RateTimeUnit {
    fn to_seconds(self) -> f64 {
        match self {
            RateTimeUnit::Min => 60.0,
            RateTimeUnit::S => 1.0,
        }
    }
}

fn one() -> f64 {
    1.0
}

/// One table entry. Linear tables use the additive slopes; allometric tables
/// use the exponent/factor fields. Unused fields keep neutral defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coef {
    pub base: f64,
    #[serde(default)]
    pub age: f64,
    #[serde(default)]
    pub weight: f64,
    #[serde(default)]
    pub height: f64,
    #[serde(default)]
    pub lbm: f64,
    #[serde(default)]
    pub weight_exp: f64,
    #[serde(default)]
    pub age_slope: f64,
    #[serde(default = "one")]
    pub female_factor: f64,
    #[serde(default = "one")]
    pub opioid_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub age: f64,
    pub weight: f64,
    #[serde(default)]
    pub height: f64,
    #[serde(default)]
    pub lbm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub age: Option<[f64; 2]>,
    pub weight: Option<[f64; 2]>,
    pub height: Option<[f64; 2]>,
    pub bmi: Option<[f64; 2]>,
}

impl Envelope {
    fn contains(&self, cov: &PatientCovariates) -> bool {
        let within = |range: &Option<[f64; 2]>, v: f64| match range {
            Some([lo, hi]) => v >= *lo && v <= *hi,
            None => true,
        };
        within(&self.age, cov.age)
            && within(&self.weight, cov.weight)
            && within(&self.height, cov.height)
            && within(&self.bmi, cov.bmi())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamCoefs {
    v1: Coef,
    v2: Coef,
    v3: Coef,
    /// Elimination clearance (volume/time); k10 = cl/v1.
    cl: Coef,
    /// Inter-compartmental clearance 1↔2; k12 = q2/v1, k21 = q2/v2.
    q2: Coef,
    /// Inter-compartmental clearance 1↔3; k13 = q3/v1, k31 = q3/v3.
    q3: Coef,
    /// Effect-site equilibration rate (1/time), used directly.
    ke0: Coef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    schema_version: u32,
    name: String,
    version: String,
    kind: TableKind,
    #[serde(default)]
    lbm_formula: LbmFormula,
    rate_time_unit: RateTimeUnit,
    reference: Reference,
    #[serde(default)]
    envelope: Envelope,
    params: ParamCoefs,
}

pub const TABLE_SCHEMA_VERSION: u32 = 1;

/// A versioned, checksummed covariate → PkParams mapping.
#[derive(Debug, Clone)]
pub struct PkParamTable {
    file: TableFile,
    /// SHA-256 of the TOML source text.
    pub checksum: String,
}

const PRIOR_TOML: &str = include_str!("../../../../configs/pk_prior.toml");
const ORACLE_TOML: &str = include_str!("../../../../configs/pk_oracle.toml");

impl PkParamTable {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TableFile = toml::from_str(text)
            .map_err(|e| Error::Table {
                table: "<toml>".into(),
                msg: e.to_string(),
            })?;
        if file.schema_version != TABLE_SCHEMA_VERSION {
            return Err(Error::Table {
                table: file.name.clone(),
                msg: format!(
                    "schema version {} unsupported (expected {})",
                    file.schema_version, TABLE_SCHEMA_VERSION
                ),
            });
        }
        let checksum = hex_digest(text);
        Ok(PkParamTable { file, checksum })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Simple linear-covariate table bundled with the repo (the misspecified
    /// prior in the PK experiment).
    pub fn prior() -> Self {
        Self::from_toml_str(PRIOR_TOML).expect("bundled prior table is valid")
    }

    /// Allometric-scaling table bundled with the repo (the data-generating
    /// oracle in the PK experiment).
    pub fn oracle() -> Self {
        Self::from_toml_str(ORACLE_TOML).expect("bundled oracle table is valid")
    }

    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn version(&self) -> &str {
        &self.file.version
    }

    pub fn kind(&self) -> TableKind {
        self.file.kind
    }

    pub fn within_envelope(&self, cov: &PatientCovariates) -> bool {
        self.file.envelope.contains(cov)
    }

    fn eval_coef(&self, name: &str, c: &Coef, cov: &PatientCovariates, lbm: f64) -> Result<f64> {
        let r = &self.file.reference;
        let v = match self.file.kind {
            TableKind::Linear => {
                c.base
                    + c.age * (cov.age - r.age)
                    + c.weight * (cov.weight - r.weight)
                    + c.height * (cov.height - r.height)
                    + c.lbm * (lbm - r.lbm)
            }
            TableKind::Allometric => {
                let mut v = c.base
                    * (cov.weight / r.weight).powf(c.weight_exp)
                    * (c.age_slope * (cov.age - r.age)).exp();
                if cov.sex == Sex::Female {
                    v *= c.female_factor;
                }
                if cov.opioid {
                    v *= c.opioid_factor;
                }
                v
            }
        };
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Table {
                table: self.file.name.clone(),
                msg: format!(
                    "coefficient {name} evaluated non-positive ({v}) for age={}, weight={}, height={}",
                    cov.age, cov.weight, cov.height
                ),
            });
        }
        Ok(v)
    }

    /// Deterministic covariates → rate constants (1/s) and volumes (L).
    pub fn params_for(&self, cov: &PatientCovariates) -> Result<PkParams> {
        cov.validate()?;
        let lbm = match self.file.lbm_formula {
            LbmFormula::James => lbm_james(cov.sex, cov.weight, cov.height),
            LbmFormula::None => 0.0,
        };
        let p = &self.file.params;
        let v1 = self.eval_coef("v1", &p.v1, cov, lbm)?;
        let v2 = self.eval_coef("v2", &p.v2, cov, lbm)?;
        let v3 = self.eval_coef("v3", &p.v3, cov, lbm)?;
        let cl = self.eval_coef("cl", &p.cl, cov, lbm)?;
        let q2 = self.eval_coef("q2", &p.q2, cov, lbm)?;
        let q3 = self.eval_coef("q3", &p.q3, cov, lbm)?;
        let ke0 = self.eval_coef("ke0", &p.ke0, cov, lbm)?;
        let div = self.file.rate_time_unit.to_seconds();
        let params = PkParams {
            v1,
            v2,
            v3,
            k10: cl / v1 / div,
            k12: q2 / v1 / div,
            k21: q2 / v2 / div,
            k13: q3 / v1 / div,
            k31: q3 / v3 / div,
            ke0: ke0 / div,
        };
        params.validate()?;
        Ok(params)
    }
}

fn hex_digest(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patient(age: f64, weight: f64, height: f64) -> PatientCovariates {
        PatientCovariates {
            age,
            sex: Sex::Male,
            weight,
            height,
            opioid: false,
        }
    }

    #[test]
    fn builtin_tables_load_and_have_checksums() {
        let prior = PkParamTable::prior();
        let oracle = PkParamTable::oracle();
        assert_eq!(prior.kind(), TableKind::Linear);
        assert_eq!(oracle.kind(), TableKind::Allometric);
        assert_eq!(prior.checksum.len(), 64);
        assert_ne!(prior.checksum, oracle.checksum);
    }

    #[test]
    fn mapping_is_pure() {
        let table = PkParamTable::oracle();
        let cov = patient(44.0, 82.0, 178.0);
        assert_eq!(
            table.params_for(&cov).unwrap(),
            table.params_for(&cov).unwrap()
        );
    }

    #[test]
    fn allometric_clearance_scales_with_exponent() {
        // Doubling weight scales clearance by 2^0.75.
        let table = PkParamTable::oracle();
        let a = table.params_for(&patient(35.0, 60.0, 175.0)).unwrap();
        let b = table.params_for(&patient(35.0, 120.0, 175.0)).unwrap();
        let cl_a = a.k10 * a.v1;
        let cl_b = b.k10 * b.v1;
        let ratio = cl_b / cl_a;
        assert!(
            (ratio - 2f64.powf(0.75)).abs() < 1e-9,
            "clearance ratio {ratio}"
        );
    }

    #[test]
    fn james_lbm_degrades_past_its_vertex() {
        // For fixed height the James LBM is quadratic in weight with vertex
        // at w* = 1.1 h^2 / 256 (men); beyond it LBM decreases as weight
        // grows. A BMI-45 patient at 170 cm sits past the vertex.
        let h = 170.0;
        let vertex = 1.1 * h * h / 256.0;
        let bmi45 = 45.0 * (h / 100.0) * (h / 100.0);
        assert!(bmi45 > vertex);
        let just_below = lbm_james(Sex::Male, vertex - 5.0, h);
        let at_vertex = lbm_james(Sex::Male, vertex, h);
        let past = lbm_james(Sex::Male, bmi45, h);
        assert!(at_vertex > just_below);
        assert!(past < at_vertex, "LBM must fall past the vertex");
    }

    #[test]
    fn prior_clearance_reacts_to_lbm_bias() {
        // The documented high-BMI pathology: two patients with equal age and
        // height, one BMI 25 and one BMI 45, get clearances that do NOT scale
        // anywhere near proportionally because James LBM collapses.
        let table = PkParamTable::prior();
        let h = 170.0;
        let normal = table
            .params_for(&patient(50.0, 25.0 * 1.7 * 1.7, h))
            .unwrap();
        let obese = table
            .params_for(&patient(50.0, 45.0 * 1.7 * 1.7, h))
            .unwrap();
        // v1 is weight-independent in the linear table.
        assert_eq!(normal.v1, obese.v1);
        assert!(obese.k10 > normal.k10);
    }

    #[test]
    fn non_positive_param_names_offender() {
        // The linear v2 term crosses zero at high age; the error must name v2.
        let table = PkParamTable::prior();
        let err = table.params_for(&patient(110.0, 70.0, 175.0)).unwrap_err();
        match err {
            Error::Table { msg, .. } => assert!(msg.contains("v2"), "msg: {msg}"),
            other => panic!("expected table error, got {other:?}"),
        }
    }

    #[test]
    fn envelope_warns_but_params_still_computed() {
        let table = PkParamTable::prior();
        let ood = patient(85.0, 130.0, 160.0);
        assert!(!table.within_envelope(&ood));
        // OOD evaluation requires the mapping to keep working.
        assert!(table.params_for(&ood).is_ok());
    }

    #[test]
    fn opioid_flag_passes_through_with_no_default_effect() {
        let table = PkParamTable::oracle();
        let mut cov = patient(40.0, 80.0, 180.0);
        let without = table.params_for(&cov).unwrap();
        cov.opioid = true;
        let with = table.params_for(&cov).unwrap();
        assert_eq!(without, with);
    }
}
