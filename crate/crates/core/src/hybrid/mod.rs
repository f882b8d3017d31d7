//! The hybrid transition operator: a parametric mechanistic core plus four
//! correction networks, split into intervention-independent terms and terms
//! gated multiplicatively by the intervention. Purely mechanistic and purely
//! data-driven models are the degenerate configurations of the same builder.

mod rhs;

pub use rhs::{pk_cov_features, PendulumModelRhs, PkModelRhs};

use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, EncoderNet, MlpConfig, ResidualMlp};
use crate::seeds;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Case {
    Pendulum,
    Pk,
}

impl std::fmt::Display for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Case::Pendulum => write!(f, "pendulum"),
            Case::Pk => write!(f, "pk"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MechanisticOnly,
    DataDrivenOnly,
    Hybrid,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::MechanisticOnly => write!(f, "mechanistic"),
            ModelKind::DataDrivenOnly => write!(f, "data-driven"),
            ModelKind::Hybrid => write!(f, "hybrid"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetDims {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub init_gain: f64,
}

impl NetDims {
    /// Architecture defaults per case and kind.
    pub fn defaults(case: Case, kind: ModelKind) -> NetDims {
        match (case, kind) {
            (Case::Pendulum, ModelKind::Hybrid) => NetDims {
                hidden_dim: 64,
                num_blocks: 4,
                init_gain: 0.3,
            },
            (Case::Pk, ModelKind::Hybrid) => NetDims {
                hidden_dim: 64,
                num_blocks: 4,
                init_gain: 0.2,
            },
            (Case::Pendulum, ModelKind::DataDrivenOnly) => NetDims {
                hidden_dim: 128,
                num_blocks: 6,
                init_gain: 1.0,
            },
            (Case::Pk, ModelKind::DataDrivenOnly) => NetDims {
                hidden_dim: 64,
                num_blocks: 4,
                init_gain: 1.0,
            },
            (_, ModelKind::MechanisticOnly) => NetDims {
                hidden_dim: 0,
                num_blocks: 0,
                init_gain: 0.0,
            },
        }
    }
}

/// Fixed scalar multipliers on each correction network's contribution;
/// 1.0 leaves the composition exactly as written, 0.0 silences a network.
/// For the multiplicative Ce gain the weight interpolates toward identity:
/// factor = 1 + w·(softplus(raw) − 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub f_psi: f64,
    pub f_eta: f64,
    pub g_a: f64,
    pub g_b: f64,
}

impl Default for BalanceWeights {
    fn default() -> Self {
        BalanceWeights {
            f_psi: 1.0,
            f_eta: 1.0,
            g_a: 1.0,
            g_b: 1.0,
        }
    }
}

/// Input normalization applied before the correction networks; stored in the
/// checkpoint so inference matches training exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Network time input is t / time_scale.
    pub time_scale: f64,
    /// One scale per model state channel.
    pub state_scales: Vec<f64>,
    /// Data-driven models feed eta / eta_scale as an input.
    pub eta_scale: f64,
    /// Conditioning-vector standardization (set from training data).
    pub beta_mean: Vec<f64>,
    pub beta_std: Vec<f64>,
}

impl Normalization {
    pub fn defaults(case: Case, kind: ModelKind) -> Normalization {
        match case {
            Case::Pendulum => Normalization {
                time_scale: 10.0,
                state_scales: vec![1.0, 1.0],
                eta_scale: 10.0,
                beta_mean: vec![0.0; 2],
                beta_std: vec![1.0; 2],
            },
            Case::Pk => Normalization {
                time_scale: 210.0,
                // Amount channels scale by 25 ug/mL x 6 L; Ce by its target scale.
                state_scales: match kind {
                    ModelKind::DataDrivenOnly => vec![25.0, 3.5],
                    _ => vec![150.0, 150.0, 150.0, 3.5],
                },
                eta_scale: 60.0,
                // age, sex, weight, height, opioid.
                beta_mean: vec![0.0; 5],
                beta_std: vec![1.0; 5],
            },
        }
    }

    pub fn standardize_beta(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter()
            .zip(self.beta_mean.iter().zip(self.beta_std.iter()))
            .map(|(&b, (&m, &s))| (b - m) / s.max(1e-12))
            .collect()
    }

    /// Fit beta mean/std over rows of conditioning vectors.
    pub fn fit_beta(&mut self, rows: &[Vec<f64>]) {
        if rows.is_empty() {
            return;
        }
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, &v), &m) in var.iter_mut().zip(r).zip(mean.iter()) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|&v| (v / n).sqrt().max(1e-12)).collect();
        self.beta_mean = mean;
        self.beta_std = std;
    }
}

/// Output bias giving softplus(b) = 1, so a zero-weight gain network starts
/// as the identity time-constant correction.
pub const SOFTPLUS_INV_ONE: f64 = 0.5413248546129181;

/// Builder options; `None` fields fall back to the per-case defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: Option<NetDims>,
    pub balance: Option<BalanceWeights>,
}

/// Reference to the encoder checkpoint a pendulum model was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderRef {
    pub path: String,
    pub sha256: String,
}

/// A parametric-core descriptor plus correction networks for one case study.
///
/// Network layout by (case, kind):
/// - pendulum hybrid: `[theta_psi, theta_eta, omega_psi, omega_eta]`
/// - pk hybrid: `[a1_psi, a1_eta, ce_gain, ce_psi]`
/// - data-driven: one network per state channel
/// - mechanistic-only: none
#[derive(Debug, Clone)]
pub struct HybridModel {
    pub case: Case,
    pub kind: ModelKind,
    pub dims: NetDims,
    pub norm: Normalization,
    pub balance: BalanceWeights,
    pub nets: Vec<ResidualMlp>,
    pub encoder_ref: Option<EncoderRef>,
}

/// Number of patient-covariate features fed to PK networks.
pub const PK_COV_DIM: usize = 5;

impl HybridModel {
    /// Input feature width of the correction/data-driven networks.
    pub fn net_input_dim(case: Case, kind: ModelKind) -> usize {
        match (case, kind) {
            // t, theta, omega, m_hat, l_hat
            (Case::Pendulum, ModelKind::Hybrid) => 5,
            // t, theta, omega, tau
            (Case::Pendulum, ModelKind::DataDrivenOnly) => 4,
            // t, A1, A2, A3, Ce, covariates
            (Case::Pk, ModelKind::Hybrid) => 5 + PK_COV_DIM,
            // t, Cp, Ce, covariates, u
            (Case::Pk, ModelKind::DataDrivenOnly) => 3 + PK_COV_DIM + 1,
            (_, ModelKind::MechanisticOnly) => 0,
        }
    }

    pub fn state_dim(&self) -> usize {
        match (self.case, self.kind) {
            (Case::Pendulum, _) => 2,
            (Case::Pk, ModelKind::DataDrivenOnly) => 2,
            (Case::Pk, _) => 4,
        }
    }

    pub fn num_nets(kind: ModelKind) -> usize {
        match kind {
            ModelKind::MechanisticOnly => 0,
            ModelKind::DataDrivenOnly => 2,
            ModelKind::Hybrid => 4,
        }
    }
}

/// Construct a model with freshly initialized networks.
pub fn build_model(kind: ModelKind, case: Case, config: &ModelConfig, seed: u64) -> HybridModel {
    let dims = config.dims.unwrap_or_else(|| NetDims::defaults(case, kind));
    let balance = config.balance.unwrap_or_default();
    let norm = Normalization::defaults(case, kind);
    let input_dim = HybridModel::net_input_dim(case, kind);
    let mut nets = Vec::new();
    for i in 0..HybridModel::num_nets(kind) {
        let mut rng = seeds::rng(seed, &format!("model-net-{i}"));
        let cfg = MlpConfig {
            input_dim,
            hidden_dim: dims.hidden_dim,
            num_blocks: dims.num_blocks,
            output_dim: 1,
            init_gain: dims.init_gain,
        };
        let mut net = ResidualMlp::new(cfg, &mut rng);
        // The PK Ce gain passes through softplus; bias-calibrate it so the
        // initial multiplicative correction sits at 1.
        if case == Case::Pk && kind == ModelKind::Hybrid && i == 2 {
            net.output_proj.b.data_mut()[0] = SOFTPLUS_INV_ONE;
        }
        nets.push(net);
    }
    HybridModel {
        case,
        kind,
        dims,
        norm,
        balance,
        nets,
        encoder_ref: None,
    }
}

impl HybridModel {
    /// Trainable parameters across all networks, canonical order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.nets.iter().flat_map(|n| n.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets.iter_mut().flat_map(|n| n.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Zero every correction weight and re-calibrate the Ce gain bias; the
    /// model then reproduces its parametric core exactly.
    pub fn zero_correction_weights(&mut self) {
        for net in &mut self.nets {
            net.zero_weights();
        }
        if self.case == Case::Pk && self.kind == ModelKind::Hybrid {
            self.nets[2].output_proj.b.data_mut()[0] = SOFTPLUS_INV_ONE;
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = ModelHeader {
            schema_version: 1,
            case: self.case,
            kind: self.kind,
            dims: self.dims,
            norm: self.norm.clone(),
            balance: self.balance,
            encoder_ref: self.encoder_ref.clone(),
            net_configs: self.nets.iter().map(|n| n.config.clone()).collect(),
        };
        let mut arrays = Vec::new();
        for (i, net) in self.nets.iter().enumerate() {
            for (j, p) in net.params().iter().enumerate() {
                arrays.push((format!("net{i}.p{j}"), p.data().to_vec()));
            }
        }
        write_checkpoint(path, &header, &arrays)
    }

    pub fn load(path: &std::path::Path) -> Result<HybridModel> {
        let (header, arrays): (ModelHeader, _) = read_checkpoint(path)?;
        let mut nets = Vec::new();
        let mut cursor = arrays.iter();
        for cfg in &header.net_configs {
            // Shape comes from the config; weights overwritten from arrays.
            let mut rng = seeds::rng(0, "load-placeholder");
            let mut net = ResidualMlp::new(cfg.clone(), &mut rng);
            for p in net.params_mut() {
                let (name, data) = cursor.next().ok_or_else(|| {
                    Error::Checkpoint("model checkpoint missing weight arrays".into())
                })?;
                if data.len() != p.numel() {
                    return Err(Error::Checkpoint(format!(
                        "array {name} has {} values, expected {}",
                        data.len(),
                        p.numel()
                    )));
                }
                p.data_mut().copy_from_slice(data);
            }
            nets.push(net);
        }
        Ok(HybridModel {
            case: header.case,
            kind: header.kind,
            dims: header.dims,
            norm: header.norm,
            balance: header.balance,
            nets,
            encoder_ref: header.encoder_ref,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    schema_version: u32,
    case: Case,
    kind: ModelKind,
    dims: NetDims,
    norm: Normalization,
    balance: BalanceWeights,
    encoder_ref: Option<EncoderRef>,
    net_configs: Vec<MlpConfig>,
}

// ── encoder checkpoints ─────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct EncoderHeader {
    schema_version: u32,
    config: EncoderConfig,
}

pub fn save_encoder(net: &EncoderNet, path: &std::path::Path) -> Result<()> {
    let header = EncoderHeader {
        schema_version: 1,
        config: net.config.clone(),
    };
    let mut arrays: Vec<(String, Vec<f64>)> = net
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("p{i}"), p.data().to_vec()))
        .collect();
    arrays.push(("input_norm.rm".into(), net.input_norm.running_mean.data().to_vec()));
    arrays.push(("input_norm.rv".into(), net.input_norm.running_var.data().to_vec()));
    for (i, (_, bn)) in net.hidden.iter().enumerate() {
        arrays.push((format!("hidden{i}.rm"), bn.running_mean.data().to_vec()));
        arrays.push((format!("hidden{i}.rv"), bn.running_var.data().to_vec()));
    }
    write_checkpoint(path, &header, &arrays)
}

pub fn load_encoder(path: &std::path::Path) -> Result<EncoderNet> {
    let (header, arrays): (EncoderHeader, _) = read_checkpoint(path)?;
    let mut rng = seeds::rng(0, "load-placeholder");
    let mut net = EncoderNet::new(header.config, &mut rng);
    let n_params = net.params().len();
    if arrays.len() != n_params + 2 + 2 * net.hidden.len() {
        return Err(Error::Checkpoint(format!(
            "encoder checkpoint has {} arrays, expected {}",
            arrays.len(),
            n_params + 2 + 2 * net.hidden.len()
        )));
    }
    for (p, (name, data)) in net.params_mut().into_iter().zip(arrays.iter()) {
        if data.len() != p.numel() {
            return Err(Error::Checkpoint(format!("array {name} shape mismatch")));
        }
        p.data_mut().copy_from_slice(data);
    }
    let mut rest = arrays[n_params..].iter();
    let mut fill = |t: &mut Tensor| {
        let (_, data) = rest.next().unwrap();
        t.data_mut().copy_from_slice(data);
    };
    fill(&mut net.input_norm.running_mean);
    fill(&mut net.input_norm.running_var);
    for (_, bn) in net.hidden.iter_mut() {
        fill(&mut bn.running_mean);
        fill(&mut bn.running_var);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::softplus_scalar;

    #[test]
    fn softplus_bias_calibration_hits_one() {
        assert!((softplus_scalar(SOFTPLUS_INV_ONE) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mechanistic_model_has_zero_trainable_parameters() {
        let m = build_model(
            ModelKind::MechanisticOnly,
            Case::Pendulum,
            &ModelConfig::default(),
            1,
        );
        assert_eq!(m.num_params(), 0);
        assert!(m.nets.is_empty());
    }

    #[test]
    fn hybrid_models_have_exactly_four_correction_networks() {
        for case in [Case::Pendulum, Case::Pk] {
            let m = build_model(ModelKind::Hybrid, case, &ModelConfig::default(), 1);
            assert_eq!(m.nets.len(), 4, "{case}");
        }
    }

    #[test]
    fn default_dims_follow_case_and_kind() {
        let m = build_model(
            ModelKind::DataDrivenOnly,
            Case::Pendulum,
            &ModelConfig::default(),
            1,
        );
        assert_eq!(m.dims.hidden_dim, 128);
        assert_eq!(m.dims.num_blocks, 6);
        assert_eq!(m.nets.len(), 2);
        let m = build_model(ModelKind::Hybrid, Case::Pk, &ModelConfig::default(), 1);
        assert_eq!(m.dims.hidden_dim, 64);
        assert!((m.dims.init_gain - 0.2).abs() < 1e-12);
    }

    #[test]
    fn model_checkpoint_round_trips_bit_exact() {
        let dir = std::env::temp_dir().join("greybox-model-ckpt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("hybrid.ckpt");
        let mut m = build_model(ModelKind::Hybrid, Case::Pendulum, &ModelConfig::default(), 9);
        m.norm.beta_mean = vec![3.3, 2.1];
        m.norm.beta_std = vec![0.4, 0.2];
        m.encoder_ref = Some(EncoderRef {
            path: "encoder.ckpt".into(),
            sha256: "ff".repeat(32),
        });
        m.save(&path).unwrap();
        let loaded = HybridModel::load(&path).unwrap();
        assert_eq!(loaded.kind, m.kind);
        assert_eq!(loaded.norm, m.norm);
        assert_eq!(loaded.encoder_ref, m.encoder_ref);
        for (a, b) in m.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
