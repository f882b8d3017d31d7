//! Seeded replication runs: regenerate data, retrain all models, and
//! re-evaluate per seed, then aggregate means and SEMs across replications.

use super::dose::evaluate_dose_selection;
use super::pendulum::{eval_counterfactual_outcomes, eval_reconstruction};
use super::{aggregate, CellRow};
use crate::datagen::pendulum::{
    gen_encoder_pretraining_data, gen_pendulum_counterfactuals, gen_pendulum_dataset, BetaRanges,
    PendulumSampleSpec, TauDistribution,
};
use crate::datagen::pk::{gen_pk_cohort_synthetic, gen_pk_dataset, DoseProtocol, SplitGroup};
use crate::error::Result;
use crate::hybrid::{build_model, Case, HybridModel, ModelConfig, ModelKind};
use crate::mechanistic::covariates::PkParamTable;
use crate::seeds;
use crate::training::{
    pretrain_encoder, train_corrections_pendulum, train_corrections_pk, LossSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendulumSuiteConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_encoder_sims: usize,
    pub n_counterfactual: usize,
    pub spec: PendulumSampleSpec,
    pub beta_ranges: BetaRanges,
    pub encoder_cfg: TrainConfig,
    pub hybrid_cfg: TrainConfig,
    pub data_driven_cfg: TrainConfig,
    pub model_config: ModelConfig,
    pub include_reconstruction: bool,
    pub include_counterfactual: bool,
}

impl Default for PendulumSuiteConfig {
    fn default() -> Self {
        PendulumSuiteConfig {
            n_train: 5000,
            n_test: 5000,
            n_encoder_sims: 5000,
            n_counterfactual: 5000,
            spec: PendulumSampleSpec::default(),
            beta_ranges: BetaRanges::default(),
            encoder_cfg: TrainConfig::encoder_default(),
            hybrid_cfg: TrainConfig::pendulum_hybrid_default(),
            data_driven_cfg: TrainConfig::pendulum_data_driven_default(),
            model_config: ModelConfig::default(),
            include_reconstruction: true,
            include_counterfactual: true,
        }
    }
}

impl PendulumSuiteConfig {
    /// Desk-scale settings used by the acceptance experiments: 500 training
    /// trajectories, 500 test samples per split, shortened training duty.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.n_train = 500;
        cfg.n_test = 500;
        cfg.n_encoder_sims = 2000;
        cfg.n_counterfactual = 500;
        cfg.hybrid_cfg.max_epochs = 15;
        cfg.data_driven_cfg.max_epochs = 15;
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PkSuiteConfig {
    pub cohort_n: usize,
    pub holdout_frac: f64,
    pub protocol: DoseProtocol,
    pub hybrid_cfg: TrainConfig,
    pub data_driven_cfg: TrainConfig,
    pub loss: LossSpec,
    pub model_config: ModelConfig,
    /// Cap on evaluated patients per test group (record order); None
    /// evaluates all.
    pub eval_per_group_cap: Option<usize>,
}

impl Default for PkSuiteConfig {
    fn default() -> Self {
        PkSuiteConfig {
            cohort_n: 12155,
            holdout_frac: 0.25,
            protocol: DoseProtocol::default(),
            hybrid_cfg: TrainConfig::pk_default(),
            data_driven_cfg: TrainConfig::pk_default(),
            loss: LossSpec::pk_relative(),
            model_config: ModelConfig::default(),
            eval_per_group_cap: None,
        }
    }
}

impl PkSuiteConfig {
    /// Desk-scale settings used by the acceptance experiments: a 2,000
    /// patient cohort, shortened training duty, capped per-group evaluation.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.cohort_n = 2000;
        cfg.hybrid_cfg.max_epochs = 12;
        cfg.data_driven_cfg.max_epochs = 12;
        cfg.eval_per_group_cap = Some(150);
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Experiment {
    Pendulum(PendulumSuiteConfig),
    Pk(PkSuiteConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationOutput {
    pub cells: Vec<CellRow>,
    pub aggregates: Vec<super::AggregateRow>,
    /// (replication index, error message) for runs that failed.
    pub failures: Vec<(usize, String)>,
}

/// One full pendulum replication: pretrain the encoder, train hybrid and
/// data-driven models, evaluate reconstruction and counterfactuals.
pub fn run_pendulum_replication(
    cfg: &PendulumSuiteConfig,
    seed: u64,
    replication: usize,
) -> Result<Vec<CellRow>> {
    let enc_data = gen_encoder_pretraining_data(
        cfg.n_encoder_sims,
        &cfg.beta_ranges,
        &cfg.spec,
        TauDistribution::Train,
        seeds::derive(seed, "encoder-data"),
    )?;
    let mut enc_cfg = cfg.encoder_cfg.clone();
    enc_cfg.seed = seeds::derive(seed, "encoder-train");
    let (encoder, _) = pretrain_encoder(&enc_data, &enc_cfg, None)?;

    let train_spec = PendulumSampleSpec {
        n: cfg.n_train,
        ..cfg.spec
    };
    let data = gen_pendulum_dataset(
        &train_spec,
        TauDistribution::Train,
        seeds::derive(seed, "train-data"),
    )?;

    let mut hybrid = build_model(
        ModelKind::Hybrid,
        Case::Pendulum,
        &cfg.model_config,
        seeds::derive(seed, "hybrid-init"),
    );
    let mut hybrid_cfg = cfg.hybrid_cfg.clone();
    hybrid_cfg.seed = seeds::derive(seed, "hybrid-train");
    train_corrections_pendulum(&mut hybrid, &data, Some(&encoder), &hybrid_cfg, None)?;

    let mut dd = build_model(
        ModelKind::DataDrivenOnly,
        Case::Pendulum,
        &cfg.model_config,
        seeds::derive(seed, "dd-init"),
    );
    let mut dd_cfg = cfg.data_driven_cfg.clone();
    dd_cfg.seed = seeds::derive(seed, "dd-train");
    train_corrections_pendulum(&mut dd, &data, None, &dd_cfg, None)?;

    let mech = build_model(
        ModelKind::MechanisticOnly,
        Case::Pendulum,
        &cfg.model_config,
        0,
    );
    let models: Vec<(&str, &HybridModel)> = vec![
        ("mechanistic", &mech),
        ("data-driven", &dd),
        ("hybrid", &hybrid),
    ];

    let mut cells = Vec::new();
    if cfg.include_reconstruction {
        let test_spec = PendulumSampleSpec {
            n: cfg.n_test,
            ..cfg.spec
        };
        let test_in = gen_pendulum_dataset(
            &test_spec,
            TauDistribution::Train,
            seeds::derive(seed, "test-in"),
        )?;
        let test_ood = gen_pendulum_dataset(
            &test_spec,
            TauDistribution::Ood,
            seeds::derive(seed, "test-ood"),
        )?;
        let recon = eval_reconstruction(
            &models,
            Some(&encoder),
            &[("in-dist", &test_in), ("ood", &test_ood)],
        )?;
        for c in recon.cells {
            cells.push(CellRow {
                model: c.model,
                split: c.split,
                metric: "mse".into(),
                value: c.mean_mse,
                sem: c.sem,
                n: c.n,
                replication,
            });
        }
    }

    if cfg.include_counterfactual {
        let cf = gen_pendulum_counterfactuals(
            cfg.n_counterfactual,
            &cfg.spec,
            seeds::derive(seed, "counterfactual"),
        )?;
        let report = eval_counterfactual_outcomes(&models, Some(&encoder), &cf)?;
        for c in report.cells {
            cells.push(CellRow {
                model: c.model,
                split: format!("tau-{:.0}", c.tau),
                metric: "mse".into(),
                value: c.mean_mse,
                sem: c.sem,
                n: c.n,
                replication,
            });
        }
    }
    Ok(cells)
}

/// One full PK replication: generate the labeled cohort, train hybrid and
/// data-driven models, compare dose selection per test group.
pub fn run_pk_replication(
    cfg: &PkSuiteConfig,
    seed: u64,
    replication: usize,
) -> Result<Vec<CellRow>> {
    let prior = PkParamTable::prior();
    let oracle = PkParamTable::oracle();
    let covs = gen_pk_cohort_synthetic(cfg.cohort_n, seeds::derive(seed, "cohort"));
    let data = gen_pk_dataset(
        &covs,
        &cfg.protocol,
        &prior,
        &oracle,
        cfg.holdout_frac,
        seeds::derive(seed, "pk-data"),
    )?;

    let mut hybrid = build_model(
        ModelKind::Hybrid,
        Case::Pk,
        &cfg.model_config,
        seeds::derive(seed, "hybrid-init"),
    );
    let mut hybrid_cfg = cfg.hybrid_cfg.clone();
    hybrid_cfg.seed = seeds::derive(seed, "hybrid-train");
    train_corrections_pk(&mut hybrid, &data, &hybrid_cfg, &cfg.loss, None)?;

    let mut dd = build_model(
        ModelKind::DataDrivenOnly,
        Case::Pk,
        &cfg.model_config,
        seeds::derive(seed, "dd-init"),
    );
    let mut dd_cfg = cfg.data_driven_cfg.clone();
    dd_cfg.seed = seeds::derive(seed, "dd-train");
    train_corrections_pk(&mut dd, &data, &dd_cfg, &cfg.loss, None)?;

    let mech = build_model(ModelKind::MechanisticOnly, Case::Pk, &cfg.model_config, 0);
    let models: Vec<(&str, &HybridModel)> = vec![
        ("mechanistic", &mech),
        ("data-driven", &dd),
        ("hybrid", &hybrid),
    ];
    let report = evaluate_dose_selection(&models, &data, cfg.eval_per_group_cap)?;

    let mut cells = Vec::new();
    for (name, _) in &models {
        for group in [SplitGroup::InDistTest, SplitGroup::Ood, SplitGroup::ExtremeOod] {
            if let Some((mape, mdape, n, flags)) = report.metrics(name, group) {
                for (metric, value) in [
                    ("mape", mape),
                    ("mdape", mdape),
                    ("safety-flags", flags as f64),
                ] {
                    cells.push(CellRow {
                        model: name.to_string(),
                        split: group.to_string(),
                        metric: metric.into(),
                        value,
                        sem: None,
                        n,
                        replication,
                    });
                }
            }
        }
    }
    Ok(cells)
}

/// Retrain and re-evaluate once per seed; failed replications are recorded
/// and excluded from the aggregates.
pub fn run_replications(experiment: &Experiment, rep_seeds: &[u64]) -> ReplicationOutput {
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (rep, &seed) in rep_seeds.iter().enumerate() {
        let result = match experiment {
            Experiment::Pendulum(cfg) => run_pendulum_replication(cfg, seed, rep),
            Experiment::Pk(cfg) => run_pk_replication(cfg, seed, rep),
        };
        match result {
            Ok(mut c) => cells.append(&mut c),
            Err(e) => failures.push((rep, e.to_string())),
        }
    }
    let aggregates = aggregate(&cells);
    ReplicationOutput {
        cells,
        aggregates,
        failures,
    }
}
