//! Dataset persistence: a JSON manifest (generation spec, seed, per-record
//! metadata, file checksums) plus either per-record CSV files or a single
//! columnar binary file.

use super::pendulum::{
    BetaRanges, EncoderDataset, LabeledRecord, PendulumDataset, PendulumRecord,
    PendulumSampleSpec, TauDistribution,
};
use super::pk::{DoseDecision, DoseProtocol, PkDataset, PkRecord, SplitGroup};
use crate::checkpoint::{bytes_sha256, read_checkpoint, write_checkpoint};
use crate::error::{Error, Result};
use crate::mechanistic::covariates::PatientCovariates;
use crate::mechanistic::pendulum::PendulumParams;
use crate::mechanistic::pk::PkParams;
use crate::odeint::{
    read_trajectory_csv, write_trajectory_csv, InterventionSchedule, TimeGrid, Trajectory,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Binary,
}

impl std::str::FromStr for FileFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "binary" | "bin" => Ok(FileFormat::Binary),
            other => Err(Error::config(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GridInfo {
    grid: TimeGrid,
    state_dim: usize,
    eta_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct BinHeader {
    kind: String,
    n: usize,
}

pub const MANIFEST_NAME: &str = "manifest.json";
const BIN_NAME: &str = "data.bin";

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<FileEntry> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), bytes)?;
    Ok(FileEntry {
        name: name.to_string(),
        sha256: bytes_sha256(bytes),
    })
}

fn verify_files(dir: &Path, files: &[FileEntry]) -> Result<()> {
    for f in files {
        let bytes = std::fs::read(dir.join(&f.name))
            .map_err(|e| Error::Missing(format!("dataset file {}: {e}", f.name)))?;
        let got = bytes_sha256(&bytes);
        if got != f.sha256 {
            return Err(Error::Config(format!(
                "dataset file {} fails checksum verification",
                f.name
            )));
        }
    }
    Ok(())
}

/// Serialize trajectories+schedules either as per-record CSVs or one binary
/// container; returns the file entries written.
fn write_records(
    dir: &Path,
    kind: &str,
    format: FileFormat,
    trajs: &[(&Trajectory, &InterventionSchedule)],
) -> Result<Vec<FileEntry>> {
    match format {
        FileFormat::Csv => {
            let mut files = Vec::with_capacity(trajs.len());
            for (i, (traj, eta)) in trajs.iter().enumerate() {
                let mut buf = Vec::new();
                write_trajectory_csv(&mut buf, traj, eta)?;
                files.push(write_file(dir, &format!("traj_{i:05}.csv"), &buf)?);
            }
            Ok(files)
        }
        FileFormat::Binary => {
            let mut states = Vec::new();
            let mut etas = Vec::new();
            for (traj, eta) in trajs {
                states.extend_from_slice(traj.states());
                etas.extend_from_slice(eta.values());
            }
            let header = BinHeader {
                kind: kind.to_string(),
                n: trajs.len(),
            };
            let path = dir.join(BIN_NAME);
            std::fs::create_dir_all(dir)?;
            write_checkpoint(
                &path,
                &header,
                &[("states".into(), states), ("etas".into(), etas)],
            )?;
            let bytes = std::fs::read(&path)?;
            Ok(vec![FileEntry {
                name: BIN_NAME.into(),
                sha256: bytes_sha256(&bytes),
            }])
        }
    }
}

fn read_records(
    dir: &Path,
    format: FileFormat,
    n: usize,
    info: &GridInfo,
) -> Result<Vec<(Trajectory, InterventionSchedule)>> {
    let points = info.grid.num_points();
    match format {
        FileFormat::Csv => {
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let name = format!("traj_{i:05}.csv");
                let text = std::fs::read_to_string(dir.join(&name))
                    .map_err(|e| Error::Missing(format!("dataset file {name}: {e}")))?;
                out.push(read_trajectory_csv(&text, &name)?);
            }
            Ok(out)
        }
        FileFormat::Binary => {
            let (_, arrays): (BinHeader, _) = read_checkpoint(&dir.join(BIN_NAME))?;
            let states = &arrays
                .iter()
                .find(|(n, _)| n == "states")
                .ok_or_else(|| Error::Checkpoint("missing states array".into()))?
                .1;
            let etas = &arrays
                .iter()
                .find(|(n, _)| n == "etas")
                .ok_or_else(|| Error::Checkpoint("missing etas array".into()))?
                .1;
            let srec = points * info.state_dim;
            let erec = points * info.eta_dim;
            if states.len() != n * srec || etas.len() != n * erec {
                return Err(Error::Checkpoint("dataset array shape mismatch".into()));
            }
            Ok((0..n)
                .map(|i| {
                    (
                        Trajectory::new(
                            info.grid,
                            info.state_dim,
                            states[i * srec..(i + 1) * srec].to_vec(),
                        ),
                        InterventionSchedule::new(
                            info.eta_dim,
                            etas[i * erec..(i + 1) * erec].to_vec(),
                        ),
                    )
                })
                .collect())
        }
    }
}

fn write_manifest<M: Serialize>(dir: &Path, manifest: &M) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_NAME), json.as_bytes())?;
    Ok(())
}

fn read_manifest<M: for<'de> Deserialize<'de>>(dir: &Path) -> Result<M> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME)).map_err(|e| {
        Error::Missing(format!("dataset manifest in {}: {e}", dir.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
}

// ── pendulum ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PendulumRecMeta {
    true_params: PendulumParams,
    k: u8,
    tau: f64,
}

#[derive(Serialize, Deserialize)]
struct PendulumManifest {
    schema_version: u32,
    kind: String,
    format: FileFormat,
    seed: u64,
    n: usize,
    spec: PendulumSampleSpec,
    intervention: TauDistribution,
    grid_info: GridInfo,
    records: Vec<PendulumRecMeta>,
    files: Vec<FileEntry>,
}

pub fn save_pendulum_dataset(ds: &PendulumDataset, dir: &Path, format: FileFormat) -> Result<()> {
    let trajs: Vec<(&Trajectory, &InterventionSchedule)> = ds
        .records
        .iter()
        .map(|r| (&r.trajectory, &r.schedule))
        .collect();
    let files = write_records(dir, "pendulum", format, &trajs)?;
    let manifest = PendulumManifest {
        schema_version: 1,
        kind: "pendulum".into(),
        format,
        seed: ds.seed,
        n: ds.records.len(),
        spec: ds.spec,
        intervention: ds.intervention,
        grid_info: GridInfo {
            grid: ds.spec.grid(),
            state_dim: 2,
            eta_dim: 1,
        },
        records: ds
            .records
            .iter()
            .map(|r| PendulumRecMeta {
                true_params: r.true_params,
                k: r.k,
                tau: r.tau,
            })
            .collect(),
        files,
    };
    write_manifest(dir, &manifest)
}

pub fn load_pendulum_dataset(dir: &Path) -> Result<PendulumDataset> {
    let m: PendulumManifest = read_manifest(dir)?;
    verify_files(dir, &m.files)?;
    let data = read_records(dir, m.format, m.n, &m.grid_info)?;
    let records = data
        .into_iter()
        .zip(m.records)
        .map(|((trajectory, schedule), meta)| PendulumRecord {
            trajectory,
            schedule,
            true_params: meta.true_params,
            k: meta.k,
            tau: meta.tau,
        })
        .collect();
    Ok(PendulumDataset {
        spec: m.spec,
        intervention: m.intervention,
        seed: m.seed,
        records,
    })
}

// ── encoder pretraining ─────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct EncoderRecMeta {
    label: [f64; 2],
    tau: f64,
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    schema_version: u32,
    kind: String,
    format: FileFormat,
    seed: u64,
    n: usize,
    n_train: usize,
    ranges: BetaRanges,
    intervention: TauDistribution,
    grid_info: GridInfo,
    records: Vec<EncoderRecMeta>,
    files: Vec<FileEntry>,
}

pub fn save_encoder_dataset(ds: &EncoderDataset, dir: &Path, format: FileFormat) -> Result<()> {
    let all: Vec<&LabeledRecord> = ds.train.iter().chain(ds.val.iter()).collect();
    let trajs: Vec<(&Trajectory, &InterventionSchedule)> = all
        .iter()
        .map(|r| (&r.trajectory, &r.schedule))
        .collect();
    let grid = all
        .first()
        .map(|r| r.trajectory.grid)
        .ok_or_else(|| Error::config("empty encoder dataset"))?;
    let files = write_records(dir, "pendulum-encoder", format, &trajs)?;
    let manifest = EncoderManifest {
        schema_version: 1,
        kind: "pendulum-encoder".into(),
        format,
        seed: ds.seed,
        n: all.len(),
        n_train: ds.train.len(),
        ranges: ds.ranges,
        intervention: ds.intervention,
        grid_info: GridInfo {
            grid,
            state_dim: 2,
            eta_dim: 1,
        },
        records: all
            .iter()
            .map(|r| EncoderRecMeta {
                label: r.label,
                tau: r.tau,
            })
            .collect(),
        files,
    };
    write_manifest(dir, &manifest)
}

pub fn load_encoder_dataset(dir: &Path) -> Result<EncoderDataset> {
    let m: EncoderManifest = read_manifest(dir)?;
    verify_files(dir, &m.files)?;
    let data = read_records(dir, m.format, m.n, &m.grid_info)?;
    let mut records: Vec<LabeledRecord> = data
        .into_iter()
        .zip(m.records)
        .map(|((trajectory, schedule), meta)| LabeledRecord {
            trajectory,
            schedule,
            label: meta.label,
            tau: meta.tau,
        })
        .collect();
    let val = records.split_off(m.n_train);
    Ok(EncoderDataset {
        ranges: m.ranges,
        intervention: m.intervention,
        seed: m.seed,
        train: records,
        val,
    })
}

// ── pk ──────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PkRecMeta {
    id: usize,
    cov: PatientCovariates,
    split: SplitGroup,
    oracle_params: PkParams,
    prior_params: PkParams,
    decision: DoseDecision,
}

#[derive(Serialize, Deserialize)]
struct PkManifest {
    schema_version: u32,
    kind: String,
    format: FileFormat,
    seed: u64,
    n: usize,
    protocol: DoseProtocol,
    grid_info: GridInfo,
    group_counts: Vec<(SplitGroup, usize)>,
    prior_table_checksum: String,
    oracle_table_checksum: String,
    exclusions: Vec<(PatientCovariates, String)>,
    records: Vec<PkRecMeta>,
    files: Vec<FileEntry>,
}

pub fn save_pk_dataset(ds: &PkDataset, dir: &Path, format: FileFormat) -> Result<()> {
    let trajs: Vec<(&Trajectory, &InterventionSchedule)> = ds
        .records
        .iter()
        .map(|r| (&r.trajectory, &r.schedule))
        .collect();
    let files = write_records(dir, "pk", format, &trajs)?;
    let group_counts = [
        SplitGroup::Train,
        SplitGroup::InDistTest,
        SplitGroup::Ood,
        SplitGroup::ExtremeOod,
    ]
    .iter()
    .map(|&g| (g, ds.group_count(g)))
    .collect();
    let manifest = PkManifest {
        schema_version: 1,
        kind: "pk".into(),
        format,
        seed: ds.seed,
        n: ds.records.len(),
        protocol: ds.protocol,
        grid_info: GridInfo {
            grid: ds.protocol.grid(),
            state_dim: 4,
            eta_dim: 1,
        },
        group_counts,
        prior_table_checksum: ds.prior_table_checksum.clone(),
        oracle_table_checksum: ds.oracle_table_checksum.clone(),
        exclusions: ds.exclusions.clone(),
        records: ds
            .records
            .iter()
            .map(|r| PkRecMeta {
                id: r.id,
                cov: r.cov,
                split: r.split,
                oracle_params: r.oracle_params,
                prior_params: r.prior_params,
                decision: r.decision.clone(),
            })
            .collect(),
        files,
    };
    write_manifest(dir, &manifest)
}

pub fn load_pk_dataset(dir: &Path) -> Result<PkDataset> {
    let m: PkManifest = read_manifest(dir)?;
    verify_files(dir, &m.files)?;
    let data = read_records(dir, m.format, m.n, &m.grid_info)?;
    let records = data
        .into_iter()
        .zip(m.records)
        .map(|((trajectory, schedule), meta)| PkRecord {
            id: meta.id,
            cov: meta.cov,
            split: meta.split,
            oracle_params: meta.oracle_params,
            prior_params: meta.prior_params,
            decision: meta.decision,
            schedule,
            trajectory,
        })
        .collect();
    Ok(PkDataset {
        protocol: m.protocol,
        seed: m.seed,
        records,
        exclusions: m.exclusions,
        prior_table_checksum: m.prior_table_checksum,
        oracle_table_checksum: m.oracle_table_checksum,
    })
}
