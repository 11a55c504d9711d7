//! File formats and persistence: posture CSV ingestion, JSON bundles for
//! calibration artifacts and parameters, per-trial metric tables,
//! trajectory dumps, study CSVs, and the run manifest written next to
//! every command output.
//!
//! CSV dialect: comma separators, '.' decimals, '\n' line endings, UTF-8,
//! mandatory header row. Floats are written in Rust's shortest
//! round-trip form so that save/load is identity.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{FlexibilityCell, SatisficingCell, SweepRow};
use crate::linalg::Mat;
use crate::metrics::TrialMetrics;
use crate::model::ModelParams;
use crate::synergy::{MappingMatrix, PcaResult, PostureSeries, SynergyBasis, SynergyError};
use crate::task::{ExperimentRecord, TaskConfig, TrialMetricsRow, TrialRecord};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}:{line}:{col}: {msg}")]
    Parse { path: String, line: usize, col: usize, msg: String },
    #[error("invalid data in {path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Synergy(#[from] SynergyError),
}

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    Ok(sha256_hex(&fs::read(path)?))
}

// ---------------------------------------------------------------------------
// Posture CSV
// ---------------------------------------------------------------------------

/// Read a posture recording: header row, then one row per sample with the
/// time in seconds followed by the m joint angles.
pub fn read_postures_csv(path: &Path) -> Result<PostureSeries, IoError> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| IoError::Parse {
        path: display.clone(),
        line: 1,
        col: 1,
        msg: "empty file, header row required".into(),
    })?;
    let columns = header.split(',').count();
    if columns < 2 {
        return Err(IoError::Parse {
            path: display,
            line: 1,
            col: 1,
            msg: "header must name a time column and at least one joint column".into(),
        });
    }

    let mut times = Vec::new();
    let mut samples = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns {
            return Err(IoError::Parse {
                path: display,
                line: line_no,
                col: 1,
                msg: format!("expected {columns} fields, found {}", fields.len()),
            });
        }
        let mut parsed = Vec::with_capacity(columns);
        for (col_idx, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| IoError::Parse {
                path: display.clone(),
                line: line_no,
                col: col_idx + 1,
                msg: format!("non-numeric cell {field:?}"),
            })?;
            parsed.push(v);
        }
        times.push(parsed[0]);
        samples.push(parsed[1..].to_vec());
    }

    PostureSeries::new(times, samples).map_err(|e| IoError::Invalid {
        path: display,
        msg: e.to_string(),
    })
}

pub fn write_postures_csv(path: &Path, postures: &PostureSeries) -> Result<(), IoError> {
    let m = postures.joint_count();
    let mut out = String::from("time");
    for j in 1..=m {
        out.push_str(&format!(",q{j}"));
    }
    out.push('\n');
    for i in 0..postures.len() {
        out.push_str(&postures.times()[i].to_string());
        for v in postures.sample(i) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Calibration bundle (JSON with explicit dimensions, row-major arrays)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PcaJson {
    m: usize,
    mean: Vec<f64>,
    /// Row-major, one component per row.
    components: Vec<f64>,
    eigenvalues: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SynergyJson {
    h: usize,
    m: usize,
    /// Row-major h x m.
    phi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MappingJson {
    n: usize,
    m: usize,
    /// Row-major n x m.
    c: Vec<f64>,
}

pub fn save_pca(path: &Path, pca: &PcaResult) -> Result<(), IoError> {
    let dto = PcaJson {
        m: pca.joint_count(),
        mean: pca.mean.clone(),
        components: pca.components.data().to_vec(),
        eigenvalues: pca.eigenvalues.clone(),
    };
    write_atomic(path, serde_json::to_vec_pretty(&dto)?.as_slice())
}

pub fn load_pca(path: &Path) -> Result<PcaResult, IoError> {
    let dto: PcaJson = serde_json::from_slice(&fs::read(path)?)?;
    let rows = dto.components.len() / dto.m;
    Ok(PcaResult {
        mean: dto.mean,
        components: Mat::from_row_major(rows, dto.m, &dto.components),
        eigenvalues: dto.eigenvalues,
    })
}

pub fn save_synergies(path: &Path, phi: &SynergyBasis) -> Result<(), IoError> {
    let dto = SynergyJson {
        h: phi.count(),
        m: phi.joint_count(),
        phi: phi.matrix().data().to_vec(),
    };
    write_atomic(path, serde_json::to_vec_pretty(&dto)?.as_slice())
}

pub fn load_synergies(path: &Path) -> Result<SynergyBasis, IoError> {
    let dto: SynergyJson = serde_json::from_slice(&fs::read(path)?)?;
    Ok(SynergyBasis::new(Mat::from_row_major(dto.h, dto.m, &dto.phi))?)
}

pub fn save_mapping(path: &Path, c: &MappingMatrix) -> Result<(), IoError> {
    let dto = MappingJson {
        n: c.cursor_dim(),
        m: c.joint_count(),
        c: c.matrix().data().to_vec(),
    };
    write_atomic(path, serde_json::to_vec_pretty(&dto)?.as_slice())
}

pub fn load_mapping(path: &Path) -> Result<MappingMatrix, IoError> {
    let dto: MappingJson = serde_json::from_slice(&fs::read(path)?)?;
    Ok(MappingMatrix::new(Mat::from_row_major(dto.n, dto.m, &dto.c))?)
}

/// File names inside a calibration bundle directory.
pub const PCA_FILE: &str = "pca.json";
pub const MAPPING_FILE: &str = "mapping.json";
pub const SYNERGY_FILE: &str = "synergies.json";

pub fn save_calibration(
    dir: &Path,
    pca: &PcaResult,
    mapping: &MappingMatrix,
    synergies: &SynergyBasis,
) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir)?;
    let paths = [dir.join(PCA_FILE), dir.join(MAPPING_FILE), dir.join(SYNERGY_FILE)];
    save_pca(&paths[0], pca)?;
    save_mapping(&paths[1], mapping)?;
    save_synergies(&paths[2], synergies)?;
    Ok(paths.to_vec())
}

pub fn load_calibration(dir: &Path) -> Result<(PcaResult, MappingMatrix, SynergyBasis), IoError> {
    Ok((
        load_pca(&dir.join(PCA_FILE))?,
        load_mapping(&dir.join(MAPPING_FILE))?,
        load_synergies(&dir.join(SYNERGY_FILE))?,
    ))
}

// ---------------------------------------------------------------------------
// Parameters and task config (flat JSON)
// ---------------------------------------------------------------------------

pub fn save_params(path: &Path, params: &ModelParams) -> Result<(), IoError> {
    write_atomic(path, serde_json::to_vec_pretty(params)?.as_slice())
}

pub fn load_params(path: &Path) -> Result<ModelParams, IoError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn save_task_config(path: &Path, config: &TaskConfig) -> Result<(), IoError> {
    write_atomic(path, serde_json::to_vec_pretty(config)?.as_slice())
}

pub fn load_task_config(path: &Path) -> Result<TaskConfig, IoError> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

pub const METRICS_HEADER: &str =
    "session,trial,re,sot,fme,speed,accuracy,driving,exploratory,captured";

pub fn metrics_csv_string(rows: &[TrialMetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        let m = &row.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            row.session,
            row.trial,
            m.re,
            m.sot,
            m.fme,
            m.speed,
            m.accuracy,
            m.driving,
            m.exploratory,
            m.captured
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[TrialMetricsRow]) -> Result<(), IoError> {
    write_atomic(path, metrics_csv_string(rows).as_bytes())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<TrialMetricsRow>, IoError> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| IoError::Parse {
        path: display.clone(),
        line: 1,
        col: 1,
        msg: "empty metrics file".into(),
    })?;
    if header != METRICS_HEADER {
        return Err(IoError::Parse {
            path: display,
            line: 1,
            col: 1,
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(IoError::Parse {
                path: display,
                line: line_no,
                col: 1,
                msg: format!("expected 10 fields, found {}", fields.len()),
            });
        }
        let parse_usize = |i: usize| -> Result<usize, IoError> {
            fields[i].trim().parse().map_err(|_| IoError::Parse {
                path: display.clone(),
                line: line_no,
                col: i + 1,
                msg: format!("non-integer cell {:?}", fields[i]),
            })
        };
        let parse_f64 = |i: usize| -> Result<f64, IoError> {
            fields[i].trim().parse().map_err(|_| IoError::Parse {
                path: display.clone(),
                line: line_no,
                col: i + 1,
                msg: format!("non-numeric cell {:?}", fields[i]),
            })
        };
        let captured = match fields[9].trim() {
            "true" => true,
            "false" => false,
            other => {
                return Err(IoError::Parse {
                    path: display,
                    line: line_no,
                    col: 10,
                    msg: format!("expected true/false, found {other:?}"),
                })
            }
        };
        rows.push(TrialMetricsRow {
            session: parse_usize(0)?,
            trial: parse_usize(1)?,
            metrics: TrialMetrics {
                re: parse_f64(2)?,
                sot: parse_f64(3)?,
                fme: parse_f64(4)?,
                speed: parse_f64(5)?,
                accuracy: parse_f64(6)?,
                driving: parse_f64(7)?,
                exploratory: parse_f64(8)?,
                captured,
            },
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Trajectory CSV
// ---------------------------------------------------------------------------

/// Dump one trial's trajectory at the given sample stride:
/// time, x1, x2, e1, e2, u1..um, fme.
pub fn trajectory_csv_string(trial: &TrialRecord, stride: usize) -> String {
    let stride = stride.max(1);
    let m = trial.samples.first().map(|s| s.u.len()).unwrap_or(0);
    let mut out = String::from("time,x1,x2,e1,e2");
    for j in 1..=m {
        out.push_str(&format!(",u{j}"));
    }
    out.push_str(",fme\n");
    for sample in trial.samples.iter().step_by(stride) {
        out.push_str(&format!(
            "{},{},{},{},{}",
            sample.t, sample.x[0], sample.x[1], sample.e_x[0], sample.e_x[1]
        ));
        for v in &sample.u {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        out.push_str(&sample.fme.to_string());
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Experiment record directory
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ExperimentMeta {
    env_fingerprint: crate::task::EnvFingerprint,
    params: ModelParams,
}

/// Persist an experiment: config.json, params.json, metrics.csv, an
/// environment fingerprint, and optional per-trial trajectory CSVs.
/// Returns the written paths.
pub fn save_experiment(
    dir: &Path,
    record: &ExperimentRecord,
    trajectories: bool,
    stride: usize,
) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let config_path = dir.join("config.json");
    save_task_config(&config_path, &record.config)?;
    written.push(config_path);

    let params_path = dir.join("params.json");
    save_params(&params_path, &record.params)?;
    written.push(params_path);

    let meta_path = dir.join("env.json");
    let meta = ExperimentMeta {
        env_fingerprint: record.env_fingerprint.clone(),
        params: record.params.clone(),
    };
    write_atomic(&meta_path, serde_json::to_vec_pretty(&meta)?.as_slice())?;
    written.push(meta_path);

    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &record.metrics)?;
    written.push(metrics_path);

    if trajectories {
        let traj_dir = dir.join("trajectories");
        fs::create_dir_all(&traj_dir)?;
        for (s, session) in record.sessions.iter().enumerate() {
            for (t, trial) in session.iter().enumerate() {
                if trial.samples.is_empty() {
                    continue;
                }
                let path = traj_dir.join(format!("trial_{s:03}_{t:03}.csv"));
                write_atomic(&path, trajectory_csv_string(trial, stride).as_bytes())?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Study CSVs
// ---------------------------------------------------------------------------

pub fn sweep_csv_string(rows: &[SweepRow]) -> String {
    let mut out = String::from("param,value,trial,metric,mean,ci_lo,ci_hi,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.param, r.value, r.trial, r.metric, r.mean, r.ci_lo, r.ci_hi, r.n
        ));
    }
    out
}

pub fn satisficing_csv_string(cells: &[SatisficingCell]) -> String {
    let mut out = String::from("fme_threshold,trial_time,rho_x,p,ci_lo,ci_hi,successes,n\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.fme_threshold,
            c.trial_time,
            c.rho_x,
            c.estimate.p,
            c.estimate.lo,
            c.estimate.hi,
            c.estimate.successes,
            c.estimate.n
        ));
    }
    out
}

pub fn flexibility_csv_string(cells: &[FlexibilityCell]) -> String {
    let mut out = String::from("h,sigma_u,mean_fme,ci_lo,ci_hi,residual_bound,n\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            c.h, c.sigma_u, c.mean_fme, c.ci_lo, c.ci_hi, c.residual_bound, c.n
        ));
    }
    out
}

/// Melt any of our CSV outputs into long format: row,column,value.
pub fn melt_csv(text: &str) -> Result<String, IoError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| IoError::Invalid {
        path: "<melt input>".into(),
        msg: "empty csv".into(),
    })?;
    let columns: Vec<&str> = header.split(',').collect();
    let mut out = String::from("row,column,value\n");
    for (row_idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        for (name, value) in columns.iter().zip(line.split(',')) {
            out.push_str(&format!("{row_idx},{name},{value}\n"));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance written next to every command output. Input and output
/// digests let a rerun verify byte identity of the primary artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub tool_version: String,
    pub master_seed: u64,
    pub config_snapshot: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub duration_seconds: f64,
}

impl RunManifest {
    pub fn digest_files(paths: &[PathBuf]) -> Result<Vec<FileDigest>, IoError> {
        let mut out = Vec::with_capacity(paths.len());
        for p in paths {
            out.push(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, serde_json::to_vec_pretty(self)?.as_slice())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Re-hash the recorded inputs and outputs against the filesystem.
    pub fn verify(&self) -> Result<bool, IoError> {
        for digest in self.inputs.iter().chain(&self.outputs) {
            if sha256_file(Path::new(&digest.path))? != digest.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
