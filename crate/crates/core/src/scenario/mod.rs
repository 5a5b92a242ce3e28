//! Scenario ingestion, run artifacts and timing statistics.

mod config;
mod logs;
mod plot;
mod stats;

pub use config::{
    apply_overrides, benchmark_position_swap, export_config, load_config, ArrivalTolerance, ConfigError, LinkConfig,
    ScenarioConfig, TopologyConfig, CONFIG_KEYS,
};
pub use logs::{
    audit_trajectory, MissionLogger, SafetyAudit, TimingLog, TimingRecord, TrajectoryLog, TrajectoryRecord,
    TIMING_HEADER, TRAJECTORY_HEADER,
};
pub use plot::render_svg;
pub use stats::{quantile, timing_summary, StatsError, TimingSummary, IQR_FACTOR};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::comms::{bandwidth_report, write_message_log, BandwidthReport};
use crate::runtime::MissionReport;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn create(path: &Path) -> Result<BufWriter<File>, ExportError> {
    File::create(path).map(BufWriter::new).map_err(|source| ExportError::Io { path: path.into(), source })
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io { path: path.into(), source }
}

/// Run description written next to the logs.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub code_version: String,
    pub seed: u64,
    pub exit_status: i32,
    pub status: String,
    pub failure: Option<String>,
    pub steps_run: u64,
    pub all_arrived: bool,
    pub overrides: Vec<String>,
    pub bandwidth: BandwidthReport,
    pub config: ScenarioConfig,
    /// The same configuration in loadable text form.
    pub config_text: String,
    pub files: Vec<String>,
}

/// Writes `trajectory.csv`, `timing.csv`, `messages.jsonl` and `manifest.json`
/// into `dir`, creating it if needed. Returns the paths written.
pub fn write_run_artifacts(
    dir: &Path,
    cfg: &ScenarioConfig,
    report: &MissionReport,
    overrides: &[String],
) -> Result<Vec<PathBuf>, ExportError> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let traj_path = dir.join("trajectory.csv");
    let timing_path = dir.join("timing.csv");
    let msg_path = dir.join("messages.jsonl");
    let manifest_path = dir.join("manifest.json");

    report
        .trajectory
        .write_csv(create(&traj_path)?)
        .map_err(|source| ExportError::Csv { path: traj_path.clone(), source })?;
    report
        .timing
        .write_csv(create(&timing_path)?)
        .map_err(|source| ExportError::Csv { path: timing_path.clone(), source })?;
    let mut w = create(&msg_path)?;
    write_message_log(&report.messages, &mut w).map_err(io_at(&msg_path))?;
    w.flush().map_err(io_at(&msg_path))?;

    let files = vec![traj_path, timing_path, msg_path, manifest_path.clone()];
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.links.seed,
        exit_status: report.status.code(),
        status: report.status.name().to_string(),
        failure: report.failure.clone(),
        steps_run: report.steps_run,
        all_arrived: report.all_arrived,
        overrides: overrides.to_vec(),
        bandwidth: bandwidth_report(&report.messages),
        config: cfg.clone(),
        config_text: export_config(cfg),
        files: files.iter().map(|p| p.display().to_string()).collect(),
    };
    let mut w = create(&manifest_path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)
        .map_err(|source| ExportError::Json { path: manifest_path.clone(), source })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_at(&manifest_path))?;
    Ok(files)
}

/// Writes one `agent_<i>.csv` polyline (`x,y`) per agent and `trajectories.svg`.
pub fn write_plot_data(dir: &Path, log: &TrajectoryLog, cbf: &crate::safety::CbfParams) -> Result<Vec<PathBuf>, ExportError> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut out = Vec::new();
    for agent in 1..=log.agents() {
        let path = dir.join(format!("agent_{agent}.csv"));
        let mut w = csv::Writer::from_writer(create(&path)?);
        let csv_err = |source| ExportError::Csv { path: path.clone(), source };
        w.write_record(["x", "y"]).map_err(csv_err)?;
        for p in log.polyline(agent) {
            w.serialize((p.x, p.y)).map_err(|source| ExportError::Csv { path: path.clone(), source })?;
        }
        w.flush().map_err(io_at(&path))?;
        out.push(path);
    }
    let svg_path = dir.join("trajectories.svg");
    std::fs::write(&svg_path, render_svg(log, cbf)).map_err(io_at(&svg_path))?;
    out.push(svg_path);
    Ok(out)
}
