use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use memr::trainer::{MetricsRow, MetricsWriter, Trainer, TrainerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunSettings;
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub metrics_csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
}

/// Record of one training run. The config snapshot is written before the
/// first step and never changes; only paths and the end time are filled in
/// afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub config: TrainerConfig,
    pub checkpoint_every: u64,
    pub artifacts: ArtifactPaths,
}

/// Short hex id derived from the config and the start time.
pub fn run_id(cfg: &TrainerConfig, started_at: &str) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_toml().as_bytes());
    h.update(started_at.as_bytes());
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join("manifest.json"), json + "\n").map_err(CliError::runtime)
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(CliError::runtime)?;
        serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("manifest: {e}")))
    }
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub rows: Vec<MetricsRow>,
    pub error: Option<String>,
}

/// Trains one configuration inside `dir`, writing the manifest first, then
/// metrics rows as they appear and checkpoints on schedule. A training
/// failure is reported in the outcome rather than as an `Err`, so the
/// manifest still records it.
pub fn execute(
    cfg: &TrainerConfig,
    settings: &RunSettings,
    dir: &Path,
    started_at: String,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<RunOutcome, CliError> {
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(CliError::runtime)?;
    let mut manifest = RunManifest {
        run_id: run_id(cfg, &started_at),
        started_at,
        finished_at: None,
        status: "running".into(),
        config: cfg.clone(),
        checkpoint_every: settings.checkpoint_every,
        artifacts: ArtifactPaths {
            metrics_csv: dir.join("metrics.csv"),
            checkpoints: Vec::new(),
            plots: Vec::new(),
        },
    };
    manifest.write(dir)?;

    let mut trainer = Trainer::new(cfg.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut writer = MetricsWriter::open(&manifest.artifacts.metrics_csv).map_err(CliError::runtime)?;
    let mut rows = Vec::new();
    let every = settings.checkpoint_every;
    let result = (|| -> Result<(), String> {
        while !trainer.is_done() {
            let next = if every == 0 {
                cfg.total_num_steps
            } else {
                (trainer.step() / every + 1) * every
            };
            trainer
                .run_until(next, |row| {
                    writer.append(row)?;
                    on_row(row);
                    rows.push(row.clone());
                    Ok(())
                })
                .map_err(|e| e.to_string())?;
            if every != 0 || trainer.is_done() {
                let path = dir.join("checkpoints").join(format!("step-{:08}.memr", trainer.step()));
                trainer.save_checkpoint(&path).map_err(|e| e.to_string())?;
                manifest.artifacts.checkpoints.push(path);
            }
        }
        Ok(())
    })();

    manifest.finished_at = Some(now());
    manifest.status = if result.is_ok() { "completed" } else { "failed" }.into();
    manifest.write(dir)?;
    Ok(RunOutcome {
        manifest,
        rows,
        error: result.err(),
    })
}
