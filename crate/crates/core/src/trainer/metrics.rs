use std::fs::{File, OpenOptions};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{MemrError, Result};

/// One evaluation point. Statistics that do not exist yet (before the first
/// model fit or SAC update) are NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub eval_return: f64,
    pub discounted_return: f64,
    pub holdout_mse: f64,
    pub mean_priority: f64,
    pub model_entropy: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature: f64,
    pub wall_clock_s: f64,
    pub policy_updates: u64,
    pub model_rollouts: u64,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "step",
    "eval_return",
    "discounted_return",
    "holdout_mse",
    "mean_priority",
    "model_entropy",
    "critic_loss",
    "actor_loss",
    "temperature",
    "wall_clock_s",
    "policy_updates",
    "model_rollouts",
];

/// Columns that depend on the machine rather than the run.
pub const NONDETERMINISTIC_COLUMNS: [&str; 1] = ["wall_clock_s"];

impl MetricsRow {
    /// Equality on every column except wall-clock time, treating NaN as
    /// equal to NaN.
    pub fn same_run_values(&self, other: &Self) -> bool {
        let eq = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        self.step == other.step
            && eq(self.eval_return, other.eval_return)
            && eq(self.discounted_return, other.discounted_return)
            && eq(self.holdout_mse, other.holdout_mse)
            && eq(self.mean_priority, other.mean_priority)
            && eq(self.model_entropy, other.model_entropy)
            && eq(self.critic_loss, other.critic_loss)
            && eq(self.actor_loss, other.actor_loss)
            && eq(self.temperature, other.temperature)
            && self.policy_updates == other.policy_updates
            && self.model_rollouts == other.model_rollouts
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.put_u64(self.step);
        for v in [
            self.eval_return,
            self.discounted_return,
            self.holdout_mse,
            self.mean_priority,
            self.model_entropy,
            self.critic_loss,
            self.actor_loss,
            self.temperature,
            self.wall_clock_s,
        ] {
            w.put_f64(v);
        }
        w.put_u64(self.policy_updates);
        w.put_u64(self.model_rollouts);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Self {
            step: r.u64()?,
            eval_return: r.f64()?,
            discounted_return: r.f64()?,
            holdout_mse: r.f64()?,
            mean_priority: r.f64()?,
            model_entropy: r.f64()?,
            critic_loss: r.f64()?,
            actor_loss: r.f64()?,
            temperature: r.f64()?,
            wall_clock_s: r.f64()?,
            policy_updates: r.u64()?,
            model_rollouts: r.u64()?,
        })
    }
}

/// Append-only CSV sink. The header is written only when the file is new or
/// empty.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let inner = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Parses a metrics CSV. Errors name the offending line.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_metrics_csv(&text)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_COLUMNS {
        return Err(MemrError::Usage(format!("unexpected metrics header: {}", header.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<MetricsRow>().enumerate() {
        // Line 1 is the header.
        let row = rec.map_err(|e| MemrError::Usage(format!("malformed metrics row at line {}: {e}", i + 2)))?;
        rows.push(row);
    }
    Ok(rows)
}
