//! Versioned checkpoint container.
//!
//! Layout: magic `MEMR`, `u32` format version, `u32` section count, then a
//! table of `(name, offset, length, sha256)` entries followed by the section
//! payloads. Offsets are relative to the end of the table. Loading verifies
//! every digest before decoding anything, so a damaged file never yields a
//! partially restored trainer.

use std::path::Path;
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::{Counters, LastStats, MetricsRow, Trainer, TrainerConfig};
use crate::codec::{Reader, Writer};
use crate::dynamics::EnsembleDynamics;
use crate::env::make_env;
use crate::error::{MemrError, Result};
use crate::model_policy::ModelDataPolicy;
use crate::replay::{EnvReplayBuffer, SegmentedModelBuffer};
use crate::rng::{read_rng, write_rng};
use crate::sac::SacAgent;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MEMR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const SECTION_NAMES: [&str; 10] = [
    "config",
    "counters",
    "rng",
    "env_state",
    "env_buffer",
    "model_buffer",
    "dynamics",
    "model_policy",
    "sac",
    "metrics",
];

fn header_error(message: impl Into<String>) -> MemrError {
    MemrError::Checkpoint {
        section: "header".into(),
        message: message.into(),
    }
}

impl Trainer {
    fn section_payload(&self, name: &str) -> Vec<u8> {
        let mut w = Writer::new();
        match name {
            "config" => w.put_str(&self.cfg.to_toml()),
            "counters" => {
                w.put_u64(self.step);
                w.put_u64(self.counters.model_rollouts);
                w.put_u64(self.counters.policy_updates);
                w.put_u64(self.counters.model_trainings);
                w.put_u64(self.counters.rollout_steps);
                w.put_f64(self.stats.holdout_mse);
                w.put_f64(self.stats.mean_priority);
                w.put_f64(self.stats.critic_loss);
                w.put_f64(self.stats.actor_loss);
                w.put_f64(self.wall_clock());
            }
            "rng" => write_rng(&mut w, &self.rng),
            "env_state" => {
                w.put_u64(self.episode_step as u64);
                w.put_f64s(&self.state);
            }
            "env_buffer" => self.env_buf.write(&mut w),
            "model_buffer" => self.model_buf.write(&mut w),
            "dynamics" => self.dynamics.write(&mut w),
            "model_policy" => self.model_policy.write(&mut w),
            "sac" => self.sac.write(&mut w),
            "metrics" => {
                w.put_u64(self.metrics.len() as u64);
                for row in &self.metrics {
                    row.write(&mut w);
                }
            }
            _ => unreachable!("unknown section {name}"),
        }
        w.into_bytes()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let payloads: Vec<Vec<u8>> = SECTION_NAMES.iter().map(|n| self.section_payload(n)).collect();
        let mut w = Writer::new();
        w.put_bytes(&CHECKPOINT_MAGIC);
        w.put_u32(CHECKPOINT_VERSION);
        w.put_u32(SECTION_NAMES.len() as u32);
        let mut offset = 0u64;
        for (name, payload) in SECTION_NAMES.iter().zip(&payloads) {
            w.put_str(name);
            w.put_u64(offset);
            w.put_u64(payload.len() as u64);
            w.put_bytes(&Sha256::digest(payload));
            offset += payload.len() as u64;
        }
        for payload in &payloads {
            w.put_bytes(payload);
        }
        w.into_bytes()
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_checkpoint_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = split_sections(bytes)?;
        let get = |name: &str| -> &[u8] { sections.iter().find(|(n, _)| n == name).map(|(_, b)| *b).unwrap() };

        let mut r = Reader::new(get("config"), "config");
        let cfg = TrainerConfig::from_toml(&r.str()?).map_err(|e| MemrError::Checkpoint {
            section: "config".into(),
            message: e.to_string(),
        })?;
        r.finish()?;
        cfg.validate().map_err(|e| MemrError::Checkpoint {
            section: "config".into(),
            message: e.to_string(),
        })?;
        let env = make_env(&cfg.env)?;

        let mut r = Reader::new(get("counters"), "counters");
        let step = r.u64()?;
        let counters = Counters {
            model_rollouts: r.u64()?,
            policy_updates: r.u64()?,
            model_trainings: r.u64()?,
            rollout_steps: r.u64()?,
        };
        let stats = LastStats {
            holdout_mse: r.f64()?,
            mean_priority: r.f64()?,
            critic_loss: r.f64()?,
            actor_loss: r.f64()?,
        };
        let elapsed_before = r.f64()?;
        r.finish()?;

        let mut r = Reader::new(get("rng"), "rng");
        let rng = read_rng(&mut r)?;
        r.finish()?;

        let mut r = Reader::new(get("env_state"), "env_state");
        let episode_step = r.usize()?;
        let state = r.f64s()?;
        if state.len() != env.spec().state_dim || episode_step >= env.spec().horizon {
            return Err(r.error("environment state does not match the configured environment"));
        }
        r.finish()?;

        let mut r = Reader::new(get("env_buffer"), "env_buffer");
        let env_buf = EnvReplayBuffer::read(&mut r)?;
        r.finish()?;
        if env_buf.alpha() != cfg.alpha || env_buf.capacity() != cfg.env_buffer_capacity {
            return Err(r.error("buffer parameters disagree with the config"));
        }

        let mut r = Reader::new(get("model_buffer"), "model_buffer");
        let model_buf = SegmentedModelBuffer::read(&mut r)?;
        r.finish()?;
        if model_buf.segment_len() != cfg.rollouts_per_step {
            return Err(r.error("segment length disagrees with the config"));
        }

        let mut r = Reader::new(get("dynamics"), "dynamics");
        let dynamics = EnsembleDynamics::read(&mut r, cfg.dynamics.clone())?;
        r.finish()?;

        let mut r = Reader::new(get("model_policy"), "model_policy");
        let model_policy = ModelDataPolicy::read(&mut r, cfg.model_policy.clone())?;
        r.finish()?;

        let mut r = Reader::new(get("sac"), "sac");
        let sac = SacAgent::read(&mut r, cfg.sac.clone())?;
        r.finish()?;

        let mut r = Reader::new(get("metrics"), "metrics");
        let n = r.usize()?;
        let mut metrics = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            metrics.push(MetricsRow::read(&mut r)?);
        }
        r.finish()?;

        Ok(Self {
            cfg,
            env,
            rng,
            step,
            episode_step,
            state,
            env_buf,
            model_buf,
            dynamics,
            model_policy,
            sac,
            counters,
            stats,
            metrics,
            elapsed_before,
            started: Instant::now(),
        })
    }
}

/// Validates the header and table and returns each section's verified
/// payload in table order.
fn split_sections(bytes: &[u8]) -> Result<Vec<(String, &[u8])>> {
    let mut r = Reader::new(bytes, "header");
    if r.bytes(4).map_err(|_| header_error("file too short"))? != CHECKPOINT_MAGIC {
        return Err(header_error("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(header_error(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = r.str()?;
        let offset = r.u64()?;
        let len = r.u64()?;
        let digest = r.bytes(32)?.to_vec();
        table.push((name, offset, len, digest));
    }
    let body = &bytes[bytes.len() - r.remaining()..];
    let mut out = Vec::with_capacity(table.len());
    for (name, offset, len, digest) in table {
        let err = |message: String| MemrError::Checkpoint {
            section: name.clone(),
            message,
        };
        let end = offset.checked_add(len).ok_or_else(|| err("section range overflows".into()))?;
        if end > body.len() as u64 {
            return Err(err(format!("truncated: needs bytes up to {end}, file body has {}", body.len())));
        }
        let payload = &body[offset as usize..end as usize];
        if Sha256::digest(payload).as_slice() != digest.as_slice() {
            return Err(err("checksum mismatch".into()));
        }
        out.push((name, payload));
    }
    for name in SECTION_NAMES {
        if !out.iter().any(|(n, _)| n == name) {
            return Err(MemrError::Checkpoint {
                section: name.into(),
                message: "section missing".into(),
            });
        }
    }
    Ok(out)
}
