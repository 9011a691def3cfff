use std::path::{Path, PathBuf};

use clap::Args;
use memr::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Settings that belong to the command line front end rather than the
/// trainer. In a config file they live under `[cli]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self { checkpoint_every: 5000 }
    }
}

/// Flags shared by every command that builds a trainer configuration.
/// Precedence: desk defaults (or `--paper-scale`), then the config file,
/// then individual flags.
#[derive(Args, Clone, Debug, Default)]
pub struct BaseArgs {
    /// TOML file with trainer fields (and an optional `[cli]` table).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from the full-size hyperparameters instead of the desk ones.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long, visible_alias = "total-num-steps")]
    pub steps: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

/// Trainer fields that a single run may override.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub base: BaseArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model_update_freq: Option<u64>,
    /// M: model rollouts per environment step.
    #[arg(long)]
    pub rollouts_per_step: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    /// D: fitting epochs of the model-data policy per step.
    #[arg(long)]
    pub fit_epochs: Option<usize>,
    /// G: SAC update rounds per environment step.
    #[arg(long, visible_alias = "policy-updates-per-step")]
    pub policy_updates: Option<usize>,
    #[arg(long, visible_alias = "model-dataset-size")]
    pub model_size: Option<usize>,
    #[arg(long)]
    pub env_buffer_capacity: Option<usize>,
    #[arg(long)]
    pub initial_random_steps: Option<u64>,
    #[arg(long)]
    pub real_data_fraction: Option<f64>,
    #[arg(long)]
    pub entropy_subsample: Option<usize>,
    /// SAC minibatch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_file(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

impl BaseArgs {
    /// Defaults overlaid with the config file; flags are not applied yet.
    fn file_layer(&self) -> Result<(TrainerConfig, RunSettings), CliError> {
        let start = if self.paper_scale {
            TrainerConfig::paper_scale()
        } else {
            TrainerConfig::default()
        };
        let mut settings = RunSettings::default();
        let Some(path) = &self.config else {
            return Ok((start, settings));
        };
        let mut overlay = read_file(path)?;
        if let Some(cli) = overlay.remove("cli") {
            settings = cli
                .try_into()
                .map_err(|e| CliError::Usage(format!("config {} [cli]: {e}", path.display())))?;
        }
        let mut table: toml::Table = start.to_toml().parse().expect("serialized config parses");
        merge_tables(&mut table, overlay);
        let text = toml::to_string(&table).expect("table serializes");
        let cfg = TrainerConfig::from_toml(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Ok((cfg, settings))
    }

    pub fn resolve(&self) -> Result<(TrainerConfig, RunSettings), CliError> {
        let (mut cfg, mut settings) = self.file_layer()?;
        if let Some(v) = &self.env {
            cfg.env = v.clone();
        }
        if let Some(v) = self.steps {
            cfg.total_num_steps = v;
        }
        if let Some(v) = self.eval_interval {
            cfg.eval_interval = v;
        }
        if let Some(v) = self.eval_episodes {
            cfg.eval_episodes = v;
        }
        if let Some(v) = self.checkpoint_every {
            settings.checkpoint_every = v;
        }
        Ok((cfg, settings))
    }
}

impl TrainArgs {
    /// Merged and validated configuration.
    pub fn resolve(&self) -> Result<(TrainerConfig, RunSettings), CliError> {
        let (mut cfg, settings) = self.base.resolve()?;
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(seed => seed);
        set!(model_update_freq => model_update_freq);
        set!(rollouts_per_step => rollouts_per_step);
        set!(alpha => alpha);
        set!(beta_start => beta_start);
        set!(beta_end => beta_end);
        set!(fit_epochs => fit_epochs);
        set!(policy_updates => policy_updates_per_step);
        set!(model_size => model_dataset_size);
        set!(env_buffer_capacity => env_buffer_capacity);
        set!(initial_random_steps => initial_random_steps);
        set!(real_data_fraction => real_data_fraction);
        set!(entropy_subsample => entropy_subsample);
        set!(batch_size => sac.batch_size);
        set!(gamma => sac.gamma);
        set!(tau => sac.tau);
        set!(ensemble_size => dynamics.ensemble_size);
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok((cfg, settings))
    }
}

/// Artifact root: `MEMR_OUT_DIR`, or `./runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os("MEMR_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "alpha = 0.3\nseed = 4\n[sac]\nbatch_size = 32\n[cli]\ncheckpoint_every = 7\n").unwrap();
        let args = TrainArgs {
            base: BaseArgs {
                config: Some(path),
                ..BaseArgs::default()
            },
            alpha: Some(0.9),
            ..TrainArgs::default()
        };
        let (cfg, settings) = args.resolve().unwrap();
        assert_eq!(cfg.alpha, 0.9);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.sac.batch_size, 32);
        assert_eq!(cfg.sac.hidden, TrainerConfig::default().sac.hidden);
        assert_eq!(settings.checkpoint_every, 7);
    }

    #[test]
    fn paper_scale_is_the_base_layer() {
        let args = TrainArgs {
            base: BaseArgs {
                paper_scale: true,
                ..BaseArgs::default()
            },
            ..TrainArgs::default()
        };
        let (cfg, _) = args.resolve().unwrap();
        assert_eq!(cfg, TrainerConfig::paper_scale());
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "alpah = 0.3\n").unwrap();
        let args = BaseArgs {
            config: Some(path),
            ..BaseArgs::default()
        };
        assert!(matches!(args.resolve(), Err(CliError::Usage(_))));
    }
}
