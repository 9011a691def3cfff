use serde::{Deserialize, Serialize};

use crate::dynamics::DynamicsConfig;
use crate::error::{MemrError, Result};
use crate::model_policy::ModelPolicyConfig;
use crate::replay::BetaSchedule;
use crate::sac::SacConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub env: String,
    pub seed: u64,
    pub total_num_steps: u64,
    pub model_update_freq: u64,
    /// `M`: model rollouts per environment step, also the segment length.
    pub rollouts_per_step: usize,
    /// Prioritization exponent.
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// `D`: epochs of model-data policy fitting per step.
    pub fit_epochs: usize,
    /// `G`: SAC update rounds per environment step.
    pub policy_updates_per_step: usize,
    /// Capacity of the model dataset in rollouts; a multiple of `M`.
    pub model_dataset_size: usize,
    pub env_buffer_capacity: usize,
    pub initial_random_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Share of each SAC batch drawn uniformly from real transitions.
    pub real_data_fraction: f64,
    /// Model-buffer pairs drawn for the k-NN entropy diagnostic.
    pub entropy_subsample: usize,
    pub dynamics: DynamicsConfig,
    pub model_policy: ModelPolicyConfig,
    pub sac: SacConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            env: "pendulum".into(),
            seed: 0,
            total_num_steps: 15_000,
            model_update_freq: 250,
            rollouts_per_step: 40,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            fit_epochs: 2,
            policy_updates_per_step: 5,
            model_dataset_size: 20_000,
            env_buffer_capacity: 1_000_000,
            initial_random_steps: 1000,
            eval_interval: 1000,
            eval_episodes: 10,
            real_data_fraction: 0.0,
            entropy_subsample: 500,
            dynamics: DynamicsConfig::default(),
            model_policy: ModelPolicyConfig::default(),
            sac: SacConfig::default(),
        }
    }
}

impl TrainerConfig {
    /// Values from the reference hyperparameter table; everything not listed
    /// there keeps its desk default.
    pub fn paper_scale() -> Self {
        Self {
            total_num_steps: 125_000,
            model_update_freq: 250,
            rollouts_per_step: 400,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            fit_epochs: 2,
            policy_updates_per_step: 5,
            model_dataset_size: 1_000_000,
            dynamics: DynamicsConfig::paper_scale(),
            sac: SacConfig {
                batch_size: 256,
                hidden: vec![256, 256],
                ..SacConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn beta_schedule(&self) -> BetaSchedule {
        BetaSchedule::new(self.beta_start, self.beta_end, self.total_num_steps)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MemrError::Config(msg));
        let m = self.rollouts_per_step;
        if m == 0 || self.model_update_freq == 0 || self.fit_epochs == 0 || self.policy_updates_per_step == 0 {
            return bad("M, model_update_freq, D and G must all be positive".into());
        }
        if self.model_dataset_size == 0 || self.model_dataset_size % m != 0 {
            return bad(format!(
                "model_dataset_size {} must be a positive multiple of M = {m}",
                self.model_dataset_size
            ));
        }
        if self.env_buffer_capacity == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("env_buffer_capacity, eval_interval and eval_episodes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        for (name, b) in [("beta_start", self.beta_start), ("beta_end", self.beta_end)] {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1], got {b}"));
            }
        }
        if !(0.0..1.0).contains(&self.real_data_fraction) {
            return bad(format!("real_data_fraction must lie in [0, 1), got {}", self.real_data_fraction));
        }
        if self.sac.batch_size > m {
            return bad(format!("batch size B = {} cannot exceed M = {m}", self.sac.batch_size));
        }
        if self.entropy_subsample < 5 {
            return bad("entropy_subsample must be at least 5".into());
        }
        if self.initial_random_steps < self.dynamics.min_samples as u64 {
            return bad(format!(
                "initial_random_steps {} is below the dynamics minimum of {} transitions",
                self.initial_random_steps, self.dynamics.min_samples
            ));
        }
        crate::env::make_env(&self.env)?;
        self.dynamics.validate()?;
        self.sac.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MemrError::Config(e.to_string()))
    }

    /// Step at which the model is first trained.
    pub fn first_model_step(&self) -> u64 {
        self.initial_random_steps.div_ceil(self.model_update_freq) * self.model_update_freq
    }
}
