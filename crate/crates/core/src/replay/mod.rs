//! Environment and model datasets.
//!
//! [`EnvReplayBuffer`] stores real transitions and samples them in
//! proportion to `priority^alpha` through a [`SumTree`]; [`SegmentedModelBuffer`]
//! stores model rollouts grouped by the round that generated them.

mod env_buffer;
mod model_buffer;
mod sum_tree;

pub use env_buffer::{importance_weights, EnvReplayBuffer, EnvTransition, SampledState, SlotHandle};
pub use model_buffer::{ModelSample, PolicyBatch, SegmentedModelBuffer};
pub use sum_tree::SumTree;

use serde::{Deserialize, Serialize};

/// Linear annealing of the importance-sampling exponent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub total_steps: u64,
}

impl BetaSchedule {
    pub fn new(beta_start: f64, beta_end: f64, total_steps: u64) -> Self {
        Self {
            beta_start,
            beta_end,
            total_steps,
        }
    }

    pub fn beta_at(&self, step: u64) -> f64 {
        let frac = if self.total_steps == 0 {
            1.0
        } else {
            (step as f64 / self.total_steps as f64).min(1.0)
        };
        self.beta_start + (self.beta_end - self.beta_start) * frac
    }
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self::new(0.4, 1.0, 1)
    }
}
