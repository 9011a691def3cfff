//! The end-to-end training loop.
//!
//! Per environment step `t`:
//! 1. retrain the dynamics ensemble when `t % model_update_freq == 0` (after
//!    the random warm-up);
//! 2. act in the real environment and store the transition with its priority
//!    under the model-data policy (1.0 before that policy is first fitted);
//! 3. once the model exists: sample `M` real states by priority, propose
//!    actions with the SAC actor, roll each out one step through the model and
//!    store the rollouts as a new segment with their importance weights;
//! 4. fit the model-data policy on the new state-action pairs and write back
//!    fresh priorities for the sampled states;
//! 5. run `G` SAC update rounds, each on a batch drawn from one segment.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION, SECTION_NAMES};
pub use config::TrainerConfig;
pub use metrics::{
    parse_metrics_csv, read_metrics_csv, MetricsRow, MetricsWriter, CSV_COLUMNS, NONDETERMINISTIC_COLUMNS,
};

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::dynamics::{validation_error, EnsembleDynamics};
use crate::entropy::{knn_entropy, standardize, DIAGNOSTIC_K};
use crate::env::{evaluate_policy, make_env, Environment};
use crate::error::{MemrError, Result};
use crate::model_policy::ModelDataPolicy;
use crate::replay::{EnvReplayBuffer, EnvTransition, ModelSample, SegmentedModelBuffer};
use crate::rng::{seeded, MemrRng};
use crate::sac::{Batch, SacAgent};

/// Monotone counters of the work done so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub model_rollouts: u64,
    /// SAC update rounds (one critic, actor and temperature step each).
    pub policy_updates: u64,
    pub model_trainings: u64,
    /// Environment steps on which rollouts were generated.
    pub rollout_steps: u64,
}

/// Latest values of the per-step statistics reported in metrics rows.
#[derive(Clone, Copy, Debug, PartialEq)]
struct LastStats {
    holdout_mse: f64,
    mean_priority: f64,
    critic_loss: f64,
    actor_loss: f64,
}

impl Default for LastStats {
    fn default() -> Self {
        Self {
            holdout_mse: f64::NAN,
            mean_priority: f64::NAN,
            critic_loss: f64::NAN,
            actor_loss: f64::NAN,
        }
    }
}

pub struct Trainer {
    cfg: TrainerConfig,
    env: Box<dyn Environment>,
    rng: MemrRng,
    step: u64,
    episode_step: usize,
    state: Vec<f64>,
    env_buf: EnvReplayBuffer,
    model_buf: SegmentedModelBuffer,
    dynamics: EnsembleDynamics,
    model_policy: ModelDataPolicy,
    sac: SacAgent,
    counters: Counters,
    stats: LastStats,
    metrics: Vec<MetricsRow>,
    elapsed_before: f64,
    started: Instant,
}

/// Trains with `cfg` to completion and returns every metrics row.
pub fn run(cfg: TrainerConfig) -> Result<Vec<MetricsRow>> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.run_to_end(|_| Ok(()))?;
    Ok(trainer.metrics().to_vec())
}

impl Trainer {
    pub fn new(cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(&cfg.env)?;
        let spec = env.spec().clone();
        let mut rng = seeded(cfg.seed);
        let dynamics = EnsembleDynamics::new(spec.state_dim, spec.action_dim, cfg.dynamics.clone(), &mut rng)?;
        let model_policy = ModelDataPolicy::new(spec.state_dim, spec.action_dim, cfg.model_policy.clone(), &mut rng)?;
        let scale = spec.action_limit[0];
        if spec.action_limit.iter().any(|l| *l != scale) {
            return Err(MemrError::Config(format!("{}: action bounds must be equal across dimensions", spec.name)));
        }
        let sac = SacAgent::new(spec.state_dim, spec.action_dim, scale, cfg.sac.clone(), &mut rng)?;
        let state = env.reset(&mut rng);
        Ok(Self {
            env_buf: EnvReplayBuffer::new(cfg.env_buffer_capacity, cfg.alpha, crate::gaussian::PRIORITY_EPS)?,
            model_buf: SegmentedModelBuffer::new(cfg.model_dataset_size, cfg.rollouts_per_step)?,
            env,
            rng,
            step: 0,
            episode_step: 0,
            state,
            dynamics,
            model_policy,
            sac,
            counters: Counters::default(),
            stats: LastStats::default(),
            metrics: Vec::new(),
            elapsed_before: 0.0,
            started: Instant::now(),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// Environment steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn agent(&self) -> &SacAgent {
        &self.sac
    }

    pub fn env_buffer(&self) -> &EnvReplayBuffer {
        &self.env_buf
    }

    pub fn model_buffer(&self) -> &SegmentedModelBuffer {
        &self.model_buf
    }

    pub fn dynamics(&self) -> &EnsembleDynamics {
        &self.dynamics
    }

    pub fn model_policy(&self) -> &ModelDataPolicy {
        &self.model_policy
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_num_steps
    }

    fn wall_clock(&self) -> f64 {
        self.elapsed_before + self.started.elapsed().as_secs_f64()
    }

    /// Runs until `total_num_steps`, calling `on_row` for each metrics row.
    pub fn run_to_end(&mut self, on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        self.run_until(self.cfg.total_num_steps, on_row)
    }

    /// Runs until `limit` steps (capped at the configured total).
    pub fn run_until(&mut self, limit: u64, mut on_row: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        let limit = limit.min(self.cfg.total_num_steps);
        while self.step < limit {
            if let Some(row) = self.step_once()? {
                on_row(&row)?;
            }
        }
        Ok(())
    }

    /// Advances one environment step. Returns a metrics row when the step
    /// completes an evaluation interval.
    pub fn step_once(&mut self) -> Result<Option<MetricsRow>> {
        let t = self.step;
        self.advance(t).map_err(|e| MemrError::Step {
            step: t,
            source: Box::new(e),
        })
    }

    fn advance(&mut self, t: u64) -> Result<Option<MetricsRow>> {
        if t >= self.cfg.initial_random_steps && t % self.cfg.model_update_freq == 0 {
            let report = self.dynamics.train(&self.env_buf, &mut self.rng)?;
            self.stats.holdout_mse = validation_error(&report);
            self.counters.model_trainings += 1;
        }

        self.act_in_env(t)?;

        if self.dynamics.is_trained() {
            self.generate_rollouts(t)?;
            self.update_agent()?;
        }

        self.step += 1;
        if self.step % self.cfg.eval_interval == 0 {
            let row = self.evaluate()?;
            self.metrics.push(row.clone());
            return Ok(Some(row));
        }
        Ok(None)
    }

    fn act_in_env(&mut self, t: u64) -> Result<()> {
        let spec = self.env.spec().clone();
        let action = if t < self.cfg.initial_random_steps {
            spec.action_limit
                .iter()
                .map(|l| self.rng.random_range(-l..=*l))
                .collect()
        } else {
            self.sac.act(&self.state, false, &mut self.rng)?
        };
        let result = self.env.step(&self.state, &action, self.episode_step)?;
        let priority = if self.model_policy.fits() > 0 {
            self.model_policy.priority_of(&self.state, &action)?
        } else {
            1.0
        };
        self.env_buf.add(EnvTransition {
            state: self.state.clone(),
            action,
            next_state: result.next_state.clone(),
            reward: result.reward,
            done: result.done,
            priority,
        });
        self.episode_step += 1;
        if result.done || self.episode_step >= spec.horizon {
            self.state = self.env.reset(&mut self.rng);
            self.episode_step = 0;
        } else {
            self.state = result.next_state;
        }
        Ok(())
    }

    fn generate_rollouts(&mut self, t: u64) -> Result<()> {
        let m = self.cfg.rollouts_per_step;
        let beta = self.cfg.beta_schedule().beta_at(t);
        let sampled = self.env_buf.sample_states(m, beta, &mut self.rng)?;
        let sd = self.env.spec().state_dim;
        let mut states = Array2::zeros((m, sd));
        for (i, s) in sampled.iter().enumerate() {
            let real = &self.env_buf.get(s.handle.slot).state;
            states.row_mut(i).assign(&ndarray::ArrayView1::from(real.as_slice()));
        }
        let actions = self.sac.act_batch(states.view(), false, &mut self.rng)?;
        let state_rows: Vec<&[f64]> = states.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
        let action_rows: Vec<&[f64]> = actions.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
        // Rollouts start only from states stored in the real buffer.
        debug_assert!(sampled
            .iter()
            .zip(&state_rows)
            .all(|(s, row)| self.env_buf.get(s.handle.slot).state.as_slice() == *row));
        let outcomes = self.dynamics.rollout_batch(&state_rows, &action_rows, &mut self.rng)?;
        let segment: Vec<ModelSample> = outcomes
            .into_iter()
            .enumerate()
            .map(|(i, (next_state, reward))| ModelSample {
                state: state_rows[i].to_vec(),
                action: action_rows[i].to_vec(),
                next_state,
                reward,
                weight: sampled[i].weight,
            })
            .collect();
        self.model_buf.push_segment(segment)?;
        self.counters.model_rollouts += m as u64;
        self.counters.rollout_steps += 1;

        self.model_policy
            .fit_online(states.view(), actions.view(), self.cfg.fit_epochs, &mut self.rng)?;
        let fresh = self.model_policy.priorities(states.view(), actions.view())?;
        let updates: Vec<_> = sampled.iter().map(|s| s.handle).zip(fresh.iter().copied()).collect();
        self.env_buf.update_priorities(&updates);
        #[cfg(debug_assertions)]
        for (i, (handle, p)) in updates.iter().enumerate() {
            let last_write = updates[i + 1..].iter().all(|(h, _)| h.slot != handle.slot);
            if last_write && self.env_buf.is_current(*handle) {
                debug_assert_eq!(self.env_buf.get(handle.slot).priority, p.max(self.env_buf.eps()));
            }
        }
        self.stats.mean_priority = fresh.iter().sum::<f64>() / fresh.len() as f64;
        Ok(())
    }

    fn policy_batch(&mut self) -> Result<Batch> {
        let b = self.cfg.sac.batch_size;
        let n_real = ((b as f64) * self.cfg.real_data_fraction).round() as usize;
        let n_model = b - n_real;
        let spec = self.env.spec();
        let (sd, ad) = (spec.state_dim, spec.action_dim);
        let mut batch = Batch {
            states: Array2::zeros((b, sd)),
            actions: Array2::zeros((b, ad)),
            next_states: Array2::zeros((b, sd)),
            rewards: Array1::zeros(b),
            weights: Array1::ones(b),
        };
        let mut fill = |i: usize, s: &[f64], a: &[f64], s2: &[f64], r: f64, w: f64| {
            batch.states.row_mut(i).assign(&ndarray::ArrayView1::from(s));
            batch.actions.row_mut(i).assign(&ndarray::ArrayView1::from(a));
            batch.next_states.row_mut(i).assign(&ndarray::ArrayView1::from(s2));
            batch.rewards[i] = r;
            batch.weights[i] = w;
        };
        if n_model > 0 {
            let pb = self.model_buf.sample_policy_batch(n_model, &mut self.rng)?;
            for (i, s) in pb.samples.iter().enumerate() {
                fill(i, &s.state, &s.action, &s.next_state, s.reward, s.weight);
            }
        }
        if n_real > 0 {
            let slots = self.env_buf.sample_uniform(n_real, &mut self.rng)?;
            for (k, slot) in slots.into_iter().enumerate() {
                let t = self.env_buf.get(slot);
                fill(n_model + k, &t.state, &t.action, &t.next_state, t.reward, 1.0);
            }
        }
        Ok(batch)
    }

    fn update_agent(&mut self) -> Result<()> {
        let g = self.cfg.policy_updates_per_step;
        let (mut critic, mut actor) = (0.0, 0.0);
        for _ in 0..g {
            let batch = self.policy_batch()?;
            critic += self.sac.q_update(&batch, &mut self.rng)?.loss;
            let stats = self.sac.policy_update(batch.states.view(), &mut self.rng)?;
            actor += stats.loss;
            self.sac.temperature_step(stats.mean_log_prob);
            self.sac.target_sync(self.cfg.sac.tau)?;
            self.counters.policy_updates += 1;
        }
        self.stats.critic_loss = critic / g as f64;
        self.stats.actor_loss = actor / g as f64;
        Ok(())
    }

    /// k-NN entropy of standardized state-action pairs drawn from the model
    /// buffer. Uses its own RNG stream so diagnostics never perturb training.
    pub fn model_entropy(&self) -> Result<f64> {
        let n = self.cfg.entropy_subsample.min(self.model_buf.len());
        if n <= DIAGNOSTIC_K + 1 {
            return Ok(f64::NAN);
        }
        let mut rng = seeded(self.cfg.seed ^ 0xD1A6_0000_0000_0000 ^ self.step);
        let spec = self.env.spec();
        let mut scale = spec.state_scale.clone();
        scale.extend(&spec.action_limit);
        let mut points: Vec<Vec<f64>> = self
            .model_buf
            .sample_any(n, &mut rng)
            .into_iter()
            .map(|s| s.state.iter().chain(&s.action).copied().collect())
            .collect();
        standardize(&mut points, &scale);
        knn_entropy(&points, DIAGNOSTIC_K)
    }

    fn evaluate(&self) -> Result<MetricsRow> {
        let eval_seed = self.cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(self.step);
        let result = evaluate_policy(
            self.env.as_ref(),
            &self.sac,
            self.cfg.eval_episodes,
            self.cfg.sac.gamma,
            eval_seed,
        )?;
        Ok(MetricsRow {
            step: self.step,
            eval_return: result.mean_return,
            discounted_return: result.mean_discounted,
            holdout_mse: self.stats.holdout_mse,
            mean_priority: self.stats.mean_priority,
            model_entropy: self.model_entropy()?,
            critic_loss: self.stats.critic_loss,
            actor_loss: self.stats.actor_loss,
            temperature: self.sac.temperature(),
            wall_clock_s: self.wall_clock(),
            policy_updates: self.counters.policy_updates,
            model_rollouts: self.counters.model_rollouts,
        })
    }

    /// Discounted tail bound of the truncated evaluation horizon.
    pub fn eval_tail_bound(&self) -> f64 {
        let spec = self.env.spec();
        let gamma = self.cfg.sac.gamma;
        gamma.powi(spec.horizon as i32) * spec.reward_abs_max / (1.0 - gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainerConfig {
        let mut cfg = TrainerConfig {
            total_num_steps: 600,
            model_update_freq: 100,
            rollouts_per_step: 8,
            model_dataset_size: 80,
            initial_random_steps: 300,
            eval_interval: 200,
            eval_episodes: 1,
            entropy_subsample: 50,
            ..TrainerConfig::default()
        };
        cfg.sac.batch_size = 8;
        cfg.sac.hidden = vec![16, 16];
        cfg.dynamics.hidden = vec![16, 16];
        cfg.dynamics.ensemble_size = 2;
        cfg.dynamics.max_epochs = 2;
        cfg.model_policy.hidden = vec![16, 16];
        cfg
    }

    #[test]
    fn zero_steps_produce_nothing() {
        let cfg = TrainerConfig {
            total_num_steps: 0,
            ..tiny()
        };
        let mut t = Trainer::new(cfg).unwrap();
        t.run_to_end(|_| Ok(())).unwrap();
        assert!(t.metrics().is_empty());
        assert_eq!(t.counters(), Counters::default());
    }

    #[test]
    fn bookkeeping_identities() {
        let cfg = tiny();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run_to_end(|_| Ok(())).unwrap();
        let k = cfg.total_num_steps - cfg.first_model_step();
        let c = t.counters();
        assert_eq!(c.model_rollouts, k * cfg.rollouts_per_step as u64);
        assert_eq!(c.policy_updates, k * cfg.policy_updates_per_step as u64);
        assert_eq!(c.model_trainings, 3);
        let rows = t.metrics();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![200, 400, 600]);
        assert!(rows[0].holdout_mse.is_nan() && rows[2].holdout_mse.is_finite());
        assert_eq!(rows[2].model_rollouts, c.model_rollouts);
    }

    #[test]
    fn uniform_baseline_weights_are_one() {
        let cfg = TrainerConfig {
            alpha: 0.0,
            beta_start: 0.0,
            beta_end: 0.0,
            ..tiny()
        };
        let mut t = Trainer::new(cfg).unwrap();
        t.run_to_end(|_| Ok(())).unwrap();
        assert!(t.model_buffer().iter().all(|(_, s)| s.weight == 1.0));
    }

    #[test]
    fn prioritized_weights_within_unit_interval() {
        let mut t = Trainer::new(tiny()).unwrap();
        t.run_to_end(|_| Ok(())).unwrap();
        assert!(t.model_buffer().iter().all(|(_, s)| s.weight > 0.0 && s.weight <= 1.0));
        assert!(t.model_buffer().iter().any(|(_, s)| s.weight < 1.0));
    }

    #[test]
    fn equal_seeds_equal_metrics() {
        let a = run(tiny()).unwrap();
        let b = run(tiny()).unwrap();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_run_values(y)));
    }

    #[test]
    fn real_data_fraction_mixes_batches() {
        let cfg = TrainerConfig {
            real_data_fraction: 0.5,
            ..tiny()
        };
        let mut t = Trainer::new(cfg).unwrap();
        t.run_to_end(|_| Ok(())).unwrap();
        assert!(t.counters().policy_updates > 0);
    }

    #[test]
    fn errors_carry_step_number() {
        let mut t = Trainer::new(tiny()).unwrap();
        t.run_until(300, |_| Ok(())).unwrap();
        // A dynamics minimum above the available data makes the next retrain fail.
        let starved = crate::dynamics::DynamicsConfig {
            min_samples: 10_000,
            ..t.cfg.dynamics.clone()
        };
        t.dynamics = EnsembleDynamics::new(3, 1, starved, &mut seeded(0)).unwrap();
        match t.step_once() {
            Err(MemrError::Step { step, source }) => {
                assert_eq!(step, 300);
                assert!(matches!(*source, MemrError::Precondition(_)));
            }
            other => panic!("expected step error, got {other:?}"),
        }
    }
}
