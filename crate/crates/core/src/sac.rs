//! Soft actor-critic with twin critics, Polyak-averaged targets and an
//! automatically tuned temperature.
//!
//! The actor emits a Gaussian over a pre-squash variable `u`; actions are
//! `scale * tanh(u)`. Critic losses are weighted per sample so that
//! prioritized state sampling can be corrected with importance weights.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::StandardNormal;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::env::Policy;
use crate::error::{check_dim, usage, MemrError, Result};
use crate::gaussian::LN_2PI;
use crate::net::{soft_bound, softplus, Activation, Adam, Grads, Mlp};
use crate::rng::MemrRng;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub initial_temperature: f64,
    /// Defaults to `-dim(A)` when absent.
    pub target_entropy: Option<f64>,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temperature_lr: 3e-4,
            initial_temperature: 1.0,
            target_entropy: None,
            hidden: vec![64, 64],
            batch_size: 40,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(MemrError::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(MemrError::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(MemrError::Config("SAC batch size must be positive".into()));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.temperature_lr > 0.0 && self.initial_temperature > 0.0) {
            return Err(MemrError::Config("SAC learning rates and temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Weighted transitions for one critic update. Rows align across fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub next_states: Array2<f64>,
    pub rewards: Array1<f64>,
    pub weights: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Reparameterized actor sample for a batch of states.
#[derive(Clone, Debug)]
pub struct ActorSample {
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    /// Derivative of the bounded log-std with respect to the raw head.
    pub d_log_std: Array2<f64>,
    pub noise: Array2<f64>,
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of a squashed action given the pre-squash Gaussian.
pub fn squashed_log_prob(mean: &[f64], log_std: &[f64], action: &[f64], scale: f64) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let y = (a / scale).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
            let u = y.atanh();
            let eps = (u - m) / ls.exp();
            -0.5 * eps * eps - ls - 0.5 * LN_2PI - scale.ln() - log_one_minus_tanh_sq(u)
        })
        .sum()
}

/// Samples actions from `actor` with the given standard-normal noise.
pub fn actor_sample(actor: &Mlp, states: ArrayView2<f64>, noise: &Array2<f64>, scale: f64) -> Result<(ActorSample, crate::net::Tape)> {
    let (out, tape) = actor.forward(states)?;
    let ad = out.ncols() / 2;
    check_dim("actor noise", ad, noise.ncols())?;
    let mean = out.slice(s![.., ..ad]).to_owned();
    let mut log_std = Array2::zeros(mean.raw_dim());
    let mut d_log_std = Array2::zeros(mean.raw_dim());
    ndarray::Zip::from(&mut log_std)
        .and(&mut d_log_std)
        .and(out.slice(s![.., ad..]))
        .for_each(|ls, d, &r| (*ls, *d) = soft_bound(r, LOG_STD_MIN, LOG_STD_MAX));
    let mut actions = Array2::zeros(mean.raw_dim());
    let mut log_probs = Array1::zeros(mean.nrows());
    for i in 0..mean.nrows() {
        let mut lp = 0.0;
        for d in 0..ad {
            let e = noise[[i, d]];
            let u = mean[[i, d]] + log_std[[i, d]].exp() * e;
            actions[[i, d]] = scale * u.tanh();
            lp += -0.5 * e * e - log_std[[i, d]] - 0.5 * LN_2PI - scale.ln() - log_one_minus_tanh_sq(u);
        }
        log_probs[i] = lp;
    }
    Ok((
        ActorSample {
            actions,
            log_probs,
            mean,
            log_std,
            d_log_std,
            noise: noise.clone(),
        },
        tape,
    ))
}

fn concat(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[states, actions]).expect("row counts agree")
}

/// `(1/B) sum_i w_i (Q(s_i, a_i) - y_i)^2` and its parameter gradient.
pub fn critic_loss_and_grad(
    q: &Mlp,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    targets: &Array1<f64>,
    weights: &Array1<f64>,
) -> Result<(f64, Grads)> {
    let (out, tape) = q.forward(concat(states, actions).view())?;
    let b = states.nrows() as f64;
    let diff = &out.column(0) - targets;
    let loss = (weights * &diff * &diff).sum() / b;
    let d_out = (weights * &diff * (2.0 / b)).insert_axis(Axis(1));
    let mut grads = q.zero_grads();
    q.backward(tape, d_out.view(), &mut grads)?;
    Ok((loss, grads))
}

/// Reparameterized actor objective `(1/B) sum_i [temperature log pi(a_i|s_i)
/// - min(Q1, Q2)(s_i, a_i)]` at fixed noise, with its gradient with respect
/// to the actor parameters.
pub fn actor_loss_and_grad(
    actor: &Mlp,
    q1: &Mlp,
    q2: &Mlp,
    states: ArrayView2<f64>,
    noise: &Array2<f64>,
    temperature: f64,
    scale: f64,
) -> Result<(f64, Grads, ActorSample)> {
    let (sample, tape) = actor_sample(actor, states, noise, scale)?;
    let input = concat(states, sample.actions.view());
    let (v1, t1) = q1.forward(input.view())?;
    let (v2, t2) = q2.forward(input.view())?;
    let b = states.nrows();
    let sd = states.ncols();
    let ad = sample.actions.ncols();
    let bf = b as f64;

    let mut pick1 = Array2::zeros((b, 1));
    let mut pick2 = Array2::zeros((b, 1));
    let mut loss = 0.0;
    for i in 0..b {
        let q = if v1[[i, 0]] <= v2[[i, 0]] {
            pick1[[i, 0]] = 1.0;
            v1[[i, 0]]
        } else {
            pick2[[i, 0]] = 1.0;
            v2[[i, 0]]
        };
        loss += temperature * sample.log_probs[i] - q;
    }
    let mut scratch1 = q1.zero_grads();
    let mut scratch2 = q2.zero_grads();
    let dq = q1.backward(t1, pick1.view(), &mut scratch1)? + q2.backward(t2, pick2.view(), &mut scratch2)?;

    let mut d_out = Array2::zeros((b, 2 * ad));
    for i in 0..b {
        for d in 0..ad {
            let std = sample.log_std[[i, d]].exp();
            let e = sample.noise[[i, d]];
            let th = (sample.actions[[i, d]] / scale).clamp(-1.0, 1.0);
            let da_du = scale * (1.0 - th * th);
            let dq_da = dq[[i, sd + d]];
            // d log pi / du through the tanh Jacobian term.
            let dlp_du = 2.0 * th;
            let d_u = temperature * dlp_du - dq_da * da_du;
            d_out[[i, d]] = d_u / bf;
            let d_log_std = temperature * -1.0 + d_u * std * e;
            d_out[[i, ad + d]] = d_log_std * sample.d_log_std[[i, d]] / bf;
        }
    }
    let mut grads = actor.zero_grads();
    actor.backward(tape, d_out.view(), &mut grads)?;
    Ok((loss / bf, grads, sample))
}

/// Diagnostics from one critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStats {
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub mean_log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacAgent {
    cfg: SacConfig,
    state_dim: usize,
    action_dim: usize,
    action_scale: f64,
    actor: Mlp,
    q1: Mlp,
    q2: Mlp,
    q1_target: Mlp,
    q2_target: Mlp,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    log_temperature: f64,
    temperature_opt: Adam,
    updates: u64,
}

impl SacAgent {
    pub fn new(state_dim: usize, action_dim: usize, action_scale: f64, cfg: SacConfig, rng: &mut MemrRng) -> Result<Self> {
        cfg.validate()?;
        if !(action_scale > 0.0) {
            return usage("action scale must be positive");
        }
        let mut actor_sizes = vec![state_dim];
        actor_sizes.extend(&cfg.hidden);
        actor_sizes.push(2 * action_dim);
        let mut q_sizes = vec![state_dim + action_dim];
        q_sizes.extend(&cfg.hidden);
        q_sizes.push(1);
        let actor = Mlp::new(&actor_sizes, Activation::Tanh, Activation::Identity, rng);
        let q1 = Mlp::new(&q_sizes, Activation::Tanh, Activation::Identity, rng);
        let q2 = Mlp::new(&q_sizes, Activation::Tanh, Activation::Identity, rng);
        Ok(Self {
            actor_opt: Adam::for_net(&actor, cfg.actor_lr),
            q1_opt: Adam::for_net(&q1, cfg.critic_lr),
            q2_opt: Adam::for_net(&q2, cfg.critic_lr),
            temperature_opt: Adam::new(1, cfg.temperature_lr),
            log_temperature: cfg.initial_temperature.ln(),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            actor,
            q1,
            q2,
            state_dim,
            action_dim,
            action_scale,
            cfg,
            updates: 0,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn set_temperature(&mut self, temperature: f64) {
        self.log_temperature = temperature.ln();
    }

    pub fn target_entropy(&self) -> f64 {
        self.cfg.target_entropy.unwrap_or(-(self.action_dim as f64))
    }

    pub fn action_scale(&self) -> f64 {
        self.action_scale
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn actor_mut(&mut self) -> &mut Mlp {
        &mut self.actor
    }

    pub fn critics(&self) -> [&Mlp; 2] {
        [&self.q1, &self.q2]
    }

    pub fn critics_mut(&mut self) -> [&mut Mlp; 2] {
        [&mut self.q1, &mut self.q2]
    }

    pub fn targets(&self) -> [&Mlp; 2] {
        [&self.q1_target, &self.q2_target]
    }

    /// Completed critic updates.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    fn noise(&self, rows: usize, rng: &mut MemrRng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, self.action_dim), || rng.sample(StandardNormal))
    }

    /// Stochastic squashed sample, or the squashed mean when deterministic.
    pub fn act(&self, state: &[f64], deterministic: bool, rng: &mut MemrRng) -> Result<Vec<f64>> {
        check_dim("actor state", self.state_dim, state.len())?;
        let states = ArrayView2::from_shape((1, state.len()), state).expect("one row");
        Ok(self.act_batch(states, deterministic, rng)?.row(0).to_vec())
    }

    pub fn act_batch(&self, states: ArrayView2<f64>, deterministic: bool, rng: &mut MemrRng) -> Result<Array2<f64>> {
        if deterministic {
            let out = self.actor.predict(states)?;
            return Ok(out.slice(s![.., ..self.action_dim]).mapv(|m| self.action_scale * m.tanh()));
        }
        let noise = self.noise(states.nrows(), rng);
        Ok(actor_sample(&self.actor, states, &noise, self.action_scale)?.0.actions)
    }

    /// Soft Bellman targets `r + gamma (min target Q(s', a') - temperature log pi(a'|s'))`.
    pub fn targets_for(&self, batch: &Batch, rng: &mut MemrRng) -> Result<Array1<f64>> {
        let noise = self.noise(batch.len(), rng);
        let (next, _) = actor_sample(&self.actor, batch.next_states.view(), &noise, self.action_scale)?;
        let input = concat(batch.next_states.view(), next.actions.view());
        let t1 = self.q1_target.predict(input.view())?;
        let t2 = self.q2_target.predict(input.view())?;
        let alpha = self.temperature();
        let y = Array1::from_shape_fn(batch.len(), |i| {
            let v = t1[[i, 0]].min(t2[[i, 0]]) - alpha * next.log_probs[i];
            batch.rewards[i] + self.cfg.gamma * v
        });
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(MemrError::Numerical(format!(
                "critic target {} is not finite (reward {}, log pi {}, temperature {alpha})",
                y[i], batch.rewards[i], next.log_probs[i]
            )));
        }
        Ok(y)
    }

    /// One weighted gradient step per critic. Returns the mean of the two
    /// critic losses.
    pub fn q_update(&mut self, batch: &Batch, rng: &mut MemrRng) -> Result<CriticStats> {
        if batch.is_empty() {
            return usage("critic batch is empty");
        }
        if batch.weights.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return usage("importance weights must lie in (0, 1]");
        }
        let y = self.targets_for(batch, rng)?;
        let (l1, g1) = critic_loss_and_grad(&self.q1, batch.states.view(), batch.actions.view(), &y, &batch.weights)?;
        let (l2, g2) = critic_loss_and_grad(&self.q2, batch.states.view(), batch.actions.view(), &y, &batch.weights)?;
        self.q1_opt.step_net(&mut self.q1, &g1);
        self.q2_opt.step_net(&mut self.q2, &g2);
        self.updates += 1;
        Ok(CriticStats {
            loss: 0.5 * (l1 + l2),
            grad_norm: 0.5 * (g1.norm() + g2.norm()),
        })
    }

    pub fn policy_update(&mut self, states: ArrayView2<f64>, rng: &mut MemrRng) -> Result<ActorStats> {
        let noise = self.noise(states.nrows(), rng);
        let (loss, grads, sample) = actor_loss_and_grad(
            &self.actor,
            &self.q1,
            &self.q2,
            states,
            &noise,
            self.temperature(),
            self.action_scale,
        )?;
        if !loss.is_finite() {
            return Err(MemrError::Numerical(format!("actor loss {loss} is not finite")));
        }
        self.actor_opt.step_net(&mut self.actor, &grads);
        Ok(ActorStats {
            loss,
            mean_log_prob: sample.log_probs.mean().unwrap_or(0.0),
        })
    }

    /// Gradient of `-log(temperature) (mean log pi + target entropy)` with
    /// respect to the log-temperature.
    pub fn temperature_gradient(&self, mean_log_prob: f64) -> f64 {
        -(mean_log_prob + self.target_entropy())
    }

    /// One step on the log-temperature given the batch mean of `log pi`.
    pub fn temperature_step(&mut self, mean_log_prob: f64) -> f64 {
        let g = self.temperature_gradient(mean_log_prob);
        self.temperature_opt
            .update(std::iter::once(&mut self.log_temperature), std::iter::once(&g));
        self.temperature()
    }

    /// Samples fresh actions for `states` and steps the temperature.
    pub fn temperature_update(&mut self, states: ArrayView2<f64>, rng: &mut MemrRng) -> Result<f64> {
        let noise = self.noise(states.nrows(), rng);
        let (sample, _) = actor_sample(&self.actor, states, &noise, self.action_scale)?;
        Ok(self.temperature_step(sample.log_probs.mean().unwrap_or(0.0)))
    }

    /// `target <- (1 - tau) target + tau online`.
    pub fn target_sync(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return usage(format!("tau must lie in (0, 1], got {tau}"));
        }
        self.q1_target.soft_update_from(&self.q1, tau);
        self.q2_target.soft_update_from(&self.q2, tau);
        Ok(())
    }

    pub fn write(&self, w: &mut Writer) {
        w.put_u64(self.state_dim as u64);
        w.put_u64(self.action_dim as u64);
        w.put_f64(self.action_scale);
        w.put_f64(self.log_temperature);
        w.put_u64(self.updates);
        for net in [&self.actor, &self.q1, &self.q2, &self.q1_target, &self.q2_target] {
            net.write_blob(w);
        }
        for opt in [&self.actor_opt, &self.q1_opt, &self.q2_opt, &self.temperature_opt] {
            opt.write(w);
        }
    }

    pub fn read(r: &mut Reader<'_>, cfg: SacConfig) -> Result<Self> {
        let state_dim = r.usize()?;
        let action_dim = r.usize()?;
        let action_scale = r.f64()?;
        let log_temperature = r.f64()?;
        let updates = r.u64()?;
        let actor = Mlp::read_blob(r)?;
        let q1 = Mlp::read_blob(r)?;
        let q2 = Mlp::read_blob(r)?;
        let q1_target = Mlp::read_blob(r)?;
        let q2_target = Mlp::read_blob(r)?;
        if actor.input_dim() != state_dim || actor.output_dim() != 2 * action_dim {
            return Err(r.error("actor shape does not match dimensions"));
        }
        for q in [&q1, &q2, &q1_target, &q2_target] {
            if q.input_dim() != state_dim + action_dim || q.output_dim() != 1 {
                return Err(r.error("critic shape does not match dimensions"));
            }
        }
        Ok(Self {
            actor_opt: Adam::read(r)?,
            q1_opt: Adam::read(r)?,
            q2_opt: Adam::read(r)?,
            temperature_opt: Adam::read(r)?,
            cfg,
            state_dim,
            action_dim,
            action_scale,
            actor,
            q1,
            q2,
            q1_target,
            q2_target,
            log_temperature,
            updates,
        })
    }
}

impl Policy for SacAgent {
    fn act(&self, state: &[f64], deterministic: bool, rng: &mut MemrRng) -> Result<Vec<f64>> {
        SacAgent::act(self, state, deterministic, rng)
    }
}
