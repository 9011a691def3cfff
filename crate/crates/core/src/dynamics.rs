//! Probabilistic ensemble dynamics model.
//!
//! Each member maps a normalized `state ++ action` to a Gaussian over the
//! normalized target `[next_state - state, reward]`. Members are trained by
//! maximum likelihood on bootstrap resamples of the environment dataset and
//! are only ever queried one step ahead from real states.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{check_dim, usage, MemrError, Result};
use crate::net::{gaussian_nll_batch, soft_bound, soft_bound_inverse, Activation, Adam, Grads, Mlp};
use crate::replay::EnvReplayBuffer;
use crate::rng::MemrRng;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 2.0;
pub const NORMALIZER_STD_FLOOR: f64 = 1e-6;

/// Output of the log-variance head before bounding is initialized so the
/// bounded value starts here.
const LOG_VAR_INIT: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig {
    pub ensemble_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    /// Hard cap on epochs per training call.
    pub max_epochs: usize,
    /// Epochs without holdout improvement before stopping.
    pub patience: usize,
    pub min_samples: usize,
    /// Continue from current parameters on retraining instead of
    /// reinitializing.
    pub warm_start: bool,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            lr: 1e-3,
            batch_size: 64,
            holdout_fraction: 0.1,
            max_epochs: 5,
            patience: 5,
            min_samples: 250,
            warm_start: true,
        }
    }
}

impl DynamicsConfig {
    pub fn paper_scale() -> Self {
        Self {
            hidden: vec![200, 200, 200, 200],
            batch_size: 256,
            max_epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(MemrError::Config("dynamics counts must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(MemrError::Config("holdout_fraction must be in (0, 1)".into()));
        }
        if self.min_samples < 2 {
            return Err(MemrError::Config("dynamics min_samples must be at least 2".into()));
        }
        Ok(())
    }
}

/// Per-column affine standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(data: ArrayView2<f64>) -> Self {
        let n = data.nrows().max(1) as f64;
        let mean: Vec<f64> = data.sum_axis(Axis(0)).iter().map(|s| s / n).collect();
        let std = data
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(col, m)| {
                let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
                var.sqrt().max(NORMALIZER_STD_FLOOR)
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, data: &mut Array2<f64>) {
        for mut row in data.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn denormalize(&self, data: &mut Array2<f64>) {
        for mut row in data.rows_mut() {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
    }

    fn write(&self, w: &mut Writer) {
        w.put_f64s(&self.mean);
        w.put_f64s(&self.std);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        let mean = r.f64s()?;
        let std = r.f64s()?;
        if mean.len() != std.len() {
            return Err(r.error("normalizer mean/std length mismatch"));
        }
        Ok(Self { mean, std })
    }
}

/// Holdout diagnostics from one training call.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample NLL on the holdout split (normalized target space).
    pub holdout_nll: Vec<f64>,
    /// Mean squared error of the predicted mean on the holdout split, in
    /// original units, averaged over target dimensions.
    pub holdout_mse: Vec<f64>,
    pub epochs: usize,
}

/// Generalization-error estimate: mean holdout MSE across members.
pub fn validation_error(report: &TrainReport) -> f64 {
    if report.holdout_mse.is_empty() {
        return 0.0;
    }
    report.holdout_mse.iter().sum::<f64>() / report.holdout_mse.len() as f64
}

fn bound_log_var(raw: f64) -> (f64, f64) {
    soft_bound(raw, LOG_VAR_MIN, LOG_VAR_MAX)
}

/// Splits a member's raw output into the predicted mean and the bounded
/// log-variance.
pub fn split_output(out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let k = out.ncols() / 2;
    let mean = out.slice(s![.., ..k]).to_owned();
    let log_var = out.slice(s![.., k..]).mapv(|r| bound_log_var(r).0);
    (mean, log_var)
}

/// Mean per-sample Gaussian NLL of `net` on `(inputs, targets)` and its
/// parameter gradient. Inputs and targets are already normalized.
pub fn nll_loss_and_grad(net: &Mlp, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Grads)> {
    let (out, tape) = net.forward(inputs)?;
    let k = targets.ncols();
    check_dim("dynamics head", 2 * k, out.ncols())?;
    let raw = out.slice(s![.., k..]);
    let mut log_var = Array2::zeros(raw.raw_dim());
    let mut d_bound = Array2::zeros(raw.raw_dim());
    ndarray::Zip::from(&mut log_var)
        .and(&mut d_bound)
        .and(raw)
        .for_each(|lv, d, &r| (*lv, *d) = bound_log_var(r));
    let (loss, d_mean, d_lv) = gaussian_nll_batch(out.slice(s![.., ..k]), log_var.view(), targets)?;
    let n = inputs.nrows() as f64;
    let mut d_out = Array2::zeros(out.raw_dim());
    d_out.slice_mut(s![.., ..k]).assign(&(d_mean / n));
    d_out.slice_mut(s![.., k..]).assign(&(d_lv * d_bound / n));
    let mut grads = net.zero_grads();
    net.backward(tape, d_out.view(), &mut grads)?;
    Ok((loss / n, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleDynamics {
    state_dim: usize,
    action_dim: usize,
    cfg: DynamicsConfig,
    members: Vec<Mlp>,
    optimizers: Vec<Adam>,
    input_norm: Normalizer,
    output_norm: Normalizer,
    trained: bool,
}

impl EnsembleDynamics {
    pub fn new(state_dim: usize, action_dim: usize, cfg: DynamicsConfig, rng: &mut MemrRng) -> Result<Self> {
        cfg.validate()?;
        let out_dim = state_dim + 1;
        let mut model = Self {
            state_dim,
            action_dim,
            members: Vec::new(),
            optimizers: Vec::new(),
            input_norm: Normalizer::identity(state_dim + action_dim),
            output_norm: Normalizer::identity(out_dim),
            trained: false,
            cfg,
        };
        model.init_members(rng);
        Ok(model)
    }

    fn init_members(&mut self, rng: &mut MemrRng) {
        let out_dim = self.state_dim + 1;
        let mut sizes = vec![self.state_dim + self.action_dim];
        sizes.extend(&self.cfg.hidden);
        sizes.push(2 * out_dim);
        self.members = (0..self.cfg.ensemble_size)
            .map(|_| {
                let mut net = Mlp::new(&sizes, self.cfg.activation, Activation::Identity, rng);
                let last = net.layers_mut().last_mut().unwrap();
                let raw = soft_bound_inverse(LOG_VAR_INIT, LOG_VAR_MIN, LOG_VAR_MAX);
                for j in out_dim..2 * out_dim {
                    last.weight.column_mut(j).fill(0.0);
                    last.bias[j] = raw;
                }
                net
            })
            .collect();
        self.optimizers = self.members.iter().map(|m| Adam::for_net(m, self.cfg.lr)).collect();
    }

    pub fn config(&self) -> &DynamicsConfig {
        &self.cfg
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn input_normalizer(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn output_normalizer(&self) -> &Normalizer {
        &self.output_norm
    }

    fn dataset(&self, buf: &EnvReplayBuffer) -> Result<(Array2<f64>, Array2<f64>)> {
        let data = buf.transitions();
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut x = Array2::zeros((data.len(), sd + ad));
        let mut y = Array2::zeros((data.len(), sd + 1));
        for (i, t) in data.iter().enumerate() {
            check_dim("transition state", sd, t.state.len())?;
            check_dim("transition action", ad, t.action.len())?;
            check_dim("transition next state", sd, t.next_state.len())?;
            for d in 0..sd {
                x[[i, d]] = t.state[d];
                y[[i, d]] = t.next_state[d] - t.state[d];
            }
            for d in 0..ad {
                x[[i, sd + d]] = t.action[d];
            }
            y[[i, sd]] = t.reward;
        }
        Ok((x, y))
    }

    /// Fits every member on its own bootstrap resample of the buffer with
    /// early stopping on a shared holdout split. Each member ends at its best
    /// holdout snapshot.
    pub fn train(&mut self, buf: &EnvReplayBuffer, rng: &mut MemrRng) -> Result<TrainReport> {
        if buf.len() < self.cfg.min_samples {
            return Err(MemrError::Precondition(format!(
                "dynamics training needs {} transitions, buffer has {}",
                self.cfg.min_samples,
                buf.len()
            )));
        }
        let (mut x, mut y) = self.dataset(buf)?;
        self.input_norm = Normalizer::fit(x.view());
        self.output_norm = Normalizer::fit(y.view());
        self.input_norm.normalize(&mut x);
        self.output_norm.normalize(&mut y);
        if self.trained && !self.cfg.warm_start {
            self.init_members(rng);
        }

        let n = x.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_hold = ((n as f64 * self.cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
        let (hold_idx, train_idx) = order.split_at(n_hold);
        let hold_x = x.select(Axis(0), hold_idx);
        let hold_y = y.select(Axis(0), hold_idx);

        let e = self.members.len();
        let mut boots: Vec<Vec<usize>> = (0..e)
            .map(|_| (0..train_idx.len()).map(|_| train_idx[rng.random_range(0..train_idx.len())]).collect())
            .collect();
        let mut best: Vec<f64> = self
            .members
            .iter()
            .map(|m| holdout_nll(m, &hold_x, &hold_y))
            .collect::<Result<_>>()?;
        let mut snapshots = self.members.clone();

        let mut stale = 0;
        let mut epochs = 0;
        while epochs < self.cfg.max_epochs && stale < self.cfg.patience {
            epochs += 1;
            let mut improved = false;
            for (m, boot) in boots.iter_mut().enumerate() {
                boot.shuffle(rng);
                for chunk in boot.chunks(self.cfg.batch_size) {
                    let bx = x.select(Axis(0), chunk);
                    let by = y.select(Axis(0), chunk);
                    let (_, grads) = nll_loss_and_grad(&self.members[m], bx.view(), by.view())?;
                    self.optimizers[m].step_net(&mut self.members[m], &grads);
                }
                let nll = holdout_nll(&self.members[m], &hold_x, &hold_y)?;
                // Improvement must beat the best by a relative margin.
                if nll < best[m] - 1e-4 * best[m].abs().max(1e-3) {
                    best[m] = nll;
                    snapshots[m] = self.members[m].clone();
                    improved = true;
                }
            }
            stale = if improved { 0 } else { stale + 1 };
        }
        for (m, snap) in snapshots.into_iter().enumerate() {
            self.members[m] = snap;
        }
        self.trained = true;

        let mut holdout_mse = Vec::with_capacity(e);
        for member in &self.members {
            let (mut mean, _) = split_output(&member.predict(hold_x.view())?);
            self.output_norm.denormalize(&mut mean);
            let mut truth = hold_y.clone();
            self.output_norm.denormalize(&mut truth);
            holdout_mse.push((&mean - &truth).mapv(|d| d * d).mean().unwrap_or(0.0));
        }
        let report = TrainReport {
            holdout_nll: best,
            holdout_mse,
            epochs,
        };
        if report.holdout_nll.iter().chain(&report.holdout_mse).any(|v| !v.is_finite()) {
            return Err(MemrError::Numerical("non-finite dynamics holdout loss".into()));
        }
        Ok(report)
    }

    /// Holdout-style evaluation of the current members on arbitrary data.
    pub fn evaluate(&self, buf: &EnvReplayBuffer) -> Result<TrainReport> {
        let (mut x, mut y) = self.dataset(buf)?;
        self.input_norm.normalize(&mut x);
        let mut nll = Vec::new();
        let mut mse = Vec::new();
        let mut yn = y.clone();
        self.output_norm.normalize(&mut yn);
        for m in &self.members {
            nll.push(holdout_nll(m, &x, &yn)?);
            let (mut mean, _) = split_output(&m.predict(x.view())?);
            self.output_norm.denormalize(&mut mean);
            mse.push((&mean - &y).mapv(|d| d * d).mean().unwrap_or(0.0));
        }
        y.fill(0.0);
        Ok(TrainReport {
            holdout_nll: nll,
            holdout_mse: mse,
            epochs: 0,
        })
    }

    /// Predicted mean and standard deviation of `[delta_state, reward]` for
    /// one member, in original units.
    pub fn predict_member(&self, member: usize, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.input_row(&[state], &[action])?;
        let (mean, std) = self.member_moments(member, &x)?;
        Ok((mean.row(0).to_vec(), std.row(0).to_vec()))
    }

    fn input_row(&self, states: &[&[f64]], actions: &[&[f64]]) -> Result<Array2<f64>> {
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut x = Array2::zeros((states.len(), sd + ad));
        for (i, (s, a)) in states.iter().zip(actions).enumerate() {
            check_dim("rollout state", sd, s.len())?;
            check_dim("rollout action", ad, a.len())?;
            x.slice_mut(s![i, ..sd]).assign(&ndarray::ArrayView1::from(*s));
            x.slice_mut(s![i, sd..]).assign(&ndarray::ArrayView1::from(*a));
        }
        self.input_norm.normalize(&mut x);
        Ok(x)
    }

    fn member_moments(&self, member: usize, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (mut mean, log_var) = split_output(&self.members[member].predict(x.view())?);
        self.output_norm.denormalize(&mut mean);
        let mut std = log_var.mapv(|lv| (0.5 * lv).exp());
        for mut row in std.rows_mut() {
            for (v, s) in row.iter_mut().zip(&self.output_norm.std) {
                *v *= s;
            }
        }
        Ok((mean, std))
    }

    /// One-step model rollouts. For each pair a member is picked uniformly
    /// and `[delta_state, reward]` sampled from its Gaussian; returns
    /// `(state + delta_state, reward)`.
    pub fn rollout_batch(
        &self,
        states: &[&[f64]],
        actions: &[&[f64]],
        rng: &mut MemrRng,
    ) -> Result<Vec<(Vec<f64>, f64)>> {
        if !self.trained {
            return usage("dynamics model has not been trained");
        }
        if states.len() != actions.len() {
            return usage("rollout states and actions differ in count");
        }
        let e = self.members.len();
        let picks: Vec<usize> = (0..states.len())
            .map(|_| if e == 1 { 0 } else { rng.random_range(0..e) })
            .collect();
        let x = self.input_row(states, actions)?;
        let mut moments: Vec<Option<(Array2<f64>, Array2<f64>)>> = vec![None; e];
        for &m in &picks {
            if moments[m].is_none() {
                moments[m] = Some(self.member_moments(m, &x)?);
            }
        }
        let sd = self.state_dim;
        let mut out = Vec::with_capacity(states.len());
        for (i, &m) in picks.iter().enumerate() {
            let (mean, std) = moments[m].as_ref().unwrap();
            let sample: Vec<f64> = (0..=sd)
                .map(|d| mean[[i, d]] + std[[i, d]] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let next: Vec<f64> = states[i].iter().zip(&sample[..sd]).map(|(s, d)| s + d).collect();
            if next.iter().any(|v| !v.is_finite()) || !sample[sd].is_finite() {
                return Err(MemrError::Numerical("non-finite model rollout".into()));
            }
            out.push((next, sample[sd]));
        }
        Ok(out)
    }

    pub fn rollout_one_step(&self, state: &[f64], action: &[f64], rng: &mut MemrRng) -> Result<(Vec<f64>, f64)> {
        Ok(self.rollout_batch(&[state], &[action], rng)?.pop().unwrap())
    }

    pub fn write(&self, w: &mut Writer) {
        w.put_u64(self.state_dim as u64);
        w.put_u64(self.action_dim as u64);
        w.put_bool(self.trained);
        self.input_norm.write(w);
        self.output_norm.write(w);
        w.put_u64(self.members.len() as u64);
        for (m, opt) in self.members.iter().zip(&self.optimizers) {
            m.write_blob(w);
            opt.write(w);
        }
    }

    pub fn read(r: &mut Reader<'_>, cfg: DynamicsConfig) -> Result<Self> {
        let state_dim = r.usize()?;
        let action_dim = r.usize()?;
        let trained = r.bool()?;
        let input_norm = Normalizer::read(r)?;
        let output_norm = Normalizer::read(r)?;
        let e = r.usize()?;
        if e != cfg.ensemble_size {
            return Err(r.error(format!("ensemble has {e} members, config says {}", cfg.ensemble_size)));
        }
        let mut members = Vec::with_capacity(e);
        let mut optimizers = Vec::with_capacity(e);
        for _ in 0..e {
            let net = Mlp::read_blob(r)?;
            if net.input_dim() != state_dim + action_dim || net.output_dim() != 2 * (state_dim + 1) {
                return Err(r.error("ensemble member shape does not match dimensions"));
            }
            members.push(net);
            optimizers.push(Adam::read(r)?);
        }
        Ok(Self {
            state_dim,
            action_dim,
            cfg,
            members,
            optimizers,
            input_norm,
            output_norm,
            trained,
        })
    }
}

fn holdout_nll(net: &Mlp, x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let out = net.predict(x.view())?;
    let (mean, log_var) = split_output(&out);
    let (loss, _, _) = gaussian_nll_batch(mean.view(), log_var.view(), y.view())?;
    Ok(loss / x.nrows() as f64)
}
