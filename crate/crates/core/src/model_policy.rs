//! The model-data policy: a state-conditional diagonal Gaussian fitted online
//! to the action distribution of freshly generated rollouts. It is never used
//! to act; its only job is to score how surprising a proposed action is at a
//! state, which becomes that state's sampling priority.

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{check_dim, usage, MemrError, Result};
use crate::gaussian::{DiagGaussian, PRIORITY_EPS, STD_FLOOR};
use crate::net::{gaussian_nll_batch, soft_bound, Activation, Adam, Grads, Mlp};
use crate::rng::MemrRng;

/// Upper bound on the emitted log standard deviation.
pub const LOG_STD_CEIL: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPolicyConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub minibatch: usize,
}

impl Default for ModelPolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 1e-3,
            minibatch: 128,
        }
    }
}

fn log_std_floor() -> f64 {
    STD_FLOOR.ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelDataPolicy {
    net: Mlp,
    opt: Adam,
    cfg: ModelPolicyConfig,
    action_dim: usize,
    fits: u64,
    grad_steps: u64,
}

/// Mean per-sample NLL of the conditional Gaussian and its parameter gradient.
pub fn policy_nll_and_grad(net: &Mlp, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<(f64, Grads)> {
    let ad = actions.ncols();
    let (out, tape) = net.forward(states)?;
    check_dim("model policy head", 2 * ad, out.ncols())?;
    let (mean, log_var, d_bound) = heads(&out, ad);
    let (loss, d_mean, d_lv) = gaussian_nll_batch(mean.view(), log_var.view(), actions)?;
    let n = states.nrows() as f64;
    let mut d_out = Array2::zeros(out.raw_dim());
    d_out.slice_mut(s![.., ..ad]).assign(&(d_mean / n));
    // log_var = 2 log_std.
    d_out.slice_mut(s![.., ad..]).assign(&(d_lv * d_bound * 2.0 / n));
    let mut grads = net.zero_grads();
    net.backward(tape, d_out.view(), &mut grads)?;
    Ok((loss / n, grads))
}

/// Splits raw output into mean, bounded log-variance and the derivative of
/// the bounded log-std with respect to its raw input.
fn heads(out: &Array2<f64>, ad: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mean = out.slice(s![.., ..ad]).to_owned();
    let raw = out.slice(s![.., ad..]);
    let mut log_var = Array2::zeros(raw.raw_dim());
    let mut d_bound = Array2::zeros(raw.raw_dim());
    ndarray::Zip::from(&mut log_var)
        .and(&mut d_bound)
        .and(raw)
        .for_each(|lv, d, &r| {
            let (ls, dl) = soft_bound(r, log_std_floor(), LOG_STD_CEIL);
            *lv = 2.0 * ls;
            *d = dl;
        });
    (mean, log_var, d_bound)
}

impl ModelDataPolicy {
    pub fn new(state_dim: usize, action_dim: usize, cfg: ModelPolicyConfig, rng: &mut MemrRng) -> Result<Self> {
        if cfg.minibatch == 0 || !(cfg.lr > 0.0) {
            return Err(MemrError::Config("model policy minibatch and lr must be positive".into()));
        }
        let mut sizes = vec![state_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(2 * action_dim);
        let net = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, rng);
        Ok(Self {
            opt: Adam::for_net(&net, cfg.lr),
            net,
            cfg,
            action_dim,
            fits: 0,
            grad_steps: 0,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// Number of completed `fit_online` calls.
    pub fn fits(&self) -> u64 {
        self.fits
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    /// Mean per-sample NLL of `actions` under the current conditionals.
    pub fn nll(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<f64> {
        Ok(policy_nll_and_grad(&self.net, states, actions)?.0)
    }

    /// `d_epochs` shuffled minibatch passes over this batch only. Returns the
    /// mean NLL on the batch after the last epoch.
    pub fn fit_online(
        &mut self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        d_epochs: usize,
        rng: &mut MemrRng,
    ) -> Result<f64> {
        let n = states.nrows();
        if n == 0 || actions.nrows() != n {
            return usage("fit_online needs a nonempty batch of matching states and actions");
        }
        if d_epochs == 0 {
            return usage("fit_online needs at least one epoch");
        }
        check_dim("fit_online action", self.action_dim, actions.ncols())?;
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..d_epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.cfg.minibatch) {
                let s = states.select(ndarray::Axis(0), chunk);
                let a = actions.select(ndarray::Axis(0), chunk);
                let (_, grads) = policy_nll_and_grad(&self.net, s.view(), a.view())?;
                self.opt.step_net(&mut self.net, &grads);
                self.grad_steps += 1;
            }
        }
        self.fits += 1;
        self.nll(states, actions)
    }

    /// Conditionals for a batch of states.
    pub fn conditionals(&self, states: ArrayView2<f64>) -> Result<Vec<DiagGaussian>> {
        let out = self.net.predict(states)?;
        let ad = self.action_dim;
        out.rows()
            .into_iter()
            .map(|row| {
                let mean = row.slice(s![..ad]).to_vec();
                let std = row
                    .slice(s![ad..])
                    .iter()
                    .map(|&r| soft_bound(r, log_std_floor(), LOG_STD_CEIL).0.exp().max(STD_FLOOR))
                    .collect();
                DiagGaussian::new(mean, std)
            })
            .collect()
    }

    pub fn conditional(&self, state: &[f64]) -> Result<DiagGaussian> {
        let x = ArrayView2::from_shape((1, state.len()), state).map_err(|e| MemrError::Usage(e.to_string()))?;
        Ok(self.conditionals(x)?.pop().unwrap())
    }

    pub fn priority_of(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        self.conditional(state)?.priority(action, PRIORITY_EPS)
    }

    /// Priorities for aligned rows of `states` and `actions`.
    pub fn priorities(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.conditionals(states)?
            .iter()
            .zip(actions.rows())
            .map(|(g, a)| g.priority(a.as_slice().unwrap_or(&a.to_vec()), PRIORITY_EPS))
            .collect()
    }

    pub fn write(&self, w: &mut Writer) {
        w.put_u64(self.action_dim as u64);
        w.put_u64(self.fits);
        w.put_u64(self.grad_steps);
        self.net.write_blob(w);
        self.opt.write(w);
    }

    pub fn read(r: &mut Reader<'_>, cfg: ModelPolicyConfig) -> Result<Self> {
        let action_dim = r.usize()?;
        let fits = r.u64()?;
        let grad_steps = r.u64()?;
        let net = Mlp::read_blob(r)?;
        if net.output_dim() != 2 * action_dim {
            return Err(r.error("model policy head does not match action dimension"));
        }
        let opt = Adam::read(r)?;
        Ok(Self {
            net,
            opt,
            cfg,
            action_dim,
            fits,
            grad_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_states(n: usize, d: usize, rng: &mut MemrRng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.random_range(-3.0..3.0))
    }

    #[test]
    fn fresh_std_within_bounds() {
        let mut rng = seeded(0);
        let p = ModelDataPolicy::new(3, 2, ModelPolicyConfig::default(), &mut rng).unwrap();
        let states = Array2::from_shape_simple_fn((10_000, 3), || rng.random_range(-50.0..50.0));
        for g in p.conditionals(states.view()).unwrap() {
            assert!(g.std().iter().all(|s| (STD_FLOOR..=LOG_STD_CEIL.exp()).contains(s)));
        }
    }

    #[test]
    fn conditional_is_deterministic() {
        let mut rng = seeded(1);
        let p = ModelDataPolicy::new(2, 1, ModelPolicyConfig::default(), &mut rng).unwrap();
        assert_eq!(p.conditional(&[0.3, 0.1]).unwrap(), p.conditional(&[0.3, 0.1]).unwrap());
    }

    #[test]
    fn constant_actions_drive_mean_and_shrink_std() {
        let mut rng = seeded(2);
        let mut p = ModelDataPolicy::new(2, 1, ModelPolicyConfig::default(), &mut rng).unwrap();
        let states = random_states(256, 2, &mut rng);
        let actions = Array2::from_elem((256, 1), 0.7);
        for _ in 0..1500 {
            p.fit_online(states.view(), actions.view(), 2, &mut rng).unwrap();
        }
        let g = p.conditional(&[0.5, -0.5]).unwrap();
        assert!((g.mean()[0] - 0.7).abs() <= 0.05, "{g:?}");
        assert!(g.std()[0] <= 10.0 * STD_FLOOR, "{g:?}");
    }

    #[test]
    fn gradient_step_count() {
        let mut rng = seeded(3);
        let mut p = ModelDataPolicy::new(2, 1, ModelPolicyConfig::default(), &mut rng).unwrap();
        let states = random_states(400, 2, &mut rng);
        let actions = random_states(400, 1, &mut rng);
        p.fit_online(states.view(), actions.view(), 2, &mut rng).unwrap();
        assert_eq!(p.grad_steps(), 2 * 4);
        assert_eq!(p.fits(), 1);
    }

    #[test]
    fn fitting_lowers_batch_nll_in_most_trials() {
        let mut improved = 0;
        for trial in 0..100 {
            let mut rng = seeded(100 + trial);
            let mut p = ModelDataPolicy::new(2, 1, ModelPolicyConfig::default(), &mut rng).unwrap();
            let states = random_states(200, 2, &mut rng);
            let actions = states.map_axis(ndarray::Axis(1), |r| 0.5 * r[0] - 0.2 * r[1]).insert_axis(ndarray::Axis(1));
            let before = p.nll(states.view(), actions.view()).unwrap();
            let after = p.fit_online(states.view(), actions.view(), 2, &mut rng).unwrap();
            if after <= before {
                improved += 1;
            }
        }
        assert!(improved >= 95, "{improved}");
    }

    #[test]
    fn priority_examples() {
        let mut rng = seeded(4);
        let p = ModelDataPolicy::new(2, 1, ModelPolicyConfig::default(), &mut rng).unwrap();
        let g = p.conditional(&[0.1, 0.2]).unwrap();
        assert_eq!(p.priority_of(&[0.1, 0.2], g.mean()).unwrap(), PRIORITY_EPS);
        let mut prev = 0.0;
        for k in 1..20 {
            let a = [g.mean()[0] + 0.1 * k as f64];
            let pr = p.priority_of(&[0.1, 0.2], &a).unwrap();
            assert!(pr > prev);
            prev = pr;
        }
        let unit = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
        assert_abs_diff_eq!(unit.priority(&[2.0], PRIORITY_EPS).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn priority_ranking_matches_log_density() {
        let mut rng = seeded(5);
        let p = ModelDataPolicy::new(2, 2, ModelPolicyConfig::default(), &mut rng).unwrap();
        let s = [0.4, -1.0];
        let g = p.conditional(&s).unwrap();
        let actions: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
        let mut by_priority: Vec<usize> = (0..50).collect();
        let mut by_density = by_priority.clone();
        by_priority.sort_by(|&i, &j| p.priority_of(&s, &actions[i]).unwrap().total_cmp(&p.priority_of(&s, &actions[j]).unwrap()));
        by_density.sort_by(|&i, &j| (-g.log_prob(&actions[i]).unwrap()).total_cmp(&-g.log_prob(&actions[j]).unwrap()));
        assert_eq!(by_priority, by_density);
    }

    #[test]
    fn batched_priorities_match_single() {
        let mut rng = seeded(6);
        let p = ModelDataPolicy::new(2, 1, ModelPolicyConfig::default(), &mut rng).unwrap();
        let states = random_states(10, 2, &mut rng);
        let actions = random_states(10, 1, &mut rng);
        let batch = p.priorities(states.view(), actions.view()).unwrap();
        for i in 0..10 {
            let single = p.priority_of(&states.row(i).to_vec(), &actions.row(i).to_vec()).unwrap();
            assert_eq!(batch[i], single);
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = seeded(7);
        let cfg = ModelPolicyConfig {
            hidden: vec![6, 6],
            ..ModelPolicyConfig::default()
        };
        let mut p = ModelDataPolicy::new(2, 2, cfg, &mut rng).unwrap();
        let states = random_states(5, 2, &mut rng);
        let actions = random_states(5, 2, &mut rng);
        let (_, grads) = policy_nll_and_grad(&p.net, states.view(), actions.view()).unwrap();
        let analytic = grads.flat();
        let base = p.net.params_flat();
        let h = 1e-5;
        let mut err = 0.0;
        for i in 0..base.len() {
            let mut x = base.clone();
            x[i] += h;
            p.net.set_params_flat(&x).unwrap();
            let up = p.nll(states.view(), actions.view()).unwrap();
            x[i] -= 2.0 * h;
            p.net.set_params_flat(&x).unwrap();
            let down = p.nll(states.view(), actions.view()).unwrap();
            err += ((up - down) / (2.0 * h) - analytic[i]).powi(2);
        }
        assert!(err.sqrt() / grads.norm() <= 1e-4);
    }

    #[test]
    fn write_read_roundtrip() {
        let mut rng = seeded(8);
        let mut p = ModelDataPolicy::new(2, 1, ModelPolicyConfig::default(), &mut rng).unwrap();
        let states = random_states(20, 2, &mut rng);
        let actions = random_states(20, 1, &mut rng);
        p.fit_online(states.view(), actions.view(), 1, &mut rng).unwrap();
        let mut w = Writer::new();
        p.write(&mut w);
        let bytes = w.into_bytes();
        let back = ModelDataPolicy::read(&mut Reader::new(&bytes, "model_policy"), ModelPolicyConfig::default()).unwrap();
        assert_eq!(back, p);
    }
}
