//! Deterministic continuous-control tasks and Monte Carlo policy evaluation.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{check_dim, usage, MemrError, Result};
use crate::rng::{seeded, MemrRng};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Symmetric per-dimension action bound.
    pub action_limit: Vec<f64>,
    pub horizon: usize,
    /// Nominal magnitude of each observation coordinate, used to put
    /// state-action pairs on a common scale for entropy diagnostics.
    pub state_scale: Vec<f64>,
    /// Upper bound on `|reward|` over reachable states.
    pub reward_abs_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True only on the last step of the horizon.
    pub done: bool,
}

/// A deterministic environment. `step` is a pure function of its inputs;
/// `t` is the index of the step within the episode and only decides `done`.
pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn reset(&self, rng: &mut MemrRng) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], t: usize) -> Result<StepResult>;

    fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(&self.spec().action_limit)
            .map(|(a, l)| a.clamp(-l, *l))
            .collect()
    }
}

/// Builds an environment from its config name.
pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "pendulum" => Ok(Box::new(Pendulum::default())),
        "pointmass" => Ok(Box::new(PointMass::default())),
        other => Err(MemrError::Config(format!(
            "unknown environment `{other}` (expected `pendulum` or `pointmass`)"
        ))),
    }
}

/// Maps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut x = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}

fn check_finite(state: &[f64]) -> Result<()> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(MemrError::Numerical(format!("non-finite state {state:?}")));
    }
    Ok(())
}

/// Torque-limited pendulum swing-up. Angle zero is upright. Observations are
/// `(cos theta, sin theta, theta_dot)`.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub max_speed: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        let max_speed = 8.0;
        let max_torque = 2.0;
        Self {
            spec: EnvSpec {
                name: "pendulum".into(),
                state_dim: 3,
                action_dim: 1,
                action_limit: vec![max_torque],
                horizon: 200,
                state_scale: vec![1.0, 1.0, max_speed],
                reward_abs_max: PI * PI + 0.1 * max_speed * max_speed + 0.001 * max_torque * max_torque,
            },
            dt: 0.05,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            max_speed,
        }
    }
}

impl Pendulum {
    pub fn angular_acceleration(&self, theta: f64, torque: f64) -> f64 {
        3.0 * self.gravity / (2.0 * self.length) * theta.sin()
            + 3.0 * torque / (self.mass * self.length * self.length)
    }

    /// One Euler step of `(theta, theta_dot)` with step size `dt`. The
    /// velocity is updated first and the angle advanced with the new
    /// velocity; velocity is clipped to `max_speed`.
    pub fn integrate(&self, theta: f64, theta_dot: f64, torque: f64, dt: f64) -> (f64, f64) {
        let new_dot = (theta_dot + self.angular_acceleration(theta, torque) * dt)
            .clamp(-self.max_speed, self.max_speed);
        (theta + new_dot * dt, new_dot)
    }

    /// Mechanical energy per unit inertia for the torque-free system:
    /// `theta_dot^2 / 2 + (3g / 2l) cos theta`.
    pub fn energy(&self, theta: f64, theta_dot: f64) -> f64 {
        0.5 * theta_dot * theta_dot + 3.0 * self.gravity / (2.0 * self.length) * theta.cos()
    }

    pub fn observe(theta: f64, theta_dot: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin(), theta_dot]
    }

    pub fn reward(theta: f64, theta_dot: f64, torque: f64) -> f64 {
        let th = wrap_angle(theta);
        -(th * th + 0.1 * theta_dot * theta_dot + 0.001 * torque * torque)
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut MemrRng) -> Vec<f64> {
        let theta = rng.random_range(-PI..PI);
        let theta_dot = rng.random_range(-1.0..1.0);
        Self::observe(theta, theta_dot)
    }

    fn step(&self, state: &[f64], action: &[f64], t: usize) -> Result<StepResult> {
        check_dim("pendulum state", 3, state.len())?;
        check_dim("pendulum action", 1, action.len())?;
        check_finite(state)?;
        let torque = self.clip_action(action)[0];
        let theta = state[1].atan2(state[0]);
        let theta_dot = state[2];
        let reward = Self::reward(theta, theta_dot, torque);
        let (theta, theta_dot) = self.integrate(theta, theta_dot, torque, self.dt);
        let next_state = Self::observe(theta, theta_dot);
        check_finite(&next_state)?;
        Ok(StepResult {
            next_state,
            reward,
            done: t + 1 >= self.spec.horizon,
        })
    }
}

/// 2-D double integrator driven toward the origin. State `(px, py, vx, vy)`.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    pub dt: f64,
    pub goal: [f64; 2],
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                name: "pointmass".into(),
                state_dim: 4,
                action_dim: 2,
                action_limit: vec![1.0, 1.0],
                horizon: 200,
                state_scale: vec![1.0, 1.0, 1.0, 1.0],
                // Loose: positions stay within a few units over a horizon.
                reward_abs_max: 100.0,
            },
            dt: 0.05,
            goal: [0.0, 0.0],
        }
    }
}

impl Environment for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Position uniform in the box `[-1, 1]^2`, velocity zero.
    fn reset(&self, rng: &mut MemrRng) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0, 0.0]
    }

    fn step(&self, state: &[f64], action: &[f64], t: usize) -> Result<StepResult> {
        check_dim("pointmass state", 4, state.len())?;
        check_dim("pointmass action", 2, action.len())?;
        check_finite(state)?;
        let a = self.clip_action(action);
        let dx = state[0] - self.goal[0];
        let dy = state[1] - self.goal[1];
        let reward = -(dx * dx + dy * dy + 0.01 * (a[0] * a[0] + a[1] * a[1]));
        let vx = state[2] + a[0] * self.dt;
        let vy = state[3] + a[1] * self.dt;
        let next_state = vec![state[0] + vx * self.dt, state[1] + vy * self.dt, vx, vy];
        check_finite(&next_state)?;
        Ok(StepResult {
            next_state,
            reward,
            done: t + 1 >= self.spec.horizon,
        })
    }
}

/// Anything that maps states to actions.
pub trait Policy {
    fn act(&self, state: &[f64], deterministic: bool, rng: &mut MemrRng) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    /// Monte Carlo estimate of the discounted objective, truncated at the
    /// horizon.
    pub mean_discounted: f64,
    /// `gamma^H r_max / (1 - gamma)`: bound on the truncated discounted tail.
    pub tail_bound: f64,
}

/// Runs `episodes` full-horizon episodes with the deterministic policy.
pub fn evaluate_policy(
    env: &dyn Environment,
    policy: &dyn Policy,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return usage("evaluate_policy needs at least one episode");
    }
    let mut rng = seeded(seed);
    let horizon = env.spec().horizon;
    let (mut total, mut total_disc) = (0.0, 0.0);
    for _ in 0..episodes {
        let mut s = env.reset(&mut rng);
        let mut discount = 1.0;
        for t in 0..horizon {
            let a = policy.act(&s, true, &mut rng)?;
            let step = env.step(&s, &a, t)?;
            total += step.reward;
            total_disc += discount * step.reward;
            discount *= gamma;
            s = step.next_state;
            if step.done {
                break;
            }
        }
    }
    let n = episodes as f64;
    let tail_bound = if gamma < 1.0 {
        gamma.powi(horizon as i32) * env.spec().reward_abs_max / (1.0 - gamma)
    } else {
        f64::INFINITY
    };
    Ok(EvalResult {
        mean_return: total / n,
        mean_discounted: total_disc / n,
        tail_bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    struct ConstantEnv(EnvSpec);

    impl Environment for ConstantEnv {
        fn spec(&self) -> &EnvSpec {
            &self.0
        }
        fn reset(&self, _rng: &mut MemrRng) -> Vec<f64> {
            vec![0.0]
        }
        fn step(&self, s: &[f64], _a: &[f64], t: usize) -> Result<StepResult> {
            Ok(StepResult {
                next_state: s.to_vec(),
                reward: 1.0,
                done: t + 1 >= self.0.horizon,
            })
        }
    }

    struct Zero;
    impl Policy for Zero {
        fn act(&self, _s: &[f64], _d: bool, _rng: &mut MemrRng) -> Result<Vec<f64>> {
            Ok(vec![0.0])
        }
    }

    fn constant_env() -> ConstantEnv {
        ConstantEnv(EnvSpec {
            name: "constant".into(),
            state_dim: 1,
            action_dim: 1,
            action_limit: vec![1.0],
            horizon: 200,
            state_scale: vec![1.0],
            reward_abs_max: 1.0,
        })
    }

    #[test]
    fn pendulum_upright_equilibrium() {
        let p = Pendulum::default();
        let r = p.step(&[1.0, 0.0, 0.0], &[0.0], 0).unwrap();
        assert_eq!(r.next_state, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
    }

    #[test]
    fn pendulum_hanging_reward() {
        let p = Pendulum::default();
        let r = p.step(&Pendulum::observe(PI, 0.0), &[0.0], 0).unwrap();
        assert_abs_diff_eq!(r.reward, -PI * PI, epsilon = 1e-9);
        assert_abs_diff_eq!(r.reward, -9.8696, epsilon = 1e-4);
    }

    #[test]
    fn pendulum_done_at_horizon_and_clips() {
        let p = Pendulum::default();
        assert!(p.step(&[1.0, 0.0, 0.0], &[0.0], 199).unwrap().done);
        let a = p.step(&[1.0, 0.0, 0.0], &[50.0], 0).unwrap();
        let b = p.step(&[1.0, 0.0, 0.0], &[2.0], 0).unwrap();
        assert_eq!(a.next_state, b.next_state);
        assert!(p.step(&[f64::NAN, 0.0, 0.0], &[0.0], 0).is_err());
    }

    #[test]
    fn pendulum_reset_distribution() {
        let p = Pendulum::default();
        let mut rng = seeded(5);
        let n = 10_000;
        let (mut th_sum, mut th_sq, mut dot_sum, mut dot_max) = (0.0, 0.0, 0.0, 0.0f64);
        for _ in 0..n {
            let s = p.reset(&mut rng);
            let th = s[1].atan2(s[0]);
            th_sum += th;
            th_sq += th * th;
            dot_sum += s[2];
            dot_max = dot_max.max(s[2].abs());
        }
        let n = n as f64;
        // Uniform[-pi, pi]: mean 0, variance pi^2/3; uniform[-1, 1]: mean 0.
        assert!((th_sum / n).abs() < 0.06);
        assert!((th_sq / n - PI * PI / 3.0).abs() < 0.1);
        assert!((dot_sum / n).abs() < 0.02);
        assert!(dot_max <= 1.0);
        assert_eq!(p.reset(&mut seeded(9)), p.reset(&mut seeded(9)));
    }

    #[test]
    fn pointmass_reset_and_fixed_point() {
        let pm = PointMass::default();
        let mut rng = seeded(6);
        for _ in 0..1000 {
            let s = pm.reset(&mut rng);
            assert!(s[0].abs() <= 1.0 && s[1].abs() <= 1.0);
            assert_eq!(&s[2..], &[0.0, 0.0]);
        }
        let r = pm.step(&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0], 3).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.next_state, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dynamics_are_pure() {
        let p = Pendulum::default();
        let mut rng = seeded(7);
        for _ in 0..10_000 {
            let s = p.reset(&mut rng);
            let s = vec![s[0], s[1], rng.random_range(-8.0..8.0)];
            let a = [rng.random_range(-2.0..2.0)];
            assert_eq!(p.step(&s, &a, 0).unwrap(), p.step(&s, &a, 0).unwrap());
        }
    }

    #[test]
    fn pendulum_rewards_bounded() {
        let p = Pendulum::default();
        let lo = -(PI * PI + 0.1 * 64.0 + 0.001 * 4.0);
        let mut rng = seeded(8);
        let mut s = p.reset(&mut rng);
        for t in 0..20_000 {
            let a = [rng.random_range(-3.0..3.0)];
            let r = p.step(&s, &a, t % 200).unwrap();
            assert!(r.reward <= 0.0 && r.reward >= lo, "reward {}", r.reward);
            s = r.next_state;
        }
    }

    #[test]
    fn euler_energy_error_is_second_order() {
        let p = Pendulum::default();
        let mut rng = seeded(10);
        for _ in 0..1000 {
            let th = rng.random_range(-PI..PI);
            let dot = rng.random_range(-2.0..2.0);
            let e0 = p.energy(th, dot);
            let (th1, dot1) = p.integrate(th, dot, 0.0, p.dt);
            let de = (p.energy(th1, dot1) - e0).abs();
            // Reference: ten steps of dt/10.
            let (mut rt, mut rd) = (th, dot);
            for _ in 0..10 {
                (rt, rd) = p.integrate(rt, rd, 0.0, p.dt / 10.0);
            }
            let de_ref = (p.energy(rt, rd) - e0).abs();
            // Leading local error of the scheme: k^2 sin^2/2 + k cos dot^2/2, k = 3g/2l.
            let k = 1.5 * p.gravity / p.length;
            let bound = (0.6 * k * k + 0.6 * k * dot * dot + 1.0) * p.dt * p.dt;
            assert!(de <= bound, "energy change {de} exceeds {bound}");
            assert!(de_ref <= bound / 10.0 + 1e-12);
            // States agree with the refined integration to O(dt^2).
            assert!((th1 - rt).abs() <= 10.0 * p.dt * p.dt);
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn evaluation_geometric_series() {
        let env = constant_env();
        let r = evaluate_policy(&env, &Zero, 3, 0.99, 0).unwrap();
        assert_abs_diff_eq!(r.mean_return, 200.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.mean_discounted, (1.0 - 0.99f64.powi(200)) / 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(r.mean_discounted, 86.602, epsilon = 1e-3);
        let r0 = evaluate_policy(&env, &Zero, 2, 0.0, 0).unwrap();
        assert_eq!(r0.mean_discounted, 1.0);
        assert!(evaluate_policy(&env, &Zero, 0, 0.9, 0).is_err());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let p = Pendulum::default();
        let a = evaluate_policy(&p, &Zero, 4, 0.99, 3).unwrap();
        let b = evaluate_policy(&p, &Zero, 4, 0.99, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_env_name() {
        assert!(make_env("pendulum").is_ok());
        assert!(make_env("pointmass").is_ok());
        assert!(matches!(make_env("cheetah"), Err(MemrError::Config(_))));
    }
}
