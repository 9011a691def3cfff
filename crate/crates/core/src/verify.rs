//! Brute-force oracle suites, runnable on demand.
//!
//! Each check compares a library routine with an independent, slower
//! computation of the same quantity and reports what it observed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dynamics::nll_loss_and_grad;
use crate::error::Result;
use crate::gaussian::{
    entropy_gain_approx, entropy_gain_exact, select_max_gain, Candidate, DiagGaussian, SampleSet1D, PRIORITY_EPS,
};
use crate::model_policy::policy_nll_and_grad;
use crate::net::{Activation, Grads, Mlp};
use crate::replay::{importance_weights, BetaSchedule, EnvReplayBuffer, EnvTransition, ModelSample, SegmentedModelBuffer, SumTree};
use crate::rng::{seeded, MemrRng};
use crate::sac::{actor_loss_and_grad, critic_loss_and_grad};

/// Outcome of one property check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub property: String,
    pub passed: bool,
    pub observed: String,
}

impl CheckResult {
    fn new(property: impl Into<String>, passed: bool, observed: impl Into<String>) -> Self {
        Self {
            property: property.into(),
            passed,
            observed: observed.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    pub lemma_ns: Vec<usize>,
    pub lemma_pairs: usize,
    pub theorem_trials: usize,
    pub gradient_configs: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            lemma_ns: vec![100, 1000, 10_000],
            lemma_pairs: 1000,
            theorem_trials: 100,
            gradient_configs: 100,
            seed: 0,
        }
    }
}

/// Largest `|exact - approx|` entropy gain over random sample sets of size
/// `n` and points within three standard deviations of the fitted mean.
pub fn lemma_max_gap(n: usize, pairs: usize, rng: &mut MemrRng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let mu0 = rng.random_range(-5.0..5.0);
        let sigma0 = rng.random_range(0.1..3.0);
        let dist = Normal::new(mu0, sigma0).expect("positive std");
        let samples = SampleSet1D::new((0..n).map(|_| dist.sample(rng)).collect())?;
        let mean = samples.mle_mean();
        let std = samples.mle_var().sqrt();
        let t = mean + rng.random_range(-3.0..=3.0) * std;
        let exact = entropy_gain_exact(&samples, t)?;
        let approx = entropy_gain_approx(n, mean, std, t);
        worst = worst.max((exact - approx).abs());
    }
    Ok(worst)
}

/// Aggregate of the ranking experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingOutcome {
    pub trials: usize,
    pub top1_agreements: usize,
    pub mean_spearman: f64,
}

/// Joint entropy `H(S) + sum_s p(s) H(A|s)` of a discrete-state dataset with
/// Gaussian (MLE) conditionals.
pub fn joint_entropy(actions_by_state: &[Vec<f64>]) -> f64 {
    let total: usize = actions_by_state.iter().map(Vec::len).sum();
    let total = total as f64;
    let mut h = 0.0;
    for acts in actions_by_state {
        let n = acts.len() as f64;
        let p = n / total;
        let mean = acts.iter().sum::<f64>() / n;
        let var = acts.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let h_cond = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * var).ln();
        h += -p * p.ln() + p * h_cond;
    }
    h
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

/// Synthetic ranking experiment: `states` discrete states with
/// `per_state` Gaussian actions each (equal counts, shared spread, distinct
/// means), one candidate action per state. Compares the priority argmax with
/// the argmax of the exact joint-entropy gain after an MLE refit.
pub fn theorem_ranking(trials: usize, states: usize, per_state: usize, rng: &mut MemrRng) -> Result<RankingOutcome> {
    let mut agree = 0;
    let mut rho_sum = 0.0;
    for _ in 0..trials {
        let sigma = rng.random_range(0.2..2.0);
        let data: Vec<Vec<f64>> = (0..states)
            .map(|_| {
                let mu = rng.random_range(-3.0..3.0);
                (0..per_state)
                    .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let base = joint_entropy(&data);
        let mut candidates = Vec::with_capacity(states);
        let mut exact_gain = Vec::with_capacity(states);
        for (s, acts) in data.iter().enumerate() {
            let n = acts.len() as f64;
            let mean = acts.iter().sum::<f64>() / n;
            let std = (acts.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
            let a = mean + std * rng.random_range(-3.0..3.0);
            let mut augmented = data.clone();
            augmented[s].push(a);
            exact_gain.push(joint_entropy(&augmented) - base);
            candidates.push(Candidate {
                state_id: s,
                action: vec![a],
                conditional: DiagGaussian::new(vec![mean], vec![std])?,
            });
        }
        let chosen = select_max_gain(&candidates, PRIORITY_EPS)?;
        let oracle = (0..states).max_by(|&i, &j| exact_gain[i].total_cmp(&exact_gain[j])).unwrap();
        if chosen == oracle {
            agree += 1;
        }
        let priorities: Vec<f64> = candidates
            .iter()
            .map(|c| c.conditional.priority(&c.action, PRIORITY_EPS))
            .collect::<Result<_>>()?;
        rho_sum += spearman(&priorities, &exact_gain);
    }
    Ok(RankingOutcome {
        trials,
        top1_agreements: agree,
        mean_spearman: rho_sum / trials.max(1) as f64,
    })
}

/// Largest gap between the priority and `-ln(sqrt(2 pi) sigma pdf(a))`
/// evaluated through the density, summed over dimensions.
pub fn priority_literal_gap(samples: usize, rng: &mut MemrRng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let d = rng.random_range(1..=6);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let std: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..3.0)).collect();
        let a: Vec<f64> = mean.iter().zip(&std).map(|(m, s)| m + s * rng.random_range(-4.0..4.0)).collect();
        let g = DiagGaussian::new(mean.clone(), std.clone())?;
        let literal: f64 = (0..d)
            .map(|k| {
                let z = (a[k] - mean[k]) / std[k];
                let pdf = (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * std[k]);
                -((2.0 * std::f64::consts::PI).sqrt() * std[k] * pdf).ln()
            })
            .sum();
        worst = worst.max((g.priority(&a, PRIORITY_EPS)? - literal.max(PRIORITY_EPS)).abs());
    }
    Ok(worst)
}

fn buffer_with(priorities: &[f64], alpha: f64) -> Result<EnvReplayBuffer> {
    let mut buf = EnvReplayBuffer::new(priorities.len(), alpha, PRIORITY_EPS)?;
    for &p in priorities {
        buf.add(EnvTransition {
            state: vec![0.0],
            action: vec![0.0],
            next_state: vec![0.0],
            reward: 0.0,
            done: false,
            priority: p,
        });
    }
    Ok(buf)
}

/// L1 distance between empirical sampling frequencies over `draws` draws
/// (in stratified batches of `batch`) and `p^alpha / sum p^alpha`.
pub fn sampling_l1(size: usize, draws: usize, batch: usize, alpha: f64, rng: &mut MemrRng) -> Result<f64> {
    let priorities: Vec<f64> = (0..size).map(|_| rng.random_range(0.01..10.0)).collect();
    let buf = buffer_with(&priorities, alpha)?;
    let mut counts = vec![0usize; size];
    let mut done = 0;
    while done < draws {
        let m = batch.min(draws - done);
        for s in buf.sample_states(m, 1.0, rng)? {
            counts[s.handle.slot] += 1;
        }
        done += m;
    }
    let z: f64 = priorities.iter().map(|p| p.powf(alpha)).sum();
    Ok(counts
        .iter()
        .zip(&priorities)
        .map(|(&c, p)| (c as f64 / draws as f64 - p.powf(alpha) / z).abs())
        .sum())
}

/// Number of random prefixes on which sum-tree descent disagrees with a
/// linear scan over the leaves.
pub fn descent_mismatches(prefixes: usize, rng: &mut MemrRng) -> usize {
    let mut mismatches = 0;
    for _ in 0..prefixes {
        let n = rng.random_range(1..=300);
        let leaves: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..5.0) })
            .collect();
        if leaves.iter().all(|v| *v == 0.0) {
            continue;
        }
        let tree = SumTree::rebuild(&leaves, n);
        let u = rng.random_range(0.0..tree.total());
        let mut acc = 0.0;
        let mut expect = leaves.iter().rposition(|v| *v > 0.0).unwrap();
        for (i, v) in leaves.iter().enumerate() {
            acc += v;
            if u < acc {
                expect = i;
                break;
            }
        }
        if tree.find(u) != expect {
            mismatches += 1;
        }
    }
    mismatches
}

fn relative_error(analytic: &Grads, numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = analytic.norm().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_differences(net: &Mlp, h: f64, mut loss: impl FnMut(&Mlp) -> f64) -> Vec<f64> {
    let base = net.params_flat();
    let mut probe = net.clone();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            probe.set_params_flat(&p).expect("same length");
            let up = loss(&probe);
            p[i] = base[i] - h;
            probe.set_params_flat(&p).expect("same length");
            let down = loss(&probe);
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Worst relative gradient error per head over random configurations:
/// `[critic, actor, dynamics nll, model-policy nll]`.
pub fn gradient_check_errors(configs: usize, rng: &mut MemrRng) -> Result<[f64; 4]> {
    let mut worst = [0.0f64; 4];
    let h = 1e-5;
    for _ in 0..configs {
        let sd = rng.random_range(1..=4);
        let ad = rng.random_range(1..=2);
        let hidden = vec![rng.random_range(3..=8), rng.random_range(3..=8)];
        let b = rng.random_range(2..=6);
        let sizes = |i: usize, o: usize| {
            let mut v = vec![i];
            v.extend(&hidden);
            v.push(o);
            v
        };
        let q_sizes = sizes(sd + ad, 1);
        let actor_sizes = sizes(sd, 2 * ad);
        let dyn_sizes = sizes(sd + ad, 2 * (sd + 1));
        let states = Array2::from_shape_simple_fn((b, sd), || rng.random_range(-1.5..1.5));
        let actions = Array2::from_shape_simple_fn((b, ad), || rng.random_range(-1.5..1.5));
        let scale = rng.random_range(0.5..3.0);

        let q1 = Mlp::new(&q_sizes, Activation::Tanh, Activation::Identity, rng);
        let q2 = Mlp::new(&q_sizes, Activation::Tanh, Activation::Identity, rng);
        let y = Array1::from_shape_simple_fn(b, || rng.random_range(-2.0..2.0));
        let w = Array1::from_shape_simple_fn(b, || rng.random_range(0.1..=1.0));
        let (_, g) = critic_loss_and_grad(&q1, states.view(), actions.view(), &y, &w)?;
        let fd = central_differences(&q1, h, |n| critic_loss_and_grad(n, states.view(), actions.view(), &y, &w).unwrap().0);
        worst[0] = worst[0].max(relative_error(&g, &fd));

        let actor = Mlp::new(&actor_sizes, Activation::Tanh, Activation::Identity, rng);
        let noise = Array2::from_shape_simple_fn((b, ad), || rng.sample(StandardNormal));
        let temperature = rng.random_range(0.0..1.0);
        let (_, g, _) = actor_loss_and_grad(&actor, &q1, &q2, states.view(), &noise, temperature, scale)?;
        let fd = central_differences(&actor, h, |n| {
            actor_loss_and_grad(n, &q1, &q2, states.view(), &noise, temperature, scale).unwrap().0
        });
        worst[1] = worst[1].max(relative_error(&g, &fd));

        let dyn_net = Mlp::new(&dyn_sizes, Activation::Tanh, Activation::Identity, rng);
        let inputs = ndarray::concatenate(ndarray::Axis(1), &[states.view(), actions.view()]).unwrap();
        let targets = Array2::from_shape_simple_fn((b, sd + 1), || rng.random_range(-1.0..1.0));
        let (_, g) = nll_loss_and_grad(&dyn_net, inputs.view(), targets.view())?;
        let fd = central_differences(&dyn_net, h, |n| nll_loss_and_grad(n, inputs.view(), targets.view()).unwrap().0);
        worst[2] = worst[2].max(relative_error(&g, &fd));

        let pol = Mlp::new(&actor_sizes, Activation::Tanh, Activation::Identity, rng);
        let (_, g) = policy_nll_and_grad(&pol, states.view(), actions.view())?;
        let fd = central_differences(&pol, h, |n| policy_nll_and_grad(n, states.view(), actions.view()).unwrap().0);
        worst[3] = worst[3].max(relative_error(&g, &fd));
    }
    Ok(worst)
}

/// Policy batches drawn between randomized pushes that mix generation
/// rounds. Each sample records its round in the reward field.
pub fn segment_mixing_violations(batches: usize, rng: &mut MemrRng) -> Result<usize> {
    let m = rng.random_range(4..=32);
    let segments = rng.random_range(2..=10);
    let mut buf = SegmentedModelBuffer::new(m * segments, m)?;
    let mut violations = 0;
    for _ in 0..batches {
        if buf.is_empty() || rng.random_bool(0.3) {
            let round = buf.rounds() as f64;
            let seg = (0..m)
                .map(|_| ModelSample {
                    state: vec![round],
                    action: vec![0.0],
                    next_state: vec![round],
                    reward: round,
                    weight: 1.0,
                })
                .collect();
            buf.push_segment(seg)?;
        }
        let b = rng.random_range(1..=m);
        let batch = buf.sample_policy_batch(b, rng)?;
        if batch.samples.iter().any(|s| s.reward != batch.round as f64) {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Runs every suite and returns one result per property.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = seeded(opts.seed);
    let mut out = Vec::new();

    for &n in &opts.lemma_ns {
        let gap = lemma_max_gap(n, opts.lemma_pairs, &mut rng)?;
        out.push(CheckResult::new(
            format!("entropy gain approximation, N={n}"),
            gap <= 1.0 / n as f64,
            format!("max |exact - approx| = {gap:.3e} (bound {:.3e})", 1.0 / n as f64),
        ));
    }

    let rank = theorem_ranking(opts.theorem_trials, 20, 1000, &mut rng)?;
    let rate = rank.top1_agreements as f64 / rank.trials.max(1) as f64;
    out.push(CheckResult::new(
        "max-priority candidate maximizes joint entropy",
        rate >= 0.95 && rank.mean_spearman >= 0.9,
        format!(
            "top-1 agreement {}/{} = {rate:.2}, mean Spearman {:.4}",
            rank.top1_agreements, rank.trials, rank.mean_spearman
        ),
    ));

    let gap = priority_literal_gap(10_000, &mut rng)?;
    out.push(CheckResult::new(
        "priority equals density-space expression",
        gap <= 1e-9,
        format!("max gap {gap:.3e}"),
    ));

    for size in [16, 1024] {
        let l1 = sampling_l1(size, 1_000_000, 100_000, 0.6, &mut rng)?;
        out.push(CheckResult::new(
            format!("prioritized sampling frequencies, {size} items"),
            l1 <= 0.01,
            format!("L1 = {l1:.4}"),
        ));
    }
    let mism = descent_mismatches(10_000, &mut rng);
    out.push(CheckResult::new(
        "sum-tree descent equals linear scan",
        mism == 0,
        format!("{mism} mismatches in 10000 prefixes"),
    ));

    let w = importance_weights(&[1.0 / 3.0, 2.0 / 3.0], 2, 1.0);
    let sched = BetaSchedule::new(0.4, 1.0, 1000);
    out.push(CheckResult::new(
        "importance weights and beta schedule",
        w == vec![1.0, 0.5] && sched.beta_at(0) == 0.4 && sched.beta_at(1000) == 1.0,
        format!("weights {w:?}, beta {} -> {}", sched.beta_at(0), sched.beta_at(1000)),
    ));

    let errs = gradient_check_errors(opts.gradient_configs, &mut rng)?;
    for (name, e) in ["critic loss", "actor surrogate", "dynamics nll", "model-policy nll"].iter().zip(errs) {
        out.push(CheckResult::new(
            format!("gradient check: {name}"),
            e <= 1e-4,
            format!("max relative error {e:.3e}"),
        ));
    }

    let v = segment_mixing_violations(100_000, &mut rng)?;
    out.push(CheckResult::new(
        "policy batches never mix generation rounds",
        v == 0,
        format!("{v} mixed batches"),
    ));
    Ok(out)
}
