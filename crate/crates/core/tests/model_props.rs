use memr::dynamics::{split_output, Normalizer};
use memr::gaussian::STD_FLOOR;
use memr::model_policy::{ModelDataPolicy, ModelPolicyConfig};
use memr::net::{soft_bound, soft_bound_inverse, softplus, Activation, Adam, Mlp};
use memr::rng::seeded;
use memr::sac::{critic_loss_and_grad, squashed_log_prob, SacAgent, SacConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn net(sizes: &[usize], seed: u64) -> Mlp {
    Mlp::new(sizes, Activation::Tanh, Activation::Identity, &mut seeded(seed))
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn layers_chain_and_init_is_finite(sizes in prop::collection::vec(1usize..12, 2..6), seed in any::<u64>()) {
        let n = net(&sizes, seed);
        prop_assert_eq!(n.input_dim(), sizes[0]);
        prop_assert_eq!(n.output_dim(), *sizes.last().unwrap());
        for w in n.layers().windows(2) {
            prop_assert_eq!(w[0].fan_out(), w[1].fan_in());
        }
        prop_assert!(n.params().all(|p| p.is_finite()));
        let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        prop_assert_eq!(n.param_count(), expected);
    }

    #[test]
    fn forward_is_pure_and_grads_mirror_params(
        sizes in prop::collection::vec(1usize..10, 2..5),
        rows in 1usize..8,
        seed in any::<u64>(),
    ) {
        let n = net(&sizes, seed);
        let x = matrix(rows, sizes[0], -2.0, 2.0, seed ^ 1);
        let a = n.predict(x.view()).unwrap();
        let b = n.predict(x.view()).unwrap();
        prop_assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        let (out, tape) = n.forward(x.view()).unwrap();
        let mut g = n.zero_grads();
        n.backward(tape, Array2::ones(out.raw_dim()).view(), &mut g).unwrap();
        for (layer, (gw, gb)) in n.layers().iter().zip(g.weights.iter().zip(&g.biases)) {
            prop_assert_eq!(gw.dim(), layer.weight.dim());
            prop_assert_eq!(gb.len(), layer.bias.len());
        }
    }

    #[test]
    fn adam_counts_steps(steps in 0u64..20, seed in any::<u64>()) {
        let mut n = net(&[3, 4, 2], seed);
        let mut opt = Adam::for_net(&n, 1e-3);
        let g = n.zero_grads();
        for _ in 0..steps {
            opt.step_net(&mut n, &g);
        }
        prop_assert_eq!(opt.steps(), steps);
    }

    #[test]
    fn soft_bound_stays_inside_and_is_monotone(a in -1e4f64..1e4, b in -1e4f64..1e4, lo in -30.0f64..0.0, width in 0.5f64..10.0) {
        let hi = lo + width;
        let (va, da) = soft_bound(a, lo, hi);
        let (vb, _) = soft_bound(b, lo, hi);
        prop_assert!(va >= lo && va <= hi);
        prop_assert!(da >= 0.0 && da <= 1.0);
        if a <= b {
            prop_assert!(va <= vb);
        }
    }

    #[test]
    fn soft_bound_inverse_round_trips(frac in 0.05f64..0.95, lo in -20.0f64..0.0, width in 1.0f64..10.0) {
        let hi = lo + width;
        let v = lo + frac * width;
        let back = soft_bound(soft_bound_inverse(v, lo, hi), lo, hi).0;
        prop_assert!((back - v).abs() < 1e-9);
    }

    #[test]
    fn softplus_positive_and_above_identity(x in -700.0f64..700.0) {
        let s = softplus(x);
        prop_assert!(s >= 0.0 && s >= x);
    }

    #[test]
    fn dynamics_log_var_within_bounds(raw in prop::collection::vec(-1e6f64..1e6, 2..40)) {
        let cols = 2 * (raw.len() / 2);
        prop_assume!(cols >= 2);
        let out = Array2::from_shape_vec((1, cols), raw[..cols].to_vec()).unwrap();
        let (_, lv) = split_output(&out);
        prop_assert!(lv.iter().all(|v| *v >= -10.0 && *v <= 2.0));
    }

    #[test]
    fn normalizer_round_trip(rows in 2usize..30, cols in 1usize..6, seed in any::<u64>(), scale in 1e-9f64..1e3) {
        let data = matrix(rows, cols, -1.0, 1.0, seed) * scale;
        let norm = Normalizer::fit(data.view());
        prop_assert!(norm.std.iter().all(|s| *s >= 1e-6));
        let mut x = data.clone();
        norm.normalize(&mut x);
        norm.denormalize(&mut x);
        for (a, b) in x.iter().zip(data.iter()) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn model_policy_std_within_floor_and_ceiling(
        sd in 1usize..5,
        ad in 1usize..3,
        magnitude in 0.1f64..1e3,
        fits in 0usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let cfg = ModelPolicyConfig { hidden: vec![8, 8], lr: 1e-2, minibatch: 16 };
        let mut pol = ModelDataPolicy::new(sd, ad, cfg, &mut rng).unwrap();
        for i in 0..fits {
            let s = matrix(16, sd, -magnitude, magnitude, seed ^ (10 + i as u64));
            let a = matrix(16, ad, -3.0, 3.0, seed ^ (20 + i as u64));
            let before = pol.fits();
            pol.fit_online(s.view(), a.view(), 2, &mut rng).unwrap();
            prop_assert_eq!(pol.fits(), before + 1);
        }
        let states = matrix(20, sd, -magnitude, magnitude, seed ^ 99);
        for g in pol.conditionals(states.view()).unwrap() {
            prop_assert!(g.std().iter().all(|s| *s >= STD_FLOOR && *s <= 2f64.exp() + 1e-12));
        }
    }

    #[test]
    fn model_policy_priority_ranks_like_log_density(
        state in prop::collection::vec(-2.0f64..2.0, 3),
        actions in prop::collection::vec(-3.0f64..3.0, 2..20),
        seed in any::<u64>(),
    ) {
        let pol = ModelDataPolicy::new(3, 1, ModelPolicyConfig::default(), &mut seeded(seed)).unwrap();
        let g = pol.conditional(&state).unwrap();
        let scored: Vec<(f64, f64)> = actions
            .iter()
            .map(|a| (pol.priority_of(&state, &[*a]).unwrap(), -g.log_prob(&[*a]).unwrap()))
            .collect();
        prop_assert_eq!(pol.priority_of(&state, &[actions[0]]).unwrap(), scored[0].0);
        for x in &scored {
            for y in &scored {
                if x.1 < y.1 - 1e-9 {
                    prop_assert!(x.0 <= y.0);
                }
            }
        }
    }

    #[test]
    fn sac_actions_within_bounds(
        state in prop::collection::vec(-1e3f64..1e3, 3),
        scale in 0.1f64..5.0,
        deterministic in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = seeded(seed);
        let cfg = SacConfig { hidden: vec![8, 8], ..SacConfig::default() };
        let agent = SacAgent::new(3, 2, scale, cfg, &mut rng).unwrap();
        let a = agent.act(&state, deterministic, &mut rng).unwrap();
        prop_assert_eq!(a.len(), 2);
        prop_assert!(a.iter().all(|x| x.abs() <= scale));
    }

    #[test]
    fn squashed_log_prob_is_finite(
        mean in -5.0f64..5.0,
        log_std in -20.0f64..2.0,
        frac in -0.999f64..0.999,
        scale in 0.1f64..5.0,
    ) {
        let lp = squashed_log_prob(&[mean], &[log_std], &[frac * scale], scale);
        prop_assert!(lp.is_finite());
    }

    #[test]
    fn target_sync_is_an_ema(tau in 0.001f64..=1.0, steps in 1usize..4, seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let cfg = SacConfig { hidden: vec![6, 6], ..SacConfig::default() };
        let mut agent = SacAgent::new(2, 1, 1.0, cfg, &mut rng).unwrap();
        for c in agent.critics_mut() {
            for p in c.params_mut() {
                *p += rng.random_range(-0.5..0.5);
            }
        }
        let online: Vec<Vec<f64>> = agent.critics().iter().map(|c| c.params_flat()).collect();
        let mut expect: Vec<Vec<f64>> = agent.targets().iter().map(|t| t.params_flat()).collect();
        for _ in 0..steps {
            agent.target_sync(tau).unwrap();
            for (e, o) in expect.iter_mut().zip(&online) {
                for (t, w) in e.iter_mut().zip(o) {
                    *t += tau * (w - *t);
                }
            }
        }
        for (t, e) in agent.targets().iter().zip(&expect) {
            for (a, b) in t.params_flat().iter().zip(e) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn unit_weights_match_plain_mse(b in 1usize..10, seed in any::<u64>()) {
        let q = net(&[3, 5, 1], seed);
        let s = matrix(b, 2, -1.0, 1.0, seed ^ 1);
        let a = matrix(b, 1, -1.0, 1.0, seed ^ 2);
        let y = Array1::from_iter(matrix(b, 1, -1.0, 1.0, seed ^ 3).iter().copied());
        let (loss, g) = critic_loss_and_grad(&q, s.view(), a.view(), &y, &Array1::ones(b)).unwrap();
        let x = ndarray::concatenate(ndarray::Axis(1), &[s.view(), a.view()]).unwrap();
        let pred = q.predict(x.view()).unwrap();
        let plain = (0..b).map(|i| (pred[[i, 0]] - y[i]).powi(2)).sum::<f64>() / b as f64;
        prop_assert!((loss - plain).abs() <= 1e-14 * (1.0 + plain));
        prop_assert!(g.iter().all(|v| v.is_finite()));
    }
}
