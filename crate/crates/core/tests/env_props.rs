use std::f64::consts::PI;

use memr::entropy::knn_entropy;
use memr::env::{make_env, wrap_angle, Pendulum, PointMass, Environment};
use memr::rng::seeded;
use memr::trainer::{parse_metrics_csv, MetricsRow, TrainerConfig, CSV_COLUMNS};
use proptest::prelude::*;

const PENDULUM_REWARD_FLOOR: f64 = -(PI * PI + 0.1 * 64.0 + 0.001 * 4.0);

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pendulum_step_is_pure_and_reward_bounded(
        theta in -10.0f64..10.0,
        theta_dot in -8.0f64..8.0,
        torque in -10.0f64..10.0,
        t in 0usize..199,
    ) {
        let env = Pendulum::default();
        let s = Pendulum::observe(theta, theta_dot);
        let a = env.step(&s, &[torque], t).unwrap();
        let b = env.step(&s, &[torque], t).unwrap();
        prop_assert_eq!(&a.next_state, &b.next_state);
        prop_assert_eq!(a.reward.to_bits(), b.reward.to_bits());
        prop_assert!(a.reward <= 0.0 && a.reward >= PENDULUM_REWARD_FLOOR);
        prop_assert!(!a.done);
        prop_assert!(a.next_state[2].abs() <= 8.0);
    }

    #[test]
    fn point_mass_step_is_pure(
        s in prop::collection::vec(-5.0f64..5.0, 4),
        a in prop::collection::vec(-3.0f64..3.0, 2),
        t in 0usize..199,
    ) {
        let env = PointMass::default();
        let x = env.step(&s, &a, t).unwrap();
        let y = env.step(&s, &a, t).unwrap();
        prop_assert_eq!(&x.next_state, &y.next_state);
        prop_assert_eq!(x.reward.to_bits(), y.reward.to_bits());
    }

    #[test]
    fn specs_are_sane(seed in any::<u64>()) {
        for name in ["pendulum", "pointmass"] {
            let env = make_env(name).unwrap();
            let spec = env.spec();
            prop_assert!(spec.horizon >= 1);
            prop_assert_eq!(spec.action_limit.len(), spec.action_dim);
            prop_assert!(spec.action_limit.iter().all(|l| l.is_finite() && *l > 0.0));
            let s0 = env.reset(&mut seeded(seed));
            prop_assert_eq!(s0.len(), spec.state_dim);
            let big: Vec<f64> = spec.action_limit.iter().map(|l| 10.0 * l).collect();
            let clipped = env.clip_action(&big);
            prop_assert_eq!(&clipped, &spec.action_limit);
            let neg: Vec<f64> = big.iter().map(|v| -v).collect();
            let clipped = env.clip_action(&neg);
            prop_assert!(clipped.iter().zip(&spec.action_limit).all(|(c, l)| *c == -l));
        }
    }

    #[test]
    fn wrap_angle_range_and_period(theta in -1e4f64..1e4) {
        let w = wrap_angle(theta);
        prop_assert!(w > -PI && w <= PI);
        prop_assert!((w.sin() - theta.sin()).abs() < 1e-9);
        prop_assert!((w.cos() - theta.cos()).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn knn_entropy_translation_and_scale(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 10..80),
        shift in prop::collection::vec(-100.0f64..100.0, 2),
        c in 0.1f64..10.0,
    ) {
        let h = knn_entropy(&pts, 3).unwrap();
        let moved: Vec<Vec<f64>> = pts.iter().map(|p| vec![p[0] + shift[0], p[1] + shift[1]]).collect();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| vec![c * p[0], c * p[1]]).collect();
        prop_assert!((knn_entropy(&moved, 3).unwrap() - h).abs() < 1e-6);
        // Differential entropy shifts by d ln c under scaling.
        prop_assert!((knn_entropy(&scaled, 3).unwrap() - h - 2.0 * c.ln()).abs() < 1e-6);
    }

    #[test]
    fn metrics_csv_round_trips(
        vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 9),
        counters in prop::collection::vec(any::<u32>(), 3),
        nan_mask in any::<u16>(),
    ) {
        let pick = |i: usize| if nan_mask >> i & 1 == 1 { f64::NAN } else { vals[i] };
        let row = MetricsRow {
            step: counters[0] as u64,
            eval_return: pick(0),
            discounted_return: pick(1),
            holdout_mse: pick(2),
            mean_priority: pick(3),
            model_entropy: pick(4),
            critic_loss: pick(5),
            actor_loss: pick(6),
            temperature: pick(7),
            wall_clock_s: vals[8],
            policy_updates: counters[1] as u64,
            model_rollouts: counters[2] as u64,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&row).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        prop_assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        let back = parse_metrics_csv(&text).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert!(back[0].same_run_values(&row));
        prop_assert_eq!(back[0].wall_clock_s.to_bits(), row.wall_clock_s.to_bits());
    }

    #[test]
    fn config_toml_round_trips(
        seed in any::<u64>(),
        alpha in 0.0f64..=1.0,
        m in 1usize..64,
        segments in 1usize..100,
        g in 1usize..10,
        beta_start in 0.0f64..=1.0,
    ) {
        let cfg = TrainerConfig {
            seed,
            alpha,
            rollouts_per_step: m,
            model_dataset_size: m * segments,
            policy_updates_per_step: g,
            beta_start,
            ..TrainerConfig::default()
        };
        prop_assert_eq!(TrainerConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
