use echelon::env::{env_step, reset, EnvRng, SupplyChainConfig, SupplyChainEnv};
use echelon::evalstats::{bootstrap_ci, evaluate_checkpoints, iqm, rollout_env_seed, run_episode, EvalConfig};
use echelon::interpret::{feature_importance, trace_shape_functions, StateSet};
use echelon::netcore::{Adam, AdamConfig, DenseNet, Parameters};
use echelon::policy::{
    Actor, ActorConfig, Checkpoint, CheckpointMeta, CriticParams, NamPolicyParams, PolicyKind, Standardizer,
};
use echelon::ppo::{minibatch_gradients, Minibatch, PpoConfig};
use echelon::rng;
use proptest::prelude::*;
use rand::Rng;

fn nam_checkpoint(seed: u64) -> Checkpoint {
    let env = SupplyChainConfig::default();
    let mut g = rng::stream(seed, &[]);
    let mut actor = Actor::init(&ActorConfig::default(), env.obs_dim(), env.num_stages, &mut g).unwrap();
    if let Actor::Nam(p) = &mut actor {
        for w in &mut p.task_weights {
            *w = g.random_range(-2.0..2.0);
        }
    }
    let critic = CriticParams::init(env.obs_dim(), &mut g).unwrap();
    Checkpoint::new(&env, actor, critic, CheckpointMeta::default()).unwrap()
}

fn random_actions(config: &SupplyChainConfig, seed: u64) -> Vec<Vec<i64>> {
    let mut g = rng::stream(seed, &[7]);
    (0..config.horizon)
        .map(|_| config.capacities.iter().map(|&c| g.random_range(0..=c as i64 + 20)).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episode_ledgers_balance(seed in any::<u64>(), action_seed in any::<u64>()) {
        let config = SupplyChainConfig::default();
        let mut env_rng = EnvRng::from_seed(seed);
        let (mut state, _) = reset(&config, &mut env_rng).unwrap();
        let initial = state.clone();
        let n = config.num_stages;
        let (mut arrivals, mut shipped) = (vec![0u64; n], vec![0u64; n]);
        let (mut demand, mut fulfilled) = (0u64, 0u64);
        let (mut ret, mut from_info) = (0.0, 0.0);
        for action in random_actions(&config, action_seed) {
            let step = env_step(&mut state, &action, &config, &mut env_rng).unwrap();
            for i in 0..n {
                arrivals[i] += step.info[i].arrivals;
                shipped[i] += step.info[i].fulfilled;
            }
            demand += step.info[0].demand;
            fulfilled += step.info[0].fulfilled;
            ret += step.reward;
            from_info += step.info.iter().map(|s| s.profit()).sum::<f64>();
        }
        for i in 0..n {
            prop_assert_eq!(state.inventory[i] + shipped[i], initial.inventory[i] + arrivals[i]);
        }
        prop_assert_eq!(demand, fulfilled + state.backlog);
        prop_assert!((ret - from_info).abs() < 1e-9);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories(seed in any::<u64>(), action_seed in any::<u64>()) {
        let config = SupplyChainConfig::default().with_horizon(20);
        let run = || {
            let (mut env, first) = SupplyChainEnv::new(config.clone(), seed).unwrap();
            let mut out = vec![first];
            for a in random_actions(&config, action_seed) {
                let s = env.step(&a).unwrap();
                out.push(s.observation);
                out.push(vec![s.reward]);
            }
            out
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// Disruptions only ever add demand on top of the same base draws.
    #[test]
    fn disruption_adds_demand(seed in any::<u64>(), strength in 0.0f64..6.0) {
        let base = SupplyChainConfig::default();
        let start = 30;
        let disrupted = SupplyChainConfig { demand: base.demand.with_disruption(strength, start), ..base.clone() };
        let zero = vec![0i64; base.num_stages];
        let (mut a, _) = SupplyChainEnv::new(base.clone(), seed).unwrap();
        let (mut b, _) = SupplyChainEnv::new(disrupted, seed).unwrap();
        for t in 0..base.horizon {
            let (da, db) = (a.step(&zero).unwrap().info[0].demand, b.step(&zero).unwrap().info[0].demand);
            if t < start {
                prop_assert_eq!(da, db);
            } else {
                prop_assert!(db >= da);
            }
        }
    }

    /// With nothing on hand, extra demand can only add backlog cost.
    #[test]
    fn disruption_harms_a_stocked_out_chain(seed in any::<u64>(), lo in 0.0f64..3.0, step in 0.1f64..3.0) {
        let base = SupplyChainConfig { init_inv_mean: vec![0.0; 3], init_inv_std: 0.0, ..SupplyChainConfig::default() };
        let total = |s: f64| {
            let config = SupplyChainConfig { demand: base.demand.with_disruption(s, 30), ..base.clone() };
            let (mut env, _) = SupplyChainEnv::new(config, seed).unwrap();
            (0..base.horizon).map(|_| env.step(&[0, 0, 0]).unwrap().reward).sum::<f64>()
        };
        prop_assert!(total(lo + step) <= total(lo));
    }

    #[test]
    fn iqm_affine_and_permutation(values in prop::collection::vec(-1e3f64..1e3, 1..80), a in 0.01f64..100.0, b in -1e3f64..1e3, rot in 0usize..80) {
        let base = iqm(&values).unwrap();
        let mut shuffled = values.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert!((iqm(&shuffled).unwrap() - base).abs() <= 1e-9 * base.abs().max(1.0));
        let mapped: Vec<f64> = values.iter().map(|v| a * v + b).collect();
        let want = a * base + b;
        prop_assert!((iqm(&mapped).unwrap() - want).abs() <= 1e-9 * want.abs().max(1.0));
        prop_assert_eq!(iqm(&values[..1]).unwrap(), values[0]);
    }

    #[test]
    fn standardizer_round_trip(seed in any::<u64>()) {
        let config = SupplyChainConfig::default();
        let s = Standardizer::for_observations(&config).unwrap();
        let mut g = rng::stream(seed, &[]);
        for _ in 0..200 {
            let x: Vec<f64> = (0..config.obs_dim()).map(|_| g.random_range(-500.0..500.0)).collect();
            let back = s.inverse(&s.transform(&x));
            prop_assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0)));
        }
    }

    #[test]
    fn forward_is_pure(seed in any::<u64>(), layers in 1usize..=4, width in 8usize..=32) {
        let mut g = rng::stream(seed, &[]);
        let mut widths = vec![33];
        widths.extend(std::iter::repeat_n(width, layers));
        widths.push(3);
        let net = DenseNet::init(&widths, 1.0, &mut g).unwrap();
        let x: Vec<f64> = (0..33).map(|_| g.random_range(-2.0..2.0)).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn single_feature_perturbation_is_additive(seed in any::<u64>(), j in 0usize..33, delta in -3.0f64..3.0) {
        let mut g = rng::stream(seed, &[]);
        let mut nam = NamPolicyParams::init(33, 3, 30, &[8], &mut g).unwrap();
        for w in &mut nam.task_weights {
            *w = g.random_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..33).map(|_| g.random_range(-2.0..2.0)).collect();
        let mut y = x.clone();
        y[j] += delta;
        let (fx, fy) = (nam.forward(&x).unwrap(), nam.forward(&y).unwrap());
        for t in 0..3 {
            let change = nam.task_shape_value(t, j, y[j]).unwrap() - nam.task_shape_value(t, j, x[j]).unwrap();
            prop_assert!((fy[t] - fx[t] - change).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_policy_is_a_function_of_the_observation(seed in any::<u64>()) {
        let ckpt = nam_checkpoint(seed);
        let mut g = rng::stream(seed, &[1]);
        let obs: Vec<f64> = (0..33).map(|_| g.random_range(0.0..200.0)).collect();
        prop_assert_eq!(ckpt.deterministic_orders(&obs), ckpt.deterministic_orders(&obs));
        let (a, b) = (ckpt.mean_action(&obs), ckpt.mean_action(&obs));
        prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn importance_is_a_mean_over_states(seed in any::<u64>(), copies in 2usize..4) {
        let ckpt = nam_checkpoint(seed);
        let mut g = rng::stream(seed, &[2]);
        let states: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..33).map(|_| g.random_range(0.0..150.0)).collect())
            .collect();
        let base = feature_importance(&ckpt, &StateSet::new(states.clone(), "random")).unwrap();
        let mut reordered = states.clone();
        reordered.reverse();
        let mut duplicated = Vec::new();
        for _ in 0..copies {
            duplicated.extend(states.iter().cloned());
        }
        for other in [reordered, duplicated] {
            let r = feature_importance(&ckpt, &StateSet::new(other, "variant")).unwrap();
            for (ra, rb) in base.importance.iter().zip(&r.importance) {
                for (a, b) in ra.iter().zip(rb) {
                    prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn importance_ranking_survives_common_rescaling(seed in any::<u64>(), c in 0.1f64..10.0) {
        let ckpt = nam_checkpoint(seed);
        let mut scaled = ckpt.clone();
        if let Actor::Nam(p) = &mut scaled.actor {
            for w in &mut p.task_weights {
                *w *= c;
            }
        }
        let mut g = rng::stream(seed, &[3]);
        let states: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..33).map(|_| g.random_range(0.0..150.0)).collect())
            .collect();
        let set = StateSet::new(states, "random");
        let (a, b) = (feature_importance(&ckpt, &set).unwrap(), feature_importance(&scaled, &set).unwrap());
        for t in 0..3 {
            prop_assert_eq!(a.ranking(t)[0], b.ranking(t)[0]);
        }
    }

    #[test]
    fn histogram_counts_cover_the_state_set(seed in any::<u64>(), bins in 1usize..40) {
        let ckpt = nam_checkpoint(seed);
        let mut g = rng::stream(seed, &[4]);
        let states: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..33).map(|_| g.random_range(0.0..150.0)).collect())
            .collect();
        let set = StateSet::new(states, "random");
        let names = SupplyChainConfig::default().feature_names();
        let table = trace_shape_functions(&ckpt, &set, &names, 16, bins).unwrap();
        for h in &table.histograms {
            prop_assert_eq!(h.counts.len(), bins);
            prop_assert_eq!(h.counts.iter().sum::<u64>(), 25);
        }
    }
}

#[test]
fn bootstrap_interval_narrows_with_sample_size() {
    let width = |n: usize| -> f64 {
        let mut widths: Vec<f64> = (0..50)
            .map(|trial| {
                let mut g = rng::stream(trial, &[n as u64]);
                let v: Vec<f64> = (0..n).map(|_| g.random_range(0.0..100.0)).collect();
                let (lo, hi) = bootstrap_ci(&v, 500, &mut rng::stream(trial, &[99])).unwrap();
                hi - lo
            })
            .collect();
        widths.sort_by(f64::total_cmp);
        0.5 * (widths[24] + widths[25])
    };
    assert!(width(1000) < width(100));
}

#[test]
fn evaluation_returns_match_reward_sums() {
    let config = SupplyChainConfig::default();
    let ckpts = vec![nam_checkpoint(1), nam_checkpoint(2)];
    let eval = EvalConfig {
        rollouts_per_seed: 4,
        bootstrap_resamples: 100,
        ..Default::default()
    };
    let e = evaluate_checkpoints("nam", &ckpts, &config, &eval).unwrap();
    assert_eq!(e.report.returns.len(), 8);
    for tr in &e.trajectories {
        let seed = rollout_env_seed(eval.eval_seed, tr.seed_index, tr.rollout);
        let steps = run_episode(&ckpts[tr.seed_index], &config, seed, &mut rng::stream(0, &[])).unwrap();
        let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
        assert_eq!(rewards, tr.rewards);
        let total: f64 = steps.iter().map(|s| s.info.iter().map(|i| i.profit()).sum::<f64>()).sum();
        let k = tr.seed_index * eval.rollouts_per_seed + tr.rollout;
        assert_eq!(e.report.returns[k], tr.rewards.iter().sum::<f64>());
        assert!((e.report.returns[k] - total).abs() < 1e-9);
    }
}

#[test]
fn repeated_steps_overfit_a_frozen_batch() {
    let env = SupplyChainConfig::default();
    let cfg = PpoConfig::default();
    let mut g = rng::stream(21, &[]);
    let config = ActorConfig {
        kind: PolicyKind::Mlp,
        hidden_layers: 2,
        width: 16,
        num_subnets: 30,
    };
    let mut actor = Actor::init(&config, env.obs_dim(), env.num_stages, &mut g).unwrap();
    let mut critic = CriticParams::init(env.obs_dim(), &mut g).unwrap();
    let b = 32;
    let obs: Vec<f64> = (0..b * env.obs_dim()).map(|_| g.random_range(-1.0..1.0)).collect();
    let actions: Vec<f64> = (0..b * env.num_stages).map(|_| g.random_range(-1.0..1.0)).collect();
    let advantages: Vec<f64> = (0..b).map(|_| g.random_range(-1.0..1.0)).collect();
    let returns: Vec<f64> = (0..b).map(|_| g.random_range(-1.0..1.0)).collect();
    let old_log_probs = vec![-2.0; b];
    let mut actor_opt = Adam::for_params(AdamConfig::with_lr(1e-3), &actor);
    let mut critic_opt = Adam::for_params(AdamConfig::with_lr(1e-3), &critic);
    let mut losses = Vec::new();
    for _ in 0..150 {
        let out = minibatch_gradients(
            &actor,
            &critic,
            &Minibatch {
                observations: &obs,
                actions: &actions,
                old_log_probs: &old_log_probs,
                advantages: &advantages,
                returns: &returns,
            },
            &cfg,
        )
        .unwrap();
        assert!(out.terms.approx_kl.is_finite());
        assert!((0.0..=1.0).contains(&out.terms.clip_fraction));
        losses.push(out.terms.loss);
        actor_opt.step(&mut actor, &out.actor).unwrap();
        critic_opt.step(&mut critic, &out.critic).unwrap();
    }
    assert!(losses[losses.len() - 1] < losses[0], "{} -> {}", losses[0], losses[losses.len() - 1]);
    assert!(actor.flatten().iter().all(|v| v.is_finite()));
}
