use neural_kopt::gire::entropy_measure;
use neural_kopt::instance::{generate_uniform, AugmentConfig, CapacityRule, ProblemKind};
use neural_kopt::kopt::{edges_changed, finalize, neighborhood, random_trace, ActionTrace, Selection};
use neural_kopt::networks::{DecodeMode, Policy, PolicyConfig};
use neural_kopt::neural::{cpe_table, Grads, Matrix};
use neural_kopt::oracle::{exact_cvrp, held_karp, verify_tour};
use neural_kopt::rng;
use neural_kopt::search::{env_step, EnvConfig, SearchState, StallCounter};
use neural_kopt::solution::{initial_tour, objective, Tour};
use neural_kopt::training::{clipped_value_loss, ppo_surrogate, returns_and_advantages};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn random_tour(n: usize, seed: u64) -> Tour {
    let mut seq: Vec<usize> = (0..n).collect();
    seq.shuffle(&mut rng::seeded(seed));
    Tour::from_sequence(&seq).unwrap()
}

fn kind(cvrp: bool) -> ProblemKind {
    if cvrp {
        ProblemKind::Cvrp
    } else {
        ProblemKind::Tsp
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn finalize_yields_a_tour_within_k_edges(n in 5usize..13, k in 2usize..7, seed: u64) {
        let tour = random_tour(n, seed);
        let mut r = rng::seeded(seed ^ 1);
        let trace = random_trace(&tour, k, &mut r).unwrap();
        let next = finalize(&tour, &trace).unwrap();
        let inst = generate_uniform(ProblemKind::Tsp, n, seed, CapacityRule::default()).unwrap();
        prop_assert!(verify_tour(&inst, &next).is_valid_tour());
        prop_assert!(edges_changed(&tour, &next) <= k);
    }

    #[test]
    fn early_null_closes_the_path(n in 5usize..10, seed: u64, cut in 0usize..3) {
        let tour = random_tour(n, seed);
        let trace = random_trace(&tour, 4, &mut rng::seeded(seed)).unwrap();
        let mut truncated = ActionTrace { move_types: vec![], ..trace.clone() };
        for s in truncated.selections.iter_mut().skip(cut) {
            *s = Selection::Null;
        }
        let next = finalize(&tour, &truncated).unwrap();
        prop_assert!(next.successors().len() == n);
        prop_assert!(edges_changed(&tour, &next) <= cut + 1);
    }

    #[test]
    fn random_actions_stay_in_the_neighborhood(n in 5usize..8, k in 2usize..4, seed: u64) {
        let tour = random_tour(n, seed);
        let hood: Vec<Vec<usize>> = neighborhood(&tour, k).unwrap().iter().map(Tour::undirected_key).collect();
        let trace = random_trace(&tour, k, &mut rng::seeded(seed)).unwrap();
        let next = finalize(&tour, &trace).unwrap();
        prop_assert!(hood.contains(&next.undirected_key()));
    }

    #[test]
    fn objective_ignores_direction_and_start(n in 3usize..15, seed: u64, cvrp: bool) {
        let inst = generate_uniform(kind(cvrp), n, seed, CapacityRule::default()).unwrap();
        let tour = initial_tour(&inst, &mut rng::seeded(seed)).unwrap();
        let f = objective(&inst, &tour);
        prop_assert!((objective(&inst, &tour.reversed()) - f).abs() < 1e-9);
        let mut seq = tour.sequence();
        let shift = seed as usize % seq.len();
        seq.rotate_left(shift);
        prop_assert!((objective(&inst, &Tour::from_sequence(&seq).unwrap()) - f).abs() < 1e-9);
    }

    #[test]
    fn augmentation_is_an_isometry(n in 3usize..30, seed: u64, cvrp: bool) {
        let inst = generate_uniform(kind(cvrp), n, seed, CapacityRule::default()).unwrap();
        let tour = initial_tour(&inst, &mut rng::seeded(seed)).unwrap();
        let aug = AugmentConfig::random(&mut rng::seeded(!seed)).apply(&inst);
        prop_assert!((objective(&aug, &tour) - objective(&inst, &tour)).abs() < 1e-9);
        prop_assert_eq!(&aug.demands, &inst.demands);
    }

    #[test]
    fn entropy_is_symmetric_and_bounded(p in 0.0f64..=1.0) {
        let h = entropy_measure(p).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((h - entropy_measure(1.0 - p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn positional_rows_have_constant_norm(n in 1usize..40, half in 1usize..16) {
        let d = 2 * half;
        let m = cpe_table(n, d).unwrap();
        for i in 0..n {
            let norm2: f64 = m.row(i).iter().map(|v| v * v).sum();
            prop_assert!((norm2 - half as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn returns_satisfy_the_bellman_recursion(
        rewards in prop::collection::vec(-1.0f64..1.0, 1..12),
        gamma in 0.5f64..0.9999,
        boot in -2.0f64..2.0,
        seed: u64,
    ) {
        let values: Vec<f64> = rewards.iter().enumerate().map(|(i, _)| ((seed as usize + i) % 7) as f64 * 0.1).collect();
        let (ret, adv) = returns_and_advantages(&rewards, &values, boot, gamma);
        let t = rewards.len();
        prop_assert!((ret[t - 1] - (rewards[t - 1] + gamma * boot)).abs() < 1e-12);
        for i in 0..t - 1 {
            prop_assert!((ret[i] - (rewards[i] + gamma * ret[i + 1])).abs() < 1e-12);
        }
        for i in 0..t {
            prop_assert!((adv[i] - (ret[i] - values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_never_exceeds_the_clipped_gain(ratio in 0.0f64..3.0, adv in -2.0f64..2.0, clip in 0.01f64..0.5) {
        let (obj, grad) = ppo_surrogate(ratio, adv, clip);
        prop_assert!(obj <= ratio * adv + 1e-12);
        prop_assert!(obj <= ratio.clamp(1.0 - clip, 1.0 + clip) * adv + 1e-12);
        prop_assert!(grad == 0.0 || grad == ratio * adv);
    }

    #[test]
    fn value_loss_dominates_the_plain_loss(v in -3.0f64..3.0, v_old in -3.0f64..3.0, ret in -3.0f64..3.0, clip in 0.01f64..1.0) {
        let (loss, _) = clipped_value_loss(v, v_old, ret, clip);
        prop_assert!(loss + 1e-12 >= (v - ret) * (v - ret));
    }

    #[test]
    fn clip_norm_bounds_the_norm(data in prop::collection::vec(-10.0f64..10.0, 1..40), max in 0.01f64..5.0) {
        let mut g = Grads { tensors: vec![Matrix::row_vector(data)] };
        g.clip_norm(max);
        prop_assert!(g.norm() <= max * (1.0 + 1e-12));
    }

    #[test]
    fn stall_counter_fires_only_after_the_limit(limit in 1usize..10, pattern in prop::collection::vec(any::<bool>(), 1..60)) {
        let mut s = StallCounter::new(limit);
        let mut run = 0;
        for improved in pattern {
            let fired = s.observe(improved);
            run = if improved { 0 } else { run + 1 };
            prop_assert_eq!(fired, run == limit);
            if fired {
                run = 0;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn held_karp_lower_bounds_every_tour(n in 4usize..10, seed: u64) {
        let inst = generate_uniform(ProblemKind::Tsp, n, seed, CapacityRule::default()).unwrap();
        let opt = held_karp(&inst).unwrap();
        prop_assert!((objective(&inst, &opt.tour) - opt.cost).abs() < 1e-9);
        for s in 0..20 {
            prop_assert!(objective(&inst, &random_tour(n, seed.wrapping_add(s))) >= opt.cost - 1e-9);
        }
    }

    #[test]
    fn exact_cvrp_lower_bounds_feasible_tours(n in 3usize..7, seed: u64) {
        let inst = generate_uniform(ProblemKind::Cvrp, n, seed, CapacityRule::default()).unwrap();
        let opt = exact_cvrp(&inst).unwrap();
        prop_assert!(verify_tour(&inst, &opt.tour).is_feasible());
        let tour = initial_tour(&inst, &mut rng::seeded(seed)).unwrap();
        prop_assert!(objective(&inst, &tour) >= opt.cost - 1e-9);
    }

    #[test]
    fn rewards_telescope_and_bsf_is_monotone(n in 5usize..12, seed: u64, cvrp: bool) {
        let inst = generate_uniform(kind(cvrp), n, seed, CapacityRule::default()).unwrap();
        let tour = initial_tour(&inst, &mut rng::seeded(seed)).unwrap();
        let env = EnvConfig::default();
        let mut state = SearchState::new(inst, tour, &env).unwrap();
        let start = state.bsf_cost;
        let mut r = rng::seeded(seed ^ 7);
        let mut sum = 0.0;
        for _ in 0..40 {
            let before = state.bsf_cost;
            let trace = random_trace(&state.tour, 3, &mut r).unwrap();
            let terms = env_step(&mut state, &trace, &env, 0.0).unwrap();
            prop_assert!(terms.r >= 0.0);
            prop_assert!(state.bsf_cost <= before);
            sum += terms.r;
        }
        prop_assert!((sum - (start - state.bsf_cost)).abs() < 1e-9);
        prop_assert!(verify_tour(&state.instance, &state.bsf_tour).is_feasible());
        prop_assert!((objective(&state.instance, &state.bsf_tour) - state.bsf_cost).abs() < 1e-9);
    }

    #[test]
    fn decode_logprob_matches_replay(n in 5usize..12, seed: u64, cvrp: bool, greedy: bool) {
        let inst = generate_uniform(kind(cvrp), n, seed, CapacityRule::default()).unwrap();
        let cfg = if cvrp { PolicyConfig::cvrp(8, 1, true) } else { PolicyConfig::tsp(8, 1) };
        let policy = Policy::new(cfg, &mut rng::seeded(seed)).unwrap();
        let env = EnvConfig { vi_features: cvrp, es_features: cvrp, ..EnvConfig::default() };
        let tour = initial_tour(&inst, &mut rng::seeded(seed)).unwrap();
        let state = SearchState::new(inst, tour, &env).unwrap();
        let mut r = rng::seeded(seed);
        let mode = if greedy { DecodeMode::Greedy } else { DecodeMode::Sample(&mut r) };
        let dec = state.propose(&policy, &env, mode, 4).unwrap();
        let es = state.policy_es(&env);
        let lp = policy.trace_logprob(&state.features(&env), &state.tour, es.as_ref(), &dec.trace).unwrap();
        prop_assert!((lp - dec.logprob).abs() < 1e-12);
        prop_assert!(dec.logprob <= 1e-12);
    }
}
