use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfolive::fixtures::{random_closed_instance, random_layered_mdp, random_reward, InstanceSizes};
use rfolive::funclass::{check_completeness, check_realizability, MEMBERSHIP_TOL};
use rfolive::mdp::{optimal_q, policy_value, state_occupancy, DeterministicPolicy, LayeredMdp};
use rfolive::olive::Variant;
use rfolive::rfolive::{run_reward_free, ConstraintSet, RewardFreeParams};
use rfolive::rng::{stream, stream_rng};

fn random_policy(rng: &mut ChaCha8Rng, mdp: &LayeredMdp) -> DeterministicPolicy {
    let actions = (0..mdp.horizon()).map(|h| (0..mdp.num_states(h)).map(|_| rng.gen_range(0..mdp.num_actions(h))).collect()).collect();
    DeterministicPolicy::new(mdp, actions).unwrap()
}

fn layered(seed: u64) -> LayeredMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.gen_range(1..=4);
    let sizes: Vec<usize> = (0..=horizon).map(|_| rng.gen_range(1..=5)).collect();
    let actions: Vec<usize> = (0..horizon).map(|_| rng.gen_range(1..=3)).collect();
    random_layered_mdp(&mut rng, &sizes, &actions)
}

#[test]
fn generated_instances_are_closed_and_realizable() {
    for seed in 0..5 {
        let fx = random_closed_instance(&mut stream_rng(seed, stream::GENERATOR), InstanceSizes::default()).unwrap();
        assert!(check_realizability(&fx.mdp, &fx.class, &fx.rewards, MEMBERSHIP_TOL).passed);
        assert!(check_completeness(&fx.mdp, &fx.class, &fx.rewards, MEMBERSHIP_TOL).passed);
    }
}

#[test]
fn constraint_sets_survive_json() {
    let fx = random_closed_instance(&mut stream_rng(1, stream::GENERATOR), InstanceSizes::default()).unwrap();
    for variant in [Variant::Q, Variant::V] {
        let params = RewardFreeParams { eps: 0.2, variant, ..Default::default() };
        let res = run_reward_free(&fx.mdp, &fx.class, &fx.rewards, &params, &mut stream_rng(1, stream::ONLINE)).unwrap();
        let back = ConstraintSet::from_json(&res.constraints.to_json()).unwrap();
        assert_eq!(back, res.constraints);
    }
}

#[test]
fn mdp_json_round_trip() {
    let mdp = layered(9);
    let text = serde_json::to_string(&mdp).unwrap();
    let back: LayeredMdp = serde_json::from_str(&text).unwrap();
    assert_eq!(back, mdp);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupancy_is_a_distribution(seed in any::<u64>()) {
        let mdp = layered(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let pi = random_policy(&mut rng, &mdp);
        for h in 0..=mdp.horizon() {
            let d = state_occupancy(&mdp, &pi, h);
            prop_assert!(d.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn optimal_value_dominates(seed in any::<u64>()) {
        let mdp = layered(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let reward = random_reward(&mut rng, &mdp);
        let opt = optimal_q(&mdp, &reward);
        prop_assert!((policy_value(&mdp, &opt.policy(), &reward) - opt.value).abs() < 1e-12);
        for _ in 0..5 {
            let pi = random_policy(&mut rng, &mdp);
            prop_assert!(policy_value(&mdp, &pi, &reward) <= opt.value + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn reward_free_runs_are_near_optimal(seed in 0u64..1000, v in any::<bool>()) {
        let fx = random_closed_instance(&mut stream_rng(seed, stream::GENERATOR), InstanceSizes::default()).unwrap();
        let variant = if v { Variant::V } else { Variant::Q };
        let params = RewardFreeParams { eps: 0.2, variant, ..Default::default() };
        let res = run_reward_free(&fx.mdp, &fx.class, &fx.rewards, &params, &mut stream_rng(seed, stream::ONLINE)).unwrap();
        for out in &res.outputs {
            prop_assert!(out.suboptimality <= 0.2 + 1e-12, "{}: {}", out.reward, out.suboptimality);
            prop_assert!(out.survivors >= 1);
        }
    }
}
