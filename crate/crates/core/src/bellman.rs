//! Average Bellman errors, their estimators, and the zero-reward surrogate.
//!
//! The residual of `f` under reward `R` at level `h` is
//! `f_h(x, a) - R_h(x, a) - E_{x' ~ P_h(.|x,a)} V_f(x')`; an average Bellman
//! error is its expectation under a roll-in to level `h` and an action
//! source at level `h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funclass::{greedy_level, greedy_policy, map_level, QFunction, TieRule, ValueFunction};
use crate::mdp::{
    backup_state_values, policy_value, state_occupancy, DeterministicPolicy, LayeredMdp, LevelValues, RewardTable,
    Trajectory, TransitionTuple,
};

/// Where the level-`h` action comes from.
#[derive(Debug, Clone, Copy)]
pub enum ActionSource<'a> {
    /// A fixed policy `pi'` (Q-type uses the roll-in policy itself).
    Policy(&'a DeterministicPolicy),
    /// The greedy policy of the evaluated function (V-type).
    Greedy,
    /// Uniform over the level's actions.
    Uniform,
}

/// One exact average Bellman error `E^R(f, pi, pi', h)`.
#[derive(Debug, Clone, Copy)]
pub struct BellmanErrorQuery<'a, F: QFunction + ?Sized> {
    pub f: &'a F,
    pub reward: Option<&'a RewardTable>,
    pub roll_in: &'a DeterministicPolicy,
    pub action: ActionSource<'a>,
    pub h: usize,
}

impl<F: QFunction + ?Sized> BellmanErrorQuery<'_, F> {
    pub fn evaluate(&self, mdp: &LayeredMdp) -> f64 {
        exact_avg_bellman_error(mdp, self)
    }
}

/// `f_h - R_h - P_h V_f` on every level-`h` pair.
pub fn residual_level(mdp: &LayeredMdp, f: &(impl QFunction + ?Sized), reward: Option<&RewardTable>, h: usize) -> LevelValues {
    let v_next = f.state_values(mdp, h + 1);
    let backup = backup_state_values(mdp, reward, &v_next, h);
    f.level(h)
        .iter()
        .zip(&backup)
        .map(|(fr, br)| fr.iter().zip(br).map(|(a, b)| a - b).collect())
        .collect()
}

/// Exact `E^R(f, pi, pi', h)` from the level-`h` state occupancy of the
/// roll-in policy and one transition step.
pub fn exact_avg_bellman_error<F: QFunction + ?Sized>(mdp: &LayeredMdp, q: &BellmanErrorQuery<'_, F>) -> f64 {
    assert!(q.h < mdp.horizon(), "level {} out of range", q.h);
    let states = state_occupancy(mdp, q.roll_in, q.h);
    let resid = residual_level(mdp, q.f, q.reward, q.h);
    let greedy = match q.action {
        ActionSource::Greedy => Some(greedy_level(q.f.level(q.h), &TieRule::First, q.h)),
        _ => None,
    };
    let mut total = 0.0;
    for (x, &w) in states.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let r = match q.action {
            ActionSource::Policy(pi) => resid[x][pi.action(q.h, x)],
            ActionSource::Greedy => resid[x][greedy.as_ref().expect("computed above")[x]],
            ActionSource::Uniform => resid[x].iter().sum::<f64>() / resid[x].len() as f64,
        };
        total += w * r;
    }
    total
}

/// Q-type error `E^R_Q(f, pi, h)`: level-`h` action from `pi` itself.
pub fn q_error(mdp: &LayeredMdp, f: &(impl QFunction + ?Sized), reward: Option<&RewardTable>, pi: &DeterministicPolicy, h: usize) -> f64 {
    exact_avg_bellman_error(mdp, &BellmanErrorQuery { f, reward, roll_in: pi, action: ActionSource::Policy(pi), h })
}

/// V-type error `E^R_V(f, pi, h)`: level-`h` action from `pi_f`.
pub fn v_error(mdp: &LayeredMdp, f: &(impl QFunction + ?Sized), reward: Option<&RewardTable>, pi: &DeterministicPolicy, h: usize) -> f64 {
    exact_avg_bellman_error(mdp, &BellmanErrorQuery { f, reward, roll_in: pi, action: ActionSource::Greedy, h })
}

fn nonempty<T>(data: &[T], what: &str) -> Result<()> {
    if data.is_empty() {
        Err(Error::InvalidInput(format!("{what}: empty input")))
    } else {
        Ok(())
    }
}

fn reward_at(reward: Option<&RewardTable>, h: usize, x: usize, a: usize) -> f64 {
    reward.map_or(0.0, |r| r.get(h, x, a))
}

/// `(1/n) sum_i [f_h(x_h, a_h) - V_f(x_{h+1})]` over trajectories.
pub fn est_onpolicy(trajectories: &[Trajectory], f: &(impl QFunction + ?Sized), h: usize) -> Result<f64> {
    est_onpolicy_reward(trajectories, f, None, h)
}

/// The reward-aware on-policy estimate, subtracting `R_h(x_h, a_h)`.
pub fn est_onpolicy_reward(
    trajectories: &[Trajectory],
    f: &(impl QFunction + ?Sized),
    reward: Option<&RewardTable>,
    h: usize,
) -> Result<f64> {
    nonempty(trajectories, "on-policy estimate")?;
    let sum: f64 = trajectories
        .iter()
        .map(|t| {
            let (x, a, y) = (t.states[h], t.actions[h], t.states[h + 1]);
            f.value(h, x, a) - reward_at(reward, h, x, a) - f.state_value(h + 1, y)
        })
        .sum();
    Ok(sum / trajectories.len() as f64)
}

fn check_level(dataset: &[TransitionTuple]) -> Result<usize> {
    nonempty(dataset, "dataset")?;
    let h = dataset[0].h;
    if dataset.iter().any(|t| t.h != h) {
        return Err(Error::InvalidInput("dataset mixes levels".into()));
    }
    Ok(h)
}

/// `(1/n) sum [f_h(x, a) - V_f(x')]`.
pub fn est_q(dataset: &[TransitionTuple], f: &(impl QFunction + ?Sized)) -> Result<f64> {
    est_q_reward(dataset, f, None)
}

/// `(1/n) sum [g_h(x, a) - R_h(x, a) - V_g(x')]`.
pub fn est_q_reward(dataset: &[TransitionTuple], g: &(impl QFunction + ?Sized), reward: Option<&RewardTable>) -> Result<f64> {
    let h = check_level(dataset)?;
    let sum: f64 = dataset
        .iter()
        .map(|t| g.value(h, t.x, t.a) - reward_at(reward, h, t.x, t.a) - g.state_value(h + 1, t.x_next))
        .sum();
    Ok(sum / dataset.len() as f64)
}

/// Importance-weighted V-type estimate on uniform-action data:
/// `(1/n) sum K 1[a = pi'(x)] [g_h(x, a) - R_h(x, a) - V_g(x')]`.
pub fn est_v_is(
    dataset: &[TransitionTuple],
    g: &(impl QFunction + ?Sized),
    reward: Option<&RewardTable>,
    witness: &DeterministicPolicy,
    k: usize,
) -> Result<f64> {
    let h = check_level(dataset)?;
    est_v_is_level(dataset, g, reward, witness.level(h), k)
}

/// As [`est_v_is`] with the witness given by its level-`h` action map.
pub fn est_v_is_level(
    dataset: &[TransitionTuple],
    g: &(impl QFunction + ?Sized),
    reward: Option<&RewardTable>,
    witness: &[usize],
    k: usize,
) -> Result<f64> {
    let h = check_level(dataset)?;
    let sum: f64 = dataset
        .iter()
        .filter(|t| t.a == witness[t.x])
        .map(|t| k as f64 * (g.value(h, t.x, t.a) - reward_at(reward, h, t.x, t.a) - g.state_value(h + 1, t.x_next)))
        .sum();
    Ok(sum / dataset.len() as f64)
}

/// Expectation of the IS estimator by enumerating every `(x, a, x')` with
/// probability `d_h^pi(x) (1/K) P_h(x'|x, a)`.
pub fn expected_v_is(
    mdp: &LayeredMdp,
    roll_in: &DeterministicPolicy,
    g: &(impl QFunction + ?Sized),
    reward: Option<&RewardTable>,
    witness: &DeterministicPolicy,
    h: usize,
) -> f64 {
    let states = state_occupancy(mdp, roll_in, h);
    let k = mdp.num_actions(h);
    let mut total = 0.0;
    for (x, &w) in states.weights.iter().enumerate() {
        for a in 0..k {
            for (y, &p) in mdp.transition(h, x, a).iter().enumerate() {
                let prob = w * p / k as f64;
                if prob == 0.0 {
                    continue;
                }
                let tuple = TransitionTuple { h, x, a, r: reward_at(reward, h, x, a), x_next: y };
                let weight = if a == witness.action(h, x) { k as f64 } else { 0.0 };
                total += prob * weight * (g.value(h, x, a) - tuple.r - g.state_value(h + 1, tuple.x_next));
            }
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn factor(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }

    /// The sign making `sign * value` non-negative.
    pub fn of(value: f64) -> Sign {
        if value >= 0.0 {
            Sign::Positive
        } else {
            Sign::Negative
        }
    }
}

/// Zero-reward surrogate of `g = f + R` at level `h`:
/// `f~_h = +-(g_h - R_h - T0_h g_{h+1})`, `f~_{h'} = T0_{h'} f~_{h'+1}` below
/// `h`, and zero above it.
pub fn surrogate_zero_reward(
    mdp: &LayeredMdp,
    g: &(impl QFunction + ?Sized),
    reward: &RewardTable,
    h: usize,
    sign: Sign,
) -> ValueFunction {
    assert!(h < mdp.horizon());
    let mut levels: Vec<LevelValues> = (0..mdp.horizon()).map(|l| mdp.zero_level(l)).collect();
    let s = sign.factor();
    levels[h] = map_level(&residual_level(mdp, g, Some(reward), h), |v| s * v);
    for l in (0..h).rev() {
        let v_next: Vec<f64> = levels[l + 1].iter().map(|row| crate::mdp::max_or_zero(row)).collect();
        levels[l] = backup_state_values(mdp, None, &v_next, l);
    }
    ValueFunction::from_levels(levels)
}

/// Policy-loss decomposition of `f` under reward `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDecomposition {
    /// `E^R_Q(f, pi_f, h)` for each level.
    pub errors: Vec<f64>,
    /// `V_f(x_0)`.
    pub predicted: f64,
    /// `v^{pi_f}_R`.
    pub achieved: f64,
    /// `V_f(x_0) - v^{pi_f}_R - sum_h errors[h]`.
    pub residual: f64,
}

pub fn policy_loss_decomposition(mdp: &LayeredMdp, reward: &RewardTable, f: &(impl QFunction + ?Sized)) -> LossDecomposition {
    let pi = greedy_policy(mdp, f, &TieRule::First);
    let errors: Vec<f64> = (0..mdp.horizon()).map(|h| q_error(mdp, f, Some(reward), &pi, h)).collect();
    let predicted = f.initial_value(mdp);
    let achieved = policy_value(mdp, &pi, reward);
    let residual = predicted - achieved - errors.iter().sum::<f64>();
    LossDecomposition { errors, predicted, achieved, residual }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{random_mdp, random_reward, rfolive_counterexample};
    use crate::funclass::{reward_append, sup_distance};
    use crate::mdp::{optimal_q, sample_switched, sample_trajectory, ActionSelector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LEFT: usize = 0;
    const RIGHT: usize = 1;

    fn ids(fx: &crate::fixtures::Fixture, l0: &str, l1: &str) -> [usize; 2] {
        [fx.class.index_of(0, l0).unwrap(), fx.class.index_of(1, l1).unwrap()]
    }

    #[test]
    fn optimal_q_has_zero_error() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        for r in fx.rewards.iter() {
            let q = ValueFunction::from_levels(optimal_q(mdp, &r.table).q);
            for a in [LEFT, RIGHT] {
                let pi = DeterministicPolicy::constant(mdp, a);
                for h in 0..2 {
                    assert!(q_error(mdp, &q, Some(&r.table), &pi, h).abs() < 1e-15);
                    assert!(v_error(mdp, &q, Some(&r.table), &pi, h).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn table3_error_examples() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        let r2 = &fx.rewards[1].table;
        let off = reward_append(mdp, &fx.class, r2, "R2");
        let left = DeterministicPolicy::constant(mdp, LEFT);
        let right = DeterministicPolicy::constant(mdp, RIGHT);
        let g_ids = ids(&fx, "f_R1", "0");
        let g = off.member(&g_ids);
        assert!((q_error(mdp, &g, Some(r2), &left, 0) - 0.8).abs() < 1e-15);
        let g_ids = ids(&fx, "f_bad", "f_bad");
        let g = off.member(&g_ids);
        assert!((q_error(mdp, &g, Some(r2), &right, 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn estimator_examples() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let left = DeterministicPolicy::constant(mdp, LEFT);
        let traj = sample_trajectory(mdp, &left, None, &mut rng);
        let f_ids = ids(&fx, "f_R1", "0");
        let f = fx.class.member(&f_ids);
        assert_eq!(est_onpolicy(&[traj.clone()], &f, 0).unwrap(), 1.0);
        let zero = fx.class.member(&[0, 0]);
        assert_eq!(est_onpolicy(&[traj.clone()], &zero, 0).unwrap(), 0.0);
        assert!(matches!(est_onpolicy(&[], &zero, 0), Err(Error::InvalidInput(_))));

        let tuple = traj.tuple(0);
        assert_eq!(est_q(&[tuple], &f).unwrap(), 1.0);
        let r2 = &fx.rewards[1].table;
        let off = reward_append(mdp, &fx.class, r2, "R2");
        let g_ids = ids(&fx, "f_R1", "0");
        let g = off.member(&g_ids);
        assert!((est_q_reward(&[tuple], &g, Some(r2)).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(est_q(&[], &f), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn is_estimator_single_tuples() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        let r2 = &fx.rewards[1].table;
        let off = reward_append(mdp, &fx.class, r2, "R2");
        let g_ids = ids(&fx, "f_R1", "0");
        let g = off.member(&g_ids);
        let left = DeterministicPolicy::constant(mdp, LEFT);
        let right = DeterministicPolicy::constant(mdp, RIGHT);
        let xa = mdp.state_index(1, "xA").unwrap();
        let tuple = TransitionTuple { h: 0, x: 0, a: LEFT, r: 0.0, x_next: xa };
        assert!((est_v_is(&[tuple], &g, Some(r2), &left, 2).unwrap() - 1.6).abs() < 1e-15);
        assert_eq!(est_v_is(&[tuple], &g, Some(r2), &right, 2).unwrap(), 0.0);
    }

    #[test]
    fn is_expectation_matches_exact_error() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        for r in fx.rewards.iter() {
            let off = reward_append(mdp, &fx.class, &r.table, &r.name);
            for member in off.all_ids(1000).unwrap() {
                let g = off.member(&member);
                for roll in [LEFT, RIGHT] {
                    let pi = DeterministicPolicy::constant(mdp, roll);
                    for w in [LEFT, RIGHT] {
                        let witness = DeterministicPolicy::constant(mdp, w);
                        for h in 0..2 {
                            let exact = exact_avg_bellman_error(
                                mdp,
                                &BellmanErrorQuery { f: &g, reward: Some(&r.table), roll_in: &pi, action: ActionSource::Policy(&witness), h },
                            );
                            let is = expected_v_is(mdp, &pi, &g, Some(&r.table), &witness, h);
                            assert!((exact - is).abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn onpolicy_concentrates() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        let f_ids = ids(&fx, "f_bad", "f_bad");
        let f = fx.class.member(&f_ids);
        let pi = greedy_policy(mdp, &f, &TieRule::First);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let trajs: Vec<_> = (0..n).map(|_| sample_trajectory(mdp, &pi, None, &mut rng)).collect();
        let band = 2.0 * ((2.0f64 / 0.01).ln() / (2.0 * n as f64)).sqrt();
        for h in 0..2 {
            let est = est_onpolicy(&trajs, &f, h).unwrap();
            let exact = q_error(mdp, &f, None, &pi, h);
            assert!((est - exact).abs() <= band);
            let tuples: Vec<_> = trajs.iter().map(|t| t.tuple(h)).collect();
            assert_eq!(est_q(&tuples, &f).unwrap(), est);
        }
        let tuples: Vec<_> =
            (0..n).map(|_| sample_switched(mdp, &pi, 0, ActionSelector::Policy(&pi), None, &mut rng)).collect();
        assert!((est_q(&tuples, &f).unwrap() - q_error(mdp, &f, None, &pi, 0)).abs() <= band);
    }

    #[test]
    fn surrogate_examples() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        let r2 = &fx.rewards[1].table;
        let off = reward_append(mdp, &fx.class, r2, "R2");
        let g_ids = ids(&fx, "f_bad", "f_bad");
        let g = off.member(&g_ids);
        let s = surrogate_zero_reward(mdp, &g, r2, 1, Sign::Positive);
        let xa = mdp.state_index(1, "xA").unwrap();
        let xb = mdp.state_index(1, "xB").unwrap();
        assert!((s.value(1, xa, 0) - 0.01).abs() < 1e-15);
        assert!((s.value(1, xb, 0) - 0.1).abs() < 1e-15);
        assert!((s.value(0, 0, LEFT) - 0.01).abs() < 1e-15);
        assert!((s.value(0, 0, RIGHT) - 0.1).abs() < 1e-15);

        let q = ValueFunction::from_levels(optimal_q(mdp, r2).q);
        for h in 0..2 {
            let s = surrogate_zero_reward(mdp, &q, r2, h, Sign::Positive);
            assert!(s.levels().iter().flatten().flatten().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn loss_decomposition_example() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        let r2 = &fx.rewards[1].table;
        let off = reward_append(mdp, &fx.class, r2, "R2");
        let g_ids = ids(&fx, "f_R1", "0");
        let g = off.member(&g_ids);
        let d = policy_loss_decomposition(mdp, r2, &g);
        assert_eq!(d.predicted, 1.0);
        assert!((d.achieved - 0.2).abs() < 1e-15);
        assert!((d.errors.iter().sum::<f64>() - 0.8).abs() < 1e-15);
        assert!(d.residual.abs() < 1e-12);
        let q = ValueFunction::from_levels(optimal_q(mdp, r2).q);
        let d = policy_loss_decomposition(mdp, r2, &q);
        assert!(d.errors.iter().all(|e| e.abs() < 1e-15) && d.residual.abs() < 1e-15);
    }

    fn random_function(mdp: &LayeredMdp, rng: &mut impl Rng) -> ValueFunction {
        let levels = (0..mdp.horizon())
            .map(|h| (0..mdp.num_states(h)).map(|_| (0..mdp.num_actions(h)).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect())
            .collect();
        ValueFunction::from_levels(levels)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn decomposition_identity(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(&mut rng, 4, 3, 3);
            let reward = random_reward(&mut rng, &mdp);
            let f = random_function(&mdp, &mut rng);
            let d = policy_loss_decomposition(&mdp, &reward, &f);
            prop_assert!(d.residual.abs() <= 1e-10);
        }

        #[test]
        fn surrogate_translation(seed in any::<u64>(), h in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = random_mdp(&mut rng, 3, 3, 2);
            let h = h.min(mdp.horizon() - 1);
            let reward = random_reward(&mut rng, &mdp);
            let g = random_function(&mdp, &mut rng);
            let pos = surrogate_zero_reward(&mdp, &g, &reward, h, Sign::Positive);
            let neg = surrogate_zero_reward(&mdp, &g, &reward, h, Sign::Negative);
            prop_assert!(sup_distance(neg.level(h), &pos.negated().levels()[h]) == 0.0);
            for _ in 0..5 {
                let pi = DeterministicPolicy::new(&mdp, (0..mdp.horizon())
                    .map(|l| (0..mdp.num_states(l)).map(|_| rng.gen_range(0..mdp.num_actions(l))).collect())
                    .collect()).unwrap();
                let target = q_error(&mdp, &g, Some(&reward), &pi, h);
                prop_assert!((q_error(&mdp, &pos, None, &pi, h) - target).abs() <= 1e-10);
                prop_assert!((q_error(&mdp, &neg, None, &pi, h) + target).abs() <= 1e-10);
                for l in 0..mdp.horizon() {
                    if l != h {
                        prop_assert!(q_error(&mdp, &pos, None, &pi, l).abs() <= 1e-10);
                    }
                }
                let pi_f = greedy_policy(&mdp, &pos, &TieRule::First);
                let v = v_error(&mdp, &pos, None, &pi, h);
                let via_g = exact_avg_bellman_error(&mdp, &BellmanErrorQuery {
                    f: &g, reward: Some(&reward), roll_in: &pi, action: ActionSource::Policy(&pi_f), h,
                });
                prop_assert!((v - via_g).abs() <= 1e-10);
                let s = surrogate_zero_reward(&mdp, &g, &reward, h, Sign::of(target));
                prop_assert!(s.initial_value(&mdp) >= target.abs() - 1e-10);
            }
        }
    }
}
