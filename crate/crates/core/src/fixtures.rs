//! Constructed instances: the two counterexample MDPs, the JointOlive
//! variant, the tree hardness family, the contextual-bandit separation
//! instance, and random generators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::funclass::{
    check_completeness, check_realizability, greedy_policy, reward_append, sup_distance, zip_level, FiniteClass,
    LevelMember, LinearFeatureMap, NamedReward, QFunction, RewardClass, TieRule, ValueFunction, MEMBERSHIP_TOL,
};
use crate::bellman::{q_error, residual_level};
use crate::mdp::{
    bellman_backup, occupancy, optimal_q, policy_value, sample_stochastic_trajectory, DeterministicPolicy, LayeredMdp,
    LevelValues, RewardTable, StochasticPolicy,
};
use crate::olive::{
    ActionTag, Choice, ConstraintRecord, IterationRecord, Mode, OliveConfig, OliveTrace, Payload, Variant, OPTIMISM_TIE_TOL,
    VERSION_SPACE_CAP,
};
use crate::rfolive::{offline_phase, ConstraintSet};

/// An MDP with a function class and a reward class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub mdp: LayeredMdp,
    pub class: FiniteClass,
    pub rewards: RewardClass,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// `x0 --left--> xA`, `x0 --right--> xB`, then a single terminal state.
fn two_arm_mdp() -> LayeredMdp {
    LayeredMdp::new(
        vec![vec!["x0".into()], vec!["xA".into(), "xB".into()], vec!["x_NULL".into()]],
        vec![2, 1],
        Some(vec![vec!["left".into(), "right".into()], vec!["NULL".into()]]),
        vec![vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]], vec![vec![vec![1.0]], vec![vec![1.0]]]],
        0,
    )
    .expect("valid two-arm MDP")
}

fn two_arm_rewards(mdp: &LayeredMdp) -> RewardClass {
    let table = |a: f64, b: f64| RewardTable::new(mdp, vec![vec![vec![0.0, 0.0]], vec![vec![a], vec![b]]]).expect("valid reward");
    RewardClass::new(vec![
        NamedReward { name: "R1".into(), table: table(1.0, 0.0) },
        NamedReward { name: "R2".into(), table: table(0.2, 0.1) },
    ])
    .expect("non-empty")
}

fn member(name: &str, values: LevelValues) -> LevelMember {
    LevelMember { name: name.into(), values }
}

fn two_arm_class(mdp: &LayeredMdp, bad0: [f64; 2], bad1: Option<[f64; 2]>) -> FiniteClass {
    let level0 = vec![
        member("0", vec![vec![0.0, 0.0]]),
        member("f_R1", vec![vec![1.0, 0.0]]),
        member("f_R2", vec![vec![0.2, 0.1]]),
        member("f_bad", vec![bad0.to_vec()]),
    ];
    let mut level1 = vec![member("0", vec![vec![0.0], vec![0.0]])];
    if let Some([a, b]) = bad1 {
        level1.push(member("f_bad", vec![vec![a], vec![b]]));
    }
    FiniteClass::new(mdp, vec![level0, level1]).expect("valid class")
}

/// The RFOLIVE counterexample: realizable but not complete.
///
/// `f_bad = (0.21, 0.3)` at `x0` and `(0.01, 0.1)` at `(xA, xB)`; the rewards
/// are `R1 = (1, 0)` and `R2 = (0.2, 0.1)` at `(xA, xB)`, zero at `x0`.
pub fn rfolive_counterexample() -> Fixture {
    let mdp = two_arm_mdp();
    let class = two_arm_class(&mdp, [0.21, 0.3], Some([0.01, 0.1]));
    let rewards = two_arm_rewards(&mdp);
    Fixture { mdp, class, rewards }
}

/// The JointOlive counterexample: realizable and complete, with
/// `f_bad = (0.2, 0.3)` at `x0` and `F_1 = {0}`.
pub fn jointolive_counterexample() -> Fixture {
    let mdp = two_arm_mdp();
    let class = two_arm_class(&mdp, [0.2, 0.3], None);
    let rewards = two_arm_rewards(&mdp);
    Fixture { mdp, class, rewards }
}

/// Random layered MDP: one start state, `states` states at each inner level,
/// one terminal state, `actions` actions everywhere.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, states: usize, actions: usize, horizon: usize) -> LayeredMdp {
    let mut sizes = vec![states; horizon + 1];
    sizes[0] = 1;
    sizes[horizon] = 1;
    random_layered_mdp(rng, &sizes, &vec![actions; horizon])
}

/// Random layered MDP with explicit level sizes (`sizes` has `H + 1`
/// entries). Transition rows are skewed so some are nearly deterministic.
pub fn random_layered_mdp<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize], actions: &[usize]) -> LayeredMdp {
    let horizon = actions.len();
    assert_eq!(sizes.len(), horizon + 1, "sizes must cover the terminal level");
    let states = (0..=horizon).map(|h| names(&format!("s{h}_"), sizes[h])).collect();
    let transitions = (0..horizon)
        .map(|h| {
            (0..sizes[h])
                .map(|_| {
                    (0..actions[h])
                        .map(|_| {
                            let raw: Vec<f64> = (0..sizes[h + 1]).map(|_| rng.gen::<f64>().powi(3)).collect();
                            let total: f64 = raw.iter().sum();
                            if total == 0.0 {
                                let mut row = vec![0.0; raw.len()];
                                row[0] = 1.0;
                                row
                            } else {
                                raw.iter().map(|w| w / total).collect()
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    LayeredMdp::new(states, actions.to_vec(), None, transitions, 0).expect("generated MDP is valid")
}

/// Uniform `[0, 1]` rewards on every pair.
pub fn random_reward<R: Rng + ?Sized>(rng: &mut R, mdp: &LayeredMdp) -> RewardTable {
    let levels = (0..mdp.horizon())
        .map(|h| (0..mdp.num_states(h)).map(|_| (0..mdp.num_actions(h)).map(|_| rng.gen::<f64>()).collect()).collect())
        .collect();
    RewardTable::new(mdp, levels).expect("rewards in range")
}

/// Sizes for [`random_closed_instance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSizes {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub rewards: usize,
}

impl Default for InstanceSizes {
    fn default() -> Self {
        InstanceSizes { states: 3, actions: 2, horizon: 3, rewards: 3 }
    }
}

/// Attempts before [`random_closed_instance`] gives up.
pub const GENERATION_BUDGET: usize = 100;

fn push_distinct(level: &mut Vec<LevelMember>, name: String, values: LevelValues) {
    if !level.iter().any(|m| sup_distance(&m.values, &values) <= 1e-12) {
        level.push(LevelMember { name, values });
    }
}

/// A random MDP with a reward class and a function class closed under the
/// backups the algorithm needs.
///
/// Built backwards from `F_{H-1} = {0}`:
/// `F_h = {0} u T0 F_{h+1} u T0 (F_{h+1} + R_{h+1}) u T0 (F_{h+1} - F_{h+1})`.
/// Draws whose members leave the range `[-(H-h-1), H-h-1]` are rejected;
/// the emitted instance always passes both assumption checkers.
pub fn random_closed_instance<R: Rng + ?Sized>(rng: &mut R, sizes: InstanceSizes) -> Result<Fixture> {
    if sizes.horizon == 0 || sizes.states == 0 || sizes.actions == 0 || sizes.rewards == 0 {
        return Err(Error::InvalidInput("instance sizes must be positive".into()));
    }
    if sizes.states > 8 || sizes.actions > 4 || sizes.horizon > 4 || sizes.rewards > 6 {
        return Err(Error::Unsupported("instance sizes beyond the generator caps".into()));
    }
    let horizon = sizes.horizon;
    for _ in 0..GENERATION_BUDGET {
        let mdp = random_mdp(rng, sizes.states, sizes.actions, horizon);
        let rewards = RewardClass::new(
            (0..sizes.rewards).map(|i| NamedReward { name: format!("R{}", i + 1), table: random_reward(rng, &mdp) }).collect(),
        )?;
        let mut levels: Vec<Vec<LevelMember>> = vec![Vec::new(); horizon];
        levels[horizon - 1].push(LevelMember { name: "0".into(), values: mdp.zero_level(horizon - 1) });
        for h in (0..horizon - 1).rev() {
            let next = levels[h + 1].clone();
            let mut here = vec![LevelMember { name: "0".into(), values: mdp.zero_level(h) }];
            for m in &next {
                push_distinct(&mut here, format!("T({})", m.name), bellman_backup(&mdp, None, &m.values, h));
            }
            for r in rewards.iter() {
                for m in &next {
                    let shifted = zip_level(&m.values, r.table.level(h + 1), |a, b| a + b);
                    push_distinct(&mut here, format!("T({}+{})", m.name, r.name), bellman_backup(&mdp, None, &shifted, h));
                }
            }
            for a in &next {
                for b in &next {
                    let diff = zip_level(&a.values, &b.values, |x, y| x - y);
                    push_distinct(&mut here, format!("T({}-{})", a.name, b.name), bellman_backup(&mdp, None, &diff, h));
                }
            }
            levels[h] = here;
        }
        let bounds: Vec<f64> = (0..horizon).map(|h| (horizon - h - 1) as f64).collect();
        let Ok(class) = FiniteClass::with_bounds(&mdp, levels, Some(bounds)) else {
            continue;
        };
        if check_realizability(&mdp, &class, &rewards, MEMBERSHIP_TOL).passed
            && check_completeness(&mdp, &class, &rewards, MEMBERSHIP_TOL).passed
        {
            return Ok(Fixture { mdp, class, rewards });
        }
    }
    Err(Error::Generator(format!("no closed instance within {GENERATION_BUDGET} draws")))
}

/// One-hot features for a tabular MDP with the factorisation
/// `P_h(x'|x, a) = <phi_h(x, a), mu_h(x')>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLinear {
    pub feature: LinearFeatureMap,
    /// `mu[h][x'][k]`.
    pub mu: Vec<Vec<Vec<f64>>>,
    /// Largest `|P - <phi, mu>|`.
    pub residual: f64,
    /// Largest `|sum_x' f(x') mu_h(x')|_2` over `f` in `{-1, 1}^X'` (or an
    /// upper bound on it for levels with more than 16 states).
    pub mu_norm: f64,
}

/// One-hot feature index of `(x, a)`.
fn one_hot_index(mdp: &LayeredMdp, h: usize, x: usize, a: usize) -> usize {
    x * mdp.num_actions(h) + a
}

/// Writes `mdp` as a linear MDP with one-hot features of dimension
/// `|X_h| K_h` per level.
pub fn tabular_as_linear_mdp(mdp: &LayeredMdp) -> TabularLinear {
    let horizon = mdp.horizon();
    let values = (0..horizon)
        .map(|h| {
            let d = mdp.num_pairs(h);
            (0..mdp.num_states(h))
                .map(|x| {
                    (0..mdp.num_actions(h))
                        .map(|a| {
                            let mut phi = vec![0.0; d];
                            phi[one_hot_index(mdp, h, x, a)] = 1.0;
                            phi
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let feature = LinearFeatureMap::new(mdp, values).expect("one-hot features are valid");
    let mut mu = Vec::with_capacity(horizon);
    let mut residual: f64 = 0.0;
    let mut mu_norm: f64 = 0.0;
    for h in 0..horizon {
        let d = mdp.num_pairs(h);
        let next = mdp.num_states(h + 1);
        let mut level = vec![vec![0.0; d]; next];
        for x in 0..mdp.num_states(h) {
            for a in 0..mdp.num_actions(h) {
                for (y, &p) in mdp.transition(h, x, a).iter().enumerate() {
                    level[y][one_hot_index(mdp, h, x, a)] = p;
                }
            }
        }
        for x in 0..mdp.num_states(h) {
            for a in 0..mdp.num_actions(h) {
                let phi = feature.phi(h, x, a);
                for (y, &p) in mdp.transition(h, x, a).iter().enumerate() {
                    let inner: f64 = phi.iter().zip(&level[y]).map(|(u, v)| u * v).sum();
                    residual = residual.max((inner - p).abs());
                }
            }
        }
        let norm = |signs: &dyn Fn(usize) -> f64| -> f64 {
            (0..d).map(|k| (0..next).map(|y| signs(y) * level[y][k]).sum::<f64>().powi(2)).sum::<f64>().sqrt()
        };
        let level_norm = if next <= 16 {
            (0..1u32 << next)
                .map(|bits| norm(&|y| if bits >> y & 1 == 1 { 1.0 } else { -1.0 }))
                .fold(0.0, f64::max)
        } else {
            (0..d).map(|k| (0..next).map(|y| level[y][k].abs()).sum::<f64>().powi(2)).sum::<f64>().sqrt()
        };
        mu_norm = mu_norm.max(level_norm / (d as f64).sqrt());
        mu.push(level);
    }
    TabularLinear { feature, mu, residual, mu_norm }
}

/// Largest horizon the tree family accepts.
pub const TREE_HORIZON_CAP: usize = 10;

/// One-dimensional level feature `[x][a][k]`.
pub type LevelFeature = Vec<Vec<Vec<f64>>>;

/// One member of the tree hardness family.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessInstance {
    pub index: usize,
    pub mdp: LayeredMdp,
    pub reward: RewardTable,
    /// The level-`(H-2)` pair that reaches `x+` (with certainty in the exact
    /// construction, with the extra `eps` in the perturbed one).
    pub star: (usize, usize),
    /// Feature realising linear completeness on this instance.
    pub feature: LinearFeatureMap,
}

/// The family and its shared per-level feature candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct HardnessFamily {
    pub horizon: usize,
    pub instances: Vec<HardnessInstance>,
    /// `candidates[h]` for the tree levels `0..H-1`: one one-hot feature per
    /// level-`h` pair. The last level's feature is fixed.
    pub candidates: Vec<Vec<LevelFeature>>,
    pub last_level: LevelFeature,
}

impl HardnessFamily {
    /// `prod_h |candidates[h]|`.
    pub fn feature_class_size(&self) -> u128 {
        self.candidates.iter().map(|c| c.len() as u128).product()
    }

    /// States at the last two levels combined.
    pub fn last_two_level_states(&self) -> usize {
        let mdp = &self.instances[0].mdp;
        mdp.num_states(self.horizon - 2) + mdp.num_states(self.horizon - 1)
    }
}

fn tree_pair_feature(states: usize, pair: usize) -> LevelFeature {
    (0..states).map(|x| (0..2).map(|a| vec![if 2 * x + a == pair { 1.0 } else { 0.0 }]).collect()).collect()
}

/// The complete-binary-tree family of horizon `H`: `2^(H-1)` instances that
/// differ only in which level-`(H-2)` pair leads to the rewarding state
/// `x+`.
///
/// Tree levels `0..=H-2` have `2^h` states and two actions (`(x, a)` leads to
/// child `2x + a`); level `H-1` has `x+` and `x-` with one action; the reward
/// is 1 at `x+`. With `perturbation = Some(eps)` every leaf pair moves to
/// `x+` with probability 1/2 and the star pair with `1/2 + eps`; the last
/// level then uses the two-dimensional feature `(1, -1)/sqrt 2` at `x+` and
/// its negation at `x-`.
pub fn tree_hardness_family(horizon: usize, perturbation: Option<f64>) -> Result<HardnessFamily> {
    if horizon < 3 {
        return Err(Error::InvalidInput("tree family needs H >= 3".into()));
    }
    if horizon > TREE_HORIZON_CAP {
        return Err(Error::Unsupported(format!("tree family capped at H = {TREE_HORIZON_CAP}")));
    }
    if let Some(eps) = perturbation {
        if !(0.0 < eps && eps <= 0.5) {
            return Err(Error::InvalidInput("perturbation must lie in (0, 1/2]".into()));
        }
    }
    let leaf = horizon - 2;
    let mut states: Vec<Vec<String>> = (0..=leaf).map(|h| names(&format!("t{h}_"), 1 << h)).collect();
    states.push(vec!["x+".into(), "x-".into()]);
    states.push(vec!["end".into()]);
    let mut actions = vec![2; horizon];
    actions[horizon - 1] = 1;

    let candidates: Vec<Vec<LevelFeature>> =
        (0..=leaf).map(|h| (0..2usize << h).map(|p| tree_pair_feature(1 << h, p)).collect()).collect();
    let last_level: LevelFeature = match perturbation {
        None => vec![vec![vec![1.0]], vec![vec![0.0]]],
        Some(_) => {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            vec![vec![vec![s, -s]], vec![vec![-s, s]]]
        }
    };

    let mut instances = Vec::with_capacity(1 << (horizon - 1));
    for i in 0..1usize << (horizon - 1) {
        let star = (i >> 1, i & 1);
        let mut transitions: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(horizon);
        for h in 0..leaf {
            transitions.push(
                (0..1usize << h)
                    .map(|x| {
                        (0..2)
                            .map(|a| {
                                let mut row = vec![0.0; 1 << (h + 1)];
                                row[2 * x + a] = 1.0;
                                row
                            })
                            .collect()
                    })
                    .collect(),
            );
        }
        transitions.push(
            (0..1usize << leaf)
                .map(|x| {
                    (0..2)
                        .map(|a| {
                            let hit = (x, a) == star;
                            match perturbation {
                                None if hit => vec![1.0, 0.0],
                                None => vec![0.0, 1.0],
                                Some(eps) => {
                                    let p = if hit { 0.5 + eps } else { 0.5 };
                                    vec![p, 1.0 - p]
                                }
                            }
                        })
                        .collect()
                })
                .collect(),
        );
        transitions.push(vec![vec![vec![1.0]], vec![vec![1.0]]]);
        let mdp = LayeredMdp::new(states.clone(), actions.clone(), None, transitions, 0)?;

        let mut reward_levels: Vec<LevelValues> = (0..horizon).map(|h| mdp.zero_level(h)).collect();
        reward_levels[horizon - 1][0][0] = 1.0;
        let reward = RewardTable::new(&mdp, reward_levels)?;

        let mut feature_levels: Vec<LevelFeature> =
            (0..=leaf).map(|h| candidates[h][i >> (leaf - h)].clone()).collect();
        feature_levels.push(last_level.clone());
        let feature = LinearFeatureMap::new(&mdp, feature_levels)?;
        instances.push(HardnessInstance { index: i, mdp, reward, star, feature });
    }
    Ok(HardnessFamily { horizon, instances, candidates, last_level })
}

/// Episodes of uniformly random play until the first visit to state `x` at
/// level `h`; `None` if `cap` episodes pass without one.
pub fn uniform_episodes_to_visit<R: Rng + ?Sized>(mdp: &LayeredMdp, h: usize, x: usize, cap: usize, rng: &mut R) -> Option<usize> {
    let uniform = StochasticPolicy::uniform(mdp);
    (1..=cap).find(|_| sample_stochastic_trajectory(mdp, &uniform, None, rng).states[h] == x)
}

/// The contextual-bandit separation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    pub n: usize,
    pub mdp: LayeredMdp,
    pub reward: RewardTable,
    /// `f_1, ..., f_N, f*` (the last is the optimal Q-function).
    pub functions: Vec<ValueFunction>,
    /// Greedy policies of `f_1, ..., f_N`.
    pub policies: Vec<DeterministicPolicy>,
}

impl BanditInstance {
    pub fn optimal(&self) -> &ValueFunction {
        self.functions.last().expect("f* present")
    }
}

/// `N` contexts drawn uniformly, actions `a1, a2`, reward 1/2 for `a2`.
///
/// The context draw is modelled as a one-action root level, so the bandit
/// sits at level 1 of a horizon-2 MDP. `f*(x, a1) = 0`, `f*(x, a2) = 1/2`,
/// and `f_i` agrees with `f*` except `f_i(i, a1) = 1`. Level 0 of each
/// function is its exact backup, so every residual lives at level 1.
pub fn contextual_bandit_instance(n: usize) -> Result<BanditInstance> {
    if n < 2 {
        return Err(Error::InvalidInput("bandit instance needs N >= 2".into()));
    }
    let contexts = names("c", n);
    let mdp = LayeredMdp::new(
        vec![vec!["root".into()], contexts, vec!["end".into()]],
        vec![1, 2],
        Some(vec![vec!["draw".into()], vec!["a1".into(), "a2".into()]]),
        vec![vec![vec![vec![1.0 / n as f64; n]]], vec![vec![vec![1.0], vec![1.0]]; n]],
        0,
    )?;
    let reward = RewardTable::new(&mdp, vec![vec![vec![0.0]], vec![vec![0.0, 0.5]; n]])?;
    let build = |flip: Option<usize>| {
        let mut level1 = vec![vec![0.0, 0.5]; n];
        if let Some(i) = flip {
            level1[i][0] = 1.0;
        }
        let level0 = bellman_backup(&mdp, Some(&reward), &level1, 0);
        ValueFunction::new(&mdp, vec![level0, level1]).expect("valid function")
    };
    let mut functions: Vec<ValueFunction> = (0..n).map(|i| build(Some(i))).collect();
    functions.push(build(None));
    let policies = functions[..n].iter().map(|f| greedy_policy(&mdp, f, &TieRule::First)).collect();
    Ok(BanditInstance { n, mdp, reward, functions, policies })
}

/// Per-reward output of JointOlive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointOutput {
    pub reward: String,
    pub policy: DeterministicPolicy,
    pub value: f64,
    pub suboptimality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOliveResult {
    pub trace: OliveTrace,
    pub constraints: ConstraintSet,
    pub outputs: Vec<JointOutput>,
}

/// JointOlive: OLIVE over the joint class `F + R` with each candidate judged
/// under its own reward.
///
/// Candidates are ordered with `f` outer and the reward inner. On
/// termination the roll-out distributions of the final policy at every level
/// are kept as constraints, and each revealed reward is then handled by the
/// same offline elimination as RFOLIVE (threshold `tau_off`, default
/// `eps_elim / 2`). Exact mode only.
pub fn run_jointolive(
    mdp: &LayeredMdp,
    class: &FiniteClass,
    rewards: &RewardClass,
    config: &OliveConfig,
    tau_off: Option<f64>,
) -> Result<JointOliveResult> {
    config.validate()?;
    if config.mode != Mode::Exact || config.variant != Variant::Q {
        return Err(Error::Unsupported("JointOlive is implemented for exact Q-type runs only".into()));
    }
    let horizon = mdp.horizon();
    let joint: Vec<FiniteClass> = rewards.iter().map(|r| reward_append(mdp, class, &r.table, &r.name)).collect();
    let mut survivors: Vec<(Vec<usize>, usize)> =
        class.all_ids(VERSION_SPACE_CAP)?.into_iter().flat_map(|ids| (0..rewards.len()).map(move |r| (ids.clone(), r))).collect();
    let mut records: Vec<ConstraintRecord> = Vec::new();
    let mut trace = OliveTrace::default();

    for t in 0..config.t_max {
        if survivors.is_empty() {
            return Err(Error::AssumptionViolation(format!("joint version space empty at iteration {t}")));
        }
        let survivors_before = survivors.len();
        let values: Vec<f64> = survivors.iter().map(|(ids, r)| joint[*r].member(ids).initial_value(mdp)).collect();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..survivors.len()).filter(|&i| values[i] >= best - OPTIMISM_TIE_TOL).collect();
        let pick = match &config.tie_break.optimism {
            Choice::Lowest => tied[0],
            Choice::Highest => *tied.last().expect("non-empty"),
            Choice::Scripted(s) => s.get(t).and_then(|&k| tied.get(k).copied()).unwrap_or(tied[0]),
        };
        let (ids, r) = survivors[pick].clone();
        let g = joint[r].member(&ids);
        let reward = &rewards[r].table;
        let policy = greedy_policy(mdp, &g, &TieRule::First);
        let errors: Vec<f64> = (0..horizon).map(|h| q_error(mdp, &g, Some(reward), &policy, h)).collect();
        let mut record = IterationRecord {
            t,
            chosen: ids.iter().copied().chain([r]).collect(),
            chosen_name: joint[r].member_name(&ids),
            v_opt: best,
            errors: errors.clone(),
            deviation: None,
            survivors_before,
            survivors_after: survivors_before,
            terminated: false,
        };
        if errors.iter().sum::<f64>() <= horizon as f64 * config.eps_actv {
            record.terminated = true;
            trace.iterations.push(record);
            // Keep the termination check's roll-outs as constraints.
            for h in 0..horizon {
                records.push(ConstraintRecord {
                    t,
                    h,
                    policy: policy.clone(),
                    source: ActionTag::RollIn,
                    payload: Payload::Exact { distribution: occupancy(mdp, &policy, h) },
                });
            }
            let constraints = ConstraintSet { variant: Variant::Q, mode: Mode::Exact, records, cover: None };
            let tau = tau_off.unwrap_or(config.eps_elim / 2.0);
            let outputs = rewards
                .iter()
                .map(|r| {
                    let out = offline_phase(mdp, &constraints, class, r, tau)?;
                    let optimum = optimal_q(mdp, &r.table).value;
                    let value = policy_value(mdp, &out.policy, &r.table);
                    Ok(JointOutput { reward: r.name.clone(), policy: out.policy, value, suboptimality: optimum - value })
                })
                .collect::<Result<_>>()?;
            return Ok(JointOliveResult { trace, constraints, outputs });
        }
        let levels: Vec<usize> = (0..horizon).filter(|&h| errors[h] > config.eps_actv).collect();
        let h = match &config.tie_break.deviation {
            Choice::Lowest => levels[0],
            Choice::Highest => *levels.last().expect("non-empty"),
            Choice::Scripted(s) => s.get(t).copied().filter(|h| levels.contains(h)).unwrap_or(levels[0]),
        };
        let distribution = occupancy(mdp, &policy, h);
        survivors.retain(|(ids, r)| {
            let g = joint[*r].member(ids);
            let resid = residual_level(mdp, &g, Some(&rewards[*r].table), h);
            distribution.expect(&resid).abs() <= config.eps_elim
        });
        record.deviation = Some(h);
        record.survivors_after = survivors.len();
        trace.iterations.push(record);
        records.push(ConstraintRecord { t, h, policy, source: ActionTag::RollIn, payload: Payload::Exact { distribution } });
    }
    Err(Error::CapExceeded { cap: config.t_max, trace: Box::new(trace) })
}
