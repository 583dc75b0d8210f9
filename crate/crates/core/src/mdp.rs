//! Finite, layered, episodic MDPs with explicit transition tensors.
//!
//! States are indexed per level (`0..num_states(h)`), actions per level
//! (`0..num_actions(h)`). Transitions from level `h` land on level `h + 1`;
//! level `H` is terminal and carries no actions or rewards. All quantities
//! here are exact: occupancies and values come from forward/backward dynamic
//! programming, sampling is only used by the data-collection paths.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on transition row sums and distribution masses.
pub const PROB_TOL: f64 = 1e-12;

/// Values of one level, indexed `[state][action]`.
pub type LevelValues = Vec<Vec<f64>>;

thread_local! {
    static SAMPLER_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of environment sampler calls made on this thread so far.
///
/// Every draw of a trajectory or a transition tuple bumps this counter; it
/// lets tests assert that a code path never touches the environment.
pub fn sampler_calls() -> u64 {
    SAMPLER_CALLS.with(|c| c.get())
}

fn count_sampler_call() {
    SAMPLER_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ActionCounts {
    Uniform(usize),
    PerLevel(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MdpJson {
    horizon: usize,
    states: Vec<Vec<String>>,
    actions: ActionCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_names: Option<Vec<Vec<String>>>,
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    start: String,
}

/// A finite-horizon layered MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpJson", into = "MdpJson")]
pub struct LayeredMdp {
    horizon: usize,
    states: Vec<Vec<String>>,
    actions: Vec<usize>,
    action_names: Option<Vec<Vec<String>>>,
    transitions: Vec<Vec<Vec<Vec<f64>>>>,
    start: usize,
}

impl TryFrom<MdpJson> for LayeredMdp {
    type Error = Error;

    fn try_from(raw: MdpJson) -> Result<Self> {
        let actions = match raw.actions {
            ActionCounts::Uniform(k) => vec![k; raw.horizon],
            ActionCounts::PerLevel(v) => v,
        };
        let start = raw
            .states
            .first()
            .and_then(|level| level.iter().position(|s| *s == raw.start))
            .ok_or_else(|| Error::InvalidModel(format!("start state {:?} not in level 0", raw.start)))?;
        LayeredMdp::new(raw.states, actions, raw.action_names, raw.transitions, start)
    }
}

impl From<LayeredMdp> for MdpJson {
    fn from(m: LayeredMdp) -> Self {
        let actions = match m.actions.first() {
            Some(&k) if m.actions.iter().all(|&a| a == k) => ActionCounts::Uniform(k),
            _ => ActionCounts::PerLevel(m.actions.clone()),
        };
        MdpJson {
            horizon: m.horizon,
            start: m.states[0][m.start].clone(),
            states: m.states,
            actions,
            action_names: m.action_names,
            transitions: m.transitions,
        }
    }
}

impl LayeredMdp {
    /// Builds and validates an MDP.
    ///
    /// `states` has `H + 1` levels (the last is terminal), `actions[h]` is the
    /// action count at level `h`, and `transitions[h][x][a]` is a probability
    /// vector over the states of level `h + 1`.
    pub fn new(
        states: Vec<Vec<String>>,
        actions: Vec<usize>,
        action_names: Option<Vec<Vec<String>>>,
        transitions: Vec<Vec<Vec<Vec<f64>>>>,
        start: usize,
    ) -> Result<Self> {
        let horizon = actions.len();
        if horizon == 0 {
            return Err(Error::InvalidModel("horizon must be at least 1".into()));
        }
        if states.len() != horizon + 1 {
            return Err(Error::InvalidModel(format!(
                "expected {} state levels (horizon + terminal), got {}",
                horizon + 1,
                states.len()
            )));
        }
        if let Some((h, _)) = states.iter().enumerate().find(|(_, l)| l.is_empty()) {
            return Err(Error::InvalidModel(format!("level {h} has no states")));
        }
        if start >= states[0].len() {
            return Err(Error::InvalidModel("start state out of range".into()));
        }
        if transitions.len() != horizon {
            return Err(Error::InvalidModel(format!(
                "expected {horizon} transition levels, got {}",
                transitions.len()
            )));
        }
        for h in 0..horizon {
            if actions[h] == 0 {
                return Err(Error::InvalidModel(format!("level {h} has no actions")));
            }
            let level = &transitions[h];
            if level.len() != states[h].len() {
                return Err(Error::InvalidModel(format!("level {h}: transition table has wrong state count")));
            }
            for (x, rows) in level.iter().enumerate() {
                if rows.len() != actions[h] {
                    return Err(Error::InvalidModel(format!("level {h} state {x}: wrong action count")));
                }
                for (a, row) in rows.iter().enumerate() {
                    if row.len() != states[h + 1].len() {
                        return Err(Error::InvalidModel(format!(
                            "P_{h}(.|{x},{a}) has length {}, level {} has {} states",
                            row.len(),
                            h + 1,
                            states[h + 1].len()
                        )));
                    }
                    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                        return Err(Error::InvalidModel(format!("P_{h}(.|{x},{a}) has a negative or non-finite entry")));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > PROB_TOL {
                        return Err(Error::InvalidModel(format!("P_{h}(.|{x},{a}) sums to {sum}")));
                    }
                }
            }
        }
        if let Some(names) = &action_names {
            if names.len() != horizon || names.iter().zip(&actions).any(|(n, &k)| n.len() != k) {
                return Err(Error::InvalidModel("action_names does not match action counts".into()));
            }
        }
        Ok(LayeredMdp { horizon, states, actions, action_names, transitions, start })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mdp serializes")
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of states at level `h` (`h == horizon` is the terminal level).
    pub fn num_states(&self, h: usize) -> usize {
        self.states[h].len()
    }

    pub fn num_actions(&self, h: usize) -> usize {
        self.actions[h]
    }

    pub fn state_name(&self, h: usize, x: usize) -> &str {
        &self.states[h][x]
    }

    pub fn state_index(&self, h: usize, name: &str) -> Option<usize> {
        self.states[h].iter().position(|s| s == name)
    }

    pub fn action_name(&self, h: usize, a: usize) -> String {
        match &self.action_names {
            Some(names) => names[h][a].clone(),
            None => a.to_string(),
        }
    }

    pub fn start(&self) -> usize {
        self.start
    }

    /// `P_h(. | x, a)` as a vector over level `h + 1`.
    pub fn transition(&self, h: usize, x: usize, a: usize) -> &[f64] {
        &self.transitions[h][x][a]
    }

    /// Total number of state-action pairs at level `h`.
    pub fn num_pairs(&self, h: usize) -> usize {
        self.states[h].len() * self.actions[h]
    }

    /// A zero table shaped like level `h`.
    pub fn zero_level(&self, h: usize) -> LevelValues {
        if h == self.horizon {
            return vec![Vec::new(); self.num_states(h)];
        }
        vec![vec![0.0; self.actions[h]]; self.num_states(h)]
    }

    pub fn is_deterministic(&self) -> bool {
        self.transitions
            .iter()
            .flatten()
            .flatten()
            .all(|row| row.iter().all(|&p| p == 0.0 || p == 1.0))
    }
}

/// Reward table `R_h(x, a)` with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardTable {
    values: Vec<LevelValues>,
}

impl RewardTable {
    pub fn new(mdp: &LayeredMdp, values: Vec<LevelValues>) -> Result<Self> {
        check_shape(mdp, &values, "reward table")?;
        if values.iter().flatten().flatten().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidModel("reward entries must lie in [0, 1]".into()));
        }
        Ok(RewardTable { values })
    }

    pub fn zero(mdp: &LayeredMdp) -> Self {
        RewardTable { values: (0..mdp.horizon()).map(|h| mdp.zero_level(h)).collect() }
    }

    pub fn from_json(mdp: &LayeredMdp, s: &str) -> Result<Self> {
        let values: Vec<LevelValues> = serde_json::from_str(s)?;
        RewardTable::new(mdp, values)
    }

    pub fn get(&self, h: usize, x: usize, a: usize) -> f64 {
        self.values[h][x][a]
    }

    pub fn level(&self, h: usize) -> &LevelValues {
        &self.values[h]
    }

    pub fn levels(&self) -> &[LevelValues] {
        &self.values
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().flatten().all(|&r| r == 0.0)
    }
}

/// Checks that `values` is shaped `[h][x][a]` for levels `0..H`.
pub(crate) fn check_shape(mdp: &LayeredMdp, values: &[LevelValues], what: &str) -> Result<()> {
    if values.len() != mdp.horizon() {
        return Err(Error::InvalidModel(format!("{what}: expected {} levels, got {}", mdp.horizon(), values.len())));
    }
    for (h, level) in values.iter().enumerate() {
        check_level_shape(mdp, h, level, what)?;
    }
    Ok(())
}

pub(crate) fn check_level_shape(mdp: &LayeredMdp, h: usize, level: &LevelValues, what: &str) -> Result<()> {
    if level.len() != mdp.num_states(h) || level.iter().any(|row| row.len() != mdp.num_actions(h)) {
        return Err(Error::InvalidModel(format!("{what}: level {h} has the wrong shape")));
    }
    if level.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidModel(format!("{what}: level {h} has a non-finite entry")));
    }
    Ok(())
}

/// A deterministic, per-level policy `pi_h: X_h -> action`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeterministicPolicy {
    actions: Vec<Vec<usize>>,
}

impl DeterministicPolicy {
    pub fn new(mdp: &LayeredMdp, actions: Vec<Vec<usize>>) -> Result<Self> {
        let policy = DeterministicPolicy { actions };
        policy.validate(mdp)?;
        Ok(policy)
    }

    pub fn validate(&self, mdp: &LayeredMdp) -> Result<()> {
        if self.actions.len() != mdp.horizon() {
            return Err(Error::InvalidModel("policy has the wrong number of levels".into()));
        }
        for (h, level) in self.actions.iter().enumerate() {
            if level.len() != mdp.num_states(h) || level.iter().any(|&a| a >= mdp.num_actions(h)) {
                return Err(Error::InvalidModel(format!("policy level {h} is malformed")));
            }
        }
        Ok(())
    }

    /// The policy that plays action `a` everywhere (clamped to each level's
    /// action count).
    pub fn constant(mdp: &LayeredMdp, a: usize) -> Self {
        let actions = (0..mdp.horizon())
            .map(|h| vec![a.min(mdp.num_actions(h) - 1); mdp.num_states(h)])
            .collect();
        DeterministicPolicy { actions }
    }

    pub(crate) fn from_raw(actions: Vec<Vec<usize>>) -> Self {
        DeterministicPolicy { actions }
    }

    pub fn action(&self, h: usize, x: usize) -> usize {
        self.actions[h][x]
    }

    pub fn level(&self, h: usize) -> &[usize] {
        &self.actions[h]
    }

    pub fn levels(&self) -> &[Vec<usize>] {
        &self.actions
    }
}

/// Per-state action weights. Only used for baseline agents (uniform
/// exploration) inside the exact DP routines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StochasticPolicy {
    weights: Vec<LevelValues>,
}

impl StochasticPolicy {
    pub fn new(mdp: &LayeredMdp, weights: Vec<LevelValues>) -> Result<Self> {
        check_shape(mdp, &weights, "stochastic policy")?;
        for row in weights.iter().flatten() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > PROB_TOL {
                return Err(Error::InvalidModel("policy weights must form a distribution".into()));
            }
        }
        Ok(StochasticPolicy { weights })
    }

    pub fn uniform(mdp: &LayeredMdp) -> Self {
        let weights = (0..mdp.horizon())
            .map(|h| {
                let k = mdp.num_actions(h);
                vec![vec![1.0 / k as f64; k]; mdp.num_states(h)]
            })
            .collect();
        StochasticPolicy { weights }
    }

    pub fn weights(&self, h: usize, x: usize) -> &[f64] {
        &self.weights[h][x]
    }
}

impl From<(&LayeredMdp, &DeterministicPolicy)> for StochasticPolicy {
    fn from((mdp, policy): (&LayeredMdp, &DeterministicPolicy)) -> Self {
        let weights = (0..mdp.horizon())
            .map(|h| {
                (0..mdp.num_states(h))
                    .map(|x| {
                        let mut row = vec![0.0; mdp.num_actions(h)];
                        row[policy.action(h, x)] = 1.0;
                        row
                    })
                    .collect()
            })
            .collect();
        StochasticPolicy { weights }
    }
}

/// `(x_0, a_0, ..., x_{H-1}, a_{H-1}, x_H)` with optional per-step rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.rewards.as_ref().map_or(0.0, |r| r.iter().sum())
    }

    /// The level-`h` transition tuple of this trajectory.
    pub fn tuple(&self, h: usize) -> TransitionTuple {
        TransitionTuple {
            h,
            x: self.states[h],
            a: self.actions[h],
            r: self.rewards.as_ref().map_or(0.0, |r| r[h]),
            x_next: self.states[h + 1],
        }
    }
}

/// One level-`h` transition `(x_h, a_h, r_h, x_{h+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionTuple {
    pub h: usize,
    pub x: usize,
    pub a: usize,
    pub r: f64,
    pub x_next: usize,
}

/// Exact occupancy over the state-action pairs of one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateActionDistribution {
    pub level: usize,
    pub weights: LevelValues,
}

impl StateActionDistribution {
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().flatten().sum()
    }

    /// Point mass on `(x, a)`.
    pub fn point(mdp: &LayeredMdp, h: usize, x: usize, a: usize) -> Self {
        let mut weights = mdp.zero_level(h);
        weights[x][a] = 1.0;
        StateActionDistribution { level: h, weights }
    }

    pub fn state_marginal(&self) -> StateDistribution {
        StateDistribution { level: self.level, weights: self.weights.iter().map(|row| row.iter().sum()).collect() }
    }

    /// Expectation of a level table under this distribution.
    pub fn expect(&self, values: &LevelValues) -> f64 {
        self.weights
            .iter()
            .zip(values)
            .flat_map(|(w, v)| w.iter().zip(v))
            .map(|(w, v)| w * v)
            .sum()
    }

    /// Support as `(x, a, weight)` triples, in index order.
    pub fn support(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (x, row) in self.weights.iter().enumerate() {
            for (a, &w) in row.iter().enumerate() {
                if w > 0.0 {
                    out.push((x, a, w));
                }
            }
        }
        out
    }
}

/// Exact state marginal at one level (before the level's action is drawn).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDistribution {
    pub level: usize,
    pub weights: Vec<f64>,
}

impl StateDistribution {
    /// Extends the marginal with a per-state action rule.
    pub fn with_actions(&self, mdp: &LayeredMdp, selector: ActionSelector<'_>) -> StateActionDistribution {
        let h = self.level;
        let mut weights = mdp.zero_level(h);
        for (x, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            match selector {
                ActionSelector::Policy(pi) => weights[x][pi.action(h, x)] += w,
                ActionSelector::Uniform => {
                    let k = mdp.num_actions(h);
                    for a in 0..k {
                        weights[x][a] += w / k as f64;
                    }
                }
            }
        }
        StateActionDistribution { level: h, weights }
    }
}

/// How the action at the switching level is chosen.
#[derive(Debug, Clone, Copy)]
pub enum ActionSelector<'a> {
    Policy(&'a DeterministicPolicy),
    Uniform,
}

fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair below 1; fall back to the last
    // supported outcome.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples one episode under a deterministic policy.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &LayeredMdp,
    policy: &DeterministicPolicy,
    reward: Option<&RewardTable>,
    rng: &mut R,
) -> Trajectory {
    count_sampler_call();
    let mut states = Vec::with_capacity(mdp.horizon() + 1);
    let mut actions = Vec::with_capacity(mdp.horizon());
    let mut rewards = reward.map(|_| Vec::with_capacity(mdp.horizon()));
    let mut x = mdp.start();
    for h in 0..mdp.horizon() {
        let a = policy.action(h, x);
        states.push(x);
        actions.push(a);
        if let (Some(rs), Some(r)) = (rewards.as_mut(), reward) {
            rs.push(r.get(h, x, a));
        }
        x = draw_index(mdp.transition(h, x, a), rng);
    }
    states.push(x);
    Trajectory { states, actions, rewards }
}

/// Samples one episode under a stochastic policy.
pub fn sample_stochastic_trajectory<R: Rng + ?Sized>(
    mdp: &LayeredMdp,
    policy: &StochasticPolicy,
    reward: Option<&RewardTable>,
    rng: &mut R,
) -> Trajectory {
    count_sampler_call();
    let mut states = Vec::with_capacity(mdp.horizon() + 1);
    let mut actions = Vec::with_capacity(mdp.horizon());
    let mut rewards = reward.map(|_| Vec::with_capacity(mdp.horizon()));
    let mut x = mdp.start();
    for h in 0..mdp.horizon() {
        let a = draw_index(policy.weights(h, x), rng);
        states.push(x);
        actions.push(a);
        if let (Some(rs), Some(r)) = (rewards.as_mut(), reward) {
            rs.push(r.get(h, x, a));
        }
        x = draw_index(mdp.transition(h, x, a), rng);
    }
    states.push(x);
    Trajectory { states, actions, rewards }
}

/// Rolls in with `roll_in` for levels `0..h`, picks the level-`h` action with
/// `at_h`, and returns the level-`h` transition tuple.
pub fn sample_switched<R: Rng + ?Sized>(
    mdp: &LayeredMdp,
    roll_in: &DeterministicPolicy,
    h: usize,
    at_h: ActionSelector<'_>,
    reward: Option<&RewardTable>,
    rng: &mut R,
) -> TransitionTuple {
    assert!(h < mdp.horizon(), "switching level {h} out of range");
    count_sampler_call();
    let mut x = mdp.start();
    for level in 0..h {
        x = draw_index(mdp.transition(level, x, roll_in.action(level, x)), rng);
    }
    let a = match at_h {
        ActionSelector::Policy(pi) => pi.action(h, x),
        ActionSelector::Uniform => rng.gen_range(0..mdp.num_actions(h)),
    };
    let x_next = draw_index(mdp.transition(h, x, a), rng);
    TransitionTuple { h, x, a, r: reward.map_or(0.0, |r| r.get(h, x, a)), x_next }
}

/// Pushes a level-`h` state-action distribution through `P_h`.
fn push_forward(mdp: &LayeredMdp, h: usize, dist: &LevelValues) -> Vec<f64> {
    let mut next = vec![0.0; mdp.num_states(h + 1)];
    for (x, row) in dist.iter().enumerate() {
        for (a, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (y, &p) in mdp.transition(h, x, a).iter().enumerate() {
                next[y] += w * p;
            }
        }
    }
    next
}

/// State marginal at level `h` under a stochastic policy.
pub fn state_occupancy_stochastic(mdp: &LayeredMdp, policy: &StochasticPolicy, h: usize) -> StateDistribution {
    assert!(h <= mdp.horizon());
    let mut states = vec![0.0; mdp.num_states(0)];
    states[mdp.start()] = 1.0;
    for level in 0..h {
        let sa: LevelValues = states
            .iter()
            .enumerate()
            .map(|(x, &w)| policy.weights(level, x).iter().map(|p| p * w).collect())
            .collect();
        states = push_forward(mdp, level, &sa);
    }
    StateDistribution { level: h, weights: states }
}

/// State marginal at level `h` under a deterministic policy.
pub fn state_occupancy(mdp: &LayeredMdp, policy: &DeterministicPolicy, h: usize) -> StateDistribution {
    assert!(h <= mdp.horizon());
    let mut states = vec![0.0; mdp.num_states(0)];
    states[mdp.start()] = 1.0;
    for level in 0..h {
        let mut next = vec![0.0; mdp.num_states(level + 1)];
        for (x, &w) in states.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (y, &p) in mdp.transition(level, x, policy.action(level, x)).iter().enumerate() {
                next[y] += w * p;
            }
        }
        states = next;
    }
    StateDistribution { level: h, weights: states }
}

/// Exact state-action occupancy `d_h^pi` by forward DP.
pub fn occupancy(mdp: &LayeredMdp, policy: &DeterministicPolicy, h: usize) -> StateActionDistribution {
    assert!(h < mdp.horizon(), "occupancy level {h} out of range");
    state_occupancy(mdp, policy, h).with_actions(mdp, ActionSelector::Policy(policy))
}

pub fn occupancy_stochastic(mdp: &LayeredMdp, policy: &StochasticPolicy, h: usize) -> StateActionDistribution {
    assert!(h < mdp.horizon(), "occupancy level {h} out of range");
    let states = state_occupancy_stochastic(mdp, policy, h);
    let weights = states
        .weights
        .iter()
        .enumerate()
        .map(|(x, &w)| policy.weights(h, x).iter().map(|p| p * w).collect())
        .collect();
    StateActionDistribution { level: h, weights }
}

/// `max_a values[x][a]` per state; terminal (action-less) rows give 0.
pub fn state_values(values: &LevelValues) -> Vec<f64> {
    values.iter().map(|row| max_or_zero(row)).collect()
}

pub(crate) fn max_or_zero(row: &[f64]) -> f64 {
    row.iter().copied().fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |m| m.max(v)))).unwrap_or(0.0)
}

/// Lowest index attaining the row maximum.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = a;
        }
    }
    best
}

/// `(T^R_h next)(x, a) = R_h(x, a) + sum_{x'} P_h(x'|x, a) max_{a'} next(x', a')`.
///
/// `next` is a level-`(h + 1)` table; for `h = H - 1` pass
/// `mdp.zero_level(H)`, whose rows are empty and evaluate to zero.
pub fn bellman_backup(mdp: &LayeredMdp, reward: Option<&RewardTable>, next: &LevelValues, h: usize) -> LevelValues {
    assert!(h < mdp.horizon());
    assert_eq!(next.len(), mdp.num_states(h + 1), "next table must cover level h + 1");
    let v_next = state_values(next);
    backup_state_values(mdp, reward, &v_next, h)
}

/// Backup from next-level state values instead of a Q-table.
pub fn backup_state_values(mdp: &LayeredMdp, reward: Option<&RewardTable>, v_next: &[f64], h: usize) -> LevelValues {
    (0..mdp.num_states(h))
        .map(|x| {
            (0..mdp.num_actions(h))
                .map(|a| {
                    let r = reward.map_or(0.0, |r| r.get(h, x, a));
                    let ev: f64 = mdp.transition(h, x, a).iter().zip(v_next).map(|(p, v)| p * v).sum();
                    r + ev
                })
                .collect()
        })
        .collect()
}

/// Exact `v^pi_R` by backward induction.
pub fn policy_value(mdp: &LayeredMdp, policy: &DeterministicPolicy, reward: &RewardTable) -> f64 {
    policy_value_stochastic(mdp, &StochasticPolicy::from((mdp, policy)), reward)
}

pub fn policy_value_stochastic(mdp: &LayeredMdp, policy: &StochasticPolicy, reward: &RewardTable) -> f64 {
    let mut v = vec![0.0; mdp.num_states(mdp.horizon())];
    for h in (0..mdp.horizon()).rev() {
        let q = backup_state_values(mdp, Some(reward), &v, h);
        v = q
            .iter()
            .enumerate()
            .map(|(x, row)| row.iter().zip(policy.weights(h, x)).map(|(q, w)| q * w).sum())
            .collect();
    }
    v[mdp.start()]
}

/// Optimal action values `Q*_{R,h}` for every level plus `v*_R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalSolution {
    pub q: Vec<LevelValues>,
    pub value: f64,
}

impl OptimalSolution {
    pub fn policy(&self) -> DeterministicPolicy {
        DeterministicPolicy::from_raw(self.q.iter().map(|level| level.iter().map(|row| argmax_lowest(row)).collect()).collect())
    }
}

pub fn optimal_q(mdp: &LayeredMdp, reward: &RewardTable) -> OptimalSolution {
    let h_max = mdp.horizon();
    let mut q = vec![Vec::new(); h_max];
    let mut next = mdp.zero_level(h_max);
    for h in (0..h_max).rev() {
        let level = bellman_backup(mdp, Some(reward), &next, h);
        q[h] = level.clone();
        next = level;
    }
    let value = max_or_zero(&q[0][mdp.start()]);
    OptimalSolution { q, value }
}
