//! Named fixtures and config resolution.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rfolive::fixtures::{
    contextual_bandit_instance, jointolive_counterexample, random_closed_instance, rfolive_counterexample,
    tabular_as_linear_mdp, tree_hardness_family, InstanceSizes,
};
use rfolive::funclass::{
    FiniteClass, FunctionClassSpec, LinearFeatureMap, NamedReward, RewardClass, RewardClassSpec, ValueFunction,
};
use rfolive::mdp::{LayeredMdp, LevelValues};
use rfolive::rng::{stream, stream_rng};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MdpSource};
use crate::error::CliError;

/// Largest reward class a linear reward spec may materialise.
pub const REWARD_CAP: usize = 100_000;

/// `table3`, `table4`, `bandit:N`, `tree:H[:i]` or `closed:SEED`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureName {
    Table3,
    Table4,
    Bandit(usize),
    Tree { horizon: usize, index: Option<usize> },
    Closed(u64),
}

impl FromStr for FixtureName {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("unknown fixture {s:?} (expected table3, table4, bandit:N, tree:H[:i] or closed:SEED)"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<u64>().map_err(|_| bad());
        match parts.as_slice() {
            ["table3"] => Ok(FixtureName::Table3),
            ["table4"] => Ok(FixtureName::Table4),
            ["bandit", n] => Ok(FixtureName::Bandit(num(n)? as usize)),
            ["tree", h] => Ok(FixtureName::Tree { horizon: num(h)? as usize, index: None }),
            ["tree", h, i] => Ok(FixtureName::Tree { horizon: num(h)? as usize, index: Some(num(i)? as usize) }),
            ["closed", seed] => Ok(FixtureName::Closed(num(seed)?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for FixtureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FixtureName::Table3 => write!(f, "table3"),
            FixtureName::Table4 => write!(f, "table4"),
            FixtureName::Bandit(n) => write!(f, "bandit:{n}"),
            FixtureName::Tree { horizon, index: None } => write!(f, "tree:{horizon}"),
            FixtureName::Tree { horizon, index: Some(i) } => write!(f, "tree:{horizon}:{i}"),
            FixtureName::Closed(s) => write!(f, "closed:{s}"),
        }
    }
}

/// A tree-family member for the linear completeness check.
#[derive(Debug, Clone)]
pub struct LinearCase {
    pub index: usize,
    pub mdp: LayeredMdp,
    pub feature: LinearFeatureMap,
}

/// Everything a subcommand may need from a config.
#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub mdp: LayeredMdp,
    pub class: Option<FiniteClass>,
    pub rewards: Option<RewardClass>,
    /// Explicit function list, when the fixture defines one (bandit).
    pub functions: Option<Vec<ValueFunction>>,
    /// Feature maps addressable by `feature_ref`. `one_hot` is always
    /// present.
    pub features: BTreeMap<String, LinearFeatureMap>,
    pub linear_cases: Vec<LinearCase>,
}

impl Instance {
    pub fn class(&self) -> Result<&FiniteClass, CliError> {
        self.class.as_ref().ok_or_else(|| CliError::Config(format!("{} has no function class; supply one", self.name)))
    }

    pub fn rewards(&self) -> Result<&RewardClass, CliError> {
        self.rewards.as_ref().ok_or_else(|| CliError::Config(format!("{} has no reward class; supply one", self.name)))
    }
}

/// A class holding exactly the level tables of `functions` (deduplicated).
fn class_of(mdp: &LayeredMdp, functions: &[ValueFunction]) -> Result<FiniteClass, CliError> {
    let tables: Vec<Vec<LevelValues>> = (0..mdp.horizon())
        .map(|h| {
            let mut level: Vec<LevelValues> = Vec::new();
            for f in functions {
                let v = &f.levels()[h];
                if !level.contains(v) {
                    level.push(v.clone());
                }
            }
            level
        })
        .collect();
    Ok(FiniteClass::from_tables(mdp, tables, None)?)
}

fn bare(name: String, mdp: LayeredMdp) -> Instance {
    Instance { name, mdp, class: None, rewards: None, functions: None, features: BTreeMap::new(), linear_cases: Vec::new() }
}

/// Builds a named fixture.
pub fn fixture(name: FixtureName) -> Result<Instance, CliError> {
    let label = name.to_string();
    let mut inst = match name {
        FixtureName::Table3 | FixtureName::Table4 => {
            let fx = if name == FixtureName::Table3 { rfolive_counterexample() } else { jointolive_counterexample() };
            Instance { class: Some(fx.class), rewards: Some(fx.rewards), ..bare(label, fx.mdp) }
        }
        FixtureName::Closed(seed) => {
            let fx = random_closed_instance(&mut stream_rng(seed, stream::GENERATOR), InstanceSizes::default())?;
            Instance { class: Some(fx.class), rewards: Some(fx.rewards), ..bare(label, fx.mdp) }
        }
        FixtureName::Bandit(n) => {
            let b = contextual_bandit_instance(n)?;
            let class = class_of(&b.mdp, &b.functions)?;
            let rewards = RewardClass::new(vec![NamedReward { name: "R".into(), table: b.reward }])?;
            Instance { class: Some(class), rewards: Some(rewards), functions: Some(b.functions), ..bare(label, b.mdp) }
        }
        FixtureName::Tree { horizon, index } => {
            let family = tree_hardness_family(horizon, None)?;
            let chosen = index.unwrap_or(0);
            if chosen >= family.instances.len() {
                return Err(CliError::Config(format!("tree:{horizon} has {} instances", family.instances.len())));
            }
            let cases: Vec<LinearCase> = family
                .instances
                .iter()
                .filter(|i| index.is_none_or(|k| k == i.index))
                .map(|i| LinearCase { index: i.index, mdp: i.mdp.clone(), feature: i.feature.clone() })
                .collect();
            let pick = &family.instances[chosen];
            let rewards = RewardClass::new(vec![NamedReward { name: "R".into(), table: pick.reward.clone() }])?;
            let mut inst = Instance { rewards: Some(rewards), linear_cases: cases, ..bare(label, pick.mdp.clone()) };
            inst.features.insert("designated".into(), pick.feature.clone());
            inst
        }
    };
    inst.features.insert("one_hot".into(), tabular_as_linear_mdp(&inst.mdp).feature);
    Ok(inst)
}

/// Resolves the MDP, classes and features a config refers to.
pub fn resolve(config: &ExperimentConfig) -> Result<Instance, CliError> {
    let mut inst = match &config.mdp {
        MdpSource::Fixture(name) => fixture(name.parse()?)?,
        MdpSource::Inline(mdp) => {
            let mut inst = bare("inline".into(), mdp.clone());
            inst.features.insert("one_hot".into(), tabular_as_linear_mdp(mdp).feature);
            inst
        }
    };
    let features = inst.features.clone();
    let lookup = |r: &str| features.get(r).cloned();
    if let Some(spec) = &config.function_class {
        inst.class = Some(spec.resolve(&inst.mdp, lookup)?.to_finite(&inst.mdp)?);
        inst.functions = None;
    }
    if let Some(spec) = &config.reward_class {
        inst.rewards = Some(spec.resolve(&inst.mdp, lookup, REWARD_CAP)?);
    }
    Ok(inst)
}

/// The `fixture` subcommand's file: the MDP plus class and reward specs
/// that can be pasted into an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub name: String,
    pub mdp: LayeredMdp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_class: Option<FunctionClassSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_class: Option<RewardClassSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, LinearFeatureMap>,
}

impl FixtureFile {
    pub fn from_instance(inst: &Instance) -> Self {
        FixtureFile {
            name: inst.name.clone(),
            mdp: inst.mdp.clone(),
            function_class: inst.class.as_ref().map(FiniteClass::to_spec),
            reward_class: inst.rewards.as_ref().map(RewardClassSpec::from_class),
            features: inst.features.iter().filter(|(k, _)| *k != "one_hot").map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }
}
