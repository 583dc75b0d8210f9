//! Value-function classes.
//!
//! A [`FiniteClass`] is a product `F_0 x ... x F_{H-1}` of per-level member
//! lists. Members of the product are addressed by id vectors (one index per
//! level) and viewed without copying through [`ClassMember`]. Linear classes
//! ([`LinearClass`]) are materialised into finite grids on demand.

mod checks;
mod cover;

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{check_level_shape, check_shape, max_or_zero, DeterministicPolicy, LayeredMdp, LevelValues, RewardTable};

pub use checks::{
    check_completeness, check_linear_completeness, check_realizability, default_theta_grid, ClosureViolation,
    CompletenessReport, LinearCompletenessReport, LinearLevelCheck, RealizabilityEntry, RealizabilityReport, MEMBERSHIP_TOL,
};
pub use cover::{cover_finite, cover_linear, linear_cover_bound, linear_grid, CertEntry, CoverCertificate, GRID_CAP};

/// Two values within this distance count as tied for argmax purposes.
pub const TIE_TOL: f64 = 1e-12;

/// Anything that assigns values to every level-`h` state-action pair.
///
/// Level `H` is implicit and identically zero.
pub trait QFunction {
    fn horizon(&self) -> usize;

    fn level(&self, h: usize) -> &LevelValues;

    fn value(&self, h: usize, x: usize, a: usize) -> f64 {
        self.level(h)[x][a]
    }

    /// `V_f(x) = max_a f_h(x, a)`; zero on the terminal level.
    fn state_value(&self, h: usize, x: usize) -> f64 {
        if h == self.horizon() {
            0.0
        } else {
            max_or_zero(&self.level(h)[x])
        }
    }

    /// State values of a whole level (zero vector on the terminal level).
    fn state_values(&self, mdp: &LayeredMdp, h: usize) -> Vec<f64> {
        (0..mdp.num_states(h)).map(|x| self.state_value(h, x)).collect()
    }

    fn initial_value(&self, mdp: &LayeredMdp) -> f64 {
        self.state_value(0, mdp.start())
    }
}

/// An explicit table per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValueFunction {
    levels: Vec<LevelValues>,
}

impl ValueFunction {
    pub fn new(mdp: &LayeredMdp, levels: Vec<LevelValues>) -> Result<Self> {
        check_shape(mdp, &levels, "value function")?;
        Ok(ValueFunction { levels })
    }

    pub fn zero(mdp: &LayeredMdp) -> Self {
        ValueFunction { levels: (0..mdp.horizon()).map(|h| mdp.zero_level(h)).collect() }
    }

    pub(crate) fn from_levels(levels: Vec<LevelValues>) -> Self {
        ValueFunction { levels }
    }

    pub fn from_q(f: &(impl QFunction + ?Sized)) -> Self {
        ValueFunction { levels: (0..f.horizon()).map(|h| f.level(h).clone()).collect() }
    }

    pub fn levels(&self) -> &[LevelValues] {
        &self.levels
    }

    pub fn level_mut(&mut self, h: usize) -> &mut LevelValues {
        &mut self.levels[h]
    }

    pub fn negated(&self) -> Self {
        ValueFunction { levels: self.levels.iter().map(|l| map_level(l, |v| -v)).collect() }
    }
}

impl QFunction for ValueFunction {
    fn horizon(&self) -> usize {
        self.levels.len()
    }

    fn level(&self, h: usize) -> &LevelValues {
        &self.levels[h]
    }
}

pub(crate) fn map_level(level: &LevelValues, f: impl Fn(f64) -> f64) -> LevelValues {
    level.iter().map(|row| row.iter().map(|&v| f(v)).collect()).collect()
}

pub(crate) fn zip_level(a: &LevelValues, b: &LevelValues, f: impl Fn(f64, f64) -> f64) -> LevelValues {
    a.iter().zip(b).map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| f(x, y)).collect()).collect()
}

/// `max_{x,a} |a - b|`.
pub fn sup_distance(a: &LevelValues, b: &LevelValues) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn sup_norm(a: &LevelValues) -> f64 {
    a.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max)
}

/// One named member of a level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMember {
    pub name: String,
    pub values: LevelValues,
}

/// A finite product class. Index 0 of every level is the zero function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteClass {
    levels: Vec<Vec<LevelMember>>,
    bounds: Vec<f64>,
}

impl FiniteClass {
    /// Builds a class; a zero member is inserted at index 0 of any level
    /// that lacks one, and an existing zero member is moved there.
    ///
    /// Range bounds default to the largest absolute value on each level.
    pub fn new(mdp: &LayeredMdp, levels: Vec<Vec<LevelMember>>) -> Result<Self> {
        Self::with_bounds(mdp, levels, None)
    }

    pub fn with_bounds(mdp: &LayeredMdp, mut levels: Vec<Vec<LevelMember>>, bounds: Option<Vec<f64>>) -> Result<Self> {
        if levels.len() != mdp.horizon() {
            return Err(Error::InvalidModel(format!(
                "function class: expected {} levels, got {}",
                mdp.horizon(),
                levels.len()
            )));
        }
        for (h, level) in levels.iter_mut().enumerate() {
            for m in level.iter() {
                check_level_shape(mdp, h, &m.values, "function class")?;
            }
            match level.iter().position(|m| is_zero(&m.values)) {
                Some(0) => {}
                Some(i) => {
                    let zero = level.remove(i);
                    level.insert(0, zero);
                }
                None => level.insert(0, LevelMember { name: "0".into(), values: mdp.zero_level(h) }),
            }
        }
        let observed: Vec<f64> = levels.iter().map(|l| l.iter().map(|m| sup_norm(&m.values)).fold(0.0, f64::max)).collect();
        let bounds = match bounds {
            None => observed,
            Some(b) => {
                if b.len() != levels.len() {
                    return Err(Error::InvalidModel("bound list length differs from horizon".into()));
                }
                if let Some(h) = (0..b.len()).find(|&h| observed[h] > b[h] + 1e-12) {
                    return Err(Error::InvalidModel(format!(
                        "level {h} has values up to {} beyond the declared bound {}",
                        observed[h], b[h]
                    )));
                }
                b
            }
        };
        Ok(FiniteClass { levels, bounds })
    }

    /// Builds a class from bare tables, naming members `f{h}_{i}` unless
    /// names are supplied.
    pub fn from_tables(mdp: &LayeredMdp, tables: Vec<Vec<LevelValues>>, names: Option<Vec<Vec<String>>>) -> Result<Self> {
        let levels = tables
            .into_iter()
            .enumerate()
            .map(|(h, level)| {
                level
                    .into_iter()
                    .enumerate()
                    .map(|(i, values)| {
                        let name = names
                            .as_ref()
                            .and_then(|n| n.get(h))
                            .and_then(|n| n.get(i))
                            .cloned()
                            .unwrap_or_else(|| if is_zero(&values) { "0".into() } else { format!("f{h}_{i}") });
                        LevelMember { name, values }
                    })
                    .collect()
            })
            .collect();
        FiniteClass::new(mdp, levels)
    }

    /// The class `{0}`.
    pub fn zero(mdp: &LayeredMdp) -> Self {
        FiniteClass::new(mdp, vec![Vec::new(); mdp.horizon()]).expect("zero class is valid")
    }

    pub fn horizon(&self) -> usize {
        self.levels.len()
    }

    pub fn level_members(&self, h: usize) -> &[LevelMember] {
        &self.levels[h]
    }

    pub fn level_size(&self, h: usize) -> usize {
        self.levels[h].len()
    }

    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    /// Product cardinality, saturating at `u128::MAX`.
    pub fn size(&self) -> u128 {
        self.levels.iter().fold(1u128, |acc, l| acc.saturating_mul(l.len() as u128))
    }

    /// Values of the level-`h` member called `name`.
    ///
    /// Panics if no such member exists; intended for fixtures and tests.
    pub fn member_values(&self, h: usize, name: &str) -> &LevelValues {
        &self.levels[h]
            .iter()
            .find(|m| m.name == name)
            .unwrap_or_else(|| panic!("no level-{h} member named {name:?}"))
            .values
    }

    pub fn index_of(&self, h: usize, name: &str) -> Option<usize> {
        self.levels[h].iter().position(|m| m.name == name)
    }

    pub fn member<'a>(&'a self, ids: &'a [usize]) -> ClassMember<'a> {
        debug_assert_eq!(ids.len(), self.horizon());
        ClassMember { class: self, ids }
    }

    /// Human-readable name of a product member, e.g. `(f_bad, 0)`.
    pub fn member_name(&self, ids: &[usize]) -> String {
        let parts: Vec<&str> = ids.iter().enumerate().map(|(h, &i)| self.levels[h][i].name.as_str()).collect();
        format!("({})", parts.join(", "))
    }

    /// All product ids in lexicographic order (level 0 most significant).
    ///
    /// Refuses classes with more than `cap` members.
    pub fn all_ids(&self, cap: usize) -> Result<Vec<Vec<usize>>> {
        let size = self.size();
        if size > cap as u128 {
            return Err(Error::Unsupported(format!("product class has {size} members, cap is {cap}")));
        }
        let mut out = Vec::with_capacity(size as usize);
        let mut ids = vec![0usize; self.horizon()];
        loop {
            out.push(ids.clone());
            let mut h = self.horizon();
            loop {
                if h == 0 {
                    return Ok(out);
                }
                h -= 1;
                ids[h] += 1;
                if ids[h] < self.levels[h].len() {
                    break;
                }
                ids[h] = 0;
            }
        }
    }

    pub fn to_value_function(&self, ids: &[usize]) -> ValueFunction {
        ValueFunction::from_q(&self.member(ids))
    }

    /// Serialisable form: `{type: "finite", tables, names}`.
    pub fn to_spec(&self) -> FunctionClassSpec {
        FunctionClassSpec::Finite {
            tables: self.levels.iter().map(|l| l.iter().map(|m| m.values.clone()).collect()).collect(),
            names: Some(self.levels.iter().map(|l| l.iter().map(|m| m.name.clone()).collect()).collect()),
            bounds: Some(self.bounds.clone()),
        }
    }
}

pub(crate) fn is_zero(values: &LevelValues) -> bool {
    values.iter().flatten().all(|&v| v == 0.0)
}

/// Borrowed view of one product member.
#[derive(Debug, Clone, Copy)]
pub struct ClassMember<'a> {
    class: &'a FiniteClass,
    ids: &'a [usize],
}

impl<'a> ClassMember<'a> {
    pub fn ids(&self) -> &'a [usize] {
        self.ids
    }
}

impl QFunction for ClassMember<'_> {
    fn horizon(&self) -> usize {
        self.class.horizon()
    }

    fn level(&self, h: usize) -> &LevelValues {
        &self.class.levels[h][self.ids[h]].values
    }
}

/// Per-level feature map `phi_h(x, a)` in `R^{d_h}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFeatureMap {
    dims: Vec<usize>,
    /// `[h][x][a][k]`.
    values: Vec<Vec<Vec<Vec<f64>>>>,
}

impl LinearFeatureMap {
    pub fn new(mdp: &LayeredMdp, values: Vec<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        if values.len() != mdp.horizon() {
            return Err(Error::InvalidModel("feature map has the wrong number of levels".into()));
        }
        let mut dims = Vec::with_capacity(values.len());
        for (h, level) in values.iter().enumerate() {
            if level.len() != mdp.num_states(h) || level.iter().any(|row| row.len() != mdp.num_actions(h)) {
                return Err(Error::InvalidModel(format!("feature map level {h} has the wrong shape")));
            }
            let d = level[0][0].len();
            for phi in level.iter().flatten() {
                if phi.len() != d {
                    return Err(Error::InvalidModel(format!("feature map level {h} mixes dimensions")));
                }
                let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !norm.is_finite() || norm > 1.0 + 1e-12 {
                    return Err(Error::InvalidModel(format!("feature norm {norm} exceeds 1 at level {h}")));
                }
            }
            dims.push(d);
        }
        Ok(LinearFeatureMap { dims, values })
    }

    pub fn horizon(&self) -> usize {
        self.dims.len()
    }

    pub fn dim(&self, h: usize) -> usize {
        self.dims[h]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn phi(&self, h: usize, x: usize, a: usize) -> &[f64] {
        &self.values[h][x][a]
    }

    /// `<phi_h(x, a), theta>` for every level-`h` pair.
    pub fn evaluate(&self, h: usize, theta: &[f64]) -> LevelValues {
        assert_eq!(theta.len(), self.dims[h], "theta has the wrong dimension");
        self.values[h]
            .iter()
            .map(|row| row.iter().map(|phi| phi.iter().zip(theta).map(|(p, t)| p * t).sum()).collect())
            .collect()
    }
}

/// A linear ball class: `f_h = <phi_h, theta_h>` with `|theta_h| <= B_h sqrt(d_h)`
/// and values in `[-B_h, B_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClass {
    pub feature: LinearFeatureMap,
    pub bounds: Vec<f64>,
    pub grid_pitch: f64,
}

impl LinearClass {
    pub fn new(feature: LinearFeatureMap, bounds: Vec<f64>, grid_pitch: f64) -> Result<Self> {
        if bounds.len() != feature.horizon() {
            return Err(Error::InvalidModel("linear class: one bound per level required".into()));
        }
        if bounds.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::InvalidModel("linear class: bounds must be finite and non-negative".into()));
        }
        if !(grid_pitch.is_finite() && grid_pitch >= 0.0) {
            return Err(Error::InvalidModel("linear class: grid pitch must be non-negative".into()));
        }
        Ok(LinearClass { feature, bounds, grid_pitch })
    }

    /// Grid members at the configured pitch, values clipped to the range.
    pub fn materialize(&self, mdp: &LayeredMdp) -> Result<FiniteClass> {
        if self.grid_pitch == 0.0 {
            return Err(Error::Unsupported("cannot materialise a linear class at pitch 0".into()));
        }
        let levels = (0..self.feature.horizon())
            .map(|h| {
                linear_grid(self.feature.dim(h), self.grid_pitch, self.bounds[h] * (self.feature.dim(h) as f64).sqrt())
                    .map(|grid| {
                        grid.into_iter()
                            .map(|theta| LevelMember {
                                name: format!("theta{h}{theta:?}"),
                                values: map_level(&self.feature.evaluate(h, &theta), |v| v.clamp(-self.bounds[h], self.bounds[h])),
                            })
                            .collect()
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        FiniteClass::with_bounds(mdp, levels, Some(self.bounds.clone()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionClass {
    Finite(FiniteClass),
    Linear(LinearClass),
}

impl FunctionClass {
    /// A finite class: the class itself, or the materialised grid.
    pub fn to_finite(&self, mdp: &LayeredMdp) -> Result<FiniteClass> {
        match self {
            FunctionClass::Finite(f) => Ok(f.clone()),
            FunctionClass::Linear(l) => l.materialize(mdp),
        }
    }

    pub fn cover(&self, mdp: &LayeredMdp, eps: f64) -> Result<(FiniteClass, CoverCertificate)> {
        match self {
            FunctionClass::Finite(f) => cover_finite(mdp, f, eps),
            FunctionClass::Linear(l) => cover_linear(mdp, l, eps),
        }
    }
}

/// JSON form of a function class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FunctionClassSpec {
    Finite {
        tables: Vec<Vec<LevelValues>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        names: Option<Vec<Vec<String>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bounds: Option<Vec<f64>>,
    },
    Linear {
        feature_ref: String,
        bound_per_level: Vec<f64>,
        grid_pitch: f64,
    },
}

impl FunctionClassSpec {
    /// Resolves a spec; `features` maps a `feature_ref` to a feature map.
    pub fn resolve(
        &self,
        mdp: &LayeredMdp,
        features: impl Fn(&str) -> Option<LinearFeatureMap>,
    ) -> Result<FunctionClass> {
        match self {
            FunctionClassSpec::Finite { tables, names, bounds } => {
                let class = FiniteClass::from_tables(mdp, tables.clone(), names.clone())?;
                match bounds {
                    None => Ok(FunctionClass::Finite(class)),
                    Some(b) => Ok(FunctionClass::Finite(FiniteClass::with_bounds(mdp, class.levels, Some(b.clone()))?)),
                }
            }
            FunctionClassSpec::Linear { feature_ref, bound_per_level, grid_pitch } => {
                let feature = features(feature_ref)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown feature reference {feature_ref:?}")))?;
                Ok(FunctionClass::Linear(LinearClass::new(feature, bound_per_level.clone(), *grid_pitch)?))
            }
        }
    }
}

/// How `argmax_a f_h(x, a)` ties are broken.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieRule {
    #[default]
    First,
    Last,
    /// `[h][x]` preferred action, used when it is among the maximisers;
    /// otherwise the lowest maximiser.
    Scripted(Vec<Vec<usize>>),
}

/// Greedy action at one state under a tie rule.
pub fn greedy_action(row: &[f64], rule: &TieRule, h: usize, x: usize) -> usize {
    let best = max_or_zero(row);
    let tied = |a: usize| row[a] >= best - TIE_TOL;
    match rule {
        TieRule::First => (0..row.len()).find(|&a| tied(a)).unwrap_or(0),
        TieRule::Last => (0..row.len()).rev().find(|&a| tied(a)).unwrap_or(0),
        TieRule::Scripted(script) => {
            let lowest = (0..row.len()).find(|&a| tied(a)).unwrap_or(0);
            match script.get(h).and_then(|l| l.get(x)) {
                Some(&a) if a < row.len() && tied(a) => a,
                _ => lowest,
            }
        }
    }
}

/// `pi_{f,h}(x) = argmax_a f_h(x, a)`.
pub fn greedy_policy(mdp: &LayeredMdp, f: &(impl QFunction + ?Sized), rule: &TieRule) -> DeterministicPolicy {
    DeterministicPolicy::from_raw(greedy_levels(mdp, f, rule))
}

pub(crate) fn greedy_levels(mdp: &LayeredMdp, f: &(impl QFunction + ?Sized), rule: &TieRule) -> Vec<Vec<usize>> {
    (0..mdp.horizon()).map(|h| greedy_level(f.level(h), rule, h)).collect()
}

pub(crate) fn greedy_level(level: &LevelValues, rule: &TieRule, h: usize) -> Vec<usize> {
    level.iter().enumerate().map(|(x, row)| greedy_action(row, rule, h, x)).collect()
}

/// `F - F`, enumerated pairwise (`i` outer, `j` inner, member `f_i - f_j`),
/// keeping the first of any members within `dedup_tol` in sup-norm.
pub fn difference_class(mdp: &LayeredMdp, class: &FiniteClass, dedup_tol: f64) -> FiniteClass {
    let levels = class
        .levels
        .iter()
        .map(|members| {
            let mut out: Vec<LevelMember> = Vec::new();
            for fi in members {
                for fj in members {
                    let values = zip_level(&fi.values, &fj.values, |a, b| a - b);
                    if out.iter().any(|m| sup_distance(&m.values, &values) <= dedup_tol) {
                        continue;
                    }
                    let name = if is_zero(&values) && out.is_empty() {
                        "0".to_string()
                    } else {
                        format!("{}-{}", fi.name, fj.name)
                    };
                    out.push(LevelMember { name, values });
                }
            }
            out
        })
        .collect();
    let bounds = class.bounds.iter().map(|b| 2.0 * b).collect();
    FiniteClass::with_bounds(mdp, levels, Some(bounds)).expect("differences of a valid class are valid")
}

/// `F + R`: member `f_h + R_h` at every level, cardinality preserved.
pub fn reward_append(mdp: &LayeredMdp, class: &FiniteClass, reward: &RewardTable, reward_name: &str) -> FiniteClass {
    let levels = class
        .levels
        .iter()
        .enumerate()
        .map(|(h, members)| {
            members
                .iter()
                .map(|m| LevelMember {
                    name: format!("{}+{}", m.name, reward_name),
                    values: zip_level(&m.values, reward.level(h), |a, b| a + b),
                })
                .collect()
        })
        .collect();
    // No zero insertion and no reordering: ids in F + R match ids in F.
    FiniteClass { levels, bounds: class.bounds.iter().map(|b| b + 1.0).collect() }
        .validated(mdp)
        .expect("reward-appended class is valid")
}

impl FiniteClass {
    fn validated(self, mdp: &LayeredMdp) -> Result<Self> {
        if self.levels.len() != mdp.horizon() {
            return Err(Error::InvalidModel("class horizon mismatch".into()));
        }
        for (h, level) in self.levels.iter().enumerate() {
            for m in level {
                check_level_shape(mdp, h, &m.values, "function class")?;
            }
        }
        Ok(self)
    }
}

/// A named reward table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReward {
    pub name: String,
    pub table: RewardTable,
}

/// A finite reward class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardClass {
    members: Vec<NamedReward>,
}

impl RewardClass {
    pub fn new(members: Vec<NamedReward>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidModel("reward class is empty".into()));
        }
        Ok(RewardClass { members })
    }

    /// The class `{0}`.
    pub fn zero(mdp: &LayeredMdp) -> Self {
        RewardClass { members: vec![NamedReward { name: "0".into(), table: RewardTable::zero(mdp) }] }
    }

    pub fn get(&self, name: &str) -> Option<&NamedReward> {
        self.members.iter().find(|r| r.name == name)
    }

    /// Per-level covering of the reward class (sup-norm over levels).
    pub fn cover_size(&self, eps: f64) -> usize {
        let mut centers: Vec<&RewardTable> = Vec::new();
        for r in &self.members {
            let covered = centers.iter().any(|c| {
                c.levels().iter().zip(r.table.levels()).map(|(a, b)| sup_distance(a, b)).fold(0.0, f64::max) <= eps
            });
            if !covered {
                centers.push(&r.table);
            }
        }
        centers.len()
    }
}

impl Deref for RewardClass {
    type Target = [NamedReward];

    fn deref(&self) -> &[NamedReward] {
        &self.members
    }
}

/// Linear rewards `R_h = <phi_h, theta_h>` with values in `[0, 1]`,
/// materialised on a `theta` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRewardSpec {
    pub feature: LinearFeatureMap,
    pub grid_pitch: f64,
}

impl LinearRewardSpec {
    /// Every combination of per-level grid members whose values lie in
    /// `[0, 1]`. Refuses products larger than `cap`.
    pub fn materialize(&self, mdp: &LayeredMdp, cap: usize) -> Result<RewardClass> {
        if !(self.grid_pitch > 0.0) {
            return Err(Error::Unsupported("linear reward grid pitch must be positive".into()));
        }
        let per_level: Vec<Vec<LevelValues>> = (0..mdp.horizon())
            .map(|h| {
                let d = self.feature.dim(h);
                Ok(linear_grid(d, self.grid_pitch, (d as f64).sqrt())?
                    .into_iter()
                    .map(|theta| self.feature.evaluate(h, &theta))
                    .filter(|vals| vals.iter().flatten().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)))
                    .map(|vals| map_level(&vals, |v| v.clamp(0.0, 1.0)))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let total = per_level.iter().fold(1u128, |acc, l| acc.saturating_mul(l.len() as u128));
        if total > cap as u128 {
            return Err(Error::Unsupported(format!("linear reward class has {total} members, cap is {cap}")));
        }
        let mut members = Vec::new();
        let mut ids = vec![0usize; per_level.len()];
        'outer: loop {
            let levels = ids.iter().enumerate().map(|(h, &i)| per_level[h][i].clone()).collect();
            members.push(NamedReward { name: format!("R{ids:?}"), table: RewardTable::new(mdp, levels)? });
            let mut h = ids.len();
            loop {
                if h == 0 {
                    break 'outer;
                }
                h -= 1;
                ids[h] += 1;
                if ids[h] < per_level[h].len() {
                    break;
                }
                ids[h] = 0;
            }
        }
        RewardClass::new(members)
    }
}

/// JSON form of a reward class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum RewardClassSpec {
    Finite {
        tables: Vec<Vec<LevelValues>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        names: Option<Vec<String>>,
    },
    Linear {
        feature_ref: String,
        grid_pitch: f64,
    },
}

impl RewardClassSpec {
    pub fn resolve(
        &self,
        mdp: &LayeredMdp,
        features: impl Fn(&str) -> Option<LinearFeatureMap>,
        cap: usize,
    ) -> Result<RewardClass> {
        match self {
            RewardClassSpec::Finite { tables, names } => {
                let members = tables
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let name = names.as_ref().and_then(|n| n.get(i)).cloned().unwrap_or_else(|| format!("R{}", i + 1));
                        Ok(NamedReward { name, table: RewardTable::new(mdp, t.clone())? })
                    })
                    .collect::<Result<_>>()?;
                RewardClass::new(members)
            }
            RewardClassSpec::Linear { feature_ref, grid_pitch } => {
                let feature = features(feature_ref)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown feature reference {feature_ref:?}")))?;
                LinearRewardSpec { feature, grid_pitch: *grid_pitch }.materialize(mdp, cap)
            }
        }
    }

    pub fn from_class(class: &RewardClass) -> Self {
        RewardClassSpec::Finite {
            tables: class.iter().map(|r| r.table.levels().to_vec()).collect(),
            names: Some(class.iter().map(|r| r.name.clone()).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::rfolive_counterexample;
    use crate::mdp::optimal_q;
    use proptest::prelude::*;

    #[test]
    fn greedy_examples() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        let class = &fx.class;
        let bad = [class.index_of(0, "f_bad").unwrap(), class.index_of(1, "f_bad").unwrap()];
        assert_eq!(greedy_policy(mdp, &class.member(&bad), &TieRule::First).action(0, 0), 1);
        let zero = [0, 0];
        let pi = greedy_policy(mdp, &class.member(&zero), &TieRule::First);
        assert!(pi.levels().iter().flatten().all(|&a| a == 0));
        let pi = greedy_policy(mdp, &class.member(&zero), &TieRule::Last);
        assert_eq!(pi.action(0, 0), 1);
        let q1 = ValueFunction::from_levels(optimal_q(mdp, &fx.rewards[0].table).q);
        assert_eq!(greedy_policy(mdp, &q1, &TieRule::First).action(0, 0), 0);
    }

    #[test]
    fn scripted_ties_only_apply_among_maximisers() {
        let row = [0.5, 0.5, 0.1];
        let rule = TieRule::Scripted(vec![vec![1, 2]]);
        assert_eq!(greedy_action(&row, &rule, 0, 0), 1);
        assert_eq!(greedy_action(&row, &rule, 0, 1), 0);
    }

    #[test]
    fn difference_class_on_table3() {
        let fx = rfolive_counterexample();
        let diff = difference_class(&fx.mdp, &fx.class, 0.0);
        assert_eq!(diff.level_size(0), 13);
        assert_eq!(diff.level_size(1), 3);
        assert!(is_zero(&diff.level_members(0)[0].values));
        let d = diff.member_values(0, "f_bad-f_R2");
        assert!((d[0][0] - 0.01).abs() < 1e-15 && (d[0][1] - 0.2).abs() < 1e-15);
        assert_eq!(diff.level_members(0)[4].name, "f_R1-0");
        let single = FiniteClass::zero(&fx.mdp);
        assert_eq!(difference_class(&fx.mdp, &single, 0.0).size(), 1);
    }

    #[test]
    fn reward_append_on_table3() {
        let fx = rfolive_counterexample();
        let r2 = &fx.rewards[1].table;
        let off = reward_append(&fx.mdp, &fx.class, r2, "R2");
        let ids = [fx.class.index_of(0, "f_R2").unwrap(), 0];
        let g = off.member(&ids);
        let q2 = optimal_q(&fx.mdp, r2);
        for h in 0..2 {
            assert!(sup_distance(g.level(h), &q2.q[h]) < 1e-15);
        }
        let ids = [fx.class.index_of(0, "f_R1").unwrap(), 0];
        assert_eq!(off.member(&ids).level(1), &vec![vec![0.2], vec![0.1]]);
        assert_eq!(off.level_size(0), fx.class.level_size(0));
        let zero_plus = off.member(&[0, 0]);
        assert_eq!(zero_plus.level(1), r2.level(1));
    }

    #[test]
    fn spec_round_trip() {
        let fx = rfolive_counterexample();
        let spec = fx.class.to_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let back: FunctionClassSpec = serde_json::from_str(&json).unwrap();
        let FunctionClass::Finite(class) = back.resolve(&fx.mdp, |_| None).unwrap() else { panic!() };
        assert_eq!(class, fx.class);
    }

    #[test]
    fn bounds_are_enforced_when_declared() {
        let fx = rfolive_counterexample();
        let tables = vec![vec![vec![vec![2.0, 0.0]]], vec![vec![vec![0.0], vec![0.0]]]];
        let err = FiniteClass::with_bounds(
            &fx.mdp,
            FiniteClass::from_tables(&fx.mdp, tables, None).unwrap().levels,
            Some(vec![1.0, 0.0]),
        );
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }

    proptest! {
        #[test]
        fn difference_class_is_symmetric(vals in prop::collection::vec((-2i32..=2, -2i32..=2), 1..5)) {
            let fx = rfolive_counterexample();
            let level0: Vec<LevelMember> = vals.iter().enumerate().map(|(i, &(l, r))| LevelMember {
                name: format!("m{i}"),
                values: vec![vec![l as f64 * 0.5, r as f64 * 0.5]],
            }).collect();
            let class = FiniteClass::new(&fx.mdp, vec![level0, Vec::new()]).unwrap();
            let diff = difference_class(&fx.mdp, &class, 0.0);
            let members = diff.level_members(0);
            prop_assert!(is_zero(&members[0].values));
            for m in members {
                let neg = map_level(&m.values, |v| -v);
                prop_assert!(members.iter().any(|o| sup_distance(&o.values, &neg) == 0.0));
            }
        }

        #[test]
        fn reward_append_keeps_cardinality(n in 1usize..6, r in 0.0f64..1.0) {
            let fx = rfolive_counterexample();
            let level0: Vec<LevelMember> = (0..n).map(|i| LevelMember {
                name: format!("m{i}"),
                values: vec![vec![i as f64, -(i as f64)]],
            }).collect();
            let class = FiniteClass::new(&fx.mdp, vec![level0, Vec::new()]).unwrap();
            let reward = RewardTable::new(&fx.mdp, vec![vec![vec![r, r]], vec![vec![r], vec![r]]]).unwrap();
            let off = reward_append(&fx.mdp, &class, &reward, "R");
            prop_assert_eq!(off.level_size(0), class.level_size(0));
            prop_assert_eq!(off.level_size(1), class.level_size(1));
        }
    }
}
