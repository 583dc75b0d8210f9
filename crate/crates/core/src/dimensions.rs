//! Brute-force complexity measures: epsilon-independence, the distributional
//! Eluder dimension, Q/V-type Bellman-Eluder dimensions, and Bellman-rank
//! factorisation checks.
//!
//! For a sequence of distributions, the admissible thresholds `eps'` form a
//! finite union of half-open intervals: element `nu` with predecessors
//! `mu_1..mu_k` is `eps'`-independent exactly when some `f` has
//! `max(s_f, eps) <= eps' < v_f`, where `s_f = sqrt(sum_i E_{mu_i}[f]^2)` and
//! `v_f = |E_nu[f]|`. The search intersects these sets along the sequence.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{q_error, residual_level, v_error};
use crate::error::{Error, Result};
use crate::funclass::{greedy_level, greedy_policy, FiniteClass, QFunction, TieRule};
use crate::mdp::{occupancy, state_occupancy, DeterministicPolicy, LayeredMdp, RewardTable};
use crate::olive::Variant;

/// Default limit on the family size for exhaustive search.
pub const EXHAUSTIVE_CAP: usize = 8;

/// Singular values at or below this count as zero.
pub const RANK_TOL: f64 = 1e-9;

/// Largest product of per-level greedy maps [`class_rollin_distributions`]
/// will enumerate.
pub const ROLLIN_CAP: usize = 1_000_000;

const DEDUP_TOL: f64 = 1e-12;

/// Real functions on one finite domain (pairs or states of a level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarFunctionSet {
    pub functions: Vec<Vec<f64>>,
}

/// Distributions on the same domain as a [`ScalarFunctionSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFamily {
    pub level: usize,
    pub distributions: Vec<Vec<f64>>,
}

impl DistributionFamily {
    pub fn len(&self) -> usize {
        self.distributions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distributions.is_empty()
    }

    /// Adds `d` unless an entry within `1e-12` already exists.
    pub fn push_distinct(&mut self, d: Vec<f64>) {
        let dup = self.distributions.iter().any(|e| e.iter().zip(&d).all(|(a, b)| (a - b).abs() <= DEDUP_TOL));
        if !dup {
            self.distributions.push(d);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(sqrt(sum_i E_{mu_i}[f]^2), |E_nu[f]|)`. Both the search and the replay
/// go through this function so they agree bit for bit.
fn stats(nu: &[f64], preds: &[&[f64]], f: &[f64]) -> (f64, f64) {
    let s = preds.iter().map(|mu| dot(mu, f).powi(2)).sum::<f64>().sqrt();
    (s, dot(nu, f).abs())
}

/// Index of the first `f` with `s_f <= eps'` and `v_f > eps'`, if any.
pub fn eps_independent(nu: &[f64], preds: &[&[f64]], functions: &ScalarFunctionSet, eps_prime: f64) -> Option<usize> {
    functions.functions.iter().position(|f| {
        let (s, v) = stats(nu, preds, f);
        s <= eps_prime && v > eps_prime
    })
}

/// Sorted, disjoint half-open intervals.
type Intervals = Vec<(f64, f64)>;

fn admissible(nu: &[f64], preds: &[&[f64]], functions: &ScalarFunctionSet, eps: f64) -> Intervals {
    let mut raw: Intervals = functions
        .functions
        .iter()
        .filter_map(|f| {
            let (s, v) = stats(nu, preds, f);
            let lo = s.max(eps);
            (lo < v).then_some((lo, v))
        })
        .collect();
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Intervals = Vec::with_capacity(raw.len());
    for (lo, hi) in raw {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    out
}

fn intersect(a: &Intervals, b: &Intervals) -> Intervals {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if lo < hi {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Exhaustive,
    Greedy,
}

/// A certified sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeResult {
    pub length: usize,
    /// Indices into the family, in sequence order.
    pub sequence: Vec<usize>,
    /// Threshold at which every element is independent of its predecessors
    /// (`eps` itself for the empty sequence).
    pub eps_prime: f64,
    pub mode: SearchMode,
}

impl DeResult {
    /// Re-checks every element at `eps_prime` with [`eps_independent`].
    pub fn replay(&self, functions: &ScalarFunctionSet, family: &DistributionFamily) -> bool {
        (0..self.sequence.len()).all(|i| {
            let preds: Vec<&[f64]> = self.sequence[..i].iter().map(|&j| family.distributions[j].as_slice()).collect();
            eps_independent(&family.distributions[self.sequence[i]], &preds, functions, self.eps_prime).is_some()
        })
    }
}

struct Search<'a> {
    functions: &'a ScalarFunctionSet,
    family: &'a DistributionFamily,
    eps: f64,
}

impl Search<'_> {
    fn extend(&self, seq: &[usize], feasible: &Intervals, j: usize) -> Intervals {
        let preds: Vec<&[f64]> = seq.iter().map(|&i| self.family.distributions[i].as_slice()).collect();
        let own = admissible(&self.family.distributions[j], &preds, self.functions, self.eps);
        if seq.is_empty() {
            own
        } else {
            intersect(feasible, &own)
        }
    }

    fn dfs(&self, seq: &mut Vec<usize>, feasible: &Intervals, best: &mut (Vec<usize>, Intervals)) {
        if seq.len() > best.0.len() {
            *best = (seq.clone(), feasible.clone());
        }
        let n = self.family.len();
        if best.0.len() == n || seq.len() + (n - seq.len()) <= best.0.len() {
            return;
        }
        for j in 0..n {
            if seq.contains(&j) {
                continue;
            }
            let next = self.extend(seq, feasible, j);
            if next.is_empty() {
                continue;
            }
            seq.push(j);
            self.dfs(seq, &next, best);
            seq.pop();
            if best.0.len() == n {
                return;
            }
        }
    }
}

/// Longest sequence in `family` whose elements are each `eps'`-independent
/// of their predecessors for one common `eps' >= eps`.
///
/// Exhaustive mode searches every ordering (refusing families larger than
/// `cap`); greedy mode appends the first admissible element until none fits
/// and so gives a lower bound.
pub fn de_dimension(
    functions: &ScalarFunctionSet,
    family: &DistributionFamily,
    eps: f64,
    mode: SearchMode,
    cap: usize,
) -> Result<DeResult> {
    if !(eps > 0.0) {
        return Err(Error::InvalidInput("eps must be positive".into()));
    }
    let search = Search { functions, family, eps };
    let (sequence, feasible) = match mode {
        SearchMode::Exhaustive => {
            if family.len() > cap {
                return Err(Error::Unsupported(format!(
                    "exhaustive search over {} distributions exceeds the cap of {cap}",
                    family.len()
                )));
            }
            let branches: Vec<(Vec<usize>, Intervals)> = (0..family.len())
                .into_par_iter()
                .map(|j| {
                    let first = search.extend(&[], &Vec::new(), j);
                    let mut best = (Vec::new(), Vec::new());
                    if !first.is_empty() {
                        search.dfs(&mut vec![j], &first, &mut best);
                    }
                    best
                })
                .collect();
            branches.into_iter().fold((Vec::new(), Vec::new()), |acc, b| if b.0.len() > acc.0.len() { b } else { acc })
        }
        SearchMode::Greedy => {
            let mut seq = Vec::new();
            let mut feasible = Vec::new();
            loop {
                let next = (0..family.len())
                    .filter(|j| !seq.contains(j))
                    .map(|j| (j, search.extend(&seq, &feasible, j)))
                    .find(|(_, f)| !f.is_empty());
                match next {
                    Some((j, f)) => {
                        seq.push(j);
                        feasible = f;
                    }
                    None => break (seq, feasible),
                }
            }
        }
    };
    let eps_prime = feasible.first().map_or(eps, |iv| iv.0);
    Ok(DeResult { length: sequence.len(), sequence, eps_prime, mode })
}

/// Level-`h` Bellman residuals `f_h - T^R_h f_{h+1}`: on every pair
/// (Q-type, flattened state-major) or at each state's greedy action
/// (V-type).
pub fn bellman_residual_class<F: QFunction>(
    mdp: &LayeredMdp,
    functions: &[F],
    reward: Option<&RewardTable>,
    h: usize,
    variant: Variant,
) -> ScalarFunctionSet {
    let functions = functions
        .iter()
        .map(|f| {
            let resid = residual_level(mdp, f, reward, h);
            match variant {
                Variant::Q => resid.into_iter().flatten().collect(),
                Variant::V => {
                    let greedy = greedy_level(f.level(h), &TieRule::First, h);
                    resid.iter().zip(&greedy).map(|(row, &a)| row[a]).collect()
                }
            }
        })
        .collect();
    ScalarFunctionSet { functions }
}

fn rollin_of(mdp: &LayeredMdp, policy: &DeterministicPolicy, h: usize, variant: Variant) -> Vec<f64> {
    match variant {
        Variant::Q => occupancy(mdp, policy, h).weights.into_iter().flatten().collect(),
        Variant::V => state_occupancy(mdp, policy, h).weights,
    }
}

/// Distinct level-`h` roll-in distributions of the greedy policies of
/// `functions` (state-action for Q-type, state marginals for V-type).
pub fn rollin_distributions<F: QFunction>(mdp: &LayeredMdp, functions: &[F], h: usize, variant: Variant) -> DistributionFamily {
    let mut family = DistributionFamily { level: h, distributions: Vec::new() };
    for f in functions {
        family.push_distinct(rollin_of(mdp, &greedy_policy(mdp, f, &TieRule::First), h, variant));
    }
    family
}

/// As [`rollin_distributions`] over every member of a product class,
/// enumerating only distinct per-level greedy maps.
pub fn class_rollin_distributions(mdp: &LayeredMdp, class: &FiniteClass, h: usize, variant: Variant) -> Result<DistributionFamily> {
    let last = match variant {
        Variant::Q => h + 1,
        Variant::V => h,
    }
    .min(mdp.horizon());
    let maps: Vec<Vec<Vec<usize>>> = (0..last)
        .map(|l| {
            let mut out: Vec<Vec<usize>> = Vec::new();
            for m in class.level_members(l) {
                let map = greedy_level(&m.values, &TieRule::First, l);
                if !out.contains(&map) {
                    out.push(map);
                }
            }
            out
        })
        .collect();
    let total = maps.iter().fold(1u128, |acc, m| acc.saturating_mul(m.len() as u128));
    if total > ROLLIN_CAP as u128 {
        return Err(Error::Unsupported(format!("{total} greedy-map combinations exceed the cap")));
    }
    let mut family = DistributionFamily { level: h, distributions: Vec::new() };
    let mut ids = vec![0usize; last];
    loop {
        let actions: Vec<Vec<usize>> = (0..mdp.horizon())
            .map(|l| if l < last { maps[l][ids[l]].clone() } else { vec![0; mdp.num_states(l)] })
            .collect();
        family.push_distinct(rollin_of(mdp, &DeterministicPolicy::from_raw(actions), h, variant));
        let mut l = last;
        loop {
            if l == 0 {
                return Ok(family);
            }
            l -= 1;
            ids[l] += 1;
            if ids[l] < maps[l].len() {
                break;
            }
            ids[l] = 0;
        }
    }
}

/// Size of [`class_rollin_distributions`].
pub fn class_rollin_count(mdp: &LayeredMdp, class: &FiniteClass, h: usize, variant: Variant) -> Result<usize> {
    Ok(class_rollin_distributions(mdp, class, h, variant)?.len())
}

/// A Bellman-Eluder dimension with its certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeDimension {
    pub dimension: usize,
    /// Level attaining the maximum.
    pub level: usize,
    pub per_level: Vec<DeResult>,
}

impl BeDimension {
    pub fn certificate(&self) -> &DeResult {
        &self.per_level[self.level]
    }
}

/// `max_h` of the DE dimension of the level-`h` residual class against
/// `families[h]` (computed from the functions' greedy policies when `None`).
#[allow(clippy::too_many_arguments)]
pub fn be_dimension<F: QFunction>(
    mdp: &LayeredMdp,
    functions: &[F],
    families: Option<&[DistributionFamily]>,
    reward: Option<&RewardTable>,
    eps: f64,
    variant: Variant,
    mode: SearchMode,
    cap: usize,
) -> Result<BeDimension> {
    let per_level = (0..mdp.horizon())
        .map(|h| {
            let residuals = bellman_residual_class(mdp, functions, reward, h, variant);
            let family = match families {
                Some(f) => f.get(h).cloned().ok_or_else(|| Error::InvalidInput(format!("no family for level {h}")))?,
                None => rollin_distributions(mdp, functions, h, variant),
            };
            de_dimension(&residuals, &family, eps, mode, cap)
        })
        .collect::<Result<Vec<_>>>()?;
    let level = (0..per_level.len()).fold(0, |best, h| if per_level[h].length > per_level[best].length { h } else { best });
    Ok(BeDimension { dimension: per_level[level].length, level, per_level })
}

/// Q-type Bellman-Eluder dimension.
pub fn qbe_dimension<F: QFunction>(
    mdp: &LayeredMdp,
    functions: &[F],
    families: Option<&[DistributionFamily]>,
    reward: Option<&RewardTable>,
    eps: f64,
    mode: SearchMode,
) -> Result<BeDimension> {
    be_dimension(mdp, functions, families, reward, eps, Variant::Q, mode, EXHAUSTIVE_CAP)
}

/// V-type Bellman-Eluder dimension.
pub fn vbe_dimension<F: QFunction>(
    mdp: &LayeredMdp,
    functions: &[F],
    families: Option<&[DistributionFamily]>,
    reward: Option<&RewardTable>,
    eps: f64,
    mode: SearchMode,
) -> Result<BeDimension> {
    be_dimension(mdp, functions, families, reward, eps, Variant::V, mode, EXHAUSTIVE_CAP)
}

/// `[policy][function]` matrix of exact level-`h` average Bellman errors.
pub fn error_matrix<F: QFunction>(
    mdp: &LayeredMdp,
    policies: &[DeterministicPolicy],
    functions: &[F],
    reward: Option<&RewardTable>,
    h: usize,
    variant: Variant,
) -> Vec<Vec<f64>> {
    policies
        .iter()
        .map(|pi| {
            functions
                .iter()
                .map(|f| match variant {
                    Variant::Q => q_error(mdp, f, reward, pi, h),
                    Variant::V => v_error(mdp, f, reward, pi, h),
                })
                .collect()
        })
        .collect()
}

/// `error(f, pi) = <nu(pi), theta(f)>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFactorization {
    pub rank: usize,
    pub nu: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    /// `max_f |theta(f)|_2`.
    pub zeta: f64,
    /// Largest reconstruction error.
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCheck {
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub factorization: Option<RankFactorization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refusal: Option<String>,
}

/// Numerical rank of `matrix` (rows are policies) and, when it is at most
/// `target_rank` and the norm bound `zeta` (if any) holds, a factorisation
/// `nu = U_r S_r`, `theta = V_r` reproducing every entry.
pub fn bellman_rank_check(matrix: &[Vec<f64>], target_rank: usize, zeta: Option<f64>) -> RankCheck {
    let rows = matrix.len();
    let cols = matrix.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        let factorization = RankFactorization { rank: 0, nu: vec![Vec::new(); rows], theta: vec![Vec::new(); cols], zeta: 0.0, max_error: 0.0 };
        return RankCheck { rank: 0, singular_values: Vec::new(), factorization: Some(factorization), refusal: None };
    }
    let m = DMatrix::from_fn(rows, cols, |i, j| matrix[i][j]);
    let svd = crate::linalg::svd(&m);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let sigma: Vec<f64> = svd.singular_values.iter().copied().collect();
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..sigma.len()).collect();
        idx.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
        idx
    };
    let rank = sigma.iter().filter(|&&s| s > RANK_TOL).count();
    let singular_values: Vec<f64> = order.iter().map(|&k| sigma[k]).collect();
    if rank > target_rank {
        return RankCheck {
            rank,
            singular_values,
            factorization: None,
            refusal: Some(format!("numerical rank {rank} exceeds the target {target_rank}")),
        };
    }
    let kept = &order[..rank];
    let nu: Vec<Vec<f64>> = (0..rows).map(|i| kept.iter().map(|&k| u[(i, k)] * sigma[k]).collect()).collect();
    let theta: Vec<Vec<f64>> = (0..cols).map(|j| kept.iter().map(|&k| v_t[(k, j)]).collect()).collect();
    let max_error = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| (dot(&nu[i], &theta[j]) - matrix[i][j]).abs())
        .fold(0.0, f64::max);
    let norm = theta.iter().map(|t| dot(t, t).sqrt()).fold(0.0, f64::max);
    if let Some(z) = zeta {
        if norm > z + 1e-12 {
            return RankCheck {
                rank,
                singular_values,
                factorization: None,
                refusal: Some(format!("factor norm {norm} exceeds zeta = {z}")),
            };
        }
    }
    RankCheck { rank, singular_values, factorization: Some(RankFactorization { rank, nu, theta, zeta: norm, max_error }), refusal: None }
}
