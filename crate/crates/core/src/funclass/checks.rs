//! Realizability and completeness checkers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sup_distance, zip_level, FiniteClass, LinearFeatureMap, RewardClass};
use crate::mdp::{bellman_backup, optimal_q, LayeredMdp, LevelValues};

/// Default membership tolerance.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizabilityEntry {
    pub reward: String,
    /// `min_{f in F_h} |Q*_{R,h} - R_h - f_h|_inf` per level.
    pub distances: Vec<f64>,
    /// Index of the closest member per level.
    pub closest: Vec<usize>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizabilityReport {
    pub tol: f64,
    pub entries: Vec<RealizabilityEntry>,
    pub passed: bool,
}

fn closest(members: impl Iterator<Item = LevelValues>, target: &LevelValues) -> (usize, f64) {
    members
        .enumerate()
        .map(|(i, v)| (i, sup_distance(&v, target)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Checks `Q*_{R,h} in F_h + R_h` for every reward and level.
pub fn check_realizability(mdp: &LayeredMdp, class: &FiniteClass, rewards: &RewardClass, tol: f64) -> RealizabilityReport {
    let entries: Vec<RealizabilityEntry> = rewards
        .iter()
        .map(|r| {
            let q = optimal_q(mdp, &r.table).q;
            let (closest, distances): (Vec<usize>, Vec<f64>) = (0..mdp.horizon())
                .map(|h| {
                    let target = zip_level(&q[h], r.table.level(h), |a, b| a - b);
                    closest(class.level_members(h).iter().map(|m| m.values.clone()), &target)
                })
                .unzip();
            let passed = distances.iter().all(|&d| d <= tol);
            RealizabilityEntry { reward: r.name.clone(), distances, closest, passed }
        })
        .collect();
    let passed = entries.iter().all(|e| e.passed);
    RealizabilityReport { tol, entries, passed }
}

/// One backup that falls outside its target set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosureViolation {
    /// `"T0 F"`, `"T0 (F+R)"` or `"T0 (F-F)"`.
    pub condition: String,
    /// Level of the backed-up function (the source lives at `level + 1`).
    pub level: usize,
    /// The level-`(level + 1)` source, e.g. `f_bad` or `f_bad+R2`.
    pub source: String,
    pub backup: LevelValues,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessReport {
    pub tol: f64,
    pub violations: Vec<ClosureViolation>,
    pub passed: bool,
}

impl CompletenessReport {
    pub fn has_violation(&self, condition: &str, level: usize, source: &str) -> bool {
        self.violations.iter().any(|v| v.condition == condition && v.level == level && v.source == source)
    }
}

/// Checks the three closure conditions
/// `T0 F_{h+1} in F_h`, `T0 (F_{h+1} + R_{h+1}) in F_h` and
/// `T0 (F_{h+1} - F_{h+1}) in F_h - F_h` by exact backup.
pub fn check_completeness(mdp: &LayeredMdp, class: &FiniteClass, rewards: &RewardClass, tol: f64) -> CompletenessReport {
    let mut violations = Vec::new();
    for h in 0..mdp.horizon().saturating_sub(1) {
        let here: Vec<&LevelValues> = class.level_members(h).iter().map(|m| &m.values).collect();
        let here_diff: Vec<LevelValues> =
            here.iter().flat_map(|a| here.iter().map(move |b| zip_level(a, b, |x, y| x - y))).collect();
        let mut test = |condition: &str, source: String, next: &LevelValues, targets: &mut dyn Iterator<Item = &LevelValues>| {
            let backup = bellman_backup(mdp, None, next, h);
            let distance = targets.map(|t| sup_distance(t, &backup)).fold(f64::INFINITY, f64::min);
            if distance > tol {
                violations.push(ClosureViolation { condition: condition.into(), level: h, source, backup, distance });
            }
        };
        let next = class.level_members(h + 1);
        for m in next {
            test("T0 F", m.name.clone(), &m.values, &mut here.iter().copied());
        }
        for r in rewards.iter() {
            for m in next {
                let shifted = zip_level(&m.values, r.table.level(h + 1), |a, b| a + b);
                test("T0 (F+R)", format!("{}+{}", m.name, r.name), &shifted, &mut here.iter().copied());
            }
        }
        for a in next {
            for b in next {
                let diff = zip_level(&a.values, &b.values, |x, y| x - y);
                test("T0 (F-F)", format!("{}-{}", a.name, b.name), &diff, &mut here_diff.iter());
            }
        }
    }
    let passed = violations.is_empty();
    CompletenessReport { tol, violations, passed }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLevelCheck {
    pub level: usize,
    pub theta_next: Vec<f64>,
    pub theta: Vec<f64>,
    pub residual: f64,
    pub theta_norm: f64,
    pub norm_bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCompletenessReport {
    pub checks: Vec<LinearLevelCheck>,
    pub max_residual: f64,
    pub passed: bool,
}

/// Least-squares solve of `Phi theta = target` with singular values below
/// `1e-12` dropped (minimum-norm solution).
fn min_norm_solve(phi: &DMatrix<f64>, target: &DVector<f64>) -> DVector<f64> {
    let svd = crate::linalg::svd(phi);
    let cutoff = 1e-12 * svd.singular_values.max().max(1.0);
    svd.solve(target, cutoff).expect("svd computed with u and v")
}

/// Checks linear completeness of `feature` on `mdp` over a verification
/// grid of next-level parameters.
///
/// `grid[h]` lists parameters `theta_{h+1}` for level `h + 1`, each giving
/// values inside `[-bound, bound]`. For each, `T0_h <phi_{h+1}, theta_{h+1}>`
/// is solved for `theta_h` by minimum-norm least squares; the check passes
/// when the residual is at most `1e-9` and `|theta_h| <= bound sqrt(d_h)`.
pub fn check_linear_completeness(
    mdp: &LayeredMdp,
    feature: &LinearFeatureMap,
    grid: &[Vec<Vec<f64>>],
    bound: f64,
) -> LinearCompletenessReport {
    let mut checks = Vec::new();
    for h in 0..mdp.horizon().saturating_sub(1) {
        let pairs: Vec<(usize, usize)> =
            (0..mdp.num_states(h)).flat_map(|x| (0..mdp.num_actions(h)).map(move |a| (x, a))).collect();
        let d = feature.dim(h);
        let phi = DMatrix::from_fn(pairs.len(), d, |r, c| feature.phi(h, pairs[r].0, pairs[r].1)[c]);
        for theta_next in grid.get(h).map(Vec::as_slice).unwrap_or(&[]) {
            let next = feature.evaluate(h + 1, theta_next);
            let backup = bellman_backup(mdp, None, &next, h);
            let target = DVector::from_iterator(pairs.len(), pairs.iter().map(|&(x, a)| backup[x][a]));
            let theta = min_norm_solve(&phi, &target);
            let residual = (&phi * &theta - &target).amax();
            let norm_bound = bound * (d as f64).sqrt();
            let theta_norm = theta.norm();
            let passed = residual <= MEMBERSHIP_TOL && theta_norm <= norm_bound + MEMBERSHIP_TOL;
            checks.push(LinearLevelCheck {
                level: h,
                theta_next: theta_next.clone(),
                theta: theta.iter().copied().collect(),
                residual,
                theta_norm,
                norm_bound,
                passed,
            });
        }
    }
    let max_residual = checks.iter().map(|c| c.residual).fold(0.0, f64::max);
    let passed = checks.iter().all(|c| c.passed);
    LinearCompletenessReport { checks, max_residual, passed }
}

/// Verification grid: `+-B e_k` for every unit direction plus `extra`
/// random draws with values inside `[-B, B]`, for every next level.
pub fn default_theta_grid<R: Rng + ?Sized>(feature: &LinearFeatureMap, bound: f64, extra: usize, rng: &mut R) -> Vec<Vec<Vec<f64>>> {
    (1..feature.horizon())
        .map(|h| {
            let d = feature.dim(h);
            let mut out = Vec::new();
            for k in 0..d {
                for s in [-1.0, 1.0] {
                    let mut theta = vec![0.0; d];
                    theta[k] = s * bound;
                    out.push(theta);
                }
            }
            for _ in 0..extra {
                // Scaling by 1/sqrt(d) keeps |<phi, theta>| <= |theta| <= B.
                let theta: Vec<f64> = (0..d).map(|_| rng.gen_range(-bound..=bound) / (d as f64).sqrt()).collect();
                out.push(theta);
            }
            out
        })
        .collect()
}
