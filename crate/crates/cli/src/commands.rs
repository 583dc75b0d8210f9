//! Subcommand implementations. Each returns its report and writes its files
//! into the output directory.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rfolive::dimensions::{be_dimension, bellman_rank_check, error_matrix, BeDimension, RankCheck, SearchMode, EXHAUSTIVE_CAP};
use rfolive::funclass::{
    check_completeness, check_linear_completeness, check_realizability, default_theta_grid, greedy_policy,
    CompletenessReport, LinearCompletenessReport, RealizabilityReport, RewardClass, TieRule, ValueFunction,
};
use rfolive::mdp::{DeterministicPolicy, LayeredMdp, RewardTable};
use rfolive::olive::{OliveConfig, Variant};
use rfolive::rfolive::{offline_all, online_phase, plan, ConstraintSet, RewardOutput};
use rfolive::rng::{stream, stream_rng};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::instance::{fixture, resolve, FixtureFile, FixtureName};
use crate::output::{json_bytes, write_all};

/// Largest class `dim` enumerates.
pub const DIM_FUNCTION_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Online,
    Offline,
    #[default]
    Both,
}

/// Offline output for one reward, with the policy also spelled out by
/// action name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    #[serde(flatten)]
    pub output: RewardOutput,
    pub actions: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub iterations: usize,
    pub constraints: usize,
    /// Level of each stored constraint, in collection order.
    pub levels: Vec<usize>,
}

/// `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub source: String,
    pub phase: Phase,
    pub seed: u64,
    pub olive: OliveConfig,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_off: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online: Option<OnlineSummary>,
    pub outputs: Vec<PolicyReport>,
}

fn action_names(mdp: &LayeredMdp, policy: &DeterministicPolicy) -> Vec<Vec<String>> {
    policy.levels().iter().enumerate().map(|(h, level)| level.iter().map(|&a| mdp.action_name(h, a)).collect()).collect()
}

/// Options of `run` beyond the experiment config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub phase: Phase,
    /// Restrict the offline phase to this reward.
    pub reward: Option<String>,
    /// Saved constraint set; required for `--phase offline`.
    pub constraints: Option<PathBuf>,
}

/// Runs (part of) the reward-free algorithm and writes the result JSON, plus
/// the trace CSV and constraint JSON when the online phase ran.
pub fn run(config: &ExperimentConfig, opts: &RunOptions, out_dir: &Path) -> Result<RunResult, CliError> {
    let (result, files) = run_in_memory(config, opts)?;
    let named: Vec<(&str, Vec<u8>)> = files.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
    write_all(out_dir, &named)?;
    Ok(result)
}

fn run_in_memory(config: &ExperimentConfig, opts: &RunOptions) -> Result<(RunResult, Vec<(String, Vec<u8>)>), CliError> {
    config.validate()?;
    let saved = match (opts.phase, &opts.constraints) {
        (Phase::Offline, None) => return Err(CliError::Config("--phase offline needs a saved constraint file".into())),
        (Phase::Offline, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read constraint file {}: {e}", path.display())))?;
            let set = ConstraintSet::from_json(&text)?;
            if set.variant != config.variant {
                return Err(CliError::Config("constraint file was collected with the other variant".into()));
            }
            Some(set)
        }
        _ => None,
    };
    let inst = resolve(config)?;
    let class = inst.class()?;
    let rewards = match (opts.phase, &inst.rewards) {
        (Phase::Online, None) => RewardClass::zero(&inst.mdp),
        _ => inst.rewards()?.clone(),
    };
    let rewards = match &opts.reward {
        None => rewards,
        Some(name) => {
            let r = rewards.get(name).ok_or_else(|| CliError::Config(format!("no reward named {name:?}")))?;
            RewardClass::new(vec![r.clone()])?
        }
    };

    let (mut olive, d) = plan(&inst.mdp, class, &rewards, &config.params())?;
    if let Some(n) = config.n_actv {
        olive.n_actv = n;
    }
    if let Some(n) = config.n_elim {
        olive.n_elim = n;
    }
    let mut files = Vec::new();
    let mut online = None;
    let constraints = match saved {
        Some(set) => set,
        None => {
            let res = online_phase(&inst.mdp, class, &olive, &mut stream_rng(config.seed, stream::ONLINE))?;
            online = Some(OnlineSummary {
                iterations: res.trace.iterations.len(),
                constraints: res.constraints.records.len(),
                levels: res.constraints.records.iter().map(|r| r.h).collect(),
            });
            files.push((config.outputs.trace.clone(), res.trace.to_csv().into_bytes()));
            files.push((config.outputs.constraints.clone(), json_bytes(&res.constraints)));
            res.constraints
        }
    };
    let mut tau_off = None;
    let mut outputs = Vec::new();
    if opts.phase != Phase::Online {
        let tau = config.tau_off.unwrap_or(olive.eps_elim / 2.0);
        tau_off = Some(tau);
        outputs = offline_all(&inst.mdp, &constraints, class, &rewards, tau)?
            .into_iter()
            .map(|o| PolicyReport { actions: action_names(&inst.mdp, &o.policy), output: o })
            .collect();
    }
    let result = RunResult { source: inst.name, phase: opts.phase, seed: config.seed, olive, d, tau_off, online, outputs };
    files.push((config.outputs.result.clone(), json_bytes(&result)));
    Ok((result, files))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearEntry {
    pub instance: usize,
    pub passed: bool,
    pub max_residual: f64,
    pub report: LinearCompletenessReport,
}

/// `check.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub source: String,
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realizability: Option<RealizabilityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completeness: Option<CompletenessReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linear_completeness: Vec<LinearEntry>,
    pub passed: bool,
}

/// Runs the realizability and completeness checkers (when the instance has
/// both classes) and the linear completeness checker on every tree-family
/// member (weights bounded by 1, unit directions plus 5 random parameters
/// per level).
pub fn check(config: &ExperimentConfig, tol: f64, out_dir: &Path) -> Result<CheckReport, CliError> {
    config.validate()?;
    let inst = resolve(config)?;
    let (realizability, completeness) = match (&inst.class, &inst.rewards) {
        (Some(c), Some(r)) => {
            (Some(check_realizability(&inst.mdp, c, r, tol)), Some(check_completeness(&inst.mdp, c, r, tol)))
        }
        _ => (None, None),
    };
    let mut rng = stream_rng(config.seed, stream::GENERATOR);
    let linear_completeness: Vec<LinearEntry> = inst
        .linear_cases
        .iter()
        .map(|case| {
            let grid = default_theta_grid(&case.feature, 1.0, 5, &mut rng);
            let report = check_linear_completeness(&case.mdp, &case.feature, &grid, 1.0);
            LinearEntry { instance: case.index, passed: report.passed, max_residual: report.max_residual, report }
        })
        .collect();
    if realizability.is_none() && linear_completeness.is_empty() {
        return Err(CliError::Config(format!("{} has nothing to check; supply a function class", inst.name)));
    }
    let passed = realizability.as_ref().is_none_or(|r| r.passed)
        && completeness.as_ref().is_none_or(|c| c.passed)
        && linear_completeness.iter().all(|l| l.passed);
    let report = CheckReport { source: inst.name, tol, realizability, completeness, linear_completeness, passed };
    write_all(out_dir, &[("check.json", json_bytes(&report))])?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRank {
    pub level: usize,
    pub target: usize,
    pub q: RankCheck,
    pub v: RankCheck,
}

/// `dim.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub source: String,
    pub eps: f64,
    pub reward: String,
    pub functions: usize,
    pub search: SearchMode,
    pub q: BeDimension,
    pub v: BeDimension,
    pub rank: Vec<LevelRank>,
}

#[derive(Debug, Clone, Default)]
pub struct DimOptions {
    pub reward: Option<String>,
    pub search: SearchMode,
    /// Rank target per level; defaults to the one-hot dimension `|X_h| K_h`.
    pub rank: Option<usize>,
}

/// Q- and V-type Bellman-Eluder dimensions of the instance's functions at
/// `config.eps` and the rank of their error matrices against their greedy
/// policies.
pub fn dim(config: &ExperimentConfig, opts: &DimOptions, out_dir: &Path) -> Result<DimReport, CliError> {
    config.validate()?;
    let inst = resolve(config)?;
    let functions: Vec<ValueFunction> = match &inst.functions {
        Some(f) => f.clone(),
        None => {
            let class = inst.class()?;
            class.all_ids(DIM_FUNCTION_CAP)?.iter().map(|ids| class.to_value_function(ids)).collect()
        }
    };
    let (reward_name, reward): (String, RewardTable) = match (&opts.reward, &inst.rewards) {
        (Some(name), Some(rs)) => {
            let r = rs.get(name).ok_or_else(|| CliError::Config(format!("no reward named {name:?}")))?;
            (r.name.clone(), r.table.clone())
        }
        (Some(name), None) => return Err(CliError::Config(format!("no reward named {name:?}"))),
        (None, Some(rs)) => (rs[0].name.clone(), rs[0].table.clone()),
        (None, None) => ("0".into(), RewardTable::zero(&inst.mdp)),
    };
    let mdp = &inst.mdp;
    let be = |variant| be_dimension(mdp, &functions, None, Some(&reward), config.eps, variant, opts.search, EXHAUSTIVE_CAP);
    let q = be(Variant::Q)?;
    let v = be(Variant::V)?;
    let policies: Vec<DeterministicPolicy> = functions.iter().map(|f| greedy_policy(mdp, f, &TieRule::First)).collect();
    let rank = (0..mdp.horizon())
        .map(|h| {
            let target = opts.rank.unwrap_or_else(|| mdp.num_pairs(h));
            let check = |variant| bellman_rank_check(&error_matrix(mdp, &policies, &functions, Some(&reward), h, variant), target, None);
            LevelRank { level: h, target, q: check(Variant::Q), v: check(Variant::V) }
        })
        .collect();
    let report =
        DimReport { source: inst.name, eps: config.eps, reward: reward_name, functions: functions.len(), search: opts.search, q, v, rank };
    write_all(out_dir, &[("dim.json", json_bytes(&report))])?;
    Ok(report)
}

/// File name the `fixture` subcommand writes for `name`.
pub fn fixture_file_name(name: FixtureName) -> String {
    format!("{}.json", name.to_string().replace(':', "-"))
}

/// Writes a fixture as JSON.
pub fn emit_fixture(name: FixtureName, out_dir: &Path) -> Result<PathBuf, CliError> {
    let file = FixtureFile::from_instance(&fixture(name)?);
    let mut paths = write_all(out_dir, &[(&fixture_file_name(name), json_bytes(&file))])?;
    Ok(paths.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub reward: String,
    pub suboptimality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub seed: u64,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<SweepOutcome>,
}

/// `sweep.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub runs: Vec<SweepEntry>,
}

/// Directory of one sweep run.
pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

/// Runs the full algorithm once per seed, in parallel; each run writes into
/// its own `seed-<s>` directory. Failed runs are recorded in the summary.
pub fn sweep(config: &ExperimentConfig, seeds: &[u64], out_dir: &Path) -> Result<SweepSummary, CliError> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(CliError::Config("sweep needs at least one seed".into()));
    }
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = ExperimentConfig { seed, ..config.clone() };
            match run(&cfg, &RunOptions::default(), &seed_dir(out_dir, seed)) {
                Ok(res) => SweepEntry {
                    seed,
                    exit_code: crate::error::exit::OK,
                    error: None,
                    outputs: res
                        .outputs
                        .iter()
                        .map(|o| SweepOutcome { reward: o.output.reward.clone(), suboptimality: o.output.suboptimality })
                        .collect(),
                },
                Err(e) => SweepEntry { seed, exit_code: e.exit_code(), error: Some(e.to_string()), outputs: Vec::new() },
            }
        })
        .collect();
    let summary = SweepSummary { runs };
    write_all(out_dir, &[("sweep.json", json_bytes(&summary))])?;
    Ok(summary)
}
