//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rfolive::dimensions::SearchMode;
use rfolive::funclass::{FunctionClassSpec, RewardClassSpec, MEMBERSHIP_TOL};
use rfolive::mdp::LayeredMdp;
use rfolive::olive::{Choice, Mode, Variant};

use crate::commands::{self, DimOptions, Phase, RunOptions};
use crate::config::{parse_choice, ExperimentConfig, MdpSource};
use crate::error::{exit, CliError};

const SCHEMAS: &str = "\
FILES
  Experiment config (--config), JSON; every field optional:
    {\"mdp\": {\"fixture\": \"table3\"} | {\"inline\": <mdp>},
     \"function_class\": {\"type\": \"finite\", \"tables\": [[level table, ...] per level], \"names\"?, \"bounds\"?}
                     | {\"type\": \"linear\", \"feature_ref\": \"one_hot\"|\"designated\", \"bound_per_level\": [..], \"grid_pitch\": p},
     \"reward_class\": {\"type\": \"finite\", \"tables\": [[level table per level] per reward], \"names\"?}
                   | {\"type\": \"linear\", \"feature_ref\": .., \"grid_pitch\": p},
     \"eps\": 0.1, \"delta\": 0.1, \"variant\": \"Q\"|\"V\", \"mode\": \"exact\"|\"sampled\", \"seed\": 0,
     \"tie_break\": {\"optimism\": \"lowest\"|\"highest\"|{\"scripted\": [rank, ..]},
                   \"deviation\": \"lowest\"|\"highest\"|{\"scripted\": [level, ..]}},
     \"c\": 1.0, \"tau_off\": null, \"t_max\": null, \"n_actv\": null, \"n_elim\": null,
     \"outputs\": {\"result\": \"result.json\", \"trace\": \"trace.csv\", \"constraints\": \"constraints.json\"}}
  A level table is [state][action] values. An mdp is
    {\"horizon\": H, \"states\": [[name per state] per level 0..=H], \"actions\": [count per level],
     \"action_names\"?: [[name per action] per level], \"transitions\": [h][x][a][x'], \"start\": 0}.
  result.json: source, phase, seed, olive (thresholds, sample sizes, cap), d, tau_off,
    online {iterations, constraints, levels}, outputs [{reward, policy, actions, selected,
    V_ghat_x0, survivors, suboptimality}].
  trace.csv: t,V_opt,h_t,survivors_before,survivors_after,terminated (one row per iteration).
  constraints.json: {variant, mode, records [{t, h, policy, source, mode, distribution|dataset}], cover?}.
  check.json, dim.json, sweep.json and fixture files are self-describing JSON.

FIXTURES
  table3, table4, bandit:N, tree:H (all instances for check; instance 0 otherwise),
  tree:H:i, closed:SEED (random instance passing both checkers).

EXIT CODES
  0 success, 1 other failure, 2 configuration error, 3 assumption violation
  (empty version space), 4 iteration cap exceeded.

ENVIRONMENT
  RFOLIVE_OUT_DIR  output directory (default: current directory).";

#[derive(Debug, Parser)]
#[command(name = "rfolive", version, about = "Reward-free OLIVE experiments on exactly solvable MDPs", after_long_help = SCHEMAS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the online phase, the offline phase, or both.
    Run(RunArgs),
    /// Check realizability, completeness and linear completeness.
    Check(CheckArgs),
    /// Bellman-Eluder dimensions and Bellman-rank checks.
    Dim(DimArgs),
    /// Write a named fixture as JSON.
    Fixture(FixtureArgs),
    /// Run the full algorithm over several seeds in parallel.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Q,
    V,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SearchArg {
    Exhaustive,
    Greedy,
}

/// Experiment fields; flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// Experiment config JSON (see --help for the schema).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named fixture (table3, table4, bandit:N, tree:H[:i], closed:SEED).
    #[arg(long, conflicts_with = "mdp")]
    pub fixture: Option<String>,
    /// MDP JSON file.
    #[arg(long)]
    pub mdp: Option<PathBuf>,
    /// Function class spec JSON file.
    #[arg(long)]
    pub class: Option<PathBuf>,
    /// Reward class spec JSON file.
    #[arg(long)]
    pub rewards: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Constant in the log factor of the sample sizes.
    #[arg(long)]
    pub c: Option<f64>,
    /// Offline elimination threshold (default eps_elim / 2).
    #[arg(long)]
    pub tau_off: Option<f64>,
    /// Online iteration cap (default d H + 1).
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Sampled mode: episodes per activation check.
    #[arg(long)]
    pub n_actv: Option<usize>,
    /// Sampled mode: samples per elimination constraint.
    #[arg(long)]
    pub n_elim: Option<usize>,
    /// Optimism ties: lowest, highest, or ranks per iteration (e.g. 0,1).
    #[arg(long, value_parser = parse_choice)]
    pub tie_optimism: Option<Choice>,
    /// Deviation level: lowest, highest, or levels per iteration (e.g. 0,1).
    #[arg(long, value_parser = parse_choice)]
    pub tie_deviation: Option<Choice>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl ExperimentArgs {
    pub fn to_config(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(name) = &self.fixture {
            c.mdp = MdpSource::Fixture(name.clone());
        }
        if let Some(path) = &self.mdp {
            let mdp: LayeredMdp = read_json(path)?;
            c.mdp = MdpSource::Inline(mdp);
        }
        if let Some(path) = &self.class {
            c.function_class = Some(read_json::<FunctionClassSpec>(path)?);
        }
        if let Some(path) = &self.rewards {
            c.reward_class = Some(read_json::<RewardClassSpec>(path)?);
        }
        c.eps = self.eps.unwrap_or(c.eps);
        c.delta = self.delta.unwrap_or(c.delta);
        if let Some(v) = self.variant {
            c.variant = match v {
                VariantArg::Q => Variant::Q,
                VariantArg::V => Variant::V,
            };
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::Exact => Mode::Exact,
                ModeArg::Sampled => Mode::Sampled,
            };
        }
        c.seed = self.seed.unwrap_or(c.seed);
        c.c = self.c.unwrap_or(c.c);
        c.tau_off = self.tau_off.or(c.tau_off);
        c.t_max = self.t_max.or(c.t_max);
        c.n_actv = self.n_actv.or(c.n_actv);
        c.n_elim = self.n_elim.or(c.n_elim);
        if let Some(t) = &self.tie_optimism {
            c.tie_break.optimism = t.clone();
        }
        if let Some(t) = &self.tie_deviation {
            c.tie_break.deviation = t.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, env = "RFOLIVE_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, value_enum, default_value = "both")]
    pub phase: Phase,
    /// Only plan for this reward.
    #[arg(long)]
    pub reward: Option<String>,
    /// Saved constraint set (required with --phase offline).
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Membership tolerance.
    #[arg(long, default_value_t = MEMBERSHIP_TOL)]
    pub tol: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct DimArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Reward entering the residuals (default: the first of the class).
    #[arg(long)]
    pub reward: Option<String>,
    #[arg(long, value_enum, default_value = "exhaustive")]
    pub search: SearchArg,
    /// Target rank for the factorisation (default |X_h| K_h).
    #[arg(long)]
    pub rank: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    /// Fixture name.
    pub name: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Executes a parsed command and returns a one-line summary.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run(a) => {
            let config = a.experiment.to_config()?;
            let opts = RunOptions { phase: a.phase, reward: a.reward, constraints: a.constraints };
            let res = commands::run(&config, &opts, &a.out.out_dir)?;
            let parts: Vec<String> = res
                .outputs
                .iter()
                .map(|o| format!("{}: {} (suboptimality {:.6})", o.output.reward, o.output.selected, o.output.suboptimality))
                .collect();
            Ok(match &res.online {
                Some(on) if parts.is_empty() => format!("online phase: {} constraints", on.constraints),
                _ => parts.join("; "),
            })
        }
        Command::Check(a) => {
            let config = a.experiment.to_config()?;
            let report = commands::check(&config, a.tol, &a.out.out_dir)?;
            Ok(format!("{}: {}", report.source, if report.passed { "all checks pass" } else { "some checks fail" }))
        }
        Command::Dim(a) => {
            let config = a.experiment.to_config()?;
            let search = match a.search {
                SearchArg::Exhaustive => SearchMode::Exhaustive,
                SearchArg::Greedy => SearchMode::Greedy,
            };
            let report = commands::dim(&config, &DimOptions { reward: a.reward, search, rank: a.rank }, &a.out.out_dir)?;
            Ok(format!("{}: Q-type {}, V-type {}", report.source, report.q.dimension, report.v.dimension))
        }
        Command::Fixture(a) => {
            let path = commands::emit_fixture(a.name.parse()?, &a.out.out_dir)?;
            Ok(path.display().to_string())
        }
        Command::Sweep(a) => {
            let config = a.experiment.to_config()?;
            let summary = commands::sweep(&config, &a.seeds, &a.out.out_dir)?;
            let failed = summary.runs.iter().filter(|r| r.exit_code != exit::OK).count();
            Ok(format!("{} runs, {failed} failed", summary.runs.len()))
        }
    }
}

/// Entry point: parses `args`, runs, reports and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
