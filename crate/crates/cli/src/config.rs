//! Experiment configuration.

use std::path::Path;

use rfolive::funclass::{FunctionClassSpec, RewardClassSpec};
use rfolive::mdp::LayeredMdp;
use rfolive::olive::{Choice, Mode, TieBreak, Variant};
use rfolive::rfolive::RewardFreeParams;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::instance::FixtureName;

/// Where the MDP comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdpSource {
    Fixture(String),
    Inline(LayeredMdp),
}

/// Output file names, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub result: String,
    pub trace: String,
    pub constraints: String,
}

impl Default for OutputPaths {
    fn default() -> Self {
        OutputPaths { result: "result.json".into(), trace: "trace.csv".into(), constraints: "constraints.json".into() }
    }
}

/// One experiment. Missing fields take their defaults; function and reward
/// classes default to the fixture's own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mdp: MdpSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub function_class: Option<FunctionClassSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_class: Option<RewardClassSpec>,
    pub eps: f64,
    pub delta: f64,
    pub variant: Variant,
    pub mode: Mode,
    pub seed: u64,
    pub tie_break: TieBreak,
    pub c: f64,
    pub tau_off: Option<f64>,
    pub t_max: Option<usize>,
    /// Sample-size overrides for sampled mode.
    pub n_actv: Option<usize>,
    pub n_elim: Option<usize>,
    pub outputs: OutputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = RewardFreeParams::default();
        ExperimentConfig {
            mdp: MdpSource::Fixture("table3".into()),
            function_class: None,
            reward_class: None,
            eps: p.eps,
            delta: p.delta,
            variant: p.variant,
            mode: p.mode,
            seed: 0,
            tie_break: p.tie_break,
            c: p.c,
            tau_off: None,
            t_max: None,
            n_actv: None,
            n_elim: None,
            outputs: OutputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.eps > 0.0 && self.eps < 1.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(CliError::Config("eps and delta must lie in (0, 1)".into()));
        }
        if !(self.c > 0.0) {
            return Err(CliError::Config("c must be positive".into()));
        }
        if let Some(t) = self.tau_off {
            if !(t >= 0.0) {
                return Err(CliError::Config("tau_off must be non-negative".into()));
            }
        }
        if self.t_max == Some(0) || self.n_actv == Some(0) || self.n_elim == Some(0) {
            return Err(CliError::Config("t_max, n_actv and n_elim must be at least 1".into()));
        }
        if let MdpSource::Fixture(name) = &self.mdp {
            name.parse::<FixtureName>()?;
        }
        let o = &self.outputs;
        for f in [&o.result, &o.trace, &o.constraints] {
            if f.is_empty() || Path::new(f).components().count() != 1 {
                return Err(CliError::Config(format!("output name {f:?} must be a plain file name")));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> RewardFreeParams {
        RewardFreeParams {
            eps: self.eps,
            delta: self.delta,
            variant: self.variant,
            mode: self.mode,
            c: self.c,
            tau_off: self.tau_off,
            t_max: self.t_max,
            tie_break: self.tie_break.clone(),
        }
    }
}

/// Parses `lowest`, `highest` or a comma-separated script such as `0,1`.
pub fn parse_choice(s: &str) -> Result<Choice, String> {
    match s.trim() {
        "lowest" => Ok(Choice::Lowest),
        "highest" => Ok(Choice::Highest),
        list => list
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| format!("expected lowest, highest or a list like 0,1; got {s:?}")))
            .collect::<Result<Vec<_>, _>>()
            .map(Choice::Scripted),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"mdp": {"fixture": "table4"}, "eps": 0.2}"#).unwrap();
        assert_eq!(partial.eps, 0.2);
        assert_eq!(partial.delta, c.delta);
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.eps = 1.0;
        assert!(c.validate().is_err());
        let c = ExperimentConfig { mdp: MdpSource::Fixture("nope".into()), ..Default::default() };
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.outputs.result = "../x.json".into();
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"epsilon": 0.1}"#).is_err());
    }

    #[test]
    fn choices() {
        assert_eq!(parse_choice("lowest").unwrap(), Choice::Lowest);
        assert_eq!(parse_choice("highest").unwrap(), Choice::Highest);
        assert_eq!(parse_choice("0, 1").unwrap(), Choice::Scripted(vec![0, 1]));
        assert!(parse_choice("first").is_err());
    }
}
