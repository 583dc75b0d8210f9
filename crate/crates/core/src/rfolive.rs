//! Reward-free OLIVE: a zero-reward online phase that collects constraints,
//! then an offline phase per revealed reward that needs no new samples.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dimensions::class_rollin_count;
use crate::error::{Error, Result};
use crate::funclass::{
    cover_finite, difference_class, greedy_level, greedy_policy, reward_append, FiniteClass, NamedReward, QFunction,
    RewardClass, TieRule,
};
use crate::mdp::{optimal_q, policy_value, DeterministicPolicy, LayeredMdp};
use crate::olive::{
    constraint_error, run_olive, schedule_q, schedule_v, ActionTag, ConstraintRecord, Mode, OliveConfig, OliveTrace,
    TieBreak, Variant, VERSION_SPACE_CAP,
};

/// Radius of the online cover relative to `eps_elim` (V-type).
pub const COVER_FRACTION: f64 = 1.0 / 64.0;

/// Everything the offline phase consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub variant: Variant,
    pub mode: Mode,
    pub records: Vec<ConstraintRecord>,
    /// `Z_on` for V-type runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover: Option<FiniteClass>,
}

impl ConstraintSet {
    pub fn empty(variant: Variant, mode: Mode) -> Self {
        ConstraintSet { variant, mode, records: Vec::new(), cover: None }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("constraint sets serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: ConstraintSet = serde_json::from_str(s)?;
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let tag = match self.variant {
            Variant::Q => ActionTag::RollIn,
            Variant::V => ActionTag::Uniform,
        };
        if self.records.iter().any(|r| r.source != tag) {
            return Err(Error::InvalidInput("constraint action source does not match the variant".into()));
        }
        if self.variant == Variant::V && self.cover.is_none() {
            return Err(Error::InvalidInput("V-type constraint set without its cover".into()));
        }
        Ok(())
    }

    /// `Pi_on`: the greedy policy of every member of `Z_on`, in id order.
    pub fn policies(&self, mdp: &LayeredMdp) -> Result<Vec<DeterministicPolicy>> {
        let cover = self.cover.as_ref().ok_or_else(|| Error::InvalidInput("no cover stored".into()))?;
        Ok(cover
            .all_ids(VERSION_SPACE_CAP)?
            .iter()
            .map(|ids| greedy_policy(mdp, &cover.member(ids), &TieRule::First))
            .collect())
    }

    /// Distinct level-`h` action maps of `Pi_on`. Only these matter for a
    /// level-`h` constraint, since the importance weight reads `pi'(x_h)`.
    pub fn witness_maps(&self, h: usize) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = Vec::new();
        if let Some(cover) = &self.cover {
            for m in cover.level_members(h) {
                let map = greedy_level(&m.values, &TieRule::First, h);
                if !out.contains(&map) {
                    out.push(map);
                }
            }
        }
        out
    }
}

/// Result of the online phase.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineResult {
    pub constraints: ConstraintSet,
    pub trace: OliveTrace,
}

/// The class explored online: `F - F` (Q-type) or its
/// `eps_elim / 64`-cover (V-type).
pub fn online_class(mdp: &LayeredMdp, class: &FiniteClass, config: &OliveConfig) -> Result<FiniteClass> {
    let diff = difference_class(mdp, class, 0.0);
    match config.variant {
        Variant::Q => Ok(diff),
        Variant::V => Ok(cover_finite(mdp, &diff, config.eps_elim * COVER_FRACTION)?.0),
    }
}

/// Runs OLIVE with zero reward on the online class and keeps its
/// constraints.
pub fn online_phase<R: Rng + ?Sized>(mdp: &LayeredMdp, class: &FiniteClass, config: &OliveConfig, rng: &mut R) -> Result<OnlineResult> {
    let on = online_class(mdp, class, config)?;
    let out = run_olive(mdp, &on, None, config, rng)?;
    let cover = (config.variant == Variant::V).then_some(on);
    Ok(OnlineResult {
        constraints: ConstraintSet { variant: config.variant, mode: config.mode, records: out.constraints, cover },
        trace: out.trace,
    })
}

/// Result of the offline phase for one reward.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineOutcome {
    pub policy: DeterministicPolicy,
    /// Ids of the selected `g` in `F + R` (equal to ids in `F`).
    pub selected: Vec<usize>,
    pub selected_name: String,
    /// `V_g(x_0)` of the selected `g`.
    pub value: f64,
    pub survivors: Vec<Vec<usize>>,
}

/// Keeps every `g` in `F + R` whose error on each stored constraint is at
/// most `tau_off` in absolute value (for V-type, against every witness in
/// `Pi_on`), then returns the optimistic survivor and its greedy policy.
pub fn offline_phase(
    mdp: &LayeredMdp,
    constraints: &ConstraintSet,
    class: &FiniteClass,
    reward: &NamedReward,
    tau_off: f64,
) -> Result<OfflineOutcome> {
    constraints.validate()?;
    let off = reward_append(mdp, class, &reward.table, &reward.name);
    let witnesses: Vec<Vec<Vec<usize>>> = match constraints.variant {
        Variant::Q => Vec::new(),
        Variant::V => (0..mdp.horizon()).map(|h| constraints.witness_maps(h)).collect(),
    };
    let ids = off.all_ids(VERSION_SPACE_CAP)?;
    let keep: Vec<bool> = ids
        .par_iter()
        .map(|ids| {
            let g = off.member(ids);
            for record in &constraints.records {
                match constraints.variant {
                    Variant::Q => {
                        if constraint_error(mdp, record, &g, Some(&reward.table), None)?.abs() > tau_off {
                            return Ok(false);
                        }
                    }
                    Variant::V => {
                        for w in &witnesses[record.h] {
                            if constraint_error(mdp, record, &g, Some(&reward.table), Some(w))?.abs() > tau_off {
                                return Ok(false);
                            }
                        }
                    }
                }
            }
            Ok(true)
        })
        .collect::<Result<_>>()?;
    let survivors: Vec<Vec<usize>> = ids.into_iter().zip(keep).filter(|(_, k)| *k).map(|(ids, _)| ids).collect();
    if survivors.is_empty() {
        return Err(Error::AssumptionViolation(format!("no member of F + {} survives the offline phase", reward.name)));
    }
    let (best, value) = survivors
        .iter()
        .enumerate()
        .map(|(i, ids)| (i, off.member(ids).initial_value(mdp)))
        .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    let selected = survivors[best].clone();
    let policy = greedy_policy(mdp, &off.member(&selected), &TieRule::First);
    Ok(OfflineOutcome { policy, selected_name: off.member_name(&selected), selected, value, survivors })
}

/// Knobs for an end-to-end run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFreeParams {
    pub eps: f64,
    pub delta: f64,
    pub variant: Variant,
    pub mode: Mode,
    pub c: f64,
    /// Offline threshold; defaults to `eps_elim / 2`.
    pub tau_off: Option<f64>,
    /// Iteration cap; defaults to `d H + 1`.
    pub t_max: Option<usize>,
    pub tie_break: TieBreak,
}

impl Default for RewardFreeParams {
    fn default() -> Self {
        RewardFreeParams {
            eps: 0.1,
            delta: 0.1,
            variant: Variant::Q,
            mode: Mode::Exact,
            c: 1.0,
            tau_off: None,
            t_max: None,
            tie_break: TieBreak::default(),
        }
    }
}

impl RewardFreeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0 && self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput("eps and delta must lie in (0, 1)".into()));
        }
        if !(self.c > 0.0) {
            return Err(Error::InvalidInput("c must be positive".into()));
        }
        Ok(())
    }
}

/// Output for one reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardOutput {
    pub reward: String,
    pub policy: DeterministicPolicy,
    pub selected: String,
    #[serde(rename = "V_ghat_x0")]
    pub v_ghat_x0: f64,
    pub survivors: usize,
    pub suboptimality: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardFreeResult {
    pub config: OliveConfig,
    pub tau_off: f64,
    /// Roll-in dimension estimate used for the schedule.
    pub d: usize,
    pub constraints: ConstraintSet,
    pub trace: OliveTrace,
    pub outputs: Vec<RewardOutput>,
}

/// Schedule for `class` and `rewards`: `d` is the largest number of distinct
/// roll-in distributions the online class induces at one level, and the
/// covering numbers are taken at the online cover radius.
pub fn plan(mdp: &LayeredMdp, class: &FiniteClass, rewards: &RewardClass, params: &RewardFreeParams) -> Result<(OliveConfig, usize)> {
    params.validate()?;
    let horizon = mdp.horizon();
    let diff = difference_class(mdp, class, 0.0);
    let d = (0..horizon).map(|h| class_rollin_count(mdp, &diff, h, params.variant)).collect::<Result<Vec<_>>>()?;
    let d = d.into_iter().max().unwrap_or(1).max(1);
    let k = (0..horizon).map(|h| mdp.num_actions(h)).max().unwrap_or(1);
    let build = |log_nf: f64, log_nr: f64| match params.variant {
        Variant::Q => schedule_q(params.eps, params.delta, horizon, d, log_nf, log_nr, params.c),
        Variant::V => schedule_v(params.eps, params.delta, horizon, d, k, log_nf, log_nr, params.c),
    };
    let radius = build(0.0, 0.0).eps_elim * COVER_FRACTION;
    let log_nf = (cover_finite(mdp, class, radius)?.0.size() as f64).ln();
    let log_nr = (rewards.cover_size(radius) as f64).ln();
    let mut config = build(log_nf, log_nr);
    config.mode = params.mode;
    config.tie_break = params.tie_break.clone();
    if let Some(t) = params.t_max {
        config.t_max = t;
    }
    Ok((config, d))
}

/// One online phase followed by an offline phase for every reward, with
/// each output's suboptimality evaluated exactly.
pub fn run_reward_free<R: Rng + ?Sized>(
    mdp: &LayeredMdp,
    class: &FiniteClass,
    rewards: &RewardClass,
    params: &RewardFreeParams,
    rng: &mut R,
) -> Result<RewardFreeResult> {
    let (config, d) = plan(mdp, class, rewards, params)?;
    let online = online_phase(mdp, class, &config, rng)?;
    let tau_off = params.tau_off.unwrap_or(config.eps_elim / 2.0);
    let outputs = offline_all(mdp, &online.constraints, class, rewards, tau_off)?;
    Ok(RewardFreeResult { config, tau_off, d, constraints: online.constraints, trace: online.trace, outputs })
}

/// Offline phase for every reward, in parallel.
pub fn offline_all(
    mdp: &LayeredMdp,
    constraints: &ConstraintSet,
    class: &FiniteClass,
    rewards: &RewardClass,
    tau_off: f64,
) -> Result<Vec<RewardOutput>> {
    rewards
        .par_iter()
        .map(|r| {
            let out = offline_phase(mdp, constraints, class, r, tau_off)?;
            let optimum = optimal_q(mdp, &r.table).value;
            Ok(RewardOutput {
                reward: r.name.clone(),
                suboptimality: optimum - policy_value(mdp, &out.policy, &r.table),
                policy: out.policy,
                selected: out.selected_name,
                v_ghat_x0: out.value,
                survivors: out.survivors.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{jointolive_counterexample, rfolive_counterexample};
    use crate::mdp::sampler_calls;
    use crate::olive::Choice;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table3_online() -> (crate::fixtures::Fixture, OliveConfig, ConstraintSet) {
        let fx = rfolive_counterexample();
        let mut cfg = schedule_q(0.1, 0.1, 2, 2, 1.0, 1.0, 1.0);
        cfg.tie_break.deviation = Choice::Scripted(vec![0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let online = online_phase(&fx.mdp, &fx.class, &cfg, &mut rng).unwrap();
        (fx, cfg, online.constraints)
    }

    #[test]
    fn table3_two_constraints() {
        let (fx, _, cs) = table3_online();
        let got: Vec<(usize, usize)> = cs.records.iter().map(|r| (r.h, r.policy.action(0, 0))).collect();
        assert_eq!(got, vec![(0, 0), (1, 1)]);
        let xb = fx.mdp.state_index(1, "xB").unwrap();
        let crate::olive::Payload::Exact { distribution } = &cs.records[1].payload else { panic!() };
        assert_eq!(distribution.support(), vec![(xb, 0, 1.0)]);
    }

    #[test]
    fn table3_offline_regimes() {
        let (fx, cfg, cs) = table3_online();
        let r1 = &fx.rewards[0];
        let r2 = &fx.rewards[1];

        let out = offline_phase(&fx.mdp, &cs, &fx.class, r2, 0.02).unwrap();
        assert_eq!(out.selected_name, "(f_bad+R2, 0+R2)");
        assert!((out.value - 0.3).abs() < 1e-15);
        assert_eq!(out.policy.action(0, 0), 1);
        let gap = optimal_q(&fx.mdp, &r2.table).value - policy_value(&fx.mdp, &out.policy, &r2.table);
        assert!((gap - 0.1).abs() < 1e-12);

        let out = offline_phase(&fx.mdp, &cs, &fx.class, r2, cfg.eps_elim / 2.0).unwrap();
        assert_eq!(out.policy.action(0, 0), 0);

        let out = offline_phase(&fx.mdp, &cs, &fx.class, r1, 0.02).unwrap();
        assert_eq!(out.policy.action(0, 0), 0);
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn empty_constraints_keep_everything() {
        let fx = rfolive_counterexample();
        let cs = ConstraintSet::empty(Variant::Q, Mode::Exact);
        let out = offline_phase(&fx.mdp, &cs, &fx.class, &fx.rewards[1], 0.01).unwrap();
        assert_eq!(out.survivors.len(), 8);
        assert_eq!(out.selected_name, "(f_R1+R2, 0+R2)");
        assert_eq!(out.value, 1.0);
    }

    #[test]
    fn zero_class_has_no_constraints() {
        let fx = rfolive_counterexample();
        let zero = FiniteClass::zero(&fx.mdp);
        let cfg = schedule_q(0.1, 0.1, 2, 2, 1.0, 1.0, 1.0);
        let online = online_phase(&fx.mdp, &zero, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(online.constraints.records.is_empty());
    }

    #[test]
    fn table4_rfolive_is_optimal() {
        let fx = jointolive_counterexample();
        let params = RewardFreeParams::default();
        let res = run_reward_free(&fx.mdp, &fx.class, &fx.rewards, &params, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let hs: Vec<(usize, usize)> = res.constraints.records.iter().map(|r| (r.h, r.policy.action(0, 0))).collect();
        assert_eq!(hs, vec![(0, 0), (0, 1)]);
        assert!(res.outputs.iter().all(|o| o.suboptimality.abs() < 1e-12), "{:?}", res.outputs);
    }

    #[test]
    fn v_type_offline_uses_no_samples() {
        let fx = jointolive_counterexample();
        let params = RewardFreeParams { variant: Variant::V, ..Default::default() };
        let (config, _) = plan(&fx.mdp, &fx.class, &fx.rewards, &params).unwrap();
        let online = online_phase(&fx.mdp, &fx.class, &config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cs = &online.constraints;
        assert_eq!(cs.policies(&fx.mdp).unwrap().len() as u128, cs.cover.as_ref().unwrap().size());
        let before = sampler_calls();
        let outs = offline_all(&fx.mdp, cs, &fx.class, &fx.rewards, config.eps_elim / 2.0).unwrap();
        assert_eq!(sampler_calls(), before);
        assert!(outs.iter().all(|o| o.suboptimality.abs() < 1e-12), "{outs:?}");
    }

    #[test]
    fn constraint_sets_round_trip() {
        let (_, _, cs) = table3_online();
        let back = ConstraintSet::from_json(&cs.to_json()).unwrap();
        assert_eq!(back, cs);
        let mut bad = cs.clone();
        bad.variant = Variant::V;
        assert!(ConstraintSet::from_json(&bad.to_json()).is_err());
    }

    #[test]
    fn runs_are_deterministic() {
        let fx = rfolive_counterexample();
        let params = RewardFreeParams { mode: Mode::Sampled, t_max: Some(20), ..Default::default() };
        let (mut config, _) = plan(&fx.mdp, &fx.class, &fx.rewards, &params).unwrap();
        config.n_actv = 50;
        config.n_elim = 50;
        let a = online_phase(&fx.mdp, &fx.class, &config, &mut ChaCha8Rng::seed_from_u64(9));
        let b = online_phase(&fx.mdp, &fx.class, &config, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
    }
}
