//! The OLIVE elimination loop.
//!
//! Each iteration picks the optimistic survivor `f^t`, checks its on-policy
//! Bellman errors, and either stops or collects one constraint at a level
//! where the error is large, eliminating every survivor that violates it.
//! In exact mode all estimates are replaced by exact expectations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{est_onpolicy_reward, est_q_reward, est_v_is_level, q_error, residual_level};
use crate::error::{Error, Result};
use crate::funclass::{greedy_level, greedy_policy, FiniteClass, QFunction, TieRule};
use crate::mdp::{
    occupancy, sample_switched, sample_trajectory, state_occupancy, ActionSelector, DeterministicPolicy, LayeredMdp,
    RewardTable, StateActionDistribution, TransitionTuple,
};

/// Two optimistic values within this distance are tied.
pub const OPTIMISM_TIE_TOL: f64 = 1e-12;

/// Largest product class the engine will enumerate.
pub const VERSION_SPACE_CAP: usize = 5_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Exact,
    Sampled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    Q,
    V,
}

/// Choice among tied candidates (optimism) or among qualifying levels
/// (deviation).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    #[default]
    Lowest,
    Highest,
    /// Per-iteration choice; falls back to `Lowest` when the script runs
    /// out or names an unavailable option. For optimism the entry is a rank
    /// among tied candidates, for deviation it is a level.
    Scripted(Vec<usize>),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieBreak {
    pub optimism: Choice,
    pub deviation: Choice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OliveConfig {
    pub eps_actv: f64,
    pub eps_elim: f64,
    pub n_actv: usize,
    pub n_elim: usize,
    pub t_max: usize,
    pub mode: Mode,
    pub variant: Variant,
    /// Action count entering the V-type sample size (informational; the
    /// estimators read the per-level count from the MDP).
    pub k: usize,
    pub tie_break: TieBreak,
    pub c: f64,
    pub iota: f64,
}

impl OliveConfig {
    /// An exact-mode config with the given thresholds.
    pub fn exact(eps_actv: f64, eps_elim: f64, t_max: usize, variant: Variant) -> Self {
        OliveConfig {
            eps_actv,
            eps_elim,
            n_actv: 1,
            n_elim: 1,
            t_max,
            mode: Mode::Exact,
            variant,
            k: 1,
            tie_break: TieBreak::default(),
            c: 1.0,
            iota: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_actv > 0.0 && self.eps_elim > 0.0) {
            return Err(Error::InvalidInput("thresholds must be positive".into()));
        }
        if self.mode == Mode::Sampled && (self.n_actv == 0 || self.n_elim == 0) {
            return Err(Error::InvalidInput("sample counts must be at least 1 in sampled mode".into()));
        }
        if self.t_max == 0 {
            return Err(Error::InvalidInput("iteration cap must be at least 1".into()));
        }
        Ok(())
    }
}

fn iota(c: f64, numerator: f64, delta: f64, eps: f64) -> f64 {
    c * (numerator / (delta * eps)).ln()
}

fn count(x: f64) -> usize {
    x.ceil().max(1.0) as usize
}

/// Q-type thresholds and sample sizes.
///
/// `eps_actv = eps / 2H^2`, `eps_elim = eps / (8 H^2 sqrt d)`,
/// `n_actv = H^6 iota / eps^2`,
/// `n_elim = (H^6 log N_F + H^4 log N_R) d iota / eps^2`,
/// `iota = c log(H d / (delta eps))`.
pub fn schedule_q(eps: f64, delta: f64, horizon: usize, d: usize, log_nf: f64, log_nr: f64, c: f64) -> OliveConfig {
    let h = horizon as f64;
    let df = d.max(1) as f64;
    let iota = iota(c, h * df, delta, eps);
    OliveConfig {
        eps_actv: eps / (2.0 * h * h),
        eps_elim: eps / (8.0 * h * h * df.sqrt()),
        n_actv: count(h.powi(6) * iota / (eps * eps)),
        n_elim: n_elim(horizon, d, 1, log_nf, log_nr, eps, iota),
        t_max: d.max(1) * horizon + 1,
        mode: Mode::Exact,
        variant: Variant::Q,
        k: 1,
        tie_break: TieBreak::default(),
        c,
        iota,
    }
}

/// V-type thresholds and sample sizes: `eps_actv = eps / 8H^2`,
/// `eps_elim = eps / (32 H^2 sqrt d)`, `n_elim` carries an extra factor `K`
/// and `iota = c log(H d K / (delta eps))`.
pub fn schedule_v(eps: f64, delta: f64, horizon: usize, d: usize, k: usize, log_nf: f64, log_nr: f64, c: f64) -> OliveConfig {
    let h = horizon as f64;
    let df = d.max(1) as f64;
    let iota = iota(c, h * df * k as f64, delta, eps);
    OliveConfig {
        eps_actv: eps / (8.0 * h * h),
        eps_elim: eps / (32.0 * h * h * df.sqrt()),
        n_actv: count(h.powi(6) * iota / (eps * eps)),
        n_elim: n_elim(horizon, d, k, log_nf, log_nr, eps, iota),
        t_max: d.max(1) * horizon + 1,
        mode: Mode::Exact,
        variant: Variant::V,
        k,
        tie_break: TieBreak::default(),
        c,
        iota,
    }
}

/// `(H^6 log N_F + H^4 log N_R) d K iota / eps^2`, at least 1.
pub fn n_elim(horizon: usize, d: usize, k: usize, log_nf: f64, log_nr: f64, eps: f64, iota: f64) -> usize {
    let h = horizon as f64;
    count((h.powi(6) * log_nf + h.powi(4) * log_nr) * d.max(1) as f64 * k as f64 * iota / (eps * eps))
}

/// How the level-`h` action of a constraint was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionTag {
    /// From the roll-in policy (Q-type).
    RollIn,
    /// Uniform over the level's actions (V-type).
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Payload {
    Exact { distribution: StateActionDistribution },
    Sampled { dataset: Vec<TransitionTuple> },
}

/// One elimination constraint `(h^t, pi^t, D^t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub t: usize,
    pub h: usize,
    pub policy: DeterministicPolicy,
    pub source: ActionTag,
    #[serde(flatten)]
    pub payload: Payload,
}

/// Error of `g` on one constraint under `reward`.
///
/// Roll-in constraints give the Q-type error on the recorded distribution or
/// dataset. Uniform-action constraints are importance weighted towards
/// `witness`, the level-`h` action map of the policy being tested (in exact
/// mode the weights `K 1[a = witness(x)]` turn the uniform distribution into
/// the witness's state-action distribution).
pub fn constraint_error(
    mdp: &LayeredMdp,
    record: &ConstraintRecord,
    g: &(impl QFunction + ?Sized),
    reward: Option<&RewardTable>,
    witness: Option<&[usize]>,
) -> Result<f64> {
    let h = record.h;
    match (&record.payload, record.source) {
        (Payload::Exact { distribution }, ActionTag::RollIn) => {
            let resid = residual_level(mdp, g, reward, h);
            Ok(distribution.expect(&resid))
        }
        (Payload::Exact { distribution }, ActionTag::Uniform) => {
            let witness = witness.ok_or_else(|| Error::InvalidInput("uniform-action constraint needs a witness".into()))?;
            let resid = residual_level(mdp, g, reward, h);
            let k = mdp.num_actions(h) as f64;
            let mut total = 0.0;
            for (x, row) in distribution.weights.iter().enumerate() {
                let a = witness[x];
                if row[a] != 0.0 {
                    total += k * row[a] * resid[x][a];
                }
            }
            Ok(total)
        }
        (Payload::Sampled { dataset }, ActionTag::RollIn) => est_q_reward(dataset, g, reward),
        (Payload::Sampled { dataset }, ActionTag::Uniform) => {
            let witness = witness.ok_or_else(|| Error::InvalidInput("uniform-action constraint needs a witness".into()))?;
            est_v_is_level(dataset, g, reward, witness, mdp.num_actions(h))
        }
    }
}

/// One row of the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub chosen: Vec<usize>,
    pub chosen_name: String,
    pub v_opt: f64,
    /// On-policy error estimates per level.
    pub errors: Vec<f64>,
    pub deviation: Option<usize>,
    pub survivors_before: usize,
    pub survivors_after: usize,
    pub terminated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OliveTrace {
    pub iterations: Vec<IterationRecord>,
}

impl OliveTrace {
    /// `t,V_opt,h_t,survivors_before,survivors_after,terminated`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,V_opt,h_t,survivors_before,survivors_after,terminated\n");
        for it in &self.iterations {
            let h = it.deviation.map(|h| h.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                it.t, it.v_opt, h, it.survivors_before, it.survivors_after, it.terminated
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OliveOutcome {
    /// Greedy policy of the final optimistic function.
    pub policy: DeterministicPolicy,
    /// Ids of the final optimistic function.
    pub selected: Vec<usize>,
    pub survivors: Vec<Vec<usize>>,
    pub constraints: Vec<ConstraintRecord>,
    pub trace: OliveTrace,
}

fn choose(options: &[usize], rule: &Choice, t: usize, scripted_is_rank: bool) -> usize {
    match rule {
        Choice::Lowest => options[0],
        Choice::Highest => *options.last().expect("non-empty options"),
        Choice::Scripted(script) => match script.get(t) {
            Some(&s) if scripted_is_rank && s < options.len() => options[s],
            Some(&s) if !scripted_is_rank && options.contains(&s) => s,
            _ => options[0],
        },
    }
}

/// Runs OLIVE on `class` under `reward` (`None` is the zero reward).
///
/// Fails with [`Error::AssumptionViolation`] if the version space empties
/// and with [`Error::CapExceeded`] if no termination happens within
/// `config.t_max` iterations.
pub fn run_olive<R: Rng + ?Sized>(
    mdp: &LayeredMdp,
    class: &FiniteClass,
    reward: Option<&RewardTable>,
    config: &OliveConfig,
    rng: &mut R,
) -> Result<OliveOutcome> {
    config.validate()?;
    let horizon = mdp.horizon();
    let mut survivors = class.all_ids(VERSION_SPACE_CAP)?;
    let mut constraints = Vec::new();
    let mut trace = OliveTrace::default();

    for t in 0..config.t_max {
        if survivors.is_empty() {
            return Err(Error::AssumptionViolation(format!("version space empty at iteration {t}")));
        }
        let survivors_before = survivors.len();

        // Optimism.
        let values: Vec<f64> = survivors.iter().map(|ids| class.member(ids).initial_value(mdp)).collect();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..survivors.len()).filter(|&i| values[i] >= best - OPTIMISM_TIE_TOL).collect();
        let pick = choose(&tied, &config.tie_break.optimism, t, true);
        let chosen = survivors[pick].clone();
        let f = class.member(&chosen);
        let policy = greedy_policy(mdp, &f, &TieRule::First);

        // Activation check.
        let errors: Vec<f64> = match config.mode {
            Mode::Exact => (0..horizon).map(|h| q_error(mdp, &f, reward, &policy, h)).collect(),
            Mode::Sampled => {
                let trajectories: Vec<_> =
                    (0..config.n_actv).map(|_| sample_trajectory(mdp, &policy, reward, rng)).collect();
                (0..horizon).map(|h| est_onpolicy_reward(&trajectories, &f, reward, h)).collect::<Result<_>>()?
            }
        };
        let mut record = IterationRecord {
            t,
            chosen_name: class.member_name(&chosen),
            chosen: chosen.clone(),
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
            return Ok(OliveOutcome { policy, selected: chosen, survivors, constraints, trace });
        }

        // Deviation level and data collection.
        let levels: Vec<usize> = (0..horizon).filter(|&h| errors[h] > config.eps_actv).collect();
        let h = choose(&levels, &config.tie_break.deviation, t, false);
        let source = match config.variant {
            Variant::Q => ActionTag::RollIn,
            Variant::V => ActionTag::Uniform,
        };
        let payload = match config.mode {
            Mode::Exact => Payload::Exact {
                distribution: match config.variant {
                    Variant::Q => occupancy(mdp, &policy, h),
                    Variant::V => state_occupancy(mdp, &policy, h).with_actions(mdp, ActionSelector::Uniform),
                },
            },
            Mode::Sampled => {
                let selector = match config.variant {
                    Variant::Q => ActionSelector::Policy(&policy),
                    Variant::V => ActionSelector::Uniform,
                };
                Payload::Sampled {
                    dataset: (0..config.n_elim).map(|_| sample_switched(mdp, &policy, h, selector, reward, rng)).collect(),
                }
            }
        };
        let constraint = ConstraintRecord { t, h, policy, source, payload };

        // Elimination.
        let keep: Vec<bool> = survivors
            .par_iter()
            .map(|ids| {
                let g = class.member(ids);
                let witness = match config.variant {
                    Variant::Q => None,
                    Variant::V => Some(greedy_level(g.level(h), &TieRule::First, h)),
                };
                constraint_error(mdp, &constraint, &g, reward, witness.as_deref()).map(|e| e.abs() <= config.eps_elim)
            })
            .collect::<Result<_>>()?;
        let mut flags = keep.into_iter();
        survivors.retain(|_| flags.next().expect("one flag per survivor"));

        record.deviation = Some(h);
        record.survivors_after = survivors.len();
        trace.iterations.push(record);
        constraints.push(constraint);
    }
    Err(Error::CapExceeded { cap: config.t_max, trace: Box::new(trace) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::rfolive_counterexample;
    use crate::funclass::difference_class;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table3_config() -> OliveConfig {
        let mut cfg = schedule_q(0.1, 0.1, 2, 2, 1.0, 1.0, 1.0);
        cfg.tie_break.deviation = Choice::Scripted(vec![0, 1]);
        cfg
    }

    #[test]
    fn zero_class_terminates_immediately() {
        let fx = rfolive_counterexample();
        let class = FiniteClass::zero(&fx.mdp);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_olive(&fx.mdp, &class, None, &table3_config(), &mut rng).unwrap();
        assert!(out.constraints.is_empty());
        assert_eq!(out.trace.iterations.len(), 1);
        assert!(out.trace.iterations[0].terminated);
    }

    #[test]
    fn table3_online_trace() {
        let fx = rfolive_counterexample();
        let mdp = &fx.mdp;
        let on = difference_class(mdp, &fx.class, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_olive(mdp, &on, None, &table3_config(), &mut rng).unwrap();
        let it = &out.trace.iterations;
        assert_eq!(it.len(), 3);

        assert_eq!(it[0].chosen_name, "(f_R1-0, 0)");
        assert_eq!(it[0].v_opt, 1.0);
        assert_eq!(it[0].errors, vec![1.0, 0.0]);
        assert_eq!(it[0].deviation, Some(0));
        let names: Vec<String> = out.constraints[0]
            .policy
            .levels()
            .iter()
            .map(|l| l.iter().map(|a| a.to_string()).collect())
            .collect();
        assert_eq!(names[0], "0");
        assert_eq!(it[0].survivors_after, 3);

        assert_eq!(it[1].chosen_name, "(f_bad-f_R2, f_bad-0)");
        assert!((it[1].v_opt - 0.2).abs() < 1e-15);
        assert!((it[1].errors[0] - 0.1).abs() < 1e-15 && (it[1].errors[1] - 0.1).abs() < 1e-15);
        assert_eq!(it[1].deviation, Some(1));
        assert_eq!(it[1].survivors_after, 1);

        assert!(it[2].terminated);
        assert_eq!(it[2].chosen_name, "(0, 0)");
        assert_eq!(out.survivors, vec![vec![0, 0]]);

        let c = &out.constraints;
        assert_eq!((c[0].h, c[0].policy.action(0, 0)), (0, 0));
        assert_eq!((c[1].h, c[1].policy.action(0, 0)), (1, 1));
        let Payload::Exact { distribution } = &c[1].payload else { panic!() };
        let xb = mdp.state_index(1, "xB").unwrap();
        assert_eq!(distribution.support(), vec![(xb, 0, 1.0)]);

        let csv = out.trace.to_csv();
        assert!(csv.starts_with("t,V_opt,h_t,survivors_before,survivors_after,terminated\n0,1,0,39,3,false\n"));
    }

    #[test]
    fn default_deviation_picks_lowest_level() {
        let fx = rfolive_counterexample();
        let on = difference_class(&fx.mdp, &fx.class, 0.0);
        let mut cfg = table3_config();
        cfg.tie_break.deviation = Choice::Lowest;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_olive(&fx.mdp, &on, None, &cfg, &mut rng).unwrap();
        assert_eq!(out.constraints[1].h, 0);
        assert_eq!(out.constraints[1].policy.action(0, 0), 1);
    }

    #[test]
    fn cap_and_violation_errors() {
        let fx = rfolive_counterexample();
        let on = difference_class(&fx.mdp, &fx.class, 0.0);
        let mut cfg = table3_config();
        cfg.t_max = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match run_olive(&fx.mdp, &on, None, &cfg, &mut rng) {
            Err(Error::CapExceeded { cap: 1, trace }) => assert_eq!(trace.iterations.len(), 1),
            other => panic!("unexpected {other:?}"),
        }
        // Under R1 the zero member has error -1 at xA, so a constraint there
        // removes it together with the only other member.
        let r1 = &fx.rewards[0].table;
        let class = FiniteClass::new(
            &fx.mdp,
            vec![
                vec![crate::funclass::LevelMember { name: "b".into(), values: vec![vec![3.5, 3.5]] }],
                vec![crate::funclass::LevelMember { name: "c".into(), values: vec![vec![3.0], vec![3.0]] }],
            ],
        )
        .unwrap();
        let mut cfg = table3_config();
        cfg.tie_break.optimism = Choice::Highest;
        cfg.tie_break.deviation = Choice::Scripted(vec![1]);
        let res = run_olive(&fx.mdp, &class, Some(r1), &cfg, &mut rng);
        assert!(matches!(res, Err(Error::AssumptionViolation(_))), "{res:?}");
    }

    #[test]
    fn sampled_mode_matches_exact_on_deterministic_mdp() {
        let fx = rfolive_counterexample();
        let on = difference_class(&fx.mdp, &fx.class, 0.0);
        let mut cfg = table3_config();
        cfg.mode = Mode::Sampled;
        cfg.n_actv = 5;
        cfg.n_elim = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_olive(&fx.mdp, &on, None, &cfg, &mut rng).unwrap();
        assert_eq!(out.constraints.len(), 2);
        assert_eq!(out.survivors, vec![vec![0, 0]]);
    }

    #[test]
    fn version_space_is_monotone_and_sound() {
        let fx = rfolive_counterexample();
        let on = difference_class(&fx.mdp, &fx.class, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = run_olive(&fx.mdp, &on, None, &table3_config(), &mut rng).unwrap();
        for w in out.trace.iterations.windows(2) {
            assert!(w[1].survivors_before <= w[0].survivors_before);
            assert_eq!(w[1].survivors_before, w[0].survivors_after);
        }
        // The zero function has exact error 0 everywhere and survives.
        assert!(out.survivors.contains(&vec![0, 0]));
        let last = out.trace.iterations.last().unwrap();
        let h = fx.mdp.horizon() as f64;
        assert!(last.v_opt <= last.errors.iter().sum::<f64>() + 1e-12);
        assert!(last.errors.iter().sum::<f64>() <= h * table3_config().eps_actv);
    }

    #[test]
    fn schedule_examples() {
        let q = schedule_q(0.1, 0.1, 2, 2, 1.0, 1.0, 1.0);
        assert!((q.eps_actv - 0.0125).abs() < 1e-15);
        assert!((q.eps_elim - 0.1 / (32.0 * 2f64.sqrt())).abs() < 1e-15);
        let q2 = schedule_q(0.1, 0.1, 2, 2, 1.0, 1.0, 7.0);
        assert_eq!((q.eps_actv, q.eps_elim), (q2.eps_actv, q2.eps_elim));
        assert!(q2.n_actv > q.n_actv && q2.n_elim > q.n_elim);

        let v = schedule_v(0.1, 0.1, 2, 1, 2, 1.0, 1.0, 1.0);
        assert!((v.eps_actv - 0.003125).abs() < 1e-15);
        let v4 = schedule_v(0.1, 0.1, 2, 4, 2, 1.0, 1.0, 1.0);
        assert!((v4.eps_elim - v.eps_elim / 2.0).abs() < 1e-15);
        let iota = 3.0;
        assert_eq!(n_elim(2, 1, 4, 1.0, 1.0, 0.1, iota), 2 * n_elim(2, 1, 2, 1.0, 1.0, 0.1, iota));
    }

    #[test]
    fn halving_epsilon_quadruples_n_actv_at_fixed_iota() {
        let h: f64 = 3.0;
        let n = |eps: f64| h.powi(6) * 2.0 / (eps * eps);
        assert!((n(0.05) / n(0.1) - 4.0).abs() < 1e-12);
        // With the logarithmic factor included the growth is at least 4x.
        let a = schedule_q(0.1, 0.1, 3, 2, 1.0, 1.0, 1.0).n_actv as f64;
        let b = schedule_q(0.05, 0.1, 3, 2, 1.0, 1.0, 1.0).n_actv as f64;
        assert!(b >= 4.0 * a - 4.0);
    }
}
