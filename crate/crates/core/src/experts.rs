//! Optimization-based experts that label states with target actions.
//!
//! | expert                   | view of the future                         | label |
//! |--------------------------|--------------------------------------------|-------|
//! | myopic                   | none                                       | hard  |
//! | deterministic            | one sampled continuation                   | hard  |
//! | full information         | the realised continuation                  | hard  |
//! | two-stage stochastic     | `n` sampled continuations, shared decision | hard  |
//! | aggregated deterministic | `n` continuations solved separately        | soft  |

use std::time::Instant;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{sample_future_scenarios, GenConfig, ScenarioSet};
use crate::milp::{solve_ppa, solve_sppa_by_enumeration, MilpError, SolveLimits};
use crate::ppa::{Action, CostParams, EpisodeRealization, Patient, Residual, SystemState};
use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error(transparent)]
    Solver(#[from] MilpError),
    #[error("the full-information expert needs the realised future")]
    MissingFuture,
    #[error("the {0} expert must not see the realised future")]
    UnexpectedFuture(&'static str),
    #[error("cannot aggregate an empty set of actions")]
    NoActions,
    #[error("scenario count must be at least 1")]
    NoScenarios,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Myopic,
    Deterministic,
    FullInformation,
    TwoStage,
    AggregatedDeterministic,
}

impl ExpertKind {
    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Myopic => "myopic",
            ExpertKind::Deterministic => "deterministic",
            ExpertKind::FullInformation => "full_information",
            ExpertKind::TwoStage => "two_stage",
            ExpertKind::AggregatedDeterministic => "aggregated_deterministic",
        }
    }
}

fn default_scenarios() -> usize {
    10
}

/// Expert choice plus its stopping criteria.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub kind: ExpertKind,
    #[serde(default = "default_scenarios")]
    pub n_scenarios: usize,
    /// When set, the scenario count moves linearly from `n_scenarios` at the
    /// first epoch to this value at the expected session length.
    #[serde(default)]
    pub n_scenarios_final: Option<usize>,
    #[serde(default)]
    pub limits: SolveLimits,
}

impl ExpertSpec {
    pub fn new(kind: ExpertKind) -> ExpertSpec {
        ExpertSpec {
            kind,
            n_scenarios: default_scenarios(),
            n_scenarios_final: None,
            limits: SolveLimits::default(),
        }
    }

    pub fn with_scenarios(mut self, n: usize) -> ExpertSpec {
        self.n_scenarios = n;
        self
    }

    pub fn with_limits(mut self, limits: SolveLimits) -> ExpertSpec {
        self.limits = limits;
        self
    }

    pub fn scenarios_at(&self, epoch: usize, gen: &GenConfig) -> usize {
        match self.n_scenarios_final {
            None => self.n_scenarios,
            Some(last) => {
                let progress = (epoch as f64 / gen.mu_k.max(1.0)).min(1.0);
                let n = self.n_scenarios as f64 + (last as f64 - self.n_scenarios as f64) * progress;
                (n.round() as usize).max(1)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ExpertError> {
        let needs_scenarios = matches!(self.kind, ExpertKind::TwoStage | ExpertKind::AggregatedDeterministic);
        if needs_scenarios && (self.n_scenarios == 0 || self.n_scenarios_final == Some(0)) {
            return Err(ExpertError::NoScenarios);
        }
        Ok(())
    }
}

/// What an expert knows about the session beyond the current state.
#[derive(Debug, Clone)]
pub struct EpisodeContext<'a> {
    pub epoch: usize,
    pub current_score: f64,
    pub residual: Vec<Residual>,
    realized_future: Option<&'a [Patient]>,
    pub gen: &'a GenConfig,
}

impl<'a> EpisodeContext<'a> {
    /// Context for experts that sample the future themselves.
    pub fn sampling(state: &SystemState, params: &CostParams, gen: &'a GenConfig) -> EpisodeContext<'a> {
        EpisodeContext {
            epoch: state.epoch,
            current_score: state.patient.arrival_score,
            residual: state.residual(params),
            realized_future: None,
            gen,
        }
    }

    /// Context for the full-information expert: `future` holds the callers
    /// after the current one.
    pub fn hindsight(
        state: &SystemState,
        params: &CostParams,
        gen: &'a GenConfig,
        future: &'a [Patient],
    ) -> EpisodeContext<'a> {
        EpisodeContext {
            realized_future: Some(future),
            ..EpisodeContext::sampling(state, params, gen)
        }
    }

    pub fn realized_future(&self) -> Option<&'a [Patient]> {
        self.realized_future
    }

    fn forbid_future(&self, who: &'static str) -> Result<(), ExpertError> {
        match self.realized_future {
            Some(_) => Err(ExpertError::UnexpectedFuture(who)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpertCallStats {
    pub wall_time: f64,
    pub gap: f64,
    pub n_sub_solves: usize,
    pub reached_limit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelKind {
    Hard(Action),
    /// Action frequencies indexed `0..=P`.
    Soft(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertLabel {
    pub kind: LabelKind,
    pub stats: ExpertCallStats,
}

impl ExpertLabel {
    fn hard(action: Action, stats: ExpertCallStats) -> ExpertLabel {
        ExpertLabel {
            kind: LabelKind::Hard(action),
            stats,
        }
    }

    /// Training target over `0..=P`: one-hot for hard labels.
    pub fn target(&self, physicians: usize) -> Vec<f64> {
        match &self.kind {
            LabelKind::Hard(a) => {
                let mut t = vec![0.0; physicians + 1];
                t[a.0] = 1.0;
                t
            }
            LabelKind::Soft(f) => f.clone(),
        }
    }

    /// Hard action, or the most frequent action (lowest index on ties).
    pub fn action(&self) -> Action {
        match &self.kind {
            LabelKind::Hard(a) => *a,
            LabelKind::Soft(f) => Action(argmax(f)),
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Share of each action `0..=physicians` in `actions`.
pub fn aggregate_frequency(actions: &[Action], physicians: usize) -> Result<Vec<f64>, ExpertError> {
    if actions.is_empty() {
        return Err(ExpertError::NoActions);
    }
    let mut freq = vec![0.0; physicians + 1];
    for a in actions {
        freq[a.0] += 1.0;
    }
    let n = actions.len() as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    Ok(freq)
}

/// Preferred physician when possible, otherwise a uniformly random feasible
/// eligible physician, otherwise rejection.
pub fn myopic_action(state: &SystemState, params: &CostParams, stream: RngStream) -> ExpertLabel {
    let started = Instant::now();
    let preferred = Action::assign(state.patient.preferred);
    let action = if state.is_feasible(preferred, params) {
        preferred
    } else {
        let options: Vec<Action> = state
            .patient
            .eligible
            .iter()
            .map(|&p| Action::assign(p))
            .filter(|&a| state.is_feasible(a, params))
            .collect();
        options.choose(&mut stream.rng()).copied().unwrap_or(Action::REJECT)
    };
    ExpertLabel::hard(
        action,
        ExpertCallStats {
            wall_time: started.elapsed().as_secs_f64(),
            ..ExpertCallStats::default()
        },
    )
}

fn solve_current(
    current: &Patient,
    future: &[Patient],
    residual: &[Residual],
    params: &CostParams,
    limits: &SolveLimits,
) -> Result<(Action, ExpertCallStats), ExpertError> {
    let started = Instant::now();
    let mut patients = Vec::with_capacity(future.len() + 1);
    patients.push(current.clone());
    patients.extend_from_slice(future);
    let (_, actions, sol) = solve_ppa(&patients, residual, params, limits)?;
    Ok((
        actions[0],
        ExpertCallStats {
            wall_time: started.elapsed().as_secs_f64(),
            gap: sol.gap,
            n_sub_solves: 1,
            reached_limit: !sol.is_optimal(),
        },
    ))
}

fn scenarios_for(ctx: &EpisodeContext<'_>, n: usize, stream: RngStream) -> ScenarioSet {
    sample_future_scenarios(ctx.gen, ctx.epoch, ctx.current_score, n, stream)
}

/// Solves the deterministic model on one sampled continuation.
pub fn deterministic_action(
    state: &SystemState,
    ctx: &EpisodeContext<'_>,
    params: &CostParams,
    limits: &SolveLimits,
    stream: RngStream,
) -> Result<ExpertLabel, ExpertError> {
    ctx.forbid_future("deterministic")?;
    let set = scenarios_for(ctx, 1, stream);
    let (action, stats) = solve_current(&state.patient, &set.scenarios[0], &ctx.residual, params, limits)?;
    Ok(ExpertLabel::hard(action, stats))
}

/// Hindsight labels for a whole session from a single solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HindsightLabels {
    pub actions: Vec<Action>,
    pub objective: f64,
    /// False when the solve stopped on a limit.
    pub exact: bool,
    pub stats: ExpertCallStats,
}

pub fn full_information_labels(
    realization: &EpisodeRealization,
    params: &CostParams,
    limits: &SolveLimits,
) -> Result<HindsightLabels, ExpertError> {
    let started = Instant::now();
    let (objective, actions, sol) = solve_ppa(&realization.patients, &params.fresh_residual(), params, limits)?;
    Ok(HindsightLabels {
        actions,
        objective,
        exact: sol.is_optimal(),
        stats: ExpertCallStats {
            wall_time: started.elapsed().as_secs_f64(),
            gap: sol.gap,
            n_sub_solves: 1,
            reached_limit: !sol.is_optimal(),
        },
    })
}

/// Re-solves the hindsight model from the current state.
pub fn full_information_action(
    state: &SystemState,
    ctx: &EpisodeContext<'_>,
    params: &CostParams,
    limits: &SolveLimits,
) -> Result<ExpertLabel, ExpertError> {
    let future = ctx.realized_future.ok_or(ExpertError::MissingFuture)?;
    let (action, stats) = solve_current(&state.patient, future, &ctx.residual, params, limits)?;
    Ok(ExpertLabel::hard(action, stats))
}

/// Here-and-now action of the two-stage model over `n_scenarios` sampled
/// continuations.
pub fn two_stage_action(
    state: &SystemState,
    ctx: &EpisodeContext<'_>,
    n_scenarios: usize,
    params: &CostParams,
    limits: &SolveLimits,
    stream: RngStream,
) -> Result<ExpertLabel, ExpertError> {
    ctx.forbid_future("two-stage")?;
    if n_scenarios == 0 {
        return Err(ExpertError::NoScenarios);
    }
    let started = Instant::now();
    let set = scenarios_for(ctx, n_scenarios, stream);
    let out = solve_sppa_by_enumeration(&state.patient, &set, &ctx.residual, params, limits)?;
    Ok(ExpertLabel::hard(
        out.action,
        ExpertCallStats {
            wall_time: started.elapsed().as_secs_f64(),
            gap: out.max_gap,
            n_sub_solves: out.sub_solves,
            reached_limit: !out.exact,
        },
    ))
}

/// Solves each sampled continuation separately and returns the frequency of
/// the current caller's optimal action across them. Continuation `j` is the
/// one `deterministic_action` would draw from `stream.derive(j)`'s parent, so
/// a single continuation reproduces the deterministic expert.
pub fn aggregated_deterministic(
    state: &SystemState,
    ctx: &EpisodeContext<'_>,
    n_scenarios: usize,
    params: &CostParams,
    limits: &SolveLimits,
    stream: RngStream,
) -> Result<ExpertLabel, ExpertError> {
    ctx.forbid_future("aggregated deterministic")?;
    if n_scenarios == 0 {
        return Err(ExpertError::NoScenarios);
    }
    let started = Instant::now();
    let set = scenarios_for(ctx, n_scenarios, stream);
    let share = limits.time_limit.map(|t| t / n_scenarios as f64);
    let sub_limits = SolveLimits {
        time_limit: share,
        ..*limits
    };
    let mut actions = Vec::with_capacity(n_scenarios);
    let mut stats = ExpertCallStats::default();
    for future in &set.scenarios {
        let (a, s) = solve_current(&state.patient, future, &ctx.residual, params, &sub_limits)?;
        actions.push(a);
        stats.gap = stats.gap.max(s.gap);
        stats.n_sub_solves += 1;
        stats.reached_limit |= s.reached_limit;
    }
    stats.wall_time = started.elapsed().as_secs_f64();
    Ok(ExpertLabel {
        kind: LabelKind::Soft(aggregate_frequency(&actions, params.physicians())?),
        stats,
    })
}

/// Queries the expert described by `spec` at `state`.
pub fn query_expert(
    spec: &ExpertSpec,
    state: &SystemState,
    ctx: &EpisodeContext<'_>,
    params: &CostParams,
    stream: RngStream,
) -> Result<ExpertLabel, ExpertError> {
    let n = spec.scenarios_at(state.epoch, ctx.gen);
    match spec.kind {
        ExpertKind::Myopic => Ok(myopic_action(state, params, stream)),
        ExpertKind::Deterministic => deterministic_action(state, ctx, params, &spec.limits, stream),
        ExpertKind::FullInformation => full_information_action(state, ctx, params, &spec.limits),
        ExpertKind::TwoStage => two_stage_action(state, ctx, n, params, &spec.limits, stream),
        ExpertKind::AggregatedDeterministic => aggregated_deterministic(state, ctx, n, params, &spec.limits, stream),
    }
}
