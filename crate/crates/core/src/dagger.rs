//! The DAgger loop: roll out a mixture of expert and learner, label every
//! visited state with the expert, aggregate, retrain, repeat.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experts::{
    query_expert, EpisodeContext, ExpertCallStats, ExpertError, ExpertKind, ExpertLabel, ExpertSpec, LabelKind,
};
use crate::generate::{sample_episode, GenConfig};
use crate::harness::{evaluate_policy, EvalConfig, HarnessError, Policy};
use crate::learner::{
    extract_features, policy_forward, select_action, train, LearnerError, ModelArtifact, PolicyParams, Sample,
    SelectMode, TrainConfig,
};
use crate::ppa::{feasible_actions, transition, Action, CostParams, EpisodeRealization, PpaError, SystemState};
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Error)]
pub enum DaggerError {
    #[error("invalid DAgger config: {0}")]
    Config(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Ppa(#[from] PpaError),
    #[error("evaluation failed: {0}")]
    Eval(Box<HarnessError>),
}

impl From<HarnessError> for DaggerError {
    fn from(e: HarnessError) -> DaggerError {
        DaggerError::Eval(Box::new(e))
    }
}

/// How many expert calls a state receives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum CallRule {
    Constant {
        calls: usize,
    },
    /// One call, skipped with the given probability.
    Skip {
        probability: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum DecisionRule {
    /// Always execute the expert.
    Total,
    /// Execute the expert with probability `lambda^(i-1) * beta0`.
    Vanilla { lambda: f64, beta0: f64 },
    /// Execute the learner when its top masked probability reaches `threshold`.
    Conditional { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialPolicy {
    /// Uniform over feasible actions.
    Uniform,
    FromArtifact {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the call targets; action frequencies for hard labels.
    Frequency,
}

fn default_call_rule() -> CallRule {
    CallRule::Constant { calls: 1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaggerConfig {
    /// Maximum number of iterations `I`.
    pub iterations: usize,
    /// Episodes per iteration `H`.
    pub episodes_per_iteration: usize,
    #[serde(default = "default_call_rule")]
    pub calls: CallRule,
    /// Experts cycled after the primary one, by epoch and call index.
    #[serde(default)]
    pub round_robin: Vec<ExpertSpec>,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    pub decision_rule: DecisionRule,
    #[serde(default = "default_initial")]
    pub initial_policy: InitialPolicy,
    /// Stop after this many iterations without a held-out improvement.
    #[serde(default)]
    pub plateau: Option<usize>,
}

fn default_aggregation() -> Aggregation {
    Aggregation::Frequency
}

fn default_initial() -> InitialPolicy {
    InitialPolicy::Uniform
}

impl DaggerConfig {
    /// One iteration over `episodes`, expert executed with probability 0.8.
    pub fn isolated(episodes: usize) -> DaggerConfig {
        DaggerConfig {
            iterations: 1,
            episodes_per_iteration: episodes,
            calls: default_call_rule(),
            round_robin: Vec::new(),
            aggregation: Aggregation::Frequency,
            decision_rule: DecisionRule::Vanilla {
                lambda: 1.0,
                beta0: 0.8,
            },
            initial_policy: InitialPolicy::Uniform,
            plateau: None,
        }
    }

    pub fn validate(&self) -> Result<(), DaggerError> {
        let bad = |m: &str| Err(DaggerError::Config(m.to_string()));
        if self.iterations == 0 || self.episodes_per_iteration == 0 {
            return bad("iterations and episodes_per_iteration must be at least 1");
        }
        match self.calls {
            CallRule::Constant { calls: 0 } => return bad("calls must be at least 1"),
            CallRule::Skip { probability } if !(0.0..1.0).contains(&probability) => {
                return bad("skip probability must lie in [0, 1)")
            }
            _ => {}
        }
        match self.decision_rule {
            DecisionRule::Vanilla { lambda, beta0 }
                if !(lambda > 0.0 && lambda <= 1.0 && (0.0..=1.0).contains(&beta0)) =>
            {
                bad("vanilla rule needs lambda in (0, 1] and beta0 in [0, 1]")
            }
            DecisionRule::Conditional { threshold } if !(threshold > 0.0 && threshold < 1.0) => {
                bad("conditional threshold must lie in (0, 1)")
            }
            _ => Ok(()),
        }?;
        if self.plateau == Some(0) {
            return bad("plateau window must be at least 1");
        }
        Ok(())
    }
}

/// `beta_i = lambda^(i-1) * beta0` for iterations counted from 1.
pub fn beta_schedule(i: usize, lambda: f64, beta0: f64) -> f64 {
    lambda.powi(i.saturating_sub(1) as i32) * beta0
}

/// The policy being trained, as seen by the decision rule.
#[derive(Debug, Clone, Copy)]
pub enum Learner<'a> {
    Uniform,
    Net(&'a PolicyParams),
}

impl Learner<'_> {
    /// Action and its masked probability mass share.
    pub fn act(&self, state: &SystemState, params: &CostParams, rng: &mut ChaCha8Rng) -> (Action, f64) {
        match self {
            Learner::Uniform => {
                let acts = feasible_actions(state, params);
                let a = *acts.choose(rng).expect("rejection is always feasible");
                (a, 1.0 / acts.len() as f64)
            }
            Learner::Net(p) => {
                let probs = policy_forward(p, &extract_features(state, params)).expect("feature length matches");
                let mask = state.feasible_mask(params);
                let a = select_action(&probs, &mask, SelectMode::Greedy, rng);
                let total: f64 = probs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p).sum();
                (a, probs[a.0] / total)
            }
        }
    }
}

/// Executed action and whether it came from the expert. Without a label the
/// learner acts.
pub fn decision_rule(
    rule: DecisionRule,
    state: &SystemState,
    label: Option<&ExpertLabel>,
    learner: Learner<'_>,
    beta: f64,
    params: &CostParams,
    rng: &mut ChaCha8Rng,
) -> (Action, bool) {
    let z: f64 = rng.random();
    let (own, confidence) = learner.act(state, params, rng);
    let Some(label) = label else {
        return (own, false);
    };
    let use_expert = match rule {
        DecisionRule::Total => true,
        DecisionRule::Vanilla { .. } => z < beta,
        DecisionRule::Conditional { threshold } => confidence < threshold,
    };
    if use_expert {
        (label.action(), true)
    } else {
        (own, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub iteration: usize,
    pub episode: usize,
    pub epoch: usize,
    pub experts: Vec<ExpertKind>,
    pub stats: ExpertCallStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    #[serde(flatten)]
    pub sample: Sample,
    pub meta: RowMeta,
}

/// Aggregated training data, ordered by iteration, episode and epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.rows.iter().map(|r| r.sample.clone()).collect()
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in &self.rows {
            serde_json::to_writer(&mut out, row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dataset_size: usize,
    pub train_loss: f64,
    /// Held-out mean cost of the policy trained in this iteration.
    pub eval_cost: f64,
    pub expert_time: f64,
    pub beta: f64,
    pub decisions: usize,
    pub expert_decisions: usize,
    pub expert_failures: usize,
}

#[derive(Debug, Clone)]
pub struct DaggerRun {
    /// Policy trained at the end of each iteration.
    pub policies: Vec<PolicyParams>,
    pub records: Vec<IterationRecord>,
    pub dataset: Dataset,
}

impl DaggerRun {
    /// Iteration with the lowest held-out cost, first on ties.
    pub fn best(&self) -> Option<(usize, &PolicyParams)> {
        let mut best: Option<usize> = None;
        for (i, r) in self.records.iter().enumerate() {
            if best.is_none_or(|b| r.eval_cost < self.records[b].eval_cost) {
                best = Some(i);
            }
        }
        best.map(|i| (i, &self.policies[i]))
    }
}

/// True once `done` iterations reach the cap, or when the plateau window has
/// passed without a held-out improvement.
pub fn stop_condition(done: usize, config: &DaggerConfig, records: &[IterationRecord]) -> bool {
    if done >= config.iterations {
        return true;
    }
    let Some(w) = config.plateau else {
        return false;
    };
    if records.len() <= w {
        return false;
    }
    let split = records.len() - w;
    let before = records[..split]
        .iter()
        .map(|r| r.eval_cost)
        .fold(f64::INFINITY, f64::min);
    let after = records[split..]
        .iter()
        .map(|r| r.eval_cost)
        .fold(f64::INFINITY, f64::min);
    !(after < before)
}

/// Everything `run_dagger` needs besides the DAgger knobs themselves.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub gen: &'a GenConfig,
    pub params: &'a CostParams,
    pub expert: &'a ExpertSpec,
    pub train: &'a TrainConfig,
    pub master_seed: u64,
    /// Held-out block scored after every iteration.
    pub eval: Option<&'a EvalConfig>,
}

pub fn training_episode(gen: &GenConfig, master_seed: u64, index: usize) -> EpisodeRealization {
    sample_episode(
        gen,
        RngStream::new(master_seed, Purpose::TrainEpisode).episode(index as u64),
    )
}

struct EpisodeRows {
    rows: Vec<DatasetRow>,
    decisions: usize,
    expert_decisions: usize,
    failures: usize,
    expert_time: f64,
}

fn expert_for<'a>(primary: &'a ExpertSpec, extra: &'a [ExpertSpec], epoch: usize, call: usize) -> &'a ExpertSpec {
    let n = 1 + extra.len();
    match (epoch + call) % n {
        0 => primary,
        i => &extra[i - 1],
    }
}

fn query(
    spec: &ExpertSpec,
    state: &SystemState,
    realization: &EpisodeRealization,
    problem: &Problem<'_>,
    stream: RngStream,
) -> Result<ExpertLabel, ExpertError> {
    let ctx = if spec.kind == ExpertKind::FullInformation {
        EpisodeContext::hindsight(
            state,
            problem.params,
            problem.gen,
            &realization.patients[state.epoch + 1..],
        )
    } else {
        EpisodeContext::sampling(state, problem.params, problem.gen)
    };
    query_expert(spec, state, &ctx, problem.params, stream)
}

fn run_episode(
    config: &DaggerConfig,
    problem: &Problem<'_>,
    learner: Learner<'_>,
    iteration: usize,
    h: usize,
    beta: f64,
) -> Result<EpisodeRows, DaggerError> {
    let index = (iteration - 1) * config.episodes_per_iteration + h;
    let realization = training_episode(problem.gen, problem.master_seed, index);
    let physicians = problem.params.physicians();
    let mut out = EpisodeRows {
        rows: Vec::with_capacity(realization.len()),
        decisions: 0,
        expert_decisions: 0,
        failures: 0,
        expert_time: 0.0,
    };
    let mut state = SystemState::initial(realization.patients[0].clone(), problem.params);
    for k in 0..realization.len() {
        let key = |p: Purpose| {
            RngStream::new(problem.master_seed, p)
                .episode(index as u64)
                .epoch(k as u64)
        };
        let n_calls = match config.calls {
            CallRule::Constant { calls } => calls,
            CallRule::Skip { probability } => {
                usize::from(key(Purpose::Expert).call(u64::MAX).rng().random::<f64>() >= probability)
            }
        };
        let mut targets = Vec::with_capacity(n_calls);
        let mut kinds = Vec::with_capacity(n_calls);
        let mut stats = ExpertCallStats::default();
        let started = Instant::now();
        for j in 0..n_calls {
            let spec = expert_for(problem.expert, &config.round_robin, k, j);
            match query(spec, &state, &realization, problem, key(Purpose::Expert).call(j as u64)) {
                Ok(label) => {
                    targets.push(label.target(physicians));
                    kinds.push(spec.kind);
                    stats.gap = stats.gap.max(label.stats.gap);
                    stats.n_sub_solves += label.stats.n_sub_solves;
                    stats.reached_limit |= label.stats.reached_limit;
                }
                Err(e) => {
                    log::warn!("expert failed at iteration {iteration} episode {h} epoch {k}: {e}");
                    out.failures += 1;
                }
            }
        }
        stats.wall_time = started.elapsed().as_secs_f64();
        out.expert_time += stats.wall_time;
        // Aggregation: the mean of the call targets.
        let label = (!targets.is_empty()).then(|| {
            let mut t = vec![0.0; physicians + 1];
            for target in &targets {
                for (a, v) in t.iter_mut().zip(target) {
                    *a += v;
                }
            }
            let n = targets.len() as f64;
            t.iter_mut().for_each(|v| *v /= n);
            ExpertLabel {
                kind: LabelKind::Soft(t),
                stats,
            }
        });
        let mut rng = key(Purpose::Decision).rng();
        let (action, by_expert) = decision_rule(
            config.decision_rule,
            &state,
            label.as_ref(),
            learner,
            beta,
            problem.params,
            &mut rng,
        );
        out.decisions += 1;
        out.expert_decisions += usize::from(by_expert);
        if let Some(label) = label {
            let LabelKind::Soft(target) = label.kind else {
                unreachable!()
            };
            out.rows.push(DatasetRow {
                sample: Sample {
                    features: extract_features(&state, problem.params),
                    target,
                },
                meta: RowMeta {
                    iteration,
                    episode: h,
                    epoch: k,
                    experts: kinds,
                    stats: label.stats,
                },
            });
        }
        if let Some(next) = realization.patients.get(k + 1) {
            state = transition(&state, action, next.clone(), problem.params)?;
        }
    }
    Ok(out)
}

/// Runs DAgger until `stop_condition` holds. Episodes of one iteration run
/// in parallel; their rows are merged in episode order, so the result does
/// not depend on the worker count.
pub fn run_dagger(config: &DaggerConfig, problem: &Problem<'_>) -> Result<DaggerRun, DaggerError> {
    config.validate()?;
    problem.expert.validate()?;
    for spec in &config.round_robin {
        spec.validate()?;
    }
    problem.train.validate()?;
    let physicians = problem.params.physicians();
    let initial = match &config.initial_policy {
        InitialPolicy::Uniform => None,
        InitialPolicy::FromArtifact { path } => {
            let art = ModelArtifact::load(path)?;
            if art.physicians != physicians {
                return Err(DaggerError::Config(format!(
                    "initial policy has {} physicians, the problem {physicians}",
                    art.physicians
                )));
            }
            Some(art.params)
        }
    };
    let mut run = DaggerRun {
        policies: Vec::new(),
        records: Vec::new(),
        dataset: Dataset::default(),
    };
    let mut i = 0;
    while !stop_condition(i, config, &run.records) {
        i += 1;
        let beta = match config.decision_rule {
            DecisionRule::Vanilla { lambda, beta0 } => beta_schedule(i, lambda, beta0),
            DecisionRule::Total => 1.0,
            DecisionRule::Conditional { .. } => f64::NAN,
        };
        let current = run.policies.last().or(initial.as_ref());
        let learner = current.map_or(Learner::Uniform, Learner::Net);
        let episodes: Vec<EpisodeRows> = (0..config.episodes_per_iteration)
            .into_par_iter()
            .map(|h| run_episode(config, problem, learner, i, h, beta))
            .collect::<Result<_, _>>()?;
        let mut record = IterationRecord {
            iteration: i,
            dataset_size: 0,
            train_loss: f64::NAN,
            eval_cost: f64::NAN,
            expert_time: 0.0,
            beta,
            decisions: 0,
            expert_decisions: 0,
            expert_failures: 0,
        };
        for ep in episodes {
            record.decisions += ep.decisions;
            record.expert_decisions += ep.expert_decisions;
            record.expert_failures += ep.failures;
            record.expert_time += ep.expert_time;
            run.dataset.rows.extend(ep.rows);
        }
        record.dataset_size = run.dataset.len();
        let train_cfg = TrainConfig {
            seed: problem.train.seed.wrapping_add(i as u64),
            ..problem.train.clone()
        };
        let start = if problem.train.warm_start { current } else { None };
        let samples = run.dataset.samples();
        let outcome = train(&samples, physicians, &train_cfg, start)?;
        record.train_loss = outcome.final_loss();
        if let Some(eval) = problem.eval {
            let policy = Policy::Learned(std::sync::Arc::new(outcome.params.clone()));
            record.eval_cost = evaluate_policy(&policy, eval, problem.gen, problem.params)?
                .row
                .avg_cost;
        }
        log::info!(
            "iteration {i}: {} rows, loss {:.4}, eval {:.2}, expert share {}/{}",
            record.dataset_size,
            record.train_loss,
            record.eval_cost,
            record.expert_decisions,
            record.decisions
        );
        run.policies.push(outcome.params);
        run.records.push(record);
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppa::{Patient, Priority};
    use rand::SeedableRng;

    fn record(cost: f64) -> IterationRecord {
        IterationRecord {
            iteration: 0,
            dataset_size: 0,
            train_loss: 0.0,
            eval_cost: cost,
            expert_time: 0.0,
            beta: 0.0,
            decisions: 0,
            expert_decisions: 0,
            expert_failures: 0,
        }
    }

    #[test]
    fn beta_values() {
        assert_eq!(beta_schedule(7, 1.0, 0.8), 0.8);
        assert!((beta_schedule(3, 0.5, 0.8) - 0.2).abs() < 1e-15);
        assert_eq!(beta_schedule(1, 0.5, 0.0), 0.0);
    }

    #[test]
    fn stopping() {
        let mut cfg = DaggerConfig::isolated(1);
        assert!(stop_condition(1, &cfg, &[]));
        cfg.iterations = 400;
        let flat: Vec<_> = (0..6).map(|_| record(10.0)).collect();
        assert!(!stop_condition(6, &cfg, &flat));
        cfg.plateau = Some(5);
        assert!(!stop_condition(5, &cfg, &flat[..5]));
        assert!(stop_condition(6, &cfg, &flat));
        let improving: Vec<_> = (0..6).map(|i| record(10.0 - i as f64)).collect();
        assert!(!stop_condition(6, &cfg, &improving));
    }

    #[test]
    fn vanilla_extremes() {
        let params = CostParams::desk();
        let state = SystemState::initial(
            Patient {
                id: 0,
                duration: 10.0,
                priority: Priority::High,
                preferred: 2,
                eligible: vec![1, 2],
                arrival_score: 0.3,
            },
            &params,
        );
        let label = ExpertLabel {
            kind: LabelKind::Hard(Action(1)),
            stats: ExpertCallStats::default(),
        };
        let rule = DecisionRule::Vanilla {
            lambda: 1.0,
            beta0: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(
                decision_rule(rule, &state, Some(&label), Learner::Uniform, 1.0, &params, &mut rng),
                (Action(1), true)
            );
            let (a, by_expert) = decision_rule(rule, &state, Some(&label), Learner::Uniform, 0.0, &params, &mut rng);
            assert!(!by_expert && state.is_feasible(a, &params));
        }
        let total = decision_rule(
            DecisionRule::Total,
            &state,
            Some(&label),
            Learner::Uniform,
            0.0,
            &params,
            &mut rng,
        );
        assert_eq!(total, (Action(1), true));
        // Three feasible actions: the uniform learner has confidence 1/3.
        let cond = DecisionRule::Conditional { threshold: 0.5 };
        assert!(decision_rule(cond, &state, Some(&label), Learner::Uniform, 0.0, &params, &mut rng).1);
        let cond = DecisionRule::Conditional { threshold: 0.3 };
        assert!(!decision_rule(cond, &state, Some(&label), Learner::Uniform, 0.0, &params, &mut rng).1);
    }

    #[test]
    fn config_guards() {
        let mut cfg = DaggerConfig::isolated(5);
        assert!(cfg.validate().is_ok());
        cfg.decision_rule = DecisionRule::Vanilla {
            lambda: 0.0,
            beta0: 0.8,
        };
        assert!(cfg.validate().is_err());
        cfg.decision_rule = DecisionRule::Conditional { threshold: 1.0 };
        assert!(cfg.validate().is_err());
        cfg.decision_rule = DecisionRule::Total;
        cfg.calls = CallRule::Constant { calls: 0 };
        assert!(cfg.validate().is_err());
    }
}
