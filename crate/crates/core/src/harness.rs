//! Configuration, paired evaluation, baselines and run directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::dagger::{run_dagger, DaggerConfig, DaggerError, DaggerRun, Problem};
use crate::experts::{
    full_information_labels, myopic_action, query_expert, EpisodeContext, ExpertError, ExpertKind, ExpertSpec,
};
use crate::generate::{sample_episode, GenConfig, GenConfigError};
use crate::learner::{extract_features, policy_forward, select_action, ModelArtifact, PolicyParams, SelectMode};
use crate::learner::{LearnerError, TrainConfig};
use crate::milp::{build_ppa_model, solve_ppa, MilpModel, MipStatus, SolveLimits};
use crate::ppa::{transition, CostParams, EpisodeMetrics, EpisodeRealization, Patient, PpaError, SystemState};
use crate::rng::{Purpose, RngStream};

/// Lane of the policy streams used during evaluation, away from training.
const EVAL_LANE: u64 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("evaluation needs at least one episode")]
    NoEpisodes,
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Ppa(#[from] PpaError),
    #[error(transparent)]
    Dagger(#[from] DaggerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<GenConfigError> for HarnessError {
    fn from(e: GenConfigError) -> HarnessError {
        HarnessError::Config(e.0)
    }
}

/// A policy that can be simulated.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Preferred physician when possible, otherwise a random eligible one.
    Greedy,
    /// Uniform over feasible actions.
    Uniform,
    /// An expert executed at every epoch. The full-information expert labels
    /// the whole session in one solve.
    Expert(ExpertSpec),
    Learned(Arc<PolicyParams>),
}

impl Policy {
    pub fn id(&self) -> String {
        match self {
            Policy::Greedy => "greedy".into(),
            Policy::Uniform => "uniform".into(),
            Policy::Expert(spec) => match spec.kind {
                ExpertKind::TwoStage | ExpertKind::AggregatedDeterministic => {
                    format!("{}_{}", spec.kind.name(), spec.n_scenarios)
                }
                kind => kind.name().into(),
            },
            Policy::Learned(_) => "learned".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub metrics: EpisodeMetrics,
    pub decision_time: f64,
    pub decisions: usize,
    /// Expert calls that stopped on a limit.
    pub limited_calls: usize,
}

/// Runs `policy` through one session. `stream` keys every random draw of the
/// policy, epoch by epoch.
pub fn simulate_episode(
    policy: &Policy,
    realization: &EpisodeRealization,
    params: &CostParams,
    gen: &GenConfig,
    stream: RngStream,
) -> Result<EpisodeOutcome, HarnessError> {
    let mut out = EpisodeOutcome::default();
    let started = Instant::now();
    let plan = match policy {
        Policy::Expert(spec) if spec.kind == ExpertKind::FullInformation => {
            let labels = full_information_labels(realization, params, &spec.limits)?;
            out.limited_calls += usize::from(!labels.exact);
            Some(labels.actions)
        }
        _ => None,
    };
    let mut state = SystemState::initial(realization.patients[0].clone(), params);
    for k in 0..realization.len() {
        let key = stream.epoch(k as u64);
        let action = match (policy, &plan) {
            (_, Some(actions)) => actions[k],
            (Policy::Greedy, _) => myopic_action(&state, params, key).action(),
            (Policy::Uniform, _) => {
                let mut rng = key.rng();
                let probs = vec![1.0; params.physicians() + 1];
                select_action(&probs, &state.feasible_mask(params), SelectMode::Sample, &mut rng)
            }
            (Policy::Expert(spec), _) => {
                let ctx = EpisodeContext::sampling(&state, params, gen);
                let label = query_expert(spec, &state, &ctx, params, key)?;
                out.limited_calls += usize::from(label.stats.reached_limit);
                label.action()
            }
            (Policy::Learned(p), _) => {
                let probs = policy_forward(p, &extract_features(&state, params))?;
                let mut rng = key.rng();
                select_action(&probs, &state.feasible_mask(params), SelectMode::Greedy, &mut rng)
            }
        };
        state.check(action, params)?;
        out.metrics.record(&state.patient, action, params);
        out.decisions += 1;
        if let Some(next) = realization.patients.get(k + 1) {
            state = transition(&state, action, next.clone(), params)?;
        }
    }
    out.decision_time = started.elapsed().as_secs_f64();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_test_episodes: usize,
    pub test_seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> EvalConfig {
        EvalConfig {
            n_test_episodes: 100,
            test_seed_base: 20_251_018,
        }
    }
}

impl EvalConfig {
    /// Held-out session `e`; training draws from a different purpose.
    pub fn episode(&self, gen: &GenConfig, e: usize) -> EpisodeRealization {
        sample_episode(
            gen,
            RngStream::new(self.test_seed_base, Purpose::EvalEpisode).episode(e as u64),
        )
    }

    fn policy_stream(&self, e: usize) -> RngStream {
        RngStream::new(self.test_seed_base, Purpose::Expert)
            .episode(e as u64)
            .derive(EVAL_LANE)
    }
}

/// Mean outcome of one policy over the evaluation block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy_id: String,
    pub episodes: usize,
    pub avg_cost: f64,
    pub p1_rejected: f64,
    pub p2_rejected: f64,
    pub undesirable: f64,
    pub avg_decision_time: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub row: MetricsRow,
    pub outcomes: Vec<EpisodeOutcome>,
}

impl Evaluation {
    pub fn costs(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.metrics.cost).collect()
    }

    pub fn limited_calls(&self) -> usize {
        self.outcomes.iter().map(|o| o.limited_calls).sum()
    }
}

/// Simulates `policy` on every held-out session. Episodes run in parallel
/// on the current rayon pool and are reduced in index order.
pub fn evaluate_policy(
    policy: &Policy,
    eval: &EvalConfig,
    gen: &GenConfig,
    params: &CostParams,
) -> Result<Evaluation, HarnessError> {
    if eval.n_test_episodes == 0 {
        return Err(HarnessError::NoEpisodes);
    }
    if let Policy::Learned(p) = policy {
        if p.physicians() != params.physicians() {
            return Err(HarnessError::Config(format!(
                "policy has {} physicians, the problem {}",
                p.physicians(),
                params.physicians()
            )));
        }
    }
    let outcomes: Vec<EpisodeOutcome> = (0..eval.n_test_episodes)
        .into_par_iter()
        .map(|e| simulate_episode(policy, &eval.episode(gen, e), params, gen, eval.policy_stream(e)))
        .collect::<Result<_, _>>()?;
    let n = outcomes.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    let decisions: usize = outcomes.iter().map(|o| o.decisions).sum();
    let row = MetricsRow {
        policy_id: policy.id(),
        episodes: outcomes.len(),
        avg_cost: mean(&|o| o.metrics.cost),
        p1_rejected: mean(&|o| o.metrics.p1_rejected as f64),
        p2_rejected: mean(&|o| o.metrics.p2_rejected as f64),
        undesirable: mean(&|o| o.metrics.undesirable as f64),
        avg_decision_time: outcomes.iter().map(|o| o.decision_time).sum::<f64>() / decisions.max(1) as f64,
    };
    Ok(Evaluation { row, outcomes })
}

/// Metrics CSV. Timing is left out so that reruns compare byte for byte.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "policy_id",
        "episodes",
        "avg_cost",
        "p1_rejected",
        "p2_rejected",
        "undesirable",
    ])?;
    for r in rows {
        w.write_record([
            r.policy_id.clone(),
            r.episodes.to_string(),
            format!("{:.2}", r.avg_cost),
            format!("{:.4}", r.p1_rejected),
            format!("{:.4}", r.p2_rejected),
            format!("{:.4}", r.undesirable),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Seconds per decision, kept apart from the metrics CSV.
pub fn write_timing_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy_id", "avg_decision_time"])?;
    for r in rows {
        w.write_record([r.policy_id.clone(), format!("{:.6}", r.avg_decision_time)])?;
    }
    w.flush()?;
    Ok(())
}

/// Paired one-sided sign test of "a costs more than b".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub a_worse: u64,
    pub b_worse: u64,
    pub ties: u64,
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut a_worse, mut b_worse, mut ties) = (0u64, 0u64, 0u64);
    for (x, y) in a.iter().zip(b) {
        if x > y {
            a_worse += 1;
        } else if x < y {
            b_worse += 1;
        } else {
            ties += 1;
        }
    }
    let n = a_worse + b_worse;
    let p_value = if n == 0 || a_worse == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, n).expect("valid binomial");
        // P(X >= a_worse)
        bin.sf(a_worse - 1)
    };
    SignTest {
        a_worse,
        b_worse,
        ties,
        p_value,
    }
}

/// Every knob of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub gen: GenConfig,
    pub costs: CostParams,
    pub expert: ExpertSpec,
    pub dagger: DaggerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Limits for the hindsight baseline; empty means solve to optimality.
    #[serde(default)]
    pub hindsight_limits: SolveLimits,
}

impl RunConfig {
    /// Four physicians, about 30 calls per session, two-stage expert with 10
    /// scenarios and a node budget per sub-solve.
    pub fn desk() -> RunConfig {
        RunConfig {
            master_seed: 1,
            gen: GenConfig::desk(),
            costs: CostParams::desk(),
            expert: ExpertSpec::new(ExpertKind::TwoStage)
                .with_scenarios(10)
                .with_limits(SolveLimits::default().with_node_limit(DESK_NODE_LIMIT)),
            dagger: DaggerConfig::isolated(200),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            hindsight_limits: SolveLimits::default(),
        }
    }

    /// About 100 calls per session and 30 scenarios per expert call.
    pub fn full_scale() -> RunConfig {
        let mut c = RunConfig::desk();
        c.gen = GenConfig::full_scale();
        c.costs = CostParams::full_scale();
        c.expert = ExpertSpec::new(ExpertKind::TwoStage)
            .with_scenarios(30)
            .with_limits(SolveLimits::default().with_time_limit(30.0));
        c.eval.n_test_episodes = 1000;
        c
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.gen.validate()?;
        self.costs.validate()?;
        if self.gen.physicians() != self.costs.physicians() {
            return Err(HarnessError::Config(format!(
                "gen has {} physicians, costs {}",
                self.gen.physicians(),
                self.costs.physicians()
            )));
        }
        self.expert.validate()?;
        self.dagger.validate()?;
        self.train.validate()?;
        if self.eval.n_test_episodes == 0 {
            return Err(HarnessError::NoEpisodes);
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, HarnessError> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        RunConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn problem(&self) -> Problem<'_> {
        Problem {
            gen: &self.gen,
            params: &self.costs,
            expert: &self.expert,
            train: &self.train,
            master_seed: self.master_seed,
            eval: Some(&self.eval),
        }
    }

    /// The two-stage baseline uses the configured expert's scenario count
    /// and limits.
    pub fn two_stage_baseline(&self) -> ExpertSpec {
        ExpertSpec {
            kind: ExpertKind::TwoStage,
            ..self.expert
        }
    }

    pub fn hindsight_baseline(&self) -> ExpertSpec {
        ExpertSpec::new(ExpertKind::FullInformation).with_limits(self.hindsight_limits)
    }
}

/// Node budget per expert sub-solve in the desk profile.
pub const DESK_NODE_LIMIT: u64 = 2000;

/// Greedy, two-stage and hindsight policies on the common seed block.
pub fn run_baselines(config: &RunConfig) -> Result<Vec<Evaluation>, HarnessError> {
    config.validate()?;
    [
        Policy::Greedy,
        Policy::Expert(config.two_stage_baseline()),
        Policy::Expert(config.hindsight_baseline()),
    ]
    .iter()
    .map(|p| {
        let started = Instant::now();
        let ev = evaluate_policy(p, &config.eval, &config.gen, &config.costs)?;
        log::info!(
            "{}: {:.2} in {:.1}s",
            ev.row.policy_id,
            ev.row.avg_cost,
            started.elapsed().as_secs_f64()
        );
        Ok(ev)
    })
    .collect()
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Worker count from `PPA_WORKERS`, else the available parallelism.
pub fn workers_from_env() -> usize {
    std::env::var("PPA_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORDS_FILE: &str = "records.csv";
pub const DATASET_FILE: &str = "dataset.jsonl";

pub fn model_file(iteration: usize) -> String {
    format!("model_{iteration:04}.json")
}

pub fn write_records_csv<W: Write>(run: &DaggerRun, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "iteration",
        "dataset_size",
        "train_loss",
        "eval_cost",
        "expert_time",
        "beta",
    ])?;
    for r in &run.records {
        w.write_record([
            r.iteration.to_string(),
            r.dataset_size.to_string(),
            format!("{:.6}", r.train_loss),
            format!("{:.2}", r.eval_cost),
            format!("{:.3}", r.expert_time),
            format!("{}", r.beta),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains per `config` and writes the run directory: config snapshot,
/// dataset, one model per iteration, records and `best.json`.
pub fn train_to_dir(config: &RunConfig, dir: &Path) -> Result<DaggerRun, HarnessError> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.to_toml())?;
    let run = run_dagger(&config.dagger, &config.problem())?;
    run.dataset
        .write_jsonl(std::io::BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?))?;
    let samples = run.dataset.samples();
    for (i, policy) in run.policies.iter().enumerate() {
        // Each artifact fingerprints the data it was trained on.
        let size = run.records[i].dataset_size;
        let art = ModelArtifact::new(policy.clone(), config.train.clone(), &samples[..size]);
        art.save(&dir.join(model_file(i + 1)))?;
        if run.best().map(|(b, _)| b) == Some(i) {
            art.save(&dir.join("best.json"))?;
        }
    }
    write_records_csv(&run, fs::File::create(dir.join(RECORDS_FILE))?)?;
    Ok(run)
}

/// Scores a saved model on the config's evaluation block.
pub fn evaluate_artifact(config: &RunConfig, model: &Path) -> Result<Evaluation, HarnessError> {
    config.validate()?;
    let art = ModelArtifact::load(model)?;
    evaluate_policy(
        &Policy::Learned(Arc::new(art.params)),
        &config.eval,
        &config.gen,
        &config.costs,
    )
}

/// One line per run directory: best iteration, its held-out cost and the
/// change against the first iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_eval_cost: f64,
    pub first_eval_cost: f64,
    pub improvement_pct: f64,
}

#[derive(Debug, Deserialize)]
struct RecordLine {
    iteration: usize,
    eval_cost: f64,
}

/// Summarises run directories that share one evaluation setup.
pub fn report(dirs: &[PathBuf]) -> Result<Vec<ReportRow>, HarnessError> {
    let mut reference: Option<(EvalConfig, GenConfig, CostParams)> = None;
    let mut rows = Vec::new();
    for dir in dirs {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let key = (config.eval.clone(), config.gen.clone(), config.costs.clone());
        match &reference {
            None => reference = Some(key),
            Some(r) if *r != key => {
                return Err(HarnessError::Config(format!(
                    "{} uses a different evaluation setup than the first run",
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        let mut reader = csv::Reader::from_path(dir.join(RECORDS_FILE))?;
        let lines: Vec<RecordLine> = reader.deserialize().collect::<Result<_, _>>()?;
        let Some(first) = lines.first() else {
            return Err(HarnessError::Config(format!("{} has no records", dir.display())));
        };
        let best = lines
            .iter()
            .fold(first, |b, l| if l.eval_cost < b.eval_cost { l } else { b });
        rows.push(ReportRow {
            run: dir.display().to_string(),
            iterations: lines.len(),
            best_iteration: best.iteration,
            best_eval_cost: best.eval_cost,
            first_eval_cost: first.eval_cost,
            improvement_pct: 100.0 * (first.eval_cost - best.eval_cost) / first.eval_cost,
        });
    }
    Ok(rows)
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run",
        "iterations",
        "best_iteration",
        "best_eval_cost",
        "first_eval_cost",
        "improvement_pct",
    ])?;
    for r in rows {
        w.write_record([
            r.run.clone(),
            r.iterations.to_string(),
            r.best_iteration.to_string(),
            format!("{:.2}", r.best_eval_cost),
            format!("{:.2}", r.first_eval_cost),
            format!("{:.2}", r.improvement_pct),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A deterministic assignment instance, as read by the `solve` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub params: CostParams,
    pub patients: Vec<Patient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSolution {
    pub status: MipStatus,
    pub objective: f64,
    pub best_bound: f64,
    pub gap: f64,
    pub nodes: u64,
    pub actions: Vec<usize>,
}

impl Instance {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.params.validate()?;
        for p in &self.patients {
            p.validate(self.params.physicians())?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<MilpModel, HarnessError> {
        self.validate()?;
        Ok(
            build_ppa_model(&self.patients, &self.params.fresh_residual(), &self.params)
                .map_err(ExpertError::from)?
                .model,
        )
    }

    pub fn solve(&self, limits: &SolveLimits) -> Result<InstanceSolution, HarnessError> {
        self.validate()?;
        let (objective, actions, sol) = solve_ppa(&self.patients, &self.params.fresh_residual(), &self.params, limits)
            .map_err(ExpertError::from)?;
        Ok(InstanceSolution {
            status: sol.status,
            objective,
            best_bound: sol.best_bound,
            gap: sol.gap,
            nodes: sol.stats.nodes,
            actions: actions.iter().map(|a| a.0).collect(),
        })
    }
}

/// Seeds of the evaluation sessions, logged to audit pairing across policies.
pub fn eval_seed_audit(eval: &EvalConfig, gen: &GenConfig) -> Vec<u64> {
    (0..eval.n_test_episodes).map(|e| eval.episode(gen, e).seed).collect()
}
