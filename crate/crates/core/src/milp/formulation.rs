//! Deterministic and two-stage assignment models, the scenario-enumeration
//! solver for the two-stage model, and an exhaustive reference solver.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::bnb::{solve_mip, MipStatus, SolveLimits, SolveStats};
use super::model::{MilpModel, Relation};
use super::MilpError;
use crate::generate::ScenarioSet;
use crate::ppa::{patient_cost, Action, CostParams, Patient, Residual, CAPACITY_TOL};

/// Column indices of one patient's decision variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientVars {
    /// `(physician, column)` for each eligible physician, ascending.
    pub assign: Vec<(usize, usize)>,
    pub reject: usize,
}

impl PatientVars {
    pub fn action(&self, x: &[f64]) -> Action {
        self.assign
            .iter()
            .find(|&&(_, j)| x[j] > 0.5)
            .map(|&(p, _)| Action::assign(p))
            .unwrap_or(Action::REJECT)
    }

    fn all_reject(&self, x: &mut [f64]) {
        x[self.reject] = 1.0;
    }
}

#[derive(Debug, Clone)]
pub struct PpaModel {
    pub model: MilpModel,
    pub patients: Vec<PatientVars>,
}

impl PpaModel {
    pub fn actions(&self, x: &[f64]) -> Vec<Action> {
        self.patients.iter().map(|v| v.action(x)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SppaModel {
    pub model: MilpModel,
    /// Shared first-stage columns.
    pub first: PatientVars,
    pub scenarios: Vec<Vec<PatientVars>>,
}

impl SppaModel {
    pub fn first_action(&self, x: &[f64]) -> Action {
        self.first.action(x)
    }
}

fn add_patient(
    model: &mut MilpModel,
    patient: &Patient,
    params: &CostParams,
    weight: f64,
    tag: &str,
) -> Result<PatientVars, MilpError> {
    if patient.eligible.is_empty() {
        return Err(MilpError::EmptyEligible(patient.id));
    }
    let k = patient.id;
    let mut assign = Vec::with_capacity(patient.eligible.len());
    for &p in &patient.eligible {
        let cost = weight * patient_cost(patient, Action::assign(p), params);
        let j = model.add_binary(format!("a{tag}_{k}_{p}"), cost)?;
        assign.push((p, j));
    }
    let reject = model.add_binary(
        format!("u{tag}_{k}"),
        weight * patient_cost(patient, Action::REJECT, params),
    )?;
    let mut row: Vec<(usize, f64)> = assign.iter().map(|&(_, j)| (j, 1.0)).collect();
    row.push((reject, 1.0));
    model.add_constraint(format!("asg{tag}_{k}"), row, Relation::Eq, 1.0)?;
    Ok(PatientVars { assign, reject })
}

fn add_capacity_rows(
    model: &mut MilpModel,
    groups: &[(&Patient, &PatientVars)],
    residual: &[Residual],
    tag: &str,
) -> Result<(), MilpError> {
    for (p, res) in residual.iter().enumerate() {
        let mut slots = Vec::new();
        let mut minutes = Vec::new();
        for (patient, vars) in groups {
            if let Some(&(_, j)) = vars.assign.iter().find(|&&(q, _)| q == p) {
                slots.push((j, 1.0));
                minutes.push((j, patient.duration));
            }
        }
        if slots.is_empty() {
            continue;
        }
        model.add_constraint(format!("cap{tag}_{p}"), slots, Relation::Le, f64::from(res.slots_left))?;
        model.add_constraint(format!("wrk{tag}_{p}"), minutes, Relation::Le, res.workload_left)?;
    }
    Ok(())
}

fn check_residual(residual: &[Residual], params: &CostParams) -> Result<(), MilpError> {
    if residual.len() != params.physicians() {
        return Err(MilpError::ResidualLength {
            expected: params.physicians(),
            found: residual.len(),
        });
    }
    if residual.iter().any(|r| !(r.workload_left >= -CAPACITY_TOL)) {
        return Err(MilpError::NegativeResidual);
    }
    Ok(())
}

/// Deterministic assignment model over `patients` with remaining capacities
/// `residual`. Assigning a patient to their preferred physician is free.
pub fn build_ppa_model(
    patients: &[Patient],
    residual: &[Residual],
    params: &CostParams,
) -> Result<PpaModel, MilpError> {
    check_residual(residual, params)?;
    let mut model = MilpModel::new("ppa");
    let vars = patients
        .iter()
        .map(|p| add_patient(&mut model, p, params, 1.0, ""))
        .collect::<Result<Vec<_>, _>>()?;
    let groups: Vec<_> = patients.iter().zip(&vars).collect();
    add_capacity_rows(&mut model, &groups, residual, "")?;
    let mut start = vec![0.0; model.num_vars()];
    vars.iter().for_each(|v| v.all_reject(&mut start));
    model.set_start(start);
    Ok(PpaModel { model, patients: vars })
}

/// Extensive form of the two-stage model. The first patient's columns are
/// shared by every scenario, which enforces non-anticipativity without
/// explicit linking rows; scenario costs carry weight `1 / |scenarios|`.
pub fn build_sppa_model(
    first: &Patient,
    scenarios: &ScenarioSet,
    residual: &[Residual],
    params: &CostParams,
) -> Result<SppaModel, MilpError> {
    check_residual(residual, params)?;
    if scenarios.is_empty() {
        return Err(MilpError::EmptyScenarioSet);
    }
    let weight = 1.0 / scenarios.len() as f64;
    let mut model = MilpModel::new("sppa");
    let first_vars = add_patient(&mut model, first, params, 1.0, "")?;
    let mut scenario_vars = Vec::with_capacity(scenarios.len());
    for (w, future) in scenarios.scenarios.iter().enumerate() {
        let tag = format!("_s{w}");
        let vars = future
            .iter()
            .map(|p| add_patient(&mut model, p, params, weight, &tag))
            .collect::<Result<Vec<_>, _>>()?;
        let mut groups: Vec<(&Patient, &PatientVars)> = vec![(first, &first_vars)];
        groups.extend(future.iter().zip(&vars));
        add_capacity_rows(&mut model, &groups, residual, &tag)?;
        scenario_vars.push(vars);
    }
    let mut start = vec![0.0; model.num_vars()];
    first_vars.all_reject(&mut start);
    scenario_vars.iter().flatten().for_each(|v| v.all_reject(&mut start));
    model.set_start(start);
    Ok(SppaModel {
        model,
        first: first_vars,
        scenarios: scenario_vars,
    })
}

/// Result of solving the two-stage model by enumerating first-stage actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SppaOutcome {
    pub action: Action,
    pub value: f64,
    /// Value of every feasible first-stage candidate, in evaluation order.
    pub candidates: Vec<(Action, f64)>,
    /// True when every scenario sub-solve was proven optimal.
    pub exact: bool,
    /// Largest relative gap over the sub-solves.
    pub max_gap: f64,
    pub sub_solves: usize,
    pub stats: SolveStats,
}

/// Candidate first-stage actions: eligible physicians with capacity in
/// ascending order, then rejection.
pub fn first_stage_candidates(first: &Patient, residual: &[Residual]) -> Vec<Action> {
    first
        .eligible
        .iter()
        .filter(|&&p| residual[p].admits(first.duration))
        .map(|&p| Action::assign(p))
        .chain(std::iter::once(Action::REJECT))
        .collect()
}

/// Optimal value of the deterministic model for `patients`, solved exactly
/// unless `limits` intervene.
pub fn solve_ppa(
    patients: &[Patient],
    residual: &[Residual],
    params: &CostParams,
    limits: &SolveLimits,
) -> Result<(f64, Vec<Action>, super::MipSolution), MilpError> {
    let ppa = build_ppa_model(patients, residual, params)?;
    let sol = solve_mip(&ppa.model, limits)?;
    if sol.status == MipStatus::Infeasible {
        return Err(MilpError::NoIncumbent);
    }
    let actions = ppa.actions(&sol.values);
    Ok((sol.objective, actions, sol))
}

/// Solves the two-stage model exactly by fixing each first-stage action in
/// turn and solving every scenario's deterministic model separately.
///
/// Ties go to the lowest physician index; rejection is preferred last.
/// A time limit in `limits` covers the whole call and is shared evenly by the
/// remaining sub-solves.
pub fn solve_sppa_by_enumeration(
    first: &Patient,
    scenarios: &ScenarioSet,
    residual: &[Residual],
    params: &CostParams,
    limits: &SolveLimits,
) -> Result<SppaOutcome, MilpError> {
    check_residual(residual, params)?;
    if scenarios.is_empty() {
        return Err(MilpError::EmptyScenarioSet);
    }
    let started = Instant::now();
    let candidates = first_stage_candidates(first, residual);
    let n_scen = scenarios.len() as f64;
    let total_subs = candidates.len() * scenarios.len();

    let mut stats = SolveStats::default();
    let mut exact = true;
    let mut max_gap: f64 = 0.0;
    let mut done = 0usize;
    let mut values = Vec::with_capacity(candidates.len());

    for &action in &candidates {
        let mut res = residual.to_vec();
        if let Some(p) = action.physician() {
            res[p] = res[p].after(first.duration);
        }
        let mut sum = 0.0;
        for future in &scenarios.scenarios {
            let sub_limits = match limits.time_limit {
                Some(total) => {
                    let left = (total - started.elapsed().as_secs_f64()).max(0.0);
                    SolveLimits {
                        time_limit: Some(left / (total_subs - done) as f64),
                        ..*limits
                    }
                }
                None => *limits,
            };
            done += 1;
            if future.is_empty() {
                continue;
            }
            let (value, _, sol) = solve_ppa(future, &res, params, &sub_limits)?;
            stats.absorb(&sol.stats);
            exact &= sol.is_optimal();
            max_gap = max_gap.max(sol.gap);
            sum += value;
        }
        let value = patient_cost(first, action, params) + sum / n_scen;
        values.push((action, value));
    }

    let (action, value) = values
        .iter()
        .copied()
        .reduce(|best, cand| if cand.1 < best.1 - 1e-9 { cand } else { best })
        .expect("rejection is always a candidate");
    stats.wall_time = started.elapsed().as_secs_f64();
    Ok(SppaOutcome {
        action,
        value,
        candidates: values,
        exact,
        max_gap,
        sub_solves: total_subs,
        stats,
    })
}

/// Exhaustive optimum over every action vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForceSolution {
    pub objective: f64,
    pub actions: Vec<Action>,
    pub evaluated: u64,
}

pub const DEFAULT_SIZE_CAP: u64 = 1_000_000;

/// Enumerates all `(P + 1)^K` action vectors in lexicographic order, keeping
/// the first one that attains the minimum cost among the feasible vectors.
pub fn brute_force_solve(
    patients: &[Patient],
    residual: &[Residual],
    params: &CostParams,
    size_cap: u64,
) -> Result<BruteForceSolution, MilpError> {
    check_residual(residual, params)?;
    let branches = params.physicians() as u64 + 1;
    let mut size: u64 = 1;
    for _ in patients {
        size = size.saturating_mul(branches);
        if size > size_cap {
            return Err(MilpError::SizeCapExceeded { size_cap });
        }
    }

    struct Search<'a> {
        patients: &'a [Patient],
        params: &'a CostParams,
        residual: Vec<Residual>,
        current: Vec<Action>,
        cost: f64,
        best: Option<(f64, Vec<Action>)>,
        evaluated: u64,
    }

    impl Search<'_> {
        fn visit(&mut self, k: usize) {
            if k == self.patients.len() {
                self.evaluated += 1;
                if self.best.as_ref().is_none_or(|(b, _)| self.cost < *b) {
                    self.best = Some((self.cost, self.current.clone()));
                }
                return;
            }
            let patient = &self.patients[k];
            for a in 0..=self.params.physicians() {
                let action = Action(a);
                let saved = match action.physician() {
                    None => None,
                    Some(p) => {
                        if !patient.is_eligible(p) || !self.residual[p].admits(patient.duration) {
                            continue;
                        }
                        let old = self.residual[p];
                        self.residual[p] = old.after(patient.duration);
                        Some((p, old))
                    }
                };
                let step = patient_cost(patient, action, self.params);
                let before = self.cost;
                self.cost += step;
                self.current.push(action);
                self.visit(k + 1);
                self.current.pop();
                self.cost = before;
                if let Some((p, old)) = saved {
                    self.residual[p] = old;
                }
            }
        }
    }

    let mut search = Search {
        patients,
        params,
        residual: residual.to_vec(),
        current: Vec::with_capacity(patients.len()),
        cost: 0.0,
        best: None,
        evaluated: 0,
    };
    search.visit(0);
    let (objective, actions) = search.best.expect("all-reject is always feasible");
    Ok(BruteForceSolution {
        objective,
        actions,
        evaluated: search.evaluated,
    })
}

/// Exhaustive minimisation over the binary columns of a pure-binary model.
pub fn brute_force_model(model: &MilpModel, size_cap: u64) -> Result<super::MipSolution, MilpError> {
    let n = model.num_vars();
    if model.binaries().count() != n {
        return Err(MilpError::NotPureBinary);
    }
    if n >= 63 || (1u64 << n) > size_cap {
        return Err(MilpError::SizeCapExceeded { size_cap });
    }
    let started = Instant::now();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut x = vec![0.0; n];
    for mask in 0..(1u64 << n) {
        for (j, v) in x.iter_mut().enumerate() {
            // Column 0 is the most significant digit: lexicographic order.
            *v = ((mask >> (n - 1 - j)) & 1) as f64;
        }
        if model.is_feasible(&x, 1e-9) {
            let obj = model.objective_value(&x);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, x.clone()));
            }
        }
    }
    let stats = SolveStats {
        wall_time: started.elapsed().as_secs_f64(),
        ..SolveStats::default()
    };
    Ok(match best {
        Some((objective, values)) => super::MipSolution {
            status: MipStatus::Optimal,
            objective,
            values,
            best_bound: objective,
            gap: 0.0,
            stats,
        },
        None => super::MipSolution {
            status: MipStatus::Infeasible,
            objective: f64::INFINITY,
            values: Vec::new(),
            best_bound: f64::INFINITY,
            gap: 0.0,
            stats,
        },
    })
}
