//! Domain types and exact dynamics of the physician-to-patient assignment
//! process: one decision epoch per patient call-in.
//!
//! Physicians are indexed from 0 inside patients and states. Actions use the
//! external numbering where `0` rejects the caller and `p + 1` assigns the
//! caller to physician `p`.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack used when comparing accumulated workload against a session
/// length. The solver uses the same tolerance for its capacity rows, so a
/// schedule accepted by one is accepted by the other.
pub const CAPACITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PpaError {
    #[error("action {action} is out of range for {physicians} physicians")]
    ActionOutOfRange { action: usize, physicians: usize },
    #[error("infeasible action {action}: {violation}")]
    Infeasible { action: Action, violation: Violation },
    #[error("infeasible action {action} at epoch {epoch}: {violation}")]
    InfeasibleAt {
        epoch: usize,
        action: Action,
        violation: Violation,
    },
    #[error("action sequence has length {actions} but the episode has {patients} patients")]
    LengthMismatch { actions: usize, patients: usize },
    #[error("invalid cost parameters: {0}")]
    InvalidParams(String),
    #[error("invalid patient {id}: {reason}")]
    InvalidPatient { id: usize, reason: String },
    #[error("malformed episode file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PpaError {
    fn from(e: std::io::Error) -> Self {
        PpaError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for PpaError {
    fn from(e: serde_json::Error) -> Self {
        PpaError::Format(e.to_string())
    }
}

/// Which feasibility constraint an assignment breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    NotEligible,
    NoSlotsLeft,
    WorkloadExceeded,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Violation::NotEligible => "physician is not eligible for the patient",
            Violation::NoSlotsLeft => "physician has no appointment slots left",
            Violation::WorkloadExceeded => "assignment would exceed the session length",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Priority {
    High = 1,
    Regular = 2,
}

impl Priority {
    pub fn index(self) -> usize {
        self as usize - 1
    }
}

impl TryFrom<u8> for Priority {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Priority::High),
            2 => Ok(Priority::Regular),
            other => Err(format!("priority must be 1 or 2, got {other}")),
        }
    }
}

impl From<Priority> for u8 {
    fn from(p: Priority) -> u8 {
        p as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: usize,
    /// Appointment length in minutes.
    pub duration: f64,
    pub priority: Priority,
    pub preferred: usize,
    /// Eligible physicians, ascending.
    pub eligible: Vec<usize>,
    pub arrival_score: f64,
}

impl Patient {
    pub fn is_eligible(&self, physician: usize) -> bool {
        self.eligible.binary_search(&physician).is_ok()
    }

    pub fn validate(&self, physicians: usize) -> Result<(), PpaError> {
        let fail = |reason: &str| {
            Err(PpaError::InvalidPatient {
                id: self.id,
                reason: reason.to_string(),
            })
        };
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return fail("duration must be positive");
        }
        if !(0.0..=1.0).contains(&self.arrival_score) {
            return fail("arrival score must lie in [0, 1]");
        }
        if self.eligible.is_empty() {
            return fail("eligible set is empty");
        }
        if self.eligible.windows(2).any(|w| w[0] >= w[1]) {
            return fail("eligible set must be strictly ascending");
        }
        if self.eligible.iter().any(|&p| p >= physicians) {
            return fail("eligible physician out of range");
        }
        if !self.is_eligible(self.preferred) {
            return fail("preferred physician is not eligible");
        }
        Ok(())
    }
}

/// `0` rejects the patient, `p >= 1` assigns to physician `p - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub usize);

impl Action {
    pub const REJECT: Action = Action(0);

    pub fn assign(physician: usize) -> Action {
        Action(physician + 1)
    }

    pub fn physician(self) -> Option<usize> {
        self.0.checked_sub(1)
    }

    pub fn is_reject(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    /// Rejection cost indexed by priority (high, regular).
    pub reject: [f64; 2],
    /// Ratio between the non-preferred assignment penalty and the rejection cost.
    pub pref_ratio: f64,
    /// Session length in minutes, shared by all physicians.
    pub session_minutes: f64,
    /// Appointment capacity per physician.
    pub capacities: Vec<u32>,
}

impl CostParams {
    /// Four physicians with 7 slots and 110 minutes each, against about 30
    /// calls per session, so demand slightly exceeds capacity.
    pub fn desk() -> CostParams {
        CostParams {
            reject: [200.0, 50.0],
            pref_ratio: 0.1,
            session_minutes: 110.0,
            capacities: vec![7; 4],
        }
    }

    /// Capacities scaled for about 100 calls per session at the same load.
    pub fn full_scale() -> CostParams {
        CostParams {
            session_minutes: 360.0,
            capacities: vec![24; 4],
            ..CostParams::desk()
        }
    }

    pub fn physicians(&self) -> usize {
        self.capacities.len()
    }

    pub fn reject_cost(&self, priority: Priority) -> f64 {
        self.reject[priority.index()]
    }

    pub fn pref_cost(&self, priority: Priority) -> f64 {
        self.pref_ratio * self.reject[priority.index()]
    }

    pub fn validate(&self) -> Result<(), PpaError> {
        let bad = |m: &str| Err(PpaError::InvalidParams(m.to_string()));
        if !(self.reject[0] > self.reject[1] && self.reject[1] > 0.0) {
            return bad("rejection costs must satisfy high > regular > 0");
        }
        if !(self.pref_ratio > 0.0 && self.pref_ratio < 1.0) {
            return bad("pref_ratio must lie in (0, 1)");
        }
        if !(self.session_minutes > 0.0 && self.session_minutes.is_finite()) {
            return bad("session_minutes must be positive");
        }
        if self.capacities.is_empty() {
            return bad("at least one physician is required");
        }
        if self.capacities.contains(&0) {
            return bad("every physician needs at least one appointment slot");
        }
        Ok(())
    }

    /// Untouched capacities at the start of a session.
    pub fn fresh_residual(&self) -> Vec<Residual> {
        self.capacities
            .iter()
            .map(|&l| Residual {
                slots_left: l,
                workload_left: self.session_minutes,
            })
            .collect()
    }
}

/// Capacity still available to one physician.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub slots_left: u32,
    pub workload_left: f64,
}

impl Residual {
    pub fn admits(&self, duration: f64) -> bool {
        self.slots_left >= 1 && duration <= self.workload_left + CAPACITY_TOL
    }

    pub fn after(&self, duration: f64) -> Residual {
        Residual {
            slots_left: self.slots_left - 1,
            workload_left: self.workload_left - duration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicianState {
    pub is_preferred: bool,
    pub slots_left: u32,
    pub priority1_count: u32,
    /// Minutes already booked.
    pub workload: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub epoch: usize,
    pub patient: Patient,
    pub physicians: Vec<PhysicianState>,
    pub eligibility: Vec<bool>,
}

impl SystemState {
    /// State at the first call of a session.
    pub fn initial(patient: Patient, params: &CostParams) -> SystemState {
        let physicians = params
            .capacities
            .iter()
            .enumerate()
            .map(|(p, &l)| PhysicianState {
                is_preferred: p == patient.preferred,
                slots_left: l,
                priority1_count: 0,
                workload: 0.0,
            })
            .collect();
        let eligibility = eligibility_mask(&patient, params.physicians());
        SystemState {
            epoch: 0,
            patient,
            physicians,
            eligibility,
        }
    }

    pub fn residual(&self, params: &CostParams) -> Vec<Residual> {
        self.physicians
            .iter()
            .map(|ph| Residual {
                slots_left: ph.slots_left,
                workload_left: params.session_minutes - ph.workload,
            })
            .collect()
    }

    /// Reports the first constraint the action breaks, if any.
    pub fn check(&self, action: Action, params: &CostParams) -> Result<(), PpaError> {
        let Some(p) = action.physician() else {
            return Ok(());
        };
        if p >= self.physicians.len() {
            return Err(PpaError::ActionOutOfRange {
                action: action.0,
                physicians: self.physicians.len(),
            });
        }
        let violation = if !self.eligibility[p] {
            Violation::NotEligible
        } else if self.physicians[p].slots_left == 0 {
            Violation::NoSlotsLeft
        } else if self.physicians[p].workload + self.patient.duration > params.session_minutes + CAPACITY_TOL {
            Violation::WorkloadExceeded
        } else {
            return Ok(());
        };
        Err(PpaError::Infeasible { action, violation })
    }

    pub fn is_feasible(&self, action: Action, params: &CostParams) -> bool {
        self.check(action, params).is_ok()
    }

    /// Per-action feasibility mask of length `P + 1`; entry 0 is always set.
    pub fn feasible_mask(&self, params: &CostParams) -> Vec<bool> {
        (0..=self.physicians.len())
            .map(|a| self.is_feasible(Action(a), params))
            .collect()
    }
}

fn eligibility_mask(patient: &Patient, physicians: usize) -> Vec<bool> {
    let mut mask = vec![false; physicians];
    for &p in &patient.eligible {
        mask[p] = true;
    }
    mask
}

/// Feasible actions in ascending order; always starts with the rejection.
pub fn feasible_actions(state: &SystemState, params: &CostParams) -> Vec<Action> {
    (0..=state.physicians.len())
        .map(Action)
        .filter(|&a| state.is_feasible(a, params))
        .collect()
}

/// Applies `action` to the current caller and advances to `next_patient`.
pub fn transition(
    state: &SystemState,
    action: Action,
    next_patient: Patient,
    params: &CostParams,
) -> Result<SystemState, PpaError> {
    state.check(action, params)?;
    let mut physicians = state.physicians.clone();
    if let Some(p) = action.physician() {
        let ph = &mut physicians[p];
        ph.slots_left -= 1;
        ph.workload += state.patient.duration;
        if state.patient.priority == Priority::High {
            ph.priority1_count += 1;
        }
    }
    for (p, ph) in physicians.iter_mut().enumerate() {
        ph.is_preferred = p == next_patient.preferred;
    }
    let eligibility = eligibility_mask(&next_patient, physicians.len());
    Ok(SystemState {
        epoch: state.epoch + 1,
        patient: next_patient,
        physicians,
        eligibility,
    })
}

/// Cost of serving `patient` with `action`, ignoring capacities.
pub fn patient_cost(patient: &Patient, action: Action, params: &CostParams) -> f64 {
    match action.physician() {
        None => params.reject_cost(patient.priority),
        Some(p) if p == patient.preferred => 0.0,
        Some(_) => params.pref_cost(patient.priority),
    }
}

pub fn step_cost(state: &SystemState, action: Action, params: &CostParams) -> f64 {
    patient_cost(&state.patient, action, params)
}

/// Outcome counters of one simulated session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub cost: f64,
    pub p1_rejected: u32,
    pub p2_rejected: u32,
    pub undesirable: u32,
}

impl EpisodeMetrics {
    pub fn record(&mut self, patient: &Patient, action: Action, params: &CostParams) {
        self.cost += patient_cost(patient, action, params);
        match action.physician() {
            None if patient.priority == Priority::High => self.p1_rejected += 1,
            None => self.p2_rejected += 1,
            Some(p) if p != patient.preferred => self.undesirable += 1,
            Some(_) => {}
        }
    }
}

/// Replays a complete action sequence, checking feasibility at every epoch.
pub fn rollout_cost(
    realization: &EpisodeRealization,
    actions: &[Action],
    params: &CostParams,
) -> Result<(f64, EpisodeMetrics), PpaError> {
    let patients = &realization.patients;
    if actions.len() != patients.len() {
        return Err(PpaError::LengthMismatch {
            actions: actions.len(),
            patients: patients.len(),
        });
    }
    let mut metrics = EpisodeMetrics::default();
    let mut state = SystemState::initial(patients[0].clone(), params);
    for (k, &action) in actions.iter().enumerate() {
        state.check(action, params).map_err(|e| match e {
            PpaError::Infeasible { action, violation } => PpaError::InfeasibleAt {
                epoch: k,
                action,
                violation,
            },
            other => other,
        })?;
        metrics.record(&state.patient, action, params);
        if let Some(next) = patients.get(k + 1) {
            state = transition(&state, action, next.clone(), params)?;
        }
    }
    Ok((metrics.cost, metrics))
}

/// The fully revealed call sequence of one booking session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRealization {
    pub seed: u64,
    pub patients: Vec<Patient>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    seed: u64,
    k_total: usize,
    physicians: usize,
}

impl EpisodeRealization {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn validate(&self, physicians: usize) -> Result<(), PpaError> {
        if self.patients.is_empty() {
            return Err(PpaError::Format("episode has no patients".into()));
        }
        for p in &self.patients {
            p.validate(physicians)?;
        }
        if self
            .patients
            .windows(2)
            .any(|w| w[0].arrival_score > w[1].arrival_score)
        {
            return Err(PpaError::Format("patients not sorted by arrival score".into()));
        }
        Ok(())
    }

    /// JSON-lines: a header object followed by one object per patient.
    pub fn write_jsonl<W: Write>(&self, physicians: usize, mut out: W) -> Result<(), PpaError> {
        let header = EpisodeHeader {
            seed: self.seed,
            k_total: self.patients.len(),
            physicians,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for p in &self.patients {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Returns the episode and the physician count from its header.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<(EpisodeRealization, usize), PpaError> {
        let mut lines = input.lines().filter(|l| match l {
            Ok(s) => !s.trim().is_empty(),
            Err(_) => true,
        });
        let header: EpisodeHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(PpaError::Format("missing header line".into())),
        };
        let mut patients = Vec::with_capacity(header.k_total);
        for line in lines {
            patients.push(serde_json::from_str::<Patient>(&line?)?);
        }
        if patients.len() != header.k_total {
            return Err(PpaError::Format(format!(
                "header announces {} patients, found {}",
                header.k_total,
                patients.len()
            )));
        }
        let episode = EpisodeRealization {
            seed: header.seed,
            patients,
        };
        episode.validate(header.physicians)?;
        Ok((episode, header.physicians))
    }
}
