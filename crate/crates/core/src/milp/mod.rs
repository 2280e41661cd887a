//! Exact solver for the assignment models: bounded primal simplex for the
//! relaxations, branch-and-bound for integrality, scenario enumeration for
//! the two-stage model, and MPS export for cross-checks with other solvers.

mod bnb;
mod cuts;
mod dual;
mod formulation;
mod model;
mod mps;
mod propagate;
mod simplex;

use thiserror::Error;

pub use bnb::{relative_gap, solve_mip, MipSolution, MipStatus, SolveLimits, SolveStats, GAP_CLOSED, INTEGRALITY_TOL};
pub use formulation::{
    brute_force_model, brute_force_solve, build_ppa_model, build_sppa_model, first_stage_candidates, solve_ppa,
    solve_sppa_by_enumeration, BruteForceSolution, PatientVars, PpaModel, SppaModel, SppaOutcome, DEFAULT_SIZE_CAP,
};
pub use model::{Constraint, MilpModel, Relation, VarKind, Variable};
pub use mps::{export_mps, mps_format, parse_mps, MpsFormat};
pub use simplex::{solve_lp, LpSolution, LpStatus, PIVOT_TOL};

#[derive(Debug, Error, PartialEq)]
pub enum MilpError {
    #[error("invalid bounds on variable {0}")]
    InvalidBounds(String),
    #[error("duplicate name {0}")]
    DuplicateName(String),
    #[error("constraint references an undeclared variable ({0})")]
    UnknownVariable(String),
    #[error("variable {0} has no finite lower bound")]
    FreeVariable(String),
    #[error("model declares binary variables; solve its relaxation instead")]
    NotAnLp,
    #[error("linear relaxation is unbounded")]
    Unbounded,
    #[error("search stopped before any feasible solution was found")]
    NoIncumbent,
    #[error("patient {0} has no eligible physician")]
    EmptyEligible(usize),
    #[error("scenario set is empty")]
    EmptyScenarioSet,
    #[error("residual capacity vector has {found} entries, expected {expected}")]
    ResidualLength { expected: usize, found: usize },
    #[error("residual capacity is negative")]
    NegativeResidual,
    #[error("enumeration exceeds the size cap of {size_cap}")]
    SizeCapExceeded { size_cap: u64 },
    #[error("model has non-binary columns")]
    NotPureBinary,
    #[error("malformed MPS: {0}")]
    Mps(String),
}
