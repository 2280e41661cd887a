//! Imitation learning of dispatch policies for dynamic physician-to-patient
//! assignment.
//!
//! The crate covers the whole pipeline: the assignment process itself
//! ([`ppa`]), seeded instance and scenario generation ([`generate`]), an exact
//! mixed-integer solver for the expert models ([`milp`]), the expert family
//! ([`experts`]), a small feed-forward policy ([`learner`]), the DAgger loop
//! ([`dagger`]) and the experiment harness ([`harness`]).

pub mod dagger;
pub mod experts;
pub mod generate;
pub mod harness;
pub mod learner;
pub mod milp;
pub mod ppa;
pub mod rng;
