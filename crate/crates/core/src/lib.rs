//! Exact mean-CVaR optimization for finite discounted MDPs.
//!
//! Value functions are concave and piecewise linear in the tail level `y`,
//! which makes backward induction exact. The crate also provides an online
//! runner that executes the optimal history-dependent policy, and brute-force
//! oracles used to cross-check the solver.

pub mod model;
pub mod nature;
pub mod numfmt;
pub mod oracle;
pub mod policy;
pub mod pwl;
pub mod solver;
pub mod tables;
pub mod verify;

pub use model::{Horizon, MdpSpec, ParsedSpec, RandomCostSpec};
pub use pwl::{PwlConcave, Segment, SuperdiffResult};
pub use solver::{cvar_value, solve_finite, solve_infinite, ObjectiveMode, SolverOptions, ValueTables};
