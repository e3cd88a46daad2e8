//! Unsupervised learning for AC optimal power flow.
//!
//! A small fully connected network maps load demands to generator
//! set-points; the remaining voltages are recovered with a Newton-Raphson
//! or fast-decoupled power flow, and training minimizes an augmented
//! Lagrangian whose multipliers follow the constraint violations.

pub mod case_io;
pub mod evaluation;
pub mod neural;
pub mod opf_model;
pub mod powerflow;
pub mod sparse;
pub mod training;

pub use case_io::{build_network, load_case, parse_case, CaseError, NetworkModel, RawCase};
pub use powerflow::{PfError, PfOptions, PfProblem, PfSolution, SolverKind};
