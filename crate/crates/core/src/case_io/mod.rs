//! Case-file input and the per-unit network model.

mod network;
mod parse;

pub use network::{
    build_network, load_case, Branch, BranchAdmittance, Bus, BusKind, CostCurve, Generator,
    NetworkModel,
};
pub use parse::{parse_case, BranchRow, BusRow, GenCostRow, GenRow, RawCase};

#[derive(Debug, thiserror::Error)]
pub enum CaseError {
    #[error("case file is missing the `{0}` section")]
    MissingSection(&'static str),
    #[error("malformed {section} row at line {line}: {reason}")]
    MalformedRow {
        section: &'static str,
        line: usize,
        reason: String,
    },
    #[error("bus id {0} appears more than once")]
    DuplicateBusId(usize),
    #[error("{section} table references unknown bus {bus}")]
    UnknownBus { section: &'static str, bus: usize },
    #[error("no reference (type 3) bus")]
    NoSlackBus,
    #[error("{0} reference buses, expected exactly one")]
    MultipleSlackBuses(usize),
    #[error("the reference bus has no in-service generator")]
    NoReferenceGenerator,
    #[error("bus {0} has type 4 (isolated), which is not supported")]
    IsolatedBus(usize),
    #[error("branch {index} has zero impedance (r = x = 0)")]
    SingularBranch { index: usize },
    #[error("generator {generator}: {reason}")]
    UnsupportedCostModel { generator: usize, reason: String },
    #[error("bus {bus} has {count} in-service generators; one per bus is supported")]
    MultipleGenerators { bus: usize, count: usize },
    #[error("invalid limits on {what}: {detail}")]
    InvalidLimits { what: &'static str, detail: String },
    #[error("reading case file: {0}")]
    Io(#[from] std::io::Error),
}
