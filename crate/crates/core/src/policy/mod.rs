//! Application-level policies, transfer validation and compilation into
//! enforcement-table rules.

mod compile;
mod decide;
mod model;
pub mod text;
mod universe;
mod validate;

pub use compile::{compile_to_rules, compile_transfer, conflict_witness, conflicts, CompileError};
pub use decide::{decide, decide_merged, winning_policy};
pub use model::{
    ComposedPolicySet, Decision, Outcome, Policy, PolicyTransfer, RemotePolicyTransfer, ServiceAddress, Transfer,
};
pub use text::ParseError;
pub use universe::{HeaderUniverse, UniverseError, DEFAULT_UNIVERSE_CAP};
pub use validate::{
    check_freshness, check_packet, check_scope, find_violation, validate_pt, validate_rpt, ValidationError, Violation,
};
