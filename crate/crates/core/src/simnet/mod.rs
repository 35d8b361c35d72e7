//! Deterministic multi-domain network simulator: scenario files, the tick
//! loop, data-provider stubs, metrics and the canned experiments.

mod bench;
mod engine;
mod ladder;
mod metrics;
mod scenario;

pub use crate::policy::text::ParseError;
pub use bench::{bench_packet_in, BenchConfig, BenchSamples};
pub use engine::{
    allow_all, run_scenario, ControlRecord, DataProviderStub, DpRequest, InvariantError, SimError, SimHost, Simulation,
    DRAIN_LIMIT, MAX_HOPS,
};
pub use ladder::{dp_address, FirewallLadder, TrafficClass};
pub use metrics::{Counters, MetricsReport, CSV_COUNTERS};
pub use scenario::{
    HookAction, HookDecl, HostDecl, InjectDecl, LinkDecl, Scenario, SubscriberDecl, SwitchDecl, ZoneDecl,
    DEFAULT_BUDGET,
};
