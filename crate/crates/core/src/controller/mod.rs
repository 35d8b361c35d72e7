//! Per-domain control plane.

mod bucket;
mod core;
mod report;

pub use self::core::{
    Accepted, Controller, ControllerConfig, ControllerError, Eviction, PacketInOutcome, Placement, Subscriber,
    SubscriberKind, TransferRef, DEFAULT_TABLES, TABLE_ACL, TABLE_INGRESS, TABLE_ROUTING,
};
pub use bucket::{TokenBucket, DEFAULT_BUCKET_CAPACITY, DEFAULT_REFILL_PER_TICK};
pub use report::Report;
