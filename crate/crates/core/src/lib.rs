//! Policy Enforcement Point as a Service.
//!
//! A deterministic multi-domain SDN simulator in which application-layer
//! services push pre-approved policies into the network. Local subscribers
//! send policy transfers (PT) to their own controller, remote subscribers send
//! remote policy transfers (RPT) over the east-west interface. Accepted
//! transfers are compiled into the last flow table of every affected switch,
//! below the local pipeline, so they can only ever restrict traffic that the
//! domain's own policy already allows.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataplane`]: header matching, flow tables and the multi-table pipeline.
//! * [`policy`]: policy model, validation oracle, compilation to flow rules.
//! * [`crypto`]: deterministic key pairs and signatures.
//! * [`location`]: geo-location tracking and the signed location tickets.
//! * [`controller`]: the per-domain control plane and PEPS application.
//! * [`interdomain`]: east-west channels and location-based access sessions.
//! * [`simnet`]: topology, scenario files, the event loop and metrics.

pub mod controller;
pub mod crypto;
pub mod dataplane;
pub mod ids;
pub mod interdomain;
pub mod location;
pub mod policy;
pub mod simnet;

pub use ids::{DomainId, PortId, SubscriberId, SwitchId, Tick};
