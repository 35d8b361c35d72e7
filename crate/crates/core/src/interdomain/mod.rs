//! East-west links between controllers, remote policy transport and
//! location-based access sessions.

mod channel;
mod envelope;
mod federation;
mod session;

pub use channel::{ChannelId, EastWestChannel, DEFAULT_LATENCY};
pub use envelope::{Envelope, EnvelopeError, MessageType};
pub use federation::{Delivery, Federation, FederationError, Inbound, Receipt};
pub use session::{complement_cover, lbac_policies, LbacSession, SessionId, SessionState};
