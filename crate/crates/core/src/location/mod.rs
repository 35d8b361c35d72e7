//! Host location tracking and the signed location-ticket protocol.

mod geo;
mod ticket;

pub use geo::{Attachment, GeoError, GeoLocationTable, LocationZone, SecurityClass, Sighting, ZoneId};
pub use ticket::{
    issue_ticket, verify_ticket, Issuer, LocationTicket, LocationTicketRequest, TicketError, LTR_FRESHNESS, LT_MAX_AGE,
};
