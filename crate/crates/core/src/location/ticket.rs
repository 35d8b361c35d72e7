use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::crypto::{KeyPair, PublicKey, Signature};
use crate::location::{GeoLocationTable, ZoneId};
use crate::{DomainId, Tick};

/// Default freshness window for requests at issuance.
pub const LTR_FRESHNESS: Tick = 10;
/// Default maximum ticket age at verification.
pub const LT_MAX_AGE: Tick = 50;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TicketError {
    #[error("signature does not verify")]
    BadSignature,
    #[error("address {claimed} does not match {observed}")]
    IpMismatch { claimed: Ipv4Addr, observed: Ipv4Addr },
    #[error("request time {timestamp} is outside the freshness window at {now}")]
    StaleRequest { timestamp: Tick, now: Tick },
    #[error("no attachment known for {0}")]
    UnknownHost(Ipv4Addr),
    #[error("ticket issued at {issued} is too old at {now}")]
    Expired { issued: Tick, now: Tick },
    #[error("ticket is bound to a different key")]
    KeyMismatch,
    #[error("malformed ticket text: {0}")]
    Malformed(String),
}

impl TicketError {
    pub fn reason(&self) -> &'static str {
        match self {
            TicketError::BadSignature => "BadSignature",
            TicketError::IpMismatch { .. } => "IpMismatch",
            TicketError::StaleRequest { .. } => "StaleRequest",
            TicketError::UnknownHost(_) => "UnknownHost",
            TicketError::Expired { .. } => "Expired",
            TicketError::KeyMismatch => "KeyMismatch",
            TicketError::Malformed(_) => "Malformed",
        }
    }
}

/// Location ticket request, signed by the requesting host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocationTicketRequest {
    pub requestor_ip: Ipv4Addr,
    pub requestor_key: PublicKey,
    pub timestamp: Tick,
    pub signature: Signature,
}

/// Location ticket, signed by the issuing controller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocationTicket {
    pub requestor_ip: Ipv4Addr,
    pub requestor_key: PublicKey,
    pub timestamp: Tick,
    pub zone: ZoneId,
    pub issuer: DomainId,
    pub signature: Signature,
}

impl LocationTicketRequest {
    pub fn new(requestor_ip: Ipv4Addr, key: &KeyPair, timestamp: Tick) -> Self {
        let mut ltr = Self {
            requestor_ip,
            requestor_key: key.public(),
            timestamp,
            signature: Signature::from_bytes([0; 64]),
        };
        ltr.signature = key.sign(ltr.signing_input().as_bytes());
        ltr
    }

    /// The text line without its `sig=` field.
    pub fn signing_input(&self) -> String {
        format!(
            "LTR ip={} key={} t={}",
            self.requestor_ip,
            self.requestor_key.to_hex(),
            self.timestamp
        )
    }

    pub fn verify(&self) -> bool {
        self.requestor_key
            .verify(self.signing_input().as_bytes(), &self.signature)
    }
}

impl LocationTicket {
    pub fn signing_input(&self) -> String {
        format!(
            "LT ip={} key={} t={} zone={} dom={}",
            self.requestor_ip,
            self.requestor_key.to_hex(),
            self.timestamp,
            self.zone,
            self.issuer
        )
    }

    pub fn verify_signature(&self, issuer_key: &PublicKey) -> bool {
        issuer_key.verify(self.signing_input().as_bytes(), &self.signature)
    }
}

impl fmt::Display for LocationTicketRequest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} sig={}", self.signing_input(), self.signature.to_hex())
    }
}

impl fmt::Display for LocationTicket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} sig={}", self.signing_input(), self.signature.to_hex())
    }
}

/// Splits `TAG k1=v1 k2=v2 ...` checking tag and key order.
fn fields<'a>(line: &'a str, tag: &str, keys: &[&str]) -> Result<Vec<&'a str>, TicketError> {
    let bad = |m: String| TicketError::Malformed(m);
    let mut toks = line.trim().split(' ');
    if toks.next() != Some(tag) {
        return Err(bad(format!("expected `{tag}` line")));
    }
    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        let tok = toks.next().ok_or_else(|| bad(format!("missing `{key}=`")))?;
        let value = tok
            .strip_prefix(key)
            .and_then(|t| t.strip_prefix('='))
            .ok_or_else(|| bad(format!("expected `{key}=`, got `{tok}`")))?;
        out.push(value);
    }
    if let Some(extra) = toks.next() {
        return Err(bad(format!("unexpected `{extra}`")));
    }
    Ok(out)
}

fn parse<T: FromStr>(v: &str, what: &str) -> Result<T, TicketError> {
    v.parse()
        .map_err(|_| TicketError::Malformed(format!("bad {what} `{v}`")))
}

fn key(v: &str) -> Result<PublicKey, TicketError> {
    PublicKey::from_hex(v).map_err(|e| TicketError::Malformed(e.to_string()))
}

fn sig(v: &str) -> Result<Signature, TicketError> {
    Signature::from_hex(v).map_err(|e| TicketError::Malformed(e.to_string()))
}

/// Only the canonical encoding is accepted, so the signed bytes are exactly
/// the received bytes.
fn require_canonical<T: fmt::Display>(parsed: T, line: &str) -> Result<T, TicketError> {
    if parsed.to_string() == line.trim() {
        Ok(parsed)
    } else {
        Err(TicketError::Malformed("non-canonical encoding".into()))
    }
}

impl FromStr for LocationTicketRequest {
    type Err = TicketError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let f = fields(s, "LTR", &["ip", "key", "t", "sig"])?;
        let ltr = Self {
            requestor_ip: parse(f[0], "address")?,
            requestor_key: key(f[1])?,
            timestamp: parse(f[2], "time")?,
            signature: sig(f[3])?,
        };
        require_canonical(ltr, s)
    }
}

impl FromStr for LocationTicket {
    type Err = TicketError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let f = fields(s, "LT", &["ip", "key", "t", "zone", "dom", "sig"])?;
        let lt = Self {
            requestor_ip: parse(f[0], "address")?,
            requestor_key: key(f[1])?,
            timestamp: parse(f[2], "time")?,
            zone: parse(f[3], "zone")?,
            issuer: DomainId::new(f[4]),
            signature: sig(f[5])?,
        };
        require_canonical(lt, s)
    }
}

/// Issuer-side parameters.
#[derive(Debug, Clone, Copy)]
pub struct Issuer<'a> {
    pub domain: &'a DomainId,
    pub key: &'a KeyPair,
    pub geo: &'a GeoLocationTable,
    pub freshness: Tick,
}

/// Checks `ltr` as received in a packet from `observed_src_ip` and, if it
/// holds, attests the host's current zone.
pub fn issue_ticket(
    issuer: Issuer<'_>,
    ltr: &LocationTicketRequest,
    observed_src_ip: Ipv4Addr,
    now: Tick,
) -> Result<LocationTicket, TicketError> {
    if !ltr.verify() {
        return Err(TicketError::BadSignature);
    }
    if ltr.requestor_ip != observed_src_ip {
        return Err(TicketError::IpMismatch {
            claimed: ltr.requestor_ip,
            observed: observed_src_ip,
        });
    }
    if now.abs_diff(ltr.timestamp) > issuer.freshness {
        return Err(TicketError::StaleRequest {
            timestamp: ltr.timestamp,
            now,
        });
    }
    let zone = issuer
        .geo
        .zone_of_host(ltr.requestor_ip)
        .ok_or(TicketError::UnknownHost(ltr.requestor_ip))?;
    let mut lt = LocationTicket {
        requestor_ip: ltr.requestor_ip,
        requestor_key: ltr.requestor_key,
        timestamp: now,
        zone,
        issuer: issuer.domain.clone(),
        signature: Signature::from_bytes([0; 64]),
    };
    lt.signature = issuer.key.sign(lt.signing_input().as_bytes());
    Ok(lt)
}

/// Verifier-side check of a presented ticket. The signature is checked
/// first, so any altered field reports `BadSignature`.
pub fn verify_ticket(
    lt: &LocationTicket,
    issuer_key: &PublicKey,
    now: Tick,
    max_age: Tick,
    expected_ip: Ipv4Addr,
    expected_key: &PublicKey,
) -> Result<(), TicketError> {
    if !lt.verify_signature(issuer_key) {
        return Err(TicketError::BadSignature);
    }
    if now.saturating_sub(lt.timestamp) > max_age {
        return Err(TicketError::Expired {
            issued: lt.timestamp,
            now,
        });
    }
    if lt.requestor_ip != expected_ip {
        return Err(TicketError::IpMismatch {
            claimed: lt.requestor_ip,
            observed: expected_ip,
        });
    }
    if lt.requestor_key != *expected_key {
        return Err(TicketError::KeyMismatch);
    }
    Ok(())
}
