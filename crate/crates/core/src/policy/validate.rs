use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::dataplane::{FlowKey, MatchFields, PacketHeader, Protocol};
use crate::policy::{
    decide, decide_merged, HeaderUniverse, Outcome, Policy, PolicyTransfer, RemotePolicyTransfer, ServiceAddress,
    UniverseError,
};

/// A packet on which a transfer changes what the local policy decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub witness: PacketHeader,
    /// `decide(local, witness)`.
    pub local: Outcome,
    /// `decide(local ++ transfer, witness)`.
    pub composed: Outcome,
    /// What the enforcement table would do to the packet after the local
    /// verdict, given that transferred `Allow`s compile to nothing.
    pub enforced: Outcome,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} local={} composed={} enforced={}",
            self.witness.flow_key(),
            self.local,
            self.composed,
            self.enforced
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("transfer changes the local decision on {0}")]
    Violation(Violation),
    #[error("policy {policy_index} reaches {} outside the subscriber scope", witness.flow_key())]
    ScopeViolation { policy_index: usize, witness: PacketHeader },
    #[error("sequence {got} is not newer than {last}")]
    StaleSequence { got: u64, last: u64 },
    #[error("signature does not verify")]
    BadSignature,
    #[error(transparent)]
    Universe(#[from] UniverseError),
}

impl ValidationError {
    /// Short reason token used in reports.
    pub fn reason(&self) -> &'static str {
        match self {
            ValidationError::Violation(_) => "Violation",
            ValidationError::ScopeViolation { .. } => "ScopeViolation",
            ValidationError::StaleSequence { .. } => "StaleSequence",
            ValidationError::BadSignature => "BadSignature",
            ValidationError::Universe(_) => "UniverseTooLarge",
        }
    }

    pub fn witness(&self) -> Option<FlowKey> {
        match self {
            ValidationError::Violation(v) => Some(v.witness.flow_key()),
            ValidationError::ScopeViolation { witness, .. } => Some(witness.flow_key()),
            _ => None,
        }
    }
}

/// Replay protection: `got` must be strictly newer than the last accepted
/// sequence number, if any.
pub fn check_freshness(got: u64, last: Option<u64>) -> Result<(), ValidationError> {
    match last {
        Some(last) if got <= last => Err(ValidationError::StaleSequence { got, last }),
        _ => Ok(()),
    }
}

/// Highest-priority restriction in `transfer` matching `pkt`.
fn enforced_restriction(transfer: &[Policy], pkt: &PacketHeader) -> Option<Outcome> {
    let restrictions = transfer.iter().filter(|p| p.decision.is_restriction());
    let restrictions: Vec<&Policy> = restrictions.collect();
    crate::policy::winning_policy(restrictions.iter().copied(), pkt).map(|i| restrictions[i].decision.into())
}

/// Per-packet violation predicate.
///
/// A packet the local set leaves to the default is never a violation. On an
/// explicitly decided packet the transfer may not loosen the decision, and
/// for packets outside `scope` it may not change anything at all.
pub fn check_packet(
    local: &[Policy],
    transfer: &[Policy],
    scope: &ServiceAddress,
    pkt: &PacketHeader,
) -> Option<Violation> {
    let l = decide(local, pkt);
    if !l.is_explicit() {
        return None;
    }
    let composed = decide_merged(local, transfer, pkt);
    // a local rate limit also continues into the enforcement table
    let enforced = match l {
        Outcome::Allow | Outcome::RateLimit { .. } => enforced_restriction(transfer, pkt).unwrap_or(l),
        _ => l,
    };
    let loosened = composed.restrictiveness() < l.restrictiveness();
    let foreign = !scope.covers(pkt) && (composed != l || enforced != l);
    (loosened || foreign).then_some(Violation {
        witness: *pkt,
        local: l,
        composed,
        enforced,
    })
}

/// First violating packet in enumeration order, over `universe` refined
/// with the constants of both policy lists.
pub fn find_violation(
    local: &[Policy],
    transfer: &[Policy],
    scope: &ServiceAddress,
    universe: &HeaderUniverse,
) -> Result<Option<Violation>, UniverseError> {
    if transfer.is_empty() {
        return Ok(None);
    }
    let u = universe.refined_with(local.iter().chain(transfer));
    u.check()?;
    let found = u
        .packets()
        .filter(|p| transfer.iter().any(|t| t.match_fields.matches(p)))
        .find_map(|p| check_packet(local, transfer, scope, &p));
    Ok(found)
}

/// Checks a PT against the local set. `scope` is the subscriber's
/// registered service address. Signature and freshness are checked by the
/// caller.
pub fn validate_pt(
    local: &[Policy],
    pt: &PolicyTransfer,
    scope: &ServiceAddress,
    universe: &HeaderUniverse,
) -> Result<(), ValidationError> {
    match find_violation(local, &pt.policies, scope, universe)? {
        Some(v) => Err(ValidationError::Violation(v)),
        None => Ok(()),
    }
}

/// Checks an RPT: every policy must be confined to `rpt.scope`, then the
/// same non-violation check as for a PT.
pub fn validate_rpt(
    local: &[Policy],
    rpt: &RemotePolicyTransfer,
    universe: &HeaderUniverse,
) -> Result<(), ValidationError> {
    check_scope(&rpt.policies, &rpt.scope)?;
    match find_violation(local, &rpt.policies, &rpt.scope, universe)? {
        Some(v) => Err(ValidationError::Violation(v)),
        None => Ok(()),
    }
}

/// Syntactic destination-scope check.
pub fn check_scope(policies: &[Policy], scope: &ServiceAddress) -> Result<(), ValidationError> {
    for (policy_index, p) in policies.iter().enumerate() {
        if !scope.contains_match(&p.match_fields) {
            return Err(ValidationError::ScopeViolation {
                policy_index,
                witness: scope_witness(&p.match_fields, scope),
            });
        }
    }
    Ok(())
}

/// A packet matched by `m` that `scope` does not cover. Only meaningful
/// when `scope.contains_match(m)` is false.
fn scope_witness(m: &MatchFields, scope: &ServiceAddress) -> PacketHeader {
    let mut pkt = PacketHeader::new(
        m.src_ip.map_or(Ipv4Addr::UNSPECIFIED, |n| n.network()),
        scope.ip,
        m.src_port.unwrap_or(0),
        m.dst_port.unwrap_or(0),
        m.protocol.unwrap_or(Protocol::Tcp),
    );
    let ip_confined = m.dst_ip.is_some_and(|n| n.prefix_len() == 32 && n.addr() == scope.ip);
    if !ip_confined {
        pkt.dst_ip = match m.dst_ip {
            Some(n) if n.network() != scope.ip => n.network(),
            Some(n) => n.broadcast(),
            None => Ipv4Addr::from(u32::from(scope.ip) ^ 1),
        };
    } else if let Some(ports) = &scope.ports {
        pkt.dst_port = match m.dst_port {
            Some(p) => p,
            None => (0..=u16::MAX).find(|p| !ports.contains(p)).unwrap_or(0),
        };
    }
    pkt
}
