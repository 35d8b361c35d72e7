use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use crate::crypto::{KeyPair, PublicKey, Signature};
use crate::dataplane::{MatchFields, PacketHeader};
use crate::{DomainId, SubscriberId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Allow,
    Deny,
    RateLimit { max_new_flows: u32, window_ticks: Tick },
}

impl Decision {
    pub fn is_restriction(&self) -> bool {
        !matches!(self, Decision::Allow)
    }
}

/// Result of evaluating an ordered policy list against one packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Allow,
    Deny,
    RateLimit {
        max_new_flows: u32,
        window_ticks: Tick,
    },
    /// No policy matched.
    DefaultDeny,
}

impl Outcome {
    pub fn is_explicit(&self) -> bool {
        !matches!(self, Outcome::DefaultDeny)
    }

    /// 1 for Allow, 2 for RateLimit, 3 for Deny. DefaultDeny ranks as Deny.
    pub fn restrictiveness(&self) -> u8 {
        match self {
            Outcome::Allow => 1,
            Outcome::RateLimit { .. } => 2,
            Outcome::Deny | Outcome::DefaultDeny => 3,
        }
    }

    pub fn grants(&self) -> bool {
        matches!(self, Outcome::Allow | Outcome::RateLimit { .. })
    }
}

impl From<Decision> for Outcome {
    fn from(d: Decision) -> Self {
        match d {
            Decision::Allow => Outcome::Allow,
            Decision::Deny => Outcome::Deny,
            Decision::RateLimit {
                max_new_flows,
                window_ticks,
            } => Outcome::RateLimit {
                max_new_flows,
                window_ticks,
            },
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Allow => f.write_str("allow"),
            Outcome::Deny => f.write_str("deny"),
            Outcome::RateLimit {
                max_new_flows,
                window_ticks,
            } => write!(f, "ratelimit {max_new_flows}/{window_ticks}"),
            Outcome::DefaultDeny => f.write_str("default-deny"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Policy {
    pub match_fields: MatchFields,
    pub decision: Decision,
    pub priority: u32,
    pub comment: String,
}

impl Policy {
    pub fn new(priority: u32, decision: Decision, match_fields: MatchFields) -> Self {
        Self {
            match_fields,
            decision,
            priority,
            comment: String::new(),
        }
    }

    pub fn allow(priority: u32, m: MatchFields) -> Self {
        Self::new(priority, Decision::Allow, m)
    }

    pub fn deny(priority: u32, m: MatchFields) -> Self {
        Self::new(priority, Decision::Deny, m)
    }

    pub fn with_comment(mut self, comment: impl Into<String>) -> Self {
        self.comment = comment.into();
        self
    }
}

/// Where a subscriber's service listens. `ports == None` means every port.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServiceAddress {
    pub ip: Ipv4Addr,
    pub ports: Option<BTreeSet<u16>>,
}

impl ServiceAddress {
    pub fn any_port(ip: Ipv4Addr) -> Self {
        Self { ip, ports: None }
    }

    pub fn with_ports(ip: Ipv4Addr, ports: impl IntoIterator<Item = u16>) -> Self {
        Self {
            ip,
            ports: Some(ports.into_iter().collect()),
        }
    }

    /// Whether `pkt` is destined to this service.
    pub fn covers(&self, pkt: &PacketHeader) -> bool {
        pkt.dst_ip == self.ip && self.ports.as_ref().is_none_or(|ps| ps.contains(&pkt.dst_port))
    }

    /// Whether every packet matched by `m` is destined to this service.
    pub fn contains_match(&self, m: &MatchFields) -> bool {
        let ip_ok = m.dst_ip.is_some_and(|n| n.prefix_len() == 32 && n.addr() == self.ip);
        let port_ok = match &self.ports {
            None => true,
            Some(ps) => m.dst_port.is_some_and(|p| ps.contains(&p)),
        };
        ip_ok && port_ok
    }
}

impl fmt::Display for ServiceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.ports {
            None => write!(f, "{}:*", self.ip),
            Some(ps) => {
                let list: Vec<String> = ps.iter().map(u16::to_string).collect();
                write!(f, "{}:{}", self.ip, list.join(","))
            }
        }
    }
}

impl FromStr for ServiceAddress {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ip, ports) = s
            .rsplit_once(':')
            .ok_or_else(|| format!("service address `{s}` needs `<ip>:<ports>`"))?;
        let ip = ip.parse().map_err(|_| format!("bad IPv4 address `{ip}`"))?;
        if ports == "*" {
            return Ok(Self::any_port(ip));
        }
        let ports = ports
            .split(',')
            .map(|p| p.parse::<u16>().map_err(|_| format!("bad port `{p}`")))
            .collect::<Result<BTreeSet<_>, _>>()?;
        Ok(Self { ip, ports: Some(ports) })
    }
}

/// A signed policy document from a local service to its own domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyTransfer {
    pub subscriber: SubscriberId,
    pub policies: Vec<Policy>,
    pub sequence: u64,
    pub signature: Option<Signature>,
}

/// A signed policy document from a service in another domain. Every policy
/// must only concern traffic destined to `scope`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemotePolicyTransfer {
    pub origin_domain: DomainId,
    pub subscriber: SubscriberId,
    pub scope: ServiceAddress,
    pub policies: Vec<Policy>,
    pub sequence: u64,
    pub signature: Option<Signature>,
}

macro_rules! signed_document {
    ($ty:ty) => {
        impl $ty {
            /// Canonical bytes covered by the signature.
            pub fn signing_bytes(&self) -> Vec<u8> {
                crate::policy::text::format_unsigned(&self.header_lines(), &self.policies).into_bytes()
            }

            pub fn sign(&mut self, key: &KeyPair) {
                self.signature = Some(key.sign(&self.signing_bytes()));
            }

            pub fn signed(mut self, key: &KeyPair) -> Self {
                self.sign(key);
                self
            }

            pub fn verify(&self, key: &PublicKey) -> bool {
                self.signature
                    .as_ref()
                    .is_some_and(|sig| key.verify(&self.signing_bytes(), sig))
            }

            pub fn to_text(&self) -> String {
                crate::policy::text::format_document(&self.header_lines(), &self.policies, self.signature.as_ref())
            }
        }
    };
}

impl PolicyTransfer {
    pub fn new(subscriber: SubscriberId, sequence: u64, policies: Vec<Policy>) -> Self {
        Self {
            subscriber,
            policies,
            sequence,
            signature: None,
        }
    }

    fn header_lines(&self) -> Vec<String> {
        vec![
            format!("SUBSCRIBER {}", self.subscriber),
            format!("SEQ {}", self.sequence),
        ]
    }
}

impl RemotePolicyTransfer {
    pub fn new(
        origin_domain: DomainId,
        subscriber: SubscriberId,
        scope: ServiceAddress,
        sequence: u64,
        policies: Vec<Policy>,
    ) -> Self {
        Self {
            origin_domain,
            subscriber,
            scope,
            policies,
            sequence,
            signature: None,
        }
    }

    fn header_lines(&self) -> Vec<String> {
        vec![
            format!("SUBSCRIBER {}", self.subscriber),
            format!("DOMAIN {}", self.origin_domain),
            format!("SCOPE {}", self.scope),
            format!("SEQ {}", self.sequence),
        ]
    }
}

signed_document!(PolicyTransfer);
signed_document!(RemotePolicyTransfer);

/// Either kind of transfer, as read from an envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transfer {
    Local(PolicyTransfer),
    Remote(RemotePolicyTransfer),
}

impl Transfer {
    pub fn policies(&self) -> &[Policy] {
        match self {
            Transfer::Local(pt) => &pt.policies,
            Transfer::Remote(rpt) => &rpt.policies,
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            Transfer::Local(pt) => pt.to_text(),
            Transfer::Remote(rpt) => rpt.to_text(),
        }
    }
}

/// The local policy set plus every accepted transfer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComposedPolicySet {
    pub local: Vec<Policy>,
    pub accepted_pt: BTreeMap<SubscriberId, PolicyTransfer>,
    pub accepted_rpt: BTreeMap<(DomainId, SubscriberId), RemotePolicyTransfer>,
}

impl ComposedPolicySet {
    pub fn new(local: Vec<Policy>) -> Self {
        Self {
            local,
            ..Self::default()
        }
    }
}
