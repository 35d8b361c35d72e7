use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;

use crate::dataplane::MatchFields;
use crate::location::ZoneId;
use crate::policy::{Policy, ServiceAddress};
use crate::{DomainId, SubscriberId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Proposed,
    Active,
    TornDown,
}

/// Real-time location-based access session between a data provider's
/// domain and a requesting domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LbacSession {
    pub id: SessionId,
    pub provider: DomainId,
    pub requestor: DomainId,
    pub subscriber: SubscriberId,
    /// Requestor zones whose hosts may reach the subscriber.
    pub allowed_zones: BTreeSet<ZoneId>,
    /// Host locations last reported by the requestor.
    pub bindings: BTreeSet<(Ipv4Addr, ZoneId)>,
    /// Hosts exempted by the most recent RPT the provider issued.
    pub bound_hosts: BTreeSet<Ipv4Addr>,
    pub state: SessionState,
    /// Reason of the most recent rejection at the requestor, if any.
    pub last_error: Option<String>,
}

impl LbacSession {
    pub fn permitted_hosts(&self) -> BTreeSet<Ipv4Addr> {
        self.bindings
            .iter()
            .filter(|(_, z)| self.allowed_zones.contains(z))
            .map(|(ip, _)| *ip)
            .collect()
    }
}

/// Prefixes covering every IPv4 address except `hosts`, in address order.
pub fn complement_cover(hosts: &BTreeSet<Ipv4Addr>) -> Vec<Ipv4Net> {
    fn walk(net: Ipv4Net, hosts: &BTreeSet<Ipv4Addr>, out: &mut Vec<Ipv4Net>) {
        let mut inside = hosts.range(net.network()..=net.broadcast());
        if inside.next().is_none() {
            out.push(net);
            return;
        }
        if net.prefix_len() == 32 {
            return;
        }
        for half in net.subnets(net.prefix_len() + 1).expect("prefix below 32") {
            walk(half, hosts, out);
        }
    }
    let mut out = Vec::new();
    walk(Ipv4Net::default(), hosts, &mut out);
    out
}

/// "Deny everything toward `scope` except from `permitted`", one policy
/// per cover prefix and service port.
pub fn lbac_policies(permitted: &BTreeSet<Ipv4Addr>, scope: &ServiceAddress) -> Vec<Policy> {
    let ports: Vec<Option<u16>> = match &scope.ports {
        None => vec![None],
        Some(ps) => ps.iter().copied().map(Some).collect(),
    };
    let mut out = Vec::new();
    for net in complement_cover(permitted) {
        for &port in &ports {
            let m = MatchFields {
                src_ip: (net.prefix_len() > 0).then_some(net),
                dst_port: port,
                ..MatchFields::any().dst_host(scope.ip)
            };
            out.push(Policy::deny(1, m));
        }
    }
    out
}
