use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::dataplane::{PacketHeader, Protocol};
use crate::policy::{Policy, ServiceAddress};

pub const DEFAULT_UNIVERSE_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UniverseError {
    #[error("header universe has {size} packets, cap is {cap}")]
    TooLarge { size: u64, cap: u64 },
    #[error("header universe has an empty dimension: {0}")]
    Empty(&'static str),
}

/// Finite header space over which transfers are checked.
///
/// `in_port` and `eth_src` are not enumerated; policies only constrain the
/// transport 5-tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeaderUniverse {
    pub src_ips: BTreeSet<Ipv4Addr>,
    pub dst_ips: BTreeSet<Ipv4Addr>,
    pub src_ports: BTreeSet<u16>,
    pub dst_ports: BTreeSet<u16>,
    pub protocols: BTreeSet<Protocol>,
    pub cap: u64,
}

impl HeaderUniverse {
    /// Every host as both source and destination, every port as both source
    /// and destination port.
    pub fn symmetric(
        hosts: impl IntoIterator<Item = Ipv4Addr>,
        ports: impl IntoIterator<Item = u16>,
        protocols: impl IntoIterator<Item = Protocol>,
    ) -> Self {
        let hosts: BTreeSet<_> = hosts.into_iter().collect();
        let ports: BTreeSet<_> = ports.into_iter().collect();
        Self {
            src_ips: hosts.clone(),
            dst_ips: hosts,
            src_ports: ports.clone(),
            dst_ports: ports,
            protocols: protocols.into_iter().collect(),
            cap: DEFAULT_UNIVERSE_CAP,
        }
    }

    pub fn size(&self) -> u64 {
        [
            self.src_ips.len(),
            self.dst_ips.len(),
            self.src_ports.len(),
            self.dst_ports.len(),
            self.protocols.len(),
        ]
        .iter()
        .fold(1u64, |acc, &n| acc.saturating_mul(n as u64))
    }

    pub fn check(&self) -> Result<(), UniverseError> {
        let dims = [
            ("src", self.src_ips.is_empty()),
            ("dst", self.dst_ips.is_empty()),
            ("sport", self.src_ports.is_empty()),
            ("dport", self.dst_ports.is_empty()),
            ("proto", self.protocols.is_empty()),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, empty)| *empty) {
            return Err(UniverseError::Empty(name));
        }
        let size = self.size();
        if size > self.cap {
            return Err(UniverseError::TooLarge { size, cap: self.cap });
        }
        Ok(())
    }

    /// Adds a service's address as source and destination and its ports as
    /// destination ports.
    pub fn add_service(&mut self, a: &ServiceAddress) {
        self.src_ips.insert(a.ip);
        self.dst_ips.insert(a.ip);
        if let Some(ps) = &a.ports {
            self.dst_ports.extend(ps);
        }
    }

    /// Puts a placeholder value (`0.0.0.0` or port 0) into every empty
    /// address or port dimension.
    pub fn fill_empty(&mut self) {
        for ips in [&mut self.src_ips, &mut self.dst_ips] {
            if ips.is_empty() {
                ips.insert(Ipv4Addr::UNSPECIFIED);
            }
        }
        for ports in [&mut self.src_ports, &mut self.dst_ports] {
            if ports.is_empty() {
                ports.insert(0);
            }
        }
    }

    pub fn contains(&self, pkt: &PacketHeader) -> bool {
        self.src_ips.contains(&pkt.src_ip)
            && self.dst_ips.contains(&pkt.dst_ip)
            && self.src_ports.contains(&pkt.src_port)
            && self.dst_ports.contains(&pkt.dst_port)
            && self.protocols.contains(&pkt.protocol)
    }

    /// Adds every exact host address and port named by `policies`, so that
    /// each policy's boundary values are represented.
    pub fn refined_with<'a>(&self, policies: impl IntoIterator<Item = &'a Policy>) -> Self {
        let mut u = self.clone();
        for p in policies {
            let m = &p.match_fields;
            if let Some(n) = m.src_ip.filter(|n| n.prefix_len() == 32) {
                u.src_ips.insert(n.addr());
            }
            if let Some(n) = m.dst_ip.filter(|n| n.prefix_len() == 32) {
                u.dst_ips.insert(n.addr());
            }
            if let Some(port) = m.src_port {
                u.src_ports.insert(port);
            }
            if let Some(port) = m.dst_port {
                u.dst_ports.insert(port);
            }
            if let Some(proto) = m.protocol {
                u.protocols.insert(proto);
            }
        }
        u
    }

    /// Deterministic enumeration, lexicographic in (src, dst, sport, dport,
    /// proto).
    pub fn packets(&self) -> impl Iterator<Item = PacketHeader> + '_ {
        self.src_ips.iter().flat_map(move |&src| {
            self.dst_ips.iter().flat_map(move |&dst| {
                self.src_ports.iter().flat_map(move |&sport| {
                    self.dst_ports.iter().flat_map(move |&dport| {
                        self.protocols
                            .iter()
                            .map(move |&proto| PacketHeader::new(src, dst, sport, dport, proto))
                    })
                })
            })
        })
    }
}
