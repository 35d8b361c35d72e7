use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use ipnet::Ipv4Net;

use crate::PortId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Tcp, Protocol::Udp, Protocol::Icmp];
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
            Protocol::Icmp => "icmp",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tcp" => Ok(Protocol::Tcp),
            "udp" => Ok(Protocol::Udp),
            "icmp" => Ok(Protocol::Icmp),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

/// The header fields a switch can match on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PacketHeader {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub in_port: PortId,
    /// 48-bit hardware address.
    pub eth_src: u64,
}

impl PacketHeader {
    pub fn new(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, src_port: u16, dst_port: u16, protocol: Protocol) -> Self {
        Self {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            protocol,
            in_port: PortId(0),
            eth_src: 0,
        }
    }

    pub fn with_in_port(mut self, port: PortId) -> Self {
        self.in_port = port;
        self
    }

    pub fn flow_key(&self) -> FlowKey {
        FlowKey {
            src_ip: self.src_ip,
            dst_ip: self.dst_ip,
            src_port: self.src_port,
            dst_port: self.dst_port,
            protocol: self.protocol,
        }
    }
}

/// Transport 5-tuple identifying a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}->{}:{}/{}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol
        )
    }
}

impl FromStr for FlowKey {
    type Err = String;

    /// Parses `src:sport->dst:dport/proto`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("malformed 5-tuple `{s}`");
        let (src, rest) = s.split_once("->").ok_or_else(bad)?;
        let (dst, proto) = rest.split_once('/').ok_or_else(bad)?;
        let (src_ip, src_port) = src.split_once(':').ok_or_else(bad)?;
        let (dst_ip, dst_port) = dst.split_once(':').ok_or_else(bad)?;
        Ok(FlowKey {
            src_ip: src_ip.parse().map_err(|_| bad())?,
            dst_ip: dst_ip.parse().map_err(|_| bad())?,
            src_port: src_port.parse().map_err(|_| bad())?,
            dst_port: dst_port.parse().map_err(|_| bad())?,
            protocol: proto.parse()?,
        })
    }
}

impl From<FlowKey> for PacketHeader {
    fn from(k: FlowKey) -> Self {
        PacketHeader::new(k.src_ip, k.dst_ip, k.src_port, k.dst_port, k.protocol)
    }
}

/// One optional predicate per header field; `None` is a wildcard.
///
/// Both IP fields take a prefix so that complements ("every source except
/// these hosts") can be expressed as a finite set of rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MatchFields {
    pub src_ip: Option<Ipv4Net>,
    pub dst_ip: Option<Ipv4Net>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub protocol: Option<Protocol>,
    pub in_port: Option<PortId>,
    pub eth_src: Option<u64>,
}

pub fn host_net(ip: Ipv4Addr) -> Ipv4Net {
    Ipv4Net::new(ip, 32).expect("/32 is always valid")
}

impl MatchFields {
    pub fn any() -> Self {
        Self::default()
    }

    /// Exact match on the 5-tuple of `key`.
    pub fn exact(key: FlowKey) -> Self {
        Self {
            src_ip: Some(host_net(key.src_ip)),
            dst_ip: Some(host_net(key.dst_ip)),
            src_port: Some(key.src_port),
            dst_port: Some(key.dst_port),
            protocol: Some(key.protocol),
            in_port: None,
            eth_src: None,
        }
    }

    pub fn src(mut self, net: Ipv4Net) -> Self {
        self.src_ip = Some(net);
        self
    }

    pub fn src_host(self, ip: Ipv4Addr) -> Self {
        self.src(host_net(ip))
    }

    pub fn dst(mut self, net: Ipv4Net) -> Self {
        self.dst_ip = Some(net);
        self
    }

    pub fn dst_host(self, ip: Ipv4Addr) -> Self {
        self.dst(host_net(ip))
    }

    pub fn sport(mut self, port: u16) -> Self {
        self.src_port = Some(port);
        self
    }

    pub fn dport(mut self, port: u16) -> Self {
        self.dst_port = Some(port);
        self
    }

    pub fn proto(mut self, protocol: Protocol) -> Self {
        self.protocol = Some(protocol);
        self
    }

    pub fn on_port(mut self, port: PortId) -> Self {
        self.in_port = Some(port);
        self
    }

    pub fn matches(&self, pkt: &PacketHeader) -> bool {
        self.src_ip.is_none_or(|n| n.contains(&pkt.src_ip))
            && self.dst_ip.is_none_or(|n| n.contains(&pkt.dst_ip))
            && self.src_port.is_none_or(|p| p == pkt.src_port)
            && self.dst_port.is_none_or(|p| p == pkt.dst_port)
            && self.protocol.is_none_or(|p| p == pkt.protocol)
            && self.in_port.is_none_or(|p| p == pkt.in_port)
            && self.eth_src.is_none_or(|e| e == pkt.eth_src)
    }

    /// The flow key if this match pins the 5-tuple exactly and nothing else.
    pub fn as_exact_flow(&self) -> Option<FlowKey> {
        if self.in_port.is_some() || self.eth_src.is_some() {
            return None;
        }
        let src = self.src_ip.filter(|n| n.prefix_len() == 32)?;
        let dst = self.dst_ip.filter(|n| n.prefix_len() == 32)?;
        Some(FlowKey {
            src_ip: src.addr(),
            dst_ip: dst.addr(),
            src_port: self.src_port?,
            dst_port: self.dst_port?,
            protocol: self.protocol?,
        })
    }
}
