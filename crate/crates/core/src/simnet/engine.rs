use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::controller::{Controller, ControllerConfig, Report};
use crate::crypto::KeyPair;
use crate::dataplane::{FlowKey, PacketHeader, PipelineVerdict};
use crate::interdomain::{Federation, Inbound, SessionId};
use crate::location::{LocationTicketRequest, LocationZone};
use crate::policy::text::ParseError;
use crate::policy::{decide, Decision, Policy, PolicyTransfer, RemotePolicyTransfer, ServiceAddress};
use crate::simnet::metrics::{Counters, MetricsReport};
use crate::simnet::scenario::{HookAction, Scenario};
use crate::{DomainId, PortId, SubscriberId, SwitchId, Tick};

/// Packets are dropped after this many switch hops.
pub const MAX_HOPS: u32 = 64;
/// How long `run` keeps stepping after its horizon to empty the network.
pub const DRAIN_LIMIT: Tick = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantError {
    #[error("line {line}: {message}")]
    Build { line: usize, message: String },
    #[error("{injected} packets injected but {finished} accounted for and {in_flight} still in flight")]
    Conservation {
        injected: u64,
        finished: u64,
        in_flight: u64,
    },
    #[error("network did not drain within {0} ticks")]
    NoDrain(Tick),
    #[error("{domain}: {message}")]
    Incoherent { domain: DomainId, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("unknown host `{0}`")]
    UnknownHost(String),
}

fn build_err(line: usize, message: impl fmt::Display) -> InvariantError {
    InvariantError::Build {
        line,
        message: message.to_string(),
    }
}

/// Application-level service behind a host, with its own access decisions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataProviderStub {
    /// `None` serves every port.
    pub ports: Option<BTreeSet<u16>>,
    /// Inner PEP; a request is granted when these policies grant it.
    pub policies: Vec<Policy>,
    pub log: Vec<DpRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpRequest {
    pub tick: Tick,
    pub packet: u64,
    pub flow: FlowKey,
    pub granted: bool,
}

impl DataProviderStub {
    pub fn grants(&self, pkt: &PacketHeader) -> bool {
        self.ports.as_ref().is_none_or(|ps| ps.contains(&pkt.dst_port)) && decide(&self.policies, pkt).grants()
    }
}

#[derive(Debug, Clone)]
pub struct SimHost {
    pub name: String,
    pub ip: Ipv4Addr,
    pub key: KeyPair,
    pub domain: DomainId,
    pub switch: SwitchId,
    pub port: PortId,
    pub provider: Option<DataProviderStub>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PortPeer {
    Switch { sw: SwitchId, port: PortId, link: usize },
    Host(usize),
    Spare,
}

#[derive(Debug, Clone)]
struct SwitchInfo {
    name: String,
    domain: DomainId,
    ports: BTreeMap<PortId, PortPeer>,
}

#[derive(Debug, Clone)]
struct Packet {
    id: u64,
    header: PacketHeader,
    src_domain: DomainId,
    dst_domain: Option<DomainId>,
    hops: u32,
}

#[derive(Debug, Clone)]
enum Event {
    /// Packet and sending host; the host's attachment is read when it fires.
    Inject(Packet, usize),
    Hook(HookAction),
}

#[derive(Debug, Clone)]
enum ControlMsg {
    Pt(PolicyTransfer),
    Ltr(LocationTicketRequest, Ipv4Addr),
    Ew(Inbound),
}

#[derive(Debug, Clone)]
struct PacketIn {
    sw: SwitchId,
    port: PortId,
    packet: Packet,
}

#[derive(Debug, Clone)]
struct SubscriberInfo {
    home: DomainId,
    address: ServiceAddress,
    key: KeyPair,
}

/// One control-plane action and what came of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlRecord {
    pub tick: Tick,
    pub domain: DomainId,
    pub kind: &'static str,
    pub outcome: String,
}

impl fmt::Display for ControlRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.tick, self.domain, self.kind, self.outcome)
    }
}

/// Deterministic tick-driven simulation of a federation of SDN domains.
///
/// Each tick runs, in order: scheduled events (hooks, then injections, each
/// in declaration order), east-west deliveries into the receiving
/// controller's application queue, packet arrivals at switches, and finally
/// every controller's message budget. Application messages are served
/// before packet-ins.
#[derive(Debug, Clone)]
pub struct Simulation {
    fed: Federation,
    seed: u64,
    budget: usize,
    domain_keys: BTreeMap<DomainId, KeyPair>,
    switches: Vec<SwitchInfo>,
    switch_by_name: BTreeMap<String, SwitchId>,
    hosts: Vec<SimHost>,
    host_by_name: BTreeMap<String, usize>,
    host_by_ip: BTreeMap<Ipv4Addr, usize>,
    subscribers: BTreeMap<SubscriberId, SubscriberInfo>,
    events: BTreeMap<(Tick, u64), Event>,
    arrivals: BTreeMap<(Tick, u64), (SwitchId, PortId, Packet)>,
    next_seq: u64,
    next_packet: u64,
    app_queues: BTreeMap<DomainId, VecDeque<ControlMsg>>,
    packet_ins: BTreeMap<DomainId, VecDeque<PacketIn>>,
    now: Tick,
    metrics: MetricsReport,
    log: Vec<ControlRecord>,
}

impl Simulation {
    pub fn from_text(text: &str) -> Result<Self, SimError> {
        Ok(Self::build(&Scenario::parse(text)?)?)
    }

    pub fn build(sc: &Scenario) -> Result<Self, InvariantError> {
        let mut fed = Federation::new(sc.latency);
        let mut domain_keys = BTreeMap::new();
        for (d, line) in &sc.domains {
            let key = KeyPair::derive(sc.seed, d.as_str());
            let ctrl = Controller::new(d.clone(), key.clone(), ControllerConfig::default())
                .map_err(|e| build_err(*line, e))?;
            fed.add_controller(ctrl).map_err(|e| build_err(*line, e))?;
            domain_keys.insert(d.clone(), key);
        }
        let mut sim = Simulation {
            fed,
            seed: sc.seed,
            budget: sc.budget,
            domain_keys,
            switches: Vec::new(),
            switch_by_name: BTreeMap::new(),
            hosts: Vec::new(),
            host_by_name: BTreeMap::new(),
            host_by_ip: BTreeMap::new(),
            subscribers: BTreeMap::new(),
            events: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            next_seq: 0,
            next_packet: 1,
            app_queues: BTreeMap::new(),
            packet_ins: BTreeMap::new(),
            now: 0,
            metrics: MetricsReport::default(),
            log: Vec::new(),
        };
        for (d, _) in &sc.domains {
            sim.app_queues.insert(d.clone(), VecDeque::new());
            sim.packet_ins.insert(d.clone(), VecDeque::new());
        }
        sim.build_topology(sc)?;
        sim.build_control(sc)?;
        sim.install_all_routes();
        sim.schedule(sc)?;
        if sc.disable_outer {
            sim.set_outer_enabled(false);
        }
        sim.metrics.link_names = sim.link_names();
        sim.metrics.interdomain = sim.link_interdomain();
        Ok(sim)
    }

    fn build_topology(&mut self, sc: &Scenario) -> Result<(), InvariantError> {
        for (i, decl) in sc.switches.iter().enumerate() {
            let id = SwitchId(i as u32 + 1);
            if self.switch_by_name.insert(decl.name.clone(), id).is_some() {
                return Err(build_err(decl.line, format!("switch `{}` declared twice", decl.name)));
            }
            self.fed
                .controller_mut(&decl.domain)
                .ok_or_else(|| build_err(decl.line, format!("unknown domain `{}`", decl.domain)))?
                .add_switch(id)
                .map_err(|e| build_err(decl.line, e))?;
            self.switches.push(SwitchInfo {
                name: decl.name.clone(),
                domain: decl.domain.clone(),
                ports: BTreeMap::new(),
            });
        }
        for h in &sc.hosts {
            let sw = self.switch_named(&h.switch, h.line)?;
            if self.host_by_name.contains_key(&h.name) {
                return Err(build_err(h.line, format!("host `{}` declared twice", h.name)));
            }
            if self.host_by_ip.contains_key(&h.ip) {
                return Err(build_err(h.line, format!("address {} is used twice", h.ip)));
            }
            let index = self.hosts.len();
            self.claim_port(sw, h.port, PortPeer::Host(index), h.line)?;
            let domain = self.switches[sw.0 as usize - 1].domain.clone();
            self.ctrl(&domain)
                .mark_host_port(sw, h.port)
                .map_err(|e| build_err(h.line, e))?;
            let provider = h.provider.as_ref().map(|ports| DataProviderStub {
                ports: ports.clone(),
                policies: allow_all(),
                log: Vec::new(),
            });
            self.hosts.push(SimHost {
                name: h.name.clone(),
                ip: h.ip,
                key: KeyPair::derive(self.seed, &format!("host:{}", h.name)),
                domain,
                switch: sw,
                port: h.port,
                provider,
            });
            self.host_by_name.insert(h.name.clone(), index);
            self.host_by_ip.insert(h.ip, index);
        }
        for (name, port, line) in &sc.spare_ports {
            let sw = self.switch_named(name, *line)?;
            self.claim_port(sw, *port, PortPeer::Spare, *line)?;
            let domain = self.switches[sw.0 as usize - 1].domain.clone();
            self.ctrl(&domain)
                .mark_host_port(sw, *port)
                .map_err(|e| build_err(*line, e))?;
        }
        for (index, l) in sc.links.iter().enumerate() {
            let a = self.switch_named(&l.a.0, l.line)?;
            let b = self.switch_named(&l.b.0, l.line)?;
            if a == b {
                return Err(build_err(l.line, "a link needs two distinct switches"));
            }
            self.claim_port(
                a,
                l.a.1,
                PortPeer::Switch {
                    sw: b,
                    port: l.b.1,
                    link: index,
                },
                l.line,
            )?;
            self.claim_port(
                b,
                l.b.1,
                PortPeer::Switch {
                    sw: a,
                    port: l.a.1,
                    link: index,
                },
                l.line,
            )?;
            let (da, db) = (self.domain_of(a).clone(), self.domain_of(b).clone());
            if da != db {
                self.ctrl(&da)
                    .mark_interdomain_port(a, l.a.1)
                    .map_err(|e| build_err(l.line, e))?;
                self.ctrl(&db)
                    .mark_interdomain_port(b, l.b.1)
                    .map_err(|e| build_err(l.line, e))?;
            }
        }
        // every domain must be connected on its own links
        for (d, line) in &sc.domains {
            let members: Vec<SwitchId> = (1..=self.switches.len() as u32)
                .map(SwitchId)
                .filter(|s| self.domain_of(*s) == d)
                .collect();
            let Some(&start) = members.first() else {
                continue;
            };
            let reached = self.reachable(start, Some(d));
            if reached.len() != members.len() {
                return Err(build_err(*line, format!("domain {d} is not connected")));
            }
        }
        Ok(())
    }

    fn build_control(&mut self, sc: &Scenario) -> Result<(), InvariantError> {
        for z in &sc.zones {
            let mut ports = Vec::new();
            for (name, port) in &z.ports {
                let sw = self.switch_named(name, z.line)?;
                if self.domain_of(sw) != &z.domain {
                    return Err(build_err(z.line, format!("switch `{name}` is not in {}", z.domain)));
                }
                ports.push((sw, *port));
            }
            let zone = LocationZone {
                id: z.id,
                label: z.label.clone(),
                class: z.class,
            };
            self.fed
                .controller_mut(&z.domain)
                .ok_or_else(|| build_err(z.line, format!("unknown domain `{}`", z.domain)))?
                .geo_mut()
                .add_zone(zone, ports)
                .map_err(|e| build_err(z.line, e))?;
        }
        let domains: Vec<DomainId> = self.domain_keys.keys().cloned().collect();
        for d in &domains {
            let policies = sc.policies.get(d.as_str()).map_or_else(allow_all, |(p, _)| p.clone());
            self.ctrl(d).on_local_policy_change(policies);
        }
        for (key, (policies, line)) in &sc.policies {
            if self.domain_keys.contains_key(&DomainId::new(key.as_str())) {
                continue;
            }
            let stub = self
                .host_by_name
                .get(key)
                .and_then(|&h| self.hosts[h].provider.as_mut())
                .ok_or_else(|| build_err(*line, format!("`{key}` is neither a domain nor a data provider")))?;
            stub.policies = policies.clone();
        }
        self.fed.provision_keys();
        for (a, b, line) in &sc.channels {
            self.fed.connect_domains(a, b).map_err(|e| build_err(*line, e))?;
        }
        for s in &sc.subscribers {
            let key = KeyPair::derive(self.seed, &format!("sub:{}", s.id));
            self.fed
                .announce_subscriber(&s.home, s.id.clone(), s.address.clone(), key.public())
                .map_err(|e| build_err(s.line, e))?;
            self.subscribers.insert(
                s.id.clone(),
                SubscriberInfo {
                    home: s.home.clone(),
                    address: s.address.clone(),
                    key,
                },
            );
        }
        Ok(())
    }

    fn schedule(&mut self, sc: &Scenario) -> Result<(), InvariantError> {
        for h in &sc.hooks {
            self.check_hook(&h.action).map_err(|m| build_err(h.line, m))?;
            self.push_event(h.tick, Event::Hook(h.action.clone()));
        }
        for inj in &sc.injections {
            let dst = match inj.dst.parse::<Ipv4Addr>() {
                Ok(ip) => ip,
                Err(_) => self
                    .host_by_name
                    .get(&inj.dst)
                    .map(|&h| self.hosts[h].ip)
                    .ok_or_else(|| build_err(inj.line, SimError::UnknownHost(inj.dst.clone())))?,
            };
            for k in 0..inj.count {
                let sport = inj.sport.wrapping_add((k % inj.flows) as u16);
                let mut header = PacketHeader::new(Ipv4Addr::UNSPECIFIED, dst, sport, inj.dport, inj.proto);
                if let Some(src) = inj.src {
                    header.src_ip = src;
                }
                self.inject(inj.tick + Tick::from(k) * inj.interval, &inj.host, header)
                    .map_err(|e| build_err(inj.line, e))?;
            }
        }
        Ok(())
    }

    fn check_hook(&self, a: &HookAction) -> Result<(), String> {
        let host = |n: &String| {
            self.host_by_name
                .get(n)
                .map(|_| ())
                .ok_or_else(|| format!("unknown host `{n}`"))
        };
        let domain = |d: &DomainId| {
            self.domain_keys
                .get(d)
                .map(|_| ())
                .ok_or_else(|| format!("unknown domain `{d}`"))
        };
        let sub = |s: &SubscriberId| {
            self.subscribers
                .get(s)
                .map(|_| ())
                .ok_or_else(|| format!("unknown subscriber `{s}`"))
        };
        match a {
            HookAction::Pt { subscriber, .. } => sub(subscriber),
            HookAction::Rpt { subscriber, target, .. } => sub(subscriber).and(domain(target)),
            HookAction::LbacOpen {
                provider,
                requestor,
                subscriber,
                ..
            } => domain(provider).and(domain(requestor)).and(sub(subscriber)),
            HookAction::Move { host: h, switch, .. } => host(h).and(
                self.switch_by_name
                    .get(switch)
                    .map(|_| ())
                    .ok_or_else(|| format!("unknown switch `{switch}`")),
            ),
            HookAction::Pin { host: h } | HookAction::Ltr { host: h, .. } => host(h),
            HookAction::Local { domain: d, .. } => domain(d),
            HookAction::LbacClose { .. } | HookAction::DisableOuter | HookAction::EnableOuter => Ok(()),
        }
    }

    // ---- lookups ----

    fn ctrl(&mut self, d: &DomainId) -> &mut Controller {
        self.fed.controller_mut(d).expect("domains are fixed at build time")
    }

    fn domain_of(&self, sw: SwitchId) -> &DomainId {
        &self.switches[sw.0 as usize - 1].domain
    }

    fn switch_named(&self, name: &str, line: usize) -> Result<SwitchId, InvariantError> {
        self.switch_by_name
            .get(name)
            .copied()
            .ok_or_else(|| build_err(line, format!("unknown switch `{name}`")))
    }

    fn claim_port(&mut self, sw: SwitchId, port: PortId, peer: PortPeer, line: usize) -> Result<(), InvariantError> {
        let info = &mut self.switches[sw.0 as usize - 1];
        if info.ports.insert(port, peer).is_some() {
            return Err(build_err(line, format!("port {}:{} is used twice", info.name, port.0)));
        }
        Ok(())
    }

    /// Switches reachable from `start`, optionally staying inside one domain.
    fn reachable(&self, start: SwitchId, within: Option<&DomainId>) -> BTreeSet<SwitchId> {
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            for peer in self.switches[s.0 as usize - 1].ports.values() {
                if let PortPeer::Switch { sw, .. } = *peer {
                    if within.is_none_or(|d| self.domain_of(sw) == d) && seen.insert(sw) {
                        queue.push_back(sw);
                    }
                }
            }
        }
        seen
    }

    fn link_names(&self) -> Vec<String> {
        let mut names = BTreeMap::new();
        for s in &self.switches {
            for (p, peer) in &s.ports {
                if let PortPeer::Switch { sw, port, link } = *peer {
                    let other = &self.switches[sw.0 as usize - 1].name;
                    names
                        .entry(link)
                        .or_insert_with(|| format!("{}:{}-{}:{}", s.name, p.0, other, port.0));
                }
            }
        }
        names.into_values().collect()
    }

    fn link_interdomain(&self) -> Vec<bool> {
        let mut out = BTreeMap::new();
        for (i, s) in self.switches.iter().enumerate() {
            for peer in s.ports.values() {
                if let PortPeer::Switch { sw, link, .. } = *peer {
                    out.insert(link, *self.domain_of(SwitchId(i as u32 + 1)) != *self.domain_of(sw));
                }
            }
        }
        out.into_values().collect()
    }

    // ---- routing ----

    /// Shortest-path next hops toward every host, installed on every switch.
    fn install_all_routes(&mut self) {
        for h in 0..self.hosts.len() {
            self.route_host(h);
        }
    }

    fn route_host(&mut self, h: usize) {
        let (ip, home, access) = (self.hosts[h].ip, self.hosts[h].switch, self.hosts[h].port);
        let mut next: BTreeMap<SwitchId, PortId> = BTreeMap::from([(home, access)]);
        let mut queue = VecDeque::from([home]);
        while let Some(s) = queue.pop_front() {
            for peer in self.switches[s.0 as usize - 1].ports.values() {
                if let PortPeer::Switch { sw, port, .. } = *peer {
                    // `sw` reaches `s` through its own `port`
                    if let std::collections::btree_map::Entry::Vacant(e) = next.entry(sw) {
                        e.insert(port);
                        queue.push_back(sw);
                    }
                }
            }
        }
        for i in 0..self.switches.len() {
            let sw = SwitchId(i as u32 + 1);
            let domain = self.switches[i].domain.clone();
            let ctrl = self.ctrl(&domain);
            ctrl.remove_route(sw, ip).expect("switch exists");
            if let Some(&port) = next.get(&sw) {
                ctrl.install_route(sw, ip, port).expect("route rules are always valid");
            }
        }
    }

    // ---- scheduling ----

    fn push_event(&mut self, tick: Tick, e: Event) {
        self.events.insert((tick, self.next_seq), e);
        self.next_seq += 1;
    }

    /// Queues one packet from `host` at `tick`. An unspecified source address
    /// is replaced by the host's own. Returns the packet id.
    pub fn inject(&mut self, tick: Tick, host: &str, mut header: PacketHeader) -> Result<u64, SimError> {
        let &h = self
            .host_by_name
            .get(host)
            .ok_or_else(|| SimError::UnknownHost(host.to_owned()))?;
        let src = &self.hosts[h];
        if header.src_ip.is_unspecified() {
            header.src_ip = src.ip;
        }
        let dst_domain = self
            .host_by_ip
            .get(&header.dst_ip)
            .map(|&d| self.hosts[d].domain.clone());
        let packet = Packet {
            id: self.next_packet,
            header,
            src_domain: src.domain.clone(),
            dst_domain,
            hops: 0,
        };
        self.next_packet += 1;
        self.push_event(tick.max(self.now), Event::Inject(packet, h));
        Ok(self.next_packet - 1)
    }

    /// Schedules a hook action at `tick`.
    pub fn schedule_hook(&mut self, tick: Tick, action: HookAction) -> Result<(), SimError> {
        self.check_hook(&action)
            .map_err(|m| SimError::Invariant(build_err(0, m)))?;
        self.push_event(tick.max(self.now), Event::Hook(action));
        Ok(())
    }

    // ---- accessors ----

    pub fn now(&self) -> Tick {
        self.now
    }

    /// Tick of the last scheduled event, 0 when nothing is scheduled.
    pub fn horizon(&self) -> Tick {
        self.events.last_key_value().map_or(0, |((t, _), _)| *t)
    }

    pub fn federation(&self) -> &Federation {
        &self.fed
    }

    pub fn federation_mut(&mut self) -> &mut Federation {
        &mut self.fed
    }

    pub fn controller(&self, d: &DomainId) -> Option<&Controller> {
        self.fed.controller(d)
    }

    pub fn host(&self, name: &str) -> Option<&SimHost> {
        self.host_by_name.get(name).map(|&h| &self.hosts[h])
    }

    pub fn hosts(&self) -> &[SimHost] {
        &self.hosts
    }

    pub fn metrics(&self) -> &MetricsReport {
        &self.metrics
    }

    pub fn log(&self) -> &[ControlRecord] {
        &self.log
    }

    pub fn set_outer_enabled(&mut self, enabled: bool) {
        for c in self.fed.controllers_mut() {
            c.set_enforcement_enabled(enabled);
        }
    }

    /// Packets on links, buffered for a controller, or not yet injected.
    pub fn in_flight(&self) -> u64 {
        let queued: usize = self.packet_ins.values().map(VecDeque::len).sum();
        (self.arrivals.len() + queued) as u64
    }

    // ---- driving ----

    /// Runs every tick up to and including `until`, then keeps stepping
    /// until no packet is left in the network. Checks packet conservation
    /// and controller coherence at the end.
    pub fn run(&mut self, until: Tick) -> Result<MetricsReport, InvariantError> {
        while self.now <= until {
            self.step(true);
        }
        let limit = self.now + DRAIN_LIMIT;
        while self.in_flight() > 0 {
            if self.now >= limit {
                return Err(InvariantError::NoDrain(DRAIN_LIMIT));
            }
            self.step(false);
        }
        self.check()?;
        Ok(self.metrics.clone())
    }

    /// Runs every tick up to and including `until` and stops, leaving
    /// backlogged work where it is.
    pub fn run_until(&mut self, until: Tick) -> &MetricsReport {
        while self.now <= until {
            self.step(true);
        }
        &self.metrics
    }

    pub fn check(&self) -> Result<(), InvariantError> {
        let finished = self.metrics.totals.finished();
        let in_flight = self.in_flight();
        if self.metrics.injected != finished + in_flight {
            return Err(InvariantError::Conservation {
                injected: self.metrics.injected,
                finished,
                in_flight,
            });
        }
        for c in self.fed.controllers() {
            c.check_coherence().map_err(|message| InvariantError::Incoherent {
                domain: c.domain().clone(),
                message,
            })?;
        }
        Ok(())
    }

    fn step(&mut self, take_events: bool) {
        let t = self.now;
        self.fed.advance_to(t);
        let mut row = Counters::with_links(self.metrics.link_names.len());
        if take_events {
            while let Some(entry) = self.events.first_entry() {
                if entry.key().0 > t {
                    break;
                }
                match entry.remove() {
                    Event::Inject(packet, h) => {
                        let (sw, port) = (self.hosts[h].switch, self.hosts[h].port);
                        self.metrics.injected += 1;
                        self.arrivals.insert((t, self.next_seq), (sw, port, packet));
                        self.next_seq += 1;
                    }
                    Event::Hook(action) => self.run_hook(action),
                }
            }
        }
        for inbound in self.fed.take_due(t) {
            if let Some(q) = self.app_queues.get_mut(&inbound.to) {
                q.push_back(ControlMsg::Ew(inbound));
            }
        }
        while let Some(entry) = self.arrivals.first_entry() {
            if entry.key().0 > t {
                break;
            }
            let (sw, port, packet) = entry.remove();
            self.arrive(sw, port, packet, &mut row);
        }
        let domains: Vec<DomainId> = self.domain_keys.keys().cloned().collect();
        for d in &domains {
            self.serve(d, &mut row);
        }
        self.metrics.totals += &row;
        self.metrics.rows.push((t, row));
        self.now += 1;
    }

    fn serve(&mut self, d: &DomainId, row: &mut Counters) {
        for _ in 0..self.budget {
            if let Some(msg) = self.app_queues.get_mut(d).and_then(VecDeque::pop_front) {
                self.control(d, msg);
            } else if let Some(pi) = self.packet_ins.get_mut(d).and_then(VecDeque::pop_front) {
                let mut header = pi.packet.header;
                header.in_port = pi.port;
                match self.fed.handle_packet_in(d, pi.sw, pi.port, &header) {
                    Ok(out) => self.apply(pi.sw, out.verdict, pi.packet, row),
                    Err(e) => {
                        self.record(d, "packet-in", e.to_string());
                        self.drop_at(pi.sw, &pi.packet, row);
                    }
                }
                row.packet_in_handled += 1;
            } else {
                break;
            }
            row.controller_msgs_processed += 1;
        }
    }

    fn record(&mut self, d: &DomainId, kind: &'static str, outcome: String) {
        self.log.push(ControlRecord {
            tick: self.now,
            domain: d.clone(),
            kind,
            outcome,
        });
    }

    fn control(&mut self, d: &DomainId, msg: ControlMsg) {
        match msg {
            ControlMsg::Pt(pt) => {
                let r = self.ctrl(d).receive_pt(&pt);
                self.record(d, "pt", Report::from_result(&r).to_string());
            }
            ControlMsg::Ltr(ltr, observed) => {
                let out = match self.ctrl(d).issue_ticket(&ltr, observed) {
                    Ok(lt) => lt.to_string(),
                    Err(e) => format!("REJECT {}", e.reason()),
                };
                self.record(d, "ltr", out);
            }
            ControlMsg::Ew(inbound) => {
                let delivery = self.fed.handle_inbound(inbound);
                let kind = delivery.kind.map_or("?".to_owned(), |k| k.to_string());
                let from = delivery.from.as_ref().map_or("?".to_owned(), ToString::to_string);
                let what = if delivery.relayed { "relay" } else { "deliver" };
                self.record(d, "ew", format!("{what} {kind} from {from}: {}", delivery.report));
            }
        }
    }

    fn run_hook(&mut self, action: HookAction) {
        match action {
            HookAction::Pt {
                subscriber,
                seq,
                policies,
            } => {
                let info = &self.subscribers[&subscriber];
                let pt = PolicyTransfer::new(subscriber.clone(), seq, policies).signed(&info.key);
                let home = info.home.clone();
                if let Some(q) = self.app_queues.get_mut(&home) {
                    q.push_back(ControlMsg::Pt(pt));
                }
            }
            HookAction::Rpt {
                subscriber,
                target,
                seq,
                policies,
            } => {
                let info = &self.subscribers[&subscriber];
                let home = info.home.clone();
                let rpt = RemotePolicyTransfer::new(home.clone(), subscriber, info.address.clone(), seq, policies)
                    .signed(&self.domain_keys[&home]);
                let out = match self.fed.send_rpt(&home, &target, &rpt, None) {
                    Ok(r) => format!("sent to {target} seq {} due {}", r.seq, r.due),
                    Err(e) => e.to_string(),
                };
                self.record(&home, "rpt", out);
            }
            HookAction::LbacOpen {
                provider,
                requestor,
                subscriber,
                zones,
            } => {
                let out = match self.fed.start_lbac_session(&provider, &requestor, subscriber, zones) {
                    Ok(id) => format!("session {id} proposed"),
                    Err(e) => e.to_string(),
                };
                self.record(&requestor, "lbac-open", out);
            }
            HookAction::LbacClose { session } => {
                let id = SessionId(session);
                let requestor = self.fed.session(id).map(|s| s.requestor.clone());
                let out = match self.fed.teardown(id) {
                    Ok(()) => format!("session {id} closed"),
                    Err(e) => e.to_string(),
                };
                let d = requestor.unwrap_or_else(|| DomainId::new("-"));
                self.record(&d, "lbac-close", out);
            }
            HookAction::Move { host, switch, port } => self.move_host(&host, &switch, port),
            HookAction::Pin { host } => {
                let h = &self.hosts[self.host_by_name[&host]];
                let (ip, sw, port, d) = (h.ip, h.switch, h.port, h.domain.clone());
                let out = match self.ctrl(&d).pin_port(ip, sw, port) {
                    Ok(n) => format!("{host} pinned with {n} rules"),
                    Err(e) => format!("REJECT {}", e.reason()),
                };
                self.record(&d, "pin", out);
            }
            HookAction::Ltr { host, count, claim } => {
                let h = &self.hosts[self.host_by_name[&host]];
                let ltr = LocationTicketRequest::new(claim.unwrap_or(h.ip), &h.key, self.now);
                let (ip, d) = (h.ip, h.domain.clone());
                if let Some(q) = self.app_queues.get_mut(&d) {
                    for _ in 0..count {
                        q.push_back(ControlMsg::Ltr(ltr.clone(), ip));
                    }
                }
            }
            HookAction::Local { domain, policies } => {
                let evicted = self.ctrl(&domain).on_local_policy_change(policies);
                let out = format!("{} transfers evicted", evicted.len());
                self.record(&domain, "local", out);
            }
            HookAction::DisableOuter => self.set_outer_enabled(false),
            HookAction::EnableOuter => self.set_outer_enabled(true),
        }
    }

    fn move_host(&mut self, host: &str, switch: &str, port: PortId) {
        let h = self.host_by_name[host];
        let sw = self.switch_by_name[switch];
        let d = self.hosts[h].domain.clone();
        let target = &mut self.switches[sw.0 as usize - 1];
        if target.domain != d || target.ports.get(&port) != Some(&PortPeer::Spare) {
            self.record(
                &d,
                "move",
                format!("{switch}:{} is not a free access port in {d}", port.0),
            );
            return;
        }
        target.ports.insert(port, PortPeer::Host(h));
        let (old_sw, old_port) = (self.hosts[h].switch, self.hosts[h].port);
        self.switches[old_sw.0 as usize - 1]
            .ports
            .insert(old_port, PortPeer::Spare);
        self.hosts[h].switch = sw;
        self.hosts[h].port = port;
        self.route_host(h);
        self.record(&d, "move", format!("{host} now at {switch}:{}", port.0));
    }

    // ---- data plane ----

    fn arrive(&mut self, sw: SwitchId, port: PortId, mut packet: Packet, row: &mut Counters) {
        packet.hops += 1;
        if packet.hops > MAX_HOPS {
            row.dropped_in_transit += 1;
            let d = self.domain_of(sw).clone();
            *self.metrics.drops_by_domain.entry(d).or_default() += 1;
            return;
        }
        packet.header.in_port = port;
        let d = self.domain_of(sw).clone();
        match self.ctrl(&d).process_packet(sw, &packet.header) {
            Ok(PipelineVerdict::SendToController) => {
                row.packet_in_count += 1;
                if let Some(q) = self.packet_ins.get_mut(&d) {
                    q.push_back(PacketIn { sw, port, packet });
                }
            }
            Ok(verdict) => self.apply(sw, verdict, packet, row),
            Err(e) => {
                self.record(&d, "pipeline", e.to_string());
                self.drop_at(sw, &packet, row);
            }
        }
    }

    fn apply(&mut self, sw: SwitchId, verdict: PipelineVerdict, packet: Packet, row: &mut Counters) {
        let PipelineVerdict::Forward(out) = verdict else {
            self.drop_at(sw, &packet, row);
            return;
        };
        match self.switches[sw.0 as usize - 1].ports.get(&out).copied() {
            Some(PortPeer::Switch { sw: next, port, link }) => {
                row.link_bytes[link] += 1;
                self.arrivals
                    .insert((self.now + 1, self.next_seq), (next, port, packet));
                self.next_seq += 1;
            }
            Some(PortPeer::Host(h)) if self.hosts[h].ip == packet.header.dst_ip => self.deliver(h, &packet, row),
            _ => self.drop_at(sw, &packet, row),
        }
    }

    fn deliver(&mut self, h: usize, packet: &Packet, row: &mut Counters) {
        let now = self.now;
        let host = &mut self.hosts[h];
        let Some(stub) = host.provider.as_mut() else {
            row.delivered += 1;
            return;
        };
        let granted = stub.grants(&packet.header);
        stub.log.push(DpRequest {
            tick: now,
            packet: packet.id,
            flow: packet.header.flow_key(),
            granted,
        });
        if granted {
            row.delivered += 1;
            self.metrics.dp_grants.insert(packet.id);
        } else {
            row.dropped_at_dp_app += 1;
            let d = host.domain.clone();
            *self.metrics.drops_by_domain.entry(d).or_default() += 1;
        }
    }

    /// Counts a drop by where it happened: in the sender's domain, the
    /// destination's domain, or somewhere in between.
    fn drop_at(&mut self, sw: SwitchId, packet: &Packet, row: &mut Counters) {
        let d = self.domain_of(sw).clone();
        if d == packet.src_domain {
            row.dropped_at_source_edge += 1;
        } else if Some(&d) == packet.dst_domain.as_ref() {
            row.dropped_at_dp_network += 1;
        } else {
            row.dropped_in_transit += 1;
        }
        *self.metrics.drops_by_domain.entry(d).or_default() += 1;
    }
}

/// Parses, builds and runs a scenario in one go.
pub fn run_scenario(text: &str, until: Tick, disable_outer: bool) -> Result<(Simulation, MetricsReport), SimError> {
    let mut sim = Simulation::from_text(text)?;
    if disable_outer {
        sim.set_outer_enabled(false);
    }
    let report = sim.run(until)?;
    Ok((sim, report))
}

/// Inner PEP default for a provider with no policy section.
pub fn allow_all() -> Vec<Policy> {
    vec![Policy::new(0, Decision::Allow, Default::default())]
}
