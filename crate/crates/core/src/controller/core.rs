use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::controller::TokenBucket;
use crate::crypto::{KeyPair, PublicKey};
use crate::dataplane::{
    FlowTablePipeline, MatchFields, Origin, OriginFilter, PacketHeader, PipelineError, PipelineVerdict, RuleAction,
    RuleId, RuleSpec,
};
use crate::location::{
    issue_ticket, GeoError, GeoLocationTable, Issuer, LocationTicket, LocationTicketRequest, Sighting, TicketError,
    LTR_FRESHNESS,
};
use crate::policy::{
    check_freshness, compile_transfer, decide, validate_pt, validate_rpt, CompileError, ComposedPolicySet,
    HeaderUniverse, Outcome, Policy, PolicyTransfer, RemotePolicyTransfer, ServiceAddress, ValidationError,
};
use crate::{DomainId, PortId, SubscriberId, SwitchId, Tick};

/// Table layout of every switch a controller manages.
pub const TABLE_INGRESS: usize = 0;
pub const TABLE_ACL: usize = 1;
pub const TABLE_ROUTING: usize = 2;
pub const DEFAULT_TABLES: usize = 4;

const PRIO_REACTIVE: u16 = 100;
const PRIO_ROUTE: u16 = 100;
const PRIO_PIN_ALLOW: u16 = 300;
const PRIO_PIN_SPOOF: u16 = 250;
const PRIO_PIN_PORT: u16 = 200;

/// Which switches receive a transfer's rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    AllSwitches,
    /// Switches with at least one host-facing or inter-domain port.
    EdgeOnly,
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    /// At least 4: ingress, ACL, routing, enforcement.
    pub tables: usize,
    pub pt_placement: Placement,
    pub rpt_placement: Placement,
    pub bucket_capacity: u64,
    pub refill_per_tick: u64,
    pub ltr_freshness: Tick,
    /// Base header universe for validation. Registered service addresses
    /// are added to it automatically.
    pub universe: HeaderUniverse,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let mut universe = HeaderUniverse::symmetric([], [], crate::dataplane::Protocol::ALL);
        universe.src_ports.insert(1024);
        Self {
            tables: DEFAULT_TABLES,
            pt_placement: Placement::AllSwitches,
            rpt_placement: Placement::EdgeOnly,
            bucket_capacity: super::bucket::DEFAULT_BUCKET_CAPACITY,
            refill_per_tick: super::bucket::DEFAULT_REFILL_PER_TICK,
            ltr_freshness: LTR_FRESHNESS,
            universe,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubscriberKind {
    LocalApp,
    RemoteDomainApp(DomainId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscriber {
    pub id: SubscriberId,
    pub service_address: ServiceAddress,
    /// Verifies PTs. Remote subscribers' RPTs are verified with their
    /// domain's key instead.
    pub key: PublicKey,
    pub kind: SubscriberKind,
}

/// Names one accepted transfer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransferRef {
    Local(SubscriberId),
    Remote(DomainId, SubscriberId),
}

impl TransferRef {
    pub fn origin(&self) -> Origin {
        match self {
            TransferRef::Local(s) => Origin::LocalPt(s.clone()),
            TransferRef::Remote(d, s) => Origin::RemoteRpt(d.clone(), s.clone()),
        }
    }
}

impl fmt::Display for TransferRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.origin().fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControllerError {
    #[error("unknown switch {0}")]
    UnknownSwitch(SwitchId),
    #[error("unknown subscriber {0}")]
    UnknownSubscriber(String),
    #[error("no key on file for domain {0}")]
    UnknownPeer(DomainId),
    #[error("service address {0} is already claimed")]
    DuplicateAddress(Ipv4Addr),
    #[error("subscriber {0} is already registered")]
    DuplicateSubscriber(String),
    #[error("transfer rate limit exceeded")]
    RateLimited,
    #[error("transfer scope {claimed} differs from registered {registered}")]
    ScopeMismatch {
        registered: ServiceAddress,
        claimed: ServiceAddress,
    },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("no accepted transfer {0}")]
    NotFound(TransferRef),
    #[error("{0} is not attached at the given port")]
    NotAttached(Ipv4Addr),
    #[error(transparent)]
    Ticket(#[from] TicketError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("controller needs at least {DEFAULT_TABLES} tables, got {0}")]
    TooFewTables(usize),
}

impl ControllerError {
    /// Short reason token used in reports.
    pub fn reason(&self) -> &'static str {
        match self {
            ControllerError::UnknownSwitch(_) => "UnknownSwitch",
            ControllerError::UnknownSubscriber(_) => "UnknownSubscriber",
            ControllerError::UnknownPeer(_) => "UnknownPeer",
            ControllerError::DuplicateAddress(_) => "DuplicateAddress",
            ControllerError::DuplicateSubscriber(_) => "DuplicateSubscriber",
            ControllerError::RateLimited => "RateLimited",
            ControllerError::ScopeMismatch { .. } => "ScopeViolation",
            ControllerError::Validation(v) => v.reason(),
            ControllerError::Compile(_) => "BandOverflow",
            ControllerError::Pipeline(_) => "PipelineError",
            ControllerError::NotFound(_) => "NotFound",
            ControllerError::NotAttached(_) => "NotAttached",
            ControllerError::Ticket(t) => t.reason(),
            ControllerError::Geo(_) => "UnmappedPort",
            ControllerError::TooFewTables(_) => "TooFewTables",
        }
    }
}

/// Result of an accepted transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accepted {
    /// Rules per switch.
    pub rules: usize,
    pub switches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketInOutcome {
    pub verdict: PipelineVerdict,
    /// PDP decision cached in the reactive rule, if one was installed.
    pub decision: Option<Outcome>,
    pub sighting: Option<Sighting>,
}

/// An accepted transfer that stopped validating after a local change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Eviction {
    pub transfer: TransferRef,
    pub error: ValidationError,
}

#[derive(Debug, Clone)]
struct Switch {
    pipeline: FlowTablePipeline,
    host_ports: BTreeSet<PortId>,
    interdomain_ports: BTreeSet<PortId>,
}

impl Switch {
    fn is_edge(&self) -> bool {
        !self.host_ports.is_empty() || !self.interdomain_ports.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Pin {
    at: (SwitchId, PortId),
    rules: Vec<(SwitchId, RuleId)>,
}

/// Control plane of one domain: policy repository, PDP, subscriber
/// registry, location tracking and the enforcement application.
#[derive(Debug, Clone)]
pub struct Controller {
    domain: DomainId,
    key: KeyPair,
    config: ControllerConfig,
    now: Tick,
    switches: BTreeMap<SwitchId, Switch>,
    repo: ComposedPolicySet,
    local_subs: BTreeMap<SubscriberId, Subscriber>,
    remote_subs: BTreeMap<(DomainId, SubscriberId), Subscriber>,
    last_seq: BTreeMap<TransferRef, u64>,
    geo: GeoLocationTable,
    peer_keys: BTreeMap<DomainId, PublicKey>,
    limiter: TokenBucket,
    pins: BTreeMap<Ipv4Addr, Pin>,
    validations: u64,
    enforcement_enabled: bool,
}

impl Controller {
    pub fn new(domain: DomainId, key: KeyPair, config: ControllerConfig) -> Result<Self, ControllerError> {
        if config.tables < DEFAULT_TABLES {
            return Err(ControllerError::TooFewTables(config.tables));
        }
        Ok(Self {
            domain,
            key,
            limiter: TokenBucket::new(config.bucket_capacity, config.refill_per_tick),
            config,
            now: 0,
            switches: BTreeMap::new(),
            repo: ComposedPolicySet::default(),
            local_subs: BTreeMap::new(),
            remote_subs: BTreeMap::new(),
            last_seq: BTreeMap::new(),
            geo: GeoLocationTable::new(),
            peer_keys: BTreeMap::new(),
            pins: BTreeMap::new(),
            validations: 0,
            enforcement_enabled: true,
        })
    }

    pub fn domain(&self) -> &DomainId {
        &self.domain
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public()
    }

    pub(crate) fn key_pair(&self) -> &KeyPair {
        &self.key
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    /// Advances the controller clock. Earlier ticks are ignored.
    pub fn advance_to(&mut self, now: Tick) {
        self.now = self.now.max(now);
        self.limiter.refill(self.now);
    }

    pub fn limiter(&self) -> &TokenBucket {
        &self.limiter
    }

    /// How many times the non-violation oracle has run.
    pub fn validations(&self) -> u64 {
        self.validations
    }

    pub fn repo(&self) -> &ComposedPolicySet {
        &self.repo
    }

    pub fn local_policies(&self) -> &[Policy] {
        &self.repo.local
    }

    pub fn geo(&self) -> &GeoLocationTable {
        &self.geo
    }

    pub fn geo_mut(&mut self) -> &mut GeoLocationTable {
        &mut self.geo
    }

    fn last_table(&self) -> usize {
        self.config.tables - 1
    }

    // ---- topology ----

    /// Adds a switch with the fixed table layout: ingress passes everything
    /// to the ACL table, routing drops unknown destinations.
    pub fn add_switch(&mut self, id: SwitchId) -> Result<(), ControllerError> {
        let mut pipeline = FlowTablePipeline::new(self.config.tables)?;
        pipeline.install_rule(RuleSpec::core(
            TABLE_INGRESS,
            0,
            MatchFields::any(),
            RuleAction::GotoTable(TABLE_ACL),
        ))?;
        pipeline.install_rule(RuleSpec::core(TABLE_ROUTING, 0, MatchFields::any(), RuleAction::Drop))?;
        pipeline.set_enforcement_enabled(self.enforcement_enabled);
        self.switches.insert(
            id,
            Switch {
                pipeline,
                host_ports: BTreeSet::new(),
                interdomain_ports: BTreeSet::new(),
            },
        );
        Ok(())
    }

    fn switch_mut(&mut self, id: SwitchId) -> Result<&mut Switch, ControllerError> {
        self.switches.get_mut(&id).ok_or(ControllerError::UnknownSwitch(id))
    }

    pub fn mark_host_port(&mut self, sw: SwitchId, port: PortId) -> Result<(), ControllerError> {
        self.switch_mut(sw)?.host_ports.insert(port);
        Ok(())
    }

    pub fn mark_interdomain_port(&mut self, sw: SwitchId, port: PortId) -> Result<(), ControllerError> {
        self.switch_mut(sw)?.interdomain_ports.insert(port);
        Ok(())
    }

    pub fn install_route(&mut self, sw: SwitchId, dst: Ipv4Addr, port: PortId) -> Result<RuleId, ControllerError> {
        let spec = RuleSpec::core(
            TABLE_ROUTING,
            PRIO_ROUTE,
            MatchFields::any().dst_host(dst),
            RuleAction::Forward(port),
        );
        Ok(self.switch_mut(sw)?.pipeline.install_rule(spec)?)
    }

    /// Removes the route toward `dst` from `sw`; returns the rule count.
    pub fn remove_route(&mut self, sw: SwitchId, dst: Ipv4Addr) -> Result<usize, ControllerError> {
        let m = MatchFields::any().dst_host(dst);
        Ok(self
            .switch_mut(sw)?
            .pipeline
            .remove_rules_where(|r| r.table_index == TABLE_ROUTING && r.priority == PRIO_ROUTE && r.match_fields == m))
    }

    pub fn switch_ids(&self) -> impl Iterator<Item = SwitchId> + '_ {
        self.switches.keys().copied()
    }

    pub fn has_switch(&self, sw: SwitchId) -> bool {
        self.switches.contains_key(&sw)
    }

    pub fn is_edge(&self, sw: SwitchId) -> bool {
        self.switches.get(&sw).is_some_and(Switch::is_edge)
    }

    pub fn is_host_port(&self, sw: SwitchId, port: PortId) -> bool {
        self.switches.get(&sw).is_some_and(|s| s.host_ports.contains(&port))
    }

    pub fn pipeline(&self, sw: SwitchId) -> Option<&FlowTablePipeline> {
        self.switches.get(&sw).map(|s| &s.pipeline)
    }

    /// Runs a packet through a switch at the controller's current time.
    pub fn process_packet(&mut self, sw: SwitchId, pkt: &PacketHeader) -> Result<PipelineVerdict, ControllerError> {
        let now = self.now;
        Ok(self.switch_mut(sw)?.pipeline.process(pkt, now)?)
    }

    /// Bypasses the enforcement table on every switch.
    pub fn set_enforcement_enabled(&mut self, enabled: bool) {
        self.enforcement_enabled = enabled;
        for s in self.switches.values_mut() {
            s.pipeline.set_enforcement_enabled(enabled);
        }
    }

    fn placement(&self, p: Placement) -> Vec<SwitchId> {
        self.switches
            .iter()
            .filter(|(_, s)| p == Placement::AllSwitches || s.is_edge())
            .map(|(id, _)| *id)
            .collect()
    }

    fn placement_of(&self, t: &TransferRef) -> Placement {
        match t {
            TransferRef::Local(_) => self.config.pt_placement,
            TransferRef::Remote(..) => self.config.rpt_placement,
        }
    }

    // ---- registry ----

    pub fn add_peer(&mut self, domain: DomainId, key: PublicKey) {
        self.peer_keys.insert(domain, key);
    }

    pub fn peer_key(&self, domain: &DomainId) -> Option<&PublicKey> {
        self.peer_keys.get(domain)
    }

    pub fn register_subscriber(&mut self, sub: Subscriber) -> Result<SubscriberId, ControllerError> {
        let ip = sub.service_address.ip;
        if self
            .local_subs
            .values()
            .chain(self.remote_subs.values())
            .any(|s| s.service_address.ip == ip)
        {
            return Err(ControllerError::DuplicateAddress(ip));
        }
        let id = sub.id.clone();
        match &sub.kind {
            SubscriberKind::LocalApp => {
                if self.local_subs.contains_key(&id) {
                    return Err(ControllerError::DuplicateSubscriber(id.to_string()));
                }
                self.local_subs.insert(id.clone(), sub);
            }
            SubscriberKind::RemoteDomainApp(dom) => {
                if !self.peer_keys.contains_key(dom) {
                    return Err(ControllerError::UnknownPeer(dom.clone()));
                }
                let key = (dom.clone(), id.clone());
                if self.remote_subs.contains_key(&key) {
                    return Err(ControllerError::DuplicateSubscriber(format!("{dom}/{id}")));
                }
                self.remote_subs.insert(key, sub);
            }
        }
        Ok(id)
    }

    pub fn subscriber(&self, id: &SubscriberId) -> Option<&Subscriber> {
        self.local_subs.get(id)
    }

    pub fn remote_subscriber(&self, dom: &DomainId, id: &SubscriberId) -> Option<&Subscriber> {
        self.remote_subs.get(&(dom.clone(), id.clone()))
    }

    /// Validation universe: the configured base plus every registered
    /// service address.
    pub fn universe(&self) -> HeaderUniverse {
        let mut u = self.config.universe.clone();
        for s in self.local_subs.values().chain(self.remote_subs.values()) {
            u.add_service(&s.service_address);
        }
        for (ip, _) in self.geo.attachments() {
            u.src_ips.insert(ip);
            u.dst_ips.insert(ip);
        }
        u.fill_empty();
        u
    }

    // ---- transfers ----

    pub fn receive_pt(&mut self, pt: &PolicyTransfer) -> Result<Accepted, ControllerError> {
        let sub = self
            .local_subs
            .get(&pt.subscriber)
            .ok_or_else(|| ControllerError::UnknownSubscriber(pt.subscriber.to_string()))?
            .clone();
        if !self.limiter.try_take(self.now) {
            return Err(ControllerError::RateLimited);
        }
        if !pt.verify(&sub.key) {
            return Err(ValidationError::BadSignature.into());
        }
        let tref = TransferRef::Local(pt.subscriber.clone());
        check_freshness(pt.sequence, self.last_seq.get(&tref).copied())?;
        self.validations += 1;
        validate_pt(&self.repo.local, pt, &sub.service_address, &self.universe())?;
        let specs = compile_transfer(&pt.policies, &tref.origin(), self.last_table())?;
        let accepted = self.replace_transfer_rules(&tref, specs)?;
        self.last_seq.insert(tref, pt.sequence);
        self.repo.accepted_pt.insert(pt.subscriber.clone(), pt.clone());
        Ok(accepted)
    }

    pub fn receive_rpt(&mut self, rpt: &RemotePolicyTransfer) -> Result<Accepted, ControllerError> {
        let peer = *self
            .peer_keys
            .get(&rpt.origin_domain)
            .ok_or_else(|| ControllerError::UnknownPeer(rpt.origin_domain.clone()))?;
        let sub = self
            .remote_subscriber(&rpt.origin_domain, &rpt.subscriber)
            .ok_or_else(|| ControllerError::UnknownSubscriber(format!("{}/{}", rpt.origin_domain, rpt.subscriber)))?
            .clone();
        if !self.limiter.try_take(self.now) {
            return Err(ControllerError::RateLimited);
        }
        if !rpt.verify(&peer) {
            return Err(ValidationError::BadSignature.into());
        }
        let tref = TransferRef::Remote(rpt.origin_domain.clone(), rpt.subscriber.clone());
        check_freshness(rpt.sequence, self.last_seq.get(&tref).copied())?;
        if rpt.scope != sub.service_address {
            return Err(ControllerError::ScopeMismatch {
                registered: sub.service_address,
                claimed: rpt.scope.clone(),
            });
        }
        self.validations += 1;
        validate_rpt(&self.repo.local, rpt, &self.universe())?;
        let specs = compile_transfer(&rpt.policies, &tref.origin(), self.last_table())?;
        let accepted = self.replace_transfer_rules(&tref, specs)?;
        self.last_seq.insert(tref, rpt.sequence);
        self.repo
            .accepted_rpt
            .insert((rpt.origin_domain.clone(), rpt.subscriber.clone()), rpt.clone());
        Ok(accepted)
    }

    fn origin_filter(t: &TransferRef) -> OriginFilter {
        match t {
            TransferRef::Local(s) => OriginFilter::LocalPt(s.clone()),
            TransferRef::Remote(d, s) => OriginFilter::RemoteRpt(d.clone(), s.clone()),
        }
    }

    fn replace_transfer_rules(&mut self, t: &TransferRef, specs: Vec<RuleSpec>) -> Result<Accepted, ControllerError> {
        let targets = self.placement(self.placement_of(t));
        let filter = Self::origin_filter(t);
        for s in self.switches.values_mut() {
            s.pipeline.remove_rules_by_origin(&filter);
        }
        for sw in &targets {
            let pipeline = &mut self.switches.get_mut(sw).expect("placement is a subset").pipeline;
            for spec in &specs {
                pipeline.install_rule(spec.clone())?;
            }
        }
        Ok(Accepted {
            rules: specs.len(),
            switches: targets.len(),
        })
    }

    fn is_accepted(&self, t: &TransferRef) -> bool {
        match t {
            TransferRef::Local(s) => self.repo.accepted_pt.contains_key(s),
            TransferRef::Remote(d, s) => self.repo.accepted_rpt.contains_key(&(d.clone(), s.clone())),
        }
    }

    /// Withdraws an accepted transfer and every rule compiled from it.
    pub fn revoke_transfer(&mut self, t: &TransferRef) -> Result<usize, ControllerError> {
        if !self.is_accepted(t) {
            return Err(ControllerError::NotFound(t.clone()));
        }
        match t {
            TransferRef::Local(s) => {
                self.repo.accepted_pt.remove(s);
            }
            TransferRef::Remote(d, s) => {
                self.repo.accepted_rpt.remove(&(d.clone(), s.clone()));
            }
        }
        let filter = Self::origin_filter(t);
        Ok(self
            .switches
            .values_mut()
            .map(|s| s.pipeline.remove_rules_by_origin(&filter))
            .sum())
    }

    /// Replaces the local policy set, drops cached reactive decisions and
    /// evicts every accepted transfer that no longer validates.
    pub fn on_local_policy_change(&mut self, new_local: Vec<Policy>) -> Vec<Eviction> {
        self.repo.local = new_local;
        for s in self.switches.values_mut() {
            s.pipeline.remove_rules_where(|r| r.table_index == TABLE_ACL);
        }
        let universe = self.universe();
        let mut violators = Vec::new();
        for (id, pt) in &self.repo.accepted_pt {
            let scope = &self.local_subs[id].service_address;
            self.validations += 1;
            if let Err(error) = validate_pt(&self.repo.local, pt, scope, &universe) {
                violators.push(Eviction {
                    transfer: TransferRef::Local(id.clone()),
                    error,
                });
            }
        }
        for ((dom, id), rpt) in &self.repo.accepted_rpt {
            self.validations += 1;
            if let Err(error) = validate_rpt(&self.repo.local, rpt, &universe) {
                violators.push(Eviction {
                    transfer: TransferRef::Remote(dom.clone(), id.clone()),
                    error,
                });
            }
        }
        for e in &violators {
            self.revoke_transfer(&e.transfer).expect("violator was accepted");
        }
        violators
    }

    // ---- reactive path ----

    /// Handles a table miss reported by `sw` for a packet that entered on
    /// `port`.
    pub fn handle_packet_in(
        &mut self,
        sw: SwitchId,
        port: PortId,
        pkt: &PacketHeader,
    ) -> Result<PacketInOutcome, ControllerError> {
        let pkt = pkt.with_in_port(port);
        let switch = self.switches.get(&sw).ok_or(ControllerError::UnknownSwitch(sw))?;
        let host_facing = switch.host_ports.contains(&port);
        if host_facing {
            if let Some(pin) = self.pins.get(&pkt.src_ip) {
                if pin.at != (sw, port) {
                    return Ok(PacketInOutcome {
                        verdict: PipelineVerdict::Drop,
                        decision: None,
                        sighting: None,
                    });
                }
            }
        }
        let sighting = if host_facing && self.geo.is_mapped(sw, port) {
            Some(self.geo.track_host(pkt.src_ip, sw, port, self.now)?)
        } else {
            None
        };
        let now = self.now;
        let decision = decide(&self.repo.local, &pkt);
        let pipeline = &mut self.switches.get_mut(&sw).expect("checked above").pipeline;
        let cached = pipeline
            .table(TABLE_ACL)
            .is_some_and(|t| t.match_packet(&pkt).is_some());
        let mut installed = None;
        if !cached {
            let action = match decision {
                Outcome::Allow => RuleAction::GotoTable(TABLE_ROUTING),
                Outcome::RateLimit {
                    max_new_flows,
                    window_ticks,
                } => RuleAction::RateLimit {
                    max_new_flows,
                    window_ticks,
                },
                Outcome::Deny | Outcome::DefaultDeny => RuleAction::Drop,
            };
            // scoped to the access port so a host that moves is seen again
            let mut m = MatchFields::exact(pkt.flow_key());
            if host_facing {
                m = m.on_port(port);
            }
            pipeline.install_rule(RuleSpec::core(TABLE_ACL, PRIO_REACTIVE, m, action))?;
            installed = Some(decision);
        }
        let verdict = pipeline.process(&pkt, now)?;
        Ok(PacketInOutcome {
            verdict,
            decision: installed,
            sighting,
        })
    }

    // ---- location ----

    /// Binds `host` to the port it is attached at: only `host` may send
    /// from that port, and `host` may not send from any other access port.
    pub fn pin_port(&mut self, host: Ipv4Addr, sw: SwitchId, port: PortId) -> Result<usize, ControllerError> {
        if !self.switches.contains_key(&sw) {
            return Err(ControllerError::UnknownSwitch(sw));
        }
        match self.geo.attachment(host) {
            Some(a) if (a.switch, a.port) == (sw, port) => {}
            _ => return Err(ControllerError::NotAttached(host)),
        }
        self.unpin(host);
        let mut rules = Vec::new();
        let goto = RuleAction::GotoTable(TABLE_ACL);
        let pinned = MatchFields::any().on_port(port);
        let target = self.switches.get_mut(&sw).expect("checked above");
        rules.push((
            sw,
            target.pipeline.install_rule(RuleSpec::core(
                TABLE_INGRESS,
                PRIO_PIN_ALLOW,
                pinned.src_host(host),
                goto,
            ))?,
        ));
        rules.push((
            sw,
            target
                .pipeline
                .install_rule(RuleSpec::core(TABLE_INGRESS, PRIO_PIN_PORT, pinned, RuleAction::Drop))?,
        ));
        for (&id, s) in &mut self.switches {
            for &q in &s.host_ports {
                if (id, q) == (sw, port) {
                    continue;
                }
                let m = MatchFields::any().on_port(q).src_host(host);
                let rid =
                    s.pipeline
                        .install_rule(RuleSpec::core(TABLE_INGRESS, PRIO_PIN_SPOOF, m, RuleAction::Drop))?;
                rules.push((id, rid));
            }
        }
        let count = rules.len();
        self.pins.insert(host, Pin { at: (sw, port), rules });
        Ok(count)
    }

    /// Removes a host's pin rules; returns how many were removed.
    pub fn unpin(&mut self, host: Ipv4Addr) -> usize {
        let Some(pin) = self.pins.remove(&host) else {
            return 0;
        };
        let mut removed = 0;
        for (sw, rid) in pin.rules {
            if let Some(s) = self.switches.get_mut(&sw) {
                removed += s.pipeline.remove_rules_where(|r| r.rule_id == rid);
            }
        }
        removed
    }

    pub fn pinned_at(&self, host: Ipv4Addr) -> Option<(SwitchId, PortId)> {
        self.pins.get(&host).map(|p| p.at)
    }

    pub fn issue_ticket(
        &self,
        ltr: &LocationTicketRequest,
        observed_src_ip: Ipv4Addr,
    ) -> Result<LocationTicket, ControllerError> {
        let issuer = Issuer {
            domain: &self.domain,
            key: &self.key,
            geo: &self.geo,
            freshness: self.config.ltr_freshness,
        };
        Ok(issue_ticket(issuer, ltr, observed_src_ip, self.now)?)
    }

    // ---- invariants ----

    /// Checks that the transfer rules on every switch are exactly the
    /// compiled accepted transfers at their placement, and that every
    /// pipeline is structurally sound.
    pub fn check_coherence(&self) -> Result<(), String> {
        let last = self.last_table();
        let mut expected: BTreeMap<SwitchId, Vec<RuleSpec>> = BTreeMap::new();
        let transfers = self
            .repo
            .accepted_pt
            .iter()
            .map(|(s, pt)| (TransferRef::Local(s.clone()), &pt.policies))
            .chain(
                self.repo
                    .accepted_rpt
                    .iter()
                    .map(|((d, s), r)| (TransferRef::Remote(d.clone(), s.clone()), &r.policies)),
            );
        for (t, policies) in transfers {
            let specs = compile_transfer(policies, &t.origin(), last).map_err(|e| e.to_string())?;
            for sw in self.placement(self.placement_of(&t)) {
                expected.entry(sw).or_default().extend(specs.iter().cloned());
            }
        }
        for (id, s) in &self.switches {
            s.pipeline.check_invariants().map_err(|e| format!("{id}: {e}"))?;
            let mut have: Vec<RuleSpec> = s
                .pipeline
                .rules()
                .filter(|r| r.origin.is_peps())
                .map(|r| r.spec())
                .collect();
            let mut want = expected.remove(id).unwrap_or_default();
            let key = |r: &RuleSpec| (r.origin.clone(), r.priority, r.match_fields, r.action);
            have.sort_by_key(key);
            want.sort_by_key(key);
            if have != want {
                return Err(format!(
                    "{id}: {} transfer rules installed, {} expected",
                    have.len(),
                    want.len()
                ));
            }
        }
        Ok(())
    }
}
