//! Acceptance criteria 1 to 10. Run with `-- --nocapture` to see one
//! PASS/FAIL line per criterion.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ipnet::Ipv4Net;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use peps::controller::{Controller, ControllerConfig, ControllerError, Subscriber, SubscriberKind, TransferRef};
use peps::crypto::KeyPair;
use peps::dataplane::{
    FlowTablePipeline, MatchFields, Origin, PacketHeader, PipelineVerdict, Protocol, RuleAction, RuleSpec,
};
use peps::location::{
    issue_ticket, verify_ticket, GeoLocationTable, Issuer, LocationTicket, LocationTicketRequest, LocationZone,
    SecurityClass, TicketError, ZoneId,
};
use peps::policy::{
    validate_pt, validate_rpt, Decision, HeaderUniverse, Policy, PolicyTransfer, RemotePolicyTransfer, ServiceAddress,
    ValidationError,
};
use peps::simnet::{bench_packet_in, run_scenario, BenchConfig, FirewallLadder};
use peps::{DomainId, PortId, SubscriberId, SwitchId};

// ---------------------------------------------------------------------------
// Independent reference model of policies, used as the oracle.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum D {
    Allow,
    Deny,
    Limit(u32, u64),
}

#[derive(Debug, Clone, Copy)]
struct Rule {
    prio: u32,
    d: D,
    src: Option<(Ipv4Addr, u8)>,
    dst: Option<(Ipv4Addr, u8)>,
    sport: Option<u16>,
    dport: Option<u16>,
    proto: Option<Protocol>,
}

type Pkt = (Ipv4Addr, Ipv4Addr, u16, u16, Protocol);

fn in_net(ip: Ipv4Addr, net: Option<(Ipv4Addr, u8)>) -> bool {
    match net {
        None => true,
        Some((_, 0)) => true,
        Some((base, len)) => (u32::from(ip) ^ u32::from(base)) >> (32 - u32::from(len)) == 0,
    }
}

fn hits(r: &Rule, p: &Pkt) -> bool {
    in_net(p.0, r.src)
        && in_net(p.1, r.dst)
        && r.sport.is_none_or(|s| s == p.2)
        && r.dport.is_none_or(|s| s == p.3)
        && r.proto.is_none_or(|s| s == p.4)
}

/// `None` when nothing matches.
fn oracle_decide<'a>(rules: impl IntoIterator<Item = &'a Rule>, p: &Pkt) -> Option<D> {
    let mut best: Option<&Rule> = None;
    for r in rules {
        if hits(r, p) && best.is_none_or(|b| r.prio > b.prio) {
            best = Some(r);
        }
    }
    best.map(|r| r.d)
}

fn rank(d: Option<D>) -> u8 {
    match d {
        Some(D::Allow) => 1,
        Some(D::Limit(..)) => 2,
        Some(D::Deny) | None => 3,
    }
}

struct Scope {
    ip: Ipv4Addr,
    ports: Option<BTreeSet<u16>>,
}

impl Scope {
    fn covers(&self, p: &Pkt) -> bool {
        p.1 == self.ip && self.ports.as_ref().is_none_or(|ps| ps.contains(&p.3))
    }

    fn confines(&self, r: &Rule) -> bool {
        r.dst == Some((self.ip, 32))
            && self
                .ports
                .as_ref()
                .is_none_or(|ps| r.dport.is_some_and(|d| ps.contains(&d)))
    }

    fn to_service(&self) -> ServiceAddress {
        ServiceAddress {
            ip: self.ip,
            ports: self.ports.clone(),
        }
    }
}

/// Whether a transfer changes how `p` is treated in a way it may not: it
/// loosens an explicit local decision, or it alters anything about a packet
/// not destined to the subscriber. Transferred allows install nothing, so
/// after a local allow (or rate limit) the enforcement table applies the
/// transfer's highest restriction.
fn flips(local: &[Rule], transfer: &[Rule], scope: &Scope, p: &Pkt) -> bool {
    let l = oracle_decide(local, p);
    let Some(ld) = l else {
        return false;
    };
    let composed = oracle_decide(local.iter().chain(transfer), p);
    let enforced = match ld {
        D::Deny => l,
        _ => oracle_decide(transfer.iter().filter(|r| r.d != D::Allow), p).or(l),
    };
    rank(composed) < rank(l) || (!scope.covers(p) && (composed != l || enforced != l))
}

fn to_policy(r: &Rule) -> Policy {
    let decision = match r.d {
        D::Allow => Decision::Allow,
        D::Deny => Decision::Deny,
        D::Limit(max_new_flows, window_ticks) => Decision::RateLimit {
            max_new_flows,
            window_ticks,
        },
    };
    let net = |n: Option<(Ipv4Addr, u8)>| n.map(|(ip, len)| Ipv4Net::new(ip, len).unwrap().trunc());
    let m = MatchFields {
        src_ip: net(r.src),
        dst_ip: net(r.dst),
        src_port: r.sport,
        dst_port: r.dport,
        protocol: r.proto,
        ..MatchFields::any()
    };
    Policy::new(r.prio, decision, m)
}

fn to_pkt(h: &PacketHeader) -> Pkt {
    (h.src_ip, h.dst_ip, h.src_port, h.dst_port, h.protocol)
}

// ---------------------------------------------------------------------------
// Random generation over a small universe.

const HOSTS: [Ipv4Addr; 4] = [
    Ipv4Addr::new(10, 0, 0, 1),
    Ipv4Addr::new(10, 0, 0, 2),
    Ipv4Addr::new(10, 0, 0, 3),
    Ipv4Addr::new(10, 0, 0, 4),
];
const PORTS: [u16; 4] = [22, 80, 443, 3306];
const PROTOS: [Protocol; 2] = [Protocol::Tcp, Protocol::Udp];

fn universe() -> HeaderUniverse {
    HeaderUniverse::symmetric(HOSTS, PORTS, PROTOS)
}

fn all_packets() -> Vec<Pkt> {
    let mut out = Vec::new();
    for s in HOSTS {
        for d in HOSTS {
            for sp in PORTS {
                for dp in PORTS {
                    for pr in PROTOS {
                        out.push((s, d, sp, dp, pr));
                    }
                }
            }
        }
    }
    out
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn new(seed: u64) -> Self {
        Gen(ChaCha8Rng::seed_from_u64(seed))
    }

    fn chance(&mut self, pct: u32) -> bool {
        self.0.random_range(0..100) < pct
    }

    fn pick<T: Copy>(&mut self, items: &[T]) -> T {
        items[self.0.random_range(0..items.len())]
    }

    fn net(&mut self) -> Option<(Ipv4Addr, u8)> {
        match self.0.random_range(0..6) {
            0 | 1 => None,
            2 => Some((Ipv4Addr::new(10, 0, 0, 0), 30)),
            3 => Some((Ipv4Addr::new(10, 0, 0, 0), 29)),
            _ => Some((self.pick(&HOSTS), 32)),
        }
    }

    fn decision(&mut self, allow: u32, deny: u32) -> D {
        let roll = self.0.random_range(0..100);
        if roll < allow {
            D::Allow
        } else if roll < allow + deny {
            D::Deny
        } else {
            D::Limit(self.pick(&[3, 5]), 10)
        }
    }

    fn rule(&mut self, allow: u32, deny: u32) -> Rule {
        let maybe_port = |g: &mut Gen| if g.chance(50) { None } else { Some(g.pick(&PORTS)) };
        Rule {
            prio: self.0.random_range(1..=20),
            d: self.decision(allow, deny),
            src: self.net(),
            dst: self.net(),
            sport: if self.chance(25) { Some(self.pick(&PORTS)) } else { None },
            dport: maybe_port(self),
            proto: if self.chance(50) {
                None
            } else {
                Some(self.pick(&PROTOS))
            },
        }
    }

    fn local(&mut self) -> Vec<Rule> {
        let n = self.0.random_range(1..=5);
        (0..n).map(|_| self.rule(45, 35)).collect()
    }

    fn scope(&mut self) -> Scope {
        let ip = self.pick(&HOSTS);
        let ports = if self.chance(50) {
            None
        } else {
            let n = self.0.random_range(1..=2);
            Some((0..n).map(|_| self.pick(&PORTS)).collect())
        };
        Scope { ip, ports }
    }

    /// Transfer rules, mostly aimed at the subscriber.
    fn transfer(&mut self, scope: &Scope, confine_pct: u32, max: usize) -> Vec<Rule> {
        let n = self.0.random_range(0..=max);
        (0..n)
            .map(|_| {
                let mut r = self.rule(25, 55);
                if self.chance(confine_pct) {
                    r.dst = Some((scope.ip, 32));
                    if let Some(ps) = &scope.ports {
                        let ps: Vec<u16> = ps.iter().copied().collect();
                        r.dport = Some(self.pick(&ps));
                    }
                }
                r
            })
            .collect()
    }
}

fn policies(rules: &[Rule]) -> Vec<Policy> {
    rules.iter().map(to_policy).collect()
}

// ---------------------------------------------------------------------------
// Criteria.

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Criterion 1: The validators agree with exhaustive enumeration on 500 random pairs.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut g = Gen::new(1);
    let u = universe();
    let packets = all_packets();
    let (mut accepted, mut rejected, mut discrepancies) = (0, 0, Vec::new());
    for case in 0..500 {
        let local = g.local();
        let scope = g.scope();
        let remote = case % 2 == 1;
        let transfer = g.transfer(&scope, if remote { 80 } else { 60 }, 4);
        let local_p = policies(&local);
        let sub = SubscriberId::new("s");
        let confined = transfer.iter().all(|r| scope.confines(r));
        let flip = packets.iter().any(|p| flips(&local, &transfer, &scope, p));
        let expect_accept = if remote { confined && !flip } else { !flip };
        let got = if remote {
            let rpt = RemotePolicyTransfer::new("B".into(), sub, scope.to_service(), 1, policies(&transfer));
            validate_rpt(&local_p, &rpt, &u)
        } else {
            let pt = PolicyTransfer::new(sub, 1, policies(&transfer));
            validate_pt(&local_p, &pt, &scope.to_service(), &u)
        };
        match &got {
            Ok(()) => accepted += 1,
            Err(_) => rejected += 1,
        }
        if got.is_ok() != expect_accept {
            discrepancies.push(format!("case {case}: oracle accept={expect_accept}, got {got:?}"));
            continue;
        }
        // every rejection must replay
        match got {
            Ok(()) => {}
            Err(ValidationError::Violation(v)) => {
                let w = to_pkt(&v.witness);
                if remote && !confined {
                    discrepancies.push(format!("case {case}: expected ScopeViolation"));
                } else if !packets.contains(&w) || !flips(&local, &transfer, &scope, &w) {
                    discrepancies.push(format!("case {case}: witness {w:?} does not replay"));
                }
            }
            Err(ValidationError::ScopeViolation { policy_index, witness }) => {
                let w = to_pkt(&witness);
                let first_bad = transfer.iter().position(|r| !scope.confines(r));
                let r = &transfer[policy_index];
                if first_bad != Some(policy_index) || !hits(r, &w) || scope.covers(&w) {
                    discrepancies.push(format!("case {case}: scope witness {w:?} does not replay"));
                }
            }
            Err(e) => discrepancies.push(format!("case {case}: unexpected {e}")),
        }
    }
    let elapsed = start.elapsed();
    ensure(discrepancies.is_empty(), || {
        discrepancies[..discrepancies.len().min(3)].join("; ")
    })?;
    ensure(accepted > 50 && rejected > 50, || {
        format!("unbalanced: {accepted} accepted, {rejected} rejected")
    })?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "500 pairs over {} packets, {accepted} accepted, {rejected} rejected, 0 discrepancies, {:.1}s",
        packets.len(),
        elapsed.as_secs_f64()
    ))
}

const WEB: Ipv4Addr = HOSTS[2];
const DB: Ipv4Addr = HOSTS[3];
const SW: SwitchId = SwitchId(1);
const UPLINK: PortId = PortId(9);

fn db_scope() -> Scope {
    Scope {
        ip: DB,
        ports: Some([80, 443].into()),
    }
}

fn web_scope() -> Scope {
    Scope { ip: WEB, ports: None }
}

/// One edge switch with an inter-domain uplink and routes to every host;
/// `web` is a local subscriber, `db` a subscriber of domain B.
fn one_switch(local: &[Rule]) -> Controller {
    let config = ControllerConfig {
        universe: universe(),
        bucket_capacity: 1_000_000,
        ..ControllerConfig::default()
    };
    let mut c = Controller::new("A".into(), KeyPair::derive(2, "A"), config).unwrap();
    c.add_switch(SW).unwrap();
    c.mark_interdomain_port(SW, UPLINK).unwrap();
    for h in HOSTS {
        c.install_route(SW, h, UPLINK).unwrap();
    }
    c.on_local_policy_change(policies(local));
    c.register_subscriber(Subscriber {
        id: "web".into(),
        service_address: web_scope().to_service(),
        key: KeyPair::derive(2, "web").public(),
        kind: SubscriberKind::LocalApp,
    })
    .unwrap();
    c.add_peer("B".into(), KeyPair::derive(2, "B").public());
    c.register_subscriber(Subscriber {
        id: "db".into(),
        service_address: db_scope().to_service(),
        key: KeyPair::derive(2, "B").public(),
        kind: SubscriberKind::RemoteDomainApp("B".into()),
    })
    .unwrap();
    c
}

fn header(p: &Pkt) -> PacketHeader {
    PacketHeader::new(p.0, p.1, p.2, p.3, p.4)
}

/// Verdict for one packet arriving on `port`, going through the controller
/// on a table miss. Rate-limit meters admit.
fn verdict(c: &mut Controller, sw: SwitchId, port: PortId, pkt: &PacketHeader) -> PipelineVerdict {
    let with_port = pkt.with_in_port(port);
    match c.pipeline(sw).unwrap().classify(&with_port).unwrap() {
        PipelineVerdict::SendToController => {
            c.handle_packet_in(sw, port, pkt).unwrap();
            c.pipeline(sw).unwrap().classify(&with_port).unwrap()
        }
        v => v,
    }
}

/// Criterion 2: Accepted transfers never override local decisions and RPT rules only
/// touch their subscriber's traffic.
fn criterion_2() -> Outcome {
    let mut g = Gen::new(2);
    let packets = all_packets();
    let (db, web) = (db_scope(), web_scope());
    let mut compositions = 0;
    let mut attempts = 0;
    let mut checked = 0u64;
    while compositions < 200 {
        attempts += 1;
        if attempts > 20_000 {
            return Err(format!("only {compositions} accepted compositions found"));
        }
        let local = g.local();
        let pt_rules = g.transfer(&web, 90, 3);
        let rpt_rules = g.transfer(&db, 100, 3);
        let pt = PolicyTransfer::new("web".into(), 1, policies(&pt_rules)).signed(&KeyPair::derive(2, "web"));
        let rpt = RemotePolicyTransfer::new("B".into(), "db".into(), db.to_service(), 1, policies(&rpt_rules))
            .signed(&KeyPair::derive(2, "B"));
        let mut full = one_switch(&local);
        if full.receive_pt(&pt).is_err() || full.receive_rpt(&rpt).is_err() {
            continue;
        }
        let mut no_rpt = one_switch(&local);
        no_rpt
            .receive_pt(&pt)
            .map_err(|e| format!("PT accepted once but not twice: {e}"))?;
        let mut local_only = one_switch(&local);
        compositions += 1;
        for p in &packets {
            let h = header(p);
            let vf = verdict(&mut full, SW, PortId(1), &h);
            let vn = verdict(&mut no_rpt, SW, PortId(1), &h);
            let vl = verdict(&mut local_only, SW, PortId(1), &h);
            let ld = oracle_decide(&local, p);
            let ctx = || format!("composition {compositions} packet {p:?}: full={vf} no_rpt={vn} local={vl}");
            if ld.is_some() && !web.covers(p) && !db.covers(p) {
                ensure(vf == vl, ctx)?;
            }
            if ld == Some(D::Deny) {
                ensure(vf == PipelineVerdict::Drop && vl == PipelineVerdict::Drop, ctx)?;
            }
            if !db.covers(p) {
                ensure(vf == vn, ctx)?;
                let last = full.pipeline(SW).unwrap().last_table();
                let table = full.pipeline(SW).unwrap().table(last).unwrap();
                if let Some(rule) = table.match_packet(&h.with_in_port(PortId(1))) {
                    ensure(!matches!(rule.origin, Origin::RemoteRpt(..)), || {
                        format!("{} reaches {p:?}", rule.origin)
                    })?;
                }
            }
            checked += 1;
        }
        full.check_coherence()?;
    }
    Ok(format!(
        "200 compositions ({attempts} drawn), {checked} packet comparisons, exact"
    ))
}

/// Independent scan of the two structural invariants.
fn scan(p: &FlowTablePipeline) -> Result<(), String> {
    let last = p.table_count() - 1;
    for i in 0..p.table_count() {
        for r in p.table(i).unwrap().rules() {
            let peps = !matches!(r.origin, Origin::LocalCore);
            ensure(r.table_index == i, || format!("{} filed in table {i}", r.rule_id))?;
            ensure(peps == (i == last), || {
                format!("{} from {} in table {i}", r.rule_id, r.origin)
            })?;
            let band_ok = match r.origin {
                Origin::LocalCore => true,
                Origin::LocalPt(_) => (10_000..=19_999).contains(&r.priority),
                Origin::RemoteRpt(..) => r.priority <= 9_999,
            };
            ensure(band_ok, || {
                format!("{} from {} at priority {}", r.rule_id, r.origin, r.priority)
            })?;
            if i == last {
                ensure(
                    matches!(r.action, RuleAction::Drop | RuleAction::RateLimit { .. }),
                    || format!("{} carries {} in the enforcement table", r.rule_id, r.action),
                )?;
            }
        }
    }
    Ok(())
}

fn random_spec(g: &mut Gen) -> RuleSpec {
    let origin = match g.0.random_range(0..3) {
        0 => Origin::LocalCore,
        1 => Origin::LocalPt("web".into()),
        _ => Origin::RemoteRpt("B".into(), "db".into()),
    };
    let action = match g.0.random_range(0..5) {
        0 => RuleAction::Drop,
        1 => RuleAction::Forward(PortId(g.0.random_range(1..4))),
        2 => RuleAction::GotoTable(g.0.random_range(0..5)),
        3 => RuleAction::RateLimit {
            max_new_flows: 2,
            window_ticks: g.0.random_range(0..3),
        },
        _ => RuleAction::SendToController,
    };
    RuleSpec {
        match_fields: to_policy(&g.rule(50, 50)).match_fields,
        action,
        priority: g.0.random_range(0..=20_000),
        table_index: g.0.random_range(0..5),
        origin,
    }
}

/// Criterion 3: 10,000 random operations never break table confinement or bands.
fn criterion_3() -> Outcome {
    let mut g = Gen::new(3);
    let mut c = one_switch(&g.local());
    c.add_switch(SwitchId(2)).unwrap();
    c.add_switch(SwitchId(3)).unwrap();
    c.mark_host_port(SwitchId(2), PortId(1)).unwrap();
    c.mark_host_port(SwitchId(2), PortId(2)).unwrap();
    c.geo_mut()
        .add_zone(
            LocationZone {
                id: ZoneId(1),
                label: "lobby".into(),
                class: SecurityClass::Secure,
            },
            [(SwitchId(2), PortId(1)), (SwitchId(2), PortId(2))],
        )
        .unwrap();
    let mut raw = FlowTablePipeline::new(4).unwrap();
    let (mut seq_pt, mut seq_rpt) = (0u64, 0u64);
    let mut counts = [0u32; 9];
    let mut refused = 0;
    for op in 0..10_000 {
        let kind = g.0.random_range(0..9);
        counts[kind] += 1;
        match kind {
            0 => {
                seq_pt += 1;
                let seq = if g.chance(10) { seq_pt.saturating_sub(2) } else { seq_pt };
                let pt = PolicyTransfer::new("web".into(), seq, policies(&g.transfer(&web_scope(), 70, 3)))
                    .signed(&KeyPair::derive(2, "web"));
                let _ = c.receive_pt(&pt);
            }
            1 => {
                seq_rpt += 1;
                let rpt = RemotePolicyTransfer::new(
                    "B".into(),
                    "db".into(),
                    db_scope().to_service(),
                    seq_rpt,
                    policies(&g.transfer(&db_scope(), 80, 3)),
                )
                .signed(&KeyPair::derive(2, "B"));
                let _ = c.receive_rpt(&rpt);
            }
            2 => {
                let t = if g.chance(50) {
                    TransferRef::Local("web".into())
                } else {
                    TransferRef::Remote("B".into(), "db".into())
                };
                let _ = c.revoke_transfer(&t);
            }
            3 => {
                c.on_local_policy_change(policies(&g.local()));
            }
            4 => {
                let p = header(&g.pick(&all_packets()));
                let (sw, port) = g.pick(&[
                    (SW, PortId(1)),
                    (SwitchId(2), PortId(1)),
                    (SwitchId(2), PortId(2)),
                    (SwitchId(3), PortId(4)),
                ]);
                verdict(&mut c, sw, port, &p);
            }
            5 => {
                let host = g.pick(&HOSTS);
                if let Some(a) = c.geo().attachment(host) {
                    c.pin_port(host, a.switch, a.port).map_err(|e| e.to_string())?;
                } else {
                    c.unpin(host);
                }
            }
            6 => {
                let spec = random_spec(&mut g);
                let before: Vec<_> = raw.rules().cloned().collect();
                if raw.install_rule(spec).is_err() {
                    refused += 1;
                    let after: Vec<_> = raw.rules().cloned().collect();
                    ensure(before == after, || {
                        format!("op {op}: refused install changed the pipeline")
                    })?;
                }
            }
            7 => {
                let bound = g.0.random_range(0..20_000u16);
                raw.remove_rules_where(|r| r.priority > bound);
            }
            _ => {
                c.set_enforcement_enabled(g.chance(70));
            }
        }
        for sw in c.switch_ids().collect::<Vec<_>>() {
            scan(c.pipeline(sw).unwrap()).map_err(|e| format!("op {op} ({kind}): {sw}: {e}"))?;
        }
        scan(&raw).map_err(|e| format!("op {op} ({kind}): raw pipeline: {e}"))?;
        c.check_coherence().map_err(|e| format!("op {op} ({kind}): {e}"))?;
    }
    Ok(format!(
        "10000 operations {counts:?}, {refused} illegal installs refused, no violation"
    ))
}

fn scenario_text(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    std::fs::read_to_string(path).unwrap()
}

/// Criterion 4: LBAC defense in depth.
fn criterion_4() -> Outcome {
    let text = scenario_text("lbac_two_domain.scn");
    let (_, on) = run_scenario(&text, 60, false).map_err(|e| e.to_string())?;
    let (_, off) = run_scenario(&text, 60, true).map_err(|e| e.to_string())?;
    ensure(on.dp_grants == off.dp_grants, || "grant sets differ".into())?;
    ensure(on.totals.dropped_at_source_edge > 0, || {
        "nothing dropped at the requestor edge".into()
    })?;
    ensure(on.interdomain_bytes() < off.interdomain_bytes(), || {
        format!(
            "inter-domain bytes {} vs {}",
            on.interdomain_bytes(),
            off.interdomain_bytes()
        )
    })?;
    ensure(on.conserved() && off.conserved(), || "conservation".into())?;
    Ok(format!(
        "{} grants both ways, {} dropped at requestor edge, inter-domain bytes {} < {}",
        on.dp_grants.len(),
        on.totals.dropped_at_source_edge,
        on.interdomain_bytes(),
        off.interdomain_bytes()
    ))
}

/// Criterion 5: Ticket round trips, single-field mutations and the Sybil case.
fn criterion_5() -> Outcome {
    let dom = DomainId::new("A");
    let ctrl = KeyPair::derive(5, "A");
    let mut geo = GeoLocationTable::new();
    for z in 1..=4u32 {
        let zone = LocationZone {
            id: ZoneId(z),
            label: format!("zone {z}"),
            class: SecurityClass::Secure,
        };
        geo.add_zone(zone, (1..=250).map(|p| (SwitchId(z), PortId(p)))).unwrap();
    }
    let host_ip = |i: u32| Ipv4Addr::new(10, 5, (i / 250) as u8, (i % 250 + 1) as u8);
    let mut tickets = Vec::new();
    for i in 0..1000u32 {
        let ip = host_ip(i);
        geo.track_host(ip, SwitchId(i % 4 + 1), PortId(i % 250 + 1), 0).unwrap();
        tickets.push((ip, KeyPair::derive(5, &format!("host:{i}"))));
    }
    let issuer = Issuer {
        domain: &dom,
        key: &ctrl,
        geo: &geo,
        freshness: 10,
    };
    let mut issued: Vec<LocationTicket> = Vec::new();
    for (i, (ip, key)) in tickets.iter().enumerate() {
        let t = i as u64 % 100;
        let ltr = LocationTicketRequest::new(*ip, key, t);
        let lt = issue_ticket(issuer, &ltr, *ip, t + (i as u64 % 5)).map_err(|e| format!("issue {i}: {e}"))?;
        ensure(lt.zone == ZoneId(i as u32 % 4 + 1), || {
            format!("ticket {i} in {}", lt.zone)
        })?;
        // through the wire format and back
        let lt: LocationTicket = lt.to_string().parse().map_err(|e: TicketError| e.to_string())?;
        verify_ticket(
            &lt,
            &ctrl.public(),
            lt.timestamp + (i as u64 % 40),
            50,
            *ip,
            &key.public(),
        )
        .map_err(|e| format!("verify {i}: {e}"))?;
        issued.push(lt);
    }
    let mut g = Gen::new(5);
    let mut by_field = [0u32; 5];
    for i in 0..1000 {
        let mut lt = issued[i].clone();
        let field = i % 5;
        match field {
            0 => lt.requestor_ip = host_ip((i as u32 + 1) % 1000),
            1 => lt.requestor_key = tickets[(i + 1) % 1000].1.public(),
            2 => lt.timestamp += g.0.random_range(1..5),
            3 => lt.zone = ZoneId(lt.zone.0 % 4 + 1),
            _ => {
                let mut bytes = *lt.signature.as_bytes();
                bytes[g.0.random_range(0..64)] ^= 1 << g.0.random_range(0..8);
                lt.signature = peps::crypto::Signature::from_bytes(bytes);
            }
        }
        let (ip, key) = (issued[i].requestor_ip, issued[i].requestor_key);
        match verify_ticket(&lt, &ctrl.public(), lt.timestamp, 50, ip, &key) {
            Err(TicketError::BadSignature) => by_field[field] += 1,
            other => return Err(format!("mutation {i} of field {field}: {other:?}")),
        }
    }
    // a genuine ticket in the wrong context
    let (lt, key) = (&issued[0], tickets[0].1.public());
    let ctx = [
        (
            verify_ticket(lt, &ctrl.public(), lt.timestamp, 50, host_ip(1), &key),
            "IpMismatch",
        ),
        (
            verify_ticket(
                lt,
                &ctrl.public(),
                lt.timestamp,
                50,
                lt.requestor_ip,
                &tickets[1].1.public(),
            ),
            "KeyMismatch",
        ),
        (
            verify_ticket(lt, &ctrl.public(), lt.timestamp + 51, 50, lt.requestor_ip, &key),
            "Expired",
        ),
    ];
    for (r, want) in ctx {
        ensure(r.as_ref().err().map(TicketError::reason) == Some(want), || {
            format!("{r:?}, wanted {want}")
        })?;
    }
    // Sybil: host 0's key presented from host 1's address
    let sybil = LocationTicketRequest::new(host_ip(0), &tickets[0].1, 3);
    let r = issue_ticket(issuer, &sybil, host_ip(1), 3);
    ensure(matches!(r, Err(TicketError::IpMismatch { .. })), || {
        format!("sybil request: {r:?}")
    })?;
    let claim = LocationTicketRequest::new(host_ip(1), &tickets[0].1, 3);
    let lt = issue_ticket(issuer, &claim, host_ip(1), 3).map_err(|e| e.to_string())?;
    let r = verify_ticket(&lt, &ctrl.public(), 3, 50, host_ip(1), &tickets[1].1.public());
    ensure(r == Err(TicketError::KeyMismatch), || format!("borrowed key: {r:?}"))?;
    Ok(format!(
        "1000 round trips accepted, 1000 mutations rejected {by_field:?}, Sybil rejected"
    ))
}

/// Criterion 6: Pinned hosts cannot be impersonated from another port.
fn criterion_6() -> Outcome {
    let mut c = one_switch(&[Rule {
        prio: 1,
        d: D::Allow,
        src: None,
        dst: None,
        sport: None,
        dport: None,
        proto: None,
    }]);
    c.add_switch(SwitchId(2)).unwrap();
    for h in HOSTS {
        c.install_route(SwitchId(2), h, PortId(9)).unwrap();
    }
    let mut ports = Vec::new();
    for (sw, n) in [(SW, 4), (SwitchId(2), 3)] {
        for p in 1..=n {
            c.mark_host_port(sw, PortId(p)).unwrap();
            ports.push((sw, PortId(p)));
        }
    }
    let zone = LocationZone {
        id: ZoneId(1),
        label: "floor".into(),
        class: SecurityClass::Secure,
    };
    c.geo_mut().add_zone(zone, ports.clone()).unwrap();
    let victim = HOSTS[0];
    let home = (SW, PortId(1));
    let first = PacketHeader::new(victim, HOSTS[1], 22, 80, Protocol::Tcp);
    ensure(
        matches!(verdict(&mut c, home.0, home.1, &first), PipelineVerdict::Forward(_)),
        || "victim blocked".into(),
    )?;
    let mut unpinned = c.clone();
    c.pin_port(victim, home.0, home.1).map_err(|e| e.to_string())?;
    let attachment = c.geo().attachment(victim);
    let wrong: Vec<_> = ports.iter().copied().filter(|p| *p != home).collect();
    let mut g = Gen::new(6);
    for i in 0..100 {
        let (sw, port) = g.pick(&wrong);
        let p = PacketHeader::new(
            victim,
            g.pick(&HOSTS[1..]),
            g.pick(&PORTS),
            g.pick(&PORTS),
            g.pick(&PROTOS),
        );
        let v = verdict(&mut c, sw, port, &p);
        ensure(v.is_discard(), || format!("spoof {i} from {sw}:{} got {v}", port.0))?;
        ensure(c.geo().attachment(victim) == attachment, || {
            format!("spoof {i} moved the victim")
        })?;
    }
    for i in 0..50 {
        let p = PacketHeader::new(victim, g.pick(&HOSTS[1..]), 1000 + i, g.pick(&PORTS), g.pick(&PROTOS));
        let got = verdict(&mut c, home.0, home.1, &p);
        let want = verdict(&mut unpinned, home.0, home.1, &p);
        ensure(got == want && !got.is_discard(), || {
            format!("legitimate packet {i}: {got} vs {want}")
        })?;
    }
    Ok("100 of 100 spoofed packets dropped, geo table untouched, 50 legitimate flows unaffected".into())
}

fn sorted(v: &[u64]) -> Vec<u64> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v
}

/// Criterion 7: Flow handling degrades monotonically with ticket load.
fn criterion_7() -> Outcome {
    let start = Instant::now();
    let base_cfg = BenchConfig::default();
    let mut series = Vec::new();
    let mut baseline = None;
    for ltr in [1000, 5000, 10_000] {
        let s = bench_packet_in(&BenchConfig {
            ltr,
            ..base_cfg.clone()
        });
        if let Some(b) = &baseline {
            ensure(*b == s.baseline, || "baseline changed between runs".into())?;
        }
        baseline = Some(s.baseline.clone());
        series.push((ltr, s.with_ltr));
    }
    let baseline = baseline.unwrap();
    series.insert(0, (0, baseline.clone()));
    let again = bench_packet_in(&BenchConfig {
        ltr: 1000,
        ..base_cfg.clone()
    });
    ensure(again.with_ltr == series[1].1, || "bench is not deterministic".into())?;
    for w in series.windows(2) {
        let (a, b) = (sorted(&w[0].1), sorted(&w[1].1));
        ensure(a.iter().zip(&b).all(|(x, y)| y <= x), || {
            format!("ltr {} not dominated by ltr {}", w[1].0, w[0].0)
        })?;
        let (sa, sb): (u64, u64) = (a.iter().sum(), b.iter().sum());
        ensure(sb < sa, || format!("ltr {} total {sb} not below {sa}", w[1].0))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    let means: Vec<String> = series
        .iter()
        .map(|(l, s)| format!("{l}:{:.1}", s.iter().sum::<u64>() as f64 / s.len() as f64))
        .collect();
    Ok(format!(
        "mean packet-ins per tick {} ({:.1}s)",
        means.join(" "),
        elapsed.as_secs_f64()
    ))
}

/// Criterion 8: The canned firewall ladder.
fn criterion_8() -> Outcome {
    let ladder = FirewallLadder::canned();
    let (sim, r) = ladder.run().map_err(|e| e.to_string())?;
    let t = &r.totals;
    let by = |d: &str| r.drops_by_domain.get(&DomainId::new(d)).copied().unwrap_or(0);
    // UDP (30) stops in D1, SSH (20) in D2, 8080 (10) at the server
    ensure((by("D1"), by("D2"), by("D3")) == (30, 20, 10), || {
        format!("{:?}", r.drops_by_domain)
    })?;
    ensure(
        (
            t.dropped_at_source_edge,
            t.dropped_in_transit,
            t.dropped_at_dp_network,
            t.dropped_at_dp_app,
            t.delivered,
        ) == (30, 20, 0, 10, 40),
        || format!("{t:?}"),
    )?;
    let server = sim.host("server").unwrap().provider.as_ref().unwrap();
    let blocked = server
        .log
        .iter()
        .filter(|q| q.flow.protocol == Protocol::Udp || q.flow.dst_port == 22)
        .count();
    ensure(blocked == 0, || {
        format!("{blocked} blocked packets reached the provider")
    })?;
    ensure(r.link_bytes("s2:2-s3:1") == Some(50), || {
        format!("{:?}", r.link_bytes("s2:2-s3:1"))
    })?;
    ensure(r.injected == 100 && r.conserved(), || "conservation".into())?;
    Ok("50 of 50 blocked packets stopped before D3, per-domain drops 30/20/10, 100 = 40 + 60".into())
}

/// Criterion 9: A burst of capacity + K transfers yields exactly K rate-limit
/// rejections, none of which reach the oracle.
fn criterion_9() -> Outcome {
    let (cap, k) = (10u64, 25u64);
    let config = ControllerConfig {
        bucket_capacity: cap,
        refill_per_tick: 1,
        universe: universe(),
        ..ControllerConfig::default()
    };
    let mut c = Controller::new("A".into(), KeyPair::derive(9, "A"), config).unwrap();
    c.add_switch(SW).unwrap();
    c.mark_interdomain_port(SW, UPLINK).unwrap();
    c.on_local_policy_change(vec![Policy::allow(1, MatchFields::any())]);
    let key = KeyPair::derive(9, "web");
    c.register_subscriber(Subscriber {
        id: "web".into(),
        service_address: web_scope().to_service(),
        key: key.public(),
        kind: SubscriberKind::LocalApp,
    })
    .unwrap();
    let before = c.validations();
    let mut limited = 0;
    for seq in 1..=cap + k {
        let pt = PolicyTransfer::new(
            "web".into(),
            seq,
            vec![Policy::deny(1, MatchFields::any().dst_host(WEB))],
        )
        .signed(&key);
        match c.receive_pt(&pt) {
            Ok(_) => {}
            Err(ControllerError::RateLimited) => limited += 1,
            Err(e) => return Err(format!("seq {seq}: {e}")),
        }
    }
    let used = c.validations() - before;
    ensure(limited == k, || format!("{limited} rate-limited, expected {k}"))?;
    ensure(used == cap, || {
        format!("{used} oracle runs for {cap} admitted transfers")
    })?;
    // one tick later exactly one more gets through
    c.advance_to(1);
    let pt = |seq| PolicyTransfer::new("web".into(), seq, vec![]).signed(&key);
    ensure(c.receive_pt(&pt(100)).is_ok(), || "refilled token refused".into())?;
    ensure(c.receive_pt(&pt(101)) == Err(ControllerError::RateLimited), || {
        "bucket not empty".into()
    })?;
    ensure(c.validations() - before == cap + 1, || {
        "rate-limited transfer was validated".into()
    })?;
    Ok(format!(
        "{} messages, {limited} RateLimited, {used} oracle runs",
        cap + k
    ))
}

/// Every CSV the suite produces, concatenated.
fn all_csv() -> Result<String, String> {
    let mut out = String::new();
    for (file, until) in [("lbac_two_domain.scn", 60), ("firewall_ladder.scn", 10)] {
        for disable in [false, true] {
            let (_, r) = run_scenario(&scenario_text(file), until, disable).map_err(|e| e.to_string())?;
            out.push_str(&r.to_csv());
        }
    }
    out.push_str(&FirewallLadder::canned().run().map_err(|e| e.to_string())?.1.to_csv());
    let cfg = BenchConfig {
        switches: 8,
        flows: 4000,
        ltr: 500,
        ticks: 50,
        ..BenchConfig::default()
    };
    out.push_str(&bench_packet_in(&cfg).to_csv());
    Ok(out)
}

/// Criterion 10: Byte-identical output across runs.
fn criterion_10() -> Outcome {
    let a = all_csv()?;
    let b = all_csv()?;
    ensure(a == b, || "outputs differ".into())?;
    Ok(format!("{} bytes of CSV identical across two runs", a.len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut failed = Vec::new();
    for (n, f) in criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| (*s).to_owned()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {n}: PASS ({detail})"),
            Err(why) => {
                println!("criterion {n}: FAIL ({why})");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
