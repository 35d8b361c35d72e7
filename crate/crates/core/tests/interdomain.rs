use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use peps::controller::{Controller, ControllerConfig, Report, TransferRef};
use peps::crypto::KeyPair;
use peps::dataplane::{MatchFields, PacketHeader, PipelineVerdict, Protocol};
use peps::interdomain::{Federation, FederationError, MessageType, SessionState};
use peps::location::{LocationZone, SecurityClass, ZoneId};
use peps::policy::{Policy, RemotePolicyTransfer, ServiceAddress};
use peps::{DomainId, PortId, SwitchId};

const H1: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const H2: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
const DP: Ipv4Addr = Ipv4Addr::new(10, 1, 0, 5);

fn d(s: &str) -> DomainId {
    DomainId::new(s)
}

fn domain(name: &str) -> Controller {
    let mut c = Controller::new(d(name), KeyPair::derive(7, name), ControllerConfig::default()).unwrap();
    c.add_switch(SwitchId(1)).unwrap();
    c.mark_host_port(SwitchId(1), PortId(1)).unwrap();
    c.mark_host_port(SwitchId(1), PortId(2)).unwrap();
    c.mark_interdomain_port(SwitchId(1), PortId(9)).unwrap();
    c.install_route(SwitchId(1), DP, PortId(9)).unwrap();
    for (z, port) in [(1, 1), (2, 2)] {
        c.geo_mut()
            .add_zone(
                LocationZone {
                    id: ZoneId(z),
                    label: format!("zone {z}"),
                    class: SecurityClass::Secure,
                },
                [(SwitchId(1), PortId(port))],
            )
            .unwrap();
    }
    c.on_local_policy_change(vec![Policy::allow(1, MatchFields::any())]);
    c
}

/// A and B, keys provisioned, `db` at DP homed in B.
fn federation() -> Federation {
    let mut fed = Federation::default();
    for n in ["A", "B"] {
        fed.add_controller(domain(n)).unwrap();
    }
    fed.provision_keys();
    fed.connect_domains(&d("A"), &d("B")).unwrap();
    fed.announce_subscriber(
        &d("B"),
        "db".into(),
        ServiceAddress::with_ports(DP, [3306]),
        KeyPair::derive(7, "db").public(),
    )
    .unwrap();
    fed
}

fn b_rpt(seq: u64, policies: Vec<Policy>) -> RemotePolicyTransfer {
    RemotePolicyTransfer::new(
        d("B"),
        "db".into(),
        ServiceAddress::with_ports(DP, [3306]),
        seq,
        policies,
    )
    .signed(&KeyPair::derive(7, "B"))
}

fn to_dp(src: Ipv4Addr) -> PacketHeader {
    PacketHeader::new(src, DP, 40000, 3306, Protocol::Tcp)
}

fn verdict_at_a(fed: &mut Federation, src: Ipv4Addr, port: u32) -> PipelineVerdict {
    let pkt = to_dp(src).with_in_port(PortId(port));
    fed.controller_mut(&d("A"))
        .unwrap()
        .process_packet(SwitchId(1), &pkt)
        .unwrap()
}

#[test]
fn rpt_end_to_end_is_accepted_after_latency() {
    let mut fed = federation();
    let deny = Policy::deny(1, MatchFields::any().src_host(H2).dst_host(DP).dport(3306));
    let receipt = fed.send_rpt(&d("B"), &d("A"), &b_rpt(1, vec![deny]), None).unwrap();
    assert_eq!(receipt.due, 1);
    assert!(fed.take_due(0).is_empty());
    let inbound = fed.take_due(1);
    assert_eq!(inbound.len(), 1);
    let delivery = fed.handle_inbound(inbound.into_iter().next().unwrap());
    assert_eq!(delivery.report, Report::Accept);
    assert_eq!(delivery.kind, Some(MessageType::Rpt));
    let a = fed.controller(&d("A")).unwrap();
    assert!(a.repo().accepted_rpt.contains_key(&(d("B"), "db".into())));
    assert_eq!(verdict_at_a(&mut fed, H2, 2), PipelineVerdict::SendToController);
}

#[test]
fn tampered_envelope_changes_nothing() {
    let mut fed = federation();
    fed.tamper_next(&d("B"), &d("A")).unwrap();
    fed.send_rpt(&d("B"), &d("A"), &b_rpt(1, vec![]), None).unwrap();
    let out = fed.pump();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].report.to_string(), "REJECT BadSignature");
    assert!(fed.controller(&d("A")).unwrap().repo().accepted_rpt.is_empty());
    // the channel still works afterwards
    fed.send_rpt(&d("B"), &d("A"), &b_rpt(1, vec![]), None).unwrap();
    assert_eq!(fed.pump()[0].report, Report::Accept);
}

#[test]
fn replayed_envelope_is_stale() {
    let mut fed = federation();
    fed.send_rpt(&d("B"), &d("A"), &b_rpt(1, vec![]), None).unwrap();
    let first = fed.take_due(1).pop().unwrap();
    assert_eq!(fed.handle_inbound(first.clone()).report, Report::Accept);
    assert_eq!(fed.handle_inbound(first).report.to_string(), "REJECT StaleSequence");
}

#[test]
fn channel_preconditions() {
    let mut fed = Federation::default();
    fed.add_controller(domain("A")).unwrap();
    fed.add_controller(domain("B")).unwrap();
    assert_eq!(
        fed.connect_domains(&d("A"), &d("B")),
        Err(FederationError::MissingPeerKey {
            holder: d("A"),
            missing: d("B")
        })
    );
    assert!(matches!(
        fed.add_controller(domain("A")),
        Err(FederationError::DuplicateDomain(_))
    ));
    fed.provision_keys();
    let id = fed.connect_domains(&d("A"), &d("B")).unwrap();
    assert_eq!(fed.connect_domains(&d("B"), &d("A")).unwrap(), id);
    fed.disconnect(&d("A"), &d("B"));
    assert!(matches!(
        fed.send(&d("A"), &d("B"), MessageType::Rpt, ""),
        Err(FederationError::ChannelDown { .. })
    ));
    fed.connect_domains(&d("A"), &d("B")).unwrap();
    assert!(fed.channel(&d("A"), &d("B")).unwrap().is_up());
}

#[test]
fn messages_relay_through_a_middle_domain() {
    let mut fed = Federation::default();
    for n in ["A", "B", "C"] {
        fed.add_controller(domain(n)).unwrap();
    }
    fed.provision_keys();
    fed.connect_domains(&d("A"), &d("C")).unwrap();
    fed.connect_domains(&d("C"), &d("B")).unwrap();
    fed.announce_subscriber(
        &d("B"),
        "db".into(),
        ServiceAddress::with_ports(DP, [3306]),
        KeyPair::derive(7, "db").public(),
    )
    .unwrap();
    assert_eq!(fed.next_hop(&d("B"), &d("A")), Some(d("C")));
    fed.send_rpt(&d("B"), &d("A"), &b_rpt(1, vec![]), None).unwrap();
    let out = fed.pump();
    assert_eq!(out.len(), 2);
    assert!(out[0].relayed);
    assert_eq!(out[0].at, d("C"));
    assert_eq!(out[1].at, d("A"));
    assert_eq!(out[1].report, Report::Accept);
    assert_eq!(fed.now(), 2);
    assert!(fed.controller(&d("C")).unwrap().repo().accepted_rpt.is_empty());
}

#[test]
fn lbac_session_follows_host_location() {
    let mut fed = federation();
    let zones: BTreeSet<ZoneId> = [ZoneId(1)].into();
    let sid = fed.open_lbac_session(&d("B"), &d("A"), "db".into(), zones).unwrap();
    assert_eq!(fed.session(sid).unwrap().state, SessionState::Active);
    assert!(fed.session(sid).unwrap().bound_hosts.is_empty());

    // no bound hosts yet: H1 is denied even once its flow is cached
    fed.handle_packet_in(&d("A"), SwitchId(1), PortId(1), &to_dp(H1))
        .unwrap();
    assert_eq!(verdict_at_a(&mut fed, H1, 1), PipelineVerdict::Drop);

    // the sighting pushed a binding; B answers with an exempting RPT
    fed.pump();
    assert_eq!(fed.session(sid).unwrap().bound_hosts, [H1].into());
    assert_eq!(verdict_at_a(&mut fed, H1, 1), PipelineVerdict::Forward(PortId(9)));

    // H2 sits in zone 2, which is not allowed
    fed.handle_packet_in(&d("A"), SwitchId(1), PortId(2), &to_dp(H2))
        .unwrap();
    fed.pump();
    assert_eq!(verdict_at_a(&mut fed, H2, 2), PipelineVerdict::Drop);

    // H1 moves to zone 2 and loses access; its cached rule was port-scoped
    assert_eq!(verdict_at_a(&mut fed, H1, 2), PipelineVerdict::SendToController);
    fed.handle_packet_in(&d("A"), SwitchId(1), PortId(2), &to_dp(H1))
        .unwrap();
    fed.pump();
    assert!(fed.session(sid).unwrap().bound_hosts.is_empty());
    assert_eq!(verdict_at_a(&mut fed, H1, 2), PipelineVerdict::Drop);

    fed.teardown(sid).unwrap();
    assert_eq!(fed.session(sid).unwrap().state, SessionState::TornDown);
    let a = fed.controller(&d("A")).unwrap();
    assert!(!a.repo().accepted_rpt.contains_key(&(d("B"), "db".into())));
    a.check_coherence().unwrap();
    fed.teardown(sid).unwrap();
}

#[test]
fn torn_down_session_rejects_late_rpts() {
    let mut fed = federation();
    let sid = fed
        .open_lbac_session(&d("B"), &d("A"), "db".into(), [ZoneId(1)].into())
        .unwrap();
    // a binding update is in flight when the session closes
    fed.handle_packet_in(&d("A"), SwitchId(1), PortId(1), &to_dp(H1))
        .unwrap();
    fed.teardown(sid).unwrap();
    let out = fed.pump();
    assert!(out.iter().any(|o| o.report.to_string() == "REJECT SessionClosed"));
    assert!(fed.controller(&d("A")).unwrap().repo().accepted_rpt.is_empty());
}

#[test]
fn session_for_unknown_subscriber_fails_fast() {
    let mut fed = federation();
    let r = fed.open_lbac_session(&d("B"), &d("A"), "nope".into(), BTreeSet::new());
    assert!(matches!(r, Err(FederationError::Controller(_))));
    assert_eq!(fed.sessions().count(), 0);
    assert_eq!(
        fed.teardown(peps::interdomain::SessionId(42)),
        Err(FederationError::UnknownSession(peps::interdomain::SessionId(42)))
    );
}

#[test]
fn revoked_rpt_leaves_no_rules() {
    let mut fed = federation();
    fed.open_lbac_session(&d("B"), &d("A"), "db".into(), [ZoneId(1)].into())
        .unwrap();
    let a = fed.controller_mut(&d("A")).unwrap();
    let t = TransferRef::Remote(d("B"), "db".into());
    assert!(a.revoke_transfer(&t).unwrap() > 0);
    assert!(a.pipeline(SwitchId(1)).unwrap().rules().all(|r| !r.origin.is_peps()));
}
