//! Packet-in throughput under location-ticket load.

use std::net::Ipv4Addr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataplane::{PacketHeader, Protocol};
use crate::location::{SecurityClass, ZoneId};
use crate::simnet::engine::Simulation;
use crate::simnet::scenario::{HookAction, HookDecl, HostDecl, LinkDecl, Scenario, SwitchDecl, ZoneDecl};
use crate::{DomainId, PortId, Tick};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchConfig {
    pub switches: usize,
    pub hosts_per_switch: usize,
    /// New flows over the whole window, spread evenly.
    pub flows: u64,
    /// Location ticket requests over the whole window, spread evenly.
    pub ltr: u64,
    pub ticks: Tick,
    pub budget: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            switches: 32,
            hosts_per_switch: 2,
            flows: 20_000,
            ltr: 1000,
            ticks: 200,
            budget: 100,
            seed: 1,
        }
    }
}

/// Packet-ins handled per tick, without and with the ticket load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchSamples {
    pub baseline: Vec<u64>,
    pub with_ltr: Vec<u64>,
}

impl BenchSamples {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["tick", "baseline", "with_ltr"])
            .expect("in-memory write");
        for (t, (b, l)) in self.baseline.iter().zip(&self.with_ltr).enumerate() {
            w.write_record([t.to_string(), b.to_string(), l.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
    }
}

fn host_ip(switch: usize, host: usize) -> Ipv4Addr {
    Ipv4Addr::new(10, (switch >> 8) as u8, (switch & 0xff) as u8, host as u8 + 1)
}

/// One domain, switches in a line, every flow local to one switch so each
/// costs exactly one packet-in.
fn topology(cfg: &BenchConfig) -> Scenario {
    let domain = DomainId::new("bench");
    let mut sc = Scenario {
        seed: cfg.seed,
        budget: cfg.budget,
        domains: vec![(domain.clone(), 0)],
        ..Scenario::default()
    };
    let uplink = cfg.hosts_per_switch as u32 + 1;
    for s in 0..cfg.switches {
        let name = format!("s{s}");
        sc.switches.push(SwitchDecl {
            name: name.clone(),
            domain: domain.clone(),
            line: 0,
        });
        for h in 0..cfg.hosts_per_switch {
            sc.hosts.push(HostDecl {
                name: format!("h{s}_{h}"),
                ip: host_ip(s, h),
                switch: name.clone(),
                port: PortId(h as u32 + 1),
                provider: None,
                line: 0,
            });
        }
        sc.zones.push(ZoneDecl {
            domain: domain.clone(),
            id: ZoneId(s as u32 + 1),
            class: SecurityClass::Secure,
            label: name.clone(),
            ports: (1..=cfg.hosts_per_switch as u32)
                .map(|p| (name.clone(), PortId(p)))
                .collect(),
            line: 0,
        });
        if s > 0 {
            sc.links.push(LinkDecl {
                a: (format!("s{}", s - 1), PortId(uplink + 1)),
                b: (name, PortId(uplink)),
                line: 0,
            });
        }
    }
    sc
}

fn run(cfg: &BenchConfig, ltr: u64) -> Vec<u64> {
    let mut sc = topology(cfg);
    let hosts = cfg.switches * cfg.hosts_per_switch;
    for i in 0..ltr {
        let h = i as usize % hosts;
        sc.hooks.push(HookDecl {
            tick: i * cfg.ticks / ltr,
            action: HookAction::Ltr {
                host: format!("h{}_{}", h / cfg.hosts_per_switch, h % cfg.hosts_per_switch),
                count: 1,
                claim: None,
            },
            line: 0,
        });
    }
    let mut sim = Simulation::build(&sc).expect("generated topology is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for f in 0..cfg.flows {
        let s = (f % cfg.switches as u64) as usize;
        let src = rng.random_range(0..cfg.hosts_per_switch);
        let dst = (src + rng.random_range(1..cfg.hosts_per_switch.max(2))) % cfg.hosts_per_switch;
        let sport = 1024 + (f / cfg.switches as u64) as u16;
        let dport = rng.random_range(1..1024);
        let pkt = PacketHeader::new(Ipv4Addr::UNSPECIFIED, host_ip(s, dst), sport, dport, Protocol::Tcp);
        sim.inject(f * cfg.ticks / cfg.flows, &format!("h{s}_{src}"), pkt)
            .expect("generated host exists");
    }
    sim.run_until(cfg.ticks.saturating_sub(1)).flow_throughput()
}

/// Runs the flow load twice, without and with `cfg.ltr` ticket requests.
pub fn bench_packet_in(cfg: &BenchConfig) -> BenchSamples {
    BenchSamples {
        baseline: run(cfg, 0),
        with_ltr: run(cfg, cfg.ltr),
    }
}
