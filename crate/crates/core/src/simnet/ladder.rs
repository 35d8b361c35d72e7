//! Progressive layered firewall: a chain of domains in front of a data
//! provider, each enforcing a remote policy the provider pushed to it.

use std::fmt::Write as _;
use std::net::Ipv4Addr;

use crate::dataplane::Protocol;
use crate::policy::text::{format_policy, parse_policy};
use crate::policy::Policy;
use crate::simnet::engine::{SimError, Simulation};
use crate::simnet::metrics::MetricsReport;
use crate::Tick;

/// Injection time of the client traffic; leaves room for the RPTs to
/// travel the whole chain.
const START: Tick = 10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficClass {
    pub proto: Protocol,
    pub dport: u16,
    pub count: u32,
}

/// Domains `D1..Dk` in a line. The client sits in `D1`, the data provider
/// in `Dk`. `rungs[i]` is the RPT the provider sends to `D(i+1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirewallLadder {
    pub domains: usize,
    pub rungs: Vec<Vec<Policy>>,
    pub inner: Vec<Policy>,
    pub classes: Vec<TrafficClass>,
    pub seed: u64,
}

pub fn dp_address(domains: usize) -> Ipv4Addr {
    Ipv4Addr::new(10, domains as u8, 0, 10)
}

impl FirewallLadder {
    /// Three domains. D1 blocks UDP, D2 also blocks SSH, and the provider
    /// itself serves only HTTPS.
    pub fn canned() -> Self {
        let dp = dp_address(3);
        let p = |s: &str| parse_policy(&s.replace("DP", &dp.to_string())).expect("canned policy");
        Self {
            domains: 3,
            rungs: vec![
                vec![p("PRIO 10 DENY dst=DP proto=udp")],
                vec![
                    p("PRIO 10 DENY dst=DP proto=udp"),
                    p("PRIO 9 DENY dst=DP dport=22 proto=tcp"),
                ],
            ],
            inner: vec![p("PRIO 10 ALLOW dst=DP dport=443 proto=tcp")],
            classes: vec![
                TrafficClass {
                    proto: Protocol::Udp,
                    dport: 53,
                    count: 30,
                },
                TrafficClass {
                    proto: Protocol::Tcp,
                    dport: 22,
                    count: 20,
                },
                TrafficClass {
                    proto: Protocol::Tcp,
                    dport: 443,
                    count: 40,
                },
                TrafficClass {
                    proto: Protocol::Tcp,
                    dport: 8080,
                    count: 10,
                },
            ],
            seed: 6,
        }
    }

    pub fn to_scenario(&self) -> String {
        let k = self.domains;
        let dp = dp_address(k);
        let mut s = String::new();
        let _ = writeln!(s, "[topology]\nseed {}", self.seed);
        for i in 1..=k {
            let _ = writeln!(s, "domain D{i}\nswitch D{i} s{i}");
        }
        let _ = writeln!(s, "host client 10.1.0.1 s1 3");
        let _ = writeln!(s, "dp server {dp} s{k} 3");
        for i in 1..k {
            let _ = writeln!(s, "link s{i} 2 s{} 1", i + 1);
        }
        let _ = writeln!(s, "\n[policies server]");
        for p in &self.inner {
            let _ = writeln!(s, "{}", format_policy(p));
        }
        let _ = writeln!(s, "\n[subscribers]\nservice D{k} {dp}:*\n\n[channels]");
        for i in 1..k {
            let _ = writeln!(s, "D{i} D{}", i + 1);
        }
        let _ = writeln!(s, "\n[hooks]");
        for (i, rung) in self.rungs.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
            let text: Vec<String> = rung.iter().map(format_policy).collect();
            let _ = writeln!(s, "at 0 rpt service D{} 1 {}", i + 1, text.join("; "));
        }
        let _ = writeln!(s, "\n[inject]");
        let mut sport = 2000u32;
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{START} client server {sport} {} {} count={} flows={}",
                c.dport, c.proto, c.count, c.count
            );
            sport += c.count;
        }
        s
    }

    pub fn run(&self) -> Result<(Simulation, MetricsReport), SimError> {
        let mut sim = Simulation::from_text(&self.to_scenario())?;
        let until = sim.horizon();
        let report = sim.run(until)?;
        Ok((sim, report))
    }
}
