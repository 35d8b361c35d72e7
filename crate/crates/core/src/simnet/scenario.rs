//! Line-oriented scenario files. See `scenarios/GRAMMAR.md` for the format.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;
use std::str::FromStr;

use crate::dataplane::Protocol;
use crate::location::{SecurityClass, ZoneId};
use crate::policy::text::{parse_policy, ParseError};
use crate::policy::{Policy, ServiceAddress};
use crate::{DomainId, PortId, SubscriberId, Tick};

pub const DEFAULT_BUDGET: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchDecl {
    pub name: String,
    pub domain: DomainId,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostDecl {
    pub name: String,
    pub ip: Ipv4Addr,
    pub switch: String,
    pub port: PortId,
    /// `Some` for a data provider: its service ports, `None` inside meaning
    /// every port.
    pub provider: Option<Option<BTreeSet<u16>>>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkDecl {
    pub a: (String, PortId),
    pub b: (String, PortId),
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZoneDecl {
    pub domain: DomainId,
    pub id: ZoneId,
    pub class: SecurityClass,
    pub label: String,
    pub ports: Vec<(String, PortId)>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriberDecl {
    pub id: SubscriberId,
    pub home: DomainId,
    pub address: ServiceAddress,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectDecl {
    pub tick: Tick,
    pub host: String,
    /// Host name or dotted IPv4 address.
    pub dst: String,
    /// Forged source address; the host's own address when `None`.
    pub src: Option<Ipv4Addr>,
    pub sport: u16,
    pub dport: u16,
    pub proto: Protocol,
    pub count: u32,
    /// Packets cycle through this many source ports starting at `sport`.
    pub flows: u32,
    pub interval: Tick,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HookAction {
    Pt {
        subscriber: SubscriberId,
        seq: u64,
        policies: Vec<Policy>,
    },
    Rpt {
        subscriber: SubscriberId,
        target: DomainId,
        seq: u64,
        policies: Vec<Policy>,
    },
    LbacOpen {
        provider: DomainId,
        requestor: DomainId,
        subscriber: SubscriberId,
        zones: BTreeSet<ZoneId>,
    },
    LbacClose {
        session: u64,
    },
    Move {
        host: String,
        switch: String,
        port: PortId,
    },
    Pin {
        host: String,
    },
    Ltr {
        host: String,
        count: u32,
        claim: Option<Ipv4Addr>,
    },
    Local {
        domain: DomainId,
        policies: Vec<Policy>,
    },
    DisableOuter,
    EnableOuter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookDecl {
    pub tick: Tick,
    pub action: HookAction,
    pub line: usize,
}

/// A parsed scenario. Names are resolved when the simulation is built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub seed: u64,
    pub latency: Tick,
    pub budget: usize,
    pub domains: Vec<(DomainId, usize)>,
    pub switches: Vec<SwitchDecl>,
    pub hosts: Vec<HostDecl>,
    /// Access ports with nothing attached yet, for later moves.
    pub spare_ports: Vec<(String, PortId, usize)>,
    pub links: Vec<LinkDecl>,
    pub zones: Vec<ZoneDecl>,
    /// Keyed by domain name, or by provider host name for its inner PEP.
    pub policies: BTreeMap<String, (Vec<Policy>, usize)>,
    pub subscribers: Vec<SubscriberDecl>,
    pub channels: Vec<(DomainId, DomainId, usize)>,
    pub injections: Vec<InjectDecl>,
    pub hooks: Vec<HookDecl>,
    pub disable_outer: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            latency: crate::interdomain::DEFAULT_LATENCY,
            budget: DEFAULT_BUDGET,
            domains: Vec::new(),
            switches: Vec::new(),
            hosts: Vec::new(),
            spare_ports: Vec::new(),
            links: Vec::new(),
            zones: Vec::new(),
            policies: BTreeMap::new(),
            subscribers: Vec::new(),
            channels: Vec::new(),
            injections: Vec::new(),
            hooks: Vec::new(),
            disable_outer: false,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    None,
    Topology,
    Zones,
    Policies,
    Subscribers,
    Channels,
    Inject,
    Hooks,
}

fn num<T: FromStr>(tok: &str, what: &str) -> Result<T, String> {
    tok.parse().map_err(|_| format!("bad {what} `{tok}`"))
}

fn port(tok: &str) -> Result<PortId, String> {
    num(tok, "port").map(PortId)
}

/// `sw:port`
fn switch_port(tok: &str) -> Result<(String, PortId), String> {
    let (sw, p) = tok
        .split_once(':')
        .ok_or_else(|| format!("expected `switch:port`, got `{tok}`"))?;
    Ok((sw.to_owned(), port(p)?))
}

fn ports_list(s: &str) -> Result<Option<BTreeSet<u16>>, String> {
    if s == "*" {
        return Ok(None);
    }
    s.split(',').map(|p| num(p, "port")).collect::<Result<_, _>>().map(Some)
}

/// `-` for none, otherwise policy lines separated by `;`.
fn inline_policies(s: &str) -> Result<Vec<Policy>, String> {
    let s = s.trim();
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(';').map(|p| parse_policy(p.trim())).collect()
}

/// Splits `key=value` options off the end of a token list.
fn options<'a>(toks: &[&'a str], allowed: &[&str]) -> Result<BTreeMap<&'a str, &'a str>, String> {
    let mut out = BTreeMap::new();
    for tok in toks {
        let (k, v) = tok.split_once('=').ok_or_else(|| format!("unexpected `{tok}`"))?;
        if !allowed.contains(&k) {
            return Err(format!("unknown option `{k}`"));
        }
        if out.insert(k, v).is_some() {
            return Err(format!("option `{k}` given twice"));
        }
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(a, _)| a).trim()
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let mut sc = Scenario::default();
        let mut section = Section::None;
        let mut policy_key = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |m: String| ParseError::new(line, m);
            let trimmed = raw.trim();
            if let Some(header) = trimmed.strip_prefix('[') {
                let header = header
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?;
                let mut parts = header.split_whitespace();
                section = match (parts.next(), parts.next(), parts.next()) {
                    (Some("topology"), None, _) => Section::Topology,
                    (Some("zones"), None, _) => Section::Zones,
                    (Some("subscribers"), None, _) => Section::Subscribers,
                    (Some("channels"), None, _) => Section::Channels,
                    (Some("inject"), None, _) => Section::Inject,
                    (Some("hooks"), None, _) => Section::Hooks,
                    (Some("policies"), Some(key), None) => {
                        if sc.policies.contains_key(key) {
                            return Err(err(format!("second [policies {key}] section")));
                        }
                        policy_key = key.to_owned();
                        sc.policies.insert(policy_key.clone(), (Vec::new(), line));
                        Section::Policies
                    }
                    _ => return Err(err(format!("unknown section `[{header}]`"))),
                };
                continue;
            }
            if section == Section::Policies {
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    continue;
                }
                let p = parse_policy(trimmed).map_err(err)?;
                sc.policies.get_mut(&policy_key).expect("inserted at header").0.push(p);
                continue;
            }
            let body = strip_comment(raw);
            if body.is_empty() {
                continue;
            }
            let toks: Vec<&str> = body.split_whitespace().collect();
            let r = match section {
                Section::None => Err("content before the first section".to_owned()),
                Section::Topology => sc.topology_line(&toks, line),
                Section::Zones => sc.zone_line(&toks, line),
                Section::Subscribers => sc.subscriber_line(&toks, line),
                Section::Channels => match toks[..] {
                    [a, b] => {
                        sc.channels.push((DomainId::new(a), DomainId::new(b), line));
                        Ok(())
                    }
                    _ => Err("expected `<domain> <domain>`".to_owned()),
                },
                Section::Inject => sc.inject_line(&toks, line),
                Section::Hooks => sc.hook_line(body, &toks, line),
                Section::Policies => unreachable!("handled above"),
            };
            r.map_err(err)?;
        }
        Ok(sc)
    }

    fn topology_line(&mut self, toks: &[&str], line: usize) -> Result<(), String> {
        match toks {
            ["seed", n] => self.seed = num(n, "seed")?,
            ["latency", n] => self.latency = num(n, "latency")?,
            ["budget", n] => {
                self.budget = num(n, "budget")?;
                if self.budget == 0 {
                    return Err("budget must be at least 1".into());
                }
            }
            ["domain", name] => self.domains.push((DomainId::new(*name), line)),
            ["switch", domain, name] => self.switches.push(SwitchDecl {
                name: (*name).to_owned(),
                domain: DomainId::new(*domain),
                line,
            }),
            ["host", name, ip, sw, p] => self.hosts.push(HostDecl {
                name: (*name).to_owned(),
                ip: num(ip, "address")?,
                switch: (*sw).to_owned(),
                port: port(p)?,
                provider: None,
                line,
            }),
            ["dp", name, ip, sw, p, rest @ ..] => {
                let opts = options(rest, &["ports"])?;
                self.hosts.push(HostDecl {
                    name: (*name).to_owned(),
                    ip: num(ip, "address")?,
                    switch: (*sw).to_owned(),
                    port: port(p)?,
                    provider: Some(opts.get("ports").map_or(Ok(None), |s| ports_list(s))?),
                    line,
                });
            }
            ["host-port", sw, p] => self.spare_ports.push(((*sw).to_owned(), port(p)?, line)),
            ["link", a, pa, b, pb] => self.links.push(LinkDecl {
                a: ((*a).to_owned(), port(pa)?),
                b: ((*b).to_owned(), port(pb)?),
                line,
            }),
            _ => return Err(format!("unrecognised topology line `{}`", toks.join(" "))),
        }
        Ok(())
    }

    /// `<domain> <zone-id> <secure|nonsecure> <label> <sw:port>...`
    fn zone_line(&mut self, toks: &[&str], line: usize) -> Result<(), String> {
        let [domain, id, class, label, ports @ ..] = toks else {
            return Err("expected `<domain> <id> <class> <label> <switch:port>...`".into());
        };
        let class = match *class {
            "secure" => SecurityClass::Secure,
            "nonsecure" => SecurityClass::NonSecure,
            other => return Err(format!("unknown security class `{other}`")),
        };
        self.zones.push(ZoneDecl {
            domain: DomainId::new(*domain),
            id: num(id, "zone id")?,
            class,
            label: (*label).to_owned(),
            ports: ports.iter().map(|t| switch_port(t)).collect::<Result<_, _>>()?,
            line,
        });
        Ok(())
    }

    /// `<id> <home-domain> <ip>:<ports|*>`
    fn subscriber_line(&mut self, toks: &[&str], line: usize) -> Result<(), String> {
        let [id, home, addr] = toks else {
            return Err("expected `<id> <home-domain> <ip>:<ports>`".into());
        };
        self.subscribers.push(SubscriberDecl {
            id: SubscriberId::new(*id),
            home: DomainId::new(*home),
            address: addr.parse()?,
            line,
        });
        Ok(())
    }

    /// `<tick> <host> <dst> <sport> <dport> <proto> [count=N] [flows=N] [interval=K] [src=IP]`
    fn inject_line(&mut self, toks: &[&str], line: usize) -> Result<(), String> {
        let [tick, host, dst, sport, dport, proto, rest @ ..] = toks else {
            return Err("expected `<tick> <host> <dst> <sport> <dport> <proto> [options]`".into());
        };
        let opts = options(rest, &["count", "flows", "interval", "src"])?;
        let opt = |k: &str, default: u64| opts.get(k).map_or(Ok(default), |v| num(v, k));
        let count = opt("count", 1)? as u32;
        let flows = opt("flows", 1)? as u32;
        if flows == 0 {
            return Err("flows must be at least 1".into());
        }
        self.injections.push(InjectDecl {
            tick: num(tick, "tick")?,
            host: (*host).to_owned(),
            dst: (*dst).to_owned(),
            src: opts.get("src").map(|v| num(v, "address")).transpose()?,
            sport: num(sport, "port")?,
            dport: num(dport, "port")?,
            proto: proto.parse()?,
            count,
            flows,
            interval: opt("interval", 0)?,
            line,
        });
        Ok(())
    }

    fn hook_line(&mut self, body: &str, toks: &[&str], line: usize) -> Result<(), String> {
        if toks == ["disable-outer"] {
            self.disable_outer = true;
            return Ok(());
        }
        let ["at", tick, verb, args @ ..] = toks else {
            return Err("expected `at <tick> <action> ...` or `disable-outer`".into());
        };
        let tick = num(tick, "tick")?;
        // policy text may contain spaces; take everything after the n-th token
        let tail = |n: usize| -> &str {
            let mut rest = body;
            for _ in 0..n {
                rest = rest.trim_start();
                rest = rest.find(char::is_whitespace).map_or("", |i| &rest[i..]);
            }
            rest.trim()
        };
        let action = match (*verb, args) {
            ("pt", [sub, seq, ..]) => HookAction::Pt {
                subscriber: SubscriberId::new(*sub),
                seq: num(seq, "sequence")?,
                policies: inline_policies(tail(5))?,
            },
            ("rpt", [sub, target, seq, ..]) => HookAction::Rpt {
                subscriber: SubscriberId::new(*sub),
                target: DomainId::new(*target),
                seq: num(seq, "sequence")?,
                policies: inline_policies(tail(6))?,
            },
            ("local", [domain, ..]) => HookAction::Local {
                domain: DomainId::new(*domain),
                policies: inline_policies(tail(4))?,
            },
            ("lbac-open", [provider, requestor, sub, zones]) => HookAction::LbacOpen {
                provider: DomainId::new(*provider),
                requestor: DomainId::new(*requestor),
                subscriber: SubscriberId::new(*sub),
                zones: if *zones == "-" {
                    BTreeSet::new()
                } else {
                    zones.split(',').map(|z| num(z, "zone id")).collect::<Result<_, _>>()?
                },
            },
            ("lbac-close", [session]) => HookAction::LbacClose {
                session: num(session, "session id")?,
            },
            ("move", [host, sw, p]) => HookAction::Move {
                host: (*host).to_owned(),
                switch: (*sw).to_owned(),
                port: port(p)?,
            },
            ("pin", [host]) => HookAction::Pin {
                host: (*host).to_owned(),
            },
            ("ltr", [host, rest @ ..]) => {
                let opts = options(rest, &["count", "claim"])?;
                HookAction::Ltr {
                    host: (*host).to_owned(),
                    count: opts.get("count").map_or(Ok(1), |v| num(v, "count"))?,
                    claim: opts.get("claim").map(|v| num(v, "address")).transpose()?,
                }
            }
            ("disable-outer", []) => HookAction::DisableOuter,
            ("enable-outer", []) => HookAction::EnableOuter,
            _ => return Err(format!("unrecognised hook `{verb}` or wrong arguments")),
        };
        self.hooks.push(HookDecl { tick, action, line });
        Ok(())
    }
}

impl FromStr for Scenario {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
[topology]
seed 9
domain A
switch A s1
host h1 10.0.0.1 s1 1   # a client
dp db 10.0.0.9 s1 2 ports=5432
host-port s1 3

[zones]
A 1 secure Lab s1:1 s1:3

[policies A]
PRIO 1 ALLOW # everything

[inject]
0 h1 db 1000 5432 tcp count=3 flows=2

[hooks]
at 2 pt db 1 PRIO 5 DENY dst=10.0.0.9 dport=5432; PRIO 4 DENY dst=10.0.0.9
at 3 lbac-open A A db 1,2
disable-outer
";

    #[test]
    fn parses_every_section() {
        let sc = Scenario::parse(SMALL).unwrap();
        assert_eq!(sc.seed, 9);
        assert_eq!(sc.hosts.len(), 2);
        assert_eq!(sc.hosts[1].provider, Some(Some([5432].into())));
        assert_eq!(sc.spare_ports.len(), 1);
        assert_eq!(sc.zones[0].ports.len(), 2);
        assert_eq!(sc.policies["A"].0.len(), 1);
        assert_eq!(sc.injections[0].count, 3);
        assert_eq!(sc.injections[0].flows, 2);
        match &sc.hooks[0].action {
            HookAction::Pt { policies, seq, .. } => {
                assert_eq!(*seq, 1);
                assert_eq!(policies.len(), 2);
            }
            other => panic!("{other:?}"),
        }
        assert!(sc.disable_outer);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = SMALL.replace("switch A s1", "switch A");
        assert_eq!(Scenario::parse(&bad).unwrap_err().line, 4);
        let bad = SMALL.replace("PRIO 1 ALLOW", "PRIO x ALLOW");
        assert_eq!(Scenario::parse(&bad).unwrap_err().line, 13);
        assert_eq!(Scenario::parse("stray\n").unwrap_err().line, 1);
        assert_eq!(Scenario::parse("[nope]\n").unwrap_err().line, 1);
        let bad = SMALL.replace("count=3", "count=3 color=red");
        assert_eq!(Scenario::parse(&bad).unwrap_err().line, 16);
    }
}
