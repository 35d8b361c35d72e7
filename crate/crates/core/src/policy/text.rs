//! Line-oriented text encoding of policies, transfers and header universes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use thiserror::Error;

use crate::crypto::Signature;
use crate::dataplane::{host_net, MatchFields, Protocol};
use crate::policy::{Decision, HeaderUniverse, Policy, PolicyTransfer, RemotePolicyTransfer, ServiceAddress, Transfer};
use crate::{DomainId, SubscriberId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    /// 1-based; 0 when the error concerns the whole document.
    pub line: usize,
    pub message: String,
}

impl ParseError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            message: message.into(),
        }
    }
}

fn fmt_net(net: &Option<Ipv4Net>) -> String {
    match net {
        None => "*".to_owned(),
        Some(n) if n.prefix_len() == 32 => n.addr().to_string(),
        Some(n) => n.to_string(),
    }
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "*".to_owned(), T::to_string)
}

pub fn format_policy(p: &Policy) -> String {
    let decision = match p.decision {
        Decision::Allow => "ALLOW".to_owned(),
        Decision::Deny => "DENY".to_owned(),
        Decision::RateLimit {
            max_new_flows,
            window_ticks,
        } => format!("RATELIMIT {max_new_flows} {window_ticks}"),
    };
    let m = &p.match_fields;
    let mut line = format!(
        "PRIO {} {decision} src={} dst={} sport={} dport={} proto={}",
        p.priority,
        fmt_net(&m.src_ip),
        fmt_net(&m.dst_ip),
        fmt_opt(&m.src_port),
        fmt_opt(&m.dst_port),
        fmt_opt(&m.protocol),
    );
    if !p.comment.is_empty() {
        let _ = write!(line, " # {}", p.comment);
    }
    line
}

fn parse_net(v: &str) -> Result<Option<Ipv4Net>, String> {
    if v == "*" {
        return Ok(None);
    }
    if v.contains('/') {
        let net: Ipv4Net = v.parse().map_err(|_| format!("bad prefix `{v}`"))?;
        return Ok(Some(net.trunc()));
    }
    let ip: Ipv4Addr = v.parse().map_err(|_| format!("bad IPv4 address `{v}`"))?;
    Ok(Some(host_net(ip)))
}

fn parse_field<T: std::str::FromStr>(v: &str, what: &str) -> Result<Option<T>, String> {
    if v == "*" {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| format!("bad {what} `{v}`"))
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T, String> {
    let tok = tok.ok_or_else(|| format!("missing {what}"))?;
    tok.parse().map_err(|_| format!("bad {what} `{tok}`"))
}

/// Parses one `PRIO ...` line. Omitted match fields are wildcards.
pub fn parse_policy(line: &str) -> Result<Policy, String> {
    let (body, comment) = match line.split_once('#') {
        Some((b, c)) => (b, c.trim()),
        None => (line, ""),
    };
    let mut toks = body.split_whitespace();
    if toks.next() != Some("PRIO") {
        return Err("policy line must start with `PRIO`".into());
    }
    let priority = parse_num(toks.next(), "priority")?;
    let decision = match toks.next() {
        Some("ALLOW") => Decision::Allow,
        Some("DENY") => Decision::Deny,
        Some("RATELIMIT") => Decision::RateLimit {
            max_new_flows: parse_num(toks.next(), "rate limit flow count")?,
            window_ticks: parse_num(toks.next(), "rate limit window")?,
        },
        Some(other) => return Err(format!("unknown decision `{other}`")),
        None => return Err("missing decision".into()),
    };
    let mut m = MatchFields::any();
    let mut seen = BTreeSet::new();
    for tok in toks {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected `field=value`, got `{tok}`"))?;
        if !seen.insert(key) {
            return Err(format!("field `{key}` given twice"));
        }
        match key {
            "src" => m.src_ip = parse_net(value)?,
            "dst" => m.dst_ip = parse_net(value)?,
            "sport" => m.src_port = parse_field(value, "port")?,
            "dport" => m.dst_port = parse_field(value, "port")?,
            "proto" => m.protocol = parse_field(value, "protocol")?,
            other => return Err(format!("unknown field `{other}`")),
        }
    }
    Ok(Policy::new(priority, decision, m).with_comment(comment))
}

fn is_blank(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

/// A bare policy list, one per line. Blank lines and `#` lines are skipped.
pub fn parse_policies(text: &str) -> Result<Vec<Policy>, ParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !is_blank(l))
        .map(|(i, l)| parse_policy(l.trim()).map_err(|e| ParseError::new(i + 1, e)))
        .collect()
}

pub fn format_policies(policies: &[Policy]) -> String {
    policies.iter().map(|p| format_policy(p) + "\n").collect()
}

pub(crate) fn format_unsigned(headers: &[String], policies: &[Policy]) -> String {
    let mut out = String::new();
    for h in headers {
        out.push_str(h);
        out.push('\n');
    }
    out.push_str(&format_policies(policies));
    out
}

pub(crate) fn format_document(headers: &[String], policies: &[Policy], sig: Option<&Signature>) -> String {
    let mut out = format_unsigned(headers, policies);
    if let Some(sig) = sig {
        let _ = writeln!(out, "SIG {}", sig.to_hex());
    }
    out
}

/// Parses a PT or RPT envelope. The presence of `DOMAIN` or `SCOPE` makes
/// it an RPT.
pub fn parse_transfer(text: &str) -> Result<Transfer, ParseError> {
    let mut subscriber = None;
    let mut domain = None;
    let mut scope = None;
    let mut seq = None;
    let mut sig = None;
    let mut policies = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        if is_blank(raw) {
            continue;
        }
        let line = raw.trim();
        if sig.is_some() {
            return Err(ParseError::new(n, "nothing may follow `SIG`"));
        }
        let (kw, rest) = line.split_once(' ').unwrap_or((line, ""));
        let rest = rest.trim();
        let dup = |what: &str| ParseError::new(n, format!("`{what}` given twice"));
        match kw {
            "PRIO" => {
                policies.push(parse_policy(line).map_err(|e| ParseError::new(n, e))?);
                continue;
            }
            "SIG" => {
                let s = Signature::from_hex(rest).map_err(|e| ParseError::new(n, e.to_string()))?;
                sig = Some(s);
                continue;
            }
            _ => {}
        }
        if !policies.is_empty() {
            return Err(ParseError::new(n, format!("header `{kw}` after policies")));
        }
        if rest.is_empty() {
            return Err(ParseError::new(n, format!("`{kw}` needs a value")));
        }
        match kw {
            "SUBSCRIBER" if subscriber.is_some() => return Err(dup(kw)),
            "SUBSCRIBER" => subscriber = Some(SubscriberId::new(rest)),
            "DOMAIN" if domain.is_some() => return Err(dup(kw)),
            "DOMAIN" => domain = Some(DomainId::new(rest)),
            "SCOPE" if scope.is_some() => return Err(dup(kw)),
            "SCOPE" => scope = Some(rest.parse::<ServiceAddress>().map_err(|e| ParseError::new(n, e))?),
            "SEQ" if seq.is_some() => return Err(dup(kw)),
            "SEQ" => {
                seq = Some(
                    rest.parse::<u64>()
                        .map_err(|_| ParseError::new(n, format!("bad sequence number `{rest}`")))?,
                )
            }
            other => return Err(ParseError::new(n, format!("unknown keyword `{other}`"))),
        }
    }
    let subscriber = subscriber.ok_or_else(|| ParseError::new(0, "missing `SUBSCRIBER`"))?;
    let sequence = seq.ok_or_else(|| ParseError::new(0, "missing `SEQ`"))?;
    match (domain, scope) {
        (None, None) => Ok(Transfer::Local(PolicyTransfer {
            subscriber,
            policies,
            sequence,
            signature: sig,
        })),
        (Some(origin_domain), Some(scope)) => Ok(Transfer::Remote(RemotePolicyTransfer {
            origin_domain,
            subscriber,
            scope,
            policies,
            sequence,
            signature: sig,
        })),
        (Some(_), None) => Err(ParseError::new(0, "RPT is missing `SCOPE`")),
        (None, Some(_)) => Err(ParseError::new(0, "RPT is missing `DOMAIN`")),
    }
}

fn parse_list<T: std::str::FromStr + Ord>(n: usize, items: &[&str], what: &str) -> Result<BTreeSet<T>, ParseError> {
    items
        .iter()
        .map(|s| s.parse().map_err(|_| ParseError::new(n, format!("bad {what} `{s}`"))))
        .collect()
}

/// Parses a universe description:
///
/// ```text
/// hosts 10.0.0.1 10.0.0.2   # both src and dst
/// src 10.0.9.9              # src only
/// dst 10.0.1.5
/// ports 22 80               # both sport and dport
/// sport 40000
/// dport 3306
/// proto tcp udp
/// cap 100000
/// ```
///
/// Lists accumulate. `proto` defaults to all protocols when absent.
pub fn parse_universe(text: &str) -> Result<HeaderUniverse, ParseError> {
    let mut u = HeaderUniverse::symmetric([], [], []);
    let mut proto_given = false;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let (kw, items) = (toks[0], &toks[1..]);
        match kw {
            "hosts" => {
                let ips: BTreeSet<Ipv4Addr> = parse_list(n, items, "IPv4 address")?;
                u.src_ips.extend(&ips);
                u.dst_ips.extend(ips);
            }
            "src" => u.src_ips.extend(parse_list::<Ipv4Addr>(n, items, "IPv4 address")?),
            "dst" => u.dst_ips.extend(parse_list::<Ipv4Addr>(n, items, "IPv4 address")?),
            "ports" => {
                let ps: BTreeSet<u16> = parse_list(n, items, "port")?;
                u.src_ports.extend(&ps);
                u.dst_ports.extend(ps);
            }
            "sport" => u.src_ports.extend(parse_list::<u16>(n, items, "port")?),
            "dport" => u.dst_ports.extend(parse_list::<u16>(n, items, "port")?),
            "proto" => {
                proto_given = true;
                u.protocols.extend(parse_list::<Protocol>(n, items, "protocol")?);
            }
            "cap" => {
                let [v] = items else {
                    return Err(ParseError::new(n, "`cap` takes one number"));
                };
                u.cap = v.parse().map_err(|_| ParseError::new(n, format!("bad cap `{v}`")))?;
            }
            other => return Err(ParseError::new(n, format!("unknown keyword `{other}`"))),
        }
    }
    if !proto_given {
        u.protocols.extend(Protocol::ALL);
    }
    Ok(u)
}
