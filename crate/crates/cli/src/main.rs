//! `peps` command-line tool.
//!
//! Exit codes: 0 success or ACCEPT, 1 REJECT, 2 unreadable or malformed
//! input, 3 a simulation invariant failed.

use std::fmt::Write as _;
use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use peps::controller::DEFAULT_TABLES;
use peps::crypto::{KeyPair, PublicKey};
use peps::dataplane::{MatchFields, Origin, RuleSpec};
use peps::location::{
    issue_ticket, verify_ticket, GeoLocationTable, Issuer, LocationTicket, LocationTicketRequest, LocationZone,
    SecurityClass, ZoneId, LTR_FRESHNESS, LT_MAX_AGE,
};
use peps::policy::text::{parse_policies, parse_transfer, parse_universe};
use peps::policy::{
    check_scope, compile_transfer, validate_pt, validate_rpt, HeaderUniverse, ServiceAddress, Transfer, ValidationError,
};
use peps::simnet::{bench_packet_in, BenchConfig, FirewallLadder, Scenario, SimError, Simulation};
use peps::{DomainId, PortId, SwitchId, Tick};

#[derive(Parser)]
#[command(
    name = "peps",
    version,
    about = "Policy enforcement point as a service: simulator and tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write the per-tick CSV.
    Run(RunArgs),
    /// Check a PT or RPT against a local policy set.
    Validate {
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        transfer: PathBuf,
        #[arg(long)]
        universe: Option<PathBuf>,
        /// Registered service address, `ip:ports` or `ip:*`. Required for a PT.
        #[arg(long)]
        scope: Option<String>,
        /// Key file (or hex public key) the transfer signature must verify with.
        #[arg(long)]
        key: Option<String>,
    },
    /// Print the enforcement-table rules a transfer compiles to.
    Compile {
        transfer: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TABLES)]
        tables: usize,
    },
    /// Location tickets.
    Ticket {
        #[command(subcommand)]
        action: TicketCommand,
    },
    /// Packet-in throughput with and without ticket load.
    Bench {
        #[arg(long, default_value_t = 32)]
        switches: usize,
        #[arg(long, default_value_t = 1000)]
        ltr: u64,
        #[arg(long, default_value_t = 20_000)]
        flows: u64,
        #[arg(long, default_value_t = 200)]
        ticks: Tick,
        #[arg(long, default_value_t = 100)]
        budget: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the canned three-domain firewall chain.
    FirewallChain {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the generated scenario instead of running it.
        #[arg(long)]
        emit_scenario: bool,
    },
    /// Derive a key pair from a seed and a label.
    Keygen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        label: String,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Turn remote-policy enforcement off in every domain.
    #[arg(long)]
    disable_outer: bool,
    /// Extra scenario text appended after the scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Last tick to simulate before draining; defaults to the last
    /// scheduled event.
    #[arg(long)]
    until: Option<Tick>,
    /// Write the control-plane log here.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the ids of packets the data providers granted, one per line.
    #[arg(long)]
    grants: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TicketCommand {
    /// Sign a location ticket request as a host.
    Request {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        ip: Ipv4Addr,
        #[arg(long)]
        time: Tick,
    },
    /// Check a request and attest the host's zone as a controller.
    Issue {
        ltr: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long)]
        zone: u32,
        /// Source address the request arrived from; defaults to the claimed one.
        #[arg(long)]
        observed: Option<Ipv4Addr>,
        #[arg(long)]
        now: Tick,
        #[arg(long, default_value_t = LTR_FRESHNESS)]
        freshness: Tick,
    },
    /// Verify a presented ticket.
    Verify {
        lt: PathBuf,
        /// Issuer key file or hex public key.
        #[arg(long)]
        issuer: String,
        #[arg(long)]
        now: Tick,
        #[arg(long, default_value_t = LT_MAX_AGE)]
        max_age: Tick,
        /// Address the ticket is presented from; defaults to the ticket's.
        #[arg(long)]
        ip: Option<Ipv4Addr>,
        /// Key file or hex public key of the presenter; defaults to the ticket's.
        #[arg(long)]
        host_key: Option<String>,
    },
}

/// Error carrying its exit code; the message goes to standard error.
struct Fail(u8, String);

impl Fail {
    fn input(msg: impl Into<String>) -> Self {
        Fail(2, msg.into())
    }
}

type CmdResult = Result<ExitCode, Fail>;

fn read(path: &Path) -> Result<String, Fail> {
    fs::read_to_string(path).map_err(|e| Fail::input(format!("{}: {e}", path.display())))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<(), Fail> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Fail::input(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Value of the first `<tag> <value>` line.
fn key_field<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    text.lines()
        .find_map(|l| l.trim().strip_prefix(tag)?.strip_prefix(' ').map(str::trim))
}

fn load_secret(path: &Path) -> Result<KeyPair, Fail> {
    let text = read(path)?;
    let hex = key_field(&text, "secret").unwrap_or(text.trim());
    KeyPair::from_secret_hex(hex).map_err(|e| Fail::input(format!("{}: {e}", path.display())))
}

/// A key file (public or secret line) or a bare hex public key.
fn load_public(arg: &str) -> Result<PublicKey, Fail> {
    let path = Path::new(arg);
    if !path.exists() {
        return PublicKey::from_hex(arg).map_err(|e| Fail::input(format!("`{arg}`: {e}")));
    }
    let text = read(path)?;
    if let Some(hex) = key_field(&text, "public") {
        return PublicKey::from_hex(hex).map_err(|e| Fail::input(format!("{arg}: {e}")));
    }
    Ok(load_secret(path)?.public())
}

fn run(a: RunArgs) -> CmdResult {
    let scenario = a.scenario.as_path();
    let config = a.config.as_deref();
    let main = read(scenario)?;
    let main_lines = main.lines().count();
    let mut text = main;
    let extra = config.map(read).transpose()?;
    if let Some(extra) = &extra {
        if !text.ends_with('\n') {
            text.push('\n');
        }
        text.push_str(extra);
    }
    // report positions in whichever file the line came from
    let locate = |line: usize| match config {
        Some(c) if line > main_lines => format!("{}:{}", c.display(), line - main_lines),
        _ => format!("{}:{line}", scenario.display()),
    };
    let mut sc = Scenario::parse(&text).map_err(|e| Fail(2, format!("{}: {}", locate(e.line), e.message)))?;
    if let Some(seed) = a.seed {
        sc.seed = seed;
    }
    let invariant = |e: SimError| match e {
        SimError::Invariant(peps::simnet::InvariantError::Build { line, message }) => {
            Fail(3, format!("{}: {message}", locate(line)))
        }
        other => Fail(3, other.to_string()),
    };
    let mut sim = Simulation::build(&sc).map_err(|e| invariant(e.into()))?;
    if a.disable_outer || sc.disable_outer {
        sim.set_outer_enabled(false);
    }
    let until = a.until.unwrap_or_else(|| sim.horizon());
    let report = sim.run(until).map_err(|e| invariant(e.into()))?;
    write_out(a.out.as_deref(), &report.to_csv())?;
    if let Some(path) = a.log.as_deref() {
        let mut text = String::new();
        for rec in sim.log() {
            let _ = writeln!(text, "{rec}");
        }
        write_out(Some(path), &text)?;
    }
    if let Some(path) = a.grants.as_deref() {
        let text: String = report.dp_grants.iter().map(|id| format!("{id}\n")).collect();
        write_out(Some(path), &text)?;
    }
    let t = &report.totals;
    eprintln!(
        "injected {} delivered {} dropped {} (source edge {}, transit {}, dp network {}, dp app {})",
        report.injected,
        t.delivered,
        t.drops(),
        t.dropped_at_source_edge,
        t.dropped_in_transit,
        t.dropped_at_dp_network,
        t.dropped_at_dp_app
    );
    Ok(ExitCode::SUCCESS)
}

fn reject(e: &ValidationError) -> ExitCode {
    match e.witness() {
        Some(w) => println!("REJECT {} {w}", e.reason()),
        None => println!("REJECT {}", e.reason()),
    }
    eprintln!("{e}");
    ExitCode::from(1)
}

fn validate(
    local: &Path,
    transfer: &Path,
    universe: Option<&Path>,
    scope: Option<&str>,
    key: Option<&str>,
) -> CmdResult {
    let with_path =
        |p: &Path, e: peps::policy::ParseError| Fail::input(format!("{}:{}: {}", p.display(), e.line, e.message));
    let local_set = parse_policies(&read(local)?).map_err(|e| with_path(local, e))?;
    let transfer_doc = parse_transfer(&read(transfer)?).map_err(|e| with_path(transfer, e))?;
    let mut u = match universe {
        Some(p) => parse_universe(&read(p)?).map_err(|e| with_path(p, e))?,
        None => HeaderUniverse::symmetric([], [], peps::dataplane::Protocol::ALL),
    };
    let scope = scope
        .map(|s| {
            s.parse::<ServiceAddress>()
                .map_err(|e| Fail::input(format!("--scope: {e}")))
        })
        .transpose()?;
    if let Some(k) = key {
        let public = load_public(k)?;
        let ok = match &transfer_doc {
            Transfer::Local(pt) => pt.verify(&public),
            Transfer::Remote(rpt) => rpt.verify(&public),
        };
        if !ok {
            return Ok(reject(&ValidationError::BadSignature));
        }
    }
    let result = match &transfer_doc {
        Transfer::Local(pt) => {
            let scope = scope.ok_or_else(|| Fail::input("a PT needs --scope"))?;
            u.add_service(&scope);
            u.fill_empty();
            validate_pt(&local_set, pt, &scope, &u)
        }
        Transfer::Remote(rpt) => {
            if let Some(registered) = scope.filter(|s| *s != rpt.scope) {
                println!("REJECT ScopeMismatch");
                eprintln!("transfer scope {} differs from registered {registered}", rpt.scope);
                return Ok(ExitCode::from(1));
            }
            u.add_service(&rpt.scope);
            u.fill_empty();
            check_scope(&rpt.policies, &rpt.scope).and_then(|()| validate_rpt(&local_set, rpt, &u))
        }
    };
    match result {
        Ok(()) => {
            println!("ACCEPT");
            Ok(ExitCode::SUCCESS)
        }
        Err(ValidationError::Universe(e)) => Err(Fail::input(e.to_string())),
        Err(e) => Ok(reject(&e)),
    }
}

fn fmt_match(m: &MatchFields) -> String {
    fn opt<T: ToString>(v: Option<T>) -> String {
        v.map_or("*".into(), |v| v.to_string())
    }
    format!(
        "src={} dst={} sport={} dport={} proto={}",
        opt(m.src_ip),
        opt(m.dst_ip),
        opt(m.src_port),
        opt(m.dst_port),
        opt(m.protocol)
    )
}

fn fmt_rule(r: &RuleSpec) -> String {
    format!(
        "table={} prio={} origin={} action={} {}",
        r.table_index,
        r.priority,
        r.origin,
        r.action,
        fmt_match(&r.match_fields)
    )
}

fn compile(transfer: &Path, tables: usize) -> CmdResult {
    if tables < 3 {
        return Err(Fail::input("--tables must be at least 3"));
    }
    let doc = parse_transfer(&read(transfer)?)
        .map_err(|e| Fail::input(format!("{}:{}: {}", transfer.display(), e.line, e.message)))?;
    let origin = match &doc {
        Transfer::Local(pt) => Origin::LocalPt(pt.subscriber.clone()),
        Transfer::Remote(rpt) => Origin::RemoteRpt(rpt.origin_domain.clone(), rpt.subscriber.clone()),
    };
    let rules = compile_transfer(doc.policies(), &origin, tables - 1).map_err(|e| Fail(1, e.to_string()))?;
    for r in &rules {
        println!("{}", fmt_rule(r));
    }
    Ok(ExitCode::SUCCESS)
}

fn read_ticket<T: std::str::FromStr<Err = peps::location::TicketError>>(path: &Path) -> Result<T, Fail> {
    read(path)?
        .trim()
        .parse()
        .map_err(|e: peps::location::TicketError| Fail::input(format!("{}: {e}", path.display())))
}

fn ticket(action: TicketCommand) -> CmdResult {
    match action {
        TicketCommand::Request { key, ip, time } => {
            let kp = load_secret(&key)?;
            println!("{}", LocationTicketRequest::new(ip, &kp, time));
            Ok(ExitCode::SUCCESS)
        }
        TicketCommand::Issue {
            ltr,
            key,
            domain,
            zone,
            observed,
            now,
            freshness,
        } => {
            let req: LocationTicketRequest = read_ticket(&ltr)?;
            let kp = load_secret(&key)?;
            let observed = observed.unwrap_or(req.requestor_ip);
            // a one-port table placing the observed host in the given zone
            let mut geo = GeoLocationTable::new();
            let at = (SwitchId(1), PortId(1));
            let zone = LocationZone {
                id: ZoneId(zone),
                label: format!("zone{zone}"),
                class: SecurityClass::Secure,
            };
            geo.add_zone(zone, [at]).map_err(|e| Fail::input(e.to_string()))?;
            geo.track_host(observed, at.0, at.1, now)
                .map_err(|e| Fail::input(e.to_string()))?;
            let domain = DomainId::new(domain);
            let issuer = Issuer {
                domain: &domain,
                key: &kp,
                geo: &geo,
                freshness,
            };
            match issue_ticket(issuer, &req, observed, now) {
                Ok(lt) => {
                    println!("{lt}");
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    println!("REJECT {}", e.reason());
                    eprintln!("{e}");
                    Ok(ExitCode::from(1))
                }
            }
        }
        TicketCommand::Verify {
            lt,
            issuer,
            now,
            max_age,
            ip,
            host_key,
        } => {
            let ticket: LocationTicket = read_ticket(&lt)?;
            let issuer = load_public(&issuer)?;
            let host_key = host_key.map(|k| load_public(&k)).transpose()?;
            let ip = ip.unwrap_or(ticket.requestor_ip);
            let host_key = host_key.unwrap_or(ticket.requestor_key);
            match verify_ticket(&ticket, &issuer, now, max_age, ip, &host_key) {
                Ok(()) => {
                    println!("ACCEPT zone={} ip={}", ticket.zone, ticket.requestor_ip);
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    println!("REJECT {}", e.reason());
                    eprintln!("{e}");
                    Ok(ExitCode::from(1))
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Validate {
            local,
            transfer,
            universe,
            scope,
            key,
        } => validate(&local, &transfer, universe.as_deref(), scope.as_deref(), key.as_deref()),
        Command::Compile { transfer, tables } => compile(&transfer, tables),
        Command::Ticket { action } => ticket(action),
        Command::Bench {
            switches,
            ltr,
            flows,
            ticks,
            budget,
            seed,
            out,
        } => {
            let cfg = BenchConfig {
                switches: switches.max(1),
                flows,
                ltr,
                ticks,
                budget: budget.max(1),
                seed,
                ..BenchConfig::default()
            };
            let samples = bench_packet_in(&cfg);
            write_out(out.as_deref(), &samples.to_csv()).map(|()| ExitCode::SUCCESS)
        }
        Command::FirewallChain { out, emit_scenario } => {
            let ladder = FirewallLadder::canned();
            if emit_scenario {
                write_out(out.as_deref(), &ladder.to_scenario()).map(|()| ExitCode::SUCCESS)
            } else {
                match ladder.run() {
                    Ok((_, report)) => {
                        for (d, n) in &report.drops_by_domain {
                            eprintln!("{d}: {n} dropped");
                        }
                        write_out(out.as_deref(), &report.to_csv()).map(|()| ExitCode::SUCCESS)
                    }
                    Err(e) => Err(Fail(3, e.to_string())),
                }
            }
        }
        Command::Keygen { seed, label } => {
            let kp = KeyPair::derive(seed, &label);
            println!("secret {}\npublic {}", kp.secret_hex(), kp.public());
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
