use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::dataplane::{FlowKey, FlowRule, FlowTable, OriginFilter, PacketHeader, RuleAction, RuleId, RuleSpec};
use crate::{PortId, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PipelineVerdict {
    Forward(PortId),
    Drop,
    SendToController,
    RateLimited,
}

impl PipelineVerdict {
    /// Drop and RateLimited both discard the packet.
    pub fn is_discard(&self) -> bool {
        matches!(self, PipelineVerdict::Drop | PipelineVerdict::RateLimited)
    }
}

impl fmt::Display for PipelineVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineVerdict::Forward(p) => write!(f, "forward:{}", p.0),
            PipelineVerdict::Drop => f.write_str("drop"),
            PipelineVerdict::SendToController => f.write_str("controller"),
            PipelineVerdict::RateLimited => f.write_str("ratelimited"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("a pipeline needs at least 2 tables, got {0}")]
    TooFewTables(usize),
    #[error("table {index} does not exist (pipeline has {tables})")]
    NoSuchTable { index: usize, tables: usize },
    #[error("{origin} rule may not be placed in table {index}")]
    TablePlacementViolation { origin: String, index: usize },
    #[error("{origin} rule priority {priority} is outside its band")]
    PriorityBandViolation { origin: String, priority: u16 },
    #[error("goto from table {from} to {to} would not move strictly forward")]
    InvalidGoto { from: usize, to: usize },
    #[error("action {action} is not permitted in the enforcement table")]
    ActionNotPermitted { action: String },
    #[error("rate limit window must be at least one tick")]
    EmptyWindow,
    #[error("malformed pipeline: {0}")]
    MalformedPipeline(String),
}

#[derive(Debug, Clone, Default)]
struct Meter {
    window: Tick,
    admitted: BTreeSet<FlowKey>,
}

impl Meter {
    fn admit(&mut self, key: FlowKey, max: u32, window_ticks: Tick, now: Tick) -> bool {
        let window = now / window_ticks;
        if window != self.window {
            self.window = window;
            self.admitted.clear();
        }
        if self.admitted.contains(&key) {
            return true;
        }
        if self.admitted.len() < max as usize {
            self.admitted.insert(key);
            true
        } else {
            false
        }
    }
}

/// An OpenFlow-style multi-table pipeline.
///
/// Tables `0..n-1` hold the domain's own rules. Table `n-1` is the
/// enforcement table: it only ever holds rules compiled from policy
/// transfers, and a packet reaches it only after the local tables allowed it.
#[derive(Debug, Clone)]
pub struct FlowTablePipeline {
    tables: Vec<FlowTable>,
    next_rule_id: u64,
    meters: BTreeMap<RuleId, Meter>,
    enforcement_enabled: bool,
}

/// Path of a packet through the pipeline, assuming every meter admits.
struct Trace {
    meters: Vec<(RuleId, u32, Tick)>,
    verdict: PipelineVerdict,
}

impl FlowTablePipeline {
    pub fn new(tables: usize) -> Result<Self, PipelineError> {
        if tables < 2 {
            return Err(PipelineError::TooFewTables(tables));
        }
        Ok(Self {
            tables: vec![FlowTable::new(); tables],
            next_rule_id: 1,
            meters: BTreeMap::new(),
            enforcement_enabled: true,
        })
    }

    pub fn table_count(&self) -> usize {
        self.tables.len()
    }

    pub fn last_table(&self) -> usize {
        self.tables.len() - 1
    }

    pub fn table(&self, index: usize) -> Option<&FlowTable> {
        self.tables.get(index)
    }

    pub fn rules(&self) -> impl Iterator<Item = &FlowRule> {
        self.tables.iter().flat_map(|t| t.rules())
    }

    pub fn rule_count(&self) -> usize {
        self.tables.iter().map(FlowTable::len).sum()
    }

    /// Bypasses the enforcement table. Models a failed outer defense layer.
    pub fn set_enforcement_enabled(&mut self, enabled: bool) {
        self.enforcement_enabled = enabled;
    }

    pub fn enforcement_enabled(&self) -> bool {
        self.enforcement_enabled
    }

    fn check_spec(&self, spec: &RuleSpec) -> Result<(), PipelineError> {
        let tables = self.tables.len();
        let last = tables - 1;
        if spec.table_index >= tables {
            return Err(PipelineError::NoSuchTable {
                index: spec.table_index,
                tables,
            });
        }
        let placement_ok = if spec.origin.is_peps() {
            spec.table_index == last
        } else {
            spec.table_index < last
        };
        if !placement_ok {
            return Err(PipelineError::TablePlacementViolation {
                origin: spec.origin.to_string(),
                index: spec.table_index,
            });
        }
        if let Some(band) = spec.origin.band() {
            if !band.contains(&spec.priority) {
                return Err(PipelineError::PriorityBandViolation {
                    origin: spec.origin.to_string(),
                    priority: spec.priority,
                });
            }
        }
        match spec.action {
            RuleAction::GotoTable(to) if to <= spec.table_index || to >= tables => {
                return Err(PipelineError::InvalidGoto {
                    from: spec.table_index,
                    to,
                })
            }
            RuleAction::RateLimit { window_ticks: 0, .. } => return Err(PipelineError::EmptyWindow),
            _ => {}
        }
        if spec.table_index == last && !matches!(spec.action, RuleAction::Drop | RuleAction::RateLimit { .. }) {
            return Err(PipelineError::ActionNotPermitted {
                action: spec.action.to_string(),
            });
        }
        Ok(())
    }

    pub fn install_rule(&mut self, spec: RuleSpec) -> Result<RuleId, PipelineError> {
        self.check_spec(&spec)?;
        let id = RuleId(self.next_rule_id);
        self.next_rule_id += 1;
        let index = spec.table_index;
        self.tables[index].insert(FlowRule::from_spec(spec, id));
        Ok(id)
    }

    pub fn remove_rules_by_origin(&mut self, filter: &OriginFilter) -> usize {
        self.remove_rules_where(|r| filter.matches(&r.origin))
    }

    pub fn remove_rules_where(&mut self, mut remove: impl FnMut(&FlowRule) -> bool) -> usize {
        let mut count = 0;
        for table in &mut self.tables {
            for gone in table.retain(|r| !remove(r)) {
                self.meters.remove(&gone.rule_id);
                count += 1;
            }
        }
        count
    }

    /// Full scan of every structural invariant.
    pub fn check_invariants(&self) -> Result<(), PipelineError> {
        for (index, table) in self.tables.iter().enumerate() {
            for rule in table.rules() {
                if rule.table_index != index {
                    return Err(PipelineError::MalformedPipeline(format!(
                        "{} filed under table {index} but claims {}",
                        rule.rule_id, rule.table_index
                    )));
                }
                self.check_spec(&rule.spec())?;
            }
        }
        Ok(())
    }

    fn trace(&self, pkt: &PacketHeader) -> Result<Trace, PipelineError> {
        let last = self.last_table();
        let mut meters = Vec::new();
        let mut index = 0;
        let mut pending = None;
        while index < last {
            let Some(rule) = self.tables[index].match_packet(pkt) else {
                return Ok(Trace {
                    meters,
                    verdict: PipelineVerdict::SendToController,
                });
            };
            match rule.action {
                RuleAction::Drop => {
                    return Ok(Trace {
                        meters,
                        verdict: PipelineVerdict::Drop,
                    })
                }
                RuleAction::SendToController => {
                    return Ok(Trace {
                        meters,
                        verdict: PipelineVerdict::SendToController,
                    })
                }
                RuleAction::Forward(port) => {
                    pending = Some(port);
                    break;
                }
                RuleAction::GotoTable(to) => {
                    if to <= index || to > last {
                        return Err(PipelineError::MalformedPipeline(format!(
                            "{} jumps from table {index} to {to}",
                            rule.rule_id
                        )));
                    }
                    index = to;
                }
                RuleAction::RateLimit {
                    max_new_flows,
                    window_ticks,
                } => {
                    meters.push((rule.rule_id, max_new_flows, window_ticks));
                    index += 1;
                }
            }
        }
        let allowed = pending.map_or(PipelineVerdict::SendToController, PipelineVerdict::Forward);
        if !self.enforcement_enabled {
            return Ok(Trace {
                meters,
                verdict: allowed,
            });
        }
        let verdict = match self.tables[last].match_packet(pkt) {
            None => allowed,
            Some(rule) => match rule.action {
                RuleAction::Drop => PipelineVerdict::Drop,
                RuleAction::RateLimit {
                    max_new_flows,
                    window_ticks,
                } => {
                    meters.push((rule.rule_id, max_new_flows, window_ticks));
                    allowed
                }
                other => {
                    return Err(PipelineError::MalformedPipeline(format!(
                        "{} carries {other} in the enforcement table",
                        rule.rule_id
                    )))
                }
            },
        };
        Ok(Trace { meters, verdict })
    }

    /// Runs `pkt` through the pipeline at time `now`, updating rate-limit
    /// meters.
    pub fn process(&mut self, pkt: &PacketHeader, now: Tick) -> Result<PipelineVerdict, PipelineError> {
        let trace = self.trace(pkt)?;
        let key = pkt.flow_key();
        for (id, max, window) in trace.meters {
            if !self.meters.entry(id).or_default().admit(key, max, window, now) {
                return Ok(PipelineVerdict::RateLimited);
            }
        }
        Ok(trace.verdict)
    }

    /// Side-effect free classification; rate-limit rules admit.
    pub fn classify(&self, pkt: &PacketHeader) -> Result<PipelineVerdict, PipelineError> {
        Ok(self.trace(pkt)?.verdict)
    }
}

/// Free-function form of [`FlowTablePipeline::process`].
pub fn process_pipeline(
    pipeline: &mut FlowTablePipeline,
    pkt: &PacketHeader,
    now: Tick,
) -> Result<PipelineVerdict, PipelineError> {
    pipeline.process(pkt, now)
}
